mod common;

use common::{check_against_product, instance};
use proptest::prelude::*;

use strip_spectra::channels::{channel_split, perturbation_bound, spectral_gap};
use strip_spectra::linalg::{self, c, CVec};
use strip_spectra::model::{sample_potential, OperatorModel, PotentialSample, PotentialSpec};
use strip_spectra::schur::{
    construct_uy, propagated_vector, rank_matrix, schur_init, schur_run, schur_run_with,
    SchurStepper,
};
use strip_spectra::transfer::{
    transfer_head, transfer_product, truncate_with_threshold, TransferMatrix,
};

#[test]
fn recursion_matches_dense_product() {
    for seed in 0..40 {
        for &(l_e, l_h) in &[(1, 1), (1, 2), (2, 1), (0, 2), (2, 0), (1, 0)] {
            let inst = instance(seed, l_e, l_h, 30);
            let (ex, ez, ed) = check_against_product(&inst);
            assert!(
                ex < 1e-8 && ez < 1e-8 && ed < 1e-8,
                "seed {seed} ({l_e},{l_h}): {ex:e} {ez:e} {ed:e}"
            );
        }
    }
}

#[test]
fn zero_perturbation_keeps_z_and_dinv_c_zero() {
    let inst = instance(7, 1, 1, 0);
    let w = linalg::zeros(4, 4);
    let mut state = schur_init(3, 1);
    for _ in 0..5 {
        state = inst.stepper.step(&state, &w).unwrap();
    }
    assert_eq!(state.z.norm(), 0.0);
    assert_eq!(state.dinv_c.norm(), 0.0);
    let s5 = inst.stepper.s.clone()
        * &inst.stepper.s
        * &inst.stepper.s
        * &inst.stepper.s
        * &inst.stepper.s;
    assert!(linalg::op_norm(&(state.x_true() - s5)) < 1e-12);
}

#[test]
fn oversized_perturbation_rejected() {
    let inst = instance(3, 1, 1, 0);
    let w = linalg::identity(4) * c(1.01 * perturbation_bound(inst.stepper.gap), 0.0);
    let state = inst.stepper.init();
    assert!(inst.stepper.step(&state, &w).is_err());
}

#[test]
fn precondition_on_gamma_rejected() {
    let s = linalg::identity(1);
    let gamma = linalg::diag(&[c(1.1, 0.0)]);
    assert!(SchurStepper::new(s, gamma, 0.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn z_stays_in_unit_ball(seed in 0u64..10_000, l_e in 0usize..3, l_h in 1usize..3) {
        let inst = instance(seed, l_e, l_h, 60);
        let mut state = inst.stepper.init();
        for w in &inst.ws {
            state = inst.stepper.step(&state, w).unwrap();
            prop_assert!(state.z_norm() <= 1.0 + 1e-12);
        }
    }
}

fn two_channel() -> OperatorModel {
    OperatorModel::new(vec![0.0, 5.0], PotentialSpec::hermitian_gaussian(0.05, 1.0)).unwrap()
}

#[test]
fn zero_potential_gives_zero_y() {
    let model = OperatorModel::free(vec![0.0, 5.0]).unwrap();
    let sample = sample_potential(&model, 50, 0);
    let gap = spectral_gap(&model, 0.5, 1.5).unwrap();
    let split = gap.split_at(&model, c(1.0, 0.0));
    let run = schur_run(&split, &sample, 0, 49).unwrap();
    assert_eq!(run.y_estimate.norm(), 0.0);
    assert_eq!(run.certificate, 0.0);
}

#[test]
fn z_decays_with_decaying_potential() {
    let model = two_channel();
    let sample = sample_potential(&model, 3000, 11);
    let gap = spectral_gap(&model, 0.5, 1.5).unwrap();
    let trunc = truncate_with_threshold(&sample, gap.threshold());
    let split = gap.split_at(&model, c(1.0, 0.0));
    let run = schur_run(&split, &trunc.sample, trunc.m_star, 2999).unwrap();
    let early = run.records[10].z_norm;
    let late = run.records.last().unwrap().z_norm;
    assert!(late < early && late < 1e-3, "{early} {late}");
    assert!(run.certificate < 1e-3);
}

#[test]
fn rank_matrix_degenerate_block() {
    let model = OperatorModel::free(vec![0.0, 5.0]).unwrap();
    let split = channel_split(&model, c(1.0, 0.0)).unwrap();
    // Q^{-1} T_head = I: the rank matrix is the bottom block of (I; 0), which vanishes
    let head = TransferMatrix::from_matrix(split.q.clone());
    let y = linalg::zeros(1, 3);
    let (a, diag) = rank_matrix(&y, &split, &head);
    assert_eq!(a.nrows(), 1);
    assert_eq!(a.norm(), 0.0);
    assert!(!diag.rank_full);
}

#[test]
fn rank_matrix_without_hyperbolic_channels() {
    let model = OperatorModel::free(vec![0.0]).unwrap();
    let split = channel_split(&model, c(0.5, 0.0)).unwrap();
    let (a, diag) = rank_matrix(&linalg::zeros(0, 2), &split, &TransferMatrix::identity(2));
    assert_eq!(a.nrows(), 0);
    assert!(diag.rank_full);
}

#[test]
fn rank_full_off_axis() {
    let model = two_channel();
    let sample = sample_potential(&model, 400, 5);
    let gap = spectral_gap(&model, 0.5, 1.5).unwrap();
    let trunc = truncate_with_threshold(&sample, gap.threshold());
    let m = trunc.m_star.max(5);
    let z = c(1.0, 0.5 * gap.height);
    let split = gap.split_at(&model, z);
    let run = schur_run(&split, &trunc.sample, m, 399).unwrap();
    let head = transfer_head(&model, &sample, m, z).unwrap();
    let (_, diag) = rank_matrix(&run.y_estimate, &split, &head);
    assert!(diag.rank_full);
}

/// Potential supported on sites below `m`, so the truncated tail is free and
/// `T_{0,n}(u; x) = Q (X_{m,n} y; 0)` holds exactly with `Y = D_n^{-1} C_n`.
fn head_supported(model: &OperatorModel, m: usize, len: usize, seed: u64) -> PotentialSample {
    let mut s = sample_potential(model, len, seed);
    for v in s.matrices.iter_mut().skip(m) {
        v.fill(linalg::ZERO);
    }
    s
}

#[test]
fn uy_construction_matches_direct_product() {
    let model =
        OperatorModel::new(vec![0.0, 5.0], PotentialSpec::hermitian_gaussian(0.3, 0.0)).unwrap();
    let m = 4;
    let sample = head_supported(&model, m, 40, 3);
    let gap = spectral_gap(&model, 0.5, 1.5).unwrap();
    for &lam in &[0.6, 1.0, 1.4] {
        let z = c(lam, 0.0);
        let split = gap.split_at(&model, z);
        let head = transfer_head(&model, &sample, m, z).unwrap();
        let x = CVec::from_vec(vec![c(0.3, 0.1), c(-0.7, 0.2)]);
        let mut checked = 0;
        // the direct product amplifies the residual of (u; x) along the
        // expanding channel by |gamma|^(n - m); keep n - m small
        schur_run_with(&split, &sample, m, m + 5, |site, state| {
            let uy = construct_uy(&x, &state.dinv_c, &split, &head).unwrap();
            assert!(uy.residual <= 1e-8 * (1.0 + uy.y.norm()));
            let via_schur = propagated_vector(&split, state, &uy.y);
            let mut ux = CVec::zeros(4);
            ux.rows_mut(0, 2).copy_from(&uy.u);
            ux.rows_mut(2, 2).copy_from(&x);
            let t = transfer_product(&model, &sample, 0, site, z).unwrap();
            let direct = t.descaled() * ux;
            let rel = (&via_schur - &direct).norm() / direct.norm();
            assert!(rel < 1e-7, "lambda {lam} site {site}: {rel:e}");
            checked += 1;
        })
        .unwrap();
        assert_eq!(checked, 6);
    }
}

#[test]
fn uy_without_hyperbolic_channels() {
    let model = OperatorModel::free(vec![0.0]).unwrap();
    let sample = sample_potential(&model, 10, 0);
    let split = channel_split(&model, c(0.5, 0.0)).unwrap();
    let head = transfer_head(&model, &sample, 3, c(0.5, 0.0)).unwrap();
    let x = CVec::from_vec(vec![c(1.0, 0.0)]);
    let uy = construct_uy(&x, &linalg::zeros(0, 2), &split, &head).unwrap();
    assert_eq!(uy.u.norm(), 0.0);
    let expect = &split.qinv * head.descaled() * CVec::from_vec(vec![c(0.0, 0.0), c(1.0, 0.0)]);
    assert!((uy.y - expect).norm() < 1e-12);
}
