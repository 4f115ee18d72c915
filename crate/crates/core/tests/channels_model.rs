use proptest::prelude::*;

use strip_spectra::channels::{
    band_structure, channel_split, classify_channels, elliptic_momentum, free_transfer,
    hyperbolic_multiplier, spectral_gap, ChannelKind,
};
use strip_spectra::linalg::{self, c, CMat};
use strip_spectra::model::{
    build_model, restrict, sample_potential, sample_potential_keyed, ModelConfig, OperatorModel,
    PotentialSpec, StreamKey,
};

fn alpha_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0..4.0f64, 1..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn sigma_is_the_open_band_union_without_edges(alpha in alpha_strategy(), lam in -7.0..7.0f64) {
        let model = OperatorModel::free(alpha.clone()).unwrap();
        let bs = band_structure(&model);
        for w in bs.sigma.windows(2) {
            prop_assert!(w[0].1 <= w[1].0);
        }
        let on_edge = alpha.iter().any(|a| ((a - lam).abs() - 2.0).abs() < 1e-12);
        if !on_edge {
            let inside = alpha.iter().any(|a| (a - lam).abs() < 2.0);
            prop_assert_eq!(bs.contains(lam), inside);
            let in_all = alpha.iter().all(|a| (a - lam).abs() < 2.0);
            let in_sigma0 = bs.sigma0.is_some_and(|(lo, hi)| lo < lam && lam < hi);
            prop_assert_eq!(in_sigma0, in_all);
        }
    }

    #[test]
    fn channel_roots_solve_their_equations(w_re in -6.0..6.0f64, w_im in -1.0..1.0f64) {
        let w = c(w_re, w_im);
        let k = elliptic_momentum(w);
        prop_assert!((k.cos() * 2.0 - w).norm() < 1e-10);
        let g = hyperbolic_multiplier(w);
        prop_assert!(g.norm() >= 1.0 - 1e-12);
        prop_assert!((g + 1.0 / g - w).norm() < 1e-10 * g.norm());
    }

    #[test]
    fn q_diagonalizes_the_free_transfer(alpha in alpha_strategy(), re in -6.0..6.0f64, im in -0.3..0.3f64) {
        let model = OperatorModel::free(alpha).unwrap();
        let z = c(re, im);
        prop_assume!(classify_channels(&model, re).iter().all(|&k| k != ChannelKind::Parabolic));
        prop_assume!(model.alpha.iter().all(|a| ((a - re).abs() - 2.0).abs() > 1e-3));
        let split = channel_split(&model, z).unwrap();
        let id = linalg::identity(2 * model.l);
        prop_assert!(linalg::op_norm(&(&split.q * &split.qinv - &id)) < 1e-9 * split.cq * split.cq);
        let conj = &split.qinv * free_transfer(&model, z) * &split.q;
        let want = linalg::diag(&split.t_diagonal());
        prop_assert!(linalg::op_norm(&(conj - want)) < 1e-9 * split.cq * split.cq);
    }

    // the gap and C_Q found on the grid hold at random points of the rectangle
    #[test]
    fn gap_holds_off_grid(alpha in alpha_strategy(), centre in -5.0..5.0f64, half in 0.02..0.3f64,
                          s in 0.0..1.0f64, t in -1.0..1.0f64) {
        let model = OperatorModel::free(alpha).unwrap();
        let (a, b) = (centre - half, centre + half);
        let Ok(gap) = spectral_gap(&model, a, b) else { return Ok(()) };
        let z = c(a + s * (b - a), t * gap.height);
        let split = gap.split_at(&model, z);
        for g in &split.gamma {
            prop_assert!(g.norm().ln() >= 2.0 * gap.gap);
        }
        for k in &split.k {
            prop_assert!(k.im.abs() <= gap.gap);
        }
        prop_assert!(linalg::op_norm(&split.q) <= gap.cq);
        prop_assert!(linalg::op_norm(&split.qinv) <= gap.cq);
    }

    #[test]
    fn samples_are_hermitian_and_reproducible(seed in 0u64..10_000, l in 1usize..4, sigma in 0.0..3.0f64) {
        let model = OperatorModel::new(vec![0.0; l], PotentialSpec::hermitian_gaussian(sigma, 1.0)).unwrap();
        let a = sample_potential(&model, 20, seed);
        let b = sample_potential(&model, 20, seed);
        prop_assert_eq!(&a, &b);
        for v in &a.matrices {
            prop_assert!(linalg::hermitian_asymmetry(v) < 1e-14);
        }
        // a longer draw extends a shorter one site by site
        let longer = sample_potential(&model, 30, seed);
        prop_assert_eq!(&longer.matrices[..20], &a.matrices[..]);
    }

    #[test]
    fn rotating_a_preserves_the_spectrum(seed in 0u64..1000, depth in 1usize..8) {
        let l = 3;
        let raw = CMat::from_fn(l, l, |i, j| c(((i * 7 + j * 3 + seed as usize) % 5) as f64 - 2.0,
                                              if i == j { 0.0 } else { 0.3 * (i as f64 - j as f64) }));
        let a = (&raw + raw.adjoint()) * c(0.5, 0.0);
        let vs: Vec<CMat> = (0..=depth)
            .map(|n| {
                let m = CMat::from_fn(l, l, |i, j| c(((n + i * j + seed as usize) % 3) as f64 * 0.2, 0.1 * (i as f64 - j as f64)));
                (&m + m.adjoint()) * c(0.5, 0.0)
            })
            .collect();
        let model = build_model(&a, PotentialSpec::user(vs.clone())).unwrap();
        let sample = sample_potential(&model, depth + 1, 0);
        let mut got = linalg::hermitian_eigenvalues(&restrict(&model, &sample, 0, depth).unwrap());
        let mut h = linalg::zeros(l * (depth + 1), l * (depth + 1));
        for (k, v) in vs.iter().enumerate() {
            linalg::set_block(&mut h, k * l, k * l, &(&a + v));
            if k < depth {
                linalg::set_block(&mut h, k * l, (k + 1) * l, &(-linalg::identity(l)));
                linalg::set_block(&mut h, (k + 1) * l, k * l, &(-linalg::identity(l)));
            }
        }
        let mut want = linalg::hermitian_eigenvalues(&h);
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        for (p, q) in got.iter().zip(&want) {
            prop_assert!((p - q).abs() < 1e-10);
        }
    }
}

#[test]
fn streams_are_independent_per_sample() {
    let model = OperatorModel::new(vec![0.0, 1.0], PotentialSpec::diagonal_iid(1.0, 0.0)).unwrap();
    let a = sample_potential_keyed(&model, 5, StreamKey::new(1, 0));
    let b = sample_potential_keyed(&model, 5, StreamKey::new(1, 1));
    assert_ne!(a.matrices, b.matrices);
    for v in &a.matrices {
        for i in 0..2 {
            assert!(v[(i, i)].re.abs() <= 1.0 && v[(i, i)].im == 0.0);
        }
        assert_eq!(v[(0, 1)], c(0.0, 0.0));
    }
}

#[test]
fn model_config_round_trips_and_validates() {
    let json = r#"{"l": 2, "alpha": [0.0, 5.0], "potential": {"kind": "hermitian-gaussian", "sigma": 0.5}}"#;
    let cfg: ModelConfig = serde_json::from_str(json).unwrap();
    let model = cfg.build().unwrap();
    assert_eq!(model.alpha, vec![0.0, 5.0]);
    let again: ModelConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(again, cfg);

    let wrong_l: ModelConfig =
        serde_json::from_str(r#"{"l": 3, "alpha": [0.0], "potential": {"kind": "zero"}}"#).unwrap();
    assert!(wrong_l.build().is_err());
    assert!(serde_json::from_str::<ModelConfig>(
        r#"{"l": 1, "alpha": [0.0], "potential": {"kind": "zero"}, "x": 1}"#
    )
    .is_err());
}
