use proptest::prelude::*;

use strip_spectra::linalg::c;
use strip_spectra::model::{sample_potential, OperatorModel, PotentialSpec};
use strip_spectra::montecarlo::{ensemble_run, EnsembleConfig};
use strip_spectra::spectral::{
    ac_criterion, density_direct, density_estimate, spectral_weights, truncation_spectral_oracle,
    AcConfig, OracleMethod, RootVector,
};

const PI: f64 = std::f64::consts::PI;

fn strip(alpha: Vec<f64>, sigma: f64) -> OperatorModel {
    OperatorModel::new(alpha, PotentialSpec::hermitian_gaussian(sigma, 1.0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn propagated_density_matches_direct_solve(alpha in prop::collection::vec(-2.5..2.5f64, 1..=3),
                                               seed in 0u64..500, n in 0usize..12, lam in -1.5..1.5f64,
                                               xr in prop::collection::vec(-1.0..1.0f64, 3)) {
        let model = strip(alpha, 0.8);
        prop_assume!(model.alpha.iter().all(|a| ((a - lam).abs() - 2.0).abs() > 1e-6));
        prop_assume!(xr[..model.l].iter().any(|v| v.abs() > 0.1));
        let sample = sample_potential(&model, n + 1, seed);
        let x = RootVector::real(&xr[..model.l]).unwrap();
        let fast = density_estimate(&model, &sample, &x, &[lam], n).unwrap().values[0];
        let slow = density_direct(&model, &sample, &x, lam, n).unwrap();
        prop_assert!(fast > 0.0);
        prop_assert!((fast - slow).abs() <= 1e-8 * slow, "{fast} vs {slow}");
    }

    #[test]
    fn spectral_weights_sum_to_one(seed in 0u64..500, sites in 1usize..30, l in 1usize..3) {
        let model = strip(vec![0.5; l], 1.0);
        let sample = sample_potential(&model, sites, seed);
        let mut x = vec![0.0; l];
        x[0] = 1.0;
        let (_, w) = spectral_weights(&model, &sample, sites, &RootVector::real(&x).unwrap()).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_site_oracle_is_a_lorentzian() {
    let model = OperatorModel::new(vec![0.3], PotentialSpec::zero()).unwrap();
    let sample = sample_potential(&model, 1, 0);
    let x = RootVector::real(&[1.0]).unwrap();
    let eta = 0.01;
    let grid = [0.3, 0.31, 0.5];
    for method in [OracleMethod::Eigen, OracleMethod::BlockResolvent] {
        let g = truncation_spectral_oracle(&model, &sample, 1, &x, eta, &grid, method).unwrap();
        for (lam, v) in grid.iter().zip(&g.values) {
            let want = eta / (PI * ((lam - 0.3).powi(2) + eta * eta));
            assert!(
                (v - want).abs() < 1e-10 * want,
                "{method:?} at {lam}: {v} vs {want}"
            );
        }
    }
}

#[test]
fn oracle_methods_agree_on_a_strip() {
    let model = strip(vec![0.0, 5.0], 0.5);
    let sample = sample_potential(&model, 150, 8);
    let x = RootVector::new(&[c(0.6, 0.0), c(0.0, 0.8)]).unwrap();
    let grid: Vec<f64> = (0..41).map(|i| -1.0 + i as f64 * 0.05).collect();
    let a = truncation_spectral_oracle(&model, &sample, 150, &x, 0.03, &grid, OracleMethod::Eigen)
        .unwrap();
    let b = truncation_spectral_oracle(
        &model,
        &sample,
        150,
        &x,
        0.03,
        &grid,
        OracleMethod::BlockResolvent,
    )
    .unwrap();
    for (p, q) in a.values.iter().zip(&b.values) {
        assert!((p - q).abs() < 1e-9 * p.abs().max(1e-3));
    }
    let auto =
        truncation_spectral_oracle(&model, &sample, 150, &x, 0.03, &grid, OracleMethod::Auto)
            .unwrap();
    assert_eq!(auto.method, OracleMethod::Eigen);
}

#[test]
fn free_strip_ac_integrals_are_bounded() {
    let model = OperatorModel::free(vec![0.0, 5.0]).unwrap();
    let sample = sample_potential(&model, 401, 0);
    let x = RootVector::real(&[1.0, 0.0]).unwrap();
    let cfg = AcConfig {
        grid_points: 41,
        m_min: 20,
    };
    let report = ac_criterion(&model, &sample, &x, 0.6, 1.4, &[50, 100, 200, 400], &cfg).unwrap();
    assert_eq!(report.m_star, 0);
    assert_eq!(report.m, 20);
    assert!(report.spread() <= 10.0, "{}", report.spread());
    // Z and D^{-1} C vanish without a potential, so y does not move with n
    let c_y = report.depths[0].c_y;
    assert!(report
        .depths
        .iter()
        .all(|d| (d.c_y - c_y).abs() <= 1e-12 * c_y));
    assert_eq!(report.cs_violations, 0);
    assert!(report.schur_bound_holds);
    assert!(report.excluded.is_empty());
}

#[test]
fn ac_rejects_depths_below_boundary_index() {
    let model = strip(vec![0.0, 5.0], 0.3);
    let sample = sample_potential(&model, 101, 1);
    let x = RootVector::real(&[1.0, 0.0]).unwrap();
    assert!(ac_criterion(
        &model,
        &sample,
        &x,
        0.6,
        1.4,
        &[5, 100],
        &AcConfig::default()
    )
    .is_err());
}

fn ensemble(seed: u64) -> EnsembleConfig {
    EnsembleConfig {
        num_samples: 300,
        n_end: 80,
        m: 0,
        lambdas: vec![0.95, 1.05],
        interval: (0.9, 1.1),
        master_seed: seed,
        plateau_reference: None,
    }
}

#[test]
fn ensemble_is_independent_of_thread_count() {
    let model = strip(vec![0.0, 5.0], 0.5);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| ensemble_run(&model, &ensemble(5)).unwrap())
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one, four);
    assert_eq!(one.to_csv(), four.to_csv());
    assert!(one.report.all_pass(), "{:?}", one.report.records);
}

#[test]
fn ensemble_rejects_bad_configs() {
    let model = strip(vec![0.0, 5.0], 0.5);
    let mut cfg = ensemble(1);
    cfg.lambdas = vec![2.0];
    assert!(ensemble_run(&model, &cfg).is_err());
    let mut cfg = ensemble(1);
    cfg.num_samples = 0;
    assert!(ensemble_run(&model, &cfg).is_err());
    assert!(serde_json::from_str::<EnsembleConfig>(r#"{"num_samples": 1, "n_end": 5, "lambdas": [1.0], "interval": [0.9, 1.1], "master_seed": 0, "extra": 1}"#).is_err());
}
