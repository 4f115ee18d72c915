use std::fmt::Write as _;

use serde::Serialize;
use serde_json::Value;

use strip_spectra::channels::{band_structure, spectral_gap, SpectralGap};
use strip_spectra::linalg::{self, c};
use strip_spectra::model::{
    fold_full_line, restrict, sample_potential, sample_potential_keyed, FullLineWindow,
    OperatorModel, PotentialSpec,
};
use strip_spectra::montecarlo::{ensemble_run, seed_plan, BoundReport, EnsembleConfig};
use strip_spectra::schur::{
    find_rank_deficiencies, schur_run, RankDiagnostic, RankScanConfig, TAU_RANK,
};
use strip_spectra::spectral::{density_estimate, trapezoid, uniform_grid, RootVector};
use strip_spectra::transfer::{
    boundary_data_regularized, transfer_from_boundary, transfer_product, truncate_with_threshold,
};

use crate::config::{
    typed, BandsConfig, DensityConfig, FoldConfig, McConfig, RankScanCliConfig, SchurStatsConfig,
    VerifyConfig,
};
use crate::output::OutDir;
use crate::CliError;

/// Tolerance of the boundary-data cross-check.
pub const VERIFY_TOL: f64 = 1e-8;
/// Tolerance of the folded-versus-full-line eigenvalue comparison.
pub const FOLD_TOL: f64 = 1e-10;

fn model(alpha: &[f64], potential: &PotentialSpec) -> Result<OperatorModel, CliError> {
    Ok(OperatorModel::new(alpha.to_vec(), potential.clone())?)
}

pub fn bands(doc: &Value, out: Option<&mut OutDir>) -> Result<(), CliError> {
    let cfg: BandsConfig = typed(doc)?;
    let bs = band_structure(&OperatorModel::free(cfg.alpha)?);
    println!("Σ = {}", bs.sigma_string());
    println!("Σ₀ = {}", bs.sigma0_string());
    if let Some(out) = out {
        out.write_json("bands.json", &bs)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DensitySummary {
    n: usize,
    integral: f64,
    grid_points: usize,
    x: Vec<[f64; 2]>,
    degenerate: Vec<f64>,
}

pub fn density(doc: &Value, seed: u64, out: &mut OutDir) -> Result<(), CliError> {
    let cfg: DensityConfig = typed(doc)?;
    let model = model(&cfg.alpha, &cfg.potential)?;
    let sample = sample_potential(&model, cfg.depth + 1, seed);
    let x = if cfg.x.is_empty() {
        let mut e = vec![0.0; model.l];
        e[0] = 1.0;
        RootVector::real(&e)?
    } else {
        RootVector::real(&cfg.x)?
    };
    let grid = uniform_grid(cfg.grid.a, cfg.grid.b, cfg.grid.points);
    let est = density_estimate(&model, &sample, &x, &grid, cfg.depth)?;
    let mut csv = String::from("lambda,density,cumulative_integral\n");
    let mut cumulative = 0.0;
    for (i, (&lam, &f)) in grid.iter().zip(&est.values).enumerate() {
        if i > 0 {
            cumulative += 0.5 * (grid[i] - grid[i - 1]) * (f + est.values[i - 1]);
        }
        let _ = writeln!(csv, "{lam},{f},{cumulative}");
    }
    let integral = trapezoid(&grid, &est.values);
    println!(
        "integral of f_{} over [{}, {}] = {integral:.6}",
        cfg.depth, cfg.grid.a, cfg.grid.b
    );
    out.write_csv("density.csv", &csv)?;
    out.write_json(
        "density.json",
        &DensitySummary {
            n: cfg.depth,
            integral,
            grid_points: grid.len(),
            x: est.x,
            degenerate: est.degenerate,
        },
    )
}

#[derive(Serialize)]
struct SchurSummary {
    lambda: f64,
    gap: SpectralGap,
    m_star: usize,
    m: usize,
    n_end: usize,
    y_estimate_norm: f64,
}

fn boundary_index(requested: Option<usize>, m_star: usize) -> Result<usize, CliError> {
    match requested {
        Some(m) if m < m_star => Err(CliError::Config(format!(
            "m = {m} is below m* = {m_star}; the truncated potential would exceed the threshold"
        ))),
        Some(m) => Ok(m),
        None => Ok(m_star),
    }
}

pub fn schur_stats(doc: &Value, seed: u64, out: &mut OutDir) -> Result<(), CliError> {
    let cfg: SchurStatsConfig = typed(doc)?;
    let (a, b) = cfg.interval;
    if !(a <= cfg.lambda && cfg.lambda <= b) {
        return Err(CliError::Config(format!(
            "lambda {} outside [{a}, {b}]",
            cfg.lambda
        )));
    }
    let model = model(&cfg.alpha, &cfg.potential)?;
    let sample = sample_potential(&model, cfg.depth + 1, seed);
    let gap = spectral_gap(&model, a, b)?;
    let truncated = truncate_with_threshold(&sample, gap.threshold());
    let m = boundary_index(cfg.m, truncated.m_star)?;
    if m > cfg.depth {
        return Err(CliError::Config(format!(
            "boundary index {m} exceeds depth {}",
            cfg.depth
        )));
    }
    let split = gap.split_at(&model, c(cfg.lambda, 0.0));
    let run = schur_run(&split, &truncated.sample, m, cfg.depth)?;
    let mut csv = String::from("n,x_norm,z_norm,dinv_norm_bound,dinv_c_norm\n");
    for r in &run.records {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.site, r.x_norm, r.z_norm, r.dinv_norm_bound, r.dinv_c_norm
        );
    }
    let summary = SchurSummary {
        lambda: cfg.lambda,
        m_star: truncated.m_star,
        m,
        n_end: cfg.depth,
        y_estimate_norm: linalg::op_norm(&run.y_estimate),
        gap,
    };
    println!(
        "gap {:.6}, C_Q {:.6}, m* = {}, final ||X|| = {:.6e}, final ||Z|| = {:.6e}",
        summary.gap.gap,
        summary.gap.cq,
        summary.m_star,
        run.records.last().map_or(f64::NAN, |r| r.x_norm),
        run.records.last().map_or(f64::NAN, |r| r.z_norm)
    );
    out.write_csv("schur_stats.csv", &csv)?;
    out.write_json("schur_stats.json", &summary)
}

#[derive(Serialize)]
struct RankSummary {
    gap: SpectralGap,
    m_star: usize,
    m: usize,
    tau: f64,
    candidates: Vec<RankDiagnostic>,
}

pub fn rank_scan(doc: &Value, seed: u64, out: &mut OutDir) -> Result<(), CliError> {
    let cfg: RankScanCliConfig = typed(doc)?;
    let (a, b) = cfg.interval;
    let model = model(&cfg.alpha, &cfg.potential)?;
    let sample = sample_potential(&model, cfg.depth + 1, seed);
    let gap = spectral_gap(&model, a, b)?;
    let m_star = truncate_with_threshold(&sample, gap.threshold()).m_star;
    let m = boundary_index(cfg.m, m_star)?;
    let config = RankScanConfig {
        grid_points: cfg.grid_points,
        n_end: cfg.depth,
        tau: TAU_RANK,
    };
    let scan = find_rank_deficiencies(&model, &sample, m, a, b, &config)?;
    let mut csv = String::from("lambda,smin,smax,scale,relative_smin,rank_full\n");
    for d in &scan.grid {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            d.lambda,
            d.smin,
            d.smax,
            d.scale,
            d.relative_smin(),
            d.rank_full
        );
    }
    for d in &scan.candidates {
        println!(
            "rank deficiency at lambda = {:.12} (smin/scale = {:.3e})",
            d.lambda,
            d.relative_smin()
        );
    }
    println!("{} candidate(s) on [{a}, {b}]", scan.candidates.len());
    out.write_csv("rank_scan.csv", &csv)?;
    out.write_json(
        "candidates.json",
        &RankSummary {
            gap: scan.gap,
            m_star: scan.m_star,
            m,
            tau: TAU_RANK,
            candidates: scan.candidates,
        },
    )
}

#[derive(Serialize)]
struct VerifySummary {
    l: usize,
    depth: usize,
    z: [f64; 2],
    samples: usize,
    max_relative_error: f64,
    tolerance: f64,
    regularized: usize,
    pass: bool,
}

pub fn verify(doc: &Value, seed: u64, out: &mut OutDir) -> Result<bool, CliError> {
    let cfg: VerifyConfig = typed(doc)?;
    let alpha: Vec<f64> = if cfg.alpha.is_empty() {
        (0..cfg.l).map(|j| j as f64).collect()
    } else {
        cfg.alpha.clone()
    };
    if alpha.len() != cfg.l {
        return Err(CliError::Config(format!(
            "alpha has {} entries but l = {}",
            alpha.len(),
            cfg.l
        )));
    }
    let model = model(&alpha, &cfg.potential)?;
    let z = c(cfg.z.re, cfg.z.im);
    let mut worst = 0.0_f64;
    let mut regularized = 0;
    for s in 0..cfg.samples {
        let sample = sample_potential_keyed(&model, cfg.depth + 1, seed_plan(seed, s as u64));
        let bd = boundary_data_regularized(&model, &sample, 0, cfg.depth, z)?;
        let z_used = z + c(0.0, bd.shift);
        regularized += (bd.shift != 0.0) as usize;
        let got = transfer_from_boundary(&bd)?.descaled();
        let want = transfer_product(&model, &sample, 0, cfg.depth, z_used)?.descaled();
        worst = worst.max(linalg::op_norm(&(got - &want)) / linalg::op_norm(&want));
    }
    let pass = worst <= VERIFY_TOL;
    println!(
        "max relative error = {worst:.3e} over {} samples (tolerance {VERIFY_TOL:.0e})",
        cfg.samples
    );
    out.write_json(
        "verify.json",
        &VerifySummary {
            l: cfg.l,
            depth: cfg.depth,
            z: [cfg.z.re, cfg.z.im],
            samples: cfg.samples,
            max_relative_error: worst,
            tolerance: VERIFY_TOL,
            regularized,
            pass,
        },
    )?;
    Ok(pass)
}

pub fn mc(doc: &Value, seed: u64, out: &mut OutDir) -> Result<bool, CliError> {
    let cfg: McConfig = typed(doc)?;
    let model = model(&cfg.alpha, &cfg.potential)?;
    let ens = EnsembleConfig {
        num_samples: cfg.num_samples,
        n_end: cfg.n_end,
        m: cfg.m,
        lambdas: cfg.lambdas,
        interval: cfg.interval,
        master_seed: seed,
        plateau_reference: cfg.plateau_reference,
    };
    let result = ensemble_run(&model, &ens)?;
    let report: &BoundReport = &result.report;
    for r in &report.records {
        println!(
            "{:<24} {} empirical {:.6e} bound {:.6e}",
            r.name,
            if r.pass { "pass" } else { "FAIL" },
            r.empirical,
            r.theoretical_bound
        );
    }
    println!(
        "{} of {} trajectories failed",
        report.failures, report.samples
    );
    out.write_json("bound_report.json", report)?;
    out.write_csv("steps.csv", &result.to_csv())?;
    Ok(report.all_pass())
}

#[derive(Serialize)]
struct FoldSummary {
    full_line_alpha: Vec<f64>,
    folded_alpha: Vec<f64>,
    depth: usize,
    sigma: f64,
    max_eigenvalue_difference: f64,
    tolerance: f64,
}

pub fn fold(doc: &Value, seed: u64, out: &mut OutDir) -> Result<bool, CliError> {
    let cfg: FoldConfig = typed(doc)?;
    let l = cfg.alpha.len();
    let draw = OperatorModel::new(
        vec![0.0; l],
        PotentialSpec::hermitian_gaussian(cfg.sigma, 0.0),
    )?;
    let window =
        FullLineWindow::symmetric(sample_potential(&draw, 2 * (cfg.depth + 1), seed).matrices);
    let a_full = linalg::real_diag(&cfg.alpha);
    let (folded, sample) = fold_full_line(&a_full, &window)?;
    let mut lhs = linalg::hermitian_eigenvalues(&restrict(&folded, &sample, 0, cfg.depth)?);
    let mut rhs = linalg::hermitian_eigenvalues(&window.truncation(&a_full));
    lhs.sort_by(f64::total_cmp);
    rhs.sort_by(f64::total_cmp);
    let diff = lhs
        .iter()
        .zip(&rhs)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max);
    let pass = lhs.len() == rhs.len() && diff <= FOLD_TOL;
    println!(
        "folded width {}, max eigenvalue difference {diff:.3e} (tolerance {FOLD_TOL:.0e})",
        folded.l
    );
    out.write_csv("folded_potential.csv", &sample.to_csv())?;
    out.write_json(
        "fold.json",
        &FoldSummary {
            full_line_alpha: cfg.alpha,
            folded_alpha: folded.alpha.clone(),
            depth: cfg.depth,
            sigma: cfg.sigma,
            max_eigenvalue_difference: diff,
            tolerance: FOLD_TOL,
        },
    )?;
    Ok(pass)
}
