//! Spectral measure at a root vector: the transfer-matrix density estimate,
//! the fourth-moment integrals of the absolute-continuity criterion and an
//! independent finite-truncation oracle.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{spectral_gap, SpectralGap, PARABOLIC_TOL};
use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, CVec, ONE};
use crate::model::{restrict, OperatorModel, PotentialSample};
use crate::schur::{construct_uy, propagated_log_norm, schur_run_with};
use crate::transfer::{step_matrix, transfer_head, transfer_product, truncate_with_threshold};

/// Unit vector `x` together with an orthonormal basis of `{v : x* v = 0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct RootVector {
    pub x: CVec,
    pub kernel_basis: CMat,
}

impl RootVector {
    pub fn new(x: &[Complex64]) -> Result<Self> {
        let v = CVec::from_column_slice(x);
        let norm = v.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Config(
                "root vector must be nonzero and finite".into(),
            ));
        }
        let x = v / c(norm, 0.0);
        let l = x.len();
        // Gram-Schmidt of the standard basis against x, keeping the l - 1
        // directions with the largest residuals
        let mut basis: Vec<CVec> = vec![x.clone()];
        let mut order: Vec<usize> = (0..l).collect();
        order.sort_by(|&i, &j| {
            x[i].norm()
                .partial_cmp(&x[j].norm())
                .unwrap()
                .then(i.cmp(&j))
        });
        for &i in &order {
            if basis.len() == l {
                break;
            }
            let mut e = CVec::zeros(l);
            e[i] = ONE;
            for _ in 0..2 {
                for b in &basis {
                    let p = b.dotc(&e);
                    e -= b * p;
                }
            }
            let n = e.norm();
            if n > 1e-8 {
                basis.push(e / c(n, 0.0));
            }
        }
        let kernel_basis = if l == 1 {
            linalg::zeros(1, 0)
        } else {
            CMat::from_columns(&basis[1..])
        };
        Ok(Self { x, kernel_basis })
    }

    pub fn real(x: &[f64]) -> Result<Self> {
        Self::new(&x.iter().map(|&v| c(v, 0.0)).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// `f_n(lambda) = 1 / (pi * min_{v in K} ||T_{0,n}(x + v; 0)||^2)` on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub n: usize,
    /// `x` as `[re, im]` pairs.
    pub x: Vec<[f64; 2]>,
    /// Grid points where the minimization broke down (value reported as 0).
    pub degenerate: Vec<f64>,
}

/// Orthonormal-column factorization `M = Q R` of `T_{0,k} (I; 0)` advanced one
/// transfer step at a time, carrying `y = R^{-*} x` so that
/// `x* (M* M)^{-1} x = ||y||^2`.
#[derive(Debug, Clone)]
pub struct DensityPropagator {
    q: CMat,
    y: CVec,
    log_y: f64,
    pub steps: usize,
    degenerate: bool,
}

/// Thin QR by twice-iterated classical Gram-Schmidt; `None` if rank-deficient.
fn thin_qr(m: &CMat) -> Option<(CMat, CMat)> {
    let (rows, cols) = m.shape();
    let mut q = m.clone();
    let mut r = linalg::zeros(cols, cols);
    let scale = m.norm().max(f64::MIN_POSITIVE);
    for j in 0..cols {
        for _ in 0..2 {
            for i in 0..j {
                let p = q.column(i).dotc(&q.column(j));
                r[(i, j)] += p;
                let qi = q.column(i).into_owned();
                let mut col = q.column_mut(j);
                col -= qi * p;
            }
        }
        let n = q.column(j).norm();
        if !(n > 1e-14 * scale) {
            return None;
        }
        r[(j, j)] = c(n, 0.0);
        let mut col = q.column_mut(j);
        col /= c(n, 0.0);
    }
    debug_assert_eq!(q.nrows(), rows);
    Some((q, r))
}

impl DensityPropagator {
    pub fn new(x: &RootVector) -> Self {
        let l = x.len();
        let mut q = linalg::zeros(2 * l, l);
        linalg::set_block(&mut q, 0, 0, &linalg::identity(l));
        Self {
            q,
            y: x.x.clone(),
            log_y: 0.0,
            steps: 0,
            degenerate: false,
        }
    }

    /// Applies the step matrix `t`.
    pub fn step(&mut self, t: &CMat) {
        if self.degenerate {
            return;
        }
        let m = t * &self.q;
        match thin_qr(&m) {
            Some((q, r)) => {
                self.q = q;
                match r.adjoint().solve_lower_triangular(&self.y) {
                    Some(y) => {
                        self.y = y;
                        let s = self.y.norm();
                        if s > 0.0 && s.is_finite() {
                            self.y /= c(s, 0.0);
                            self.log_y += s.ln();
                        } else {
                            self.degenerate = true;
                        }
                    }
                    None => self.degenerate = true,
                }
            }
            None => self.degenerate = true,
        }
        self.steps += 1;
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// `f = ||y||^2 / pi`, zero if the factorization broke down.
    pub fn density(&self) -> f64 {
        if self.degenerate {
            return 0.0;
        }
        (2.0 * self.log_y).exp() * self.y.norm_squared() / std::f64::consts::PI
    }
}

fn check_grid(model: &OperatorModel, grid: &[f64]) -> Result<()> {
    for &lam in grid {
        for &a in &model.alpha {
            let offset = (a - lam).abs() - 2.0;
            if offset.abs() <= PARABOLIC_TOL {
                return Err(Error::Parabolic {
                    channel: 0,
                    lambda: lam,
                    offset,
                });
            }
        }
    }
    Ok(())
}

fn density_at(
    model: &OperatorModel,
    sample: &PotentialSample,
    x: &RootVector,
    lambda: f64,
    n: usize,
) -> (f64, bool) {
    let a = model.a_diag();
    let z = c(lambda, 0.0);
    let mut prop = DensityPropagator::new(x);
    for k in 0..=n {
        prop.step(&step_matrix(&(&a + &sample.matrices[k]), z));
    }
    (prop.density(), prop.is_degenerate())
}

/// Density estimate `f_n` on `grid` from the product `T_{0,n}` (sites `0..=n`).
pub fn density_estimate(
    model: &OperatorModel,
    sample: &PotentialSample,
    x: &RootVector,
    grid: &[f64],
    n: usize,
) -> Result<DensityEstimate> {
    if n >= sample.len() {
        return Err(Error::IndexOutOfRange(format!(
            "depth {n} with {} sampled sites",
            sample.len()
        )));
    }
    if x.len() != model.l {
        return Err(Error::Dimension(format!(
            "root vector of length {} for width {}",
            x.len(),
            model.l
        )));
    }
    check_grid(model, grid)?;
    let results: Vec<(f64, bool)> = grid
        .par_iter()
        .map(|&lam| density_at(model, sample, x, lam, n))
        .collect();
    let degenerate = grid
        .iter()
        .zip(&results)
        .filter(|(_, r)| r.1)
        .map(|(&l, _)| l)
        .collect();
    Ok(DensityEstimate {
        grid: grid.to_vec(),
        values: results.iter().map(|r| r.0).collect(),
        n,
        x: x.x.iter().map(|z| [z.re, z.im]).collect(),
        degenerate,
    })
}

/// Direct evaluation: least squares for `min_w ||M (x + B w)||` with the
/// de-scaled `M = T_{0,n} (I; 0)`. Loses accuracy once hyperbolic growth
/// dominates; kept as a cross-check for short products.
pub fn density_direct(
    model: &OperatorModel,
    sample: &PotentialSample,
    x: &RootVector,
    lambda: f64,
    n: usize,
) -> Result<f64> {
    let l = model.l;
    let t = transfer_product(model, sample, 0, n, c(lambda, 0.0))?;
    let m = linalg::block(&t.entries, 0, 0, 2 * l, l);
    let mx = &m * &x.x;
    let min_norm = if l == 1 {
        mx.norm()
    } else {
        let mb = &m * &x.kernel_basis;
        let rhs = CMat::from_column_slice(2 * l, 1, (-&mx).as_slice());
        let w = linalg::pinv_solve(&mb, &rhs, 1e-14);
        (mx + mb * w.column(0)).norm()
    };
    Ok((-2.0 * t.log_scale).exp() / (std::f64::consts::PI * min_norm * min_norm))
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

pub fn uniform_grid(a: f64, b: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5 * (a + b)],
        _ => (0..count)
            .map(|i| a + (b - a) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// Integrals for one depth `n` of the absolute-continuity criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcDepth {
    pub n: usize,
    /// `int ||T_{0,n}(u; x)||^4 dlambda` over the retained grid.
    pub integral_t4: f64,
    /// `int ||X_{m,n}||^4 dlambda`.
    pub integral_x4: f64,
    /// `sup ||y||` over the grid at this depth.
    pub c_y: f64,
    /// Largest `pi^2 f_n^2 / ||T(u; x)||^4` seen on the grid.
    pub max_cs_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcReport {
    pub gap: SpectralGap,
    pub m: usize,
    pub m_star: usize,
    pub grid: Vec<f64>,
    pub depths: Vec<AcDepth>,
    /// Running minimum of `integral_t4` along `n_list`.
    pub liminf_estimate: Vec<f64>,
    /// Grid energies dropped because the rank condition failed.
    pub excluded: Vec<f64>,
    /// Grid points where `pi^2 f^2 <= ||T(u; x)||^4 (1 + 1e-9)` fails.
    pub cs_violations: usize,
    /// Whether `int ||T(u;x)||^4 <= (C_Q C_y)^4 int ||X||^4` held at every depth.
    pub schur_bound_holds: bool,
}

impl AcReport {
    /// `max / min` of the per-depth integrals.
    pub fn spread(&self) -> f64 {
        let vals: Vec<f64> = self.depths.iter().map(|d| d.integral_t4).collect();
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        max / min
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AcConfig {
    pub grid_points: usize,
    /// Lower bound on the boundary index; the actual `m` is `max(m_min, m*)`.
    pub m_min: usize,
}

impl Default for AcConfig {
    fn default() -> Self {
        Self {
            grid_points: 201,
            m_min: 20,
        }
    }
}

struct PointResult {
    /// Per depth: `(log ||T(u;x)||, ||X||, ||y||, f_n)`.
    values: Vec<(f64, f64, f64, f64)>,
    rank_ok: bool,
}

#[allow(clippy::too_many_arguments)]
fn ac_point(
    model: &OperatorModel,
    sample: &PotentialSample,
    hat: &PotentialSample,
    gap: &SpectralGap,
    x: &RootVector,
    m: usize,
    n_list: &[usize],
    lambda: f64,
) -> Result<PointResult> {
    let z = c(lambda, 0.0);
    let split = gap.split_at(model, z);
    let head = transfer_head(model, sample, m, z)?;
    let n_max = *n_list.iter().max().unwrap();
    let a = model.a_diag();
    let mut density = DensityPropagator::new(x);
    for k in 0..m {
        density.step(&step_matrix(&(&a + &sample.matrices[k]), z));
    }
    let mut values = Vec::with_capacity(n_list.len());
    let mut rank_ok = true;
    let mut failure = None;
    schur_run_with(&split, hat, m, n_max, |site, state| {
        density.step(&step_matrix(&(&a + &sample.matrices[site]), z));
        if !rank_ok || failure.is_some() || !n_list.contains(&site) {
            return;
        }
        match construct_uy(&x.x, &state.dinv_c, &split, &head) {
            Ok(uy) => {
                let log_t = propagated_log_norm(&split, state, &uy.y);
                values.push((log_t, state.x_norm(), uy.y.norm(), density.density()));
            }
            Err(Error::RankDeficient { .. }) => rank_ok = false,
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(PointResult { values, rank_ok })
}

/// Fourth-moment integrals of `||T_{0,n}(u_{lambda,n}; x)||` and `||X_{m,n}||`
/// over `[a, b]` for every depth in `n_list`.
pub fn ac_criterion(
    model: &OperatorModel,
    sample: &PotentialSample,
    x: &RootVector,
    a: f64,
    b: f64,
    n_list: &[usize],
    config: &AcConfig,
) -> Result<AcReport> {
    if n_list.is_empty() {
        return Err(Error::Config("n_list is empty".into()));
    }
    let mut n_sorted = n_list.to_vec();
    n_sorted.sort_unstable();
    n_sorted.dedup();
    let gap = spectral_gap(model, a, b)?;
    let truncated = truncate_with_threshold(sample, gap.threshold());
    let m = config.m_min.max(truncated.m_star);
    if n_sorted[0] < m || *n_sorted.last().unwrap() >= sample.len() {
        return Err(Error::Config(format!(
            "depths must lie in [{m}, {}), got {:?}",
            sample.len(),
            n_sorted
        )));
    }
    let grid = uniform_grid(a, b, config.grid_points);
    let points: Vec<PointResult> = grid
        .par_iter()
        .map(|&lam| ac_point(model, sample, &truncated.sample, &gap, x, m, &n_sorted, lam))
        .collect::<Result<_>>()?;

    let kept: Vec<usize> = (0..grid.len()).filter(|&i| points[i].rank_ok).collect();
    let excluded = (0..grid.len())
        .filter(|&i| !points[i].rank_ok)
        .map(|i| grid[i])
        .collect();
    let kept_grid: Vec<f64> = kept.iter().map(|&i| grid[i]).collect();
    let pi2 = std::f64::consts::PI.powi(2);
    let mut cs_violations = 0;
    let mut schur_bound_holds = true;
    let mut depths = Vec::with_capacity(n_sorted.len());
    for (d, &n) in n_sorted.iter().enumerate() {
        let t4: Vec<f64> = kept
            .iter()
            .map(|&i| (4.0 * points[i].values[d].0).exp())
            .collect();
        let x4: Vec<f64> = kept
            .iter()
            .map(|&i| points[i].values[d].1.powi(4))
            .collect();
        let c_y = kept
            .iter()
            .map(|&i| points[i].values[d].2)
            .fold(0.0, f64::max);
        let mut max_cs_ratio = 0.0_f64;
        for &i in &kept {
            let (log_t, _, _, f) = points[i].values[d];
            let ratio = pi2 * f * f * (-4.0 * log_t).exp();
            max_cs_ratio = max_cs_ratio.max(ratio);
            if ratio > 1.0 + 1e-9 {
                cs_violations += 1;
            }
        }
        let integral_t4 = trapezoid(&kept_grid, &t4);
        let integral_x4 = trapezoid(&kept_grid, &x4);
        if integral_t4 > (gap.cq * c_y).powi(4) * integral_x4 * (1.0 + 1e-9) {
            schur_bound_holds = false;
        }
        depths.push(AcDepth {
            n,
            integral_t4,
            integral_x4,
            c_y,
            max_cs_ratio,
        });
    }
    let mut liminf_estimate = Vec::with_capacity(depths.len());
    let mut running = f64::INFINITY;
    for d in &depths {
        running = running.min(d.integral_t4);
        liminf_estimate.push(running);
    }
    Ok(AcReport {
        gap,
        m,
        m_star: truncated.m_star,
        grid,
        depths,
        liminf_estimate,
        excluded,
        cs_violations,
        schur_bound_holds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMethod {
    /// Dense Hermitian eigendecomposition of the restriction.
    Eigen,
    /// Backward matrix continued fraction for the corner block of the resolvent.
    BlockResolvent,
    /// `Eigen` up to dimension 1200, `BlockResolvent` above.
    Auto,
}

/// Smoothed spectral density `g_eta` of the truncation `H_{0,N-1}` at `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleDensity {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub eta: f64,
    pub sites: usize,
    pub method: OracleMethod,
}

/// Eigenvalues of the truncation and the spectral weights `|<psi_i, P_0 x>|^2`.
pub fn spectral_weights(
    model: &OperatorModel,
    sample: &PotentialSample,
    sites: usize,
    x: &RootVector,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if sites == 0 {
        return Err(Error::Config("truncation needs at least one site".into()));
    }
    let h = restrict(model, sample, 0, sites - 1)?;
    let (vals, vecs) = linalg::hermitian_eigen(&h);
    let l = model.l;
    let weights = (0..vals.len())
        .map(|i| {
            let overlap: Complex64 = (0..l).map(|j| vecs[(j, i)].conj() * x.x[j]).sum();
            overlap.norm_sqr()
        })
        .collect();
    Ok((vals, weights))
}

fn corner_resolvent(
    model: &OperatorModel,
    sample: &PotentialSample,
    sites: usize,
    z: Complex64,
) -> CMat {
    let a = model.a_diag();
    let l = model.l;
    let mut r = linalg::zeros(l, l);
    for k in (0..sites).rev() {
        let inner = &a + &sample.matrices[k] - linalg::identity(l) * z - &r;
        r = linalg::inverse(&inner).unwrap_or_else(|| linalg::zeros(l, l));
    }
    r
}

/// `g_eta(lambda) = Im <x, (H_{0,N-1} - lambda - i eta)^{-1} x> / pi`.
pub fn truncation_spectral_oracle(
    model: &OperatorModel,
    sample: &PotentialSample,
    sites: usize,
    x: &RootVector,
    eta: f64,
    grid: &[f64],
    method: OracleMethod,
) -> Result<OracleDensity> {
    if !(eta > 0.0) {
        return Err(Error::Config("eta must be positive".into()));
    }
    if sites == 0 || sites > sample.len() {
        return Err(Error::IndexOutOfRange(format!(
            "{sites} sites with {} sampled",
            sample.len()
        )));
    }
    let method = match method {
        OracleMethod::Auto if sites * model.l <= 1200 => OracleMethod::Eigen,
        OracleMethod::Auto => OracleMethod::BlockResolvent,
        m => m,
    };
    let pi = std::f64::consts::PI;
    let values = match method {
        OracleMethod::Eigen => {
            let (vals, weights) = spectral_weights(model, sample, sites, x)?;
            grid.par_iter()
                .map(|&lam| {
                    vals.iter()
                        .zip(&weights)
                        .map(|(&e, &w)| w * eta / ((e - lam).powi(2) + eta * eta))
                        .sum::<f64>()
                        / pi
                })
                .collect()
        }
        _ => grid
            .par_iter()
            .map(|&lam| {
                let r = corner_resolvent(model, sample, sites, c(lam, eta));
                x.x.dotc(&(&r * &x.x)).im / pi
            })
            .collect(),
    };
    Ok(OracleDensity {
        grid: grid.to_vec(),
        values,
        eta,
        sites,
        method,
    })
}

/// Smooth compactly supported bump `exp(-1 / (1 - t^2))` on `[centre - width, centre + width]`.
pub fn bump(centre: f64, width: f64) -> impl Fn(f64) -> f64 {
    move |lam| {
        let t = (lam - centre) / width;
        if t.abs() < 1.0 {
            (-1.0 / (1.0 - t * t)).exp()
        } else {
            0.0
        }
    }
}
