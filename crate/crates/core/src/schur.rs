//! Schur-complement recursion for conjugated transfer products, rank
//! diagnostics of the boundary condition and the `(u, y)` construction.
//!
//! For the conjugated product `X_{m,n} = Q^{-1} T_{m,n} Q = [[A, B], [C, D]]`
//! (blocks of size `l0 = 2 l_e + l_h` and `l1 = l_h`) the state tracks
//! `X = A - B D^{-1} C`, `Z = B D^{-1}` and `D^{-1} C`.

use serde::{Deserialize, Serialize};

use crate::channels::{perturbation_bound, spectral_gap, ChannelSplit, SpectralGap};
use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, CVec};
use crate::model::{OperatorModel, PotentialSample};
use crate::transfer::{conjugated_step, transfer_head, truncate_with_threshold, TransferMatrix};

/// Relative threshold on the smallest singular value of the rank matrix.
pub const TAU_RANK: f64 = 1e-8;

/// Relative slack on the step preconditions.
const PRECONDITION_SLACK: f64 = 1e-12;

/// Singular-value cutoff of the minimum-norm solve in [`construct_uy`].
const PINV_CUTOFF: f64 = 1e-10;

/// State after `n` steps. `x` and `dinv` are stored with separate log scales.
#[derive(Debug, Clone)]
pub struct SchurState {
    pub x: CMat,
    pub x_log_scale: f64,
    pub z: CMat,
    pub dinv: CMat,
    pub dinv_log_scale: f64,
    pub dinv_c: CMat,
    pub n: usize,
}

fn rescale(m: &mut CMat, log_scale: &mut f64) {
    let s = linalg::max_abs(m);
    if s > 0.0 && s.is_finite() && !(0.5..=2.0).contains(&s) {
        *m /= c(s, 0.0);
        *log_scale += s.ln();
    }
}

impl SchurState {
    pub fn l0(&self) -> usize {
        self.x.nrows()
    }

    pub fn l1(&self) -> usize {
        self.z.ncols()
    }

    /// `X` including its scale (may overflow for very long complex-`z` runs).
    pub fn x_true(&self) -> CMat {
        &self.x * c(self.x_log_scale.exp(), 0.0)
    }

    pub fn x_log_norm(&self) -> f64 {
        linalg::op_norm(&self.x).ln() + self.x_log_scale
    }

    pub fn x_norm(&self) -> f64 {
        self.x_log_norm().exp()
    }

    pub fn z_norm(&self) -> f64 {
        linalg::op_norm(&self.z)
    }

    pub fn dinv_log_norm(&self) -> f64 {
        if self.l1() == 0 {
            return 0.0;
        }
        linalg::op_norm(&self.dinv).ln() + self.dinv_log_scale
    }

    /// `||D_n^{-1}||`.
    pub fn dinv_norm_bound(&self) -> f64 {
        self.dinv_log_norm().exp()
    }

    pub fn dinv_c_norm(&self) -> f64 {
        linalg::op_norm(&self.dinv_c)
    }
}

pub fn schur_init(l0: usize, l1: usize) -> SchurState {
    SchurState {
        x: linalg::identity(l0),
        x_log_scale: 0.0,
        z: linalg::zeros(l0, l1),
        dinv: linalg::identity(l1),
        dinv_log_scale: 0.0,
        dinv_c: linalg::zeros(l1, l0),
        n: 0,
    }
}

/// Fixed `S`, `Gamma` and gap for a run of steps.
#[derive(Debug, Clone)]
pub struct SchurStepper {
    pub s: CMat,
    pub gamma: CMat,
    pub gap: f64,
}

impl SchurStepper {
    pub fn new(s: CMat, gamma: CMat, gap: f64) -> Result<Self> {
        let slack = 1.0 + PRECONDITION_SLACK;
        let s_norm = linalg::op_norm(&s);
        if s_norm > gap.exp() * slack {
            return Err(Error::SchurPrecondition(format!(
                "||S|| = {s_norm:.6e} exceeds e^gap = {:.6e}",
                gap.exp()
            )));
        }
        if gamma.nrows() > 0 {
            let gi = linalg::inverse(&gamma)
                .ok_or_else(|| Error::SchurPrecondition("Gamma is singular".into()))?;
            let gi_norm = linalg::op_norm(&gi);
            if gi_norm > (-2.0 * gap).exp() * slack {
                return Err(Error::SchurPrecondition(format!(
                    "||Gamma^-1|| = {gi_norm:.6e} exceeds e^(-2 gap) = {:.6e}",
                    (-2.0 * gap).exp()
                )));
            }
        }
        Ok(Self { s, gamma, gap })
    }

    pub fn from_split(split: &ChannelSplit) -> Result<Self> {
        Self::new(split.s_block(), split.gamma_block(), split.gap)
    }

    pub fn l0(&self) -> usize {
        self.s.nrows()
    }

    pub fn l1(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn init(&self) -> SchurState {
        schur_init(self.l0(), self.l1())
    }

    /// One step with the perturbation `w = [[a, b], [c, d]]`.
    pub fn step(&self, state: &SchurState, w: &CMat) -> Result<SchurState> {
        let (l0, l1) = (self.l0(), self.l1());
        if w.nrows() != l0 + l1 || w.ncols() != l0 + l1 || state.l0() != l0 || state.l1() != l1 {
            return Err(Error::Dimension(format!(
                "step of size ({l0}, {l1}) with W of size {}",
                w.nrows()
            )));
        }
        let bound = perturbation_bound(self.gap);
        if !linalg::op_norm_at_most(w, bound * (1.0 + PRECONDITION_SLACK)) {
            return Err(Error::PerturbationBound {
                site: state.n,
                norm: linalg::op_norm(w),
                bound,
            });
        }
        let a = linalg::block(w, 0, 0, l0, l0);
        let b = linalg::block(w, 0, l0, l0, l1);
        let cc = linalg::block(w, l0, 0, l1, l0);
        let d = linalg::block(w, l0, l0, l1, l1);
        let s_a = &self.s + &a;

        let (z_new, g) = if l1 == 0 {
            (linalg::zeros(l0, 0), linalg::zeros(0, 0))
        } else {
            let inner = &cc * &state.z + &self.gamma + &d;
            let g = linalg::inverse(&inner)
                .ok_or_else(|| Error::SchurPrecondition("c Z + Gamma + d is singular".into()))?;
            ((&s_a * &state.z + &b) * &g, g)
        };
        let cx = &cc * &state.x;
        let mut x_new = &s_a * &state.x - &z_new * &cx;
        let mut x_log_scale = state.x_log_scale;

        let mut dinv = &state.dinv * &g;
        let mut dinv_log_scale = state.dinv_log_scale;
        rescale(&mut dinv, &mut dinv_log_scale);
        let increment = &dinv * &cx * c((dinv_log_scale + state.x_log_scale).exp(), 0.0);
        let dinv_c = &state.dinv_c + increment;

        rescale(&mut x_new, &mut x_log_scale);
        Ok(SchurState {
            x: x_new,
            x_log_scale,
            z: z_new,
            dinv,
            dinv_log_scale,
            dinv_c,
            n: state.n + 1,
        })
    }
}

/// Free-function form of [`SchurStepper::step`].
pub fn schur_step(
    state: &SchurState,
    s: &CMat,
    gamma: &CMat,
    gap: f64,
    w: &CMat,
) -> Result<SchurState> {
    SchurStepper::new(s.clone(), gamma.clone(), gap)?.step(state, w)
}

/// Per-step summary of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Last site consumed.
    pub site: usize,
    pub x_norm: f64,
    pub z_norm: f64,
    pub dinv_norm_bound: f64,
    pub dinv_c_norm: f64,
}

impl StepRecord {
    pub fn of(state: &SchurState, site: usize) -> Self {
        Self {
            site,
            x_norm: state.x_norm(),
            z_norm: state.z_norm(),
            dinv_norm_bound: state.dinv_norm_bound(),
            dinv_c_norm: state.dinv_c_norm(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SchurRun {
    pub records: Vec<StepRecord>,
    pub final_state: SchurState,
    /// Estimate of `Y_m = lim D^{-1} C`.
    pub y_estimate: CMat,
    /// `||DinvC(N) - DinvC(N/2)||`.
    pub certificate: f64,
}

/// Runs the recursion over sites `m..=n_end` of a truncated sample, calling
/// `observe(site, state)` after every step.
pub fn schur_run_with<F: FnMut(usize, &SchurState)>(
    split: &ChannelSplit,
    hat_sample: &PotentialSample,
    m: usize,
    n_end: usize,
    mut observe: F,
) -> Result<SchurRun> {
    if m > n_end || n_end >= hat_sample.len() {
        return Err(Error::IndexOutOfRange(format!(
            "run over [{m}, {n_end}] with {} sampled sites",
            hat_sample.len()
        )));
    }
    let stepper = SchurStepper::from_split(split)?;
    let mut state = stepper.init();
    let mut records = Vec::with_capacity(n_end - m + 1);
    let half_site = m + (n_end - m) / 2;
    let mut half = None;
    for site in m..=n_end {
        let (_, w) = conjugated_step(split, hat_sample, site)?;
        state = stepper.step(&state, &w).map_err(|e| match e {
            Error::PerturbationBound { norm, bound, .. } => {
                Error::PerturbationBound { site, norm, bound }
            }
            other => other,
        })?;
        records.push(StepRecord::of(&state, site));
        observe(site, &state);
        if site == half_site {
            half = Some(state.dinv_c.clone());
        }
    }
    let y_estimate = state.dinv_c.clone();
    let certificate = half.map_or(0.0, |h| linalg::op_norm(&(&y_estimate - h)));
    Ok(SchurRun {
        records,
        final_state: state,
        y_estimate,
        certificate,
    })
}

pub fn schur_run(
    split: &ChannelSplit,
    hat_sample: &PotentialSample,
    m: usize,
    n_end: usize,
) -> Result<SchurRun> {
    schur_run_with(split, hat_sample, m, n_end, |_, _| {})
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankDiagnostic {
    pub lambda: f64,
    pub smin: f64,
    pub smax: f64,
    /// `||(Y I)|| * ||Q^{-1} T_head (I; 0)||`, the natural size of the rank matrix.
    pub scale: f64,
    pub rank_full: bool,
}

impl RankDiagnostic {
    pub fn relative_smin(&self) -> f64 {
        if self.scale > 0.0 {
            self.smin / self.scale
        } else {
            f64::INFINITY
        }
    }
}

/// `Q^{-1} T_head (I; 0)` with the head's scale dropped.
fn head_columns(split: &ChannelSplit, t_head: &TransferMatrix) -> CMat {
    let l = split.l();
    &split.qinv * linalg::block(&t_head.entries, 0, 0, 2 * l, l)
}

/// `(Y I) Q^{-1} T_head (I; 0)`, an `l_h x l` matrix, and its rank diagnostic.
///
/// The matrix carries the dropped factor `e^{t_head.log_scale}`, which does
/// not affect the rank decision.
pub fn rank_matrix(
    y: &CMat,
    split: &ChannelSplit,
    t_head: &TransferMatrix,
) -> (CMat, RankDiagnostic) {
    let (l0, l1, l) = (split.l0(), split.l1(), split.l());
    let lambda = split.z.re;
    if l1 == 0 {
        let diag = RankDiagnostic {
            lambda,
            smin: 0.0,
            smax: 0.0,
            scale: 0.0,
            rank_full: true,
        };
        return (linalg::zeros(0, l), diag);
    }
    let m = head_columns(split, t_head);
    let top = linalg::block(&m, 0, 0, l0, l);
    let bottom = linalg::block(&m, l0, 0, l1, l);
    let a = y * &top + &bottom;
    let mut y_id = linalg::zeros(l1, l0 + l1);
    linalg::set_block(&mut y_id, 0, 0, y);
    linalg::set_block(&mut y_id, 0, l0, &linalg::identity(l1));
    let scale = linalg::op_norm(&y_id) * linalg::op_norm(&m);
    let sv = linalg::singular_values(&a);
    let smax = sv[0];
    // fewer columns than rows cannot have full row rank
    let smin = if l < l1 { 0.0 } else { sv[l1 - 1] };
    let rank_full = smin > TAU_RANK * scale;
    (
        a,
        RankDiagnostic {
            lambda,
            smin,
            smax,
            scale,
            rank_full,
        },
    )
}

/// Settings of a rank scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankScanConfig {
    pub grid_points: usize,
    /// Last site of the Schur run that estimates `Y_m`.
    pub n_end: usize,
    pub tau: f64,
}

impl Default for RankScanConfig {
    fn default() -> Self {
        Self {
            grid_points: 401,
            n_end: 400,
            tau: TAU_RANK,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankScan {
    pub gap: SpectralGap,
    pub m_star: usize,
    pub grid: Vec<RankDiagnostic>,
    /// Refined energies where the rank condition fails.
    pub candidates: Vec<RankDiagnostic>,
}

/// Evaluates the rank diagnostic at real `lambda` for boundary index `m`.
pub fn rank_at(
    model: &OperatorModel,
    sample: &PotentialSample,
    hat_sample: &PotentialSample,
    gap: &SpectralGap,
    m: usize,
    n_end: usize,
    lambda: f64,
) -> Result<RankDiagnostic> {
    let z = c(lambda, 0.0);
    let split = gap.split_at(model, z);
    if split.l_h == 0 {
        return Ok(rank_matrix(
            &linalg::zeros(0, split.l0()),
            &split,
            &TransferMatrix::identity(2 * model.l),
        )
        .1);
    }
    let run = schur_run(&split, hat_sample, m, n_end)?;
    let head = transfer_head(model, sample, m, z)?;
    Ok(rank_matrix(&run.y_estimate, &split, &head).1)
}

/// Scans `[a, b]` for energies where `(Y_m I) Q^{-1} T_{0,m-1} (I; 0)` loses rank.
pub fn find_rank_deficiencies(
    model: &OperatorModel,
    sample: &PotentialSample,
    m: usize,
    a: f64,
    b: f64,
    config: &RankScanConfig,
) -> Result<RankScan> {
    let gap = spectral_gap(model, a, b)?;
    let truncated = truncate_with_threshold(sample, gap.threshold());
    if m < truncated.m_star {
        return Err(Error::Config(format!(
            "m = {m} is below m* = {}",
            truncated.m_star
        )));
    }
    if config.grid_points < 3 {
        return Err(Error::Config(
            "rank scan needs at least 3 grid points".into(),
        ));
    }
    let n_end = config.n_end.min(sample.len() - 1).max(m);
    let eval = |lambda: f64| rank_at(model, sample, &truncated.sample, &gap, m, n_end, lambda);
    let lambdas: Vec<f64> = (0..config.grid_points)
        .map(|i| a + (b - a) * i as f64 / (config.grid_points - 1) as f64)
        .collect();
    let grid = lambdas
        .iter()
        .map(|&lam| eval(lam))
        .collect::<Result<Vec<_>>>()?;
    let mut candidates = Vec::new();
    if gap.l_h > 0 {
        let f: Vec<f64> = grid.iter().map(|d| d.relative_smin()).collect();
        for i in 0..f.len() {
            let left = if i == 0 { f64::INFINITY } else { f[i - 1] };
            let right = if i + 1 == f.len() {
                f64::INFINITY
            } else {
                f[i + 1]
            };
            if !(f[i] <= left && f[i] < right) {
                continue;
            }
            let lo = lambdas[i.saturating_sub(1)];
            let hi = lambdas[(i + 1).min(f.len() - 1)];
            let best = golden_section(lo, hi, |lam| eval(lam).map(|d| d.relative_smin()))?;
            let diag = eval(best)?;
            if diag.relative_smin() <= config.tau {
                candidates.push(RankDiagnostic {
                    rank_full: false,
                    ..diag
                });
            }
        }
    }
    Ok(RankScan {
        gap,
        m_star: truncated.m_star,
        grid,
        candidates,
    })
}

fn golden_section<F: FnMut(f64) -> Result<f64>>(mut lo: f64, mut hi: f64, mut f: F) -> Result<f64> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    for _ in 0..200 {
        if hi - lo < 1e-13 * (1.0 + lo.abs()) {
            break;
        }
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2)?;
        }
    }
    Ok(if f1 < f2 { x1 } else { x2 })
}

/// Boundary vectors with `Q^{-1} T_head (u; x) = (y; -Y y)`.
#[derive(Debug, Clone)]
pub struct UyVectors {
    pub u: CVec,
    pub y: CVec,
    /// `||bottom + Y top||` of `Q^{-1} T_head (u; x)`.
    pub residual: f64,
    pub rank: RankDiagnostic,
}

pub fn construct_uy(
    x: &CVec,
    y_mat: &CMat,
    split: &ChannelSplit,
    t_head: &TransferMatrix,
) -> Result<UyVectors> {
    let (l0, l1, l) = (split.l0(), split.l1(), split.l());
    if x.len() != l || y_mat.nrows() != l1 || y_mat.ncols() != l0 {
        return Err(Error::Dimension(format!(
            "x of length {} and Y of size {}x{}",
            x.len(),
            y_mat.nrows(),
            y_mat.ncols()
        )));
    }
    let (_, rank) = rank_matrix(y_mat, split, t_head);
    if !rank.rank_full {
        return Err(Error::RankDeficient {
            smin: rank.smin,
            scale: rank.scale,
            tau: TAU_RANK,
        });
    }
    let m = &split.qinv * &t_head.entries;
    let fa = linalg::block(&m, 0, 0, l0, l);
    let fb = linalg::block(&m, 0, l, l0, l);
    let fc = linalg::block(&m, l0, 0, l1, l);
    let fd = linalg::block(&m, l0, l, l1, l);
    let xm = CMat::from_column_slice(l, 1, x.as_slice());
    let lhs = y_mat * &fa + &fc;
    let rhs = -(y_mat * &fb + &fd) * &xm;
    let u = linalg::pinv_solve(&lhs, &rhs, PINV_CUTOFF);
    let scale = c(t_head.log_scale.exp(), 0.0);
    let y = (&fa * &u + &fb * &xm) * scale;
    let bottom = (&fc * &u + &fd * &xm) * scale;
    let residual = linalg::op_norm(&(bottom + y_mat * &y));
    Ok(UyVectors {
        u: u.column(0).into_owned(),
        y: y.column(0).into_owned(),
        residual,
        rank,
    })
}

/// `Q (X y; 0)`, which equals `T_{0,n} (u; x)` when `Y = D_n^{-1} C_n`.
pub fn propagated_vector(split: &ChannelSplit, state: &SchurState, y: &CVec) -> CVec {
    let l0 = split.l0();
    let top = &state.x * y * c(state.x_log_scale.exp(), 0.0);
    let mut full = CVec::zeros(2 * split.l());
    full.rows_mut(0, l0).copy_from(&top);
    &split.q * full
}

/// `log ||Q (X y; 0)||` without forming the scaled vector.
pub fn propagated_log_norm(split: &ChannelSplit, state: &SchurState, y: &CVec) -> f64 {
    let l0 = split.l0();
    let top = &state.x * y;
    let mut full = CVec::zeros(2 * split.l());
    full.rows_mut(0, l0).copy_from(&top);
    (&split.q * full).norm().ln() + state.x_log_scale
}
