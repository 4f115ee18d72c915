//! Band structure of the free strip and the elliptic/hyperbolic channel
//! decomposition of the free transfer matrix.
//!
//! At a spectral parameter `z` with `Re z` inside the spectrum and away from
//! band edges, channel `j` is elliptic when `|alpha_j - Re z| < 2` (momentum
//! `k_j` with `2 cos k_j = alpha_j - z`) and hyperbolic otherwise (multiplier
//! `gamma_j` with `gamma_j + 1/gamma_j = alpha_j - z`, `|gamma_j| > 1`). The
//! conjugation `Q_z` diagonalizes the free transfer matrix into
//! `diag(e^{iK}, e^{-iK}, Gamma^{-1}, Gamma)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, ONE};
use crate::model::OperatorModel;

/// Half-width of the band-edge zone labelled parabolic.
pub const PARABOLIC_TOL: f64 = 1e-9;

/// Gap used when no hyperbolic channel is present; only the perturbation
/// threshold `(e^{2g} - e^g)/4` depends on it then.
pub const ELLIPTIC_ONLY_GAP: f64 = 1.0;

/// Relative safety margin: bounds are enforced with an extra factor `e^{-gap/100}`.
const GAP_MARGIN: f64 = 0.01;

/// Fraction of the real-axis gap the working rectangle must retain.
const GAP_RETENTION: f64 = 0.9;

const MAX_HEIGHT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStructure {
    /// Closed bands `[alpha_j - 2, alpha_j + 2]`, one per channel.
    pub bands: Vec<(f64, f64)>,
    /// Open intervals whose union is the union of open bands minus all band edges.
    pub sigma: Vec<(f64, f64)>,
    /// Intersection of all open bands, if non-empty.
    pub sigma0: Option<(f64, f64)>,
}

impl BandStructure {
    pub fn contains(&self, lambda: f64) -> bool {
        self.sigma
            .iter()
            .any(|&(lo, hi)| lo < lambda && lambda < hi)
    }

    fn fmt_intervals(iv: &[(f64, f64)]) -> String {
        if iv.is_empty() {
            return "∅".into();
        }
        iv.iter()
            .map(|(a, b)| format!("({a}, {b})"))
            .collect::<Vec<_>>()
            .join(" ∪ ")
    }

    pub fn sigma_string(&self) -> String {
        Self::fmt_intervals(&self.sigma)
    }

    pub fn sigma0_string(&self) -> String {
        Self::fmt_intervals(&self.sigma0.iter().copied().collect::<Vec<_>>())
    }
}

pub fn band_structure(model: &OperatorModel) -> BandStructure {
    let bands: Vec<(f64, f64)> = model.alpha.iter().map(|&a| (a - 2.0, a + 2.0)).collect();
    let mut edges: Vec<f64> = bands.iter().flat_map(|&(lo, hi)| [lo, hi]).collect();
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup();
    let sigma = edges
        .windows(2)
        .filter(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            bands.iter().any(|&(lo, hi)| lo < mid && mid < hi)
        })
        .map(|w| (w[0], w[1]))
        .collect();
    let lo = bands.iter().map(|b| b.0).fold(f64::NEG_INFINITY, f64::max);
    let hi = bands.iter().map(|b| b.1).fold(f64::INFINITY, f64::min);
    let sigma0 = (lo < hi).then_some((lo, hi));
    BandStructure {
        bands,
        sigma,
        sigma0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelKind {
    Elliptic,
    Hyperbolic,
    Parabolic,
}

pub fn classify_channels(model: &OperatorModel, lambda: f64) -> Vec<ChannelKind> {
    model
        .alpha
        .iter()
        .map(|&a| {
            let offset = (a - lambda).abs() - 2.0;
            if offset < -PARABOLIC_TOL {
                ChannelKind::Elliptic
            } else if offset > PARABOLIC_TOL {
                ChannelKind::Hyperbolic
            } else {
                ChannelKind::Parabolic
            }
        })
        .collect()
}

/// Elliptic-first ordering of the channels at `lambda`.
fn channel_order(model: &OperatorModel, lambda: f64) -> Result<(Vec<usize>, usize)> {
    let kinds = classify_channels(model, lambda);
    if let Some(j) = kinds.iter().position(|&k| k == ChannelKind::Parabolic) {
        return Err(Error::Parabolic {
            channel: j,
            lambda,
            offset: (model.alpha[j] - lambda).abs() - 2.0,
        });
    }
    let mut perm: Vec<usize> = (0..model.l)
        .filter(|&j| kinds[j] == ChannelKind::Elliptic)
        .collect();
    let l_e = perm.len();
    perm.extend((0..model.l).filter(|&j| kinds[j] == ChannelKind::Hyperbolic));
    Ok((perm, l_e))
}

/// Momentum `k` with `2 cos k = w`, on the principal branch (`k in (0, pi)` for real `|w| < 2`).
pub fn elliptic_momentum(w: Complex64) -> Complex64 {
    (w * 0.5).acos()
}

/// Root of `g^2 - w g + 1 = 0` with `|g| > 1`.
pub fn hyperbolic_multiplier(w: Complex64) -> Complex64 {
    let disc = (w * w - 4.0).sqrt();
    let plus = (w + disc) * 0.5;
    let minus = (w - disc) * 0.5;
    if plus.norm() >= minus.norm() {
        plus
    } else {
        minus
    }
}

/// Channel decomposition at one spectral parameter.
#[derive(Debug, Clone)]
pub struct ChannelSplit {
    pub z: Complex64,
    pub l_e: usize,
    pub l_h: usize,
    /// `perm[j]` is the model channel placed at position `j` (elliptic first).
    pub perm: Vec<usize>,
    pub k: Vec<Complex64>,
    pub gamma: Vec<Complex64>,
    /// Conjugation in model coordinates: `qinv * T0 * q = diag(t_diagonal())`.
    pub q: CMat,
    pub qinv: CMat,
    pub gap: f64,
    pub cq: f64,
}

impl ChannelSplit {
    pub fn l(&self) -> usize {
        self.l_e + self.l_h
    }

    /// Size of the non-expanding block, `2 l_e + l_h`.
    pub fn l0(&self) -> usize {
        2 * self.l_e + self.l_h
    }

    pub fn l1(&self) -> usize {
        self.l_h
    }

    /// Diagonal of `diag(e^{iK}, e^{-iK}, Gamma^{-1}, Gamma)`.
    pub fn t_diagonal(&self) -> Vec<Complex64> {
        let i = c(0.0, 1.0);
        let mut d: Vec<Complex64> = self.k.iter().map(|&k| (i * k).exp()).collect();
        d.extend(self.k.iter().map(|&k| (-i * k).exp()));
        d.extend(self.gamma.iter().map(|&g| ONE / g));
        d.extend(self.gamma.iter().copied());
        d
    }

    /// The block `S = diag(e^{iK}, e^{-iK}, Gamma^{-1})`.
    pub fn s_block(&self) -> CMat {
        let d = self.t_diagonal();
        linalg::diag(&d[..self.l0()])
    }

    pub fn gamma_block(&self) -> CMat {
        linalg::diag(&self.gamma)
    }

    /// Replaces the local gap/`C_Q` with interval-uniform ones.
    pub fn with_bounds(mut self, gap: f64, cq: f64) -> Self {
        self.gap = gap;
        self.cq = cq;
        self
    }

    /// Truncation threshold `(e^{2g} - e^g) / (4 C_Q^2)` on `||V_n||`.
    pub fn potential_threshold(&self) -> f64 {
        perturbation_bound(self.gap) / (self.cq * self.cq)
    }
}

/// Admissible size `(e^{2g} - e^g) / 4` of a conjugated perturbation.
pub fn perturbation_bound(gap: f64) -> f64 {
    ((2.0 * gap).exp() - gap.exp()) / 4.0
}

/// Free transfer matrix `[[A - z, -I], [I, 0]]` in model coordinates.
pub fn free_transfer(model: &OperatorModel, z: Complex64) -> CMat {
    let l = model.l;
    let mut t = linalg::zeros(2 * l, 2 * l);
    for j in 0..l {
        t[(j, j)] = c(model.alpha[j], 0.0) - z;
        t[(j, l + j)] = -ONE;
        t[(l + j, j)] = ONE;
    }
    t
}

fn split_with_order(
    model: &OperatorModel,
    z: Complex64,
    perm: Vec<usize>,
    l_e: usize,
) -> ChannelSplit {
    let l = model.l;
    let l_h = l - l_e;
    let i = c(0.0, 1.0);
    let k: Vec<Complex64> = perm[..l_e]
        .iter()
        .map(|&j| elliptic_momentum(c(model.alpha[j], 0.0) - z))
        .collect();
    let gamma: Vec<Complex64> = perm[l_e..]
        .iter()
        .map(|&j| hyperbolic_multiplier(c(model.alpha[j], 0.0) - z))
        .collect();

    // Q and Q^{-1} in the permuted basis; rows of Q (columns of Q^{-1}) are
    // grouped (elliptic, hyperbolic) for Psi_{n+1} and again for Psi_n.
    let mut q = linalg::zeros(2 * l, 2 * l);
    let mut qinv = linalg::zeros(2 * l, 2 * l);
    for (e, &kk) in k.iter().enumerate() {
        let ep = (i * kk).exp();
        let em = (-i * kk).exp();
        let qk = ONE / (ep - em);
        // columns e (e^{iK}) and l_e + e (e^{-iK})
        q[(e, e)] = ep;
        q[(e, l_e + e)] = em;
        q[(l + e, e)] = ONE;
        q[(l + e, l_e + e)] = ONE;
        qinv[(e, e)] = qk;
        qinv[(e, l + e)] = -em * qk;
        qinv[(l_e + e, e)] = -qk;
        qinv[(l_e + e, l + e)] = qk * ep;
    }
    for (h, &g) in gamma.iter().enumerate() {
        let gi = ONE / g;
        let qg = ONE / (gi - g);
        let row = l_e + h; // hyperbolic row within each half
        let col_small = 2 * l_e + h; // Gamma^{-1} column
        let col_big = 2 * l_e + l_h + h; // Gamma column
        q[(row, col_small)] = gi;
        q[(row, col_big)] = g;
        q[(l + row, col_small)] = ONE;
        q[(l + row, col_big)] = ONE;
        qinv[(col_small, row)] = qg;
        qinv[(col_small, l + row)] = -g * qg;
        qinv[(col_big, row)] = -qg;
        qinv[(col_big, l + row)] = gi * qg;
    }
    // back to model coordinates: row perm of q, column perm of qinv
    let mut q_model = linalg::zeros(2 * l, 2 * l);
    let mut qinv_model = linalg::zeros(2 * l, 2 * l);
    for (pos, &ch) in perm.iter().enumerate() {
        for half in 0..2 {
            q_model.set_row(half * l + ch, &q.row(half * l + pos));
            qinv_model.set_column(half * l + ch, &qinv.column(half * l + pos));
        }
    }
    let gap = if l_h == 0 {
        ELLIPTIC_ONLY_GAP
    } else {
        gamma
            .iter()
            .map(|g| g.norm().ln())
            .fold(f64::INFINITY, f64::min)
            / (2.0 + GAP_MARGIN)
    };
    let cq = 1.01
        * perm
            .iter()
            .enumerate()
            .map(|(pos, &j)| channel_q_norm(model.alpha[j], z, pos < l_e))
            .fold(0.0, f64::max);
    ChannelSplit {
        z,
        l_e,
        l_h,
        perm,
        k,
        gamma,
        q: q_model,
        qinv: qinv_model,
        gap,
        cq,
    }
}

/// Largest singular value of a 2x2 matrix `[[a, b], [c, d]]`.
fn norm2x2(a: Complex64, b: Complex64, cc: Complex64, d: Complex64) -> f64 {
    let f2 = a.norm_sqr() + b.norm_sqr() + cc.norm_sqr() + d.norm_sqr();
    let det = (a * d - b * cc).norm();
    ((f2 + (f2 * f2 - 4.0 * det * det).max(0.0).sqrt()) / 2.0).sqrt()
}

/// `max(||q_j||, ||q_j^{-1}||)` for the 2x2 block of `Q` belonging to one channel.
/// `Q` is a direct sum of these blocks, so the maximum over channels is `max(||Q||, ||Q^{-1}||)`.
pub fn channel_q_norm(alpha: f64, z: Complex64, elliptic: bool) -> f64 {
    let w = c(alpha, 0.0) - z;
    let (p, q) = if elliptic {
        let k = elliptic_momentum(w);
        ((c(0.0, 1.0) * k).exp(), (c(0.0, -1.0) * k).exp())
    } else {
        let g = hyperbolic_multiplier(w);
        (ONE / g, g)
    };
    let inv = ONE / (p - q);
    norm2x2(p, q, ONE, ONE).max(norm2x2(inv, -q * inv, -inv, p * inv))
}

/// Channel decomposition at `z`, with local (pointwise) gap and `C_Q`.
pub fn channel_split(model: &OperatorModel, z: Complex64) -> Result<ChannelSplit> {
    let (perm, l_e) = channel_order(model, z.re)?;
    Ok(split_with_order(model, z, perm, l_e))
}

/// Uniform constants on the working rectangle `[a, b] + i[-height, height]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralGap {
    pub a: f64,
    pub b: f64,
    pub gap: f64,
    pub height: f64,
    pub cq: f64,
    pub l_e: usize,
    pub l_h: usize,
    pub perm: Vec<usize>,
}

impl SpectralGap {
    /// Channel split at `z` carrying the interval-uniform gap and `C_Q`.
    pub fn split_at(&self, model: &OperatorModel, z: Complex64) -> ChannelSplit {
        split_with_order(model, z, self.perm.clone(), self.l_e).with_bounds(self.gap, self.cq)
    }

    pub fn threshold(&self) -> f64 {
        perturbation_bound(self.gap) / (self.cq * self.cq)
    }
}

/// Checks that `[a, b]` sits inside the spectrum with a fixed channel type
/// pattern and returns the elliptic-first order.
pub fn admissible_interval(model: &OperatorModel, a: f64, b: f64) -> Result<(Vec<usize>, usize)> {
    let fail = |reason: String| Error::Interval { a, b, reason };
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(fail("need finite a < b".into()));
    }
    for &alpha in &model.alpha {
        for edge in [alpha - 2.0, alpha + 2.0] {
            if edge > a - PARABOLIC_TOL && edge < b + PARABOLIC_TOL {
                return Err(fail(format!("band edge {edge} lies in the interval")));
            }
        }
    }
    let (perm, l_e) = channel_order(model, 0.5 * (a + b)).map_err(|e| fail(e.to_string()))?;
    if l_e == 0 {
        return Err(fail(
            "no elliptic channel; the interval is outside the spectrum".into(),
        ));
    }
    Ok((perm, l_e))
}

/// Largest gap `g` and a height `c` such that on a grid over
/// `[a, b] x [-c, c]` both `||Gamma^{-1}(z)|| <= e^{-2g} e^{-g/100}` and
/// `||e^{+-iK(z)}|| <= e^{g} e^{-g/100}` hold, plus the uniform `C_Q`.
///
/// `c` is the largest height in a halving ladder from 1 that keeps at least
/// 90% of the real-axis value of `min log|gamma_j|`.
pub fn spectral_gap(model: &OperatorModel, a: f64, b: f64) -> Result<SpectralGap> {
    let (perm, l_e) = admissible_interval(model, a, b)?;
    let l_h = model.l - l_e;
    let npts = 1001;
    let lambdas: Vec<f64> = (0..npts)
        .map(|i| a + (b - a) * i as f64 / (npts - 1) as f64)
        .collect();
    let etas = |h: f64| [-h, -0.5 * h, 0.0, 0.5 * h, h];

    // (min log|gamma|, max |Im k|) over the grid at height h
    let extremes = |h: f64| -> (f64, f64) {
        let mut log_gamma = f64::INFINITY;
        let mut im_k = 0.0_f64;
        for &eta in &etas(h) {
            for &lam in &lambdas {
                let z = c(lam, eta);
                for &j in &perm[..l_e] {
                    im_k = im_k.max(elliptic_momentum(c(model.alpha[j], 0.0) - z).im.abs());
                }
                for &j in &perm[l_e..] {
                    log_gamma = log_gamma.min(
                        hyperbolic_multiplier(c(model.alpha[j], 0.0) - z)
                            .norm()
                            .ln(),
                    );
                }
            }
        }
        (log_gamma, im_k)
    };

    let (log_gamma_real, _) = extremes(0.0);
    if l_h > 0 && !(log_gamma_real > 0.0) {
        return Err(Error::NoGap { a, b });
    }
    let mut chosen = None;
    let mut h = MAX_HEIGHT;
    for _ in 0..48 {
        let (log_gamma, im_k) = extremes(h);
        let gap = if l_h == 0 {
            ELLIPTIC_ONLY_GAP
        } else {
            log_gamma / (2.0 + GAP_MARGIN)
        };
        let keeps_gap = l_h == 0 || log_gamma >= GAP_RETENTION * log_gamma_real;
        if gap > 0.0 && keeps_gap && im_k <= (1.0 - GAP_MARGIN) * gap {
            chosen = Some((gap, h));
            break;
        }
        h *= 0.5;
    }
    let (gap, height) = chosen.ok_or(Error::NoGap { a, b })?;

    let mut cq = 0.0_f64;
    for &eta in &etas(height) {
        for &lam in &lambdas {
            let z = c(lam, eta);
            for (pos, &j) in perm.iter().enumerate() {
                cq = cq.max(channel_q_norm(model.alpha[j], z, pos < l_e));
            }
        }
    }
    Ok(SpectralGap {
        a,
        b,
        gap,
        height,
        cq: 1.01 * cq,
        l_e,
        l_h,
        perm,
    })
}
