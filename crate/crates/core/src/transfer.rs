//! Transfer matrices, truncated potentials, conjugated perturbations and the
//! resolvent boundary-data representation of transfer products.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channels::{perturbation_bound, ChannelSplit};
use crate::error::{Error, Result};
use crate::linalg::{self, c, complex_matrix, CMat, ONE};
use crate::model::{restrict, OperatorModel, PotentialSample};

/// Renormalize a product once its largest entry exceeds this.
const RENORM_TRIGGER: f64 = 2.0;

/// Relative gate on the smallest singular value of `beta`.
pub const BETA_SINGULAR_TOL: f64 = 1e-12;

/// Minimal admissible distance of `z` from the spectrum of a restriction.
pub const RESOLVENT_TOL: f64 = 1e-10;

/// Imaginary shift applied when a real `z` hits the spectrum of a restriction.
pub const REGULARIZING_SHIFT: f64 = 1e-8;

/// A matrix stored as `e^{log_scale} * entries`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    #[serde(with = "complex_matrix")]
    pub entries: CMat,
    pub log_scale: f64,
}

impl TransferMatrix {
    pub fn identity(dim: usize) -> Self {
        Self {
            entries: linalg::identity(dim),
            log_scale: 0.0,
        }
    }

    pub fn from_matrix(entries: CMat) -> Self {
        Self {
            entries,
            log_scale: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// The true matrix; overflows to infinity if `log_scale` is too large.
    pub fn descaled(&self) -> CMat {
        &self.entries * c(self.log_scale.exp(), 0.0)
    }

    /// Divides by the max-abs entry if it exceeds the trigger.
    pub fn renormalize(&mut self) {
        let m = linalg::max_abs(&self.entries);
        if m > RENORM_TRIGGER && m.is_finite() {
            self.entries /= c(m, 0.0);
            self.log_scale += m.ln();
        }
    }

    /// `self * rhs`, renormalized.
    pub fn compose(&self, rhs: &TransferMatrix) -> TransferMatrix {
        let mut out = TransferMatrix {
            entries: &self.entries * &rhs.entries,
            log_scale: self.log_scale + rhs.log_scale,
        };
        out.renormalize();
        out
    }

    /// Logarithm of the operator norm of the true matrix.
    pub fn log_norm(&self) -> f64 {
        linalg::op_norm(&self.entries).ln() + self.log_scale
    }
}

/// `[[B - z, -I], [I, 0]]` for a diagonal block `B = A + V`.
pub fn step_matrix(block: &CMat, z: Complex64) -> CMat {
    let l = block.nrows();
    let mut t = linalg::zeros(2 * l, 2 * l);
    linalg::set_block(&mut t, 0, 0, &(block - linalg::identity(l) * z));
    for j in 0..l {
        t[(j, l + j)] = -ONE;
        t[(l + j, j)] = ONE;
    }
    t
}

fn check_site(sample: &PotentialSample, n: usize) -> Result<()> {
    if n >= sample.len() {
        return Err(Error::IndexOutOfRange(format!(
            "site {n} with {} sampled sites",
            sample.len()
        )));
    }
    Ok(())
}

pub fn transfer_single(
    model: &OperatorModel,
    sample: &PotentialSample,
    n: usize,
    z: Complex64,
) -> Result<TransferMatrix> {
    check_site(sample, n)?;
    let block = model.a_diag() + &sample.matrices[n];
    Ok(TransferMatrix::from_matrix(step_matrix(&block, z)))
}

/// `T_n T_{n-1} ... T_m`.
pub fn transfer_product(
    model: &OperatorModel,
    sample: &PotentialSample,
    m: usize,
    n: usize,
    z: Complex64,
) -> Result<TransferMatrix> {
    if m > n {
        return Err(Error::IndexOutOfRange(format!(
            "empty product range [{m}, {n}]"
        )));
    }
    check_site(sample, n)?;
    let a = model.a_diag();
    let mut acc = TransferMatrix::identity(2 * model.l);
    for k in m..=n {
        acc.entries = step_matrix(&(&a + &sample.matrices[k]), z) * &acc.entries;
        acc.renormalize();
        if !acc
            .entries
            .iter()
            .all(|x| x.re.is_finite() && x.im.is_finite())
            || !acc.log_scale.is_finite()
        {
            return Err(Error::Overflow { step: k });
        }
    }
    Ok(acc)
}

/// `T_{0, m-1}`, the identity when `m = 0`.
pub fn transfer_head(
    model: &OperatorModel,
    sample: &PotentialSample,
    m: usize,
    z: Complex64,
) -> Result<TransferMatrix> {
    if m == 0 {
        Ok(TransferMatrix::identity(2 * model.l))
    } else {
        transfer_product(model, sample, 0, m - 1, z)
    }
}

/// The conjugated matrix `Q^{-1} T Q` split into `(l0, l1)` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSplit {
    pub a_blk: CMat,
    pub b_blk: CMat,
    pub c_blk: CMat,
    pub d_blk: CMat,
    pub log_scale: f64,
}

impl BlockSplit {
    pub fn from_conjugated(m: &CMat, l0: usize, log_scale: f64) -> Self {
        let n = m.nrows();
        let l1 = n - l0;
        Self {
            a_blk: linalg::block(m, 0, 0, l0, l0),
            b_blk: linalg::block(m, 0, l0, l0, l1),
            c_blk: linalg::block(m, l0, 0, l1, l0),
            d_blk: linalg::block(m, l0, l0, l1, l1),
            log_scale,
        }
    }

    pub fn assemble(&self) -> CMat {
        let l0 = self.a_blk.nrows();
        let l1 = self.d_blk.nrows();
        let mut m = linalg::zeros(l0 + l1, l0 + l1);
        linalg::set_block(&mut m, 0, 0, &self.a_blk);
        linalg::set_block(&mut m, 0, l0, &self.b_blk);
        linalg::set_block(&mut m, l0, 0, &self.c_blk);
        linalg::set_block(&mut m, l0, l0, &self.d_blk);
        m
    }
}

pub fn block_split(split: &ChannelSplit, t: &TransferMatrix) -> BlockSplit {
    let conj = &split.qinv * &t.entries * &split.q;
    BlockSplit::from_conjugated(&conj, split.l0(), t.log_scale)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSample {
    pub sample: PotentialSample,
    /// Smallest `m` such that no site `>= m` was zeroed.
    pub m_star: usize,
    pub zeroed: Vec<usize>,
    pub threshold: f64,
}

/// Zeroes every site with `||V_n|| >= threshold`.
pub fn truncate_with_threshold(sample: &PotentialSample, threshold: f64) -> TruncatedSample {
    let mut out = sample.clone();
    let mut zeroed = Vec::new();
    for (n, v) in out.matrices.iter_mut().enumerate() {
        if !(v.norm() < threshold || linalg::op_norm(v) < threshold) {
            v.fill(linalg::ZERO);
            zeroed.push(n);
        }
    }
    let m_star = zeroed.last().map_or(0, |&n| n + 1);
    TruncatedSample {
        sample: out,
        m_star,
        zeroed,
        threshold,
    }
}

/// Truncation at `(e^{2g} - e^g) / (4 C_Q^2)` with the split's gap and `C_Q`.
pub fn truncate_potential(sample: &PotentialSample, split: &ChannelSplit) -> TruncatedSample {
    truncate_with_threshold(sample, split.potential_threshold())
}

/// `Q^{-1} [[V, 0], [0, 0]] Q`.
pub fn conjugate_potential(split: &ChannelSplit, v: &CMat) -> CMat {
    let l = split.l();
    // only the first l rows of Q enter
    &linalg::block(&split.qinv, 0, 0, 2 * l, l) * v * linalg::block(&split.q, 0, 0, l, 2 * l)
}

/// Diagonal of the free conjugated step and the perturbation `W_n`.
pub fn conjugated_step(
    split: &ChannelSplit,
    hat_sample: &PotentialSample,
    n: usize,
) -> Result<(Vec<Complex64>, CMat)> {
    check_site(hat_sample, n)?;
    let w = conjugate_potential(split, &hat_sample.matrices[n]);
    let bound = perturbation_bound(split.gap);
    if w.norm() >= bound {
        let norm = linalg::op_norm(&w);
        if norm >= bound {
            return Err(Error::PerturbationBound {
                site: n,
                norm,
                bound,
            });
        }
    }
    Ok((split.t_diagonal(), w))
}

/// Corner blocks of `(H_{m,n} - z)^{-1}`:
/// `alpha = P_m* R P_m`, `beta = P_m* R P_n`, `gamma = P_n* R P_m`, `delta = P_n* R P_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryData {
    #[serde(with = "complex_matrix")]
    pub alpha: CMat,
    #[serde(with = "complex_matrix")]
    pub beta: CMat,
    #[serde(with = "complex_matrix")]
    pub gamma: CMat,
    #[serde(with = "complex_matrix")]
    pub delta: CMat,
    pub z: Complex64,
    pub m: usize,
    pub n: usize,
    /// Imaginary shift added to the requested `z` (zero unless regularized).
    pub shift: f64,
}

fn spectral_distance(h: &CMat, z: Complex64) -> f64 {
    if z.im.abs() > RESOLVENT_TOL {
        return z.im.abs();
    }
    linalg::hermitian_eigenvalues(h)
        .iter()
        .map(|&e| (c(e, 0.0) - z).norm())
        .fold(f64::INFINITY, f64::min)
}

pub fn boundary_data(
    model: &OperatorModel,
    sample: &PotentialSample,
    m: usize,
    n: usize,
    z: Complex64,
) -> Result<BoundaryData> {
    let h = restrict(model, sample, m, n)?;
    let distance = spectral_distance(&h, z);
    if distance <= RESOLVENT_TOL {
        return Err(Error::SingularResolvent {
            re: z.re,
            im: z.im,
            distance,
        });
    }
    let l = model.l;
    let dim = h.nrows();
    let mut rhs = linalg::zeros(dim, 2 * l);
    for j in 0..l {
        rhs[(j, j)] = ONE;
        rhs[(dim - l + j, l + j)] = ONE;
    }
    let shifted = h - linalg::identity(dim) * z;
    let x = shifted.lu().solve(&rhs).ok_or(Error::SingularResolvent {
        re: z.re,
        im: z.im,
        distance,
    })?;
    Ok(BoundaryData {
        alpha: linalg::block(&x, 0, 0, l, l),
        beta: linalg::block(&x, 0, l, l, l),
        gamma: linalg::block(&x, dim - l, 0, l, l),
        delta: linalg::block(&x, dim - l, l, l, l),
        z,
        m,
        n,
        shift: 0.0,
    })
}

/// As [`boundary_data`], retrying at `z + i * 1e-8` when `z` is on the spectrum.
pub fn boundary_data_regularized(
    model: &OperatorModel,
    sample: &PotentialSample,
    m: usize,
    n: usize,
    z: Complex64,
) -> Result<BoundaryData> {
    match boundary_data(model, sample, m, n, z) {
        Err(Error::SingularResolvent { .. }) => {
            let mut bd = boundary_data(model, sample, m, n, z + c(0.0, REGULARIZING_SHIFT))?;
            bd.shift = REGULARIZING_SHIFT;
            Ok(bd)
        }
        other => other,
    }
}

/// `[[b^{-1}, -b^{-1} a], [d b^{-1}, g - d b^{-1} a]]`.
pub fn transfer_from_boundary(bd: &BoundaryData) -> Result<TransferMatrix> {
    let sv = linalg::singular_values(&bd.beta);
    let smax = sv.first().copied().unwrap_or(0.0);
    let smin = sv.last().copied().unwrap_or(0.0);
    if !(smin > BETA_SINGULAR_TOL * smax) {
        return Err(Error::SingularBeta { smin, smax });
    }
    let binv = linalg::inverse(&bd.beta).ok_or(Error::SingularBeta { smin, smax })?;
    let l = bd.beta.nrows();
    let binv_a = &binv * &bd.alpha;
    let d_binv = &bd.delta * &binv;
    let mut t = linalg::zeros(2 * l, 2 * l);
    linalg::set_block(&mut t, 0, 0, &binv);
    linalg::set_block(&mut t, 0, l, &(-&binv_a));
    linalg::set_block(&mut t, l, 0, &d_binv);
    linalg::set_block(&mut t, l, l, &(&bd.gamma - &d_binv * &bd.alpha));
    Ok(TransferMatrix::from_matrix(t))
}
