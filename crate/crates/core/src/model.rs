//! The random strip operator `(HΨ)_n = -Ψ_{n-1} - Ψ_{n+1} + AΨ_n + V_nΨ_n` on the
//! half-strip of width `l`, its potential distributions, finite restrictions and
//! the folding of full-line operators onto a strip of twice the width.
//!
//! All computations downstream run in the eigenbasis of `A`, so the model only
//! keeps the eigenvalues `alpha` plus, when `A` was not diagonal, the unitary
//! `U` with `U* A U = diag(alpha)`. Sampled potentials are returned already
//! conjugated as `U* V_n U`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, c, complex_matrix, CMat};

/// Default decay exponent of the built-in site scale `a_n = sigma (n+1)^{-p}`.
pub const DEFAULT_DECAY_EXPONENT: f64 = 1.0;

/// Tolerance on `||A - A*||` accepted by [`build_model`].
pub const HERMITIAN_TOL: f64 = 1e-12;

fn default_p() -> f64 {
    DEFAULT_DECAY_EXPONENT
}

/// Distribution family of the random part of `V_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PotentialKind {
    Zero,
    /// `V_n = a_n diag(u_1, ..., u_l)` with `u_j` i.i.d. uniform on `[-1, 1]`.
    DiagonalIid {
        sigma: f64,
        #[serde(default = "default_p")]
        p: f64,
    },
    /// `V_n = a_n G` with `G` drawn from the Gaussian unitary ensemble
    /// (unit-variance entries).
    HermitianGaussian {
        sigma: f64,
        #[serde(default = "default_p")]
        p: f64,
    },
    /// Deterministic list `V_0, V_1, ...`, zero past the end.
    UserMatrixSequence {
        #[serde(with = "complex_matrix::vec")]
        matrices: Vec<CMat>,
    },
}

/// Deterministic Hermitian shift added to `V_n`, so that `E(V_n)` is the shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum MeanShift {
    /// `M (n+1)^{-p}`.
    Decaying {
        #[serde(with = "complex_matrix")]
        matrix: CMat,
        p: f64,
    },
    /// Site-specific matrices, zero past the end.
    Sites {
        #[serde(with = "complex_matrix::vec")]
        matrices: Vec<CMat>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    #[serde(flatten)]
    pub kind: PotentialKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_shift: Option<MeanShift>,
}

impl PotentialSpec {
    pub fn zero() -> Self {
        Self {
            kind: PotentialKind::Zero,
            mean_shift: None,
        }
    }

    pub fn diagonal_iid(sigma: f64, p: f64) -> Self {
        Self {
            kind: PotentialKind::DiagonalIid { sigma, p },
            mean_shift: None,
        }
    }

    pub fn hermitian_gaussian(sigma: f64, p: f64) -> Self {
        Self {
            kind: PotentialKind::HermitianGaussian { sigma, p },
            mean_shift: None,
        }
    }

    pub fn user(matrices: Vec<CMat>) -> Self {
        Self {
            kind: PotentialKind::UserMatrixSequence { matrices },
            mean_shift: None,
        }
    }

    pub fn with_mean_shift(mut self, shift: MeanShift) -> Self {
        self.mean_shift = Some(shift);
        self
    }

    /// Site scale `a_n` of the random part (zero for deterministic kinds).
    pub fn site_scale(&self, n: usize) -> f64 {
        match self.kind {
            PotentialKind::DiagonalIid { sigma, p }
            | PotentialKind::HermitianGaussian { sigma, p } => sigma * ((n + 1) as f64).powf(-p),
            _ => 0.0,
        }
    }

    /// Checks `sum_n ||E V_n|| + E||V_n||^2 < inf` symbolically for the built-in
    /// rules. Returns a human-readable warning when the sum diverges.
    pub fn summability_warning(&self) -> Option<String> {
        let mut issues = Vec::new();
        if let PotentialKind::DiagonalIid { sigma, p }
        | PotentialKind::HermitianGaussian { sigma, p } = self.kind
        {
            if sigma != 0.0 && 2.0 * p <= 1.0 {
                issues.push(format!(
                    "random part has E||V_n||^2 ~ n^(-{}) which is not summable (need p > 1/2)",
                    2.0 * p
                ));
            }
        }
        if let Some(MeanShift::Decaying { p, matrix }) = &self.mean_shift {
            if *p <= 1.0 && linalg::max_abs(matrix) > 0.0 {
                issues.push(format!(
                    "mean shift decays like n^(-{p}) which is not summable (need p > 1)"
                ));
            }
        }
        if issues.is_empty() {
            None
        } else {
            Some(issues.join("; "))
        }
    }

    fn check_width(&self, l: usize) -> Result<()> {
        let check = |m: &CMat, what: &str| -> Result<()> {
            if m.nrows() != l || m.ncols() != l {
                return Err(Error::Dimension(format!(
                    "{what} is {}x{}, expected {l}x{l}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            let asym = linalg::hermitian_asymmetry(m);
            if asym > HERMITIAN_TOL {
                return Err(Error::NotHermitian { asymmetry: asym });
            }
            Ok(())
        };
        if let PotentialKind::UserMatrixSequence { matrices } = &self.kind {
            for m in matrices {
                check(m, "user potential matrix")?;
            }
        }
        match &self.mean_shift {
            Some(MeanShift::Decaying { matrix, .. }) => check(matrix, "mean shift")?,
            Some(MeanShift::Sites { matrices }) => {
                for m in matrices {
                    check(m, "mean shift")?;
                }
            }
            None => {}
        }
        Ok(())
    }
}

/// The strip operator: width, band centres and potential distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorModel {
    pub l: usize,
    pub alpha: Vec<f64>,
    pub potential: PotentialSpec,
    /// Unitary `U` with `U* A U = diag(alpha)`; absent when `A` was diagonal.
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "complex_matrix::option"
    )]
    pub basis: Option<CMat>,
}

impl OperatorModel {
    /// Model with `A = diag(alpha)` taken as given (no reordering).
    pub fn new(alpha: Vec<f64>, potential: PotentialSpec) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Config("strip width must be at least 1".into()));
        }
        if let Some(bad) = alpha.iter().find(|a| !a.is_finite()) {
            return Err(Error::Config(format!("non-finite band centre {bad}")));
        }
        potential.check_width(alpha.len())?;
        Ok(Self {
            l: alpha.len(),
            alpha,
            potential,
            basis: None,
        })
    }

    pub fn free(alpha: Vec<f64>) -> Result<Self> {
        Self::new(alpha, PotentialSpec::zero())
    }

    pub fn a_diag(&self) -> CMat {
        linalg::real_diag(&self.alpha)
    }
}

/// Diagonalizes the Hermitian matrix `a` and attaches the potential.
///
/// Eigenvalues come out ascending with ties kept in original index order.
pub fn build_model(a: &CMat, potential: PotentialSpec) -> Result<OperatorModel> {
    let l = a.nrows();
    if l == 0 || a.ncols() != l {
        return Err(Error::Dimension(format!(
            "A must be square and non-empty, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let asym = linalg::hermitian_asymmetry(a);
    if asym > HERMITIAN_TOL {
        return Err(Error::NotHermitian { asymmetry: asym });
    }
    potential.check_width(l)?;
    let off_diagonal = (0..l).any(|i| (0..l).any(|j| i != j && a[(i, j)].norm() != 0.0));
    let (alpha, u) = if off_diagonal {
        linalg::hermitian_eigen(a)
    } else {
        let mut order: Vec<usize> = (0..l).collect();
        order.sort_by(|&i, &j| {
            a[(i, i)]
                .re
                .partial_cmp(&a[(j, j)].re)
                .unwrap()
                .then(i.cmp(&j))
        });
        let alpha = order.iter().map(|&i| a[(i, i)].re).collect();
        let mut u = linalg::zeros(l, l);
        for (k, &i) in order.iter().enumerate() {
            u[(i, k)] = linalg::ONE;
        }
        (alpha, u)
    };
    let basis = if u == linalg::identity(l) {
        None
    } else {
        Some(u)
    };
    Ok(OperatorModel {
        l,
        alpha,
        potential,
        basis,
    })
}

/// Key of a family of per-site random streams.
///
/// `(seed, sample)` selects the generator key and the site index selects the
/// stream, so `(seed, sample, site)` maps injectively onto independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub sample: u64,
}

impl StreamKey {
    pub fn new(seed: u64, sample: u64) -> Self {
        Self { seed, sample }
    }

    pub fn site_rng(&self, site: usize) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.sample.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(site as u64);
        rng
    }
}

/// One realization `V_0, ..., V_{N-1}` of the potential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSample {
    #[serde(with = "complex_matrix::vec")]
    pub matrices: Vec<CMat>,
    pub seed: u64,
}

impl PotentialSample {
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn width(&self) -> usize {
        self.matrices.first().map_or(0, |m| m.nrows())
    }

    /// One row per site; columns `v_i_j_re, v_i_j_im` in row-major order.
    pub fn to_csv(&self) -> String {
        let l = self.width();
        let mut out = String::from("site");
        for i in 0..l {
            for j in 0..l {
                let _ = write!(out, ",v_{i}_{j}_re,v_{i}_{j}_im");
            }
        }
        out.push('\n');
        for (n, m) in self.matrices.iter().enumerate() {
            let _ = write!(out, "{n}");
            for i in 0..l {
                for j in 0..l {
                    let _ = write!(out, ",{},{}", m[(i, j)].re, m[(i, j)].im);
                }
            }
            out.push('\n');
        }
        out
    }
}

fn draw_site(model: &OperatorModel, key: StreamKey, site: usize) -> CMat {
    let l = model.l;
    let spec = &model.potential;
    let mut v = linalg::zeros(l, l);
    match &spec.kind {
        PotentialKind::Zero => {}
        PotentialKind::DiagonalIid { .. } => {
            let scale = spec.site_scale(site);
            let mut rng = key.site_rng(site);
            for j in 0..l {
                v[(j, j)] = c(scale * rng.gen_range(-1.0..=1.0), 0.0);
            }
        }
        PotentialKind::HermitianGaussian { .. } => {
            let scale = spec.site_scale(site);
            let mut rng = key.site_rng(site);
            let half = std::f64::consts::FRAC_1_SQRT_2;
            for i in 0..l {
                let d: f64 = rng.sample(StandardNormal);
                v[(i, i)] = c(scale * d, 0.0);
                for j in (i + 1)..l {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    let z = c(scale * half * re, scale * half * im);
                    v[(i, j)] = z;
                    v[(j, i)] = z.conj();
                }
            }
        }
        PotentialKind::UserMatrixSequence { matrices } => {
            if let Some(m) = matrices.get(site) {
                v += m;
            }
        }
    }
    match &spec.mean_shift {
        Some(MeanShift::Decaying { matrix, p }) => {
            v += matrix * c(((site + 1) as f64).powf(-p), 0.0)
        }
        Some(MeanShift::Sites { matrices }) => {
            if let Some(m) = matrices.get(site) {
                v += m;
            }
        }
        None => {}
    }
    if let Some(u) = &model.basis {
        v = u.adjoint() * v * u;
    }
    // exact conjugate symmetry
    (&v + v.adjoint()) * c(0.5, 0.0)
}

/// Draws `n` independent sites with the stream family `StreamKey::new(seed, 0)`.
pub fn sample_potential(model: &OperatorModel, n: usize, seed: u64) -> PotentialSample {
    sample_potential_keyed(model, n, StreamKey::new(seed, 0))
}

pub fn sample_potential_keyed(model: &OperatorModel, n: usize, key: StreamKey) -> PotentialSample {
    let matrices = (0..n).map(|site| draw_site(model, key, site)).collect();
    PotentialSample {
        matrices,
        seed: key.seed,
    }
}

/// Diagonal block `A + V_k` (in the eigenbasis of `A`).
pub fn site_block(model: &OperatorModel, sample: &PotentialSample, k: usize) -> CMat {
    model.a_diag() + &sample.matrices[k]
}

/// Dense restriction `H_{m,n}` of size `l (n - m + 1)`.
pub fn restrict(
    model: &OperatorModel,
    sample: &PotentialSample,
    m: usize,
    n: usize,
) -> Result<CMat> {
    if m > n || n >= sample.len() {
        return Err(Error::IndexOutOfRange(format!(
            "restriction [{m}, {n}] with {} sampled sites",
            sample.len()
        )));
    }
    let l = model.l;
    let sites = n - m + 1;
    let mut h = linalg::zeros(l * sites, l * sites);
    let minus_id = -linalg::identity(l);
    for (k, site) in (m..=n).enumerate() {
        linalg::set_block(&mut h, k * l, k * l, &site_block(model, sample, site));
        if k + 1 < sites {
            linalg::set_block(&mut h, k * l, (k + 1) * l, &minus_id);
            linalg::set_block(&mut h, (k + 1) * l, k * l, &minus_id);
        }
    }
    Ok(h)
}

/// Potentials `V_n` of a full-line operator for `n = first_index, ..., first_index + len - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullLineWindow {
    pub first_index: i64,
    #[serde(with = "complex_matrix::vec")]
    pub matrices: Vec<CMat>,
}

impl FullLineWindow {
    /// Window `-depth-1 ..= depth`.
    pub fn symmetric(matrices: Vec<CMat>) -> Self {
        let first_index = -((matrices.len() / 2) as i64);
        Self {
            first_index,
            matrices,
        }
    }

    fn get(&self, index: i64) -> &CMat {
        &self.matrices[(index - self.first_index) as usize]
    }

    /// Dense truncation of the full-line operator to the window.
    pub fn truncation(&self, a_full: &CMat) -> CMat {
        let l = a_full.nrows();
        let sites = self.matrices.len();
        let mut h = linalg::zeros(l * sites, l * sites);
        let minus_id = -linalg::identity(l);
        for (k, v) in self.matrices.iter().enumerate() {
            linalg::set_block(&mut h, k * l, k * l, &(a_full + v));
            if k + 1 < sites {
                linalg::set_block(&mut h, k * l, (k + 1) * l, &minus_id);
                linalg::set_block(&mut h, (k + 1) * l, k * l, &minus_id);
            }
        }
        h
    }
}

/// Folds a full-line operator on sites `-N-1..=N` onto the half-strip of width
/// `2l`: shell `n` carries the sites `(n, -n-1)`, and shell 0 carries the
/// `-I` bond between sites `0` and `-1`.
pub fn fold_full_line(
    a_full: &CMat,
    window: &FullLineWindow,
) -> Result<(OperatorModel, PotentialSample)> {
    let len = window.matrices.len();
    if len < 2 || !len.is_multiple_of(2) || window.first_index != -((len / 2) as i64) {
        return Err(Error::AsymmetricWindow(format!(
            "{len} sites starting at {}; need an even count starting at -len/2",
            window.first_index
        )));
    }
    let l = a_full.nrows();
    let asym = linalg::hermitian_asymmetry(a_full);
    if asym > HERMITIAN_TOL {
        return Err(Error::NotHermitian { asymmetry: asym });
    }
    if let Some(bad) = window
        .matrices
        .iter()
        .find(|m| m.nrows() != l || m.ncols() != l)
    {
        return Err(Error::Dimension(format!(
            "window matrix is {}x{}, expected {l}x{l}",
            bad.nrows(),
            bad.ncols()
        )));
    }
    let depth = (len / 2 - 1) as i64;
    let folded: Vec<CMat> = (0..=depth)
        .map(|n| {
            let mut v = linalg::zeros(2 * l, 2 * l);
            linalg::set_block(&mut v, 0, 0, window.get(n));
            linalg::set_block(&mut v, l, l, window.get(-n - 1));
            if n == 0 {
                let minus_id = -linalg::identity(l);
                linalg::set_block(&mut v, 0, l, &minus_id);
                linalg::set_block(&mut v, l, 0, &minus_id);
            }
            v
        })
        .collect();
    let mut a2 = linalg::zeros(2 * l, 2 * l);
    linalg::set_block(&mut a2, 0, 0, a_full);
    linalg::set_block(&mut a2, l, l, a_full);
    let a_is_diagonal = (0..l).all(|i| (0..l).all(|j| i == j || a_full[(i, j)].norm() == 0.0));
    let potential = PotentialSpec::user(folded);
    let model = if a_is_diagonal {
        let alpha = (0..2 * l).map(|i| a2[(i, i)].re).collect();
        OperatorModel::new(alpha, potential)?
    } else {
        build_model(&a2, potential)?
    };
    let sample = sample_potential(&model, (depth + 1) as usize, 0);
    Ok((model, sample))
}

/// Input document for a model: either `alpha` (diagonal `A`) or a full
/// Hermitian `a_matrix`, plus the potential and an optional seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub l: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "complex_matrix::option"
    )]
    pub a_matrix: Option<CMat>,
    pub potential: PotentialSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ModelConfig {
    pub fn build(&self) -> Result<OperatorModel> {
        let model = match (&self.alpha, &self.a_matrix) {
            (Some(alpha), None) => OperatorModel::new(alpha.clone(), self.potential.clone())?,
            (None, Some(a)) => build_model(a, self.potential.clone())?,
            _ => {
                return Err(Error::Config(
                    "exactly one of `alpha` and `a_matrix` must be given".into(),
                ))
            }
        };
        if model.l != self.l {
            return Err(Error::Config(format!(
                "`l` = {} but A has size {}",
                self.l, model.l
            )));
        }
        Ok(model)
    }
}
