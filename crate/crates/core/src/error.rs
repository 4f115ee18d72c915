use thiserror::Error;

/// Errors raised by the strip-operator routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not Hermitian: ||A - A*|| = {asymmetry:.3e}")]
    NotHermitian { asymmetry: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("full-line window is not symmetric: {0}")]
    AsymmetricWindow(String),

    #[error(
        "channel {channel} is parabolic at Re(z) = {lambda} (|alpha - lambda| - 2 = {offset:.3e})"
    )]
    Parabolic {
        channel: usize,
        lambda: f64,
        offset: f64,
    },

    #[error("interval [{a}, {b}] is not admissible: {reason}")]
    Interval { a: f64, b: f64, reason: String },

    #[error("no positive spectral gap found on [{a}, {b}]")]
    NoGap { a: f64, b: f64 },

    #[error("z = {re}{im:+}i lies within {distance:.3e} of the spectrum of the restriction")]
    SingularResolvent { re: f64, im: f64, distance: f64 },

    #[error("boundary block beta is numerically singular: smallest singular value {smin:.3e} (largest {smax:.3e})")]
    SingularBeta { smin: f64, smax: f64 },

    #[error("transfer product overflowed at step {step}")]
    Overflow { step: usize },

    #[error("perturbation bound violated at site {site}: ||W|| = {norm:.6e} > {bound:.6e}")]
    PerturbationBound { site: usize, norm: f64, bound: f64 },

    #[error("Schur step precondition violated: {0}")]
    SchurPrecondition(String),

    #[error(
        "rank condition fails: smallest singular value {smin:.3e} <= {tau:.1e} * scale {scale:.3e}"
    )]
    RankDeficient { smin: f64, scale: f64, tau: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
