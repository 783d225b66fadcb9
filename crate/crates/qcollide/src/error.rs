//! Error type shared by all modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("invalid system spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no open channel at E = {energy}; the lowest level is {ground}")]
    NoOpenChannel { energy: f64, ground: f64 },

    #[error("channel {channel} sits on its threshold at E = {energy}")]
    ThresholdEnergy { energy: f64, channel: usize },

    #[error("singular t-matrix system at E = {energy} (condition estimate {condition:.3e})")]
    SingularMatrix { energy: f64, condition: f64 },

    #[error("scattering matrix violates unitarity at E = {energy}: residual {residual:.3e}")]
    UnitarityViolation { energy: f64, residual: f64 },

    #[error("wave-packet is not one-sided: |p0| = {p0_abs} < 6 sigma = {required}")]
    PacketNotOneSided { p0_abs: f64, required: f64 },

    #[error("all Bohr-gap differences vanish; narrow/broad distinction is undefined")]
    AllGapsDegenerate,

    #[error("ensemble grid invalid: {0}")]
    InvalidEnsemble(String),

    #[error("quadrature did not converge: worst entry estimate {estimate:.3e} exceeds tol {tol:.3e}")]
    QuadratureNotConverged { estimate: f64, tol: f64 },

    #[error("population map is not stochastic: {0}")]
    NotStochastic(String),

    #[error("detailed balance violated: residual {residual:.3e} exceeds threshold {threshold:.3e}")]
    DetailedBalanceViolated { residual: f64, threshold: f64 },

    #[error("trace drifted by {drift:.3e} after applying the map")]
    TraceDrift { drift: f64 },

    #[error("invalid density matrix: {0}")]
    InvalidDensityMatrix(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("populations under floor {floor:e} at levels {levels:?}")]
    PopulationUnderflow { floor: f64, levels: Vec<usize> },

    #[error("at collision step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }
}
