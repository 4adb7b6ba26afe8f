use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate weight vector")]
    DegenerateWeights,

    #[error("non-finite log-weight at index {0}")]
    NonFiniteWeight(usize),

    #[error("weights are not normalized (sum = {0})")]
    UnnormalizedWeights(f64),

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("indefinite Hessian")]
    IndefiniteHessian,

    #[error("matrix is not symmetric")]
    NotSymmetric,

    #[error("non-finite objective value")]
    NonFiniteObjective,

    #[error("unbounded direction")]
    UnboundedDirection,

    #[error("random map root solve stalled with residual {0:e}")]
    RootSolve(f64),

    #[error("optimizer did not converge within {iterations} iterations (gradient norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },

    #[error("intermediate drift requires pullback")]
    MissingPullback,

    #[error("homotopy level {level} out of range 0..={levels}")]
    LevelOutOfRange { level: usize, levels: usize },

    #[error("singular innovation covariance")]
    SingularInnovation,

    #[error("particle {particle}: {source}")]
    Particle {
        particle: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("particle {particle}, level {level}: {source}")]
    ParticleLevel {
        particle: usize,
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_particle(self, particle: usize) -> Self {
        Error::Particle { particle, source: Box::new(self) }
    }

    pub(crate) fn at_level(self, particle: usize, level: usize) -> Self {
        Error::ParticleLevel { particle, level, source: Box::new(self) }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
