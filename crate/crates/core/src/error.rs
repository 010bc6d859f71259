use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("unknown scenario `{0}` (known: example41_deterministic, example41_stochastic)")]
    UnknownScenario(String),

    #[error("control set is invalid: {0}")]
    ControlSet(String),

    #[error("policy list is empty")]
    EmptyPolicies,

    #[error("domain `{shape}` is not supported here: {reason}")]
    UnsupportedDomain { shape: String, reason: String },

    #[error("point {point:?} is {distance:e} away from the boundary (tolerance {tolerance:e})")]
    NotOnBoundary { point: Vec<f64>, distance: f64, tolerance: f64 },

    #[error("CFL violated at t={t}, x={node:?}, control {control:?}: dt={dt:e} exceeds max admissible {dt_max:e}")]
    Cfl { t: f64, node: Vec<f64>, control: Vec<f64>, dt: f64, dt_max: f64 },

    #[error("node at t={t}, x={x:?} failed: {source}")]
    Node {
        t: f64,
        x: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("cost regime violated: {0}; apply the terminal-cost shift (l + G^a g, g = 0) first")]
    Regime(String),

    #[error("curve leaves the domain at t={t} (signed distance {rho})")]
    CurveOutside { t: f64, rho: f64 },

    #[error("volatility profile must be strictly positive, got {value} at s={s}")]
    NonPositiveVolatility { s: f64, value: f64 },

    #[error("epsilon list must be strictly decreasing and positive: {0:?}")]
    EpsilonOrder(Vec<f64>),

    #[error("penalized cost for eps={0} is unavailable (not in the batch eps list and no trajectories recorded)")]
    MissingEpsilon(f64),

    #[error("expression `{expr}`: {reason}")]
    Expression { expr: String, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}
