use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown model family `{0}`")]
    UnknownFamily(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A path-dependent coefficient asked for the state at a time the
    /// integrator has not reached yet.
    #[error("coefficient requested state at t={requested} but the path is only known up to t={current}")]
    Anticipating { requested: f64, current: f64 },

    #[error("model evaluation failed at particle {particle}, step {step}: {source}")]
    Model {
        particle: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("policy evaluation failed at particle {particle}, step {step}: {reason}")]
    Policy {
        particle: usize,
        step: usize,
        reason: String,
    },

    #[error("policy cannot be bound to model: {0}")]
    PolicyBinding(String),

    #[error("time {0} is not on the simulation grid")]
    OffGrid(f64),

    #[error("missing control record: output was produced by an uncontrolled engine")]
    MissingControls,

    #[error("no finite replicate: {0}")]
    NoFiniteReplicate(String),

    #[error("optimizer produced no successful evaluation")]
    NoSuccessfulEvaluation,

    #[error("numerical blow-up at step {step}")]
    BlowUp { step: usize },

    #[error("acceptance threshold failed: {0}")]
    Acceptance(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
