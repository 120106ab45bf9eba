use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the core engine.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Tensor dimensions do not line up for the requested operation.
    Shape(String),
    /// An invalid hyperparameter, preset or network description.
    Config(String),
    /// An operation was invoked in the wrong state (e.g. backward twice).
    State(String),
    /// A latency profile condition could not be fitted.
    Fit(String),
    /// The latency profile does not cover a condition the network needs.
    Coverage(String),
    /// A searchable layer has no active output channel.
    DeadLayer { layer: usize },
    /// Skip or reducer wiring cannot be realized after pruning.
    Wiring(String),
    /// Training produced a non-finite loss.
    Divergence { stage: String, epoch: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::Fit(msg) => write!(f, "fit error: {msg}"),
            Error::Coverage(msg) => write!(f, "coverage error: {msg}"),
            Error::DeadLayer { layer } => write!(f, "dead layer {layer}: no active output channel"),
            Error::Wiring(msg) => write!(f, "wiring error: {msg}"),
            Error::Divergence { stage, epoch } => {
                write!(f, "divergence: non-finite loss in stage {stage}, epoch {epoch}")
            }
        }
    }
}

impl core::error::Error for Error {}

impl Error {
    /// Short machine-parsable category used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::Fit(_) => "fit",
            Error::Coverage(_) => "coverage",
            Error::DeadLayer { .. } => "dead-layer",
            Error::Wiring(_) => "wiring",
            Error::Divergence { .. } => "divergence",
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::Error::Shape(alloc::format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::Error::Config(alloc::format!($($arg)*)) };
}
pub(crate) use {config_err, shape_err};
