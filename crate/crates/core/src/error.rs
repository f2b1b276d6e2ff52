use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward already ran on this graph; build a new graph")]
    BackwardRepeated,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("undefined result: {0}")]
    Undefined(String),
    #[error("gradient check failed at {param}[{index}]: {reason}")]
    GradCheck {
        param: String,
        index: usize,
        reason: String,
    },
    #[error("training diverged at epoch {epoch}, patient {patient}: {reason}")]
    Diverged {
        epoch: usize,
        patient: String,
        reason: String,
    },
}
