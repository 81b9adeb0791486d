use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("label sets differ: {left} vs {right} labels")]
    LabelMismatch { left: usize, right: usize },
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unattainable request: {0}")]
    Unattainable(String),
    #[error("layer {layer} out of range 1..={layers}")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("unknown property `{0}`")]
    UnknownProperty(String),
    #[error("empty evaluation split")]
    EmptySplit,
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("family unsatisfiable for `{property}`: {successful} of {attempted} probes successful (need {needed})")]
    FamilyUnsatisfiable {
        property: String,
        attempted: usize,
        successful: usize,
        needed: usize,
        /// (seed, probe_test loss) for every attempted probe.
        losses: Vec<(u64, f64)>,
    },
    #[error("intervention is specific to input {expected}, applied to input {got}")]
    WrongInput { expected: usize, got: usize },
    #[error("precondition failed: {0}")]
    Precondition(String),
}
