use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid stride {0}, must be >= 1")]
    InvalidStride(usize),
    #[error("negative running variance in channel {0}")]
    NegativeVariance(usize),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f32),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("non-finite activation after {0}")]
    NonFiniteActivation(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("degenerate normalization: {0}")]
    NormalizationDegenerate(String),
    #[error("corrupt tensor: {0}")]
    CorruptTensor(String),
    #[error("corrupt weights: {0}")]
    CorruptWeights(String),
    #[error("version mismatch: {0}")]
    VersionMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid class counts: {0}")]
    InvalidCounts(String),
    #[error("region set is empty")]
    EmptyRegionSet,
    #[error("median window must be odd, got {0}")]
    EvenWindow(usize),
    #[error("window {window} too large for series of length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("model has no batch-norm affine parameters to adapt")]
    NoAdaptableParams,
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("training diverged at epoch {epoch}, step {step} (loss {loss})")]
    DivergedLoss { epoch: usize, step: usize, loss: f32 },
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
