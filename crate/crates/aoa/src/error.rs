//! Error types for every module in the crate.

use crate::tensor::Real;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} values, got {found}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("division by zero")]
    DivisionByZero,
    #[error("log of non-positive value")]
    LogDomain,
    #[error("cannot normalize a tensor with zero l1 norm")]
    ZeroNorm,
    #[error("invalid box: eps = {eps}, range = [{lo}, {hi}]")]
    InvalidBox { eps: Real, lo: Real, hi: Real },
    #[error("{op} expects {expected}, got shape {found:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        found: Vec<usize>,
    },
    #[error("{op}: window size {size} stride {stride} does not fit input {shape:?}")]
    Window {
        op: &'static str,
        size: usize,
        stride: usize,
        shape: Vec<usize>,
    },
    #[error("index {index} out of bounds for length {len}")]
    IndexOutOfBounds { index: usize, len: usize },
}

#[derive(Debug, Error)]
pub enum TapeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("node {0} is not on this tape")]
    InvalidNode(usize),
    #[error("backward root must be a scalar, got shape {0:?}")]
    RootNotScalar(Vec<usize>),
    #[error("{op} requires aux data recorded by {wants}, node {node} has none")]
    MissingAux {
        op: &'static str,
        wants: &'static str,
        node: usize,
    },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset has {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} out of range for {class_count} classes")]
    LabelOutOfRange { label: usize, class_count: usize },
    #[error("image {index} has shape {found:?}, expected {expected:?}")]
    InhomogeneousShapes {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    IdxMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated file")]
    Truncated { path: String },
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("model must end with a softmax layer")]
    MissingSoftmaxHead,
    #[error("layer {index} ({kind}): {reason}")]
    Architecture {
        index: usize,
        kind: &'static str,
        reason: String,
    },
    #[error("input shape {found:?} does not match model input {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: Real },
    #[error("model '{label}' reached {accuracy:.4} test accuracy, below the {floor:.2} floor")]
    AccuracyFloor {
        label: String,
        accuracy: Real,
        floor: Real,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: not a model file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: model format version {found}, this build supports {supported}")]
    VersionMismatch {
        path: String,
        found: u32,
        supported: u32,
    },
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error(transparent)]
    Attack(#[from] Box<crate::error::AttackError>),
}

#[derive(Debug, Error)]
pub enum RelevanceError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("class {class} out of range for {class_count} classes")]
    ClassOutOfRange { class: usize, class_count: usize },
    #[error("vanishing denominator in layer {layer}; a nonzero stabilizer is required")]
    StabilizerRequired { layer: usize },
    #[error("heat map has zero variance; rank correlation is undefined")]
    ZeroVariance,
    #[error("heat maps have different shapes: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Relevance(#[from] RelevanceError),
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("input pixel {value} outside [{lo}, {hi}]")]
    PixelRange { value: Real, lo: Real, hi: Real },
    #[error("second class undefined: model has fewer than 2 classes")]
    NoSecondClass,
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: usize },
}

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("invalid defense parameter: {0}")]
    InvalidParam(String),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("no model labeled '{0}' in the zoo")]
    UnknownModel(String),
    #[error("requested {requested} correctly classified samples, only {available} available")]
    Shortfall { requested: usize, available: usize },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}: {reason}")]
    Image { path: String, reason: String },
    #[error("written file {path} violates the perturbation bound (off by {excess} /257ths)")]
    BoundViolation { path: String, excess: i64 },
}
