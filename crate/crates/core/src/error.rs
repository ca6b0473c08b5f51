use std::path::PathBuf;

use crate::semantic::Part;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("raw parser label id {0} has no entry in the palette source map")]
    UnknownLabel(u8),

    #[error("value {value} at ({x},{y}) is not a palette code")]
    NotAPaletteCode { x: u32, y: u32, value: u8 },

    #[error("channel value {value} at ({x},{y}) is not binary (0 or 255)")]
    NotBinary { x: u32, y: u32, value: u8 },

    #[error("person mask is empty")]
    EmptyPerson,

    #[error("all appearance parts are absent")]
    DegenerateTarget,

    #[error("requested part {0:?} is absent from the donor parse")]
    PartMissing(Part),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("spatial dimensions must be at least 2x2, got {height}x{width}")]
    SpatialTooSmall { height: usize, width: usize },

    #[error("discriminator bank is empty")]
    EmptyBank,

    #[error("layer count mismatch: {real} real vs {fake} fake")]
    LayerCountMismatch { real: usize, fake: usize },

    #[error("{0} backend is not available")]
    BackendMissing(&'static str),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("sample rejected: {0}")]
    SampleRejected(String),

    #[error("model expects {expected} input channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("resolution mismatch: model expects {expected}, got {actual}")]
    ResolutionMismatch { expected: u32, actual: u32 },

    #[error("mask value {0} outside [0, 1]")]
    MaskOutOfRange(f64),

    #[error("face channel is empty")]
    NoFace,

    #[error("box {0:?} does not fit inside a {1}x{2} frame")]
    BoxOutOfFrame([u32; 4], u32, u32),

    #[error("descriptor dimension {actual} does not match expected {expected}")]
    DescriptorDim { expected: usize, actual: usize },

    #[error("dense index {0} exceeds the maximum of 24")]
    IndexOutOfRange(u8),

    #[error("window of {window} exceeds image size {height}x{width}")]
    WindowTooLarge { window: usize, height: usize, width: usize },

    #[error("ground-truth and generated folders do not contain the same number of images ({gt} vs {gen})")]
    CountMismatch { gt: usize, gen: usize },

    #[error("skeleton representations differ")]
    MixedSkeletonKinds,

    #[error("generated person is empty after {retries} retries")]
    EmptyGeneration { retries: usize },

    #[error("dataset at {0} contains no usable samples")]
    EmptyDataset(PathBuf),

    #[error("malformed dataset layout: {0}")]
    MalformedLayout(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn at(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
