use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("image {image_id} has a non-positive extent ({lx} x {ly})")]
    ZeroExtent { image_id: String, lx: f64, ly: f64 },
    #[error("image {image_id}: point {index} at ({x}, {y}) lies outside the domain")]
    PointOutsideDomain {
        image_id: String,
        index: usize,
        x: f64,
        y: f64,
    },
    #[error("unknown cell type label {0:?}")]
    UnknownLabel(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("negative distance {0}")]
    NegativeDistance(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loadings row {row} is zero; correlation is undefined")]
    DegenerateLoadings { row: usize },
    #[error("entry ({row}, {col}) of the loadings is a structural zero")]
    StructuralZero { row: usize, col: usize },
    #[error("numerically degenerate conditional covariance in block {block}")]
    DegenerateBlock { block: usize },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("coarsening factor {factor} does not divide grid dimension {n}")]
    NonDivisible { n: usize, factor: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("chain is constant; diagnostic undefined")]
    ConstantChain,
    #[error("need at least {need} draws, got {got}")]
    TooFewDraws { need: usize, got: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("cell type label sets differ between groups")]
    LabelMismatch,
    #[error("{path}: row {row}: {msg}")]
    Format {
        path: String,
        row: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateBlock { .. }
                | Error::Singular(_)
                | Error::NonFinite(_)
                | Error::DegenerateLoadings { .. }
        )
    }
}
