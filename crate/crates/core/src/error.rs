use thiserror::Error;

#[derive(Debug, Error)]
pub enum MpnError {
    /// Operand shapes are incompatible.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("bad magic: expected \"MPNF\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported bundle version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated bundle: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MpnError> = std::result::Result<T, E>;

impl MpnError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        MpnError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
