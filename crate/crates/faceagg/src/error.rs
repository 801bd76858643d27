use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero-norm vector cannot be normalized")]
    ZeroNorm,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: usize },

    #[error("feature set must contain at least one frame")]
    EmptySet,

    #[error("need at least {needed} identities for {folds} folds, have {have}")]
    TooFewIdentities {
        needed: usize,
        have: usize,
        folds: usize,
    },

    #[error("pair list needs at least one positive and one negative pair")]
    DegeneratePairs,

    #[error("unknown set id `{0}` in pair list")]
    UnknownSetId(String),

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("bad magic: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },

    #[error("unsupported format version {0}")]
    VersionMismatch(u16),

    #[error("file truncated: needed {needed} more bytes")]
    Truncated { needed: usize },

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),

    #[error("unknown mode tag {0}")]
    UnknownMode(u8),

    #[error("training diverged: loss became non-finite at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
