use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("timestep {t} out of range 1..={max}")]
    Timestep { t: usize, max: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint compatibility error: {0}")]
    Compatibility(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(LabError::Shape {
            what,
            expected,
            got,
        })
    }
}
