//! Error taxonomy shared by every module in the crate.
//!
//! Variants map onto the failure classes surfaced by the CLI: usage/config
//! problems, data-format problems, and numeric problems. Library code never
//! panics on bad input; it returns one of these.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes disagree with what an operation requires.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Spatial geometry is invalid (empty output, window larger than input, ...).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// A value is outside its documented domain (labels, ratios, thresholds, ...).
    #[error("value error: {0}")]
    Value(String),

    /// Autodiff graph misuse: backward through a tensor the tape never produced.
    #[error("graph error: {0}")]
    Graph(String),

    /// An operation produced a non-finite value; computation is aborted.
    #[error("numeric error: non-finite values in {op}{detail}")]
    NonFinite { op: &'static str, detail: String },

    /// A request exceeds what the data can supply (sampling capacity, ...).
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Too few observations for the requested statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Degenerate statistical input (all-equal values, single-class labels, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A file does not follow its on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// A text record failed to parse; carries the 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Configuration is structurally valid but semantically inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable lowercase token naming the failure class, for machine-readable
    /// diagnostics (`error[<kind>] ...`).
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Geometry(_) => "geometry",
            Error::Value(_) => "value",
            Error::Graph(_) => "graph",
            Error::NonFinite { .. } => "non-finite",
            Error::Capacity(_) => "capacity",
            Error::InsufficientData(_) => "insufficient-data",
            Error::Degenerate(_) => "degenerate",
            Error::Format(_) => "format",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_are_distinct_lowercase_tokens() {
        let errors = [
            Error::Dimension(String::new()),
            Error::Geometry(String::new()),
            Error::Value(String::new()),
            Error::Graph(String::new()),
            Error::NonFinite { op: "x", detail: String::new() },
            Error::Capacity(String::new()),
            Error::InsufficientData(String::new()),
            Error::Degenerate(String::new()),
            Error::Format(String::new()),
            Error::Parse { line: 1, msg: String::new() },
            Error::Config(String::new()),
            Error::Io(std::io::Error::other("x")),
        ];
        let kinds: Vec<&str> = errors.iter().map(|e| e.kind()).collect();
        let mut unique = kinds.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), kinds.len());
        for k in kinds {
            assert!(k.chars().all(|c| c.is_ascii_lowercase() || c == '-'), "{k}");
        }
    }
}
