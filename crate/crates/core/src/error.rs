use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("not a strict coarsening: {0}")]
    NotCoarsening(String),
    #[error("invalid merger signature: {0}")]
    InvalidSignature(String),
    #[error("invalid forest: {0}")]
    InvalidForest(String),
    #[error("{0} leaves exceed the forest enumeration bound {1}")]
    EnumerationBound(usize, usize),
    #[error("forest does not extend the given forest: {0}")]
    NotAnExtension(String),
    #[error("invalid rate arguments: {0}")]
    InvalidRate(String),
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid decoration: {0}")]
    InvalidDecoration(String),
    #[error("coincident lineages outside the admissible configuration space")]
    CoincidentPoints,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("sampler diagnostics failed: {0}")]
    Diagnostics(String),
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
