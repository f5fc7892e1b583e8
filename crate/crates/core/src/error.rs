use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("measure has no mass strictly after t = {0}")]
    EmptyTail(f64),

    #[error("coverage: {0}")]
    Coverage(String),

    #[error("right-shift violated: {0}")]
    RightShift(String),

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("node {0} is at terminal depth")]
    NoChildren(String),

    #[error("node {node} does not belong to this lattice: {reason}")]
    ForeignNode { node: String, reason: String },

    #[error("configuration: {0}")]
    Config(String),

    #[error("size guard: {0}")]
    SizeGuard(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("splice incompatible: {0}")]
    SpliceIncompatible(String),

    #[error("mvm violation: {0}")]
    Mvm(String),

    #[error("numerical check failed: {0}")]
    Numerical(String),

    #[error("lp infeasible")]
    Infeasible,

    #[error("parse: {0}")]
    Parse(String),
}
