pub mod cost;
pub mod dpp;
pub mod error;
pub mod grid;
pub mod lattice;
pub mod measures;
pub mod mvm;
pub mod oracle;
pub mod rst;
pub mod scalar;
pub mod simplex;
pub mod stability;

pub use error::{Error, Result};

use num_rational::BigRational;

pub type Measure = measures::DiscreteMeasure<f64>;
pub type Measure32 = measures::DiscreteMeasure<f32>;
pub type ExactMeasure = measures::DiscreteMeasure<BigRational>;
pub type Coupling = measures::MonotoneCoupling<f64>;
pub type ExactCoupling = measures::MonotoneCoupling<BigRational>;
pub type Program = simplex::LinearProgram<f64>;
pub type ExactProgram = simplex::LinearProgram<BigRational>;
