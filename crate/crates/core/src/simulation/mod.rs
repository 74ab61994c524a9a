//! Monte Carlo studies: the three heterogeneous-cluster designs, rejection
//! curves under grouping policies, and calibrated panels.

mod calibrate;
mod curve;
mod dgp;

pub use calibrate::*;
pub use curve::*;
pub use dgp::*;
