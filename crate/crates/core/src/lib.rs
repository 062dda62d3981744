//! Bayesian optimization with kernels evolved at run time.

pub mod acquisition;
pub mod dsl;
pub mod evolution;
pub mod gp;
pub mod harness;
pub mod optim;
pub mod primitives;
pub mod proposer;
pub mod selection;
pub mod validation;
