//! Independent references used to check `mm-monge`: finite-difference
//! gradients and sampling-based MMD values.

pub mod fd;
pub mod stats;
