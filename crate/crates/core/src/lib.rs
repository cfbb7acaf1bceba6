//! Certification and refutation of strict dissipativity for optimal control
//! problems whose stage cost is a weighted sum of several costs.

pub mod expr;
pub mod linalg;
pub mod model;
pub mod equilibrium;
pub mod lq;
pub mod storage;
pub mod verifier;
pub mod ocp;
