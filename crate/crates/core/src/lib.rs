//! Logic-tree posterior inference for temporal logic point processes.

pub mod data;
pub mod em;
pub mod eval;
pub mod gflownet;
pub mod policy;
pub mod remote;
pub mod synthetic;
pub mod tlpp;
pub mod tree;
