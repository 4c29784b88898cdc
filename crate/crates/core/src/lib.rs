pub mod dataset;
pub mod error;
pub mod math;
pub mod sinkhorn;
pub mod repr;
pub mod assignment;
pub mod eval;
pub mod kmeans;
pub mod trainer;
pub mod checkpoint;
pub mod cli;
