pub mod conv;
pub mod gemm;
pub mod layers;
pub mod ops;
