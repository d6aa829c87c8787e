//! Minimal CPU neural-network engine: GEMM-backed convolution primitives,
//! the layer set required by the architecture zoo, a DAG executor with
//! manual backpropagation, an Adam optimizer, and the weighted
//! cross-entropy loss.
//!
//! Everything is f32 with f64 reductions where statistics matter. All
//! randomness is seeded; repeated runs produce identical results.

pub mod adam;
pub mod layers;
pub mod loss;
pub mod model;
pub mod ops;
