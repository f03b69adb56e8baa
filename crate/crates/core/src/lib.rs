//! Models and numerics for a text → image → genre → style studio.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the element type for the common cases. Training and
//! inference use `f32`; gradient verification uses `f64`.

pub mod checkpoint;
pub mod corpus;
pub mod dmgan;
pub mod error;
pub mod genre;
pub mod gradcheck;
pub mod graph;
pub mod imageops;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod styler;
pub mod tensor;
pub mod text_encoder;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use nn::{ParamStore, Params};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
