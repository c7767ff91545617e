pub mod basis;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod factors;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod maps;
pub mod optimizer;
pub mod pipeline;
pub mod scalar;
pub mod simulator;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Pose = geometry::RigidPose<f64>;
pub type Pose32 = geometry::RigidPose<f32>;
pub type Camera = geometry::PinholeCamera<f64>;
pub type Camera32 = geometry::PinholeCamera<f32>;
pub type Stack = basis::BasisStack<f64>;
pub type Stack32 = basis::BasisStack<f32>;
pub type Weights = basis::WeightVector<f64>;
pub type Weights32 = basis::WeightVector<f32>;
pub type Frame = factors::Keyframe<f64>;
pub type Frame32 = factors::Keyframe<f32>;
pub type Graph = optimizer::FactorGraph<f64>;
pub type Graph32 = optimizer::FactorGraph<f32>;
pub type Backend = pipeline::Pipeline<f64>;
pub type Backend32 = pipeline::Pipeline<f32>;
