//! Articulated point-based neural rendering: canonical point extraction,
//! skeleton recovery, linear blend skinning, differentiable rendering and
//! training.

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod kinematics;
pub mod losses;
pub mod model;
pub mod nn;
pub mod render;
pub mod scene_io;
pub mod scalar;
pub mod skeleton;
pub mod trainer;
pub mod voxel_seed;

pub use error::{Error, Result};

/// Double-precision tensor used throughout the model.
pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Var<'t> = autodiff::Var<'t, f64>;
pub type Vec3 = geometry::Vec3<f64>;
pub type Mat3 = geometry::Mat3<f64>;
pub type Rigid = geometry::Rigid<f64>;
pub type Mlp = nn::Mlp<f64>;
