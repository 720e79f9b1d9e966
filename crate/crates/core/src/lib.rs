//! Numerical core for sequence diffusion: Neumann Laplacian stencils, their
//! spectral theory, reaction-diffusion gradient flows, coupled-head
//! synchronisation and a learnable multi-scale diffusion layer.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). The aliases below
//! fix `f64`, which is what the stated tolerances assume.

// `!(x > 0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod field;
pub mod layer;
pub mod matrix;
pub mod scalar;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
pub use field::{
    diffusion_step, dirichlet_energy, laplacian, laplacian_matrix, laplacian_transpose, BoundaryMode, CflCheck,
    SequenceField, StencilSpec,
};
pub use layer::{DiffusionLayerParams, LayerCache, LayerGradients};
pub use matrix::DenseMatrix;
pub use scalar::Scalar;

pub type Field = SequenceField<f64>;
pub type Field32 = SequenceField<f32>;
pub type Matrix = DenseMatrix<f64>;
pub type LayerParams = DiffusionLayerParams<f64>;
pub type LayerParams32 = DiffusionLayerParams<f32>;
pub type Potential = dynamics::ReactionPotential<f64>;
pub type Kernel = dynamics::CouplingKernel<f64>;
pub type Flow = dynamics::FlowConfig<f64>;
pub type CoupledConfig = dynamics::CoupledSystemConfig<f64>;
