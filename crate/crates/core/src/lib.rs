//! Voxel detailization engine.
//!
//! A coarse binary occupancy grid goes in; a pair of 3D convolutional
//! upsampling networks produce a fine density field and an RGB albedo field
//! confined to a one-voxel dilation of the input. The networks are trained by
//! rendering the fields through a differentiable volume renderer and
//! regressing the renders toward targets produced by a pluggable guidance
//! oracle, with a silhouette term keeping the output faithful to the input
//! structure.
//!
//! Module map:
//!
//! * [`grid`], [`voxelize`], [`augment`], [`mesh`], [`formats`]: occupancy
//!   grids, morphology, mesh voxelization, augmentation and file formats.
//! * [`nn`]: a small reverse-mode autodiff tape with 3D (transposed)
//!   convolutions, activations, Adam and checkpoints.
//! * [`render`]: differentiable volumetric ray marcher.
//! * [`detailizer`]: the two upsampling networks plus structure masking.
//! * [`guidance`]: oracle interface and the distillation/silhouette losses.
//! * [`train`]: two-stage training loop with the annealed silhouette weight.
//! * [`metrics`]: IoU, CLIP-style score, Fréchet distance and the evaluation
//!   protocol.
//! * [`meshio`]: marching cubes, vertex colouring, PLY/OBJ export.

pub mod augment;
pub mod detailizer;
pub mod formats;
pub mod grid;
pub mod guidance;
pub mod mesh;
pub mod meshio;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod render;
pub mod train;
pub mod voxelize;

mod error;

pub use error::{Error, Result};
pub use grid::OccupancyGrid;
pub use mesh::TriangleMesh;
pub use nn::{Tape, Tensor, Var};
