//! Spatially partitioned volumetric neural-network engine.
//!
//! Volumes are split into non-overlapping blocks across a simulated device
//! mesh; every windowed operator first exchanges block margins (halos) with
//! mesh neighbours so that the partitioned computation matches the
//! single-device computation. On top of that sit a 3D U-Net, its training
//! loop, a tumour-synthesis augmentation, and single-device oracles used to
//! verify the distributed path.

pub mod augment;
pub mod bench;
pub mod cli;
pub mod error;
pub mod halo;
pub mod io;
pub mod mesh;
pub mod ops;
pub mod oracle;
pub mod sharded;
pub mod tensor;
pub mod training;
pub mod unet;
pub mod verify;

pub use error::{Error, MeshError, Result, SpvError};
pub use mesh::{create_mesh, DeviceMesh, Layout, MeshShape, Worker};
pub use sharded::{gather, shard, ShardLayout, ShardedTensor, TensorSpec};
pub use tensor::{DType, Element, Real, Tensor};
pub use unet::{build, init_params, recipe_for_resolution, LayerGraph, ParamStore, UNetConfig};
