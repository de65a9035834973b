//! Deformable surface model: a hypernetwork maps a latent code to the weights
//! of a SIREN that displaces points of a fixed template mesh.
//!
//! Modules, bottom up:
//! - [`mesh`]: triangle meshes, OBJ I/O, surface sampling, subdivision
//! - [`netcore`]: dense layers with hand-written backward passes and Adam
//! - [`model`]: hypernetwork decoder, ablation variants, checkpoints
//! - [`training`]: auto-decoder training and latent fitting
//! - [`fitting`]: landmark reconstruction and point-handle editing
//! - [`semantics`]: SVM latent directions and PCA complexity
//! - [`datagen`]: synthetic template/deformation datasets

pub mod mesh;
pub mod model;
pub mod netcore;
pub mod semantics;
pub mod training;
pub mod datagen;
pub mod fitting;
mod par;

pub use mesh::{MeshError, SurfacePoint, TriMesh, Vec3, PAYLOAD_CONTENT_TYPE};
pub use model::{AutoDecoder, Decoder, HyperDecoder, HyperNet, LatentCode, ModelConfig, ModelError, PointSet};
