//! Deterministic core of a modular single-view indoor scene reconstruction
//! pipeline.
//!
//! Neural stages (segmentation, depth estimation, inpainting, image-to-3D)
//! are consumed through a file-based backend protocol; everything else lives
//! here:
//!
//! - [`maskfuse`]: label class-agnostic instance masks by semantic voting.
//! - [`depthfuse`]: align a detail-rich affine-invariant depth to a coherent
//!   metric depth.
//! - [`amodal`]: depth-ordered inpainting masks for occluded or out-of-frame
//!   instances.
//! - [`compose`]: scale estimation, ray-cast visibility, ICP and silhouette
//!   pose refinement.
//! - [`metrics`]: Chamfer distance, F-score and image metrics.
//! - [`backend`]: directory-based job protocol plus mock backends.
//! - [`dataprep`]: camera sample validation and mask augmentation.
//! - [`pipeline`]: staged, cached orchestration used by the CLI.

pub mod amodal;
pub mod backend;
pub mod camera;
pub mod compose;
pub mod dataprep;
pub mod depthfuse;
pub mod error;
pub mod fixture;
pub mod io;
pub mod maskfuse;
pub mod metrics;
pub mod morphology;
pub mod pipeline;
pub mod raycast;
pub mod spatial;
pub mod types;

pub use camera::unproject;
pub use error::{Error, Result};
pub use types::{
    Aabb, BBox, CameraIntrinsics, ClassId, ClassTable, DepthMap, ImageBuffer, InstanceMask, Mat3, PointCloud, RigidScaleTransform,
    SemanticInstance, TriangleMesh, Vec3,
};
