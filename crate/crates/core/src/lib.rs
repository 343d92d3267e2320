//! LiDAR point-cloud preprocessing for range-view / voxel fusion detectors.
//!
//! The pipeline projects sweeps onto a pseudo range image, samples per-pixel
//! semantic features back onto points, decorates points with voxel-relative
//! geometry, pools both into per-voxel vectors, and provides multi-sweep
//! fusion, ground-truth paste augmentation with an occlusion filter, and
//! rotated-box NMS.

pub mod augment;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod nms;
pub mod range;
pub mod semantic;
pub mod temporal;
pub mod voxel;

pub use error::{Error, Result};
pub use geometry::{OrientedBox, Point, PointCloud, RigidTransform};
pub use range::{GridSpec, RangeImage};
