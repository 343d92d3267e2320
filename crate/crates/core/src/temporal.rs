//! Multi-sweep aggregation.
//!
//! Two ways to feed several sweeps to the range-view branch:
//! * temporal fusion projects every sweep in its own sensor frame at the
//!   single-frame resolution and stacks the images;
//! * spatial fusion aligns all sweeps to the key frame and projects them on a
//!   grid `n` times finer per axis, preferring points closer in time to the
//!   key frame.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform};
use crate::range::{occupancy_rate, project, project_by_priority, GridSpec, RangeImage};

const KEY_POSE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub cloud: PointCloud,
    /// Maps this sweep's sensor frame into the key frame.
    pub pose_to_key: RigidTransform,
    /// Seconds.
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSet {
    frames: Vec<Sweep>,
    key_index: usize,
}

impl SweepSet {
    pub fn new(frames: Vec<Sweep>, key_index: usize) -> Result<Self> {
        let key = frames.get(key_index).ok_or_else(|| {
            Error::InvalidSweeps(format!(
                "key index {key_index} with {} frames",
                frames.len()
            ))
        })?;
        if !key.pose_to_key.is_near_identity(KEY_POSE_TOL) {
            return Err(Error::InvalidSweeps(
                "key frame pose must be the identity".into(),
            ));
        }
        if frames.iter().any(|f| !f.timestamp.is_finite()) {
            return Err(Error::InvalidSweeps("non-finite timestamp".into()));
        }
        if frames.windows(2).any(|w| w[1].timestamp <= w[0].timestamp) {
            return Err(Error::InvalidSweeps(
                "timestamps must be strictly increasing".into(),
            ));
        }
        Ok(SweepSet { frames, key_index })
    }

    /// A set with a single key frame.
    pub fn single(cloud: PointCloud) -> Self {
        SweepSet {
            frames: vec![Sweep {
                cloud,
                pose_to_key: RigidTransform::identity(),
                timestamp: 0.0,
            }],
            key_index: 0,
        }
    }

    pub fn frames(&self) -> &[Sweep] {
        &self.frames
    }

    pub fn key_index(&self) -> usize {
        self.key_index
    }

    pub fn key_timestamp(&self) -> f64 {
        self.frames[self.key_index].timestamp
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Temporal,
    Spatial,
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(FusionStrategy::Temporal),
            "spatial" => Ok(FusionStrategy::Spatial),
            other => Err(Error::InvalidConfig(format!(
                "unknown fusion strategy '{other}' (expected temporal or spatial)"
            ))),
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionStrategy::Temporal => "temporal",
            FusionStrategy::Spatial => "spatial",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    /// Linear resolution multiplier, spatial fusion only.
    pub n: usize,
}

impl Default for FusionConfig {
    /// Spatial fusion at twice the linear resolution, the setting for 10-sweep input.
    fn default() -> Self {
        FusionConfig {
            strategy: FusionStrategy::Spatial,
            n: 2,
        }
    }
}

/// All sweeps in key-frame coordinates, frame by frame, each point stamped
/// with `timestamp - key_timestamp`.
pub fn align_frames(sweeps: &SweepSet) -> PointCloud {
    let key_ts = sweeps.key_timestamp();
    let total = sweeps.frames.iter().map(|f| f.cloud.len()).sum();
    let mut points = Vec::with_capacity(total);
    for frame in &sweeps.frames {
        let dt = frame.timestamp - key_ts;
        points.extend(frame.cloud.points.iter().map(|p| {
            let mut q = frame.pose_to_key.apply_point(p);
            q.t_rel = dt;
            q
        }));
    }
    PointCloud {
        points,
        frame_id: sweeps.frames[sweeps.key_index].cloud.frame_id.clone(),
    }
}

/// One range image per sweep, each in its own sensor frame.
pub fn temporal_fuse(sweeps: &SweepSet, spec: &GridSpec) -> Vec<RangeImage> {
    sweeps
        .frames
        .par_iter()
        .map(|f| project(&f.cloud, spec))
        .collect()
}

/// Aligned cloud and its projection on the `n`-times finer grid. Conflicts
/// go to the smallest `|t_rel|`, then the smallest range, then the lower index.
pub fn spatial_fuse_aligned(
    sweeps: &SweepSet,
    spec: &GridSpec,
    n: usize,
) -> Result<(PointCloud, RangeImage)> {
    let fine = spec.refined(n)?;
    let cloud = align_frames(sweeps);
    let image = project_by_priority(&cloud, &fine, |p, range| [p.t_rel.abs(), range]);
    Ok((cloud, image))
}

pub fn spatial_fuse(sweeps: &SweepSet, spec: &GridSpec, n: usize) -> Result<RangeImage> {
    spatial_fuse_aligned(sweeps, spec, n).map(|(_, img)| img)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyRow {
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub occupied: usize,
    pub tau: f64,
}

pub fn occupancy_report(
    sweeps: &SweepSet,
    spec: &GridSpec,
    n_list: &[usize],
) -> Result<Vec<OccupancyRow>> {
    n_list
        .iter()
        .map(|&n| {
            let img = spatial_fuse(sweeps, spec, n)?;
            Ok(OccupancyRow {
                n,
                rows: img.rows(),
                cols: img.cols(),
                occupied: img.occupied_count(),
                tau: occupancy_rate(&img),
            })
        })
        .collect()
}

/// Plain-text table with a header line.
pub fn format_occupancy_table(rows: &[OccupancyRow]) -> String {
    let mut out = format!(
        "{:>4} {:>6} {:>6} {:>10} {:>12}\n",
        "n", "rows", "cols", "occupied", "tau"
    );
    for r in rows {
        out.push_str(&format!(
            "{:>4} {:>6} {:>6} {:>10} {:>12.6e}\n",
            r.n, r.rows, r.cols, r.occupied, r.tau
        ));
    }
    out
}
