//! Voxel / pillar partitioning and the per-point geometric decorator.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::semantic::PointFeatures;

const MULTIPLE_TOL: f64 = 1e-9;

pub const SCENE_XY: f64 = 51.2;
pub const SCENE_Z: (f64, f64) = (-3.0, 3.0);
pub const DEFAULT_VOXEL_DZ: f64 = 0.15;
pub const DEFAULT_BEV_RESOLUTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelMode {
    Voxel,
    /// A single vertical layer spanning the whole z extent.
    Pillar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub mode: VoxelMode,
}

impl Default for VoxelSpec {
    fn default() -> Self {
        VoxelSpec::with_bev_resolution(VoxelMode::Voxel, DEFAULT_BEV_RESOLUTION)
            .expect("default voxel spec is valid")
    }
}

fn cells(min: f64, max: f64, size: f64, axis: &str) -> Result<usize> {
    if !(min.is_finite() && max.is_finite() && size.is_finite()) || size <= 0.0 || max <= min {
        return Err(Error::InvalidVoxelSpec(format!(
            "{axis}: need finite min < max and size > 0, got [{min}, {max}) / {size}"
        )));
    }
    let ratio = (max - min) / size;
    let n = ratio.round();
    if (ratio - n).abs() > MULTIPLE_TOL * n.max(1.0) {
        return Err(Error::InvalidVoxelSpec(format!(
            "{axis}: extent {} is not a multiple of {size}",
            max - min
        )));
    }
    Ok(n as usize)
}

impl VoxelSpec {
    pub fn validated(self) -> Result<Self> {
        cells(self.x_min, self.x_max, self.dx, "x")?;
        cells(self.y_min, self.y_max, self.dy, "y")?;
        let nz = cells(self.z_min, self.z_max, self.dz, "z")?;
        if self.mode == VoxelMode::Pillar && nz != 1 {
            return Err(Error::InvalidVoxelSpec(
                "pillar mode needs dz equal to the z extent".into(),
            ));
        }
        Ok(self)
    }

    /// The default scene (x, y within ±51.2 m, z in [-3, 3)) at the given
    /// horizontal cell size. When 51.2 is not a multiple of `bev_res` the x/y
    /// extent grows symmetrically to the next multiple.
    pub fn with_bev_resolution(mode: VoxelMode, bev_res: f64) -> Result<Self> {
        if !(bev_res.is_finite() && bev_res > 0.0) {
            return Err(Error::InvalidVoxelSpec(format!(
                "BEV resolution must be positive, got {bev_res}"
            )));
        }
        let half_cells = {
            let ratio = SCENE_XY / bev_res;
            let rounded = ratio.round();
            if (ratio - rounded).abs() <= MULTIPLE_TOL * rounded.max(1.0) {
                rounded
            } else {
                ratio.ceil()
            }
        };
        let half = half_cells * bev_res;
        let (z_min, z_max) = SCENE_Z;
        VoxelSpec {
            x_min: -half,
            x_max: half,
            y_min: -half,
            y_max: half,
            z_min,
            z_max,
            dx: bev_res,
            dy: bev_res,
            dz: match mode {
                VoxelMode::Voxel => DEFAULT_VOXEL_DZ,
                VoxelMode::Pillar => z_max - z_min,
            },
            mode,
        }
        .validated()
    }

    /// Grid size `(nx, ny, nz)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let n = |min: f64, max: f64, d: f64| ((max - min) / d).round() as usize;
        (
            n(self.x_min, self.x_max, self.dx),
            n(self.y_min, self.y_max, self.dy),
            n(self.z_min, self.z_max, self.dz),
        )
    }

    pub fn center_of(&self, idx: VoxelIndex) -> [f64; 3] {
        [
            self.x_min + (idx.ix as f64 + 0.5) * self.dx,
            self.y_min + (idx.iy as f64 + 0.5) * self.dy,
            self.z_min + (idx.iz as f64 + 0.5) * self.dz,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelIndex {
    pub ix: u32,
    pub iy: u32,
    pub iz: u32,
}

fn axis_index(v: f64, min: f64, max: f64, size: f64, n: usize) -> Option<u32> {
    if !(v >= min && v < max) {
        return None;
    }
    let i = ((v - min) / size).floor();
    (i >= 0.0 && i < n as f64).then_some(i as u32)
}

/// Half-open binning; `None` when any coordinate is outside `[min, max)`.
pub fn voxel_index(p: &Point, spec: &VoxelSpec) -> Option<VoxelIndex> {
    let (nx, ny, nz) = spec.dims();
    Some(VoxelIndex {
        ix: axis_index(p.x, spec.x_min, spec.x_max, spec.dx, nx)?,
        iy: axis_index(p.y, spec.y_min, spec.y_max, spec.dy, ny)?,
        iz: axis_index(p.z, spec.z_min, spec.z_max, spec.dz, nz)?,
    })
}

/// Position, sensor range, offset to the voxel center and relative time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricFeature {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
    pub ox: f64,
    pub oy: f64,
    pub oz: f64,
    pub t_rel: f64,
}

impl GeometricFeature {
    pub const BASE_DIM: usize = 7;

    pub fn dim(with_time: bool) -> usize {
        Self::BASE_DIM + with_time as usize
    }

    /// `[x, y, z, r, ox, oy, oz]`, plus `t_rel` when `with_time`.
    pub fn to_vec(&self, with_time: bool) -> Vec<f64> {
        let mut v = vec![self.x, self.y, self.z, self.r, self.ox, self.oy, self.oz];
        if with_time {
            v.push(self.t_rel);
        }
        v
    }
}

pub fn decorate(p: &Point, spec: &VoxelSpec) -> Result<GeometricFeature> {
    let idx = voxel_index(p, spec).ok_or(Error::OutOfBounds {
        x: p.x,
        y: p.y,
        z: p.z,
    })?;
    Ok(decorate_in(p, spec, idx))
}

fn decorate_in(p: &Point, spec: &VoxelSpec, idx: VoxelIndex) -> GeometricFeature {
    let [cx, cy, cz] = spec.center_of(idx);
    GeometricFeature {
        x: p.x,
        y: p.y,
        z: p.z,
        r: p.range(),
        ox: p.x - cx,
        oy: p.y - cy,
        oz: p.z - cz,
        t_rel: p.t_rel,
    }
}

/// Point indices per occupied voxel, in input order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VoxelGrid {
    pub voxels: BTreeMap<VoxelIndex, Vec<usize>>,
    pub out_of_bounds: Vec<usize>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

pub fn build_grid(cloud: &PointCloud, spec: &VoxelSpec) -> VoxelGrid {
    let indices: Vec<Option<VoxelIndex>> = cloud
        .points
        .par_iter()
        .with_min_len(4096)
        .map(|p| voxel_index(p, spec))
        .collect();
    let mut grid = VoxelGrid::default();
    for (i, idx) in indices.into_iter().enumerate() {
        match idx {
            Some(v) => grid.voxels.entry(v).or_default().push(i),
            None => grid.out_of_bounds.push(i),
        }
    }
    grid
}

/// Decorates every in-bounds point; `None` for out-of-bounds ones.
pub fn decorate_cloud(cloud: &PointCloud, spec: &VoxelSpec) -> Vec<Option<GeometricFeature>> {
    cloud
        .points
        .par_iter()
        .with_min_len(4096)
        .map(|p| voxel_index(p, spec).map(|idx| decorate_in(p, spec, idx)))
        .collect()
}

/// `out = W v + b`, applied independently to each vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    /// `out_dim` rows of `in_dim` weights.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl AffineMap {
    pub fn identity(dim: usize) -> Self {
        AffineMap {
            weights: (0..dim)
                .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            bias: vec![0.0; dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn out_dim(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let in_dim = self.in_dim();
        if self.weights.iter().any(|r| r.len() != in_dim) {
            return Err(Error::DimensionMismatch(
                "affine weight rows differ in length".into(),
            ));
        }
        if self.bias.len() != self.out_dim() {
            return Err(Error::DimensionMismatch(format!(
                "bias has {} entries for {} outputs",
                self.bias.len(),
                self.out_dim()
            )));
        }
        if self
            .weights
            .iter()
            .flatten()
            .chain(&self.bias)
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidConfig(
                "affine map has non-finite entries".into(),
            ));
        }
        Ok(())
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(v).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

pub fn voxel_affine(features: &PointFeatures, map: &AffineMap) -> Result<PointFeatures> {
    map.validate()?;
    if map.in_dim() != features.dim() {
        return Err(Error::DimensionMismatch(format!(
            "affine map expects width {}, features have {}",
            map.in_dim(),
            features.dim()
        )));
    }
    let rows: Vec<Vec<f64>> = features.rows().map(|r| map.apply(r)).collect();
    PointFeatures::from_rows(map.out_dim(), &rows)
}
