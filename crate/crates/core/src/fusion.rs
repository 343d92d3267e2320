//! Semantic + geometric feature concatenation and per-voxel pooling.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::semantic::PointFeatures;
use crate::voxel::{
    build_grid, decorate_cloud, AffineMap, GeometricFeature, VoxelIndex, VoxelSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    #[serde(alias = "avg")]
    Average,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "avg" | "average" | "mean" => Ok(Pooling::Average),
            other => Err(Error::InvalidConfig(format!(
                "unknown pooling '{other}' (expected max or avg)"
            ))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Average => "avg",
        })
    }
}

/// Max over the wide semantic slice and mean over the geometric slice is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingConfig {
    pub semantic: Pooling,
    pub geometric: Pooling,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig {
            semantic: Pooling::Max,
            geometric: Pooling::Average,
        }
    }
}

impl PoolingConfig {
    pub const ALL: [PoolingConfig; 4] = [
        PoolingConfig {
            semantic: Pooling::Max,
            geometric: Pooling::Max,
        },
        PoolingConfig {
            semantic: Pooling::Max,
            geometric: Pooling::Average,
        },
        PoolingConfig {
            semantic: Pooling::Average,
            geometric: Pooling::Max,
        },
        PoolingConfig {
            semantic: Pooling::Average,
            geometric: Pooling::Average,
        },
    ];
}

/// `[semantic ‖ geometric]` per point.
pub fn fuse_point_features(
    sem: &PointFeatures,
    geo: &[GeometricFeature],
    with_time: bool,
) -> Result<PointFeatures> {
    if sem.len() != geo.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} semantic vectors for {} geometric ones",
            sem.len(),
            geo.len()
        )));
    }
    let dim = sem.dim() + GeometricFeature::dim(with_time);
    let mut values = Vec::with_capacity(dim * geo.len());
    for (s, g) in sem.rows().zip(geo) {
        values.extend_from_slice(s);
        values.extend(g.to_vec(with_time));
    }
    PointFeatures::new(geo.len(), dim, values)
}

/// Element-wise reduction of one column. Inputs are sorted first so the
/// result is bit-identical under any permutation of the vectors.
fn pool_column(column: &mut [f64], pooling: Pooling) -> f64 {
    match pooling {
        Pooling::Max => column
            .iter()
            .copied()
            .max_by(|a, b| a.total_cmp(b))
            .expect("column is non-empty"),
        Pooling::Average => {
            column.sort_unstable_by(|a, b| a.total_cmp(b));
            column.iter().sum::<f64>() / column.len() as f64
        }
    }
}

/// Pools concatenated vectors: the first `dim_sem` components with
/// `cfg.semantic`, the rest with `cfg.geometric`.
pub fn aggregate_voxel<V: AsRef<[f64]>>(
    vectors: &[V],
    dim_sem: usize,
    cfg: &PoolingConfig,
) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or(Error::EmptyVoxel)?.as_ref();
    let dim = first.len();
    if dim_sem > dim || vectors.iter().any(|v| v.as_ref().len() != dim) {
        return Err(Error::DimensionMismatch(
            "voxel vectors differ in width".into(),
        ));
    }
    let mut column = vec![0.0; vectors.len()];
    Ok((0..dim)
        .map(|j| {
            for (slot, v) in column.iter_mut().zip(vectors) {
                *slot = v.as_ref()[j];
            }
            let pooling = if j < dim_sem {
                cfg.semantic
            } else {
                cfg.geometric
            };
            pool_column(&mut column, pooling)
        })
        .collect())
}

/// Sparse per-voxel features, ordered by voxel index.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeatureTensor {
    pub spec: VoxelSpec,
    pub dim_sem: usize,
    pub dim_geo: usize,
    pub entries: BTreeMap<VoxelIndex, Vec<f64>>,
}

impl VoxelFeatureTensor {
    pub fn dim(&self) -> usize {
        self.dim_sem + self.dim_geo
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct AssembleOptions {
    /// Append each point's relative timestamp to the geometric vector.
    pub with_time: bool,
    /// Optional per-point affine map on the geometric vector before pooling.
    pub geometric_map: Option<AffineMap>,
}

pub fn assemble(
    cloud: &PointCloud,
    sem: &PointFeatures,
    spec: &VoxelSpec,
    cfg: &PoolingConfig,
) -> Result<VoxelFeatureTensor> {
    assemble_with(cloud, sem, spec, cfg, &AssembleOptions::default())
}

/// Voxelize, decorate, concatenate and pool.
pub fn assemble_with(
    cloud: &PointCloud,
    sem: &PointFeatures,
    spec: &VoxelSpec,
    cfg: &PoolingConfig,
    opts: &AssembleOptions,
) -> Result<VoxelFeatureTensor> {
    if sem.len() != cloud.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} semantic vectors for {} points",
            sem.len(),
            cloud.len()
        )));
    }
    let base_geo = GeometricFeature::dim(opts.with_time);
    let dim_geo = match &opts.geometric_map {
        Some(map) => {
            map.validate()?;
            if map.in_dim() != base_geo {
                return Err(Error::DimensionMismatch(format!(
                    "geometric map expects width {}, decorator produces {base_geo}",
                    map.in_dim()
                )));
            }
            map.out_dim()
        }
        None => base_geo,
    };
    let grid = build_grid(cloud, spec);
    let decorated = decorate_cloud(cloud, spec);
    let dim_sem = sem.dim();

    let voxels: Vec<(&VoxelIndex, &Vec<usize>)> = grid.voxels.iter().collect();
    let pooled: Vec<Result<(VoxelIndex, Vec<f64>)>> = voxels
        .par_iter()
        .map(|(idx, members)| {
            let rows: Vec<Vec<f64>> = members
                .iter()
                .map(|&i| {
                    let g = decorated[i]
                        .expect("grid members are in bounds")
                        .to_vec(opts.with_time);
                    let g = match &opts.geometric_map {
                        Some(map) => map.apply(&g),
                        None => g,
                    };
                    let mut row = Vec::with_capacity(dim_sem + dim_geo);
                    row.extend_from_slice(sem.row(i));
                    row.extend(g);
                    row
                })
                .collect();
            Ok((**idx, aggregate_voxel(&rows, dim_sem, cfg)?))
        })
        .collect();

    Ok(VoxelFeatureTensor {
        spec: *spec,
        dim_sem,
        dim_geo,
        entries: pooled.into_iter().collect::<Result<_>>()?,
    })
}
