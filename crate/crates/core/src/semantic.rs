//! Per-pixel semantic features and their transfer back onto points.
//!
//! The learned range-view extractor is replaced by [`FeatureProvider`]: either
//! the analytic [`ReferenceFeatures`] or a precomputed map loaded from disk.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::range::{Channel, RangeImage};

/// Smallest dimension accepted by the reference provider.
pub const MIN_REFERENCE_DIM: usize = 8;
/// Raw channels, 3x3 mean and std of range, horizontal and vertical differences.
const FIXED_COMPONENTS: usize = 9;
pub const DEFAULT_FEATURE_DIM: usize = 64;

/// A `rows x cols x dim` tensor, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    rows: usize,
    cols: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(rows: usize, cols: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols * dim {
            return Err(Error::DimensionMismatch(format!(
                "feature map {rows}x{cols}x{dim} needs {} values, got {}",
                rows * cols * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "feature map contains non-finite values".into(),
            ));
        }
        Ok(FeatureMap {
            rows,
            cols,
            dim,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.cols + col) * self.dim;
        &self.values[start..start + self.dim]
    }

    fn check_matches(&self, img: &RangeImage) -> Result<()> {
        if self.rows != img.rows() || self.cols != img.cols() {
            return Err(Error::DimensionMismatch(format!(
                "feature map is {}x{}, range image is {}x{}",
                self.rows,
                self.cols,
                img.rows(),
                img.cols()
            )));
        }
        Ok(())
    }
}

/// `len` vectors of width `dim`, stored row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointFeatures {
    len: usize,
    dim: usize,
    values: Vec<f64>,
}

impl PointFeatures {
    pub fn new(len: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != len * dim {
            return Err(Error::DimensionMismatch(format!(
                "{len} rows of width {dim} need {} values, got {}",
                len * dim,
                values.len()
            )));
        }
        Ok(PointFeatures { len, dim, values })
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        PointFeatures {
            len,
            dim,
            values: vec![0.0; len * dim],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "row of width {} in a {dim}-wide set",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Ok(PointFeatures {
            len: rows.len(),
            dim,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.len).map(move |i| self.row(i))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub trait FeatureProvider {
    fn features(&self, img: &RangeImage) -> Result<FeatureMap>;
}

/// Deterministic analytic features computed from the range image rasters.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceFeatures {
    pub dim: usize,
}

impl Default for ReferenceFeatures {
    fn default() -> Self {
        ReferenceFeatures {
            dim: DEFAULT_FEATURE_DIM,
        }
    }
}

impl FeatureProvider for ReferenceFeatures {
    fn features(&self, img: &RangeImage) -> Result<FeatureMap> {
        extract_reference_features(img, self.dim)
    }
}

/// A feature map produced elsewhere, e.g. by a trained network.
#[derive(Debug, Clone)]
pub struct PrecomputedFeatures(pub FeatureMap);

impl FeatureProvider for PrecomputedFeatures {
    fn features(&self, img: &RangeImage) -> Result<FeatureMap> {
        self.0.check_matches(img)?;
        Ok(self.0.clone())
    }
}

/// Computes, per pixel:
///
/// * `0..5`: the raw channels `r, h, phi, i, m`;
/// * `5, 6`: mean and population standard deviation of `r` over the 3x3
///   neighborhood, always divided by 9 (empty or off-image cells count as 0);
/// * `7, 8`: horizontal and vertical central differences of `r`, where an
///   off-image neighbor takes the center value;
/// * the rest: sinusoidal encodings of `(row, col)`.
///
/// Columns wrap around on a full-circle grid. `dim == 8` drops the vertical
/// difference.
pub fn extract_reference_features(img: &RangeImage, dim: usize) -> Result<FeatureMap> {
    if dim < MIN_REFERENCE_DIM {
        return Err(Error::FeatureDimTooSmall {
            dim,
            min: MIN_REFERENCE_DIM,
        });
    }
    let (rows, cols) = (img.rows(), img.cols());
    let wrap = img.spec().is_full_circle();
    let channels = img.channels();
    let range = channels.get(Channel::Range);
    let neighbor = |row: usize, col: usize, dr: isize, dc: isize| -> Option<f64> {
        let r = row as isize + dr;
        if r < 0 || r >= rows as isize {
            return None;
        }
        let mut c = col as isize + dc;
        if c < 0 || c >= cols as isize {
            if !wrap {
                return None;
            }
            c = c.rem_euclid(cols as isize);
        }
        Some(range[r as usize * cols + c as usize])
    };
    let positional = positional_table(dim.saturating_sub(FIXED_COMPONENTS));

    let mut values = vec![0.0; rows * cols * dim];
    values
        .par_chunks_mut(cols * dim)
        .enumerate()
        .for_each(|(row, out_row)| {
            for col in 0..cols {
                let out = &mut out_row[col * dim..(col + 1) * dim];
                let mut fixed = [0.0; FIXED_COMPONENTS];
                for (slot, ch) in Channel::ALL.into_iter().enumerate() {
                    fixed[slot] = channels.at(ch, row, col);
                }
                let mut window = [0.0; 9];
                for (k, (dr, dc)) in (-1..=1)
                    .flat_map(|dr| (-1..=1).map(move |dc| (dr, dc)))
                    .enumerate()
                {
                    window[k] = neighbor(row, col, dr, dc).unwrap_or(0.0);
                }
                let mean = window.iter().sum::<f64>() / 9.0;
                let var = window.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 9.0;
                let center = range[row * cols + col];
                let side = |dr, dc| neighbor(row, col, dr, dc).unwrap_or(center);
                fixed[5] = mean;
                fixed[6] = var.sqrt();
                fixed[7] = (side(0, 1) - side(0, -1)) / 2.0;
                fixed[8] = (side(1, 0) - side(-1, 0)) / 2.0;

                let n_fixed = dim.min(FIXED_COMPONENTS);
                out[..n_fixed].copy_from_slice(&fixed[..n_fixed]);
                for (k, (axis, freq, is_cos)) in positional.iter().enumerate() {
                    let coord = if *axis == 0 { row } else { col } as f64;
                    let angle = coord * freq;
                    out[FIXED_COMPONENTS + k] = if *is_cos { angle.cos() } else { angle.sin() };
                }
            }
        });
    FeatureMap::new(rows, cols, dim, values)
}

/// `(axis, angular frequency, cosine?)` per positional component, cycling
/// through sin(row), cos(row), sin(col), cos(col) at decreasing frequencies.
fn positional_table(count: usize) -> Vec<(u8, f64, bool)> {
    let bands = count.div_ceil(4).max(1) as f64;
    (0..count)
        .map(|k| {
            let band = (k / 4) as f64;
            let freq = 1.0 / 10000f64.powf(band / bands);
            ((k % 4 >= 2) as u8, freq, k % 2 == 1)
        })
        .collect()
}

/// Gives each surviving point its pixel's feature vector; every other point
/// gets zeros.
pub fn sample_point_features(fmap: &FeatureMap, img: &RangeImage) -> Result<PointFeatures> {
    fmap.check_matches(img)?;
    let n = img.assignments().len();
    let mut out = PointFeatures::zeros(n, fmap.dim);
    for i in 0..n {
        if let Some(px) = img.point_to_pixel(i) {
            out.values[i * fmap.dim..(i + 1) * fmap.dim]
                .copy_from_slice(fmap.pixel(px.row, px.col));
        }
    }
    Ok(out)
}
