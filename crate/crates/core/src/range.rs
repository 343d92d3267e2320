//! Pseudo range-image projection.
//!
//! Points are binned on an evenly spaced azimuth/elevation grid. Each pixel
//! keeps the single point that wins the priority order (closest range by
//! default, lower input index on ties) and records range, height, elevation,
//! reflectance and an occupancy flag. Row 0 is the lowest elevation bin and
//! column 0 starts at `az_min`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

const MULTIPLE_TOL: f64 = 1e-9;

/// Angular grid in degrees. Bins are half-open: `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub az_min: f64,
    pub az_max: f64,
    pub az_step: f64,
    pub el_min: f64,
    pub el_max: f64,
    pub el_step: f64,
}

impl Default for GridSpec {
    /// 360 x 40 degrees at 0.3125 x 1.25 degree resolution: 32 rows, 1152 columns.
    fn default() -> Self {
        GridSpec {
            az_min: -180.0,
            az_max: 180.0,
            az_step: 0.3125,
            el_min: -30.0,
            el_max: 10.0,
            el_step: 1.25,
        }
    }
}

fn bin_count(min: f64, max: f64, step: f64, axis: &str) -> Result<usize> {
    if !(min.is_finite() && max.is_finite() && step.is_finite()) {
        return Err(Error::InvalidGrid(format!("{axis}: non-finite bound")));
    }
    if step <= 0.0 {
        return Err(Error::InvalidGrid(format!(
            "{axis}: step must be positive, got {step}"
        )));
    }
    if max <= min {
        return Err(Error::InvalidGrid(format!(
            "{axis}: empty range [{min}, {max})"
        )));
    }
    let ratio = (max - min) / step;
    let count = ratio.round();
    if (ratio - count).abs() > MULTIPLE_TOL * count.max(1.0) {
        return Err(Error::InvalidGrid(format!(
            "{axis}: extent {} is not a multiple of step {step}",
            max - min
        )));
    }
    Ok(count as usize)
}

impl GridSpec {
    pub fn new(az: (f64, f64, f64), el: (f64, f64, f64)) -> Result<Self> {
        GridSpec {
            az_min: az.0,
            az_max: az.1,
            az_step: az.2,
            el_min: el.0,
            el_max: el.1,
            el_step: el.2,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        bin_count(self.az_min, self.az_max, self.az_step, "azimuth")?;
        bin_count(self.el_min, self.el_max, self.el_step, "elevation")?;
        if self.az_max - self.az_min > 360.0 + MULTIPLE_TOL {
            return Err(Error::InvalidGrid(
                "azimuth range exceeds 360 degrees".into(),
            ));
        }
        Ok(self)
    }

    pub fn cols(&self) -> usize {
        ((self.az_max - self.az_min) / self.az_step).round() as usize
    }

    pub fn rows(&self) -> usize {
        ((self.el_max - self.el_min) / self.el_step).round() as usize
    }

    pub fn pixel_count(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_full_circle(&self) -> bool {
        (self.az_max - self.az_min - 360.0).abs() <= MULTIPLE_TOL
    }

    /// The same field of view with both angular steps divided by `n`.
    pub fn refined(&self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGrid(
                "resolution multiplier must be >= 1".into(),
            ));
        }
        GridSpec {
            az_step: self.az_step / n as f64,
            el_step: self.el_step / n as f64,
            ..*self
        }
        .validated()
    }

    /// Maps angles in degrees to `(row, col)`, or `None` outside the field of view.
    pub fn bin(&self, azimuth: f64, elevation: f64) -> Option<(usize, usize)> {
        let az = if self.is_full_circle() && azimuth >= self.az_max {
            azimuth - 360.0
        } else {
            azimuth
        };
        let col = ((az - self.az_min) / self.az_step).floor();
        let row = ((elevation - self.el_min) / self.el_step).floor();
        let in_range = |v: f64, n: usize| v >= 0.0 && v < n as f64;
        (in_range(row, self.rows()) && in_range(col, self.cols()))
            .then_some((row as usize, col as usize))
    }

    /// Azimuth of the center of column `col`, in degrees.
    pub fn azimuth_center(&self, col: usize) -> f64 {
        self.az_min + (col as f64 + 0.5) * self.az_step
    }

    pub fn elevation_center(&self, row: usize) -> f64 {
        self.el_min + (row as f64 + 0.5) * self.el_step
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spherical {
    /// Degrees in (-180, 180].
    pub azimuth: f64,
    /// Degrees above the horizontal plane.
    pub elevation: f64,
    pub range: f64,
}

pub fn spherical_of(p: &Point) -> Result<Spherical> {
    let rho = (p.x * p.x + p.y * p.y).sqrt();
    let range = (p.x * p.x + p.y * p.y + p.z * p.z).sqrt();
    if range == 0.0 {
        return Err(Error::DegeneratePoint);
    }
    Ok(Spherical {
        azimuth: p.y.atan2(p.x).to_degrees(),
        elevation: p.z.atan2(rho).to_degrees(),
        range,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    Range,
    Height,
    Elevation,
    Intensity,
    Mask,
}

impl Channel {
    pub const ALL: [Channel; 5] = [
        Channel::Range,
        Channel::Height,
        Channel::Elevation,
        Channel::Intensity,
        Channel::Mask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Range => "r",
            Channel::Height => "h",
            Channel::Elevation => "phi",
            Channel::Intensity => "i",
            Channel::Mask => "m",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown channel '{s}' (expected r, h, phi, i or m)"
                ))
            })
    }
}

/// Five row-major `rows x cols` rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    rows: usize,
    cols: usize,
    data: [Vec<f64>; 5],
}

impl ChannelStack {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ChannelStack {
            rows,
            cols,
            data: std::array::from_fn(|_| vec![0.0; rows * cols]),
        }
    }

    pub fn from_rasters(rows: usize, cols: usize, data: [Vec<f64>; 5]) -> Result<Self> {
        if let Some(bad) = data.iter().find(|d| d.len() != rows * cols) {
            return Err(Error::DimensionMismatch(format!(
                "raster has {} values, expected {rows}x{cols}",
                bad.len()
            )));
        }
        Ok(ChannelStack { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, channel: Channel) -> &[f64] {
        &self.data[channel.slot()]
    }

    pub fn at(&self, channel: Channel, row: usize, col: usize) -> f64 {
        self.data[channel.slot()][row * self.cols + col]
    }

    pub fn is_occupied(&self, row: usize, col: usize) -> bool {
        self.at(Channel::Mask, row, col) != 0.0
    }

    pub fn occupied_count(&self) -> usize {
        self.get(Channel::Mask)
            .iter()
            .filter(|&&m| m != 0.0)
            .count()
    }

    /// Channel-last interleaving, as stored in tensor files.
    pub fn interleaved(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows * self.cols).flat_map(move |i| self.data.iter().map(move |c| c[i]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

/// What happened to one input point during projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    /// The point owns this pixel.
    Survivor(Pixel),
    /// The point fell in this pixel but lost the conflict.
    Discarded(Pixel),
    OutOfView,
    /// Zero range; no direction is defined.
    Degenerate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProjectionCounts {
    pub survivors: usize,
    pub discarded: usize,
    pub out_of_view: usize,
    pub degenerate: usize,
}

impl ProjectionCounts {
    /// Points without a pixel of their own.
    pub fn unprojected(&self) -> usize {
        self.discarded + self.out_of_view + self.degenerate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    spec: GridSpec,
    channels: ChannelStack,
    assignments: Vec<Assignment>,
    pixel_to_point: Vec<Option<u32>>,
}

impl RangeImage {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn rows(&self) -> usize {
        self.channels.rows
    }

    pub fn cols(&self) -> usize {
        self.channels.cols
    }

    pub fn channels(&self) -> &ChannelStack {
        &self.channels
    }

    pub fn channel(&self, channel: Channel) -> &[f64] {
        self.channels.get(channel)
    }

    pub fn at(&self, channel: Channel, row: usize, col: usize) -> f64 {
        self.channels.at(channel, row, col)
    }

    pub fn assignments(&self) -> &[Assignment] {
        &self.assignments
    }

    /// The pixel owned by point `index`, if it survived projection.
    pub fn point_to_pixel(&self, index: usize) -> Option<Pixel> {
        match self.assignments.get(index) {
            Some(Assignment::Survivor(px)) => Some(*px),
            _ => None,
        }
    }

    /// Index of the point that owns `(row, col)`.
    pub fn pixel_to_point(&self, row: usize, col: usize) -> Option<usize> {
        if row >= self.rows() || col >= self.cols() {
            return None;
        }
        self.pixel_to_point[row * self.cols() + col].map(|i| i as usize)
    }

    pub fn occupied_count(&self) -> usize {
        self.channels.occupied_count()
    }

    pub fn counts(&self) -> ProjectionCounts {
        let mut c = ProjectionCounts::default();
        for a in &self.assignments {
            match a {
                Assignment::Survivor(_) => c.survivors += 1,
                Assignment::Discarded(_) => c.discarded += 1,
                Assignment::OutOfView => c.out_of_view += 1,
                Assignment::Degenerate => c.degenerate += 1,
            }
        }
        c
    }
}

#[derive(Clone, Copy)]
enum Binned {
    Degenerate,
    OutOfView,
    In {
        pixel: usize,
        range: f64,
        elevation: f64,
    },
}

fn bin_point(p: &Point, spec: &GridSpec) -> Binned {
    match spherical_of(p) {
        Err(_) => Binned::Degenerate,
        Ok(s) => match spec.bin(s.azimuth, s.elevation) {
            None => Binned::OutOfView,
            Some((row, col)) => Binned::In {
                pixel: row * spec.cols() + col,
                range: s.range,
                elevation: s.elevation.to_radians(),
            },
        },
    }
}

/// Projects with closest-range conflict resolution; ties keep the lower index.
pub fn project(cloud: &PointCloud, spec: &GridSpec) -> RangeImage {
    project_by_priority(cloud, spec, |_, range| [0.0, range])
}

/// Projects with a caller-defined priority. `priority(point, range)` is compared
/// lexicographically (smaller wins); remaining ties keep the lower point index.
///
/// Binning runs in parallel; conflicts are reconciled in index order, so the
/// output does not depend on the thread count.
pub fn project_by_priority<F>(cloud: &PointCloud, spec: &GridSpec, priority: F) -> RangeImage
where
    F: Fn(&Point, f64) -> [f64; 2] + Sync,
{
    let rows = spec.rows();
    let cols = spec.cols();
    let binned: Vec<(Binned, [f64; 2])> = cloud
        .points
        .par_iter()
        .with_min_len(4096)
        .map(|p| {
            let b = bin_point(p, spec);
            let key = match b {
                Binned::In { range, .. } => priority(p, range),
                _ => [0.0; 2],
            };
            (b, key)
        })
        .collect();

    let mut owner: Vec<Option<u32>> = vec![None; rows * cols];
    let mut best: Vec<[f64; 2]> = vec![[0.0; 2]; rows * cols];
    for (i, (b, key)) in binned.iter().enumerate() {
        if let Binned::In { pixel, .. } = *b {
            let wins = match owner[pixel] {
                None => true,
                Some(_) => {
                    let cur = &best[pixel];
                    key[0]
                        .total_cmp(&cur[0])
                        .then(key[1].total_cmp(&cur[1]))
                        .is_lt()
                }
            };
            if wins {
                owner[pixel] = Some(i as u32);
                best[pixel] = *key;
            }
        }
    }

    let mut channels = ChannelStack::zeros(rows, cols);
    for (pixel, idx) in owner.iter().enumerate() {
        if let Some(i) = idx {
            let p = &cloud.points[*i as usize];
            if let Binned::In {
                range, elevation, ..
            } = binned[*i as usize].0
            {
                channels.data[Channel::Range.slot()][pixel] = range;
                channels.data[Channel::Height.slot()][pixel] = p.z;
                channels.data[Channel::Elevation.slot()][pixel] = elevation;
                channels.data[Channel::Intensity.slot()][pixel] = p.intensity;
                channels.data[Channel::Mask.slot()][pixel] = 1.0;
            }
        }
    }

    let assignments = binned
        .iter()
        .enumerate()
        .map(|(i, (b, _))| match *b {
            Binned::Degenerate => Assignment::Degenerate,
            Binned::OutOfView => Assignment::OutOfView,
            Binned::In { pixel, .. } => {
                let px = Pixel {
                    row: pixel / cols,
                    col: pixel % cols,
                };
                if owner[pixel] == Some(i as u32) {
                    Assignment::Survivor(px)
                } else {
                    Assignment::Discarded(px)
                }
            }
        })
        .collect();

    RangeImage {
        spec: *spec,
        channels,
        assignments,
        pixel_to_point: owner,
    }
}

/// Fraction of occupied pixels.
pub fn occupancy_rate(img: &RangeImage) -> f64 {
    let total = img.rows() * img.cols();
    if total == 0 {
        return 0.0;
    }
    img.occupied_count() as f64 / total as f64
}

/// Reconstructs a point from a pixel using its stored range and elevation and
/// the azimuth at the column center.
pub fn unproject_pixel(img: &RangeImage, row: usize, col: usize) -> Result<Point> {
    if row >= img.rows() || col >= img.cols() {
        return Err(Error::PixelOutOfRange {
            row,
            col,
            rows: img.rows(),
            cols: img.cols(),
        });
    }
    if !img.channels.is_occupied(row, col) {
        return Err(Error::EmptyPixel { row, col });
    }
    let r = img.at(Channel::Range, row, col);
    let phi = img.at(Channel::Elevation, row, col);
    let az = img.spec.azimuth_center(col).to_radians();
    Ok(Point::new(
        r * phi.cos() * az.cos(),
        r * phi.cos() * az.sin(),
        r * phi.sin(),
        img.at(Channel::Intensity, row, col),
    ))
}

/// 8-bit grayscale raster; row 0 is the top of the picture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Renders one channel with linear normalization over occupied pixels.
///
/// `value_range` overrides the min/max taken from the data. Unoccupied pixels
/// are 0; when min == max every occupied pixel renders 255. The picture is
/// flipped vertically so higher elevations appear at the top.
pub fn render_channel(
    img: &RangeImage,
    channel: Channel,
    value_range: Option<(f64, f64)>,
) -> GrayImage {
    let stack = &img.channels;
    let (rows, cols) = (stack.rows, stack.cols);
    let values = stack.get(channel);
    let mask = stack.get(Channel::Mask);
    let (lo, hi) = value_range.unwrap_or_else(|| {
        values
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m != 0.0)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| {
                (lo.min(v), hi.max(v))
            })
    });
    let mut pixels = vec![0u8; rows * cols];
    for row in 0..rows {
        let out_row = rows - 1 - row;
        for col in 0..cols {
            let i = row * cols + col;
            if mask[i] == 0.0 {
                continue;
            }
            pixels[out_row * cols + col] = if hi <= lo {
                255
            } else {
                ((values[i] - lo) / (hi - lo) * 255.0)
                    .round()
                    .clamp(0.0, 255.0) as u8
            };
        }
    }
    GrayImage {
        width: cols,
        height: rows,
        pixels,
    }
}
