//! On-disk formats.
//!
//! * Point records: headerless little-endian f32 `x, y, z, intensity, ring`,
//!   20 bytes per point.
//! * Tensors: raw little-endian f32 payload plus a JSON sidecar at
//!   `<payload>.json` giving shape, element type, layout and channel names.
//! * Box lists and GT database indexes: one JSON object per line.
//! * Sweep manifests: JSON listing point files, 4x4 row-major pose-to-key
//!   matrices and timestamps.
//!
//! Every write goes to a temporary file in the target directory and is
//! renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::augment::GtSample;
use crate::error::{Error, Result};
use crate::fusion::VoxelFeatureTensor;
use crate::geometry::{OrientedBox, Point, PointCloud, RigidTransform};
use crate::range::{Channel, ChannelStack, GridSpec, RangeImage};
use crate::semantic::FeatureMap;
use crate::temporal::{Sweep, SweepSet};
use crate::voxel::{GeometricFeature, VoxelIndex, VoxelSpec};

pub const POINT_RECORD_BYTES: usize = 20;
pub const ELEMENT_TYPE: &str = "f32";
pub const LAYOUT: &str = "row-major, channel-last";

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "not a file path"))?
        .to_string_lossy();
    let tmp = dir.join(format!(
        ".{name}.tmp-{}-{}",
        std::process::id(),
        TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn f32s_from_le(bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
}

pub fn points_from_bytes(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(POINT_RECORD_BYTES) {
        return Err(Error::RecordSize {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            record: POINT_RECORD_BYTES,
        });
    }
    let total = bytes.len() / POINT_RECORD_BYTES;
    let mut bad = 0;
    let mut points = Vec::with_capacity(total);
    for rec in bytes.chunks_exact(POINT_RECORD_BYTES) {
        let v: Vec<f32> = f32s_from_le(rec).collect();
        if v.iter().any(|x| !x.is_finite()) {
            bad += 1;
            continue;
        }
        points.push(Point {
            x: v[0] as f64,
            y: v[1] as f64,
            z: v[2] as f64,
            intensity: v[3] as f64,
            t_rel: 0.0,
            ring: v[4],
        });
    }
    if bad > 0 {
        return Err(Error::NonFinite {
            path: path.to_path_buf(),
            count: bad,
            total,
        });
    }
    let frame_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(PointCloud::new(points).with_frame_id(frame_id))
}

pub fn points_to_bytes(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * POINT_RECORD_BYTES);
    for p in cloud.iter() {
        for v in [
            p.x as f32,
            p.y as f32,
            p.z as f32,
            p.intensity as f32,
            p.ring,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_points(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    points_from_bytes(&read_file(path)?, path)
}

pub fn write_points(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    atomic_write(path.as_ref(), &points_to_bytes(cloud))
}

/// Sidecar header of a tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub layout: String,
    pub channels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voxel: Option<VoxelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim_sem: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim_geo: Option<usize>,
}

impl TensorHeader {
    pub fn new(shape: Vec<usize>, channels: Vec<String>) -> Self {
        TensorHeader {
            shape,
            dtype: ELEMENT_TYPE.into(),
            layout: LAYOUT.into(),
            channels,
            kind: None,
            grid: None,
            voxel: None,
            dim_sem: None,
            dim_geo: None,
        }
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the payload, then the header.
pub fn write_tensor(
    path: impl AsRef<Path>,
    header: &TensorHeader,
    values: impl IntoIterator<Item = f64>,
) -> Result<()> {
    let path = path.as_ref();
    let mut payload = Vec::with_capacity(header.element_count() * 4);
    for v in values {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if payload.len() != header.element_count() * 4 {
        return Err(Error::format(
            path,
            format!(
                "payload has {} elements, shape {:?} needs {}",
                payload.len() / 4,
                header.shape,
                header.element_count()
            ),
        ));
    }
    let json = serde_json::to_vec_pretty(header).map_err(|e| Error::format(path, e.to_string()))?;
    atomic_write(path, &payload)?;
    atomic_write(&header_path(path), &json)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<(TensorHeader, Vec<f32>)> {
    let path = path.as_ref();
    let hpath = header_path(path);
    let header: TensorHeader = serde_json::from_slice(&read_file(&hpath)?)
        .map_err(|e| Error::format(&hpath, e.to_string()))?;
    if header.dtype != ELEMENT_TYPE {
        return Err(Error::format(
            &hpath,
            format!("unsupported element type '{}'", header.dtype),
        ));
    }
    if header.layout != LAYOUT {
        return Err(Error::format(
            &hpath,
            format!("unsupported layout '{}'", header.layout),
        ));
    }
    if header.shape.last() != Some(&header.channels.len()) {
        return Err(Error::format(
            &hpath,
            format!(
                "{} channel names for shape {:?}",
                header.channels.len(),
                header.shape
            ),
        ));
    }
    let bytes = read_file(path)?;
    if bytes.len() != header.element_count() * 4 {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, shape {:?} needs {}",
                bytes.len(),
                header.shape,
                header.element_count() * 4
            ),
        ));
    }
    Ok((header, f32s_from_le(&bytes).collect()))
}

fn channel_names() -> Vec<String> {
    Channel::ALL.iter().map(|c| c.name().to_string()).collect()
}

/// Range image header with shape `(rows, cols, 5)`.
pub fn range_image_header(spec: &GridSpec) -> TensorHeader {
    let mut h = TensorHeader::new(
        vec![spec.rows(), spec.cols(), Channel::ALL.len()],
        channel_names(),
    );
    h.kind = Some("range-image".into());
    h.grid = Some(*spec);
    h
}

pub fn write_range_image(path: impl AsRef<Path>, img: &RangeImage) -> Result<()> {
    write_tensor(
        path,
        &range_image_header(img.spec()),
        img.channels().interleaved(),
    )
}

/// Range image with an extra per-pixel `t` channel holding the surviving
/// point's relative timestamp.
pub fn write_range_image_with_time(
    path: impl AsRef<Path>,
    img: &RangeImage,
    cloud: &PointCloud,
) -> Result<()> {
    let mut header = range_image_header(img.spec());
    header.shape[2] += 1;
    header.channels.push("t".into());
    let stack = img.channels();
    let cols = img.cols();
    let values = (0..img.rows() * cols).flat_map(|i| {
        let t = img
            .pixel_to_point(i / cols, i % cols)
            .map_or(0.0, |k| cloud.points[k].t_rel);
        Channel::ALL
            .iter()
            .map(move |&c| stack.get(c)[i])
            .chain(std::iter::once(t))
    });
    write_tensor(path, &header, values)
}

/// Range images stacked along a leading frame axis: `(K, rows, cols, 5)`.
pub fn write_range_image_stack(
    path: impl AsRef<Path>,
    images: &[RangeImage],
    spec: &GridSpec,
) -> Result<()> {
    if images.iter().any(|i| i.spec() != spec) {
        return Err(Error::DimensionMismatch(
            "stacked images must share one grid".into(),
        ));
    }
    let mut header = range_image_header(spec);
    header.shape.insert(0, images.len());
    header.kind = Some("range-image-stack".into());
    write_tensor(
        path,
        &header,
        images.iter().flat_map(|i| i.channels().interleaved()),
    )
}

/// The rasters of a stored range image.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredRangeImage {
    pub spec: GridSpec,
    pub channels: ChannelStack,
    /// Any channels after the standard five, by name.
    pub extra: Vec<(String, Vec<f64>)>,
}

pub fn read_range_image(path: impl AsRef<Path>) -> Result<StoredRangeImage> {
    let path = path.as_ref();
    let (header, values) = read_tensor(path)?;
    let hpath = header_path(path);
    let spec = header
        .grid
        .ok_or_else(|| Error::format(&hpath, "range image header has no grid"))?
        .validated()?;
    let names = channel_names();
    if header.shape.len() != 3
        || header.channels.len() < names.len()
        || header.channels[..names.len()] != names[..]
    {
        return Err(Error::format(
            &hpath,
            format!("expected (rows, cols, channels) starting with {names:?}"),
        ));
    }
    let (rows, cols, depth) = (header.shape[0], header.shape[1], header.shape[2]);
    if (rows, cols) != (spec.rows(), spec.cols()) {
        return Err(Error::format(
            &hpath,
            format!(
                "shape {rows}x{cols} does not match the grid's {}x{}",
                spec.rows(),
                spec.cols()
            ),
        ));
    }
    let plane = |k: usize| -> Vec<f64> {
        values
            .iter()
            .skip(k)
            .step_by(depth)
            .map(|&v| v as f64)
            .collect()
    };
    let rasters: [Vec<f64>; 5] = std::array::from_fn(plane);
    let extra = (names.len()..depth)
        .map(|k| (header.channels[k].clone(), plane(k)))
        .collect();
    Ok(StoredRangeImage {
        spec,
        channels: ChannelStack::from_rasters(rows, cols, rasters)?,
        extra,
    })
}

pub fn write_feature_map(path: impl AsRef<Path>, fmap: &FeatureMap) -> Result<()> {
    let mut header = TensorHeader::new(
        vec![fmap.rows(), fmap.cols(), fmap.dim()],
        (0..fmap.dim()).map(|k| format!("f{k}")).collect(),
    );
    header.kind = Some("feature-map".into());
    write_tensor(path, &header, fmap.values().iter().copied())
}

/// Loads any `(rows, cols, dim)` tensor as a feature map.
pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let (header, values) = read_tensor(path)?;
    if header.shape.len() != 3 {
        return Err(Error::format(
            path,
            format!("feature map needs 3 axes, got {:?}", header.shape),
        ));
    }
    FeatureMap::new(
        header.shape[0],
        header.shape[1],
        header.shape[2],
        values.into_iter().map(f64::from).collect(),
    )
}

fn voxel_channel_names(t: &VoxelFeatureTensor) -> Vec<String> {
    let mut names: Vec<String> = ["ix", "iy", "iz"].iter().map(|s| s.to_string()).collect();
    names.extend((0..t.dim_sem).map(|k| format!("sem{k}")));
    let geo = ["x", "y", "z", "r", "ox", "oy", "oz", "t"];
    if t.dim_geo <= geo.len() && t.dim_geo >= GeometricFeature::BASE_DIM {
        names.extend(geo[..t.dim_geo].iter().map(|s| s.to_string()));
    } else {
        names.extend((0..t.dim_geo).map(|k| format!("geo{k}")));
    }
    names
}

/// Sparse voxel features as `(N, 3 + dim)` rows: index triple, then the
/// pooled vector, ordered by voxel index.
pub fn write_voxel_tensor(path: impl AsRef<Path>, t: &VoxelFeatureTensor) -> Result<()> {
    let mut header = TensorHeader::new(vec![t.len(), 3 + t.dim()], voxel_channel_names(t));
    header.kind = Some("sparse-voxel".into());
    header.voxel = Some(t.spec);
    header.dim_sem = Some(t.dim_sem);
    header.dim_geo = Some(t.dim_geo);
    let values = t.entries.iter().flat_map(|(idx, v)| {
        [idx.ix as f64, idx.iy as f64, idx.iz as f64]
            .into_iter()
            .chain(v.iter().copied())
    });
    write_tensor(path, &header, values)
}

pub fn read_voxel_tensor(path: impl AsRef<Path>) -> Result<VoxelFeatureTensor> {
    let path = path.as_ref();
    let (header, values) = read_tensor(path)?;
    let hpath = header_path(path);
    let (Some(spec), Some(dim_sem), Some(dim_geo)) = (header.voxel, header.dim_sem, header.dim_geo)
    else {
        return Err(Error::format(
            &hpath,
            "sparse voxel header needs voxel, dim_sem and dim_geo",
        ));
    };
    let width = 3 + dim_sem + dim_geo;
    if header.shape.len() != 2 || header.shape[1] != width {
        return Err(Error::format(
            &hpath,
            format!("expected (N, {width}), got {:?}", header.shape),
        ));
    }
    let mut entries = BTreeMap::new();
    for row in values.chunks_exact(width) {
        let idx = VoxelIndex {
            ix: row[0] as u32,
            iy: row[1] as u32,
            iz: row[2] as u32,
        };
        entries.insert(idx, row[3..].iter().map(|&v| v as f64).collect());
    }
    Ok(VoxelFeatureTensor {
        spec: spec.validated()?,
        dim_sem,
        dim_geo,
        entries,
    })
}

pub fn read_boxes(path: impl AsRef<Path>) -> Result<Vec<OrientedBox>> {
    let path = path.as_ref();
    let text =
        String::from_utf8(read_file(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let b: OrientedBox = serde_json::from_str(line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
            b.validated()
        })
        .collect()
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item)
            .map_err(|e| Error::format("<memory>", e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_boxes(path: impl AsRef<Path>, boxes: &[OrientedBox]) -> Result<()> {
    atomic_write(path.as_ref(), &jsonl(boxes)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFrame {
    /// Point record file, relative to the manifest's directory.
    pub points: PathBuf,
    /// Row-major 4x4 pose-to-key matrix.
    pub pose: [f64; 16],
    pub timestamp: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepManifest {
    pub key_index: usize,
    pub frames: Vec<ManifestFrame>,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<SweepManifest> {
    let path = path.as_ref();
    serde_json::from_slice(&read_file(path)?).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &SweepManifest) -> Result<()> {
    let path = path.as_ref();
    let json =
        serde_json::to_vec_pretty(manifest).map_err(|e| Error::format(path, e.to_string()))?;
    atomic_write(path, &json)
}

/// Reads a manifest and every point file it lists.
pub fn load_sweeps(path: impl AsRef<Path>) -> Result<SweepSet> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let frames = manifest
        .frames
        .iter()
        .map(|f| {
            Ok(Sweep {
                cloud: read_points(base.join(&f.points))?,
                pose_to_key: RigidTransform::from_matrix4(&f.pose)?,
                timestamp: f.timestamp,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SweepSet::new(frames, manifest.key_index)
}

/// One line of a category's `samples.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub file: String,
    #[serde(rename = "box")]
    pub bbox: OrientedBox,
    pub category: String,
    pub source_frame: String,
    pub num_points: usize,
}

pub const SAMPLE_INDEX: &str = "samples.jsonl";

fn category_dir_name(category: &str) -> String {
    let cleaned: String = category
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if cleaned.is_empty() || cleaned.starts_with('.') {
        format!("_{cleaned}")
    } else {
        cleaned
    }
}

/// Writes one directory per category holding each sample's point file and a
/// `samples.jsonl` index.
pub fn save_database(root: impl AsRef<Path>, samples: &[GtSample]) -> Result<()> {
    let root = root.as_ref();
    let mut by_category: BTreeMap<String, Vec<&GtSample>> = BTreeMap::new();
    for s in samples {
        by_category.entry(s.category.clone()).or_default().push(s);
    }
    for (category, group) in by_category {
        let dir = root.join(category_dir_name(&category));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut records = Vec::with_capacity(group.len());
        for (k, s) in group.iter().enumerate() {
            let file = format!("{k:06}.bin");
            write_points(dir.join(&file), &s.points)?;
            records.push(SampleRecord {
                file,
                bbox: OrientedBox {
                    num_points: s.points.len(),
                    ..s.bbox.clone()
                },
                category: category.clone(),
                source_frame: s.source_frame.clone(),
                num_points: s.points.len(),
            });
        }
        atomic_write(&dir.join(SAMPLE_INDEX), &jsonl(&records)?)?;
    }
    Ok(())
}

/// Loads every category directory under `root`, in name order.
pub fn load_database(root: impl AsRef<Path>) -> Result<Vec<GtSample>> {
    let root = root.as_ref();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SAMPLE_INDEX).is_file())
        .collect();
    dirs.sort();
    let mut samples = Vec::new();
    for dir in dirs {
        let index = dir.join(SAMPLE_INDEX);
        let text = String::from_utf8(read_file(&index)?)
            .map_err(|e| Error::format(&index, e.to_string()))?;
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let rec: SampleRecord = serde_json::from_str(line)
                .map_err(|e| Error::format(&index, format!("line {}: {e}", n + 1)))?;
            let points = read_points(dir.join(&rec.file))?;
            if points.len() != rec.num_points {
                return Err(Error::format(
                    &index,
                    format!(
                        "line {}: {} has {} points, index says {}",
                        n + 1,
                        rec.file,
                        points.len(),
                        rec.num_points
                    ),
                ));
            }
            let sample = GtSample {
                bbox: rec.bbox.validated()?,
                points: points.with_frame_id(rec.source_frame.clone()),
                category: rec.category,
                source_frame: rec.source_frame,
            };
            sample.validate()?;
            samples.push(sample);
        }
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::range::project;
    use proptest::prelude::*;

    fn record(v: [f32; 5]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn point_file_cases() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.bin");
        fs::write(&empty, b"").unwrap();
        assert!(read_points(&empty).unwrap().is_empty());

        let one = dir.path().join("one.bin");
        fs::write(&one, record([1.0, 2.0, 3.0, 0.5, 0.0])).unwrap();
        let c = read_points(&one).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(
            (c.points[0].xyz(), c.points[0].intensity),
            ([1.0, 2.0, 3.0], 0.5)
        );
        assert_eq!(c.frame_id, "one");

        let odd = dir.path().join("odd.bin");
        fs::write(&odd, vec![0u8; 21]).unwrap();
        assert!(matches!(
            read_points(&odd),
            Err(Error::RecordSize { len: 21, .. })
        ));

        let nan = dir.path().join("nan.bin");
        let mut bytes = record([1.0, 2.0, 3.0, 0.5, 0.0]);
        bytes.extend(record([f32::NAN, 2.0, 3.0, 0.5, 0.0]));
        bytes.extend(record([1.0, 2.0, f32::INFINITY, 0.5, 0.0]));
        fs::write(&nan, bytes).unwrap();
        assert!(matches!(
            read_points(&nan),
            Err(Error::NonFinite {
                count: 2,
                total: 3,
                ..
            })
        ));

        assert!(matches!(
            read_points(dir.path().join("missing.bin")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn ring_survives_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let bytes = record([1.5, -2.0, 0.25, 12.0, 31.0]);
        fs::write(&path, &bytes).unwrap();
        let c = read_points(&path).unwrap();
        assert_eq!(c.points[0].ring, 31.0);
        let out = dir.path().join("q.bin");
        write_points(&out, &c).unwrap();
        assert_eq!(fs::read(&out).unwrap(), bytes);
    }

    #[test]
    fn range_image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::new(vec![
            Point::new(10.0, 0.0, 0.0, 0.3),
            Point::new(3.3, -7.1, 0.4, 0.9),
            Point::new(-20.0, 1.0, -2.0, 0.1),
        ]);
        let img = project(&cloud, &GridSpec::default());
        let path = dir.path().join("img.bin");
        write_range_image(&path, &img).unwrap();
        let header: TensorHeader =
            serde_json::from_slice(&fs::read(header_path(&path)).unwrap()).unwrap();
        assert_eq!(header.shape, vec![32, 1152, 5]);
        assert_eq!(fs::metadata(&path).unwrap().len(), 32 * 1152 * 5 * 4);

        let back = read_range_image(&path).unwrap();
        assert_eq!(back.spec, GridSpec::default());
        for c in Channel::ALL {
            let expected: Vec<f32> = img.channel(c).iter().map(|&v| v as f32).collect();
            let got: Vec<f32> = back.channels.get(c).iter().map(|&v| v as f32).collect();
            assert_eq!(expected, got, "channel {c}");
        }
        assert!(back.extra.is_empty());
    }

    #[test]
    fn header_payload_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.bin");
        write_range_image(
            &path,
            &project(&PointCloud::default(), &GridSpec::default()),
        )
        .unwrap();
        let mut header: TensorHeader =
            serde_json::from_slice(&fs::read(header_path(&path)).unwrap()).unwrap();
        header.shape[0] = 31;
        fs::write(header_path(&path), serde_json::to_vec(&header).unwrap()).unwrap();
        assert!(matches!(read_range_image(&path), Err(Error::Format { .. })));

        header.shape[0] = 32;
        header.channels.pop();
        fs::write(header_path(&path), serde_json::to_vec(&header).unwrap()).unwrap();
        assert!(read_tensor(&path).is_err());

        let short = TensorHeader::new(vec![2, 2], vec!["a".into(), "b".into()]);
        assert!(write_tensor(dir.path().join("s.bin"), &short, [1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn voxel_tensor_round_trip() {
        let spec = VoxelSpec::default();
        let mut entries = BTreeMap::new();
        entries.insert(
            VoxelIndex {
                ix: 3,
                iy: 1000,
                iz: 39,
            },
            vec![0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
        );
        entries.insert(
            VoxelIndex {
                ix: 0,
                iy: 0,
                iz: 0,
            },
            vec![0.0; 8],
        );
        let t = VoxelFeatureTensor {
            spec,
            dim_sem: 1,
            dim_geo: 7,
            entries,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vox.bin");
        write_voxel_tensor(&path, &t).unwrap();
        assert_eq!(read_voxel_tensor(&path).unwrap(), t);
    }

    #[test]
    fn feature_map_round_trip() {
        let fm = FeatureMap::new(2, 3, 2, (0..12).map(|v| v as f64 * 0.5).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_feature_map(&path, &fm).unwrap();
        assert_eq!(read_feature_map(&path).unwrap(), fm);
    }

    #[test]
    fn boxes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("boxes.jsonl");
        let boxes = vec![
            OrientedBox::new([1.0, 2.0, 3.0], [4.0, 2.0, 1.5], 0.25)
                .unwrap()
                .with_category("car")
                .with_score(0.9),
            OrientedBox::new([-1.0, 0.0, 0.0], [1.0, 1.0, 1.0], -3.0).unwrap(),
        ];
        write_boxes(&path, &boxes).unwrap();
        assert_eq!(read_boxes(&path).unwrap(), boxes);

        fs::write(
            &path,
            "{\"cx\":0,\"cy\":0,\"cz\":0,\"l\":-1,\"w\":1,\"h\":1,\"yaw\":0}\n",
        )
        .unwrap();
        assert!(read_boxes(&path).is_err());
    }

    #[test]
    fn manifest_requires_pose() {
        let dir = tempfile::tempdir().unwrap();
        write_points(
            dir.path().join("a.bin"),
            &PointCloud::new(vec![Point::new(1.0, 0.0, 0.0, 0.0)]),
        )
        .unwrap();
        let path = dir.path().join("m.json");
        fs::write(
            &path,
            r#"{"key_index":0,"frames":[{"points":"a.bin","timestamp":0.0}]}"#,
        )
        .unwrap();
        assert!(matches!(load_sweeps(&path), Err(Error::Format { .. })));

        let manifest = SweepManifest {
            key_index: 0,
            frames: vec![ManifestFrame {
                points: "a.bin".into(),
                pose: RigidTransform::identity().to_matrix4(),
                timestamp: 0.0,
            }],
        };
        write_manifest(&path, &manifest).unwrap();
        assert_eq!(load_sweeps(&path).unwrap().len(), 1);
    }

    #[test]
    fn database_round_trip() {
        let b = OrientedBox::new([5.0, 1.0, -1.0], [4.0, 2.0, 1.5], 0.4)
            .unwrap()
            .with_category("car");
        let ped = OrientedBox::new([-3.0, 2.0, -1.0], [0.8, 0.8, 1.8], 0.0)
            .unwrap()
            .with_category("pedestrian");
        let frame = PointCloud::new(vec![
            Point::new(5.5, 1.0, -1.2, 0.2),
            Point::new(4.5, 0.8, -0.8, 0.4),
            Point::new(-3.0, 2.1, -0.5, 0.6),
        ])
        .with_frame_id("scene-0001");
        let samples = crate::augment::crop_instances(&frame, &[b, ped]);
        let dir = tempfile::tempdir().unwrap();
        save_database(dir.path(), &samples).unwrap();
        assert!(dir.path().join("car").join(SAMPLE_INDEX).is_file());
        let loaded = load_database(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in loaded.iter().zip(&samples) {
            assert_eq!(a.bbox, b.bbox);
            assert_eq!(a.source_frame, "scene-0001");
            for (p, q) in a.points.iter().zip(b.points.iter()) {
                assert!(
                    (p.x - q.x).abs() < 1e-6
                        && (p.y - q.y).abs() < 1e-6
                        && (p.z - q.z).abs() < 1e-6
                );
            }
        }
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        atomic_write(&path, b"abc").unwrap();
        atomic_write(&path, b"defg").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"defg");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn f32_points_round_trip(raw in prop::collection::vec(prop::array::uniform5(-1e4f32..1e4), 0..50)) {
            let bytes: Vec<u8> = raw.iter().flat_map(|r| record(*r)).collect();
            let cloud = points_from_bytes(&bytes, Path::new("mem.bin")).unwrap();
            prop_assert_eq!(points_to_bytes(&cloud), bytes);
        }

        #[test]
        fn box_json_is_exact(c in prop::array::uniform3(-1e3f64..1e3), e in prop::array::uniform3(1e-3f64..50.0),
                             yaw in -3.0f64..3.0, score in 0.0f64..1.0) {
            let b = OrientedBox::new(c, e, yaw).unwrap().with_score(score);
            let line = serde_json::to_string(&b).unwrap();
            prop_assert_eq!(serde_json::from_str::<OrientedBox>(&line).unwrap(), b);
        }
    }
}
