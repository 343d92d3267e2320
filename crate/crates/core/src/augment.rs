//! Ground-truth paste augmentation with an occlusion-aware visibility filter.
//!
//! Objects are cropped into a database in box-local coordinates, pasted back
//! at their recorded pose rotated about the sensor's vertical axis (so their
//! distance to the sensor is unchanged), and every annotation with fewer than
//! `min_projected_points` points surviving range-image projection is dropped.
//!
//! Random draws come from a seeded ChaCha8 stream in a fixed order:
//! translation x, translation y, rotation, scale, then one yaw delta per paste
//! attempt. Sample selection uses a separate forked stream.

use std::f64::consts::FRAC_PI_4;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_yaw, OrientedBox, Point, PointCloud, RigidTransform};
use crate::nms::bev_intersection;
use crate::range::{project, GridSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct GtSample {
    /// The object's box at the pose it was cropped from.
    pub bbox: OrientedBox,
    /// Member points in box-local coordinates (center at origin, yaw 0).
    pub points: PointCloud,
    pub category: String,
    pub source_frame: String,
}

impl GtSample {
    /// The box in its own local frame.
    pub fn local_box(&self) -> OrientedBox {
        OrientedBox {
            cx: 0.0,
            cy: 0.0,
            cz: 0.0,
            yaw: 0.0,
            ..self.bbox.clone()
        }
    }

    /// Checks that every point lies inside the local box (1e-6 slack).
    pub fn validate(&self) -> Result<()> {
        let b = &self.bbox;
        let inside = |v: f64, e: f64| v >= -e / 2.0 - 1e-6 && v < e / 2.0 + 1e-6;
        match self
            .points
            .iter()
            .find(|p| !(inside(p.x, b.l) && inside(p.y, b.w) && inside(p.z, b.h)))
        {
            Some(p) => Err(Error::InvalidBox(format!(
                "sample point ({}, {}, {}) lies outside its box",
                p.x, p.y, p.z
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Largest yaw delta, radians, for rotating a pasted object about the sensor.
    pub paste_rotation_max: f64,
    /// Global translation half-width in x and y, meters.
    pub global_translation: f64,
    /// Global rotation half-width, radians.
    pub global_rotation: f64,
    pub global_scale: (f64, f64),
    pub min_projected_points: usize,
    pub rng_seed: u64,
    /// Paste attempts per frame.
    pub paste_count: usize,
    /// Added to each pasted object's z.
    pub paste_z_offset: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            paste_rotation_max: FRAC_PI_4,
            global_translation: 0.2,
            global_rotation: FRAC_PI_4,
            global_scale: (0.95, 1.05),
            min_projected_points: 3,
            rng_seed: 0,
            paste_count: 10,
            paste_z_offset: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn validated(self) -> Result<Self> {
        let finite = [
            self.paste_rotation_max,
            self.global_translation,
            self.global_rotation,
            self.global_scale.0,
            self.global_scale.1,
            self.paste_z_offset,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "augmentation ranges must be finite".into(),
            ));
        }
        if self.paste_rotation_max < 0.0
            || self.global_translation < 0.0
            || self.global_rotation < 0.0
        {
            return Err(Error::InvalidConfig(
                "augmentation half-widths must be non-negative".into(),
            ));
        }
        if !(0.0 < self.global_scale.0 && self.global_scale.0 <= self.global_scale.1) {
            return Err(Error::InvalidConfig(format!(
                "scale range must satisfy 0 < lo <= hi, got {:?}",
                self.global_scale
            )));
        }
        Ok(self)
    }

    /// No global transform and no paste rotation.
    pub fn identity() -> Self {
        AugmentConfig {
            paste_rotation_max: 0.0,
            global_translation: 0.0,
            global_rotation: 0.0,
            global_scale: (1.0, 1.0),
            ..Default::default()
        }
    }
}

/// Seeded generator with independent, reproducible sub-streams.
#[derive(Debug, Clone)]
pub struct AugmentRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl AugmentRng {
    pub fn new(seed: u64) -> Self {
        AugmentRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A fresh generator on stream `stream` of the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        AugmentRng {
            seed: self.seed,
            inner,
        }
    }

    /// Uniform in `[lo, hi]`; exactly `lo` when the range is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u: f64 = self.inner.gen();
        if hi > lo {
            lo + (hi - lo) * u
        } else {
            lo
        }
    }

    pub fn index(&mut self, len: usize) -> usize {
        self.inner.gen_range(0..len)
    }
}

/// Crops the points inside each box and stores them box-locally.
pub fn crop_instances(frame: &PointCloud, boxes: &[OrientedBox]) -> Vec<GtSample> {
    boxes
        .iter()
        .map(|b| {
            let points: PointCloud = frame
                .iter()
                .filter(|p| b.contains(&p.xyz()))
                .map(|p| p.with_xyz(b.to_local(&p.xyz())))
                .collect();
            let mut bbox = b.clone();
            bbox.num_points = points.len();
            GtSample {
                bbox,
                category: b.category.clone(),
                source_frame: frame.frame_id.clone(),
                points: points.with_frame_id(frame.frame_id.clone()),
            }
        })
        .collect()
}

/// Places a sample at its recorded pose, rotated by `yaw_delta` about the
/// sensor's z axis. Returns the sample's points in frame coordinates and its box.
pub fn place_sample(
    sample: &GtSample,
    yaw_delta: f64,
    max_delta: f64,
    z_offset: f64,
) -> Result<(Vec<Point>, OrientedBox)> {
    if !yaw_delta.is_finite() || yaw_delta.abs() > max_delta {
        return Err(Error::RotationOutOfRange {
            delta: yaw_delta,
            max: max_delta,
        });
    }
    let spin = RigidTransform::from_yaw(yaw_delta);
    let lift = RigidTransform::translation([0.0, 0.0, z_offset]);
    let to_frame = lift.compose(&spin.compose(&sample.bbox.pose()));
    let points = sample
        .points
        .iter()
        .map(|p| to_frame.apply_point(p))
        .collect();
    let [cx, cy, _] = spin.apply_vec(&sample.bbox.center());
    let bbox = OrientedBox {
        cx,
        cy,
        cz: sample.bbox.cz + z_offset,
        yaw: normalize_yaw(sample.bbox.yaw + yaw_delta),
        ..sample.bbox.clone()
    };
    Ok((points, bbox))
}

/// Appends a placed sample to `frame`.
pub fn paste_sample(
    frame: &PointCloud,
    sample: &GtSample,
    yaw_delta: f64,
    cfg: &AugmentConfig,
) -> Result<(PointCloud, OrientedBox)> {
    let (points, bbox) = place_sample(
        sample,
        yaw_delta,
        cfg.paste_rotation_max,
        cfg.paste_z_offset,
    )?;
    let mut out = frame.clone();
    out.points.extend(points);
    Ok((out, bbox))
}

/// Similarity transform applied as scale, then rotation about z, then
/// translation in x/y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalTransform {
    pub tx: f64,
    pub ty: f64,
    pub rotation: f64,
    pub scale: f64,
}

impl GlobalTransform {
    /// Consumes four draws: tx, ty, rotation, scale.
    pub fn draw(cfg: &AugmentConfig, rng: &mut AugmentRng) -> Self {
        let tx = rng.uniform(-cfg.global_translation, cfg.global_translation);
        let ty = rng.uniform(-cfg.global_translation, cfg.global_translation);
        let rotation = rng.uniform(-cfg.global_rotation, cfg.global_rotation);
        let scale = rng.uniform(cfg.global_scale.0, cfg.global_scale.1);
        GlobalTransform {
            tx,
            ty,
            rotation,
            scale,
        }
    }

    fn rigid(&self) -> RigidTransform {
        RigidTransform::translation([self.tx, self.ty, 0.0])
            .compose(&RigidTransform::from_yaw(self.rotation))
    }

    pub fn apply_point(&self, p: &Point) -> Point {
        let s = self.scale;
        self.rigid()
            .apply_point(&p.with_xyz([s * p.x, s * p.y, s * p.z]))
    }

    pub fn apply_box(&self, b: &OrientedBox) -> OrientedBox {
        let s = self.scale;
        let [cx, cy, cz] = self.rigid().apply_vec(&[s * b.cx, s * b.cy, s * b.cz]);
        OrientedBox {
            cx,
            cy,
            cz,
            l: s * b.l,
            w: s * b.w,
            h: s * b.h,
            yaw: normalize_yaw(b.yaw + self.rotation),
            ..b.clone()
        }
    }
}

pub fn global_augment(
    frame: &PointCloud,
    boxes: &[OrientedBox],
    cfg: &AugmentConfig,
    rng: &mut AugmentRng,
) -> (PointCloud, Vec<OrientedBox>) {
    let g = GlobalTransform::draw(cfg, rng);
    apply_global(frame, boxes, &g)
}

fn apply_global(
    frame: &PointCloud,
    boxes: &[OrientedBox],
    g: &GlobalTransform,
) -> (PointCloud, Vec<OrientedBox>) {
    let cloud = PointCloud {
        points: frame.iter().map(|p| g.apply_point(p)).collect(),
        frame_id: frame.frame_id.clone(),
    };
    (cloud, boxes.iter().map(|b| g.apply_box(b)).collect())
}

/// Per box, the number of its member points that own a range-image pixel.
pub fn projected_point_counts(
    frame: &PointCloud,
    boxes: &[OrientedBox],
    spec: &GridSpec,
) -> Vec<usize> {
    let img = project(frame, spec);
    let survivors: Vec<&Point> = frame
        .iter()
        .enumerate()
        .filter(|(i, _)| img.point_to_pixel(*i).is_some())
        .map(|(_, p)| p)
        .collect();
    boxes
        .iter()
        .map(|b| survivors.iter().filter(|p| b.contains(&p.xyz())).count())
        .collect()
}

/// Indices of the boxes with at least `min_points` projected member points.
pub fn visibility_filter(
    frame: &PointCloud,
    boxes: &[OrientedBox],
    spec: &GridSpec,
    min_points: usize,
) -> Vec<usize> {
    projected_point_counts(frame, boxes, spec)
        .into_iter()
        .enumerate()
        .filter(|(_, n)| *n >= min_points)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentResult {
    pub cloud: PointCloud,
    pub boxes: Vec<OrientedBox>,
    pub transform: GlobalTransform,
    /// Samples that passed the collision check.
    pub pasted: usize,
    /// Boxes (original or pasted) dropped by the visibility filter.
    pub removed: usize,
}

/// Full per-frame augmentation: paste with collision rejection, visibility
/// filter in the sensor frame, then the global transform.
pub fn augment_frame(
    frame: &PointCloud,
    boxes: &[OrientedBox],
    database: &[GtSample],
    spec: &GridSpec,
    cfg: &AugmentConfig,
) -> Result<AugmentResult> {
    let cfg = cfg.validated()?;
    let mut rng = AugmentRng::new(cfg.rng_seed);
    let mut picker = rng.fork(1);
    let transform = GlobalTransform::draw(&cfg, &mut rng);

    let mut cloud = frame.clone();
    let mut all_boxes = boxes.to_vec();
    let mut pasted = 0;
    if !database.is_empty() {
        for _ in 0..cfg.paste_count {
            let sample = &database[picker.index(database.len())];
            let delta = rng.uniform(-cfg.paste_rotation_max, cfg.paste_rotation_max);
            let (points, bbox) =
                place_sample(sample, delta, cfg.paste_rotation_max, cfg.paste_z_offset)?;
            if all_boxes.iter().any(|b| bev_intersection(b, &bbox) > 0.0) {
                continue;
            }
            cloud.points.extend(points);
            all_boxes.push(bbox);
            pasted += 1;
        }
    }

    let kept = visibility_filter(&cloud, &all_boxes, spec, cfg.min_projected_points);
    let removed = all_boxes.len() - kept.len();
    let visible: Vec<OrientedBox> = kept.into_iter().map(|i| all_boxes[i].clone()).collect();
    let (cloud, boxes) = apply_global(&cloud, &visible, &transform);
    Ok(AugmentResult {
        cloud,
        boxes,
        transform,
        pasted,
        removed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn car(center: [f64; 3], yaw: f64) -> OrientedBox {
        OrientedBox::new(center, [4.0, 2.0, 1.6], yaw)
            .unwrap()
            .with_category("car")
    }

    #[test]
    fn crop_cases() {
        let frame = PointCloud::new(vec![
            Point::new(0.5, 0.5, 0.5, 0.7),
            Point::new(0.5, 0.5, 1.0, 0.7),
        ]);
        let empty = OrientedBox::new([10.0, 10.0, 0.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        let cube = OrientedBox::new([0.5, 0.5, 0.5], [1.0, 1.0, 1.0], 0.0).unwrap();
        let samples = crop_instances(&frame, &[empty, cube]);
        assert!(samples[0].points.is_empty());
        assert_eq!(samples[1].points.len(), 1);
        assert_eq!(samples[1].points.points[0].xyz(), [0.0, 0.0, 0.0]);
        assert_eq!(samples[1].points.points[0].intensity, 0.7);
        assert_eq!(samples[1].bbox.num_points, 1);
        samples[1].validate().unwrap();
        assert_eq!(samples[1].local_box().center(), [0.0; 3]);
    }

    #[test]
    fn paste_cases() {
        let b = car([10.0, 0.0, -1.0], 0.3);
        let frame = PointCloud::new(vec![
            Point::new(10.5, 0.2, -1.2, 0.1),
            Point::new(9.0, -0.5, -0.5, 0.2),
        ]);
        let sample = crop_instances(&frame, std::slice::from_ref(&b)).remove(0);
        let cfg = AugmentConfig::default();

        let (out, placed) = paste_sample(&PointCloud::default(), &sample, 0.0, &cfg).unwrap();
        assert_eq!(
            placed,
            OrientedBox {
                num_points: 2,
                ..b.clone()
            }
        );
        for (p, q) in out.iter().zip(frame.iter()) {
            for (a, c) in p.xyz().iter().zip(q.xyz()) {
                assert!((a - c).abs() < 1e-9);
            }
        }

        let (_, turned) =
            paste_sample(&PointCloud::default(), &sample, FRAC_PI_2 / 2.0, &cfg).unwrap();
        assert!((turned.yaw - (0.3 + FRAC_PI_2 / 2.0)).abs() < 1e-12);

        let wide = AugmentConfig {
            paste_rotation_max: FRAC_PI_2,
            ..cfg
        };
        let (_, quarter) = paste_sample(&PointCloud::default(), &sample, FRAC_PI_2, &wide).unwrap();
        assert!(quarter.cx.abs() < 1e-12 && (quarter.cy - 10.0).abs() < 1e-12);

        assert!(matches!(
            paste_sample(&PointCloud::default(), &sample, 1.0, &cfg),
            Err(Error::RotationOutOfRange { .. })
        ));
    }

    #[test]
    fn identity_global_augment() {
        let frame = PointCloud::new(vec![
            Point::new(1.0, -2.0, 0.5, 0.3),
            Point::new(-7.5, 3.25, -1.0, 0.9),
        ]);
        let boxes = vec![car([5.0, 5.0, 0.0], 0.4)];
        let (f, b) = global_augment(
            &frame,
            &boxes,
            &AugmentConfig::identity(),
            &mut AugmentRng::new(3),
        );
        assert_eq!(f, frame);
        assert_eq!(b, boxes);
    }

    #[test]
    fn pure_scale() {
        let g = GlobalTransform {
            tx: 0.0,
            ty: 0.0,
            rotation: 0.0,
            scale: 1.05,
        };
        let b = g.apply_box(&car([10.0, -4.0, 1.0], 0.0));
        assert_eq!((b.l, b.w, b.h), (4.0 * 1.05, 2.0 * 1.05, 1.6 * 1.05));
        assert_eq!((b.cx, b.cy, b.cz), (10.5, -4.2, 1.05));
    }

    #[test]
    fn draws_are_reproducible_and_in_range() {
        let cfg = AugmentConfig::default();
        let a = GlobalTransform::draw(&cfg, &mut AugmentRng::new(11));
        let b = GlobalTransform::draw(&cfg, &mut AugmentRng::new(11));
        assert_eq!(a, b);
        assert!(a.tx.abs() <= 0.2 && a.ty.abs() <= 0.2 && a.rotation.abs() <= FRAC_PI_4);
        assert!((0.95..=1.05).contains(&a.scale));
        let rng = AugmentRng::new(11);
        assert_ne!(
            rng.fork(1).uniform(0.0, 1.0),
            AugmentRng::new(11).uniform(0.0, 1.0)
        );
    }

    /// A box at range 10 behind a dense wall at range 5, plus a visible box
    /// whose points sit in exactly three separate pixels.
    fn occlusion_scene() -> (PointCloud, Vec<OrientedBox>) {
        let spec = GridSpec::default();
        let mut pts = Vec::new();
        // Hidden box spans azimuth about [-2.9, 2.9] degrees.
        let hidden = OrientedBox::new([10.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        for k in 0..5 {
            for j in 0..5 {
                pts.push(Point::new(
                    10.0,
                    -0.4 + 0.2 * k as f64,
                    -0.4 + 0.2 * j as f64,
                    0.5,
                ));
            }
        }
        // Wall at x = 5 covering every pixel the hidden box can reach.
        for row in 0..spec.rows() {
            for col in 0..spec.cols() {
                let az = spec.azimuth_center(col);
                let el = spec.elevation_center(row);
                if az.abs() < 8.0 && el.abs() < 8.0 {
                    let (a, e) = (az.to_radians(), el.to_radians());
                    let r = 5.0 / (e.cos() * a.cos());
                    pts.push(Point::new(5.0, r * e.cos() * a.sin(), r * e.sin(), 0.1));
                }
            }
        }
        // Visible box off to the side: three points in three different columns.
        let visible = OrientedBox::new([0.0, 10.0, 0.0], [2.0, 1.0, 1.0], 0.0).unwrap();
        for x in [-0.5, 0.0, 0.5] {
            pts.push(Point::new(x, 10.0, 0.0, 0.5));
        }
        let lonely = OrientedBox::new([0.0, -20.0, 0.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        (PointCloud::new(pts), vec![hidden, visible, lonely])
    }

    #[test]
    fn occluded_and_boundary_boxes() {
        let (frame, boxes) = occlusion_scene();
        let counts = projected_point_counts(&frame, &boxes, &GridSpec::default());
        assert_eq!(counts, vec![0, 3, 0]);
        assert_eq!(
            visibility_filter(&frame, &boxes, &GridSpec::default(), 3),
            vec![1]
        );
        assert_eq!(
            visibility_filter(&frame, &boxes, &GridSpec::default(), 4),
            Vec::<usize>::new()
        );
    }

    #[test]
    fn augment_frame_is_deterministic() {
        let (frame, boxes) = occlusion_scene();
        let db = crop_instances(&frame, &boxes[1..2]);
        let cfg = AugmentConfig {
            rng_seed: 42,
            ..Default::default()
        };
        let a = augment_frame(&frame, &boxes, &db, &GridSpec::default(), &cfg).unwrap();
        let b = augment_frame(&frame, &boxes, &db, &GridSpec::default(), &cfg).unwrap();
        assert_eq!(a, b);
        // The sample collides with itself at its own position for tiny deltas.
        assert!(a.pasted <= cfg.paste_count);
        assert!(a.boxes.len() <= 1 + a.pasted);
    }

    proptest! {
        #[test]
        fn paste_keeps_center_range(cx in -50.0f64..50.0, cy in -50.0f64..50.0, yaw in -3.0f64..3.0,
                                    delta in -FRAC_PI_4..FRAC_PI_4) {
            let b = car([cx, cy, 0.0], yaw);
            let frame = PointCloud::new(vec![
                Point::new(cx + 0.3, cy - 0.2, 0.1, 0.0),
                Point::new(cx - 0.9, cy + 0.4, -0.3, 0.0),
            ]);
            let sample = crop_instances(&frame, std::slice::from_ref(&b)).remove(0);
            let (out, placed) = paste_sample(&PointCloud::default(), &sample, delta, &AugmentConfig::default()).unwrap();
            prop_assert!((placed.cx.hypot(placed.cy) - cx.hypot(cy)).abs() <= 1e-9);
            if out.len() == 2 {
                let d = |p: &Point, q: &Point| ((p.x-q.x).powi(2) + (p.y-q.y).powi(2) + (p.z-q.z).powi(2)).sqrt();
                prop_assert!((d(&out.points[0], &out.points[1]) - d(&frame.points[0], &frame.points[1])).abs() <= 1e-9);
            }
        }

        #[test]
        fn rotation_preserves_distances(theta in -FRAC_PI_4..FRAC_PI_4,
                                        a in prop::array::uniform3(-50.0f64..50.0),
                                        b in prop::array::uniform3(-50.0f64..50.0)) {
            let g = GlobalTransform { tx: 0.0, ty: 0.0, rotation: theta, scale: 1.0 };
            let (p, q) = (Point::new(a[0], a[1], a[2], 0.0), Point::new(b[0], b[1], b[2], 0.0));
            let d = |p: &Point, q: &Point| ((p.x-q.x).powi(2) + (p.y-q.y).powi(2) + (p.z-q.z).powi(2)).sqrt();
            prop_assert!((d(&g.apply_point(&p), &g.apply_point(&q)) - d(&p, &q)).abs() <= 1e-9);
        }

        #[test]
        fn extra_occluders_never_restore_a_box(extra in prop::collection::vec((-10.0f64..10.0, -3.0f64..3.0), 0..50)) {
            let (frame, boxes) = occlusion_scene();
            let spec = GridSpec::default();
            let before = visibility_filter(&frame, &boxes, &spec, 3);
            let mut more = frame.clone();
            for (y, z) in extra {
                more.points.push(Point::new(3.0, y, z, 0.0));
            }
            let after = visibility_filter(&more, &boxes, &spec, 3);
            prop_assert!(after.iter().all(|i| before.contains(i)));
        }
    }
}
