//! Rigid-body math, the point-cloud container and oriented boxes.
//!
//! Frames follow the usual LiDAR convention: x forward, y left, z up, with
//! the sensor at the origin. Yaw is counter-clockwise about +z, zero along +x.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
    /// Seconds relative to the key frame; 0 for single-frame data.
    pub t_rel: f64,
    /// Raw ring value from the source file. Carried through, never interpreted.
    pub ring: f32,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Point {
            x,
            y,
            z,
            intensity,
            ..Default::default()
        }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn with_xyz(self, [x, y, z]: [f64; 3]) -> Self {
        Point { x, y, z, ..self }
    }

    /// Euclidean distance to the sensor origin.
    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && self.intensity.is_finite()
            && self.t_rel.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub frame_id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud {
            points,
            frame_id: String::new(),
        }
    }

    pub fn with_frame_id(mut self, frame_id: impl Into<String>) -> Self {
        self.frame_id = frame_id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }
}

impl FromIterator<Point> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Point>>(iter: I) -> Self {
        PointCloud::new(iter.into_iter().collect())
    }
}

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// A proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if rotation
            .iter()
            .flatten()
            .chain(&translation)
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidTransform("non-finite entry".into()));
        }
        let rrt = mat_mul(&rotation, &transpose(&rotation));
        for (i, row) in rrt.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                if (v - expected).abs() > ORTHONORMAL_TOL {
                    return Err(Error::InvalidTransform(format!(
                        "rotation is not orthonormal (R*R^T[{i}][{j}] = {v})"
                    )));
                }
            }
        }
        if det(&rotation) <= 0.0 {
            return Err(Error::InvalidTransform(
                "rotation has negative determinant".into(),
            ));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    /// Builds a transform from a row-major homogeneous 4x4 matrix.
    pub fn from_matrix4(m: &[f64; 16]) -> Result<Self> {
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom
            .iter()
            .zip([0.0, 0.0, 0.0, 1.0])
            .any(|(a, b)| (a - b).abs() > ORTHONORMAL_TOL)
        {
            return Err(Error::InvalidTransform(format!(
                "last row must be [0, 0, 0, 1], got {bottom:?}"
            )));
        }
        Self::new(
            [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            [m[3], m[7], m[11]],
        )
    }

    pub fn to_matrix4(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2], 0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn identity() -> Self {
        RigidTransform {
            rotation: IDENTITY3,
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: Vec3) -> Self {
        RigidTransform {
            rotation: IDENTITY3,
            translation: t,
        }
    }

    /// Rotation about +z by `yaw` radians.
    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        RigidTransform {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation_vector(&self) -> &Vec3 {
        &self.translation
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == IDENTITY3 && self.translation == [0.0; 3]
    }

    /// True when within `tol` of the identity, entry-wise.
    pub fn is_near_identity(&self, tol: f64) -> bool {
        self.rotation
            .iter()
            .flatten()
            .zip(IDENTITY3.iter().flatten())
            .all(|(a, b)| (a - b).abs() <= tol)
            && self.translation.iter().all(|v| v.abs() <= tol)
    }

    pub fn apply_vec(&self, v: &Vec3) -> Vec3 {
        if self.is_identity() {
            return *v;
        }
        let r = mat_vec(&self.rotation, v);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    pub fn apply_point(&self, p: &Point) -> Point {
        p.with_xyz(self.apply_vec(&p.xyz()))
    }

    /// `compose(a, b)` applies `b` first, then `a`.
    pub fn compose(&self, inner: &RigidTransform) -> RigidTransform {
        let rotation = mat_mul(&self.rotation, &inner.rotation);
        let rt = mat_vec(&self.rotation, &inner.translation);
        RigidTransform {
            rotation,
            translation: [
                rt[0] + self.translation[0],
                rt[1] + self.translation[1],
                rt[2] + self.translation[2],
            ],
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, &self.translation);
        RigidTransform {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }
}

/// Applies `transform` to every point, keeping order, intensity and timestamps.
pub fn apply_transform(cloud: &PointCloud, transform: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| transform.apply_point(p))
            .collect(),
        frame_id: cloud.frame_id.clone(),
    }
}

pub fn compose(outer: &RigidTransform, inner: &RigidTransform) -> RigidTransform {
    outer.compose(inner)
}

pub fn invert(transform: &RigidTransform) -> RigidTransform {
    transform.inverse()
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_yaw(yaw: f64) -> f64 {
    let wrapped = yaw.rem_euclid(2.0 * PI);
    if wrapped > PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

/// A 3D box with a heading about the vertical axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    #[serde(default)]
    pub category: String,
    #[serde(default)]
    pub score: f64,
    #[serde(default)]
    pub num_points: usize,
}

impl OrientedBox {
    pub fn new(center: Vec3, extents: Vec3, yaw: f64) -> Result<Self> {
        OrientedBox {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            l: extents[0],
            w: extents[1],
            h: extents[2],
            yaw,
            category: String::new(),
            score: 0.0,
            num_points: 0,
        }
        .validated()
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category = category.into();
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    /// Checks extents and normalizes yaw; used after deserialization.
    pub fn validated(mut self) -> Result<Self> {
        let fields = [
            self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw, self.score,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBox("non-finite field".into()));
        }
        if self.l <= 0.0 || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "extents must be positive, got ({}, {}, {})",
                self.l, self.w, self.h
            )));
        }
        self.yaw = normalize_yaw(self.yaw);
        Ok(self)
    }

    pub fn center(&self) -> Vec3 {
        [self.cx, self.cy, self.cz]
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    /// Box-to-world transform (local x along the heading).
    pub fn pose(&self) -> RigidTransform {
        let mut t = RigidTransform::from_yaw(self.yaw);
        t.translation = self.center();
        t
    }

    /// Expresses a world point in box-local coordinates.
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.cz]
    }

    /// Half-open containment: lower faces inclusive, upper faces exclusive.
    pub fn contains(&self, p: &Vec3) -> bool {
        let [lx, ly, lz] = self.to_local(p);
        half_open(lx, self.l) && half_open(ly, self.w) && half_open(lz, self.h)
    }

    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        box_bev_corners(self)
    }
}

fn half_open(v: f64, extent: f64) -> bool {
    -extent / 2.0 <= v && v < extent / 2.0
}

/// Counter-clockwise BEV corners, starting at the rear-right corner.
pub fn box_bev_corners(b: &OrientedBox) -> [[f64; 2]; 4] {
    let (s, c) = b.yaw.sin_cos();
    let hl = b.l / 2.0;
    let hw = b.w / 2.0;
    [[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]]
        .map(|[u, v]| [b.cx + c * u - s * v, b.cy + s * u + c * v])
}

/// Signed shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    // Relative to the first vertex to limit cancellation far from the origin.
    let o = poly[0];
    let twice: f64 = (1..n - 1)
        .map(|i| {
            let a = [poly[i][0] - o[0], poly[i][1] - o[1]];
            let b = [poly[i + 1][0] - o[0], poly[i + 1][1] - o[1]];
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    twice / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_transform_is_bit_exact() {
        let cloud = PointCloud::new(vec![
            Point::new(-0.0, 1.5, -2.25, 0.3),
            Point::new(1e-300, -7.0, 3.0, 1.0),
        ]);
        let out = apply_transform(&cloud, &RigidTransform::identity());
        assert_eq!(out, cloud);
        for (a, b) in out.iter().zip(cloud.iter()) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
        }
    }

    #[test]
    fn pure_translation() {
        let t = RigidTransform::translation([1.0, 0.0, 0.0]);
        assert_eq!(t.apply_vec(&[0.0, 0.0, 0.0]), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn quarter_turn_yaw() {
        let t = RigidTransform::from_yaw(FRAC_PI_2);
        assert!(close(
            &t.apply_vec(&[1.0, 0.0, 0.0]),
            &[0.0, 1.0, 0.0],
            1e-12
        ));
    }

    #[test]
    fn transform_keeps_intensity_and_time() {
        let mut p = Point::new(1.0, 2.0, 3.0, 0.7);
        p.t_rel = -0.05;
        p.ring = 12.0;
        let q = RigidTransform::from_yaw(0.3).apply_point(&p);
        assert_eq!((q.intensity, q.t_rel, q.ring), (0.7, -0.05, 12.0));
    }

    #[test]
    fn compose_identity_and_inverse() {
        let t =
            RigidTransform::from_yaw(0.7).compose(&RigidTransform::translation([1.0, -2.0, 0.5]));
        assert_eq!(compose(&RigidTransform::identity(), &t), t);
        assert!(compose(&t, &invert(&t)).is_near_identity(1e-9));
    }

    #[test]
    fn compose_translations_add() {
        let t = compose(
            &RigidTransform::translation([1.0, 0.0, 0.0]),
            &RigidTransform::translation([0.0, 2.0, 0.0]),
        );
        assert_eq!(*t.translation_vector(), [1.0, 2.0, 0.0]);
    }

    #[test]
    fn invert_cases() {
        assert_eq!(
            invert(&RigidTransform::identity()),
            RigidTransform::identity()
        );
        let t = invert(&RigidTransform::translation([1.0, 2.0, 3.0]));
        assert_eq!(*t.translation_vector(), [-1.0, -2.0, -3.0]);
        let inv = invert(&RigidTransform::from_yaw(30f64.to_radians()));
        let expected = RigidTransform::from_yaw(-30f64.to_radians());
        for (a, b) in inv
            .rotation()
            .iter()
            .flatten()
            .zip(expected.rotation().iter().flatten())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_orthonormal() {
        let r = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(RigidTransform::new(r, [0.0; 3]).is_err());
        let reflection = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(RigidTransform::new(reflection, [0.0; 3]).is_err());
    }

    #[test]
    fn matrix4_round_trip() {
        let t =
            RigidTransform::from_yaw(1.1).compose(&RigidTransform::translation([4.0, 5.0, 6.0]));
        assert_eq!(RigidTransform::from_matrix4(&t.to_matrix4()).unwrap(), t);
        let mut bad = t.to_matrix4();
        bad[12] = 1.0;
        assert!(RigidTransform::from_matrix4(&bad).is_err());
    }

    #[test]
    fn yaw_normalization_range() {
        assert_eq!(normalize_yaw(-PI), PI);
        assert_eq!(normalize_yaw(PI), PI);
        assert!((normalize_yaw(3.0 * PI / 2.0) + FRAC_PI_2).abs() < 1e-12);
        assert!(OrientedBox::new([0.0; 3], [0.0, 1.0, 1.0], 0.0).is_err());
    }

    fn sorted(mut c: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
        c.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        c
    }

    #[test]
    fn unit_square_corners() {
        let b = OrientedBox::new([0.0; 3], [1.0, 1.0, 1.0], 0.0).unwrap();
        let c = box_bev_corners(&b);
        assert_eq!(c, [[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]]);
        let turned = OrientedBox {
            yaw: FRAC_PI_2,
            ..b
        };
        for (p, q) in sorted(box_bev_corners(&turned).to_vec())
            .iter()
            .zip(sorted(c.to_vec()))
        {
            assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn rotated_rectangle_corners() {
        let b = OrientedBox::new([0.0; 3], [2.0, 1.0, 1.0], std::f64::consts::FRAC_PI_4).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        // (u, v) rotated by 45 degrees is ((u - v) h, (u + v) h).
        let expected = [[-1.0, -0.5], [1.0, -0.5], [1.0, 0.5], [-1.0, 0.5]]
            .map(|[u, v]| [(u - v) * h, (u + v) * h]);
        for (p, q) in box_bev_corners(&b).iter().zip(expected) {
            assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
        }
        assert!(polygon_area(&box_bev_corners(&b)) > 0.0);
    }

    #[test]
    fn containment_is_half_open() {
        let b = OrientedBox::new([0.5, 0.5, 0.5], [1.0, 1.0, 1.0], 0.0).unwrap();
        assert!(b.contains(&[0.0, 0.0, 0.0]));
        assert!(!b.contains(&[0.5, 0.5, 1.0]));
        assert!(!b.contains(&[1.0, 0.5, 0.5]));
        assert_eq!(b.to_local(&[0.5, 0.5, 0.5]), [0.0, 0.0, 0.0]);
    }

    fn arb_transform() -> impl Strategy<Value = RigidTransform> {
        (
            -PI..PI,
            -1.5f64..1.5,
            -PI..PI,
            prop::array::uniform3(-50.0f64..50.0),
        )
            .prop_map(|(a, b, c, t)| {
                // z-y-z Euler angles cover SO(3).
                let rz = |th: f64| {
                    [
                        [th.cos(), -th.sin(), 0.0],
                        [th.sin(), th.cos(), 0.0],
                        [0.0, 0.0, 1.0],
                    ]
                };
                let ry = [
                    [b.cos(), 0.0, b.sin()],
                    [0.0, 1.0, 0.0],
                    [-b.sin(), 0.0, b.cos()],
                ];
                let r = mat_mul(&rz(a), &mat_mul(&ry, &rz(c)));
                RigidTransform::new(r, t).unwrap()
            })
    }

    proptest! {
        #[test]
        fn transform_preserves_distances(t in arb_transform(),
                                         a in prop::array::uniform3(-80.0f64..80.0),
                                         b in prop::array::uniform3(-80.0f64..80.0)) {
            let d = |p: &Vec3, q: &Vec3| ((p[0]-q[0]).powi(2) + (p[1]-q[1]).powi(2) + (p[2]-q[2]).powi(2)).sqrt();
            let before = d(&a, &b);
            let after = d(&t.apply_vec(&a), &t.apply_vec(&b));
            prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
        }

        #[test]
        fn compose_matches_sequential_application(t1 in arb_transform(), t2 in arb_transform(),
                                                  p in prop::array::uniform3(-80.0f64..80.0)) {
            let direct = compose(&t1, &t2).apply_vec(&p);
            let chained = t1.apply_vec(&t2.apply_vec(&p));
            prop_assert!(close(&direct, &chained, 1e-9));
        }

        #[test]
        fn compose_is_associative(t1 in arb_transform(), t2 in arb_transform(), t3 in arb_transform(),
                                  p in prop::array::uniform3(-80.0f64..80.0)) {
            let left = compose(&compose(&t1, &t2), &t3).apply_vec(&p);
            let right = compose(&t1, &compose(&t2, &t3)).apply_vec(&p);
            prop_assert!(close(&left, &right, 1e-9));
        }

        #[test]
        fn inverse_cancels(t in arb_transform()) {
            prop_assert!(compose(&t, &invert(&t)).is_near_identity(1e-9));
        }

        #[test]
        fn corner_area_matches_extents(l in 0.01f64..30.0, w in 0.01f64..30.0, yaw in -10.0f64..10.0,
                                       cx in -100.0f64..100.0, cy in -100.0f64..100.0) {
            let b = OrientedBox::new([cx, cy, 0.0], [l, w, 1.0], yaw).unwrap();
            let area = polygon_area(&box_bev_corners(&b));
            prop_assert!((area - l * w).abs() <= 1e-9 * l * w);
        }
    }
}
