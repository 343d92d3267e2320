//! Bird's-eye-view rotated IoU and greedy non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_bev_corners, polygon_area, OrientedBox};

/// Intersections smaller than this are treated as empty.
pub const MIN_INTERSECTION_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub iou_threshold: f64,
    pub max_output: usize,
    /// Only suppress boxes of the same category.
    pub per_category: bool,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            iou_threshold: 0.2,
            max_output: 100,
            per_category: false,
        }
    }
}

impl NmsConfig {
    pub fn validated(self) -> Result<Self> {
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::InvalidConfig(format!(
                "IoU threshold must lie in [0, 1], got {}",
                self.iou_threshold
            )));
        }
        if self.max_output == 0 {
            return Err(Error::InvalidConfig("max_output must be at least 1".into()));
        }
        Ok(self)
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Clips `subject` to the left side of every edge of the counter-clockwise
/// convex polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let d_cur = cross(a, b, cur);
            let d_prev = cross(a, b, prev);
            if d_cur >= 0.0 {
                if d_prev < 0.0 {
                    output.push(intersect(prev, cur, d_prev, d_cur));
                }
                output.push(cur);
            } else if d_prev >= 0.0 {
                output.push(intersect(prev, cur, d_prev, d_cur));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], dp: f64, dq: f64) -> [f64; 2] {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the BEV overlap of two boxes.
pub fn bev_intersection(a: &OrientedBox, b: &OrientedBox) -> f64 {
    // Quick reject on circumscribed circles.
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    let ra = a.l.hypot(a.w) / 2.0;
    let rb = b.l.hypot(b.w) / 2.0;
    if dx * dx + dy * dy > (ra + rb) * (ra + rb) {
        return 0.0;
    }
    let area = polygon_area(&clip_convex(&box_bev_corners(a), &box_bev_corners(b)));
    if area < MIN_INTERSECTION_AREA {
        0.0
    } else {
        area
    }
}

pub fn bev_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = bev_intersection(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Indices of the kept boxes, highest score first. Equal scores keep the
/// lower input index first.
pub fn nms(boxes: &[OrientedBox], cfg: &NmsConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].score.total_cmp(&boxes[i].score).then(i.cmp(&j)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        if keep.len() == cfg.max_output {
            break;
        }
        for &j in &order[rank + 1..] {
            if suppressed[j] || (cfg.per_category && boxes[i].category != boxes[j].category) {
                continue;
            }
            if bev_iou(&boxes[i], &boxes[j]) > cfg.iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}
