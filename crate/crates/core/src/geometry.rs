//! Rotated-rectangle geometry: corners, convex clipping, rotated IoU,
//! rotated NMS and pixel rasterization.
//!
//! Boxes use the long-side convention: `w >= h` and `theta` in
//! `[-pi/2, pi/2)`, with `theta` measured counterclockwise from the x axis
//! to the `w` side. Any input angle is folded into that range, swapping the
//! sides when the fold crosses a quarter turn.

use std::cmp::Ordering;
use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intersections smaller than this (px^2) count as empty.
pub const MIN_INTERSECTION_AREA: f64 = 1e-9;

const INSIDE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, other: Point) -> Point {
        Point::new(self.x - other.x, self.y - other.y)
    }

    fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }
}

/// An oriented rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct RotatedBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta: f64,
}

/// File representation of a box. Angles are radians; anything outside
/// `[-2pi, 2pi]` is taken to be degrees and rejected.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl TryFrom<RawBox> for RotatedBox {
    type Error = Error;

    fn try_from(raw: RawBox) -> Result<Self> {
        if raw.theta.abs() > 2.0 * PI + 1e-9 {
            return Err(Error::Argument(format!(
                "theta = {} is outside the radian range; angles must be radians",
                raw.theta
            )));
        }
        RotatedBox::new(raw.cx, raw.cy, raw.w, raw.h, raw.theta)
    }
}

impl From<RotatedBox> for RawBox {
    fn from(b: RotatedBox) -> Self {
        RawBox {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
            theta: b.theta,
        }
    }
}

/// Folds `(w, h, theta)` into the canonical long-side form.
pub fn normalize_angle(w: f64, h: f64, theta: f64) -> (f64, f64, f64) {
    let (w, h, theta) = if h > w { (h, w, theta + FRAC_PI_2) } else { (w, h, theta) };
    let mut t = theta - PI * ((theta + FRAC_PI_2) / PI).floor();
    if t >= FRAC_PI_2 {
        t -= PI;
    }
    if t < -FRAC_PI_2 {
        t = -FRAC_PI_2;
    }
    (w, h, t)
}

impl RotatedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        let all_finite = [cx, cy, w, h, theta].iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Argument(format!(
                "box fields must be finite: ({cx}, {cy}, {w}, {h}, {theta})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Argument(format!("box extents must be positive: w = {w}, h = {h}")));
        }
        let (w, h, theta) = normalize_angle(w, h, theta);
        Ok(Self { cx, cy, w, h, theta })
    }

    /// Axis-aligned box from its center and extents.
    pub fn axis_aligned(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx, cy, w, h, 0.0)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Radius of the circumscribed circle.
    pub fn circumradius(&self) -> f64 {
        0.5 * self.w.hypot(self.h)
    }

    /// Same box moved by `(dx, dy)`.
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Vertices in counterclockwise order.
    pub fn corners(&self) -> [Point; 4] {
        let (sin, cos) = self.theta.sin_cos();
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)].map(|(dx, dy)| {
            Point::new(self.cx + dx * cos - dy * sin, self.cy + dx * sin + dy * cos)
        })
    }

    /// Inclusive point-in-rectangle test on the corner polygon.
    pub fn contains(&self, p: Point) -> bool {
        point_in_convex(&self.corners(), p)
    }

    fn key(&self) -> [f64; 5] {
        [self.cx, self.cy, self.w, self.h, self.theta]
    }
}

fn point_in_convex(poly: &[Point; 4], p: Point) -> bool {
    (0..4).all(|i| {
        let a = poly[i];
        let b = poly[(i + 1) % 4];
        b.sub(a).cross(p.sub(a)) >= -INSIDE_TOLERANCE
    })
}

/// Shoelace area of a simple polygon (absolute value).
pub fn polygon_area(poly: &[Point]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let twice: f64 = poly
        .iter()
        .zip(poly.iter().cycle().skip(1))
        .map(|(a, b)| a.cross(*b))
        .sum();
    0.5 * twice.abs()
}

/// Sutherland-Hodgman: clips `subject` against the convex counterclockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output: Vec<Point> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let edge = clip[(i + 1) % clip.len()].sub(a);
        let side = |p: Point| edge.cross(p.sub(a));
        let input = std::mem::take(&mut output);
        let mut prev = *input.last().unwrap();
        let mut prev_side = side(prev);
        for &cur in &input {
            let cur_side = side(cur);
            if cur_side >= 0.0 {
                if prev_side < 0.0 {
                    output.push(crossing(prev, cur, prev_side, cur_side));
                }
                output.push(cur);
            } else if prev_side >= 0.0 {
                output.push(crossing(prev, cur, prev_side, cur_side));
            }
            prev = cur;
            prev_side = cur_side;
        }
    }
    output
}

fn crossing(p: Point, q: Point, sp: f64, sq: f64) -> Point {
    let t = sp / (sp - sq);
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Area of the intersection of two rotated boxes.
pub fn intersection_area(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let reach = a.circumradius() + b.circumradius();
    let dx = a.cx - b.cx;
    let dy = a.cy - b.cy;
    if dx * dx + dy * dy >= reach * reach {
        return 0.0;
    }
    let area = polygon_area(&clip_convex(&a.corners(), &b.corners()));
    if area < MIN_INTERSECTION_AREA {
        0.0
    } else {
        area
    }
}

/// Intersection over union of two rotated boxes, in `[0, 1]`.
///
/// Arguments are put in a canonical order first so the result is bitwise
/// symmetric.
pub fn rotated_iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let (a, b) = match cmp_keys(a, b) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn cmp_keys(a: &RotatedBox, b: &RotatedBox) -> Ordering {
    a.key()
        .iter()
        .zip(b.key().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Greedy rotated NMS. Returns kept indices ordered by descending score,
/// ties going to the lower index. A box is suppressed when its IoU with a
/// kept box exceeds `iou_thr`.
pub fn nms(boxes: &[RotatedBox], scores: &[f64], iou_thr: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::Argument(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if !(iou_thr > 0.0 && iou_thr <= 1.0) {
        return Err(Error::Argument(format!("nms: iou_thr = {iou_thr} not in (0, 1]")));
    }
    let order = order_by_score_desc(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[rank + 1..] {
            if !suppressed[j] && rotated_iou(&boxes[i], &boxes[j]) > iou_thr {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}

/// Indices sorted by descending score; equal scores keep index order.
pub fn order_by_score_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// Pixels `(x, y)` of a `width x height` raster whose centers
/// `(x + 0.5, y + 0.5)` lie inside the box (boundary inclusive).
pub fn pixels_inside(b: &RotatedBox, width: u32, height: u32) -> Vec<(u32, u32)> {
    let corners = b.corners();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for c in &corners {
        x0 = x0.min(c.x);
        y0 = y0.min(c.y);
        x1 = x1.max(c.x);
        y1 = y1.max(c.y);
    }
    let lo = |v: f64| (v - 0.5).floor().max(0.0);
    let xs = lo(x0) as i64;
    let ys = lo(y0) as i64;
    let xe = (x1.ceil() as i64).min(width as i64 - 1);
    let ye = (y1.ceil() as i64).min(height as i64 - 1);
    let mut out = Vec::new();
    for y in ys..=ye {
        for x in xs..=xe {
            let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
            if point_in_convex(&corners, p) {
                out.push((x as u32, y as u32));
            }
        }
    }
    out
}
