//! Planar primitives: vectors, poses, oriented rectangles and convex polygons,
//! with separating-axis overlap tests and swept first-contact times.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Vec2 { x: c, y: s }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    /// Counter-clockwise perpendicular.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl SubAssign for Vec2 {
    fn sub_assign(&mut self, o: Vec2) {
        self.x -= o.x;
        self.y -= o.y;
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Div<f64> for Vec2 {
    type Output = Vec2;
    fn div(self, k: f64) -> Vec2 {
        Vec2::new(self.x / k, self.y / k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub const fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose { x, y, heading }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Maps a point expressed in this pose's local frame into the parent frame.
    pub fn to_world(&self, local: Vec2) -> Vec2 {
        self.position() + local.rotate(self.heading)
    }

    /// Maps a parent-frame point into this pose's local frame.
    pub fn to_local(&self, world: Vec2) -> Vec2 {
        (world - self.position()).rotate(-self.heading)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedRect {
    pub center: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedRect {
    pub fn new(center: Vec2, heading: f64, length: f64, width: f64) -> Self {
        OrientedRect {
            center,
            heading,
            length,
            width,
        }
    }

    pub fn from_pose(pose: &Pose, length: f64, width: f64) -> Self {
        Self::new(pose.position(), pose.heading, length, width)
    }

    /// Corners in counter-clockwise order starting at front-left.
    pub fn corners(&self) -> [Vec2; 4] {
        let f = Vec2::from_angle(self.heading) * (self.length / 2.0);
        let l = Vec2::from_angle(self.heading).perp() * (self.width / 2.0);
        let c = self.center;
        [c + f + l, c - f + l, c - f - l, c + f - l]
    }

    pub fn polygon(&self) -> ConvexPolygon {
        ConvexPolygon {
            vertices: self.corners().to_vec(),
        }
    }

    pub fn translated(&self, by: Vec2) -> Self {
        OrientedRect {
            center: self.center + by,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConvexPolygon {
    pub vertices: Vec<Vec2>,
}

impl ConvexPolygon {
    pub fn new(vertices: Vec<Vec2>) -> Self {
        ConvexPolygon { vertices }
    }

    /// Outward-agnostic edge normals (unnormalised is fine for SAT, but we
    /// normalise so projected extents are in metres).
    fn axes(&self) -> impl Iterator<Item = Vec2> + '_ {
        let n = self.vertices.len();
        (0..n).filter_map(move |i| {
            let e = self.vertices[(i + 1) % n] - self.vertices[i];
            let len = e.norm();
            (len > 1e-12).then(|| e.perp() * (1.0 / len))
        })
    }

    fn project(&self, axis: Vec2) -> (f64, f64) {
        self.vertices
            .iter()
            .map(|v| v.dot(axis))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p), hi.max(p))
            })
    }

    pub fn centroid(&self) -> Vec2 {
        let n = self.vertices.len();
        if n == 0 {
            return Vec2::ZERO;
        }
        let mut area2 = 0.0;
        let mut acc = Vec2::ZERO;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let w = a.cross(b);
            area2 += w;
            acc += (a + b) * w;
        }
        if area2.abs() < 1e-12 {
            let sum = self.vertices.iter().fold(Vec2::ZERO, |s, v| s + *v);
            return sum * (1.0 / n as f64);
        }
        acc * (1.0 / (3.0 * area2))
    }

    fn signed_area2(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| self.vertices[i].cross(self.vertices[(i + 1) % n]))
            .sum()
    }

    pub fn is_valid_convex(&self) -> bool {
        let n = self.vertices.len();
        if n < 3 || !self.vertices.iter().all(|v| v.is_finite()) {
            return false;
        }
        let mut sign = 0.0;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = self.vertices[(i + 2) % n];
            let z = (b - a).cross(c - b);
            if z.abs() < 1e-12 {
                continue;
            }
            if sign == 0.0 {
                sign = z.signum();
            } else if z.signum() != sign {
                return false;
            }
        }
        sign != 0.0
    }
}

/// Separating-axis overlap test for convex polygons. Touching boundaries do
/// not count as overlap.
pub fn polygons_overlap(a: &ConvexPolygon, b: &ConvexPolygon) -> bool {
    for axis in a.axes().chain(b.axes()) {
        let (a_lo, a_hi) = a.project(axis);
        let (b_lo, b_hi) = b.project(axis);
        if a_hi <= b_lo || b_hi <= a_lo {
            return false;
        }
    }
    true
}

pub fn rects_overlap(a: &OrientedRect, b: &OrientedRect) -> bool {
    polygons_overlap(&a.polygon(), &b.polygon())
}

/// Intersection of two convex polygons (Sutherland-Hodgman). Empty when
/// they do not overlap.
pub fn intersection(subject: &ConvexPolygon, clip: &ConvexPolygon) -> ConvexPolygon {
    let mut clip = clip.clone();
    if clip.signed_area2() < 0.0 {
        clip.vertices.reverse();
    }
    let mut out = subject.vertices.clone();
    let n = clip.vertices.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let a = clip.vertices[i];
        let b = clip.vertices[(i + 1) % n];
        let edge = b - a;
        let inside = |p: Vec2| edge.cross(p - a) >= 0.0;
        let input = std::mem::take(&mut out);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let cur_in = inside(cur);
            let prev_in = inside(prev);
            if cur_in {
                if !prev_in {
                    out.push(segment_line_hit(prev, cur, a, edge));
                }
                out.push(cur);
            } else if prev_in {
                out.push(segment_line_hit(prev, cur, a, edge));
            }
        }
    }
    ConvexPolygon::new(out)
}

fn segment_line_hit(p: Vec2, q: Vec2, a: Vec2, edge: Vec2) -> Vec2 {
    let d = q - p;
    let denom = edge.cross(d);
    if denom.abs() < 1e-15 {
        return p;
    }
    let t = edge.cross(a - p) / denom;
    p + d * t
}

/// Earliest time `t >= 0` at which two convex bodies translating with
/// constant velocities overlap, or `None` if they never do.
///
/// Exact under pure translation: along every separating axis the projected
/// intervals overlap on an open time interval, and the bodies overlap exactly
/// on the intersection of those intervals.
pub fn first_contact_time(
    a: &ConvexPolygon,
    vel_a: Vec2,
    b: &ConvexPolygon,
    vel_b: Vec2,
) -> Option<f64> {
    let rel = vel_b - vel_a;
    let mut t_enter = 0.0_f64;
    let mut t_exit = f64::INFINITY;
    for axis in a.axes().chain(b.axes()) {
        let (a_lo, a_hi) = a.project(axis);
        let (b_lo, b_hi) = b.project(axis);
        let s = rel.dot(axis);
        // overlap while b_lo + s t < a_hi and a_lo < b_hi + s t
        if s.abs() < 1e-12 {
            if a_hi <= b_lo || b_hi <= a_lo {
                return None;
            }
            continue;
        }
        let t1 = (a_hi - b_lo) / s;
        let t2 = (a_lo - b_hi) / s;
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        t_enter = t_enter.max(lo);
        t_exit = t_exit.min(hi);
        if t_enter >= t_exit {
            return None;
        }
    }
    Some(t_enter)
}
