use super::{GeometryError, Pose2, Vec2};
use serde::{Deserialize, Serialize};

const CONVEX_EPS: f64 = 1e-14;
const CENTER_TOL: f64 = 1e-9;

/// Convex polygon in its body frame: counter-clockwise, strictly convex and
/// centered on its area centroid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec2>", into = "Vec<Vec2>")]
pub struct ConvexPolygon {
    vertices: Vec<Vec2>,
}

impl TryFrom<Vec<Vec2>> for ConvexPolygon {
    type Error = GeometryError;
    fn try_from(v: Vec<Vec2>) -> Result<Self, Self::Error> {
        ConvexPolygon::new(v)
    }
}

impl From<ConvexPolygon> for Vec<Vec2> {
    fn from(p: ConvexPolygon) -> Self {
        p.vertices
    }
}

impl ConvexPolygon {
    pub fn new(vertices: Vec<Vec2>) -> Result<Self, GeometryError> {
        if vertices.len() < 3 {
            return Err(GeometryError::TooFewVertices(vertices.len()));
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if !is_strictly_convex_ccw(&vertices) {
            return Err(GeometryError::NotConvex);
        }
        let c = area_centroid(&vertices);
        let scale = vertices.iter().map(|v| v.norm()).fold(1.0_f64, f64::max);
        if c.norm() > CENTER_TOL * scale {
            return Err(GeometryError::NotCentered(c.norm()));
        }
        Ok(Self { vertices })
    }

    /// Builds the convex hull of arbitrary points and recenters it. Returns the
    /// polygon together with the centroid offset that was subtracted.
    pub fn from_points(points: &[Vec2]) -> Result<(Self, Vec2), GeometryError> {
        let hull = convex_hull(points);
        if hull.len() < 3 {
            return Err(GeometryError::TooFewVertices(hull.len()));
        }
        let c = area_centroid(&hull);
        let centered: Vec<Vec2> = hull.into_iter().map(|v| v - c).collect();
        Ok((Self::new(centered)?, c))
    }

    pub fn rectangle(width: f64, height: f64) -> Self {
        let (hw, hh) = (width / 2.0, height / 2.0);
        Self {
            vertices: vec![
                Vec2::new(-hw, -hh),
                Vec2::new(hw, -hh),
                Vec2::new(hw, hh),
                Vec2::new(-hw, hh),
            ],
        }
    }

    pub fn regular(n: usize, circumradius: f64) -> Self {
        let vertices = (0..n)
            .map(|k| Vec2::from_angle(2.0 * std::f64::consts::PI * k as f64 / n as f64) * circumradius)
            .collect();
        Self { vertices }
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn circumradius(&self) -> f64 {
        self.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Extent of the polygon projected on `axis` (unit vector).
    pub fn width_along(&self, axis: Vec2) -> f64 {
        let (lo, hi) = project(&self.vertices, axis);
        hi - lo
    }

    /// Smallest projected width over all edge normals (the caliper width).
    pub fn min_width(&self) -> f64 {
        edge_normals(&self.vertices)
            .map(|n| self.width_along(n))
            .fold(f64::INFINITY, f64::min)
    }
}

/// World-frame convex polygon (counter-clockwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub vertices: Vec<Vec2>,
}

impl Polygon {
    pub fn new(vertices: Vec<Vec2>) -> Self {
        Self { vertices }
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn centroid(&self) -> Vec2 {
        area_centroid(&self.vertices)
    }

    /// Closed containment test for a convex CCW polygon.
    pub fn contains(&self, p: Vec2) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            (b - a).cross(p - a) >= 0.0
        })
    }

    /// Strict interior containment with a margin.
    pub fn contains_strict(&self, p: Vec2, margin: f64) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let e = b - a;
            e.cross(p - a) > margin * e.norm()
        })
    }

    pub fn edges(&self) -> impl Iterator<Item = (Vec2, Vec2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Points spaced uniformly by arc length along the boundary.
    pub fn sample_boundary(&self, count: usize) -> Vec<Vec2> {
        let perimeter: f64 = self.edges().map(|(a, b)| (b - a).norm()).sum();
        let mut out = Vec::with_capacity(count);
        if perimeter <= 0.0 || count == 0 {
            return out;
        }
        let step = perimeter / count as f64;
        let mut edges = self.edges();
        let (mut a, mut b) = edges.next().unwrap();
        let mut edge_len = (b - a).norm();
        let mut walked = 0.0;
        for k in 0..count {
            let s = k as f64 * step;
            while s > walked + edge_len {
                walked += edge_len;
                match edges.next() {
                    Some((na, nb)) => {
                        a = na;
                        b = nb;
                        edge_len = (b - a).norm();
                    }
                    None => break,
                }
            }
            let t = if edge_len > 0.0 { ((s - walked) / edge_len).clamp(0.0, 1.0) } else { 0.0 };
            out.push(a + (b - a) * t);
        }
        out
    }

    /// Parameter interval `(t_in, t_out)` where `origin + t·dir` lies in the
    /// open interior, restricted to `t >= 0`. Also returns the index of the
    /// edge through which the ray enters, or `None` if the origin is inside.
    pub fn ray_interval(&self, origin: Vec2, dir: Vec2) -> Option<(f64, f64, Option<usize>)> {
        let mut t_in = 0.0_f64;
        let mut t_out = f64::INFINITY;
        let mut enter_edge = None;
        let n = self.vertices.len();
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let e = b - a;
            // outward normal of a CCW polygon
            let normal = Vec2::new(e.y, -e.x);
            let num = normal.dot(origin - a);
            let den = normal.dot(dir);
            if den.abs() < 1e-300 {
                if num >= 0.0 {
                    return None;
                }
                continue;
            }
            let t = -num / den;
            if den < 0.0 {
                if t > t_in {
                    t_in = t;
                    enter_edge = Some(i);
                }
            } else if t < t_out {
                t_out = t;
            }
            if t_in >= t_out {
                return None;
            }
        }
        Some((t_in, t_out, enter_edge))
    }

    /// True iff the open segment `a`-`b` passes through the polygon interior.
    pub fn segment_crosses_interior(&self, a: Vec2, b: Vec2, eps: f64) -> bool {
        let d = b - a;
        let len = d.norm();
        if len <= 0.0 {
            return self.contains_strict(a, eps);
        }
        let dir = d * (1.0 / len);
        match self.ray_interval(a, dir) {
            Some((t_in, t_out, _)) => {
                let lo = t_in.max(0.0);
                let hi = t_out.min(len);
                hi - lo > eps
            }
            None => false,
        }
    }
}

/// Mininum translation vector: moving the second polygon by
/// `normal * depth` separates it from the first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mtv {
    pub normal: Vec2,
    pub depth: f64,
}

impl Mtv {
    pub fn vector(&self) -> Vec2 {
        self.normal * self.depth
    }
}

pub fn transform_polygon(poly: &ConvexPolygon, pose: &Pose2) -> Polygon {
    let (s, c) = pose.theta.sin_cos();
    let t = pose.position();
    Polygon::new(
        poly.vertices
            .iter()
            .map(|v| Vec2::new(c * v.x - s * v.y + t.x, s * v.x + c * v.y + t.y))
            .collect(),
    )
}

/// Separating-axis overlap test. `None` when the polygons are disjoint or
/// only touch; otherwise the smallest push that separates `b` from `a`.
pub fn penetration(a: &Polygon, b: &Polygon) -> Option<Mtv> {
    let mut best: Option<Mtv> = None;
    for axis in edge_normals(&a.vertices).chain(edge_normals(&b.vertices)) {
        let (amin, amax) = project(&a.vertices, axis);
        let (bmin, bmax) = project(&b.vertices, axis);
        let push_pos = amax - bmin;
        let push_neg = bmax - amin;
        if push_pos <= 0.0 || push_neg <= 0.0 {
            return None;
        }
        let candidate = if push_pos <= push_neg {
            Mtv { normal: axis, depth: push_pos }
        } else {
            Mtv { normal: -axis, depth: push_neg }
        };
        if best.is_none_or(|m| candidate.depth < m.depth) {
            best = Some(candidate);
        }
    }
    best
}

/// Intersection of two convex polygons (Sutherland–Hodgman).
pub(crate) fn clip_convex(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let e = b - a;
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let p = input[j];
            let q = input[(j + 1) % m];
            let dp = e.cross(p - a);
            let dq = e.cross(q - a);
            if dp >= 0.0 {
                output.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                output.push(p + (q - p) * t);
            }
        }
    }
    output
}

/// Andrew's monotone chain; counter-clockwise, collinear points dropped.
pub fn convex_hull(points: &[Vec2]) -> Vec<Vec2> {
    let mut pts: Vec<Vec2> = points.iter().copied().filter(|p| p.is_finite()).collect();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Vec2> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vec2>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 {
                let a = hull[hull.len() - 2];
                let b = hull[hull.len() - 1];
                if (b - a).cross(p - a) <= CONVEX_EPS {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn is_strictly_convex_ccw(v: &[Vec2]) -> bool {
    let n = v.len();
    if signed_area(v) <= 0.0 {
        return false;
    }
    let mut turning = 0.0;
    for i in 0..n {
        let a = v[i];
        let b = v[(i + 1) % n];
        let c = v[(i + 2) % n];
        if (b - a).cross(c - b) <= CONVEX_EPS {
            return false;
        }
        turning += (b - a).angle_to(c - b);
    }
    // a simple convex polygon turns exactly once
    (turning - 2.0 * std::f64::consts::PI).abs() < 1e-6
}

trait AngleTo {
    fn angle_to(self, other: Vec2) -> f64;
}

impl AngleTo for Vec2 {
    fn angle_to(self, other: Vec2) -> f64 {
        self.cross(other).atan2(self.dot(other))
    }
}

pub(crate) fn signed_area(v: &[Vec2]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        s += v[i].cross(v[(i + 1) % n]);
    }
    0.5 * s
}

pub(crate) fn area_centroid(v: &[Vec2]) -> Vec2 {
    let n = v.len();
    let origin = v[0];
    let mut a = 0.0;
    let mut c = Vec2::ZERO;
    for i in 0..n {
        let p = v[i] - origin;
        let q = v[(i + 1) % n] - origin;
        let w = p.cross(q);
        a += w;
        c += (p + q) * w;
    }
    if a.abs() < 1e-300 {
        let mean = v.iter().fold(Vec2::ZERO, |acc, &p| acc + p) * (1.0 / n as f64);
        return mean;
    }
    origin + c * (1.0 / (3.0 * a))
}

fn edge_normals(v: &[Vec2]) -> impl Iterator<Item = Vec2> + '_ {
    let n = v.len();
    (0..n).map(move |i| {
        let e = v[(i + 1) % n] - v[i];
        Vec2::new(e.y, -e.x).normalized()
    })
}

fn project(v: &[Vec2], axis: Vec2) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p.dot(axis);
        (lo.min(d), hi.max(d))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn unit_square() -> ConvexPolygon {
        ConvexPolygon::rectangle(1.0, 1.0)
    }

    fn triangle() -> ConvexPolygon {
        ConvexPolygon::from_points(&[Vec2::new(0.0, 0.0), Vec2::new(2.0, 0.0), Vec2::new(0.0, 1.0)])
            .unwrap()
            .0
    }

    #[test]
    fn rejects_bad_polygons() {
        assert_eq!(
            ConvexPolygon::new(vec![Vec2::ZERO, Vec2::new(1.0, 0.0)]),
            Err(GeometryError::TooFewVertices(2))
        );
        let cw: Vec<Vec2> = unit_square().vertices().iter().rev().copied().collect();
        assert_eq!(ConvexPolygon::new(cw), Err(GeometryError::NotConvex));
        let shifted: Vec<Vec2> = unit_square().vertices().iter().map(|v| *v + Vec2::new(1.0, 0.0)).collect();
        assert!(matches!(ConvexPolygon::new(shifted), Err(GeometryError::NotCentered(_))));
    }

    #[test]
    fn identity_pose_keeps_vertices() {
        let sq = unit_square();
        let w = transform_polygon(&sq, &Pose2::IDENTITY);
        assert_eq!(w.vertices, sq.vertices());
    }

    #[test]
    fn translation_shifts_x() {
        let sq = unit_square();
        let w = transform_polygon(&sq, &Pose2::new(1.0, 0.0, 0.0));
        for (a, b) in w.vertices.iter().zip(sq.vertices()) {
            assert_eq!(a.x, b.x + 1.0);
            assert_eq!(a.y, b.y);
        }
    }

    #[test]
    fn quarter_turn_maps_x_y_to_minus_y_x() {
        let tri = triangle();
        let w = transform_polygon(&tri, &Pose2::new(0.0, 0.0, FRAC_PI_2));
        for (a, b) in w.vertices.iter().zip(tri.vertices()) {
            assert_abs_diff_eq!(a.x, -b.y, epsilon = 1e-15);
            assert_abs_diff_eq!(a.y, b.x, epsilon = 1e-15);
        }
        assert!(w.area() > 0.0);
    }

    /// Brute-force MTV: minimum overlap over the projections on all edge
    /// normals of both polygons, computed from scratch.
    fn brute_force_overlap(a: &Polygon, b: &Polygon) -> Option<f64> {
        let mut axes = Vec::new();
        for poly in [a, b] {
            let n = poly.vertices.len();
            for i in 0..n {
                let e = poly.vertices[(i + 1) % n] - poly.vertices[i];
                axes.push(Vec2::new(e.y, -e.x).normalized());
            }
        }
        let mut best = f64::INFINITY;
        for ax in axes {
            let pa: Vec<f64> = a.vertices.iter().map(|p| p.dot(ax)).collect();
            let pb: Vec<f64> = b.vertices.iter().map(|p| p.dot(ax)).collect();
            let amax = pa.iter().cloned().fold(f64::MIN, f64::max);
            let amin = pa.iter().cloned().fold(f64::MAX, f64::min);
            let bmax = pb.iter().cloned().fold(f64::MIN, f64::max);
            let bmin = pb.iter().cloned().fold(f64::MAX, f64::min);
            let overlap = (amax - bmin).min(bmax - amin);
            if overlap <= 0.0 {
                return None;
            }
            best = best.min(overlap);
        }
        Some(best)
    }

    #[test]
    fn distant_squares_do_not_penetrate() {
        let a = transform_polygon(&unit_square(), &Pose2::IDENTITY);
        let b = transform_polygon(&unit_square(), &Pose2::new(5.0, 0.0, 0.0));
        assert!(penetration(&a, &b).is_none());
    }

    #[test]
    fn coincident_squares_have_unit_mtv() {
        let a = transform_polygon(&unit_square(), &Pose2::IDENTITY);
        let oracle = brute_force_overlap(&a, &a).unwrap();
        assert_abs_diff_eq!(oracle, 1.0, epsilon = 1e-12);
        let m = penetration(&a, &a).unwrap();
        assert_abs_diff_eq!(m.depth, 1.0, epsilon = 1e-12);
        assert!(m.normal.x.abs() < 1e-12 || m.normal.y.abs() < 1e-12);
    }

    #[test]
    fn x_overlap_gives_x_mtv() {
        let a = transform_polygon(&unit_square(), &Pose2::IDENTITY);
        let b = transform_polygon(&unit_square(), &Pose2::new(0.8, 0.0, 0.0));
        let oracle = brute_force_overlap(&a, &b).unwrap();
        assert_abs_diff_eq!(oracle, 0.2, epsilon = 1e-12);
        let v = penetration(&a, &b).unwrap().vector();
        assert_abs_diff_eq!(v.x, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(v.y, 0.0, epsilon = 1e-12);
        // moving b along the MTV separates the pair
        let moved = Polygon::new(b.vertices.iter().map(|p| *p + v * (1.0 + 1e-9)).collect());
        assert!(penetration(&a, &moved).is_none());
    }

    #[test]
    fn hull_drops_interior_and_collinear_points() {
        let pts = [
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.5, 0.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(0.0, 1.0),
            Vec2::new(0.5, 0.5),
        ];
        let h = convex_hull(&pts);
        assert_eq!(h.len(), 4);
        assert!(signed_area(&h) > 0.0);
    }

    #[test]
    fn boundary_samples_lie_on_boundary() {
        let p = transform_polygon(&ConvexPolygon::regular(5, 0.04), &Pose2::new(0.1, 0.2, 0.3));
        let s = p.sample_boundary(32);
        assert_eq!(s.len(), 32);
        for q in s {
            assert!(p.contains(q + (q - p.centroid()) * -1e-9));
            assert!(!p.contains_strict(q, 1e-9));
        }
    }

    fn arb_polygon() -> impl Strategy<Value = Polygon> {
        (3usize..8, 0.02..0.08f64, -0.2..0.2f64, -0.2..0.2f64, -3.0..3.0f64).prop_map(|(n, r, x, y, t)| {
            transform_polygon(&ConvexPolygon::regular(n, r), &Pose2::new(x, y, t))
        })
    }

    proptest! {
        #[test]
        fn penetration_depth_is_symmetric(a in arb_polygon(), b in arb_polygon()) {
            let ab = penetration(&a, &b).map(|m| m.depth);
            let ba = penetration(&b, &a).map(|m| m.depth);
            match (ab, ba) {
                (None, None) => {}
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                _ => prop_assert!(false, "asymmetric overlap result"),
            }
            prop_assert_eq!(ab.is_some(), brute_force_overlap(&a, &b).is_some());
        }

        #[test]
        fn hull_of_noisy_points_is_valid_polygon(pts in proptest::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 3..20)) {
            let pts: Vec<Vec2> = pts.into_iter().map(|(x, y)| Vec2::new(x, y)).collect();
            if let Ok((poly, _)) = ConvexPolygon::from_points(&pts) {
                prop_assert!(poly.area() > 0.0);
                prop_assert!(ConvexPolygon::new(poly.vertices().to_vec()).is_ok());
            }
        }
    }
}
