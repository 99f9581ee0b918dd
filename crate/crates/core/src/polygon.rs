//! Planar polygon utilities on floor-plan coordinates `(x, z)`.
//!
//! Intersection area uses the boundary form of Green's theorem: the boundary
//! of `A ∩ B` is the part of `∂A` inside `B`, the part of `∂B` inside `A`,
//! and every shared same-direction edge piece counted once. Summing shoelace
//! terms over those pieces gives the area without building the clipped
//! polygon, which handles concave inputs and collinear overlaps uniformly.

pub type Point = [f64; 2];

/// Distance below which two points or a point and an edge are welded.
pub const WELD_TOL: f64 = 1e-9;

#[inline]
pub fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn lerp(a: Point, b: Point, t: f64) -> Point {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// Shoelace area; positive for counter-clockwise order.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| cross(poly[i], poly[(i + 1) % n])).sum::<f64>() * 0.5
}

fn edges(poly: &[Point]) -> impl Iterator<Item = (Point, Point)> + '_ {
    let n = poly.len();
    (0..n).map(move |i| (poly[i], poly[(i + 1) % n]))
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = lerp(a, b, t);
    (p[0] - q[0]).hypot(p[1] - q[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Containment {
    Inside,
    Outside,
    /// On the given edge (index of its start vertex).
    Boundary(usize),
}

pub fn classify_point(p: Point, poly: &[Point]) -> Containment {
    for (i, (a, b)) in edges(poly).enumerate() {
        if point_segment_distance(p, a, b) <= WELD_TOL {
            return Containment::Boundary(i);
        }
    }
    let mut inside = false;
    for (a, b) in edges(poly) {
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if x > p[0] {
                inside = !inside;
            }
        }
    }
    if inside {
        Containment::Inside
    } else {
        Containment::Outside
    }
}

fn segments_touch(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let o1 = cross(sub(p2, p1), sub(q1, p1));
    let o2 = cross(sub(p2, p1), sub(q2, p1));
    let o3 = cross(sub(q2, q1), sub(p1, q1));
    let o4 = cross(sub(q2, q1), sub(p2, q1));
    if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
        return true;
    }
    point_segment_distance(q1, p1, p2) <= WELD_TOL
        || point_segment_distance(q2, p1, p2) <= WELD_TOL
        || point_segment_distance(p1, q1, q2) <= WELD_TOL
        || point_segment_distance(p2, q1, q2) <= WELD_TOL
}

/// No two non-adjacent edges touch and no edge is degenerate.
pub fn is_simple(poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[0] - b[0]).hypot(a[1] - b[1]) <= WELD_TOL {
            return false;
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_touch(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

/// Nearest positive distance from the origin along unit direction `dir` to
/// the polygon boundary.
pub fn ray_hit(dir: Point, poly: &[Point]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for (a, b) in edges(poly) {
        let e = sub(b, a);
        let denom = cross(dir, e);
        if denom.abs() < 1e-300 {
            continue;
        }
        // origin + t dir = a + s e
        let t = cross(a, e) / denom;
        let s = cross(a, dir) / denom;
        if t > 0.0 && (-1e-12..=1.0 + 1e-12).contains(&s) {
            best = Some(best.map_or(t, |bt: f64| bt.min(t)));
        }
    }
    best
}

/// Split parameters of edge `(p, q)` against every edge of `other`.
fn split_params(p: Point, q: Point, other: &[Point]) -> Vec<f64> {
    let r = sub(q, p);
    let rr = dot(r, r);
    let rlen = rr.sqrt();
    let mut ts = vec![0.0, 1.0];
    for (a, b) in edges(other) {
        let u = sub(b, a);
        let denom = cross(r, u);
        let ap = sub(a, p);
        let ulen = dot(u, u).sqrt();
        if denom.abs() > 1e-12 * rlen * ulen {
            let t = cross(ap, u) / denom;
            let s = cross(ap, r) / denom;
            let (tt, st) = (WELD_TOL / rlen, WELD_TOL / ulen);
            if t >= -tt && t <= 1.0 + tt && s >= -st && s <= 1.0 + st {
                ts.push(t.clamp(0.0, 1.0));
            }
        } else if (cross(ap, r) / rlen).abs() <= WELD_TOL {
            for v in [a, b] {
                let t = dot(sub(v, p), r) / rr;
                if (0.0..=1.0).contains(&t) {
                    ts.push(t);
                }
            }
        }
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup_by(|a, b| (*a - *b) * rlen <= WELD_TOL);
    ts
}

/// Sum of shoelace terms of the pieces of `∂subject` that bound the
/// intersection with `clip`.
fn boundary_contribution(subject: &[Point], clip: &[Point], keep_shared: bool) -> f64 {
    let mut acc = 0.0;
    for (p, q) in edges(subject) {
        let ts = split_params(p, q, clip);
        let dir = sub(q, p);
        for w in ts.windows(2) {
            let (a, b) = (lerp(p, q, w[0]), lerp(p, q, w[1]));
            let mid = lerp(p, q, 0.5 * (w[0] + w[1]));
            let keep = match classify_point(mid, clip) {
                Containment::Inside => true,
                Containment::Outside => false,
                Containment::Boundary(k) => {
                    let e = sub(clip[(k + 1) % clip.len()], clip[k]);
                    keep_shared && dot(e, dir) > 0.0
                }
            };
            if keep {
                acc += 0.5 * cross(a, b);
            }
        }
    }
    acc
}

/// Area of the intersection of two simple counter-clockwise polygons.
pub fn intersection_area(a: &[Point], b: &[Point]) -> f64 {
    let area = boundary_contribution(a, b, true) + boundary_contribution(b, a, false);
    area.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x0: f64, z0: f64, x1: f64, z1: f64) -> Vec<Point> {
        vec![[x0, z0], [x1, z0], [x1, z1], [x0, z1]]
    }

    /// Grid-sampling oracle for intersection area.
    fn sampled_area(a: &[Point], b: &[Point], lo: f64, hi: f64, n: usize) -> f64 {
        let step = (hi - lo) / n as f64;
        let mut count = 0usize;
        for i in 0..n {
            for j in 0..n {
                let p = [lo + (i as f64 + 0.5) * step, lo + (j as f64 + 0.5) * step];
                if classify_point(p, a) == Containment::Inside && classify_point(p, b) == Containment::Inside {
                    count += 1;
                }
            }
        }
        count as f64 * step * step
    }

    #[test]
    fn rectangle_area_and_orientation() {
        let r = rect(-2.0, -3.0, 2.0, 3.0);
        assert_eq!(signed_area(&r), 24.0);
        let mut cw = r.clone();
        cw.reverse();
        assert_eq!(signed_area(&cw), -24.0);
    }

    #[test]
    fn nested_rectangles_share_walls() {
        let a = rect(-2.0, -3.0, 2.0, 3.0);
        let b = rect(-2.0, -3.0, 2.0, 2.0);
        assert!((intersection_area(&a, &b) - 20.0).abs() < 1e-12);
        assert!((intersection_area(&b, &a) - 20.0).abs() < 1e-12);
        assert!((intersection_area(&a, &a) - 24.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_and_touching() {
        let a = rect(0.0, 0.0, 1.0, 1.0);
        let b = rect(1.0, 0.0, 2.0, 1.0);
        let c = rect(3.0, 3.0, 4.0, 4.0);
        assert!(intersection_area(&a, &b).abs() < 1e-12);
        assert!(intersection_area(&a, &c).abs() < 1e-12);
    }

    #[test]
    fn concave_against_oracle() {
        // L-shape and an offset rectangle.
        let l = vec![[0.0, 0.0], [3.0, 0.0], [3.0, 1.0], [1.0, 1.0], [1.0, 3.0], [0.0, 3.0]];
        let r = rect(0.5, 0.5, 2.5, 2.5);
        let exact = intersection_area(&l, &r);
        // L covers [0.5,2.5]x[0.5,1] (1.0) plus [0.5,1]x[1,2.5] (0.75)
        assert!((exact - 1.75).abs() < 1e-12);
        let sampled = sampled_area(&l, &r, -0.1, 3.1, 400);
        assert!((exact - sampled).abs() < 0.02);
    }

    #[test]
    fn rotated_square_overlap() {
        let s = rect(-1.0, -1.0, 1.0, 1.0);
        let d = vec![[0.0, -1.2], [1.2, 0.0], [0.0, 1.2], [-1.2, 0.0]];
        let exact = intersection_area(&s, &d);
        // diamond area 2.88 minus 4 tip triangles outside the square (base 0.4, height 0.2)
        assert!((exact - (2.88 - 4.0 * 0.5 * 0.4 * 0.2)).abs() < 1e-12);
    }

    #[test]
    fn simplicity() {
        assert!(is_simple(&rect(0.0, 0.0, 1.0, 1.0)));
        let bowtie = vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(!is_simple(&bowtie));
        let dup = vec![[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(!is_simple(&dup));
    }

    #[test]
    fn ray_hits_nearest_wall() {
        let r = rect(-2.0, -3.0, 2.0, 3.0);
        assert!((ray_hit([0.0, 1.0], &r).unwrap() - 3.0).abs() < 1e-12);
        assert!((ray_hit([1.0, 0.0], &r).unwrap() - 2.0).abs() < 1e-12);
        let outside = rect(5.0, 5.0, 6.0, 6.0);
        assert!(ray_hit([0.0, -1.0], &outside).is_none());
    }
}
