//! Bowyer-Watson Delaunay triangulation in f64 for small point sets.

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 2]>,
    /// Index triples, counterclockwise.
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn total_area(&self) -> f64 {
        self.triangles.iter().map(|t| triangle_area(self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]])).sum()
    }

    /// Locates the triangle containing `p` and returns (index, barycentric
    /// coordinates). Points on shared edges resolve to the first match.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        const EPS: f64 = 1e-9;
        for (i, t) in self.triangles.iter().enumerate() {
            let (a, b, c) = (self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]);
            if let Some(bary) = barycentric(p, a, b, c) {
                if bary[0] >= -EPS && bary[1] >= -EPS && bary[2] >= -EPS {
                    return Some((i, bary));
                }
            }
        }
        None
    }
}

pub fn triangle_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs()
}

fn barycentric(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> Option<[f64; 3]> {
    let den = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
    if den.abs() < 1e-300 {
        return None;
    }
    let l0 = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / den;
    let l1 = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / den;
    Some([l0, l1, 1.0 - l0 - l1])
}

/// Strict in-circumcircle predicate for a counterclockwise triangle (a,b,c).
fn in_circumcircle(a: [f64; 2], b: [f64; 2], c: [f64; 2], p: [f64; 2]) -> bool {
    let ax = a[0] - p[0];
    let ay = a[1] - p[1];
    let bx = b[0] - p[0];
    let by = b[1] - p[1];
    let cx = c[0] - p[0];
    let cy = c[1] - p[1];
    let det = (ax * ax + ay * ay) * (bx * cy - cx * by)
        - (bx * bx + by * by) * (ax * cy - cx * ay)
        + (cx * cx + cy * cy) * (ax * by - bx * ay);
    det > 1e-12
}

fn ccw(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Triangulates `points`; requires at least 3 points not all collinear.
/// Duplicate points (closer than 1e-12) are rejected.
pub fn delaunay_triangulate(points: &[[f64; 2]]) -> Result<TriangleMesh> {
    if points.len() < 3 {
        return Err(Error::Geometry(format!(
            "triangulation needs at least 3 points, got {}",
            points.len()
        )));
    }
    for (i, p) in points.iter().enumerate() {
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err(Error::Geometry(format!("point {i} is not finite")));
        }
        for (j, q) in points.iter().enumerate().take(i) {
            if (p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12 {
                return Err(Error::Geometry(format!("points {j} and {i} coincide")));
            }
        }
    }
    let collinear = {
        let a = points[0];
        let mut all = true;
        for i in 1..points.len() {
            for j in (i + 1)..points.len() {
                if ccw(a, points[i], points[j]).abs() > 1e-12 {
                    all = false;
                    break;
                }
            }
            if !all {
                break;
            }
        }
        all
    };
    if collinear {
        return Err(Error::Geometry("all points are collinear".into()));
    }

    // Bounding super-triangle far outside the data.
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in points {
        min_x = min_x.min(p[0]);
        min_y = min_y.min(p[1]);
        max_x = max_x.max(p[0]);
        max_y = max_y.max(p[1]);
    }
    let span = (max_x - min_x).max(max_y - min_y).max(1e-6);
    let cx = (min_x + max_x) / 2.0;
    let cy = (min_y + max_y) / 2.0;
    let s0 = [cx - 20.0 * span, cy - 10.0 * span];
    let s1 = [cx + 20.0 * span, cy - 10.0 * span];
    let s2 = [cx, cy + 20.0 * span];

    let mut vertices: Vec<[f64; 2]> = points.to_vec();
    let n = vertices.len();
    vertices.push(s0);
    vertices.push(s1);
    vertices.push(s2);
    let mut tris: Vec<[usize; 3]> = vec![[n, n + 1, n + 2]];

    for (pi, p) in points.iter().enumerate() {
        let mut bad = Vec::new();
        for (ti, t) in tris.iter().enumerate() {
            let (a, b, c) = (vertices[t[0]], vertices[t[1]], vertices[t[2]]);
            // orient counterclockwise before the predicate
            let (a, b, c) = if ccw(a, b, c) >= 0.0 { (a, b, c) } else { (a, c, b) };
            if in_circumcircle(a, b, c, *p) {
                bad.push(ti);
            }
        }
        // boundary = edges of the cavity that belong to exactly one bad triangle
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for &ti in &bad {
            let t = tris[ti];
            for e in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = (e.0.min(e.1), e.0.max(e.1));
                if let Some(pos) = edges.iter().position(|&(x, y)| (x, y) == key) {
                    edges.remove(pos);
                } else {
                    edges.push(key);
                }
            }
        }
        for &ti in bad.iter().rev() {
            tris.swap_remove(ti);
        }
        for (u, v) in edges {
            let (a, b) = (vertices[u], vertices[v]);
            let tri = if ccw(a, b, *p) >= 0.0 { [u, v, pi] } else { [v, u, pi] };
            tris.push(tri);
        }
    }

    tris.retain(|t| t.iter().all(|&i| i < n));
    // drop degenerate slivers that can appear from near-collinear inputs
    tris.retain(|t| triangle_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]) > 1e-9);
    vertices.truncate(n);
    if tris.is_empty() {
        return Err(Error::Geometry("triangulation produced no triangles".into()));
    }
    // fix orientation to counterclockwise
    for t in &mut tris {
        if ccw(vertices[t[0]], vertices[t[1]], vertices[t[2]]) < 0.0 {
            t.swap(1, 2);
        }
    }
    Ok(TriangleMesh { vertices, triangles: tris })
}

/// Area of the convex hull of `points` (monotone chain + shoelace).
pub fn convex_hull_area(points: &[[f64; 2]]) -> f64 {
    let hull = convex_hull(points);
    let mut acc = 0.0;
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    acc.abs() / 2.0
}

/// Convex hull, counterclockwise, first point not repeated.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap().then(a[1].partial_cmp(&b[1]).unwrap()));
    pts.dedup_by(|a, b| (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && ccw(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && ccw(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}
