//! Piecewise-affine warping and the feathered-hull blend that builds the
//! makeup guidance image W(source, reference).

use super::delaunay::{convex_hull, delaunay_triangulate};
use super::LandmarkSet;
use crate::imageio::PlainImage;
use crate::{Error, Result};

/// Feathered convex-hull alpha mask over the 18 landmarks: 1 on the hull
/// eroded by 4% of the image side, falling linearly to 0 at the hull edge.
pub fn hull_mask(landmarks: &LandmarkSet, side: usize) -> Vec<f32> {
    let last = (side - 1) as f64;
    let pts: Vec<[f64; 2]> =
        landmarks.points().iter().map(|p| [p[0] * last, p[1] * last]).collect();
    let hull = convex_hull(&pts);
    let erode = 0.04 * side as f64;
    let mut mask = vec![0.0f32; side * side];
    if hull.len() < 3 {
        return mask;
    }
    // inward distance to the hull: min over edges of the signed distance to
    // the edge line, positive inside (hull is counterclockwise, y down flips
    // nothing as long as we measure against the actual orientation)
    let mut edges = Vec::with_capacity(hull.len());
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let ex = b[0] - a[0];
        let ey = b[1] - a[1];
        let len = (ex * ex + ey * ey).sqrt().max(1e-12);
        // inward normal for a counterclockwise polygon in screen coordinates
        edges.push((a, [-ey / len, ex / len]));
    }
    // orientation check: centroid must have positive distance on every edge
    let c = {
        let mut c = [0.0, 0.0];
        for p in &hull {
            c[0] += p[0];
            c[1] += p[1];
        }
        [c[0] / hull.len() as f64, c[1] / hull.len() as f64]
    };
    let flip = edges
        .iter()
        .map(|(a, n)| (c[0] - a[0]) * n[0] + (c[1] - a[1]) * n[1])
        .fold(f64::MAX, f64::min)
        < 0.0;
    for y in 0..side {
        for x in 0..side {
            let p = [x as f64, y as f64];
            let mut d = f64::MAX;
            for (a, n) in &edges {
                let mut v = (p[0] - a[0]) * n[0] + (p[1] - a[1]) * n[1];
                if flip {
                    v = -v;
                }
                d = d.min(v);
            }
            mask[y * side + x] = (d / erode).clamp(0.0, 1.0) as f32;
        }
    }
    mask
}

/// Warps `reference` so its landmarks coincide with `source`'s, then blends
/// it over `source` with the feathered hull mask. Plain-image guidance; no
/// gradients flow through this.
pub fn warp_blend(
    source: &PlainImage,
    source_lm: &LandmarkSet,
    reference: &PlainImage,
    reference_lm: &LandmarkSet,
) -> Result<PlainImage> {
    if source.side() != reference.side() {
        return Err(Error::Geometry(format!(
            "warp_blend resolution mismatch: {} vs {}",
            source.side(),
            reference.side()
        )));
    }
    let side = source.side();
    let last = (side - 1) as f64;
    let src_pts = source_lm.with_border_anchors();
    let ref_pts = reference_lm.with_border_anchors();
    let mesh = delaunay_triangulate(&src_pts)?;

    // Per-pixel: find the source-frame triangle, map barycentrically to the
    // reference frame, sample bilinearly.
    let mut warped = PlainImage::new(side);
    for y in 0..side {
        for x in 0..side {
            let p = [x as f64 / last, y as f64 / last];
            let (ti, bary) = match mesh.locate(p) {
                Some(hit) => hit,
                // numeric edge slip at the frame border: clamp inward slightly
                None => {
                    let q = [p[0].clamp(1e-6, 1.0 - 1e-6), p[1].clamp(1e-6, 1.0 - 1e-6)];
                    mesh.locate(q).ok_or_else(|| {
                        Error::Geometry(format!("pixel ({x},{y}) not covered by the warp mesh"))
                    })?
                }
            };
            let t = mesh.triangles[ti];
            let mut rx = 0.0;
            let mut ry = 0.0;
            for (w, &vi) in bary.iter().zip(&t) {
                rx += w * ref_pts[vi][0];
                ry += w * ref_pts[vi][1];
            }
            for c in 0..3 {
                let v = reference.sample_bilinear(c, rx * last, ry * last);
                warped.set(c, y, x, v);
            }
        }
    }

    let mask = hull_mask(source_lm, side);
    let mut out = PlainImage::new(side);
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                let a = mask[y * side + x];
                let v = a * warped.get(c, y, x) + (1.0 - a) * source.get(c, y, x);
                out.set(c, y, x, v);
            }
        }
    }
    Ok(out)
}
