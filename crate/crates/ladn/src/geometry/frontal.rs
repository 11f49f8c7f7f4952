//! Similarity-transform frontalization: least-squares fit of the two eye
//! centroids and the mouth center onto fixed canonical positions.

use super::LandmarkSet;
use crate::imageio::PlainImage;
use crate::{Error, Result};

pub const CANONICAL_EYE_L: [f64; 2] = [0.35, 0.40];
pub const CANONICAL_EYE_R: [f64; 2] = [0.65, 0.40];
pub const CANONICAL_MOUTH: [f64; 2] = [0.50, 0.72];

/// q = [a -b; b a] p + [tx, ty]: rotation + uniform scale + translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform { a: 1.0, b: 0.0, tx: 0.0, ty: 0.0 }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [self.a * p[0] - self.b * p[1] + self.tx, self.b * p[0] + self.a * p[1] + self.ty]
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.a * self.a + self.b * self.b;
        if det < 1e-12 {
            return Err(Error::Geometry("similarity transform is not invertible".into()));
        }
        let ia = self.a / det;
        let ib = -self.b / det;
        Ok(SimilarityTransform {
            a: ia,
            b: ib,
            tx: -(ia * self.tx - ib * self.ty),
            ty: -(ib * self.tx + ia * self.ty),
        })
    }

    /// Deviation from the identity, as max over the unit square corners of
    /// the displacement magnitude (normalized units).
    pub fn deviation_from_identity(&self) -> f64 {
        [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
            .iter()
            .map(|&p| {
                let q = self.apply(p);
                ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Resamples the image under the transform: output(q) = input(T⁻¹ q),
    /// bilinear, edge-clamped.
    pub fn warp_image(&self, image: &PlainImage) -> Result<PlainImage> {
        let inv = self.inverse()?;
        let side = image.side();
        let last = (side - 1) as f64;
        let mut out = PlainImage::new(side);
        for y in 0..side {
            for x in 0..side {
                let q = [x as f64 / last, y as f64 / last];
                let p = inv.apply(q);
                for c in 0..3 {
                    out.set(c, y, x, image.sample_bilinear(c, p[0] * last, p[1] * last));
                }
            }
        }
        Ok(out)
    }
}

/// Least-squares similarity (no reflection) mapping `src` points to `dst`.
fn fit_similarity(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<SimilarityTransform> {
    assert_eq!(src.len(), dst.len());
    let n = src.len() as f64;
    let mut pc = [0.0, 0.0];
    let mut qc = [0.0, 0.0];
    for (p, q) in src.iter().zip(dst) {
        pc[0] += p[0];
        pc[1] += p[1];
        qc[0] += q[0];
        qc[1] += q[1];
    }
    pc = [pc[0] / n, pc[1] / n];
    qc = [qc[0] / n, qc[1] / n];
    let mut dot = 0.0;
    let mut cross = 0.0;
    let mut norm = 0.0;
    for (p, q) in src.iter().zip(dst) {
        let pd = [p[0] - pc[0], p[1] - pc[1]];
        let qd = [q[0] - qc[0], q[1] - qc[1]];
        dot += pd[0] * qd[0] + pd[1] * qd[1];
        cross += pd[0] * qd[1] - pd[1] * qd[0];
        norm += pd[0] * pd[0] + pd[1] * pd[1];
    }
    if norm < 1e-12 {
        return Err(Error::Geometry("degenerate landmark configuration: anchors coincide".into()));
    }
    let a = dot / norm;
    let b = cross / norm;
    Ok(SimilarityTransform {
        a,
        b,
        tx: qc[0] - (a * pc[0] - b * pc[1]),
        ty: qc[1] - (b * pc[0] + a * pc[1]),
    })
}

/// Canonicalizes pose: fits eye centroids and mouth center to the canonical
/// anchor positions, resamples the image, and returns the transformed
/// landmarks plus the inverse transform for mapping outputs back.
pub fn frontalize(
    image: &PlainImage,
    landmarks: &LandmarkSet,
) -> Result<(PlainImage, LandmarkSet, SimilarityTransform)> {
    let src = [
        landmarks.eye_l_centroid(),
        landmarks.eye_r_centroid(),
        landmarks.get("mouth_center").expect("schema constant"),
    ];
    let dst = [CANONICAL_EYE_L, CANONICAL_EYE_R, CANONICAL_MOUTH];
    let t = fit_similarity(&src, &dst)?;
    let out_img = t.warp_image(image)?;
    let mut pts = [[0.0; 2]; 18];
    for (i, p) in landmarks.points().iter().enumerate() {
        let q = t.apply(*p);
        // mild clamp: a valid face stays inside; guard against border spill
        pts[i] = [q[0].clamp(0.0, 1.0), q[1].clamp(0.0, 1.0)];
    }
    let out_lm = LandmarkSet::new(pts).map_err(|e| {
        Error::Geometry(format!("frontalization produced invalid landmarks ({e})"))
    })?;
    Ok((out_img, out_lm, t.inverse()?))
}
