//! Landmark-driven geometry: patch layout for the local discriminators,
//! piecewise-affine warp-and-blend guidance images, and frontalization.
//!
//! Landmark schema (18 named points, normalized [0,1] coordinates, y down):
//! four per eye (`eye_{l,r}_{outer,inner,top,bottom}`), three nose
//! (`nose_left`, `nose_tip`, `nose_right`), four mouth (`mouth_left`,
//! `mouth_right`, `mouth_top`, `mouth_center`), two cheeks, one forehead.
//! Eight implicit border anchors (corners and edge midpoints) are appended
//! for triangulation so the mesh covers the whole frame.

mod delaunay;
mod frontal;
mod warp;

pub use delaunay::{convex_hull, convex_hull_area, delaunay_triangulate, TriangleMesh};
pub use frontal::{frontalize, SimilarityTransform, CANONICAL_EYE_L, CANONICAL_EYE_R, CANONICAL_MOUTH};
pub use warp::{hull_mask, warp_blend};

use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

pub const LANDMARK_NAMES: [&str; 18] = [
    "eye_l_outer",
    "eye_l_inner",
    "eye_l_top",
    "eye_l_bottom",
    "eye_r_outer",
    "eye_r_inner",
    "eye_r_top",
    "eye_r_bottom",
    "nose_left",
    "nose_tip",
    "nose_right",
    "mouth_left",
    "mouth_right",
    "mouth_top",
    "mouth_center",
    "cheek_left",
    "cheek_right",
    "forehead",
];

/// Eight border anchors: corners plus edge midpoints, fixed for every image.
pub const BORDER_ANCHORS: [[f64; 2]; 8] = [
    [0.0, 0.0],
    [0.5, 0.0],
    [1.0, 0.0],
    [0.0, 0.5],
    [1.0, 0.5],
    [0.0, 1.0],
    [0.5, 1.0],
    [1.0, 1.0],
];

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: [[f64; 2]; 18],
}

impl LandmarkSet {
    pub fn new(points: [[f64; 2]; 18]) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(p[0].is_finite() && p[1].is_finite())
                || p[0] < 0.0
                || p[0] > 1.0
                || p[1] < 0.0
                || p[1] > 1.0
            {
                return Err(Error::Geometry(format!(
                    "landmark {} = ({}, {}) outside [0,1]",
                    LANDMARK_NAMES[i], p[0], p[1]
                )));
            }
        }
        let set = LandmarkSet { points };
        let (l, r) = (set.eye_l_centroid(), set.eye_r_centroid());
        if l[0] >= r[0] {
            return Err(Error::Geometry(format!(
                "left eye centroid x {} not left of right eye centroid x {}",
                l[0], r[0]
            )));
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Option<[f64; 2]> {
        LANDMARK_NAMES.iter().position(|n| *n == name).map(|i| self.points[i])
    }

    pub fn points(&self) -> &[[f64; 2]; 18] {
        &self.points
    }

    pub fn eye_l_centroid(&self) -> [f64; 2] {
        centroid(&self.points[0..4])
    }

    pub fn eye_r_centroid(&self) -> [f64; 2] {
        centroid(&self.points[4..8])
    }

    /// Landmarks plus the eight border anchors, in a fixed order, as used by
    /// the triangulation.
    pub fn with_border_anchors(&self) -> Vec<[f64; 2]> {
        let mut pts: Vec<[f64; 2]> = self.points.to_vec();
        pts.extend_from_slice(&BORDER_ANCHORS);
        pts
    }

    /// Resolves a patch anchor, which is either a landmark or one of the
    /// derived points used by the K=12 layout.
    pub fn anchor(&self, name: &str) -> Result<[f64; 2]> {
        if let Some(p) = self.get(name) {
            return Ok(p);
        }
        let el = self.eye_l_centroid();
        let er = self.eye_r_centroid();
        let p = match name {
            "inter_eye" => [(el[0] + er[0]) / 2.0, (el[1] + er[1]) / 2.0],
            "brow_left" => offset(self.points[2], 0.0, -0.06),
            "brow_right" => offset(self.points[6], 0.0, -0.06),
            "chin_left" => offset(self.points[11], 0.0, 0.10),
            "chin_right" => offset(self.points[12], 0.0, 0.10),
            _ => return Err(Error::Geometry(format!("unknown anchor {name}"))),
        };
        Ok(p)
    }

    /// Writes the sidecar format: 18 lines of "name x y", LF endings.
    pub fn to_sidecar(&self) -> String {
        let mut out = String::new();
        for (name, p) in LANDMARK_NAMES.iter().zip(&self.points) {
            writeln!(out, "{name} {} {}", p[0], p[1]).expect("string write");
        }
        out
    }

    pub fn from_sidecar(text: &str, file: &Path) -> Result<Self> {
        let parse_err = |msg: String| Error::Parse { file: file.to_path_buf(), msg };
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() != 18 {
            return Err(parse_err(format!("expected 18 landmark lines, found {}", lines.len())));
        }
        let mut points = [[f64::NAN; 2]; 18];
        let mut seen = [false; 18];
        for line in lines {
            let mut it = line.split_whitespace();
            let name = it.next().ok_or_else(|| parse_err("empty line".into()))?;
            let idx = LANDMARK_NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| parse_err(format!("unknown landmark name {name}")))?;
            if seen[idx] {
                return Err(parse_err(format!("duplicate landmark {name}")));
            }
            let x: f64 = it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err(format!("bad x for {name}")))?;
            let y: f64 = it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err(format!("bad y for {name}")))?;
            if it.next().is_some() {
                return Err(parse_err(format!("trailing fields for {name}")));
            }
            points[idx] = [x, y];
            seen[idx] = true;
        }
        LandmarkSet::new(points).map_err(|e| parse_err(e.to_string()))
    }

    pub fn save_sidecar(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_sidecar()).map_err(|e| Error::io(path, e))
    }

    pub fn load_sidecar(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_sidecar(&text, path)
    }
}

fn centroid(pts: &[[f64; 2]]) -> [f64; 2] {
    let mut c = [0.0, 0.0];
    for p in pts {
        c[0] += p[0];
        c[1] += p[1];
    }
    [c[0] / pts.len() as f64, c[1] / pts.len() as f64]
}

fn offset(p: [f64; 2], dx: f64, dy: f64) -> [f64; 2] {
    [(p[0] + dx).clamp(0.0, 1.0), (p[1] + dy).clamp(0.0, 1.0)]
}

/// Axis-aligned square patch in pixel units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchBox {
    pub left: usize,
    pub top: usize,
    pub side: usize,
    pub anchor: String,
}

impl PatchBox {
    pub fn overlaps(&self, other: &PatchBox) -> bool {
        self.left < other.left + other.side
            && other.left < self.left + self.side
            && self.top < other.top + other.side
            && other.top < self.top + self.side
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchLayout {
    pub image_side: usize,
    pub boxes: Vec<PatchBox>,
}

impl PatchLayout {
    pub fn k(&self) -> usize {
        self.boxes.len()
    }

    pub fn patch_side(&self) -> usize {
        self.boxes.first().map_or(0, |b| b.side)
    }
}

/// Patch side: 0.2 of the image side, rounded to the nearest even integer.
pub fn patch_side_for(image_side: usize) -> usize {
    let target = 0.2 * image_side as f64;
    let side = 2 * ((target / 2.0).round() as usize);
    side.max(2)
}

/// Anchor names for each supported K, in expanding-coverage order.
pub fn anchors_for_k(k: usize) -> Result<Vec<&'static str>> {
    let twelve = [
        "eye_l_top",
        "eye_r_top",
        "mouth_center",
        "nose_tip",
        "cheek_left",
        "cheek_right",
        "forehead",
        "inter_eye",
        "brow_left",
        "brow_right",
        "chin_left",
        "chin_right",
    ];
    match k {
        3 | 6 | 12 => Ok(twelve[..k].to_vec()),
        _ => Err(Error::Config(format!("unsupported local discriminator count K={k}; use 3, 6 or 12"))),
    }
}

/// Anchors whose patches sit on the eye region; these get the stronger
/// Laplacian-matching weight and the weaker smoothing weight.
pub fn is_eye_anchor(name: &str) -> bool {
    matches!(name, "eye_l_top" | "eye_r_top" | "brow_left" | "brow_right")
}

pub fn place_patches(landmarks: &LandmarkSet, k: usize, image_side: usize) -> Result<PatchLayout> {
    let names = anchors_for_k(k)?;
    let side = patch_side_for(image_side);
    if side > image_side {
        return Err(Error::Geometry(format!(
            "patch side {side} exceeds image side {image_side}"
        )));
    }
    let mut boxes = Vec::with_capacity(k);
    for name in names {
        let a = landmarks.anchor(name)?;
        let cx = (a[0] * image_side as f64).round() as isize;
        let cy = (a[1] * image_side as f64).round() as isize;
        let max_corner = (image_side - side) as isize;
        let left = (cx - (side / 2) as isize).clamp(0, max_corner) as usize;
        let top = (cy - (side / 2) as isize).clamp(0, max_corner) as usize;
        boxes.push(PatchBox { left, top, side, anchor: name.to_string() });
    }
    Ok(PatchLayout { image_side, boxes })
}

#[cfg(test)]
pub(crate) mod tests;
