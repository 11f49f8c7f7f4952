//! Deterministic procedural faces with exact landmarks, plus makeup
//! composition. Stands in for a scraped photo dataset so every downstream
//! training property is testable and reproducible.

mod dataset;

pub use dataset::{
    couples_for_epoch, generate_dataset, load_dataset, load_face, AfterEntry, BeforeEntry,
    Dataset, DatasetManifest, MANIFEST_NAME, MANIFEST_VERSION,
};

use crate::geometry::LandmarkSet;
use crate::imageio::PlainImage;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const MIN_SIDE: usize = 16;
pub const MAX_SIDE: usize = 1024;

/// Identity-level parameters; one seed fully determines a face.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    pub seed: u64,
    pub eye_spacing: f64,
    pub face_rx: f64,
    pub face_ry: f64,
    pub mouth_width: f64,
    pub skin: [f32; 3],
    pub shading: f32,
    pub iris: [f32; 3],
}

impl FaceParams {
    pub fn sample(seed: u64) -> Self {
        let mut rng = crate::rng::stream(seed, "face-params", 0);
        let base = rng.gen_range(0.60..0.85) as f32;
        FaceParams {
            seed,
            eye_spacing: rng.gen_range(0.26..0.34),
            face_rx: rng.gen_range(0.30..0.38),
            face_ry: rng.gen_range(0.40..0.46),
            mouth_width: rng.gen_range(0.16..0.24),
            skin: [base, base * rng.gen_range(0.82..0.92) as f32, base * rng.gen_range(0.68..0.80) as f32],
            shading: rng.gen_range(0.05..0.15) as f32,
            iris: [
                rng.gen_range(0.15..0.45) as f32,
                rng.gen_range(0.20..0.50) as f32,
                rng.gen_range(0.30..0.60) as f32,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleClass {
    None,
    Light,
    Dramatic,
}

impl std::fmt::Display for StyleClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StyleClass::None => "none",
            StyleClass::Light => "light",
            StyleClass::Dramatic => "dramatic",
        };
        f.write_str(s)
    }
}

/// Makeup recipe. `style_class == None` forces every amplitude to zero;
/// `Dramatic` adds striped high-frequency patterns over the cheeks and
/// forehead, well outside the eye and lip regions.
#[derive(Debug, Clone, PartialEq)]
pub struct MakeupParams {
    pub style_class: StyleClass,
    pub eyeshadow: [f32; 3],
    pub lip: [f32; 3],
    pub cheek: [f32; 3],
    pub forehead_tint: [f32; 3],
    pub hf_amplitude: f32,
    pub hf_wavelength: f64,
    pub hf_angle: f64,
}

impl MakeupParams {
    pub fn none() -> Self {
        MakeupParams {
            style_class: StyleClass::None,
            eyeshadow: [0.0; 3],
            lip: [0.0; 3],
            cheek: [0.0; 3],
            forehead_tint: [0.0; 3],
            hf_amplitude: 0.0,
            hf_wavelength: 0.05,
            hf_angle: 0.0,
        }
    }

    pub fn sample(seed: u64, style: StyleClass) -> Self {
        if style == StyleClass::None {
            return Self::none();
        }
        let mut rng = crate::rng::stream(seed, "makeup-params", 0);
        let eyeshadow = [
            rng.gen_range(0.25..0.60) as f32,
            rng.gen_range(0.10..0.35) as f32,
            rng.gen_range(0.40..0.80) as f32,
        ];
        let lip = [
            rng.gen_range(0.55..0.85) as f32,
            rng.gen_range(0.05..0.25) as f32,
            rng.gen_range(0.20..0.45) as f32,
        ];
        let cheek = [
            rng.gen_range(0.60..0.90) as f32,
            rng.gen_range(0.20..0.45) as f32,
            rng.gen_range(0.30..0.55) as f32,
        ];
        let forehead_tint = [
            rng.gen_range(0.20..0.55) as f32,
            rng.gen_range(0.25..0.60) as f32,
            rng.gen_range(0.45..0.85) as f32,
        ];
        let dramatic = style == StyleClass::Dramatic;
        MakeupParams {
            style_class: style,
            eyeshadow,
            lip,
            cheek: if dramatic { cheek } else { [0.0; 3] },
            forehead_tint: if dramatic { forehead_tint } else { [0.0; 3] },
            hf_amplitude: if dramatic { rng.gen_range(0.18..0.32) as f32 } else { 0.0 },
            hf_wavelength: rng.gen_range(0.035..0.060),
            hf_angle: rng.gen_range(0.3..1.2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.style_class == StyleClass::None
            && (self.hf_amplitude != 0.0
                || self.eyeshadow != [0.0; 3]
                || self.lip != [0.0; 3]
                || self.cheek != [0.0; 3]
                || self.forehead_tint != [0.0; 3])
        {
            return Err(Error::Config("no-makeup style must have all amplitudes zero".into()));
        }
        if self.style_class != StyleClass::Dramatic && self.hf_amplitude != 0.0 {
            return Err(Error::Config("high-frequency patterns are dramatic-only".into()));
        }
        Ok(())
    }
}

// ── rendering ───────────────────────────────────────────────────────────

#[inline]
fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f32 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    (t * t * (3.0 - 2.0 * t)) as f32
}

/// Coverage of an ellipse at normalized point (x, y): 1 deep inside, smooth
/// falloff of width `feather` (in units of the normalized ellipse distance).
#[inline]
fn ellipse_alpha(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64, feather: f64) -> f32 {
    let d = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
    smoothstep(1.0 + feather, 1.0 - feather, d)
}

/// Distance from point to segment (ax,ay)-(bx,by).
fn seg_dist(x: f64, y: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let vx = bx - ax;
    let vy = by - ay;
    let len2 = vx * vx + vy * vy;
    let t = if len2 < 1e-12 { 0.0 } else { ((x - ax) * vx + (y - ay) * vy) / len2 }.clamp(0.0, 1.0);
    let px = ax + t * vx;
    let py = ay + t * vy;
    ((x - px).powi(2) + (y - py).powi(2)).sqrt()
}

#[inline]
fn mix(dst: &mut [f32; 3], src: [f32; 3], alpha: f32) {
    for c in 0..3 {
        dst[c] += (src[c] - dst[c]) * alpha;
    }
}

struct FaceGeometry {
    eye_l: [f64; 2],
    eye_r: [f64; 2],
    eye_rx: f64,
    eye_ry: f64,
    mouth: [f64; 2],
    mouth_rx: f64,
    mouth_ry: f64,
    nose_tip: [f64; 2],
    cheek_l: [f64; 2],
    cheek_r: [f64; 2],
    forehead: [f64; 2],
}

fn face_geometry(params: &FaceParams) -> FaceGeometry {
    let sp = params.eye_spacing;
    FaceGeometry {
        eye_l: [0.5 - sp / 2.0, 0.42],
        eye_r: [0.5 + sp / 2.0, 0.42],
        eye_rx: 0.052,
        eye_ry: 0.028,
        mouth: [0.5, 0.70],
        mouth_rx: params.mouth_width / 2.0,
        mouth_ry: 0.032,
        nose_tip: [0.5, 0.545],
        cheek_l: [0.5 - params.face_rx * 0.62, 0.58],
        cheek_r: [0.5 + params.face_rx * 0.62, 0.58],
        forehead: [0.5, 0.52 - params.face_ry * 0.62],
    }
}

fn landmarks_for(params: &FaceParams) -> LandmarkSet {
    let g = face_geometry(params);
    LandmarkSet::new([
        [g.eye_l[0] - g.eye_rx, g.eye_l[1]],
        [g.eye_l[0] + g.eye_rx, g.eye_l[1]],
        [g.eye_l[0], g.eye_l[1] - g.eye_ry],
        [g.eye_l[0], g.eye_l[1] + g.eye_ry],
        [g.eye_r[0] + g.eye_rx, g.eye_r[1]],
        [g.eye_r[0] - g.eye_rx, g.eye_r[1]],
        [g.eye_r[0], g.eye_r[1] - g.eye_ry],
        [g.eye_r[0], g.eye_r[1] + g.eye_ry],
        [g.nose_tip[0] - 0.035, g.nose_tip[1] + 0.02],
        g.nose_tip,
        [g.nose_tip[0] + 0.035, g.nose_tip[1] + 0.02],
        [g.mouth[0] - g.mouth_rx, g.mouth[1]],
        [g.mouth[0] + g.mouth_rx, g.mouth[1]],
        [g.mouth[0], g.mouth[1] - g.mouth_ry - 0.004],
        g.mouth,
        g.cheek_l,
        g.cheek_r,
        g.forehead,
    ])
    .expect("procedural landmarks are in range by construction")
}

/// Renders the no-makeup face and its exact landmarks. Accepts any side in
/// [16, 1024]; tiny sides exist for fast gradient-check and smoke configs.
pub fn render_face(params: &FaceParams, image_side: usize) -> Result<(PlainImage, LandmarkSet)> {
    if !(MIN_SIDE..=MAX_SIDE).contains(&image_side) {
        return Err(Error::Config(format!(
            "image side {image_side} outside supported range [{MIN_SIDE}, {MAX_SIDE}]"
        )));
    }
    let g = face_geometry(params);
    let lm = landmarks_for(params);
    let last = (image_side - 1) as f64;
    let mut img = PlainImage::new(image_side);

    let brow_dy = 0.055;
    let skin = params.skin;
    for py in 0..image_side {
        for px in 0..image_side {
            let x = px as f64 / last;
            let y = py as f64 / last;
            // background: gentle vertical wash
            let mut col = [
                0.16 + 0.06 * y as f32,
                0.18 + 0.05 * y as f32,
                0.24 + 0.05 * y as f32,
            ];
            // head ellipse with soft edge and low-frequency shading
            let head = ellipse_alpha(x, y, 0.5, 0.52, params.face_rx, params.face_ry, 0.10);
            if head > 0.0 {
                let r2 = ((x - 0.5) / params.face_rx).powi(2) + ((y - 0.52) / params.face_ry).powi(2);
                let lowfreq = (std::f64::consts::PI * 1.3 * (x - 0.5)).cos()
                    * (std::f64::consts::PI * 1.1 * (y - 0.52)).cos();
                let shade = 1.0 - params.shading * (0.6 * r2 as f32) + params.shading * 0.25 * lowfreq as f32;
                let tone = [skin[0] * shade, skin[1] * shade, skin[2] * shade];
                mix(&mut col, tone, head);
            }
            // nose: soft ridge shading plus nostril dots
            let nd = seg_dist(x, y, 0.5, 0.50, 0.5, g.nose_tip[1] + 0.015);
            let nose_a = smoothstep(0.016, 0.004, nd) * 0.5;
            if nose_a > 0.0 {
                let tone = [skin[0] * 0.90, skin[1] * 0.88, skin[2] * 0.86];
                mix(&mut col, tone, nose_a * head);
            }
            for sx in [-1.0, 1.0] {
                let a = ellipse_alpha(x, y, 0.5 + sx * 0.022, g.nose_tip[1] + 0.028, 0.007, 0.005, 0.4);
                mix(&mut col, [skin[0] * 0.55, skin[1] * 0.52, skin[2] * 0.50], a * 0.8);
            }
            // eyes: sclera, iris, pupil, brow, lash strokes
            for eye in [g.eye_l, g.eye_r] {
                let sclera = ellipse_alpha(x, y, eye[0], eye[1], g.eye_rx, g.eye_ry, 0.15);
                if sclera > 0.0 {
                    mix(&mut col, [0.93, 0.93, 0.90], sclera);
                    let iris = ellipse_alpha(x, y, eye[0], eye[1], 0.016, 0.016, 0.3);
                    mix(&mut col, params.iris, iris);
                    let pupil = ellipse_alpha(x, y, eye[0], eye[1], 0.0065, 0.0065, 0.4);
                    mix(&mut col, [0.05, 0.05, 0.06], pupil);
                }
                // brow: darker capsule above the eye
                let bd = seg_dist(x, y, eye[0] - 0.045, eye[1] - brow_dy, eye[0] + 0.045, eye[1] - brow_dy + 0.004);
                let brow = smoothstep(0.011, 0.004, bd);
                mix(&mut col, [skin[0] * 0.40, skin[1] * 0.38, skin[2] * 0.36], brow * 0.85);
                // three lash strokes fanning from the upper lid
                for (i, tilt) in [-0.02f64, 0.0, 0.02].iter().enumerate() {
                    let bx = eye[0] - 0.02 + 0.02 * i as f64;
                    let by = eye[1] - g.eye_ry;
                    let ld = seg_dist(x, y, bx, by, bx + tilt, by - 0.018);
                    let lash = smoothstep(0.0045, 0.0015, ld);
                    mix(&mut col, [0.08, 0.08, 0.09], lash * 0.7);
                }
            }
            // mouth: lip ellipse with a darker crease line
            let lip = ellipse_alpha(x, y, g.mouth[0], g.mouth[1], g.mouth_rx, g.mouth_ry, 0.12);
            if lip > 0.0 {
                mix(&mut col, [0.62, 0.33, 0.34], lip * 0.9);
                let cd = seg_dist(
                    x,
                    y,
                    g.mouth[0] - g.mouth_rx * 0.8,
                    g.mouth[1],
                    g.mouth[0] + g.mouth_rx * 0.8,
                    g.mouth[1],
                );
                let crease = smoothstep(0.005, 0.0015, cd);
                mix(&mut col, [0.38, 0.18, 0.20], crease * lip);
            }
            for c in 0..3 {
                img.set(c, py, px, col[c].clamp(0.0, 1.0));
            }
        }
    }
    Ok((img, lm))
}

// ── makeup regions (shared by the compositor and its tests) ─────────────

#[derive(Debug, Clone, Copy)]
pub struct Region {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Region {
    /// Normalized squared ellipse distance; < 1 means inside the support.
    pub fn dist(&self, x: f64, y: f64) -> f64 {
        ((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2)
    }
}

pub fn eye_regions(lm: &LandmarkSet) -> [Region; 2] {
    let make = |outer: [f64; 2], inner: [f64; 2], top: [f64; 2], bottom: [f64; 2]| {
        let cx = (outer[0] + inner[0]) / 2.0;
        let cy = (top[1] + bottom[1]) / 2.0;
        let rx = (outer[0] - inner[0]).abs() / 2.0 * 2.3;
        let ry = (bottom[1] - top[1]).abs() / 2.0 * 3.2;
        Region { cx, cy: cy - ry * 0.18, rx, ry }
    };
    let p = lm.points();
    [make(p[0], p[1], p[2], p[3]), make(p[4], p[5], p[6], p[7])]
}

pub fn lip_region(lm: &LandmarkSet) -> Region {
    let p = lm.points();
    let rx = (p[12][0] - p[11][0]).abs() / 2.0 * 1.15;
    let ry = (p[14][1] - p[13][1]).abs() * 1.6;
    Region { cx: p[14][0], cy: p[14][1], rx, ry: ry.max(0.02) }
}

pub fn cheek_regions(lm: &LandmarkSet) -> [Region; 2] {
    let p = lm.points();
    [
        Region { cx: p[15][0], cy: p[15][1], rx: 0.11, ry: 0.10 },
        Region { cx: p[16][0], cy: p[16][1], rx: 0.11, ry: 0.10 },
    ]
}

pub fn forehead_region(lm: &LandmarkSet) -> Region {
    let p = lm.points();
    Region { cx: p[17][0], cy: p[17][1] + 0.04, rx: 0.15, ry: 0.08 }
}

/// Composites makeup onto a rendered face. Light styles touch only the eye
/// and lip regions; dramatic styles additionally paint striped patterns on
/// the cheeks and forehead. Geometry and landmarks are unchanged.
pub fn apply_makeup(image: &PlainImage, lm: &LandmarkSet, makeup: &MakeupParams) -> PlainImage {
    if makeup.style_class == StyleClass::None {
        return image.clone();
    }
    let side = image.side();
    let last = (side - 1) as f64;
    let mut out = image.clone();
    let eyes = eye_regions(lm);
    let lips = lip_region(lm);
    let cheeks = cheek_regions(lm);
    let forehead = forehead_region(lm);
    let dramatic = makeup.style_class == StyleClass::Dramatic;
    let (sin_a, cos_a) = makeup.hf_angle.sin_cos();
    for py in 0..side {
        for px in 0..side {
            let x = px as f64 / last;
            let y = py as f64 / last;
            let mut col = [out.get(0, py, px), out.get(1, py, px), out.get(2, py, px)];
            for r in &eyes {
                let d = r.dist(x, y);
                if d < 1.0 {
                    let a = (1.0 - d) as f32 * if dramatic { 0.75 } else { 0.45 };
                    mix(&mut col, makeup.eyeshadow, a);
                }
            }
            let dl = lips.dist(x, y);
            if dl < 1.0 {
                let a = (1.0 - dl) as f32 * if dramatic { 0.9 } else { 0.65 };
                mix(&mut col, makeup.lip, a);
            }
            if dramatic {
                let phase = (x * cos_a + y * sin_a) / makeup.hf_wavelength * std::f64::consts::TAU;
                let stripe = 0.5 + 0.5 * phase.sin() as f32;
                for r in &cheeks {
                    let d = r.dist(x, y);
                    if d < 1.0 {
                        let a = (1.0 - d) as f32 * makeup.hf_amplitude * (0.35 + stripe);
                        mix(&mut col, makeup.cheek, a.min(1.0));
                    }
                }
                let df = forehead.dist(x, y);
                if df < 1.0 {
                    let a = (1.0 - df) as f32 * makeup.hf_amplitude * (0.35 + stripe);
                    mix(&mut col, makeup.forehead_tint, a.min(1.0));
                }
            }
            for c in 0..3 {
                out.set(c, py, px, col[c].clamp(0.0, 1.0));
            }
        }
    }
    out
}
