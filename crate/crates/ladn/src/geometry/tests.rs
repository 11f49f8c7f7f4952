use super::*;
use crate::imageio::PlainImage;
use rand::Rng;
use std::path::Path;

/// Canonical-pose landmark fixture: eye centroids at (0.35, 0.40) and
/// (0.65, 0.40), mouth center at (0.50, 0.72).
pub(crate) fn face_landmarks() -> LandmarkSet {
    LandmarkSet::new([
        [0.29, 0.40], // eye_l_outer
        [0.41, 0.40], // eye_l_inner
        [0.35, 0.37], // eye_l_top
        [0.35, 0.43], // eye_l_bottom
        [0.71, 0.40], // eye_r_outer
        [0.59, 0.40], // eye_r_inner
        [0.65, 0.37], // eye_r_top
        [0.65, 0.43], // eye_r_bottom
        [0.46, 0.56], // nose_left
        [0.50, 0.54], // nose_tip
        [0.54, 0.56], // nose_right
        [0.40, 0.72], // mouth_left
        [0.60, 0.72], // mouth_right
        [0.50, 0.68], // mouth_top
        [0.50, 0.72], // mouth_center
        [0.26, 0.58], // cheek_left
        [0.74, 0.58], // cheek_right
        [0.50, 0.20], // forehead
    ])
    .unwrap()
}

fn smooth_test_image(side: usize) -> PlainImage {
    let mut img = PlainImage::new(side);
    let s = side as f32;
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                let fx = x as f32 / s;
                let fy = y as f32 / s;
                let r = ((fx - 0.5).powi(2) + (fy - 0.5).powi(2)).sqrt();
                let v = 0.5 + 0.3 * (1.0 - r) + 0.1 * (6.0 * fx).sin() * (5.0 * fy).cos()
                    - 0.05 * c as f32;
                img.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

// ── triangulation ───────────────────────────────────────────────────────

fn circumcircle(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> ([f64; 2], f64) {
    let d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]));
    assert!(d.abs() > 1e-12, "degenerate triangle in circumcircle oracle");
    let a2 = a[0] * a[0] + a[1] * a[1];
    let b2 = b[0] * b[0] + b[1] * b[1];
    let c2 = c[0] * c[0] + c[1] * c[1];
    let ux = (a2 * (b[1] - c[1]) + b2 * (c[1] - a[1]) + c2 * (a[1] - b[1])) / d;
    let uy = (a2 * (c[0] - b[0]) + b2 * (a[0] - c[0]) + c2 * (b[0] - a[0])) / d;
    let r2 = (a[0] - ux).powi(2) + (a[1] - uy).powi(2);
    ([ux, uy], r2)
}

fn assert_delaunay_property(points: &[[f64; 2]], mesh: &TriangleMesh) {
    for t in &mesh.triangles {
        let (center, r2) =
            circumcircle(mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
        for (i, p) in points.iter().enumerate() {
            if t.contains(&i) {
                continue;
            }
            let d2 = (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2);
            // points on the circle are allowed (co-circular border anchors)
            assert!(
                d2 >= r2 - 1e-9 * r2.max(1.0),
                "point {i} strictly inside circumcircle of {t:?}: d2={d2} r2={r2}"
            );
        }
    }
}

#[test]
fn three_points_make_one_triangle() {
    let mesh = delaunay_triangulate(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
    assert_eq!(mesh.triangles.len(), 1);
    assert!((mesh.total_area() - 0.5).abs() < 1e-12);
}

#[test]
fn unit_square_makes_two_triangles_with_area_one() {
    let mesh =
        delaunay_triangulate(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
    assert_eq!(mesh.triangles.len(), 2);
    assert!((mesh.total_area() - 1.0).abs() < 1e-9);
}

#[test]
fn degenerate_inputs_are_rejected() {
    assert!(delaunay_triangulate(&[[0.0, 0.0], [1.0, 1.0]]).is_err());
    assert!(delaunay_triangulate(&[[0.0, 0.0], [0.5, 0.5], [1.0, 1.0], [0.25, 0.25]]).is_err());
    assert!(delaunay_triangulate(&[[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).is_err());
}

#[test]
fn randomized_landmark_sets_satisfy_empty_circumcircle_and_area() {
    let base = face_landmarks();
    let mut rng = crate::rng::stream(21, "delaunay-oracle", 0);
    for round in 0..100 {
        let mut pts = [[0.0; 2]; 18];
        for (i, p) in base.points().iter().enumerate() {
            pts[i] = [
                (p[0] + rng.gen_range(-0.03..0.03)).clamp(0.05, 0.95),
                (p[1] + rng.gen_range(-0.03..0.03)).clamp(0.05, 0.95),
            ];
        }
        let lm = match LandmarkSet::new(pts) {
            Ok(lm) => lm,
            Err(_) => continue, // jitter broke canonical order; skip this draw
        };
        let all = lm.with_border_anchors();
        let mesh = delaunay_triangulate(&all)
            .unwrap_or_else(|e| panic!("round {round}: triangulation failed: {e}"));
        assert_delaunay_property(&all, &mesh);
        let hull_area = super::delaunay::convex_hull_area(&all);
        assert!(
            (mesh.total_area() - hull_area).abs() < 1e-6,
            "round {round}: triangle area {} vs hull area {}",
            mesh.total_area(),
            hull_area
        );
    }
}

// ── patch layout ────────────────────────────────────────────────────────

#[test]
fn patch_side_examples() {
    assert_eq!(patch_side_for(512), 102);
    assert_eq!(patch_side_for(128), 26);
    assert_eq!(patch_side_for(64), 12);
    assert_eq!(patch_side_for(32), 6);
    assert_eq!(patch_side_for(16), 4);
}

#[test]
fn k12_at_512_gives_twelve_102_boxes() {
    let layout = place_patches(&face_landmarks(), 12, 512).unwrap();
    assert_eq!(layout.boxes.len(), 12);
    assert!(layout.boxes.iter().all(|b| b.side == 102));
    assert!(layout
        .boxes
        .iter()
        .all(|b| b.left + b.side <= 512 && b.top + b.side <= 512));
}

#[test]
fn centered_anchor_box_arithmetic() {
    let mut pts = *face_landmarks().points();
    pts[14] = [0.5, 0.5]; // mouth_center
    let lm = LandmarkSet::new(pts).unwrap();
    let layout = place_patches(&lm, 3, 128).unwrap();
    let mouth = layout.boxes.iter().find(|b| b.anchor == "mouth_center").unwrap();
    assert_eq!((mouth.left, mouth.top, mouth.side), (51, 51, 26));
}

#[test]
fn corner_anchor_clamps_to_image() {
    let mut pts = *face_landmarks().points();
    pts[2] = [0.0, 0.0]; // eye_l_top dragged to the corner
    let lm = LandmarkSet::new(pts).unwrap();
    let layout = place_patches(&lm, 3, 128).unwrap();
    let b = layout.boxes.iter().find(|b| b.anchor == "eye_l_top").unwrap();
    assert_eq!((b.left, b.top), (0, 0));
}

#[test]
fn unsupported_k_is_rejected_and_layout_is_deterministic() {
    let lm = face_landmarks();
    assert!(place_patches(&lm, 5, 128).is_err());
    assert!(place_patches(&lm, 0, 128).is_err());
    let a = place_patches(&lm, 12, 128).unwrap();
    let b = place_patches(&lm, 12, 128).unwrap();
    assert_eq!(a, b);
}

#[test]
fn k12_default_schema_has_overlapping_boxes() {
    let layout = place_patches(&face_landmarks(), 12, 128).unwrap();
    let any_overlap = layout
        .boxes
        .iter()
        .enumerate()
        .any(|(i, a)| layout.boxes.iter().skip(i + 1).any(|b| a.overlaps(b)));
    assert!(any_overlap);
}

// ── warp and blend ──────────────────────────────────────────────────────

#[test]
fn identity_landmarks_reduce_to_direct_blend() {
    let lm = face_landmarks();
    let side = 64;
    let source = smooth_test_image(side);
    let mut reference = smooth_test_image(side);
    for v in reference.data_mut() {
        *v = (*v * 0.7 + 0.2).clamp(0.0, 1.0);
    }
    let w = warp_blend(&source, &lm, &reference, &lm).unwrap();
    let mask = hull_mask(&lm, side);
    let mut max_diff = 0.0f32;
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                let a = mask[y * side + x];
                let want = a * reference.get(c, y, x) + (1.0 - a) * source.get(c, y, x);
                max_diff = max_diff.max((w.get(c, y, x) - want).abs());
            }
        }
    }
    assert!(max_diff < 1e-6, "identity warp deviates by {max_diff}");
}

#[test]
fn shifted_landmarks_sample_the_shifted_reference() {
    let side = 128usize;
    let lm = face_landmarks();
    let shift_px = 5.0;
    let shift = shift_px / (side - 1) as f64;
    let mut spts = *lm.points();
    for p in &mut spts {
        p[0] += shift;
    }
    let ref_lm = LandmarkSet::new(spts).unwrap();
    let source = smooth_test_image(side);
    let reference = {
        let mut img = smooth_test_image(side);
        for v in img.data_mut() {
            *v = 1.0 - *v * 0.8;
        }
        img
    };
    let w = warp_blend(&source, &lm, &reference, &ref_lm).unwrap();
    let mask = hull_mask(&lm, side);
    let mesh = delaunay_triangulate(&lm.with_border_anchors()).unwrap();
    let last = (side - 1) as f64;
    let mut checked = 0usize;
    let mut max_diff = 0.0f32;
    for y in 6..side - 6 {
        for x in 6..side - 6 {
            if mask[y * side + x] < 1.0 {
                continue; // skip the feather band
            }
            let p = [x as f64 / last, y as f64 / last];
            let Some((ti, _)) = mesh.locate(p) else { continue };
            // only triangles made purely of face landmarks shift rigidly
            if mesh.triangles[ti].iter().any(|&v| v >= 18) {
                continue;
            }
            if x + 5 >= side {
                continue;
            }
            let want = reference.get(0, y, x + 5);
            max_diff = max_diff.max((w.get(0, y, x) - want).abs());
            checked += 1;
        }
    }
    assert!(checked > 100, "too few rigid interior pixels compared: {checked}");
    assert!(max_diff < 2.0 / 255.0, "shift-compose mismatch {max_diff}");
}

#[test]
fn mask_is_one_at_centroid_and_zero_at_corner() {
    let lm = face_landmarks();
    let side = 128;
    let mask = hull_mask(&lm, side);
    let pts = lm.points();
    let cx: f64 = pts.iter().map(|p| p[0]).sum::<f64>() / 18.0;
    let cy: f64 = pts.iter().map(|p| p[1]).sum::<f64>() / 18.0;
    let px = (cx * (side - 1) as f64).round() as usize;
    let py = (cy * (side - 1) as f64).round() as usize;
    assert_eq!(mask[py * side + px], 1.0);
    assert_eq!(mask[0], 0.0);
    assert_eq!(mask[side * side - 1], 0.0);
}

#[test]
fn warp_blend_rejects_mismatched_resolutions() {
    let lm = face_landmarks();
    let a = smooth_test_image(64);
    let b = smooth_test_image(32);
    assert!(warp_blend(&a, &lm, &b, &lm).is_err());
}

// ── frontalization ──────────────────────────────────────────────────────

fn rotated_landmarks(deg: f64) -> LandmarkSet {
    let rad = deg.to_radians();
    let (s, c) = (rad.sin(), rad.cos());
    let base = face_landmarks();
    let mut pts = [[0.0; 2]; 18];
    for (i, p) in base.points().iter().enumerate() {
        let dx = p[0] - 0.5;
        let dy = p[1] - 0.5;
        pts[i] = [0.5 + c * dx - s * dy, 0.5 + s * dx + c * dy];
    }
    LandmarkSet::new(pts).unwrap()
}

#[test]
fn canonical_landmarks_give_identity_transform() {
    let lm = face_landmarks();
    let img = smooth_test_image(64);
    let (_, out_lm, inverse) = frontalize(&img, &lm).unwrap();
    assert!(inverse.deviation_from_identity() < 1e-6);
    for (a, b) in out_lm.points().iter().zip(lm.points()) {
        assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
    }
}

#[test]
fn ten_degree_rotation_frontalizes_to_canonical_anchors() {
    let lm = rotated_landmarks(10.0);
    let img = smooth_test_image(128);
    let (_, out_lm, _) = frontalize(&img, &lm).unwrap();
    let half_px = 0.5 / 127.0;
    let el = out_lm.eye_l_centroid();
    let er = out_lm.eye_r_centroid();
    let mc = out_lm.get("mouth_center").unwrap();
    for (got, want) in [(el, CANONICAL_EYE_L), (er, CANONICAL_EYE_R), (mc, CANONICAL_MOUTH)] {
        assert!(
            (got[0] - want[0]).abs() < half_px && (got[1] - want[1]).abs() < half_px,
            "anchor {got:?} vs canonical {want:?}"
        );
    }
}

#[test]
fn frontalize_round_trip_preserves_the_image() {
    let lm = rotated_landmarks(8.0);
    let img = smooth_test_image(128);
    let (front, _, inverse) = frontalize(&img, &lm).unwrap();
    let back = inverse.warp_image(&front).unwrap();
    let v = crate::imageio::psnr(&img, &back);
    assert!(v > 35.0, "round-trip PSNR {v} dB");
}

#[test]
fn degenerate_transforms_are_rejected() {
    let zero = SimilarityTransform { a: 0.0, b: 0.0, tx: 0.1, ty: 0.1 };
    assert!(zero.inverse().is_err());
    // near-coincident anchors still yield a finite (if extreme) fit
    let mut pts = *face_landmarks().points();
    for i in 0..8 {
        pts[i] = [0.5, 0.4];
    }
    pts[14] = [0.5, 0.4];
    for i in 0..4 {
        pts[i][0] = 0.499; // keep the eye-order invariant satisfiable
    }
    let lm = LandmarkSet::new(pts).unwrap();
    let img = smooth_test_image(32);
    match frontalize(&img, &lm) {
        Ok((_, _, inv)) => assert!(inv.a.is_finite() && inv.b.is_finite()),
        Err(_) => {} // extreme scale may push landmarks outside [0,1]; both outcomes are sane
    }
}

// ── landmark io ─────────────────────────────────────────────────────────

#[test]
fn sidecar_round_trip_and_validation() {
    let lm = face_landmarks();
    let text = lm.to_sidecar();
    assert_eq!(text.lines().count(), 18);
    let back = LandmarkSet::from_sidecar(&text, Path::new("mem")).unwrap();
    assert_eq!(&back, &lm);

    let truncated: String = text.lines().take(17).collect::<Vec<_>>().join("\n");
    let err = LandmarkSet::from_sidecar(&truncated, Path::new("bad.lm")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("bad.lm") && msg.contains("17"), "error should name file and count: {msg}");
}

#[test]
fn landmark_set_validation() {
    let mut pts = *face_landmarks().points();
    pts[0] = [1.5, 0.2];
    assert!(LandmarkSet::new(pts).is_err());
    // swap eyes: violates canonical orientation
    let base = *face_landmarks().points();
    let mut swapped = base;
    for i in 0..4 {
        swapped[i] = base[i + 4];
        swapped[i + 4] = base[i];
    }
    assert!(LandmarkSet::new(swapped).is_err());
}
