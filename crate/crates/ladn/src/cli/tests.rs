use super::*;
use crate::geometry::place_patches;
use crate::synthface::{render_face, FaceParams};

fn desk_spec(overrides: &[&str]) -> RunSpec {
    RunSpec {
        subcommand: "train",
        config: None,
        data_dir: None,
        checkpoint: None,
        out_dir: None,
        seed: None,
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
    }
}

#[test]
fn overrides_land_on_nested_fields_and_the_seed_flag_wins() {
    let cfg = desk_spec(&["lr=0.002", "weights.lambda_local=2.5", "net.k_local=3", "seed=9"])
        .load_config()
        .unwrap();
    assert_eq!(cfg.lr, 0.002);
    assert_eq!(cfg.weights.lambda_local, 2.5);
    assert_eq!(cfg.net.k_local, 3);
    assert_eq!(cfg.seed, 9);
    // Arrays refill for the overridden K.
    assert_eq!(cfg.weights.h.len(), 3);

    let mut spec = desk_spec(&["seed=9"]);
    spec.seed = Some(33);
    assert_eq!(spec.load_config().unwrap().seed, 33);
}

#[test]
fn overrides_reject_unknown_fields_bad_values_and_bad_shapes() {
    let unknown = desk_spec(&["lrr=1"]).load_config().unwrap_err();
    assert!(unknown.to_string().contains("unknown config field 'lrr'"), "{unknown}");
    assert_eq!(unknown.exit_code(), 2);

    let deep = desk_spec(&["weights.nope=1"]).load_config().unwrap_err();
    assert!(deep.to_string().contains("weights.nope"), "{deep}");

    let not_kv = desk_spec(&["lr"]).load_config().unwrap_err();
    assert!(not_kv.to_string().contains("KEY=VALUE"), "{not_kv}");

    // A string where a number belongs dies at schema validation.
    let bad_type = desk_spec(&["lr=fast"]).load_config().unwrap_err();
    assert_eq!(bad_type.exit_code(), 2);

    // Scalars cannot be descended into.
    let through_scalar = desk_spec(&["lr.deep=1"]).load_config().unwrap_err();
    assert!(through_scalar.to_string().contains("not an object"), "{through_scalar}");

    // Schema versions other than the supported one are refused.
    let version = desk_spec(&["schema_version=2"]).load_config().unwrap_err();
    assert!(version.to_string().contains("schema version"), "{version}");
}

#[test]
fn thread_cap_parses_or_rejects() {
    assert_eq!(parse_threads(None).unwrap(), None);
    assert_eq!(parse_threads(Some("4".into())).unwrap(), Some(4));
    assert_eq!(parse_threads(Some(" 2 ".into())).unwrap(), Some(2));
    assert!(parse_threads(Some("0".into())).is_err());
    assert!(parse_threads(Some("many".into())).is_err());
}

#[test]
fn k_list_accepts_the_supported_counts_only() {
    assert_eq!(parse_k_list("0,3,6,12").unwrap(), vec![0, 3, 6, 12]);
    assert_eq!(parse_k_list(" 12 ").unwrap(), vec![12]);
    assert!(parse_k_list("5").is_err());
    assert!(parse_k_list("").is_err());
    assert!(parse_k_list("3;6").is_err());
}

#[test]
fn patch_boxes_paint_exactly_the_outlines() {
    let side = 32;
    let (img, lm) = render_face(&FaceParams::sample(5), side).unwrap();
    let layout = place_patches(&lm, 3, side).unwrap();
    assert_eq!(layout.k(), 3);
    let painted = draw_patch_boxes(&img, &layout.boxes, [1.0, 0.0, 0.0]);

    // Oracle: a pixel differs from the input iff it lies on some box edge.
    let mut on_edge = vec![false; side * side];
    for b in &layout.boxes {
        for d in 0..b.side {
            for (y, x) in [
                (b.top, b.left + d),
                (b.top + b.side - 1, b.left + d),
                (b.top + d, b.left),
                (b.top + d, b.left + b.side - 1),
            ] {
                on_edge[y * side + x] = true;
            }
        }
    }
    for y in 0..side {
        for x in 0..side {
            let now = [painted.get(0, y, x), painted.get(1, y, x), painted.get(2, y, x)];
            if on_edge[y * side + x] {
                assert_eq!(now, [1.0, 0.0, 0.0], "edge pixel ({y},{x}) not painted");
            } else {
                let was = [img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)];
                assert_eq!(now, was, "pixel ({y},{x}) modified off-edge");
            }
        }
    }
}
