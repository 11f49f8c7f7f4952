//! End-to-end exercises of the installed binary: every subcommand, the
//! documented exit codes, artifact layouts, and byte-level determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ladn::nets::NetworkConfig;
use ladn::training::TrainConfig;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ladn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn ladn")
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_code(o: &Output, want: i32) {
    assert_eq!(o.status.code(), Some(want), "stdout:\n{}\nstderr:\n{}", stdout(o), stderr(o));
}

fn gen_micro_data(dir: &Path, n: usize, seed: u64) {
    let o = run(&[
        "gen-data",
        "--out",
        &s(dir),
        "--n-before",
        &n.to_string(),
        "--n-after",
        &n.to_string(),
        "--dramatic-frac",
        "1.0",
        "--side",
        "16",
        "--seed",
        &seed.to_string(),
    ]);
    assert_code(&o, 0);
}

fn write_micro_config(dir: &Path) -> PathBuf {
    let cfg = TrainConfig {
        phase1_epochs: 1,
        phase2_epochs: 1,
        checkpoint_every: 1,
        log_every: 1,
        net: NetworkConfig::preset("micro16").unwrap(),
        ..TrainConfig::default()
    };
    let path = dir.join("micro.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn png_dims(path: &Path) -> (u32, u32) {
    let img = image::open(path).expect("decode png");
    (img.width(), img.height())
}

/// Decoded RGB bytes of one square tile in a horizontal strip.
fn tile_rgb(path: &Path, tile: usize, side: u32) -> Vec<u8> {
    let img = image::open(path).expect("decode png").to_rgb8();
    let x0 = tile as u32 * side;
    let mut out = Vec::with_capacity((side * side * 3) as usize);
    for y in 0..side {
        for x in 0..side {
            out.extend_from_slice(&img.get_pixel(x0 + x, y).0);
        }
    }
    out
}

fn whole_rgb(path: &Path) -> Vec<u8> {
    image::open(path).expect("decode png").to_rgb8().into_raw()
}

/// Byte-compares two directory trees (same relative names, same contents).
fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn help_usage_and_validation_exit_codes() {
    let help = run(&["--help"]);
    assert_code(&help, 0);
    for name in ["gen-data", "train", "transfer", "demakeup", "interpolate", "ablate-local", "grad-check"] {
        assert!(stdout(&help).contains(name), "--help misses {name}");
    }

    assert_code(&run(&["--bogus"]), 2);
    assert_code(&run(&["gen-data", "--out", "/tmp/x", "--no-such-flag"]), 2);

    let tmp = TempDir::new().unwrap();
    let zero = run(&["gen-data", "--out", &s(tmp.path()), "--n-before", "0"]);
    assert_code(&zero, 2);
    assert!(stderr(&zero).contains("at least one image"), "{}", stderr(&zero));

    let frac = run(&["gen-data", "--out", &s(tmp.path()), "--dramatic-frac", "1.5"]);
    assert_code(&frac, 2);

    // Config overrides are validated before any work starts.
    let bad_set = run(&[
        "train",
        "--data",
        &s(&tmp.path().join("nonexistent")),
        "--out",
        &s(&tmp.path().join("run")),
        "--set",
        "lrr=1",
    ]);
    assert_code(&bad_set, 2);
    assert!(stderr(&bad_set).contains("unknown config field"), "{}", stderr(&bad_set));
    assert!(!tmp.path().join("run").exists(), "failed validation must not create the run dir");

    // The thread cap is validated up front too.
    let bad_threads = bin()
        .env("LADN_THREADS", "lots")
        .args(["train", "--data", "nope", "--out", &s(&tmp.path().join("run2"))])
        .output()
        .unwrap();
    assert_code(&bad_threads, 2);
    assert!(stderr(&bad_threads).contains("LADN_THREADS"), "{}", stderr(&bad_threads));
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let o = run(&["gen-data", "--out", &s(&a), "--n-before", "3", "--n-after", "3", "--side", "16", "--seed", "7"]);
    assert_code(&o, 0);
    assert!(stdout(&o).contains("3 clean + 3 made-up"), "{}", stdout(&o));
    assert!(a.join("manifest.json").exists());

    let o = run(&["gen-data", "--out", &s(&b), "--n-before", "3", "--n-after", "3", "--side", "16", "--seed", "7"]);
    assert_code(&o, 0);
    assert_eq!(tree_bytes(&a), tree_bytes(&b), "same seed must reproduce the tree");

    let o = run(&["gen-data", "--out", &s(&c), "--n-before", "3", "--n-after", "3", "--side", "16", "--seed", "8"]);
    assert_code(&o, 0);
    assert_ne!(tree_bytes(&a), tree_bytes(&c), "different seed must change the tree");
}

#[test]
fn train_infer_interpolate_flow() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_micro_data(&data, 4, 3);
    let cfg = write_micro_config(tmp.path());
    let run_dir = tmp.path().join("run");

    let train = bin()
        .env("LADN_THREADS", "2")
        .args([
            "train",
            "--config",
            &s(&cfg),
            "--data",
            &s(&data),
            "--out",
            &s(&run_dir),
            "--seed",
            "5",
        ])
        .output()
        .unwrap();
    assert_code(&train, 0);
    let snapshot = run_dir.join("checkpoint_ep0002.ladn");
    assert!(snapshot.exists(), "final snapshot missing");
    assert!(run_dir.join("train_log.csv").exists());
    assert!(run_dir.join("config.json").exists());
    assert!(run_dir.join("config.sha256").exists());
    let echo = fs::read_to_string(run_dir.join("run.json")).unwrap();
    assert!(echo.contains("\"ladn_threads\": 2"), "{echo}");

    // Per-epoch sample grids: 5 columns, one row per shown couple.
    for ep in ["sample_ep0001.png", "sample_ep0002.png"] {
        assert_eq!(png_dims(&run_dir.join(ep)), (5 * 16, 4 * 16), "{ep}");
    }

    // Resuming the finished run is a clean no-op.
    let resume = run(&[
        "train",
        "--config",
        &s(&cfg),
        "--data",
        &s(&data),
        "--out",
        &s(&run_dir),
        "--seed",
        "5",
        "--resume",
        &s(&snapshot),
    ]);
    assert_code(&resume, 0);
    assert!(stdout(&resume).contains("already complete"), "{}", stdout(&resume));

    // Transfer: output at input resolution, byte-identical across runs.
    let source = data.join("before_000.png");
    let ref1 = data.join("after_000.png");
    let ref2 = data.join("after_001.png");
    let t1 = tmp.path().join("t1.png");
    let t1b = tmp.path().join("t1b.png");
    let t2 = tmp.path().join("t2.png");
    for (r, out) in [(&ref1, &t1), (&ref1, &t1b), (&ref2, &t2)] {
        let o = run(&[
            "transfer",
            "--checkpoint",
            &s(&snapshot),
            "--source",
            &s(&source),
            "--reference",
            &s(r),
            "--out",
            &s(out),
        ]);
        assert_code(&o, 0);
        assert_eq!(png_dims(out), (16, 16));
    }
    assert_eq!(fs::read(&t1).unwrap(), fs::read(&t1b).unwrap(), "transfer must be deterministic");

    // Demakeup with the default attribute donor (the source itself).
    let d1 = tmp.path().join("d1.png");
    let o = run(&[
        "demakeup",
        "--checkpoint",
        &s(&snapshot),
        "--source",
        &s(&ref1),
        "--out",
        &s(&d1),
    ]);
    assert_code(&o, 0);
    assert_eq!(png_dims(&d1), (16, 16));

    // Interpolation: ref1, source, 3 frames, ref2 in one row; the endpoint
    // frames match the direct transfers bit for bit.
    let strip = tmp.path().join("interp.png");
    let o = run(&[
        "interpolate",
        "--checkpoint",
        &s(&snapshot),
        "--source",
        &s(&source),
        "--ref1",
        &s(&ref1),
        "--ref2",
        &s(&ref2),
        "--steps",
        "3",
        "--out",
        &s(&strip),
    ]);
    assert_code(&o, 0);
    assert_eq!(png_dims(&strip), (6 * 16, 16));
    assert_eq!(tile_rgb(&strip, 2, 16), whole_rgb(&t1), "alpha=1 frame != transfer with ref1");
    assert_eq!(tile_rgb(&strip, 4, 16), whole_rgb(&t2), "alpha=0 frame != transfer with ref2");

    let o = run(&[
        "interpolate",
        "--checkpoint",
        &s(&snapshot),
        "--source",
        &s(&source),
        "--ref1",
        &s(&ref1),
        "--ref2",
        &s(&ref2),
        "--steps",
        "1",
        "--out",
        &s(&strip),
    ]);
    assert_code(&o, 2);

    // Missing landmark sidecar is a runtime failure that names the file.
    let orphan = tmp.path().join("orphan.png");
    fs::copy(&source, &orphan).unwrap();
    let o = run(&[
        "transfer",
        "--checkpoint",
        &s(&snapshot),
        "--source",
        &s(&orphan),
        "--reference",
        &s(&ref1),
        "--out",
        &s(&t1),
    ]);
    assert_code(&o, 1);
    assert!(stderr(&o).contains("sidecar"), "{}", stderr(&o));

    // A config that differs from the snapshot's is refused, even when every
    // tensor shape happens to line up.
    let other = TrainConfig {
        phase1_epochs: 1,
        phase2_epochs: 1,
        checkpoint_every: 1,
        log_every: 1,
        net: NetworkConfig::preset("micro32").unwrap(),
        ..TrainConfig::default()
    };
    let other_path = tmp.path().join("other.json");
    fs::write(&other_path, serde_json::to_string_pretty(&other).unwrap()).unwrap();
    let o = run(&[
        "transfer",
        "--checkpoint",
        &s(&snapshot),
        "--config",
        &s(&other_path),
        "--source",
        &s(&source),
        "--reference",
        &s(&ref1),
        "--out",
        &s(&t1),
    ]);
    assert_code(&o, 1);
    assert!(stderr(&o).contains("different configuration"), "{}", stderr(&o));
}

#[test]
fn ablate_local_writes_metric_table_and_grid() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_micro_data(&data, 3, 4);
    let cfg = write_micro_config(tmp.path());
    let study = tmp.path().join("study");

    let args = [
        "ablate-local",
        "--config",
        &s(&cfg),
        "--data",
        &s(&data),
        "--checkpoint-dir",
        &s(&study),
        "--k-list",
        "0,3",
        "--seed",
        "6",
    ];
    let o = run(&args);
    assert_code(&o, 0);

    let csv = fs::read_to_string(study.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k,transfer_gap,source_gap");
    assert_eq!(lines.len(), 3, "one row per K:\n{csv}");
    assert!(lines[1].starts_with("0,"), "{csv}");
    assert!(lines[2].starts_with("3,"), "{csv}");

    // Placement row + transfer row, one column per arm.
    assert_eq!(png_dims(&study.join("ablation.png")), (2 * 16, 2 * 16));
    assert!(study.join("k00").join("checkpoint_ep0002.ladn").exists());
    assert!(study.join("k03").join("checkpoint_ep0002.ladn").exists());

    // A second invocation reuses the snapshots and reproduces the table.
    let again = run(&args);
    assert_code(&again, 0);
    assert_eq!(csv, fs::read_to_string(study.join("ablation.csv")).unwrap());
}

#[test]
fn grad_check_passes_and_the_corruption_hook_fails_naming_the_term() {
    let o = run(&["grad-check"]);
    assert_code(&o, 0);
    let out = stdout(&o);
    for term in ["adv_d", "local_d", "adv_g", "local_g", "ho", "sm", "recon", "kl"] {
        assert!(out.contains(term), "summary misses {term}:\n{out}");
    }
    assert!(out.contains("all gradients within"), "{out}");

    let o = run(&["grad-check", "--corrupt-high-order"]);
    assert_code(&o, 1);
    assert!(stderr(&o).contains("ho"), "{}", stderr(&o));
}
