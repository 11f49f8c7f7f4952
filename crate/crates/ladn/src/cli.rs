//! Command-line front end: dataset synthesis, training, single-image
//! transfer and removal, attribute interpolation, a local-discriminator
//! comparison study, and the finite-difference gradient audit.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
//! Every command is deterministic given its seed and inputs.

use std::error::Error as StdError;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::PatchBox;
use crate::imageio::{save_grid_png, PlainImage};
use crate::nets::{interpolate_attribute, ModelBundle, NetworkConfig};
use crate::synthface::{generate_dataset, load_dataset, load_face, Dataset, StyleClass};
use crate::training::checkpoint::load_checkpoint;
use crate::training::gradcheck::grad_check_on;
use crate::training::{
    couple_eval, encode_attribute_eval, eval_removal, eval_transfer, frontal_face,
    generate_with_attribute, load_eval_model, read_config_file, run_training, Pathway,
    TrainConfig,
};

/// Name of the per-invocation echo written into run directories.
pub const RUN_ECHO_NAME: &str = "run.json";

/// Header of the comparison study's metric table.
pub const ABLATION_CSV_HEADER: &str = "k,transfer_gap,source_gap";

#[derive(Parser)]
#[command(
    name = "ladn",
    version,
    about = "Facial makeup transfer and removal on a desk-scale CPU budget"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic face dataset with landmark sidecars.
    GenData(GenDataArgs),
    /// Train a model (or resume a snapshot) on a generated dataset.
    Train(TrainArgs),
    /// Paint a reference's makeup onto a source photograph.
    Transfer(TransferArgs),
    /// Remove makeup from a photograph.
    Demakeup(DemakeupArgs),
    /// Sweep the makeup style between two references on one source.
    Interpolate(InterpolateArgs),
    /// Train one model per local-discriminator count and compare them.
    AblateLocal(AblateArgs),
    /// Audit every loss gradient against central finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for images, sidecars, and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Clean (no-makeup) face count.
    #[arg(long, default_value_t = 64)]
    n_before: usize,
    /// Made-up face count.
    #[arg(long, default_value_t = 64)]
    n_after: usize,
    /// Fraction of made-up faces drawn in the dramatic style.
    #[arg(long, default_value_t = 0.5)]
    dramatic_frac: f64,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 128)]
    side: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Run recipe JSON; defaults to the desk-scale recipe.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Run directory for the log, snapshots, and sample grids.
    #[arg(long)]
    out: PathBuf,
    /// Snapshot to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Master seed, overriding the config value.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key config override, e.g. --set weights.lambda_local=2.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TransferArgs {
    /// Model snapshot (.ladn file).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config for the snapshot; defaults to config.json next to it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Face to repaint; a <name>.lm landmark sidecar must sit next to it.
    #[arg(long)]
    source: PathBuf,
    /// Makeup donor (sidecar required).
    #[arg(long)]
    reference: PathBuf,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DemakeupArgs {
    /// Model snapshot (.ladn file).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config for the snapshot; defaults to config.json next to it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Made-up face to clean; landmark sidecar required.
    #[arg(long)]
    source: PathBuf,
    /// Clean-domain attribute donor; defaults to the source itself.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InterpolateArgs {
    /// Model snapshot (.ladn file).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config for the snapshot; defaults to config.json next to it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Face that keeps its identity across the sweep (sidecar required).
    #[arg(long)]
    source: PathBuf,
    /// Style donor for the left end of the sweep (sidecar required).
    #[arg(long)]
    ref1: PathBuf,
    /// Style donor for the right end of the sweep (sidecar required).
    #[arg(long)]
    ref2: PathBuf,
    /// Frame count, endpoints included (at least 2).
    #[arg(long, default_value_t = 5)]
    steps: usize,
    /// Output PNG: one row of ref1, source, frames, ref2.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Base run recipe JSON; defaults to the desk-scale recipe.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Directory holding one run subdirectory per arm (k00, k03, ...);
    /// existing snapshots are reused, missing arms are trained.
    #[arg(long)]
    checkpoint_dir: PathBuf,
    /// Comma-separated local-discriminator counts (0 = whole-image style
    /// discriminator only).
    #[arg(long, default_value = "0,3,6,12")]
    k_list: String,
    /// Master seed, overriding the config value.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key config override applied to every arm.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Run recipe whose net geometry is audited; defaults to the 16 px
    /// micro geometry.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scale the high-order analytic gradient by 3% to prove the audit
    /// catches a wrong derivative.
    #[arg(long, hide = true)]
    corrupt_high_order: bool,
}

/// Parses argv and runs one command, returning the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = e.source();
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Demakeup(a) => cmd_demakeup(a),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::AblateLocal(a) => cmd_ablate(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    }
}

// ── config plumbing ─────────────────────────────────────────────────────

/// One command's resolved inputs, assembled before any work starts.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub subcommand: &'static str,
    pub config: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Dotted-key overrides in `a.b.c=value` form, applied in order.
    pub overrides: Vec<String>,
}

impl RunSpec {
    /// Reads the config file (or takes the desk recipe), applies the
    /// overrides and the seed flag, and validates the result, so every
    /// flag mistake surfaces before files are touched or work begins.
    pub fn load_config(&self) -> Result<TrainConfig> {
        let base: TrainConfig = match &self.config {
            Some(p) => read_config_file(p)?,
            None => TrainConfig::desk(),
        };
        let mut tree = serde_json::to_value(&base)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
        for spec in &self.overrides {
            apply_override(&mut tree, spec)?;
        }
        let mut cfg: TrainConfig = serde_json::from_value(tree)
            .map_err(|e| Error::Usage(format!("override produced an invalid config: {e}")))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.resolved()
    }
}

/// Applies one `a.b.c=value` override. Every path segment must already
/// exist in the document (the schema defines them all); the value is
/// parsed as JSON where possible and taken as a string otherwise.
fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override '{spec}' is not KEY=VALUE")))?;
    let segments: Vec<&str> = path.split('.').collect();
    if path.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Usage(format!("override '{spec}' has an empty key segment")));
    }
    let mut cursor = &mut *tree;
    for (i, segment) in segments.iter().enumerate() {
        let object = cursor.as_object_mut().ok_or_else(|| {
            Error::Usage(format!("config field '{}' is not an object", segments[..i].join(".")))
        })?;
        cursor = object.get_mut(*segment).ok_or_else(|| {
            Error::Usage(format!("unknown config field '{}'", segments[..=i].join(".")))
        })?;
    }
    *cursor = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Worker-thread cap from LADN_THREADS. Every kernel in this build runs on
/// one thread, so the cap is validated and recorded but nothing spawns.
fn worker_threads() -> Result<Option<usize>> {
    parse_threads(std::env::var("LADN_THREADS").ok())
}

fn parse_threads(raw: Option<String>) -> Result<Option<usize>> {
    match raw {
        None => Ok(None),
        Some(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Usage(format!(
                "LADN_THREADS must be a positive integer, got '{s}'"
            ))),
        },
    }
}

fn write_run_echo(out_dir: &Path, subcommand: &str, threads: Option<usize>) -> Result<()> {
    let echo = serde_json::json!({ "command": subcommand, "ladn_threads": threads });
    let path = out_dir.join(RUN_ECHO_NAME);
    fs::write(&path, format!("{echo:#}\n")).map_err(|e| Error::io(&path, e))
}

// ── model and image loading ─────────────────────────────────────────────

// ── subcommands ─────────────────────────────────────────────────────────

fn cmd_gen_data(a: GenDataArgs) -> Result<i32> {
    if !(0.0..=1.0).contains(&a.dramatic_frac) {
        return Err(Error::Usage(format!(
            "--dramatic-frac must lie in [0, 1], got {}",
            a.dramatic_frac
        )));
    }
    let manifest = generate_dataset(a.n_before, a.n_after, a.dramatic_frac, a.seed, a.side, &a.out)?;
    let dramatic =
        manifest.after.iter().filter(|e| e.style_class == StyleClass::Dramatic).count();
    println!(
        "wrote {} clean + {} made-up faces ({} dramatic) at {} px to {}",
        manifest.before.len(),
        manifest.after.len(),
        dramatic,
        manifest.image_side,
        a.out.display()
    );
    Ok(0)
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let spec = RunSpec {
        subcommand: "train",
        config: a.config,
        data_dir: Some(a.data),
        checkpoint: a.resume,
        out_dir: Some(a.out),
        seed: a.seed,
        overrides: a.set,
    };
    let cfg = spec.load_config()?;
    let threads = worker_threads()?;
    let out = spec.out_dir.as_deref().expect("set above");
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_run_echo(out, spec.subcommand, threads)?;
    let art = run_training(
        &cfg,
        spec.data_dir.as_deref().expect("set above"),
        out,
        spec.checkpoint.as_deref(),
        true,
    )?;
    if art.epochs_run == 0 {
        println!("training already complete; snapshot {}", art.checkpoint.display());
    } else {
        println!(
            "trained {} epochs; snapshot {}; log {}",
            art.epochs_run,
            art.checkpoint.display(),
            art.log.display()
        );
    }
    Ok(0)
}

fn cmd_transfer(a: TransferArgs) -> Result<i32> {
    let (_cfg, mut bundle) = load_eval_model(&a.checkpoint, a.config.as_deref())?;
    let (source, source_lm) = load_face(&a.source)?;
    let (reference, reference_lm) = load_face(&a.reference)?;
    let out = eval_transfer(&mut bundle, &source, &source_lm, &reference, &reference_lm)?;
    out.save_png(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(0)
}

fn cmd_demakeup(a: DemakeupArgs) -> Result<i32> {
    let (_cfg, mut bundle) = load_eval_model(&a.checkpoint, a.config.as_deref())?;
    let (source, source_lm) = load_face(&a.source)?;
    let (donor, donor_lm) = match &a.reference {
        Some(p) => load_face(p)?,
        None => (source.clone(), source_lm.clone()),
    };
    let out = eval_removal(&mut bundle, &donor, &donor_lm, &source, &source_lm)?;
    out.save_png(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(0)
}

fn cmd_interpolate(a: InterpolateArgs) -> Result<i32> {
    if a.steps < 2 {
        return Err(Error::Usage(format!("--steps must be at least 2, got {}", a.steps)));
    }
    let (_cfg, mut bundle) = load_eval_model(&a.checkpoint, a.config.as_deref())?;
    let (source, source_lm) = load_face(&a.source)?;
    let (ref1, ref1_lm) = load_face(&a.ref1)?;
    let (ref2, ref2_lm) = load_face(&a.ref2)?;
    let a1 = encode_attribute_eval(&mut bundle, Pathway::Transfer, &ref1, &ref1_lm)?;
    let a2 = encode_attribute_eval(&mut bundle, Pathway::Transfer, &ref2, &ref2_lm)?;

    // One row: ref1, source, then frames sweeping from ref1's style
    // (alpha 1) to ref2's (alpha 0), then ref2.
    let mut tiles = vec![ref1.clone(), source.clone()];
    for i in 0..a.steps {
        let alpha = 1.0 - i as f64 / (a.steps - 1) as f64;
        let code = interpolate_attribute(&a1, &a2, alpha)?;
        tiles.push(generate_with_attribute(
            &mut bundle,
            Pathway::Transfer,
            &source,
            &source_lm,
            &code,
        )?);
    }
    tiles.push(ref2.clone());
    let cols = tiles.len();
    save_grid_png(&tiles, cols, &a.out)?;
    println!("wrote {} ({} interpolation frames)", a.out.display(), a.steps);
    Ok(0)
}

fn parse_k_list(raw: &str) -> Result<Vec<usize>> {
    let mut ks = Vec::new();
    for part in raw.split(',') {
        let k: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("--k-list entry '{part}' is not a count")))?;
        if !matches!(k, 0 | 3 | 6 | 12) {
            return Err(Error::Usage(format!("--k-list entry {k} unsupported; use 0, 3, 6 or 12")));
        }
        ks.push(k);
    }
    if ks.is_empty() {
        return Err(Error::Usage("--k-list is empty".into()));
    }
    Ok(ks)
}

/// Copies the image and paints a one-pixel outline over each box.
pub fn draw_patch_boxes(image: &PlainImage, boxes: &[PatchBox], rgb: [f32; 3]) -> PlainImage {
    let mut out = image.clone();
    for b in boxes {
        for d in 0..b.side {
            for (c, &v) in rgb.iter().enumerate() {
                out.set(c, b.top, b.left + d, v);
                out.set(c, b.top + b.side - 1, b.left + d, v);
                out.set(c, b.top + d, b.left, v);
                out.set(c, b.top + d, b.left + b.side - 1, v);
            }
        }
    }
    out
}

/// Deterministic evaluation couples: dramatic-style references (falling
/// back to all references when none are dramatic), each paired with a
/// clean face round-robin.
fn eval_couples(data: &Dataset, cap: usize) -> Result<Vec<(usize, usize)>> {
    if data.n_before() == 0 || data.n_after() == 0 {
        return Err(Error::Dataset("dataset has an empty side".into()));
    }
    let dramatic: Vec<usize> = (0..data.n_after())
        .filter(|&j| data.manifest.after[j].style_class == StyleClass::Dramatic)
        .collect();
    let refs = if dramatic.is_empty() { (0..data.n_after()).collect() } else { dramatic };
    Ok(refs
        .into_iter()
        .take(cap)
        .enumerate()
        .map(|(idx, j)| (idx % data.n_before(), j))
        .collect())
}

fn newest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_prefix("checkpoint_ep").and_then(|s| s.strip_suffix(".ladn"))
        {
            if let Ok(epoch) = stem.parse::<u64>() {
                if best.as_ref().map_or(true, |(b, _)| epoch > *b) {
                    best = Some((epoch, entry.path()));
                }
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Brings one study arm up to date: resumes the newest snapshot if one
/// exists (a finished arm is a no-op), trains from scratch otherwise, and
/// returns the final model.
fn train_or_load_arm(cfg: &TrainConfig, data_dir: &Path, arm_dir: &Path) -> Result<ModelBundle<f32>> {
    let resume = newest_checkpoint(arm_dir)?;
    let art = run_training(cfg, data_dir, arm_dir, resume.as_deref(), false)?;
    Ok(load_checkpoint(&art.checkpoint, &cfg.net, cfg.adam_params())?.bundle)
}

fn cmd_ablate(a: AblateArgs) -> Result<i32> {
    let ks = parse_k_list(&a.k_list)?;
    let spec = RunSpec {
        subcommand: "ablate-local",
        config: a.config,
        data_dir: Some(a.data),
        checkpoint: None,
        out_dir: Some(a.checkpoint_dir),
        seed: a.seed,
        overrides: a.set,
    };
    let base = spec.load_config()?;
    let threads = worker_threads()?;
    let out = spec.out_dir.as_deref().expect("set above");
    let data_dir = spec.data_dir.as_deref().expect("set above");
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_run_echo(out, spec.subcommand, threads)?;
    let data = load_dataset(data_dir)?;
    let couples = eval_couples(&data, 8)?;

    let mut rows = Vec::new();
    let mut placement_tiles = Vec::new();
    let mut transfer_tiles = Vec::new();
    for &k in &ks {
        let mut cfg = base.clone();
        cfg.net.k_local = k;
        // The per-patch weight arrays belong to the base K; refill for this
        // arm's anchor set.
        cfg.weights.h.clear();
        cfg.weights.s.clear();
        let cfg = cfg.resolved()?;
        let arm_dir = out.join(format!("k{k:02}"));
        eprintln!("arm K={k}: training or loading in {}", arm_dir.display());
        let mut bundle = train_or_load_arm(&cfg, data_dir, &arm_dir)?;

        let mut transfer_gap = 0.0;
        let mut source_gap = 0.0;
        for &(i, j) in &couples {
            let (x_img, x_lm) = data.load_before(i)?;
            let (y_img, y_lm, _) = data.load_after(j)?;
            let ev = couple_eval(&mut bundle, &x_img, &x_lm, &y_img, &y_lm)?;
            transfer_gap += ev.transfer_gap;
            source_gap += ev.source_gap;
        }
        transfer_gap /= couples.len() as f64;
        source_gap /= couples.len() as f64;
        rows.push((k, transfer_gap, source_gap));

        let (i, j) = couples[0];
        let (x_img, x_lm) = data.load_before(i)?;
        let (y_img, y_lm, _) = data.load_after(j)?;
        let front = frontal_face(&cfg.net, &x_img, &x_lm)?;
        let boxes = front.layout.as_ref().map_or(&[][..], |l| &l.boxes);
        placement_tiles.push(draw_patch_boxes(&front.image, boxes, [1.0, 0.0, 0.0]));
        transfer_tiles.push(eval_transfer(&mut bundle, &x_img, &x_lm, &y_img, &y_lm)?);
    }

    let csv_path = out.join("ablation.csv");
    let mut csv = String::from(ABLATION_CSV_HEADER);
    csv.push('\n');
    for &(k, tg, sg) in &rows {
        csv.push_str(&format!("{k},{tg},{sg}\n"));
    }
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let grid_path = out.join("ablation.png");
    let mut tiles = placement_tiles;
    tiles.append(&mut transfer_tiles);
    save_grid_png(&tiles, ks.len(), &grid_path)?;

    for &(k, tg, sg) in &rows {
        println!("K={k:<2} transfer gap {tg:.6} (source gap {sg:.6})");
    }
    println!("wrote {} and {}", csv_path.display(), grid_path.display());
    Ok(0)
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<i32> {
    let net = match &a.config {
        Some(p) => read_config_file(p)?.resolved()?.net,
        None => NetworkConfig::preset("micro16")?,
    };
    let outcome = grad_check_on(net, a.corrupt_high_order)?;
    print!("{}", outcome.summary());
    if outcome.ok() {
        println!("all gradients within {:.0e} of central differences", outcome.tolerance.rel_tol);
        Ok(0)
    } else {
        eprintln!("gradient check failed: {}", outcome.failing_terms().join(", "));
        Ok(1)
    }
}

#[cfg(test)]
mod tests;
