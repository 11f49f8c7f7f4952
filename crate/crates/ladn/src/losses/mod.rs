//! Training objectives: global and local adversarial terms, Laplacian-based
//! high-order and smooth terms, self/cross reconstruction, the KL prior on
//! attribute codes, and their weighted combination.
//!
//! Scalar terms are built on the tape (so they backpropagate) and reported
//! in f64 so logged values are stable across tensor precisions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, TensorRef};
use crate::geometry::{anchors_for_k, is_eye_anchor, PatchLayout};
use crate::nets::{discriminate_style_pair, NetworkConfig, ParamBinding};
use crate::{Error, Result};


/// 4-neighbor Laplacian stencil, applied with replicate padding.
pub const LAPLACIAN_KERNEL: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];

/// Cross-cycle reconstruction terms are scaled by this factor.
pub const CROSS_CYCLE_SCALE: f64 = 8.0;

/// Discriminator probabilities are clamped to this open interval before the
/// log so a saturated output cannot produce an infinite loss.
pub const PROB_EPS: f64 = 1e-6;

/// Laplacian-matching weight for eye-anchored patches / everything else.
pub const H_EYE: f64 = 4.0;
pub const H_OTHER: f64 = 2.0;
/// Smoothing weight for eye-anchored patches / everything else.
pub const S_EYE: f64 = 0.1;
pub const S_OTHER: f64 = 4.0;

// ── weights ─────────────────────────────────────────────────────────────

fn d_local() -> f64 {
    2.0
}
fn d_adv() -> f64 {
    1.0
}
fn d_recon() -> f64 {
    80.0
}
fn d_kl() -> f64 {
    0.01
}
fn d_ho() -> f64 {
    20.0
}
fn d_sm() -> f64 {
    20.0
}

/// Objective weights plus the per-patch h/s arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "d_local")]
    pub lambda_local: f64,
    #[serde(default = "d_adv")]
    pub lambda_adv: f64,
    #[serde(default = "d_recon")]
    pub lambda_recon: f64,
    #[serde(default = "d_kl")]
    pub lambda_kl: f64,
    #[serde(default = "d_ho")]
    pub lambda_ho: f64,
    #[serde(default = "d_sm")]
    pub lambda_sm: f64,
    /// Per-patch Laplacian-matching weights; empty means "derive from K".
    #[serde(default)]
    pub h: Vec<f64>,
    /// Per-patch smoothing weights; empty means "derive from K".
    #[serde(default)]
    pub s: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_local: d_local(),
            lambda_adv: d_adv(),
            lambda_recon: d_recon(),
            lambda_kl: d_kl(),
            lambda_ho: d_ho(),
            lambda_sm: d_sm(),
            h: Vec::new(),
            s: Vec::new(),
        }
    }
}

impl LossWeights {
    /// Default weights with h/s arrays derived from the K anchor roles:
    /// eye-region patches get h=4, s=0.1; all others h=2, s=4.
    pub fn for_k(k: usize) -> Result<Self> {
        let mut w = LossWeights::default();
        w.fill_patch_weights(k)?;
        Ok(w)
    }

    /// Fills empty h/s arrays for K patches and validates the result.
    pub fn fill_patch_weights(&mut self, k: usize) -> Result<()> {
        if self.h.is_empty() && k > 0 {
            let anchors = anchors_for_k(k)?;
            self.h = anchors
                .iter()
                .map(|a| if is_eye_anchor(a) { H_EYE } else { H_OTHER })
                .collect();
        }
        if self.s.is_empty() && k > 0 {
            let anchors = anchors_for_k(k)?;
            self.s = anchors
                .iter()
                .map(|a| if is_eye_anchor(a) { S_EYE } else { S_OTHER })
                .collect();
        }
        self.validate(k)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let lambdas = [
            ("lambda_local", self.lambda_local),
            ("lambda_adv", self.lambda_adv),
            ("lambda_recon", self.lambda_recon),
            ("lambda_kl", self.lambda_kl),
            ("lambda_ho", self.lambda_ho),
            ("lambda_sm", self.lambda_sm),
        ];
        for (name, v) in lambdas {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{} must be finite and >= 0, got {}", name, v)));
            }
        }
        if self.h.len() != k || self.s.len() != k {
            return Err(Error::Config(format!(
                "per-patch weight arrays have lengths h={}, s={}, expected K={}",
                self.h.len(),
                self.s.len(),
                k
            )));
        }
        for (name, arr) in [("h", &self.h), ("s", &self.s)] {
            if arr.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config(format!("{} weights must be finite and >= 0", name)));
            }
        }
        Ok(())
    }
}

// ── phases & reports ────────────────────────────────────────────────────

/// Training phase: the first phase disables the Laplacian terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    One,
    Two,
}

impl Phase {
    pub fn tag(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

/// Per-step scalar values of every objective, reported in f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub phase: u8,
    /// Generator-form adversarial term (both domains).
    pub adv: f64,
    /// Generator-form local pathway term.
    pub local: f64,
    pub recon: f64,
    pub kl: f64,
    pub ho: f64,
    pub sm: f64,
    /// Discriminator-step diagnostics (not part of the weighted total).
    pub adv_d: f64,
    pub local_d: f64,
    /// Weighted sum of the six generator terms.
    pub total: f64,
}

/// Fixed header of the CSV training log.
pub const CSV_HEADER: &str = "step,phase,adv,local,recon,kl,ho,sm,adv_d,local_d,total";

impl LossReport {
    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            step,
            self.phase,
            self.adv,
            self.local,
            self.recon,
            self.kl,
            self.ho,
            self.sm,
            self.adv_d,
            self.local_d,
            self.total
        )
    }
}

// ── adversarial (whole image) ───────────────────────────────────────────

fn log_clamped<T: Real>(tape: &mut Tape<T>, p: TensorRef) -> Result<TensorRef> {
    let lo = T::from_f64(PROB_EPS);
    let hi = T::from_f64(1.0 - PROB_EPS);
    let c = tape.clamp(p, lo, hi)?;
    Ok(tape.log(c))
}

fn log_one_minus_clamped<T: Real>(tape: &mut Tape<T>, p: TensorRef) -> Result<TensorRef> {
    let neg = tape.mul_scalar(p, T::from_f64(-1.0));
    let flipped = tape.add_scalar(neg, T::ONE);
    log_clamped(tape, flipped)
}

/// Discriminator objective for one domain: -log D(real) - log(1 - D(fake)).
pub fn adversarial_d_loss<T: Real>(
    tape: &mut Tape<T>,
    d_real: TensorRef,
    d_fake: TensorRef,
) -> Result<TensorRef> {
    let lr = log_clamped(tape, d_real)?;
    let lf = log_one_minus_clamped(tape, d_fake)?;
    let s = tape.add(lr, lf)?;
    Ok(tape.mul_scalar(s, T::from_f64(-1.0)))
}

/// Non-saturating generator objective for one domain: -log D(fake).
pub fn adversarial_g_loss<T: Real>(tape: &mut Tape<T>, d_fake: TensorRef) -> Result<TensorRef> {
    let lf = log_clamped(tape, d_fake)?;
    Ok(tape.mul_scalar(lf, T::from_f64(-1.0)))
}

// ── local pathway ───────────────────────────────────────────────────────

fn check_layouts(cfg: &NetworkConfig, reference: &PatchLayout, source: &PatchLayout) -> Result<()> {
    if cfg.k_local == 0 || reference.k() != cfg.k_local || source.k() != cfg.k_local {
        return Err(Error::Config(format!(
            "layouts carry K={}/{} patches, model has K={}",
            reference.k(),
            source.k(),
            cfg.k_local
        )));
    }
    if reference.patch_side() != cfg.local_patch_side || source.patch_side() != cfg.local_patch_side {
        return Err(Error::Config(format!(
            "layout patch side {}/{} does not match model patch side {}",
            reference.patch_side(),
            source.patch_side(),
            cfg.local_patch_side
        )));
    }
    Ok(())
}

fn crop<T: Real>(
    tape: &mut Tape<T>,
    image: TensorRef,
    layout: &PatchLayout,
    k: usize,
) -> Result<TensorRef> {
    let b = &layout.boxes[k];
    tape.crop_patch(image, b.top, b.left, b.side)
}

/// Local discriminator objective: for every patch k, the pair cropped from
/// the reference and the warped guidance (at the source's layout) is a
/// positive example and (reference, transfer output) a negative one.
/// Patches of `w` and `y_fake` are co-located; `y_ref` uses its own layout.
pub fn local_adversarial_d_loss<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamBinding,
    cfg: &NetworkConfig,
    reference_layout: &PatchLayout,
    source_layout: &PatchLayout,
    y_ref: TensorRef,
    w: TensorRef,
    y_fake: TensorRef,
) -> Result<TensorRef> {
    check_layouts(cfg, reference_layout, source_layout)?;
    let mut acc = tape.scalar(T::ZERO);
    for k in 0..cfg.k_local {
        let p_ref = crop(tape, y_ref, reference_layout, k)?;
        let p_pos = crop(tape, w, source_layout, k)?;
        let p_neg = crop(tape, y_fake, source_layout, k)?;
        let prefix = crate::nets::local_disc_prefix(k);
        let d_pos =
            discriminate_style_pair(tape, params, &prefix, cfg, cfg.local_patch_side, p_ref, p_pos)?;
        let d_neg =
            discriminate_style_pair(tape, params, &prefix, cfg, cfg.local_patch_side, p_ref, p_neg)?;
        let term = adversarial_d_loss(tape, d_pos, d_neg)?;
        acc = tape.add(acc, term)?;
    }
    Ok(tape.mul_scalar(acc, T::from_f64(1.0 / cfg.k_local as f64)))
}

/// Generator side of the local pathway: push every D_k toward scoring the
/// (reference, transfer) pair as style-matched: -(1/K) sum_k log D_k.
pub fn local_adversarial_g_loss<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamBinding,
    cfg: &NetworkConfig,
    reference_layout: &PatchLayout,
    source_layout: &PatchLayout,
    y_ref: TensorRef,
    y_fake: TensorRef,
) -> Result<TensorRef> {
    check_layouts(cfg, reference_layout, source_layout)?;
    let mut acc = tape.scalar(T::ZERO);
    for k in 0..cfg.k_local {
        let p_ref = crop(tape, y_ref, reference_layout, k)?;
        let p_neg = crop(tape, y_fake, source_layout, k)?;
        let prefix = crate::nets::local_disc_prefix(k);
        let d_neg =
            discriminate_style_pair(tape, params, &prefix, cfg, cfg.local_patch_side, p_ref, p_neg)?;
        let term = adversarial_g_loss(tape, d_neg)?;
        acc = tape.add(acc, term)?;
    }
    Ok(tape.mul_scalar(acc, T::from_f64(1.0 / cfg.k_local as f64)))
}

// ── Laplacian terms ─────────────────────────────────────────────────────

fn kernel<T: Real>() -> [T; 9] {
    let mut k = [T::ZERO; 9];
    for (dst, src) in k.iter_mut().zip(LAPLACIAN_KERNEL) {
        *dst = T::from_f64(src);
    }
    k
}

/// Per-channel 4-neighbor Laplacian with replicate padding.
pub fn laplacian<T: Real>(tape: &mut Tape<T>, x: TensorRef) -> Result<TensorRef> {
    let s = tape.shape(x);
    if s.len() != 3 || s[1] < 3 || s[2] < 3 {
        return Err(Error::Shape(format!(
            "laplacian needs [C,H,W] with H,W >= 3, got {:?}",
            s
        )));
    }
    tape.stencil3x3(x, kernel::<T>())
}

/// High-frequency matching: (1/K) sum_k h_k * mean |lap(p_k of w) - lap(p_k
/// of y_fake)| with both patches cropped at the same (source) layout.
pub fn high_order_loss<T: Real>(
    tape: &mut Tape<T>,
    layout: &PatchLayout,
    w: TensorRef,
    y_fake: TensorRef,
    h: &[f64],
) -> Result<TensorRef> {
    if h.len() != layout.k() || layout.k() == 0 {
        return Err(Error::Config(format!(
            "h has {} entries for {} patches",
            h.len(),
            layout.k()
        )));
    }
    let mut acc = tape.scalar(T::ZERO);
    for k in 0..layout.k() {
        let pw = crop(tape, w, layout, k)?;
        let pf = crop(tape, y_fake, layout, k)?;
        let lw = laplacian(tape, pw)?;
        let lf = laplacian(tape, pf)?;
        let gap = tape.l1_distance(lw, lf)?;
        let weighted = tape.mul_scalar(gap, T::from_f64(h[k]));
        acc = tape.add(acc, weighted)?;
    }
    Ok(tape.mul_scalar(acc, T::from_f64(1.0 / layout.k() as f64)))
}

/// Smoothness prior on the removal output: (1/K) sum_k s_k * mean |lap(p_k)|.
pub fn smooth_loss<T: Real>(
    tape: &mut Tape<T>,
    layout: &PatchLayout,
    x_fake: TensorRef,
    s: &[f64],
) -> Result<TensorRef> {
    if s.len() != layout.k() || layout.k() == 0 {
        return Err(Error::Config(format!(
            "s has {} entries for {} patches",
            s.len(),
            layout.k()
        )));
    }
    let mut acc = tape.scalar(T::ZERO);
    for k in 0..layout.k() {
        let p = crop(tape, x_fake, layout, k)?;
        let lp = laplacian(tape, p)?;
        let mag = tape.mean_abs(lp)?;
        let weighted = tape.mul_scalar(mag, T::from_f64(s[k]));
        acc = tape.add(acc, weighted)?;
    }
    Ok(tape.mul_scalar(acc, T::from_f64(1.0 / layout.k() as f64)))
}

// ── reconstruction & KL ─────────────────────────────────────────────────

/// L1(x, x_self) + 8*L1(x, x_cross) + L1(y, y_self) + 8*L1(y, y_cross),
/// every L1 a mean absolute difference.
pub fn reconstruction_loss<T: Real>(
    tape: &mut Tape<T>,
    x: TensorRef,
    y: TensorRef,
    x_self: TensorRef,
    y_self: TensorRef,
    x_cross: TensorRef,
    y_cross: TensorRef,
) -> Result<TensorRef> {
    let scale = T::from_f64(CROSS_CYCLE_SCALE);
    let sx = tape.l1_distance(x, x_self)?;
    let cx = tape.l1_distance(x, x_cross)?;
    let sy = tape.l1_distance(y, y_self)?;
    let cy = tape.l1_distance(y, y_cross)?;
    let cx8 = tape.mul_scalar(cx, scale);
    let cy8 = tape.mul_scalar(cy, scale);
    let a = tape.add(sx, cx8)?;
    let b = tape.add(sy, cy8)?;
    tape.add(a, b)
}

/// Closed-form KL of one diagonal Gaussian to the standard prior, averaged
/// over dimensions: -1/2 * mean(1 + log_var - mu^2 - exp(log_var)).
pub fn kl_loss_single<T: Real>(
    tape: &mut Tape<T>,
    mu: TensorRef,
    log_var: TensorRef,
) -> Result<TensorRef> {
    let mu2 = tape.mul(mu, mu)?;
    let ev = tape.exp(log_var);
    let t1 = tape.add_scalar(log_var, T::ONE);
    let t2 = tape.sub(t1, mu2)?;
    let t3 = tape.sub(t2, ev)?;
    let m = tape.mean(t3)?;
    Ok(tape.mul_scalar(m, T::from_f64(-0.5)))
}

/// KL term over the two first-pass attribute codes (summed).
pub fn kl_loss_pair<T: Real>(
    tape: &mut Tape<T>,
    a: &crate::nets::AttributeCodeRef,
    b: &crate::nets::AttributeCodeRef,
) -> Result<TensorRef> {
    let ka = kl_loss_single(tape, a.mu, a.log_var)?;
    let kb = kl_loss_single(tape, b.mu, b.log_var)?;
    tape.add(ka, kb)
}

// ── combination ─────────────────────────────────────────────────────────

/// Generator-side scalar terms to combine; `ho`/`sm` may be absent (phase 1
/// or patch-free configurations) and then contribute zero.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms {
    pub adv: TensorRef,
    pub local: TensorRef,
    pub recon: TensorRef,
    pub kl: TensorRef,
    pub ho: Option<TensorRef>,
    pub sm: Option<TensorRef>,
}

/// Weighted total on the tape plus the f64 report. Phase 1 forces the
/// high-order and smooth weights to zero. Errors name a non-finite term.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    terms: &GeneratorTerms,
    weights: &LossWeights,
    phase: Phase,
) -> Result<(TensorRef, LossReport)> {
    let lambda_ho = match phase {
        Phase::One => 0.0,
        Phase::Two => weights.lambda_ho,
    };
    let lambda_sm = match phase {
        Phase::One => 0.0,
        Phase::Two => weights.lambda_sm,
    };
    let value = |tape: &Tape<T>, t: Option<TensorRef>| t.map_or(0.0, |r| tape.value(r).to_f64());
    let parts = [
        ("local", value(tape, Some(terms.local)), weights.lambda_local),
        ("adv", value(tape, Some(terms.adv)), weights.lambda_adv),
        ("recon", value(tape, Some(terms.recon)), weights.lambda_recon),
        ("kl", value(tape, Some(terms.kl)), weights.lambda_kl),
        ("ho", value(tape, terms.ho), lambda_ho),
        ("sm", value(tape, terms.sm), lambda_sm),
    ];
    for (name, v, _) in &parts {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term '{}' is {}", name, v)));
        }
    }
    let total_f64: f64 = parts.iter().map(|(_, v, l)| l * v).sum();

    let mut acc = tape.scalar(T::ZERO);
    let mut push = |tape: &mut Tape<T>, term: Option<TensorRef>, lambda: f64| -> Result<()> {
        if let Some(t) = term {
            if lambda != 0.0 {
                let w = tape.mul_scalar(t, T::from_f64(lambda));
                acc = tape.add(acc, w)?;
            }
        }
        Ok(())
    };
    push(tape, Some(terms.local), weights.lambda_local)?;
    push(tape, Some(terms.adv), weights.lambda_adv)?;
    push(tape, Some(terms.recon), weights.lambda_recon)?;
    push(tape, Some(terms.kl), weights.lambda_kl)?;
    push(tape, terms.ho, lambda_ho)?;
    push(tape, terms.sm, lambda_sm)?;

    let report = LossReport {
        phase: phase.tag(),
        adv: parts[1].1,
        local: parts[0].1,
        recon: parts[2].1,
        kl: parts[3].1,
        ho: parts[4].1,
        sm: parts[5].1,
        adv_d: 0.0,
        local_d: 0.0,
        total: total_f64,
    };
    Ok((acc, report))
}
