//! Network definitions: content/attribute encoders, U-Net style generators
//! with bottleneck attribute concatenation and skip connections, plus global
//! and per-patch local discriminators with spectral normalization.
//!
//! Parameters live in a flat, name-addressed [`ParamStore`]; each training or
//! inference pass binds them onto a fresh tape, so the same store serves both
//! f32 production runs and f64 gradient-check runs.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, SnState, Tape, TensorRef};
use crate::geometry::patch_side_for;
use crate::{Error, Result};


/// Negative slope shared by every leaky ReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Standard deviation for normal weight initialization.
pub const INIT_GAIN: f64 = 0.02;

/// Attribute heads clamp log-variance to this symmetric range.
pub const LOG_VAR_LIMIT: f64 = 10.0;

// ── configuration ───────────────────────────────────────────────────────

/// Static shape plan for every network in the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Square input resolution.
    pub image_side: usize,
    /// Channel count after the first downsampling stage; doubles per stage.
    pub base_channels: usize,
    /// Number of stride-2 stages in the content encoder.
    pub content_depth: usize,
    /// Length of the attribute (style) vector.
    pub attribute_dim: usize,
    /// Encoder stages whose outputs feed the generator, shallow to deep.
    pub skip_stage_indices: Vec<usize>,
    /// Stride-2 conv layers in each discriminator stack.
    pub local_disc_layers: usize,
    /// Square patch side consumed by local discriminators.
    pub local_patch_side: usize,
    /// Number of local discriminators (0 disables the local pathway).
    pub k_local: usize,
}

impl NetworkConfig {
    /// Named presets; `paper512` is the full-scale reference geometry,
    /// `desk128` the CPU-friendly default, `micro32`/`micro16` test scales.
    pub fn preset(name: &str) -> Result<NetworkConfig> {
        let cfg = match name {
            "paper512" => NetworkConfig {
                image_side: 512,
                base_channels: 64,
                content_depth: 4,
                attribute_dim: 8,
                skip_stage_indices: vec![1, 2, 3],
                local_disc_layers: 6,
                local_patch_side: 102,
                k_local: 12,
            },
            "desk128" => NetworkConfig {
                image_side: 128,
                base_channels: 4,
                content_depth: 4,
                attribute_dim: 8,
                skip_stage_indices: vec![1, 2, 3],
                local_disc_layers: 4,
                local_patch_side: 26,
                k_local: 12,
            },
            "micro32" => NetworkConfig {
                image_side: 32,
                base_channels: 4,
                content_depth: 3,
                attribute_dim: 4,
                skip_stage_indices: vec![1, 2],
                local_disc_layers: 2,
                local_patch_side: 6,
                k_local: 3,
            },
            "micro16" => NetworkConfig {
                image_side: 16,
                base_channels: 4,
                content_depth: 3,
                attribute_dim: 4,
                skip_stage_indices: vec![1, 2],
                local_disc_layers: 2,
                local_patch_side: 4,
                k_local: 3,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown network preset '{}' (expected paper512, desk128, micro32, or micro16)",
                    other
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.attribute_dim == 0 || self.content_depth == 0 {
            return Err(Error::Config("channel, attribute, and depth counts must be positive".into()));
        }
        if self.image_side % (1 << self.content_depth) != 0 {
            return Err(Error::Config(format!(
                "image side {} is not divisible by 2^{}",
                self.image_side, self.content_depth
            )));
        }
        if self.bottleneck_side() < 2 {
            return Err(Error::Config(format!(
                "bottleneck would be {0}x{0}; need at least 2x2",
                self.bottleneck_side()
            )));
        }
        let mut prev = 0usize;
        for &s in &self.skip_stage_indices {
            if s == 0 || s >= self.content_depth {
                return Err(Error::Config(format!(
                    "skip stage {} outside 1..{}",
                    s, self.content_depth
                )));
            }
            if s <= prev {
                return Err(Error::Config("skip stages must be strictly increasing".into()));
            }
            prev = s;
        }
        if self.local_patch_side != patch_side_for(self.image_side) {
            return Err(Error::Config(format!(
                "patch side {} inconsistent with image side {} (expected {})",
                self.local_patch_side,
                self.image_side,
                patch_side_for(self.image_side)
            )));
        }
        if self.local_disc_layers == 0 {
            return Err(Error::Config("discriminators need at least one layer".into()));
        }
        let chain = disc_chain(6, self.local_patch_side, self.base_channels, self.local_disc_layers);
        if chain.last().map(|&(_, s)| s) == Some(0) {
            return Err(Error::Config(format!(
                "{} discriminator layers collapse a {} patch below 1x1",
                self.local_disc_layers, self.local_patch_side
            )));
        }
        if self.k_local != 0 {
            crate::geometry::anchors_for_k(self.k_local)?;
        }
        Ok(())
    }

    /// Spatial side of the content bottleneck.
    pub fn bottleneck_side(&self) -> usize {
        self.image_side >> self.content_depth
    }

    /// Channels after downsampling stage `i` (1-based).
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << (i - 1)
    }

    /// Channels of the content bottleneck.
    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels(self.content_depth)
    }

    /// (channels, side) sequence of a local discriminator, input included:
    /// `[(6, patch), (c1, s1), ..., (cL, sL), (1, sL)]`.
    pub fn local_disc_shape_chain(&self) -> Vec<(usize, usize)> {
        disc_chain(6, self.local_patch_side, self.base_channels, self.local_disc_layers)
    }

    /// Same recipe applied to whole images for the global discriminator.
    pub fn global_disc_shape_chain(&self) -> Vec<(usize, usize)> {
        disc_chain(3, self.image_side, self.base_channels, self.local_disc_layers)
    }
}

/// Discriminator shape plan: stride-2 3x3 convs double channels and halve the
/// side (rounding up), then a stride-1 conv maps to a 1-channel score map.
fn disc_chain(in_channels: usize, in_side: usize, base: usize, layers: usize) -> Vec<(usize, usize)> {
    let mut chain = vec![(in_channels, in_side)];
    let mut side = in_side;
    for l in 0..layers {
        side = if side == 0 { 0 } else { (side - 1) / 2 + 1 };
        chain.push((base << l, side));
    }
    chain.push((1, side));
    chain
}

// ── parameter store ─────────────────────────────────────────────────────

/// One named tensor plus optional spectral-normalization state.
#[derive(Debug, Clone)]
pub struct ParamEntry<T: Real> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub sn: Option<SnState<T>>,
}

impl<T: Real> ParamEntry<T> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat registry of model parameters with stable registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    /// Registers a zero-filled parameter; `spectral` attaches power-iteration
    /// state sized for the tensor viewed as `shape[0] x rest`.
    pub fn register(&mut self, name: &str, shape: Vec<usize>, spectral: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name '{}'", name)));
        }
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(Error::Config(format!("parameter '{}' has empty shape {:?}", name, shape)));
        }
        let sn = spectral.then(|| {
            let rows = shape[0];
            SnState::new(rows, numel / rows)
        });
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            data: vec![T::ZERO; numel],
            sn,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter '{}'", name)))
    }

    pub fn entry_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(Error::Config(format!("unknown parameter '{}'", name))),
        }
    }

    /// Total scalar parameter count.
    pub fn total_numel(&self) -> usize {
        self.entries.iter().map(|e| e.numel()).sum()
    }

    /// Converts every tensor (and power-iteration state) to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let entries = self
            .entries
            .iter()
            .map(|e| ParamEntry {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: e.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                sn: e.sn.as_ref().map(|s| SnState {
                    u: s.u.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                    v: s.v.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                }),
            })
            .collect::<Vec<_>>();
        let index = self.index.clone();
        ParamStore { entries, index }
    }
}

/// Fills weights from per-name seeded normal streams (mean 0, sd 0.02),
/// zeroes biases, and resets power-iteration state. Independent of
/// registration order because each tensor draws from its own stream.
pub fn init_weights<T: Real>(store: &mut ParamStore<T>, seed: u64) {
    let normal = Normal::new(0.0f64, INIT_GAIN).expect("finite sd");
    for entry in store.entries.iter_mut() {
        if entry.name.ends_with(".bias") {
            entry.data.fill(T::ZERO);
        } else {
            let mut rng = crate::rng::stream(seed, &format!("init/{}", entry.name), 0);
            for v in entry.data.iter_mut() {
                *v = T::from_f64(normal.sample(&mut rng));
            }
        }
        if entry.sn.is_some() {
            let rows = entry.shape[0];
            entry.sn = Some(SnState::new(rows, entry.numel() / rows));
        }
    }
}

// ── optimizer groups ────────────────────────────────────────────────────

/// Encoders and generators form the generator-side optimizer group.
pub fn is_generator_param(name: &str) -> bool {
    ["ec_x.", "ec_y.", "ea_x.", "ea_y.", "g_x.", "g_y."]
        .iter()
        .any(|p| name.starts_with(p))
}

/// Global and local discriminators form the discriminator-side group.
pub fn is_discriminator_param(name: &str) -> bool {
    name.starts_with("d_x.") || name.starts_with("d_y.") || name.starts_with("dl_")
}

// ── model bundle ────────────────────────────────────────────────────────

/// Every network of the model behind one parameter registry.
#[derive(Debug, Clone)]
pub struct ModelBundle<T: Real> {
    pub config: NetworkConfig,
    pub store: ParamStore<T>,
}

/// Name prefix for the k-th local discriminator.
pub fn local_disc_prefix(k: usize) -> String {
    format!("dl_{:02}", k)
}

impl<T: Real> ModelBundle<T> {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        register_content_encoder(&mut store, &config, "ec_x")?;
        register_content_encoder(&mut store, &config, "ec_y")?;
        register_attribute_encoder(&mut store, &config, "ea_x")?;
        register_attribute_encoder(&mut store, &config, "ea_y")?;
        register_generator(&mut store, &config, "g_x")?;
        register_generator(&mut store, &config, "g_y")?;
        register_discriminator(&mut store, &config, "d_x", 3, config.image_side)?;
        register_discriminator(&mut store, &config, "d_y", 3, config.image_side)?;
        if config.k_local == 0 {
            // Degenerate local pathway: one style-pair discriminator that
            // sees whole images instead of patches.
            register_discriminator(&mut store, &config, &local_disc_prefix(0), 6, config.image_side)?;
        }
        for k in 0..config.k_local {
            register_discriminator(&mut store, &config, &local_disc_prefix(k), 6, config.local_patch_side)?;
        }
        Ok(ModelBundle { config, store })
    }

    pub fn init_weights(&mut self, seed: u64) {
        init_weights(&mut self.store, seed);
    }

    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle { config: self.config.clone(), store: self.store.cast() }
    }
}

fn register_conv<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    c_out: usize,
    c_in: usize,
    spectral: bool,
) -> Result<()> {
    store.register(&format!("{}.weight", name), vec![c_out, c_in, 3, 3], spectral)?;
    store.register(&format!("{}.bias", name), vec![c_out], false)
}

fn register_content_encoder<T: Real>(
    store: &mut ParamStore<T>,
    cfg: &NetworkConfig,
    prefix: &str,
) -> Result<()> {
    let mut c_in = 3;
    for i in 1..=cfg.content_depth {
        register_conv(store, &format!("{}.down{}", prefix, i), cfg.stage_channels(i), c_in, false)?;
        c_in = cfg.stage_channels(i);
    }
    Ok(())
}

fn register_attribute_encoder<T: Real>(
    store: &mut ParamStore<T>,
    cfg: &NetworkConfig,
    prefix: &str,
) -> Result<()> {
    let mut c_in = 3;
    for i in 1..=cfg.content_depth {
        register_conv(store, &format!("{}.down{}", prefix, i), cfg.stage_channels(i), c_in, false)?;
        c_in = cfg.stage_channels(i);
    }
    for head in ["head_mu", "head_logvar"] {
        store.register(
            &format!("{}.{}.weight", prefix, head),
            vec![cfg.attribute_dim, cfg.bottleneck_channels()],
            false,
        )?;
        store.register(&format!("{}.{}.bias", prefix, head), vec![cfg.attribute_dim], false)?;
    }
    Ok(())
}

fn register_generator<T: Real>(
    store: &mut ParamStore<T>,
    cfg: &NetworkConfig,
    prefix: &str,
) -> Result<()> {
    let cb = cfg.bottleneck_channels();
    register_conv(store, &format!("{}.merge", prefix), cb, cb + cfg.attribute_dim, false)?;
    let mut c_in = cb;
    for j in (0..cfg.content_depth).rev() {
        let c_out = if j >= 1 { cfg.stage_channels(j) } else { cfg.base_channels };
        let c_with_skip = if j >= 1 && cfg.skip_stage_indices.contains(&j) {
            c_in + cfg.stage_channels(j)
        } else {
            c_in
        };
        register_conv(store, &format!("{}.up{}", prefix, j), c_out, c_with_skip, false)?;
        c_in = c_out;
    }
    register_conv(store, &format!("{}.out", prefix), 3, c_in, false)
}

fn register_discriminator<T: Real>(
    store: &mut ParamStore<T>,
    cfg: &NetworkConfig,
    prefix: &str,
    in_channels: usize,
    in_side: usize,
) -> Result<()> {
    let chain = disc_chain(in_channels, in_side, cfg.base_channels, cfg.local_disc_layers);
    for l in 1..=cfg.local_disc_layers {
        register_conv(store, &format!("{}.layer{}", prefix, l), chain[l].0, chain[l - 1].0, true)?;
    }
    register_conv(store, &format!("{}.out", prefix), 1, chain[cfg.local_disc_layers].0, true)
}

// ── tape binding ────────────────────────────────────────────────────────

/// Parameters bound onto one tape. `effective` refs have spectral
/// normalization already applied and are what forward passes consume;
/// `leaves` are the raw tensors that receive gradients.
#[derive(Debug, Default)]
pub struct ParamBinding {
    effective: HashMap<String, TensorRef>,
    leaves: HashMap<String, TensorRef>,
}

impl ParamBinding {
    pub fn get(&self, name: &str) -> Result<TensorRef> {
        self.effective
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter '{}' is not bound on this tape", name)))
    }

    pub fn leaf(&self, name: &str) -> Result<TensorRef> {
        self.leaves
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter '{}' is not bound on this tape", name)))
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(|s| s.as_str())
    }

    /// Merges another binding (used when discriminator parameters are bound
    /// later in the step than the generator-side ones).
    pub fn absorb(&mut self, other: ParamBinding) {
        self.effective.extend(other.effective);
        self.leaves.extend(other.leaves);
    }
}

/// Binds the selected parameters as tape leaves. Spectrally normalized
/// weights get their normalization node recorded here, once per tape;
/// `sn_update` advances the power iteration (training-mode discriminator
/// step) while `false` reuses the stored estimate.
pub fn bind_params<T: Real>(
    tape: &mut Tape<T>,
    store: &mut ParamStore<T>,
    select: impl Fn(&str) -> bool,
    trainable: impl Fn(&str) -> bool,
    sn_update: bool,
) -> Result<ParamBinding> {
    let mut binding = ParamBinding::default();
    for entry in store.entries_mut() {
        if !select(&entry.name) {
            continue;
        }
        let leaf = tape.leaf(entry.shape.clone(), entry.data.clone(), trainable(&entry.name))?;
        let effective = match entry.sn.as_mut() {
            Some(state) => tape.spectral_normalize(leaf, state, sn_update)?,
            None => leaf,
        };
        binding.leaves.insert(entry.name.clone(), leaf);
        binding.effective.insert(entry.name.clone(), effective);
    }
    Ok(binding)
}

/// Binds every parameter in the store.
pub fn bind_all<T: Real>(
    tape: &mut Tape<T>,
    store: &mut ParamStore<T>,
    trainable: impl Fn(&str) -> bool,
    sn_update: bool,
) -> Result<ParamBinding> {
    bind_params(tape, store, |_| true, trainable, sn_update)
}

// ── codes ───────────────────────────────────────────────────────────────

/// Content code: bottleneck features plus skip tensors, shallow to deep.
#[derive(Debug, Clone)]
pub struct ContentCode {
    pub bottleneck: TensorRef,
    pub skips: Vec<TensorRef>,
}

/// Attribute code as tape nodes (training-time form).
#[derive(Debug, Clone, Copy)]
pub struct AttributeCodeRef {
    pub mu: TensorRef,
    pub log_var: TensorRef,
    pub sample: TensorRef,
}

/// Attribute code as plain vectors (evaluation-time form).
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeCode<T: Real> {
    pub mu: Vec<T>,
    pub log_var: Vec<T>,
    pub sample: Vec<T>,
}

impl<T: Real> AttributeCode<T> {
    /// Reads the code values off a tape.
    pub fn from_tape(tape: &Tape<T>, code: &AttributeCodeRef) -> Self {
        AttributeCode {
            mu: tape.data(code.mu).to_vec(),
            log_var: tape.data(code.log_var).to_vec(),
            sample: tape.data(code.sample).to_vec(),
        }
    }
}

/// Convex combination `alpha*a1 + (1-alpha)*a2` over all three fields.
/// Endpoints return the operand bit-exactly; interior alphas use the
/// `a2 + alpha*(a1-a2)` form so blending a code with itself is exact.
pub fn interpolate_attribute<T: Real>(
    a1: &AttributeCode<T>,
    a2: &AttributeCode<T>,
    alpha: f64,
) -> Result<AttributeCode<T>> {
    if a1.mu.len() != a2.mu.len() {
        return Err(Error::Shape(format!(
            "attribute dims differ: {} vs {}",
            a1.mu.len(),
            a2.mu.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {} outside [0, 1]", alpha)));
    }
    if alpha == 1.0 {
        return Ok(a1.clone());
    }
    if alpha == 0.0 {
        return Ok(a2.clone());
    }
    let a = T::from_f64(alpha);
    let mix = |x1: &[T], x2: &[T]| -> Vec<T> {
        x1.iter().zip(x2).map(|(&v1, &v2)| v2 + a * (v1 - v2)).collect()
    };
    Ok(AttributeCode {
        mu: mix(&a1.mu, &a2.mu),
        log_var: mix(&a1.log_var, &a2.log_var),
        sample: mix(&a1.sample, &a2.sample),
    })
}

// ── forward passes ──────────────────────────────────────────────────────

fn conv_block<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamBinding,
    name: &str,
    x: TensorRef,
    stride: usize,
) -> Result<TensorRef> {
    let w = params.get(&format!("{}.weight", name))?;
    let b = params.get(&format!("{}.bias", name))?;
    let y = tape.conv2d(x, w, stride, 1)?;
    tape.add_channel_bias(y, b)
}

fn expect_image<T: Real>(tape: &Tape<T>, t: TensorRef, channels: usize, side: usize) -> Result<()> {
    let s = tape.shape(t);
    if s != [channels, side, side] {
        return Err(Error::Shape(format!(
            "expected [{}, {}, {}] input, got {:?}",
            channels, side, side, s
        )));
    }
    Ok(())
}

/// Content encoder: stride-2 conv stages with leaky ReLU; returns the
/// bottleneck and the configured skip features (shallow to deep).
pub fn encode_content<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamBinding,
    prefix: &str,
    cfg: &NetworkConfig,
    image: TensorRef,
) -> Result<ContentCode> {
    expect_image(tape, image, 3, cfg.image_side)?;
    let slope = T::from_f64(LEAKY_SLOPE);
    let mut x = image;
    let mut skips = Vec::with_capacity(cfg.skip_stage_indices.len());
    for i in 1..=cfg.content_depth {
        let y = conv_block(tape, params, &format!("{}.down{}", prefix, i), x, 2)?;
        x = tape.leaky_relu(y, slope);
        if cfg.skip_stage_indices.contains(&i) {
            skips.push(x);
        }
    }
    Ok(ContentCode { bottleneck: x, skips })
}

/// Attribute encoder: conv stack, global average pool, then mu/log-var heads
/// with the reparameterized sample. `eps = None` uses the mean (evaluation).
pub fn encode_attribute<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamBinding,
    prefix: &str,
    cfg: &NetworkConfig,
    image: TensorRef,
    eps: Option<&[T]>,
) -> Result<AttributeCodeRef> {
    expect_image(tape, image, 3, cfg.image_side)?;
    let slope = T::from_f64(LEAKY_SLOPE);
    let mut x = image;
    for i in 1..=cfg.content_depth {
        let y = conv_block(tape, params, &format!("{}.down{}", prefix, i), x, 2)?;
        x = tape.leaky_relu(y, slope);
    }
    let pooled = tape.global_avg_pool_channels(x)?;
    let head = |tape: &mut Tape<T>, name: &str| -> Result<TensorRef> {
        let w = params.get(&format!("{}.{}.weight", prefix, name))?;
        let b = params.get(&format!("{}.{}.bias", prefix, name))?;
        let y = tape.linear(pooled, w)?;
        tape.add(y, b)
    };
    let mu = head(tape, "head_mu")?;
    let lv_raw = head(tape, "head_logvar")?;
    let lim = T::from_f64(LOG_VAR_LIMIT);
    let log_var = tape.clamp(lv_raw, -lim, lim)?;
    let sample = match eps {
        None => mu,
        Some(noise) => {
            if noise.len() != cfg.attribute_dim {
                return Err(Error::Shape(format!(
                    "noise length {} does not match attribute dim {}",
                    noise.len(),
                    cfg.attribute_dim
                )));
            }
            let e = tape.constant(vec![cfg.attribute_dim], noise.to_vec())?;
            let half = tape.mul_scalar(log_var, T::from_f64(0.5));
            let std = tape.exp(half);
            let scaled = tape.mul(std, e)?;
            tape.add(mu, scaled)?
        }
    };
    Ok(AttributeCodeRef { mu, log_var, sample })
}

/// Generator: broadcasts the attribute vector over the bottleneck plane,
/// concatenates, then upsamples with nearest-neighbor + conv, consuming the
/// skip features at their stages. Output is tanh-bounded to [-1, 1].
pub fn generate<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamBinding,
    prefix: &str,
    cfg: &NetworkConfig,
    attribute: TensorRef,
    content: &ContentCode,
) -> Result<TensorRef> {
    let sb = cfg.bottleneck_side();
    let cb = cfg.bottleneck_channels();
    if tape.shape(attribute) != [cfg.attribute_dim] {
        return Err(Error::Shape(format!(
            "attribute shape {:?} does not match dim {}",
            tape.shape(attribute),
            cfg.attribute_dim
        )));
    }
    if tape.shape(content.bottleneck) != [cb, sb, sb] {
        return Err(Error::Shape(format!(
            "bottleneck shape {:?} does not match config [{}, {}, {}]",
            tape.shape(content.bottleneck),
            cb,
            sb,
            sb
        )));
    }
    if content.skips.len() != cfg.skip_stage_indices.len() {
        return Err(Error::Shape(format!(
            "content carries {} skips, config expects {}",
            content.skips.len(),
            cfg.skip_stage_indices.len()
        )));
    }
    let slope = T::from_f64(LEAKY_SLOPE);
    let plane = tape.broadcast_spatial(attribute, sb, sb)?;
    let merged = tape.concat_channels(content.bottleneck, plane)?;
    let y = conv_block(tape, params, &format!("{}.merge", prefix), merged, 1)?;
    let mut x = tape.leaky_relu(y, slope);
    for j in (0..cfg.content_depth).rev() {
        x = tape.upsample_nearest(x, 2)?;
        if j >= 1 {
            if let Some(pos) = cfg.skip_stage_indices.iter().position(|&s| s == j) {
                let skip = content.skips[pos];
                let side = cfg.image_side >> j;
                expect_image(tape, skip, cfg.stage_channels(j), side)
                    .map_err(|e| Error::Shape(format!("skip at stage {}: {}", j, e)))?;
                x = tape.concat_channels(x, skip)?;
            }
        }
        let y = conv_block(tape, params, &format!("{}.up{}", prefix, j), x, 1)?;
        x = tape.leaky_relu(y, slope);
    }
    let y = conv_block(tape, params, &format!("{}.out", prefix), x, 1)?;
    Ok(tape.tanh(y))
}

/// Shared discriminator trunk: stride-2 spectrally normalized convs with
/// leaky ReLU, a 1-channel score conv, sigmoid, then the spatial mean.
fn disc_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamBinding,
    prefix: &str,
    layers: usize,
    x: TensorRef,
) -> Result<TensorRef> {
    let slope = T::from_f64(LEAKY_SLOPE);
    let mut x = x;
    for l in 1..=layers {
        let y = conv_block(tape, params, &format!("{}.layer{}", prefix, l), x, 2)?;
        x = tape.leaky_relu(y, slope);
    }
    let score = conv_block(tape, params, &format!("{}.out", prefix), x, 1)?;
    let prob = tape.sigmoid(score);
    tape.mean(prob)
}

/// Whole-image discriminator; returns a probability-like scalar in (0, 1).
pub fn discriminate_global<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamBinding,
    prefix: &str,
    cfg: &NetworkConfig,
    image: TensorRef,
) -> Result<TensorRef> {
    expect_image(tape, image, 3, cfg.image_side)?;
    disc_forward(tape, params, prefix, cfg.local_disc_layers, image)
}

/// Patch-pair discriminator: the pair is channel-concatenated in the fixed
/// order (reference, other) and scored for carrying the same makeup style.
pub fn discriminate_local<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamBinding,
    prefix: &str,
    cfg: &NetworkConfig,
    p_ref: TensorRef,
    p_other: TensorRef,
) -> Result<TensorRef> {
    discriminate_style_pair(tape, params, prefix, cfg, cfg.local_patch_side, p_ref, p_other)
}

/// Pair discriminator at an arbitrary square side; `k_local = 0` models use
/// this on whole images as the degenerate local pathway.
pub fn discriminate_style_pair<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamBinding,
    prefix: &str,
    cfg: &NetworkConfig,
    side: usize,
    p_ref: TensorRef,
    p_other: TensorRef,
) -> Result<TensorRef> {
    expect_image(tape, p_ref, 3, side)?;
    expect_image(tape, p_other, 3, side)?;
    let pair = tape.concat_channels(p_ref, p_other)?;
    disc_forward(tape, params, prefix, cfg.local_disc_layers, pair)
}
