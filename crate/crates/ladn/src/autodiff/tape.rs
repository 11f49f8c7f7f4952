use super::kernels;
use super::real::Real;
use super::tensor::{Tensor, TensorRef};
use crate::error::{Error, Result};

/// Power-iteration state for one spectrally normalized weight matrix.
/// Both vectors are kept unit-norm and are persisted in checkpoints.
#[derive(Debug, Clone)]
pub struct SnState<T: Real> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> SnState<T> {
    /// Current singular-value estimate u^T W v for a rows x cols weight.
    pub fn sigma_estimate(&self, w: &[T]) -> T {
        let cols = self.v.len();
        debug_assert_eq!(w.len(), self.u.len() * cols);
        let mut sigma = T::ZERO;
        for (r, &ur) in self.u.iter().enumerate() {
            let mut acc = T::ZERO;
            for (wv, vv) in w[r * cols..(r + 1) * cols].iter().zip(&self.v) {
                acc = acc + *wv * *vv;
            }
            sigma = sigma + ur * acc;
        }
        sigma
    }

    /// Deterministic non-degenerate start: normalized alternating ramp.
    pub fn new(rows: usize, cols: usize) -> Self {
        let mk = |n: usize| {
            let mut v: Vec<T> = (0..n)
                .map(|i| T::from_f64(1.0 + 0.37 * ((i % 7) as f64 - 3.0)))
                .collect();
            normalize(&mut v);
            v
        };
        SnState { u: mk(rows), v: mk(cols) }
    }
}

/// Scales `x` to unit length; returns false (leaving `x` untouched) when the
/// norm is too small to divide by.
fn normalize<T: Real>(x: &mut [T]) -> bool {
    let mut n2 = 0.0f64;
    for v in x.iter() {
        n2 += v.to_f64() * v.to_f64();
    }
    let n = n2.sqrt();
    if n < T::tiny().to_f64() {
        return false;
    }
    let inv = T::from_f64(1.0 / n);
    for v in x.iter_mut() {
        *v = *v * inv;
    }
    true
}

/// Operation record; carries whatever the backward pass needs beyond the
/// input/output node data.
#[derive(Debug, Clone)]
enum Op<T: Real> {
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar(T),
    LeakyRelu(T),
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Clamp { lo: T, hi: T },
    Conv2d { stride: usize, pad: usize },
    AddChannelBias,
    Linear,
    Stencil3x3 { kernel: [T; 9] },
    ConcatChannels,
    CropPatch { y0: usize, x0: usize, side: usize },
    UpsampleNearest { factor: usize },
    Mean,
    Sum,
    MeanAbs,
    L1Distance,
    GlobalAvgPoolChannels,
    BroadcastSpatial,
    SpectralNorm { u: Vec<T>, v: Vec<T>, sigma: T, clamped: bool },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddScalar => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Clamp { .. } => "clamp",
            Op::Conv2d { .. } => "conv2d",
            Op::AddChannelBias => "add_channel_bias",
            Op::Linear => "linear",
            Op::Stencil3x3 { .. } => "stencil3x3",
            Op::ConcatChannels => "concat_channels",
            Op::CropPatch { .. } => "crop_patch",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::MeanAbs => "mean_abs",
            Op::L1Distance => "l1_distance",
            Op::GlobalAvgPoolChannels => "global_avg_pool_channels",
            Op::BroadcastSpatial => "broadcast_spatial",
            Op::SpectralNorm { .. } => "spectral_normalize",
        }
    }
}

#[derive(Debug)]
struct OpRec<T: Real> {
    op: Op<T>,
    inputs: Vec<TensorRef>,
    out: TensorRef,
}

/// Wengert tape: append-only list of tensors plus the op records that
/// produced them. Single-writer; a tape and its tensors stay on one thread.
/// `backward` replays the records in reverse exactly once per call and
/// accumulates into leaf gradients (repeated calls keep accumulating).
#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Tensor<T>>,
    ops: Vec<OpRec<T>>,
    check_finite: bool,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), check_finite: false }
    }

    /// Debug mode: panic as soon as any op produces a NaN/Inf.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, t: TensorRef) -> &Tensor<T> {
        &self.nodes[t.0]
    }
    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.nodes[t.0].shape
    }
    pub fn data(&self, t: TensorRef) -> &[T] {
        &self.nodes[t.0].data
    }
    pub fn grad(&self, t: TensorRef) -> Option<&[T]> {
        self.nodes[t.0].grad.as_deref()
    }
    pub fn numel(&self, t: TensorRef) -> usize {
        self.nodes[t.0].data.len()
    }

    /// Scalar value of a [1]-shaped tensor.
    pub fn value(&self, t: TensorRef) -> T {
        debug_assert_eq!(self.numel(t), 1);
        self.nodes[t.0].data[0]
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<TensorRef> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(Tensor { shape, data, requires_grad, grad: None }))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<TensorRef> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: T) -> TensorRef {
        self.push(Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None })
    }

    fn push(&mut self, t: Tensor<T>) -> TensorRef {
        self.nodes.push(t);
        TensorRef(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op<T>, inputs: Vec<TensorRef>, shape: Vec<usize>, data: Vec<T>) -> TensorRef {
        if self.check_finite {
            for (i, v) in data.iter().enumerate() {
                assert!(
                    v.is_finite(),
                    "non-finite value {:?} at index {} out of op '{}'",
                    v,
                    i,
                    op.name()
                );
            }
        }
        let requires_grad = inputs.iter().any(|r| self.nodes[r.0].requires_grad);
        let out = self.push(Tensor { shape, data, requires_grad, grad: None });
        self.ops.push(OpRec { op, inputs, out });
        out
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn check_same_shape(&self, a: TensorRef, b: TensorRef, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{}: shape mismatch {:?} vs {:?}",
                op,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_same_shape(a, b, "add")?;
        let data = self.zip(a, b, |x, y| x + y);
        Ok(self.record(Op::Add, vec![a, b], self.nodes[a.0].shape.clone(), data))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_same_shape(a, b, "sub")?;
        let data = self.zip(a, b, |x, y| x - y);
        Ok(self.record(Op::Sub, vec![a, b], self.nodes[a.0].shape.clone(), data))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_same_shape(a, b, "mul")?;
        let data = self.zip(a, b, |x, y| x * y);
        Ok(self.record(Op::Mul, vec![a, b], self.nodes[a.0].shape.clone(), data))
    }

    fn zip(&self, a: TensorRef, b: TensorRef, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    fn map(&mut self, a: TensorRef, op: Op<T>, f: impl Fn(T) -> T) -> TensorRef {
        let data: Vec<T> = self.data(a).iter().map(|&x| f(x)).collect();
        self.record(op, vec![a], self.nodes[a.0].shape.clone(), data)
    }

    pub fn add_scalar(&mut self, a: TensorRef, c: T) -> TensorRef {
        self.map(a, Op::AddScalar, |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: TensorRef, c: T) -> TensorRef {
        self.map(a, Op::MulScalar(c), |x| x * c)
    }

    /// slope must lie in (0, 1); gradient at exactly 0 uses the positive branch.
    pub fn leaky_relu(&mut self, a: TensorRef, slope: T) -> TensorRef {
        debug_assert!(slope > T::ZERO && slope < T::ONE);
        self.map(a, Op::LeakyRelu(slope), |x| if x >= T::ZERO { x } else { x * slope })
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> TensorRef {
        self.map(a, Op::Sigmoid, |x| {
            // Branching keeps exp() argument non-positive: stable for |x| up to
            // the full finite range.
            if x >= T::ZERO {
                T::ONE / (T::ONE + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::ONE + e)
            }
        })
    }

    pub fn tanh(&mut self, a: TensorRef) -> TensorRef {
        self.map(a, Op::Tanh, |x| x.tanh())
    }

    pub fn exp(&mut self, a: TensorRef) -> TensorRef {
        self.map(a, Op::Exp, |x| x.exp())
    }

    /// Natural log. Caller guards the domain (clamp upstream); sub-domain
    /// inputs surface as non-finite outputs in the debug-finite mode.
    pub fn log(&mut self, a: TensorRef) -> TensorRef {
        self.map(a, Op::Log, |x| x.ln())
    }

    /// Gradient is 1 inside [lo, hi] (inclusive), 0 outside.
    pub fn clamp(&mut self, a: TensorRef, lo: T, hi: T) -> Result<TensorRef> {
        if !(lo < hi) {
            return Err(Error::Shape(format!("clamp: lo {:?} must be < hi {:?}", lo, hi)));
        }
        Ok(self.map(a, Op::Clamp { lo, hi }, |x| x.max(lo).min(hi)))
    }

    // ── structure ───────────────────────────────────────────────────────

    /// input [C_in, H, W], kernel [C_out, C_in, k, k] -> [C_out, H', W'].
    pub fn conv2d(&mut self, input: TensorRef, kernel: TensorRef, stride: usize, pad: usize) -> Result<TensorRef> {
        let ishape = self.shape(input);
        let kshape = self.shape(kernel);
        if ishape.len() != 3 || kshape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d: want input [C,H,W] and kernel [Co,Ci,k,k], got {:?} and {:?}",
                ishape, kshape
            )));
        }
        let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (c_out, kc_in, k, k2) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kc_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d: kernel expects {} input channels, input has {}",
                kc_in, c_in
            )));
        }
        if k != k2 {
            return Err(Error::Shape(format!("conv2d: non-square kernel {}x{}", k, k2)));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be >= 1".into()));
        }
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::Shape(format!(
                "conv2d: kernel {} exceeds padded input {}x{}",
                k,
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = kernels::conv_out_side(h, k, stride, pad);
        let ow = kernels::conv_out_side(w, k, stride, pad);
        let mut out = vec![T::ZERO; c_out * oh * ow];
        kernels::conv2d_forward(
            self.data(input),
            c_in,
            h,
            w,
            self.data(kernel),
            c_out,
            k,
            stride,
            pad,
            &mut out,
            oh,
            ow,
        );
        Ok(self.record(Op::Conv2d { stride, pad }, vec![input, kernel], vec![c_out, oh, ow], out))
    }

    /// x [C, H, W] + bias [C], broadcast over the spatial plane.
    pub fn add_channel_bias(&mut self, x: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        if xs.len() != 3 || bs.len() != 1 || bs[0] != xs[0] {
            return Err(Error::Shape(format!(
                "add_channel_bias: got x {:?}, bias {:?}",
                xs, bs
            )));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let shape = xs.to_vec();
        let mut out = Vec::with_capacity(c * hw);
        for ch in 0..c {
            let b = self.data(bias)[ch];
            out.extend(self.data(x)[ch * hw..(ch + 1) * hw].iter().map(|&v| v + b));
        }
        Ok(self.record(Op::AddChannelBias, vec![x, bias], shape, out))
    }

    /// x [In], weight [Out, In] -> [Out].
    pub fn linear(&mut self, x: TensorRef, weight: TensorRef) -> Result<TensorRef> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(Error::Shape(format!("linear: got x {:?}, weight {:?}", xs, ws)));
        }
        let (o, i) = (ws[0], ws[1]);
        let mut out = vec![T::ZERO; o];
        for j in 0..o {
            let row = &self.data(weight)[j * i..(j + 1) * i];
            let mut acc = T::ZERO;
            for (wv, xv) in row.iter().zip(self.data(x)) {
                acc = acc + *wv * *xv;
            }
            out[j] = acc;
        }
        Ok(self.record(Op::Linear, vec![x, weight], vec![o], out))
    }

    /// Fixed 3x3 stencil, replicate padding, per channel; spatial size kept.
    /// H and W must be at least 1; meaningful for Laplacians when >= 3.
    pub fn stencil3x3(&mut self, x: TensorRef, kernel: [T; 9]) -> Result<TensorRef> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::Shape(format!("stencil3x3: want [C,H,W], got {:?}", xs)));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if h == 0 || w == 0 {
            return Err(Error::Shape("stencil3x3: empty spatial plane".into()));
        }
        let shape = xs.to_vec();
        let mut out = vec![T::ZERO; c * h * w];
        kernels::stencil3x3_replicate(self.data(x), c, h, w, &kernel, &mut out);
        Ok(self.record(Op::Stencil3x3 { kernel }, vec![x], shape, out))
    }

    /// Concatenate along the channel axis; spatial planes must agree.
    /// A zero-channel operand is the neutral element.
    pub fn concat_channels(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::Shape(format!(
                "concat_channels: spatial mismatch {:?} vs {:?}",
                sa, sb
            )));
        }
        let shape = vec![sa[0] + sb[0], sa[1], sa[2]];
        let mut data = Vec::with_capacity(shape.iter().product());
        data.extend_from_slice(self.data(a));
        data.extend_from_slice(self.data(b));
        Ok(self.record(Op::ConcatChannels, vec![a, b], shape, data))
    }

    /// Square crop [C, side, side] at (y0, x0); the box must lie inside.
    pub fn crop_patch(&mut self, x: TensorRef, y0: usize, x0: usize, side: usize) -> Result<TensorRef> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::Shape(format!("crop_patch: want [C,H,W], got {:?}", xs)));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if y0 + side > h || x0 + side > w || side == 0 {
            return Err(Error::Shape(format!(
                "crop_patch: box ({}, {}) side {} outside {}x{}",
                y0, x0, side, h, w
            )));
        }
        let mut data = Vec::with_capacity(c * side * side);
        for ch in 0..c {
            let plane = &self.data(x)[ch * h * w..][..h * w];
            for y in 0..side {
                let row = &plane[(y0 + y) * w + x0..][..side];
                data.extend_from_slice(row);
            }
        }
        Ok(self.record(Op::CropPatch { y0, x0, side }, vec![x], vec![c, side, side], data))
    }

    pub fn upsample_nearest(&mut self, x: TensorRef, factor: usize) -> Result<TensorRef> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::Shape(format!("upsample_nearest: want [C,H,W], got {:?}", xs)));
        }
        if factor == 0 {
            return Err(Error::Shape("upsample_nearest: factor must be >= 1".into()));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![T::ZERO; c * oh * ow];
        for ch in 0..c {
            let ip = &self.data(x)[ch * h * w..][..h * w];
            let op = &mut data[ch * oh * ow..(ch + 1) * oh * ow];
            for oy in 0..oh {
                let iy = oy / factor;
                for ox in 0..ow {
                    op[oy * ow + ox] = ip[iy * w + ox / factor];
                }
            }
        }
        Ok(self.record(Op::UpsampleNearest { factor }, vec![x], vec![c, oh, ow], data))
    }

    // ── reductions (f64 accumulation) ───────────────────────────────────

    fn reduce(&self, t: TensorRef, f: impl Fn(f64, T) -> f64) -> Result<f64> {
        if self.numel(t) == 0 {
            return Err(Error::Shape("reduction over empty tensor".into()));
        }
        Ok(self.data(t).iter().fold(0.0f64, |acc, &v| f(acc, v)))
    }

    /// Mean over every element -> scalar [1].
    pub fn mean(&mut self, t: TensorRef) -> Result<TensorRef> {
        let n = self.numel(t) as f64;
        let s = self.reduce(t, |a, v| a + v.to_f64())?;
        Ok(self.record(Op::Mean, vec![t], vec![1], vec![T::from_f64(s / n)]))
    }

    /// Alias required by the discriminator head: average over all elements.
    pub fn avg_pool_all(&mut self, t: TensorRef) -> Result<TensorRef> {
        self.mean(t)
    }

    pub fn sum(&mut self, t: TensorRef) -> Result<TensorRef> {
        let s = self.reduce(t, |a, v| a + v.to_f64())?;
        Ok(self.record(Op::Sum, vec![t], vec![1], vec![T::from_f64(s)]))
    }

    /// mean(|x|); the subgradient at 0 is 0.
    pub fn mean_abs(&mut self, t: TensorRef) -> Result<TensorRef> {
        let n = self.numel(t) as f64;
        let s = self.reduce(t, |a, v| a + v.to_f64().abs())?;
        Ok(self.record(Op::MeanAbs, vec![t], vec![1], vec![T::from_f64(s / n)]))
    }

    /// mean(|a - b|) over identically shaped tensors.
    pub fn l1_distance(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_same_shape(a, b, "l1_distance")?;
        if self.numel(a) == 0 {
            return Err(Error::Shape("l1_distance over empty tensor".into()));
        }
        let n = self.numel(a) as f64;
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .fold(0.0f64, |acc, (&x, &y)| acc + (x - y).to_f64().abs());
        Ok(self.record(Op::L1Distance, vec![a, b], vec![1], vec![T::from_f64(s / n)]))
    }

    /// [C, H, W] -> [C]: per-channel spatial mean.
    pub fn global_avg_pool_channels(&mut self, t: TensorRef) -> Result<TensorRef> {
        let xs = self.shape(t);
        if xs.len() != 3 || xs[1] * xs[2] == 0 {
            return Err(Error::Shape(format!(
                "global_avg_pool_channels: want non-empty [C,H,W], got {:?}",
                xs
            )));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let s: f64 = self.data(t)[ch * hw..(ch + 1) * hw]
                .iter()
                .fold(0.0f64, |a, &v| a + v.to_f64());
            out.push(T::from_f64(s / hw as f64));
        }
        Ok(self.record(Op::GlobalAvgPoolChannels, vec![t], vec![c], out))
    }

    /// [C] -> [C, h, w], constant across the spatial plane.
    pub fn broadcast_spatial(&mut self, t: TensorRef, h: usize, w: usize) -> Result<TensorRef> {
        let xs = self.shape(t);
        if xs.len() != 1 {
            return Err(Error::Shape(format!("broadcast_spatial: want [C], got {:?}", xs)));
        }
        let c = xs[0];
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let v = self.data(t)[ch];
            data.extend(std::iter::repeat(v).take(h * w));
        }
        Ok(self.record(Op::BroadcastSpatial, vec![t], vec![c, h, w], data))
    }

    // ── spectral normalization ──────────────────────────────────────────

    /// Normalizes `weight` (viewed as rows x cols) by its estimated leading
    /// singular value. With `update`, runs one power-iteration step on the
    /// state first (training-mode behaviour). sigma is floored at machine
    /// epsilon so a zero matrix stays finite. Output keeps the input shape.
    pub fn spectral_normalize(
        &mut self,
        weight: TensorRef,
        state: &mut SnState<T>,
        update: bool,
    ) -> Result<TensorRef> {
        let shape = self.shape(weight).to_vec();
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        if rows == 0 || cols == 0 {
            return Err(Error::Shape("spectral_normalize: empty matrix".into()));
        }
        if state.u.len() != rows || state.v.len() != cols {
            return Err(Error::Shape(format!(
                "spectral_normalize: state dims ({}, {}) do not match weight {}x{}",
                state.u.len(),
                state.v.len(),
                rows,
                cols
            )));
        }
        let wdata = self.data(weight).to_vec();
        if update {
            // v <- normalize(W^T u); u <- normalize(W v). A degenerate
            // product (zero matrix) keeps the previous unit direction.
            let mut v_new = vec![T::ZERO; cols];
            for r in 0..rows {
                let u_r = state.u[r];
                let row = &wdata[r * cols..(r + 1) * cols];
                for (cidx, wv) in row.iter().enumerate() {
                    v_new[cidx] = v_new[cidx] + *wv * u_r;
                }
            }
            if normalize(&mut v_new) {
                state.v = v_new;
            }
            let mut u_new = vec![T::ZERO; rows];
            for r in 0..rows {
                let row = &wdata[r * cols..(r + 1) * cols];
                let mut acc = T::ZERO;
                for (wv, vv) in row.iter().zip(&state.v) {
                    acc = acc + *wv * *vv;
                }
                u_new[r] = acc;
            }
            if normalize(&mut u_new) {
                state.u = u_new;
            }
        }
        // sigma = u^T W v with the current (frozen-for-backward) vectors.
        let mut sigma = T::ZERO;
        for r in 0..rows {
            let row = &wdata[r * cols..(r + 1) * cols];
            let mut acc = T::ZERO;
            for (wv, vv) in row.iter().zip(&state.v) {
                acc = acc + *wv * *vv;
            }
            sigma = sigma + state.u[r] * acc;
        }
        let clamped = !(sigma > T::tiny());
        let sigma_safe = if clamped { T::tiny() } else { sigma };
        let inv = T::ONE / sigma_safe;
        let data: Vec<T> = wdata.iter().map(|&v| v * inv).collect();
        Ok(self.record(
            Op::SpectralNorm { u: state.u.clone(), v: state.v.clone(), sigma: sigma_safe, clamped },
            vec![weight],
            shape,
            data,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of all requires-grad
    /// nodes accumulate (call sites reset between steps by dropping the tape).
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // loss does not depend on any tracked tensor
        }
        // Fresh working buffers per pass so a repeated backward adds another
        // unit of gradient instead of compounding the stored seed.
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);
        for rec in self.ops.iter().rev() {
            if !self.nodes[rec.out.0].requires_grad {
                continue;
            }
            let g = match grads[rec.out.0].take() {
                Some(g) => g,
                None => continue,
            };
            backward_op(&self.nodes, rec, &g, &mut grads);
            grads[rec.out.0] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a = *a + *b;
                        }
                    }
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn ensure<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], idx: usize, n: usize) -> &'a mut [T] {
    grads[idx].get_or_insert_with(|| vec![T::ZERO; n])
}

/// Accumulate this op's input gradients given the output gradient `g`.
fn backward_op<T: Real>(nodes: &[Tensor<T>], rec: &OpRec<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let input = |i: usize| &nodes[rec.inputs[i].0];
    let wants = |i: usize| nodes[rec.inputs[i].0].requires_grad;
    let idx = |i: usize| rec.inputs[i].0;
    match &rec.op {
        Op::Add => {
            for i in 0..2 {
                if wants(i) {
                    let da = ensure(grads, idx(i), input(i).numel());
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
            }
        }
        Op::Sub => {
            if wants(0) {
                let da = ensure(grads, idx(0), input(0).numel());
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d = *d + gv;
                }
            }
            if wants(1) {
                let db = ensure(grads, idx(1), input(1).numel());
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d = *d - gv;
                }
            }
        }
        Op::Mul => {
            // handle a == b (same node twice) by accumulating sequentially
            if wants(0) {
                let bdata = &input(1).data;
                let da = ensure(grads, idx(0), input(0).numel());
                for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(bdata) {
                    *d = *d + gv * bv;
                }
            }
            if wants(1) {
                let adata = &input(0).data;
                let db = ensure(grads, idx(1), input(1).numel());
                for ((d, &gv), &av) in db.iter_mut().zip(g).zip(adata) {
                    *d = *d + gv * av;
                }
            }
        }
        Op::AddScalar => {
            if wants(0) {
                let da = ensure(grads, idx(0), input(0).numel());
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d = *d + gv;
                }
            }
        }
        Op::MulScalar(c) => {
            if wants(0) {
                let c = *c;
                let da = ensure(grads, idx(0), input(0).numel());
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d = *d + gv * c;
                }
            }
        }
        Op::LeakyRelu(slope) => {
            if wants(0) {
                let s = *slope;
                let x = &input(0).data;
                let da = ensure(grads, idx(0), x.len());
                for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                    *d = *d + if xv >= T::ZERO { gv } else { gv * s };
                }
            }
        }
        Op::Sigmoid => {
            if wants(0) {
                let y = &nodes[rec.out.0].data;
                let da = ensure(grads, idx(0), y.len());
                for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(y) {
                    *d = *d + gv * yv * (T::ONE - yv);
                }
            }
        }
        Op::Tanh => {
            if wants(0) {
                let y = &nodes[rec.out.0].data;
                let da = ensure(grads, idx(0), y.len());
                for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(y) {
                    *d = *d + gv * (T::ONE - yv * yv);
                }
            }
        }
        Op::Exp => {
            if wants(0) {
                let y = &nodes[rec.out.0].data;
                let da = ensure(grads, idx(0), y.len());
                for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(y) {
                    *d = *d + gv * yv;
                }
            }
        }
        Op::Log => {
            if wants(0) {
                let x = &input(0).data;
                let da = ensure(grads, idx(0), x.len());
                for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                    *d = *d + gv / xv;
                }
            }
        }
        Op::Clamp { lo, hi } => {
            if wants(0) {
                let (lo, hi) = (*lo, *hi);
                let x = &input(0).data;
                let da = ensure(grads, idx(0), x.len());
                for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(x) {
                    if xv >= lo && xv <= hi {
                        *d = *d + gv;
                    }
                }
            }
        }
        Op::Conv2d { stride, pad } => {
            let ishape = input(0).shape.clone();
            let kshape = input(1).shape.clone();
            let oshape = nodes[rec.out.0].shape.clone();
            let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
            let (c_out, k) = (kshape[0], kshape[2]);
            let (oh, ow) = (oshape[1], oshape[2]);
            if wants(0) {
                let kd = &input(1).data;
                let da = ensure(grads, idx(0), c_in * h * w);
                kernels::conv2d_backward_input(g, c_out, oh, ow, kd, c_in, k, *stride, *pad, da, h, w);
            }
            if wants(1) {
                let xd = &input(0).data;
                let dk = ensure(grads, idx(1), c_out * c_in * k * k);
                kernels::conv2d_backward_kernel(g, c_out, oh, ow, xd, c_in, h, w, k, *stride, *pad, dk);
            }
        }
        Op::AddChannelBias => {
            let xs = input(0).shape.clone();
            let (c, hw) = (xs[0], xs[1] * xs[2]);
            if wants(0) {
                let da = ensure(grads, idx(0), c * hw);
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d = *d + gv;
                }
            }
            if wants(1) {
                let db = ensure(grads, idx(1), c);
                for ch in 0..c {
                    let mut acc = T::ZERO;
                    for &gv in &g[ch * hw..(ch + 1) * hw] {
                        acc = acc + gv;
                    }
                    db[ch] = db[ch] + acc;
                }
            }
        }
        Op::Linear => {
            let ws = input(1).shape.clone();
            let (o, i) = (ws[0], ws[1]);
            if wants(0) {
                let wd = &input(1).data;
                let dx = ensure(grads, idx(0), i);
                for j in 0..o {
                    let gj = g[j];
                    let row = &wd[j * i..(j + 1) * i];
                    for (d, &wv) in dx.iter_mut().zip(row) {
                        *d = *d + gj * wv;
                    }
                }
            }
            if wants(1) {
                let xd = &input(0).data;
                let dw = ensure(grads, idx(1), o * i);
                for j in 0..o {
                    let gj = g[j];
                    let drow = &mut dw[j * i..(j + 1) * i];
                    for (d, &xv) in drow.iter_mut().zip(xd) {
                        *d = *d + gj * xv;
                    }
                }
            }
        }
        Op::Stencil3x3 { kernel } => {
            if wants(0) {
                let xs = input(0).shape.clone();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let da = ensure(grads, idx(0), c * h * w);
                kernels::stencil3x3_replicate_backward(g, c, h, w, kernel, da);
            }
        }
        Op::ConcatChannels => {
            let na = input(0).numel();
            if wants(0) {
                let da = ensure(grads, idx(0), na);
                for (d, &gv) in da.iter_mut().zip(&g[..na]) {
                    *d = *d + gv;
                }
            }
            if wants(1) {
                let nb = input(1).numel();
                let db = ensure(grads, idx(1), nb);
                for (d, &gv) in db.iter_mut().zip(&g[na..na + nb]) {
                    *d = *d + gv;
                }
            }
        }
        Op::CropPatch { y0, x0, side } => {
            if wants(0) {
                let xs = input(0).shape.clone();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let s = *side;
                let da = ensure(grads, idx(0), c * h * w);
                for ch in 0..c {
                    let dplane = &mut da[ch * h * w..][..h * w];
                    let gplane = &g[ch * s * s..][..s * s];
                    for y in 0..s {
                        let drow = &mut dplane[(y0 + y) * w + x0..][..s];
                        let grow = &gplane[y * s..][..s];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = *d + gv;
                        }
                    }
                }
            }
        }
        Op::UpsampleNearest { factor } => {
            if wants(0) {
                let xs = input(0).shape.clone();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let f = *factor;
                let (oh, ow) = (h * f, w * f);
                let da = ensure(grads, idx(0), c * h * w);
                for ch in 0..c {
                    let dplane = &mut da[ch * h * w..][..h * w];
                    let gplane = &g[ch * oh * ow..][..oh * ow];
                    for oy in 0..oh {
                        let iy = oy / f;
                        for ox in 0..ow {
                            let di = iy * w + ox / f;
                            dplane[di] = dplane[di] + gplane[oy * ow + ox];
                        }
                    }
                }
            }
        }
        Op::Mean => {
            if wants(0) {
                let n = input(0).numel();
                let gv = g[0] * (T::ONE / T::from_f64(n as f64));
                let da = ensure(grads, idx(0), n);
                for d in da.iter_mut() {
                    *d = *d + gv;
                }
            }
        }
        Op::Sum => {
            if wants(0) {
                let n = input(0).numel();
                let gv = g[0];
                let da = ensure(grads, idx(0), n);
                for d in da.iter_mut() {
                    *d = *d + gv;
                }
            }
        }
        Op::MeanAbs => {
            if wants(0) {
                let n = input(0).numel();
                let x = &input(0).data;
                let gv = g[0] * (T::ONE / T::from_f64(n as f64));
                let da = ensure(grads, idx(0), n);
                for (d, &xv) in da.iter_mut().zip(x) {
                    if xv > T::ZERO {
                        *d = *d + gv;
                    } else if xv < T::ZERO {
                        *d = *d - gv;
                    }
                }
            }
        }
        Op::L1Distance => {
            let n = input(0).numel();
            let gv = g[0] * (T::ONE / T::from_f64(n as f64));
            let diffs: Vec<T> = input(0)
                .data
                .iter()
                .zip(&input(1).data)
                .map(|(&a, &b)| a - b)
                .collect();
            if wants(0) {
                let da = ensure(grads, idx(0), n);
                for (d, &dv) in da.iter_mut().zip(&diffs) {
                    if dv > T::ZERO {
                        *d = *d + gv;
                    } else if dv < T::ZERO {
                        *d = *d - gv;
                    }
                }
            }
            if wants(1) {
                let db = ensure(grads, idx(1), n);
                for (d, &dv) in db.iter_mut().zip(&diffs) {
                    if dv > T::ZERO {
                        *d = *d - gv;
                    } else if dv < T::ZERO {
                        *d = *d + gv;
                    }
                }
            }
        }
        Op::GlobalAvgPoolChannels => {
            if wants(0) {
                let xs = input(0).shape.clone();
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                let inv = T::ONE / T::from_f64(hw as f64);
                let da = ensure(grads, idx(0), c * hw);
                for ch in 0..c {
                    let gv = g[ch] * inv;
                    for d in &mut da[ch * hw..(ch + 1) * hw] {
                        *d = *d + gv;
                    }
                }
            }
        }
        Op::BroadcastSpatial => {
            if wants(0) {
                let os = nodes[rec.out.0].shape.clone();
                let (c, hw) = (os[0], os[1] * os[2]);
                let da = ensure(grads, idx(0), c);
                for ch in 0..c {
                    let mut acc = T::ZERO;
                    for &gv in &g[ch * hw..(ch + 1) * hw] {
                        acc = acc + gv;
                    }
                    da[ch] = da[ch] + acc;
                }
            }
        }
        Op::SpectralNorm { u, v, sigma, clamped } => {
            if wants(0) {
                // Y = W / sigma, sigma = u^T W v (u, v constants):
                // dW = g/sigma - (<g, W> / sigma^2) u v^T.
                // When sigma was floored (zero matrix), the floor is constant
                // and only the first term survives.
                let wdata = &input(0).data;
                let inv = T::ONE / *sigma;
                let mut dot = T::ZERO;
                if !clamped {
                    for (&gv, &wv) in g.iter().zip(wdata) {
                        dot = dot + gv * wv;
                    }
                }
                let coef = dot * inv * inv;
                let cols = v.len();
                let da = ensure(grads, idx(0), wdata.len());
                for r in 0..u.len() {
                    let ur = u[r];
                    let drow = &mut da[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    for ((d, &gv), &vv) in drow.iter_mut().zip(grow).zip(v) {
                        *d = *d + gv * inv - coef * ur * vv;
                    }
                }
            }
        }
    }
}
