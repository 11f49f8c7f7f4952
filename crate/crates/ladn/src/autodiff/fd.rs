//! Central finite-difference probe used to verify tape gradients. The
//! probe only runs forward evaluations, so it is independent of every
//! backward formula it checks.

/// Tolerances for comparing an analytic derivative against a central
/// difference: pass iff |a - b| <= abs_tol + rel_tol * max(|a|, |b|).
#[derive(Debug, Clone, Copy)]
pub struct FdTolerance {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for FdTolerance {
    fn default() -> Self {
        FdTolerance { step: 1e-3, rel_tol: 1e-3, abs_tol: 1e-5 }
    }
}

impl FdTolerance {
    pub fn accepts(&self, analytic: f64, fd: f64) -> bool {
        (analytic - fd).abs() <= self.abs_tol + self.rel_tol * analytic.abs().max(fd.abs())
    }
}

/// One probed element that disagreed with the tape gradient.
#[derive(Debug, Clone)]
pub struct FdFailure {
    pub label: String,
    pub index: usize,
    pub analytic: f64,
    pub fd: f64,
}

/// Aggregate outcome of a probe sweep.
#[derive(Debug, Default, Clone)]
pub struct FdReport {
    pub checked: usize,
    /// max over probes of |a-b| / max(|a|, |b|, 1e-8), after the absolute
    /// floor has been subtracted; 0 when every probe hit within abs_tol.
    pub max_rel_err: f64,
    pub failures: Vec<FdFailure>,
}

impl FdReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend(other.failures);
    }

    pub fn record(&mut self, tol: &FdTolerance, label: &str, index: usize, analytic: f64, fd: f64) {
        self.checked += 1;
        let excess = ((analytic - fd).abs() - tol.abs_tol).max(0.0);
        let rel = excess / analytic.abs().max(fd.abs()).max(1e-8);
        self.max_rel_err = self.max_rel_err.max(rel);
        if !tol.accepts(analytic, fd) {
            self.failures.push(FdFailure { label: label.to_string(), index, analytic, fd });
        }
    }
}

/// Central difference of `eval` w.r.t. element `i` of `buf`. The buffer is
/// restored bit-exactly afterwards.
pub fn central_diff<F>(buf: &mut [f64], i: usize, step: f64, eval: &mut F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let orig = buf[i];
    buf[i] = orig + step;
    let lp = eval(buf);
    buf[i] = orig - step;
    let lm = eval(buf);
    buf[i] = orig;
    (lp - lm) / (2.0 * step)
}

/// Deterministic probe-index selection: up to `max_probes` indices spread
/// evenly over `len` elements (all of them when the tensor is small).
pub fn probe_indices(len: usize, max_probes: usize) -> Vec<usize> {
    if len <= max_probes {
        (0..len).collect()
    } else {
        (0..max_probes).map(|k| k * len / max_probes).collect()
    }
}
