//! Minimal differentiable network core: affine layers with optional leaky
//! ReLU, optional spectral normalization, element-wise condition gating,
//! exact reverse-mode gradients, Adam, gradient checking, and parameter
//! serialization.
//!
//! Everything is `f64`; the gradient checker verifies backward against
//! central finite differences to better than 1e-6 relative error.
//!
//! Spectral normalization keeps a persistent left vector `u` per layer.
//! [`NetworkParams::refresh_spectral`] advances the power iteration (a state
//! mutation), and [`NetworkParams::sn_snapshot`] freezes `(sigma, v)` for a
//! set of forward/backward passes. With the snapshot frozen, the effective
//! weight `W / (u' W v)` is an exact differentiable function of `W`, so
//! backward matches finite differences even through the normalization.

mod serial;

pub use serial::{load_params, params_from_bytes, params_to_bytes, save_params};
pub(crate) use serial::{read_net as serial_read_net, write_net as serial_write_net};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("expected {expected} gate vectors, got {got}")]
    GateCount { expected: usize, got: usize },
    #[error("corrupt parameter file: {0}")]
    Corrupt(String),
    #[error("unsupported parameter file version {0}")]
    Version(u32),
    #[error("parameter file does not match the expected layer specs: {0}")]
    SpecMismatch(String),
}

/// Layer activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    /// Leaky ReLU with the given negative-side slope (in (0,1)).
    LeakyRelu(f64),
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::LeakyRelu(slope) => {
                if z >= 0.0 {
                    z
                } else {
                    slope * z
                }
            }
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::LeakyRelu(slope) => {
                if z >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

/// Shape and kind of one affine layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub spectral_norm: bool,
}

/// One affine layer; weights are row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    /// Persistent power-iteration vector, present iff `spec.spectral_norm`.
    pub sn_u: Option<Vec<f64>>,
}

/// A feed-forward network with optional condition gates.
///
/// `gate_layers[k]` is the index of the layer whose post-activation output
/// is multiplied element-wise by the k-th gate vector before feeding the
/// next layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
    pub gate_layers: Vec<usize>,
}

/// Frozen `(sigma, v)` for every spectral-norm layer; `None` entries are
/// unnormalized layers. `degenerate` marks layers whose weight was (near)
/// zero, left unnormalized.
#[derive(Debug, Clone)]
pub struct SnSnapshot {
    pub entries: Vec<Option<SnEntry>>,
}

#[derive(Debug, Clone)]
pub struct SnEntry {
    pub sigma: f64,
    pub v: Vec<f64>,
    pub degenerate: bool,
}

impl NetworkParams {
    /// Build a network from layer specs with random initialization
    /// (He-style scaling for leaky ReLU fan-in).
    pub fn init(specs: &[LayerSpec], gate_layers: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<Self, NetError> {
        for pair in specs.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(NetError::Dimension(format!(
                    "layer output {} feeds layer input {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        for &g in &gate_layers {
            if g >= specs.len() {
                return Err(NetError::Dimension(format!("gate attached past layer {g}")));
            }
        }
        let layers = specs
            .iter()
            .map(|spec| {
                let n = spec.in_dim * spec.out_dim;
                let gain = match spec.activation {
                    Activation::Linear => 1.0,
                    Activation::LeakyRelu(slope) => (2.0 / (1.0 + slope * slope)).sqrt(),
                };
                let std = gain / (spec.in_dim as f64).sqrt();
                let w = (0..n).map(|_| gauss(rng) * std).collect();
                let b = vec![0.0; spec.out_dim];
                let sn_u = spec.spectral_norm.then(|| {
                    let mut u: Vec<f64> = (0..spec.out_dim).map(|_| gauss(rng)).collect();
                    normalize_in_place(&mut u);
                    u
                });
                Layer { spec: *spec, w, b, sn_u }
            })
            .collect();
        Ok(Self { layers, gate_layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.spec.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Advance the spectral-norm power iteration on every flagged layer.
    pub fn refresh_spectral(&mut self, iters: usize) {
        for layer in &mut self.layers {
            if let Some(u) = layer.sn_u.as_mut() {
                power_iterate(&layer.w, layer.spec.out_dim, layer.spec.in_dim, u, iters);
            }
        }
    }

    /// Freeze `(sigma, v)` from the current weights and u-vectors.
    pub fn sn_snapshot(&self) -> SnSnapshot {
        let entries = self
            .layers
            .iter()
            .map(|layer| {
                layer.sn_u.as_ref().map(|u| {
                    let (sigma, v, degenerate) =
                        sigma_v(&layer.w, layer.spec.out_dim, layer.spec.in_dim, u);
                    SnEntry { sigma, v, degenerate }
                })
            })
            .collect();
        SnSnapshot { entries }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn normalize_in_place(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

fn matvec(w: &[f64], out_dim: usize, in_dim: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..out_dim {
        let row = &w[i * in_dim..(i + 1) * in_dim];
        let mut acc = 0.0;
        for (wj, xj) in row.iter().zip(x) {
            acc += wj * xj;
        }
        out[i] = acc;
    }
}

/// out[j] += sum_i w[i][j] * g[i], accumulated row-wise so memory access
/// stays contiguous.
fn matvec_transpose_acc(w: &[f64], out_dim: usize, in_dim: usize, g: &[f64], out: &mut [f64]) {
    for i in 0..out_dim {
        let c = g[i];
        if c == 0.0 {
            continue;
        }
        let row = &w[i * in_dim..(i + 1) * in_dim];
        for (oj, wj) in out.iter_mut().zip(row) {
            *oj += wj * c;
        }
    }
}

/// One or more power iterations `v = norm(W'u); u = norm(Wv)`.
fn power_iterate(w: &[f64], out_dim: usize, in_dim: usize, u: &mut Vec<f64>, iters: usize) {
    let mut v = vec![0.0; in_dim];
    let mut wu = vec![0.0; out_dim];
    for _ in 0..iters {
        v.iter_mut().for_each(|x| *x = 0.0);
        matvec_transpose_acc(w, out_dim, in_dim, u, &mut v);
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vn == 0.0 {
            return; // zero matrix; leave u unchanged
        }
        v.iter_mut().for_each(|x| *x /= vn);
        matvec(w, out_dim, in_dim, &v, &mut wu);
        let un = wu.iter().map(|x| x * x).sum::<f64>().sqrt();
        if un == 0.0 {
            return;
        }
        for (ui, wi) in u.iter_mut().zip(&wu) {
            *ui = wi / un;
        }
    }
}

/// `(sigma, v, degenerate)` for the frozen-u estimate `sigma = |W'u|`.
fn sigma_v(w: &[f64], out_dim: usize, in_dim: usize, u: &[f64]) -> (f64, Vec<f64>, bool) {
    let mut v = vec![0.0; in_dim];
    matvec_transpose_acc(w, out_dim, in_dim, u, &mut v);
    let sigma = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if sigma < 1e-12 {
        return (1.0, v, true);
    }
    v.iter_mut().for_each(|x| *x /= sigma);
    (sigma, v, false)
}

/// Spectral normalization as a standalone operation: run `power_iters`
/// iterations with persistent `u`, then divide the weight by the estimated
/// top singular value. Returns the normalized weight, the estimate, and a
/// degenerate flag (zero matrix left unchanged).
pub fn spectral_normalize(
    w: &[f64],
    out_dim: usize,
    in_dim: usize,
    power_iters: usize,
    u: &mut Vec<f64>,
) -> (Vec<f64>, f64, bool) {
    assert!(power_iters >= 1, "power_iters must be >= 1");
    assert_eq!(w.len(), out_dim * in_dim);
    assert_eq!(u.len(), out_dim);
    power_iterate(w, out_dim, in_dim, u, power_iters);
    // Rayleigh-style estimate |W v| at the freshest right vector.
    let (s0, v, degenerate) = sigma_v(w, out_dim, in_dim, u);
    if degenerate {
        return (w.to_vec(), 0.0, true);
    }
    let mut wv = vec![0.0; out_dim];
    matvec(w, out_dim, in_dim, &v, &mut wv);
    let sigma = wv.iter().map(|x| x * x).sum::<f64>().sqrt().max(s0);
    (w.iter().map(|x| x / sigma).collect(), sigma, false)
}

/// Recorded forward pass: everything the reverse sweep needs.
#[derive(Debug)]
pub struct Tape {
    /// Per layer: input vector.
    xs: Vec<Vec<f64>>,
    /// Per layer: pre-activation vector.
    pres: Vec<Vec<f64>>,
    /// Post-activation (pre-gate) value and gate vector at gated layers,
    /// indexed by gate position.
    gate_traces: Vec<(Vec<f64>, Vec<f64>)>,
    pub output: Vec<f64>,
}

/// Gradient buffers shaped like a [`NetworkParams`].
///
/// Spectral-norm layers accumulate a scalar coefficient per layer;
/// [`NetGrads::finalize`] folds the rank-one `u v'` correction into the
/// weight gradient. Call it once after all accumulation and before use.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    sn_c: Vec<f64>,
    finalized: bool,
}

impl NetGrads {
    pub fn zeros(net: &NetworkParams) -> Self {
        Self {
            w: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
            sn_c: vec![0.0; net.layers.len()],
            finalized: false,
        }
    }

    pub fn clear(&mut self) {
        for v in self.w.iter_mut().chain(self.b.iter_mut()) {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        self.sn_c.iter_mut().for_each(|x| *x = 0.0);
        self.finalized = false;
    }

    /// Apply the pending spectral-norm rank-one corrections.
    pub fn finalize(&mut self, net: &NetworkParams, snap: &SnSnapshot) {
        assert!(!self.finalized, "NetGrads already finalized");
        for (l, layer) in net.layers.iter().enumerate() {
            let c = self.sn_c[l];
            if c == 0.0 {
                continue;
            }
            let (Some(u), Some(entry)) = (layer.sn_u.as_ref(), snap.entries[l].as_ref()) else {
                continue;
            };
            if entry.degenerate {
                continue;
            }
            let in_dim = layer.spec.in_dim;
            for (i, ui) in u.iter().enumerate() {
                let coeff = -c * ui;
                let row = &mut self.w[l][i * in_dim..(i + 1) * in_dim];
                for (wj, vj) in row.iter_mut().zip(&entry.v) {
                    *wj += coeff * vj;
                }
            }
            self.sn_c[l] = 0.0;
        }
        self.finalized = true;
    }

    pub fn scale(&mut self, f: f64) {
        for v in self.w.iter_mut().chain(self.b.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= f);
        }
        self.sn_c.iter_mut().for_each(|x| *x *= f);
    }

    pub fn all_finite(&self) -> bool {
        self.w
            .iter()
            .chain(self.b.iter())
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Gradients flowing out of a reverse sweep, with respect to the network
/// input and each gate vector.
#[derive(Debug)]
pub struct InputGrads {
    pub d_input: Vec<f64>,
    pub d_gates: Vec<Vec<f64>>,
}

/// Run the network forward, recording a tape. `gates` must supply one
/// vector per gate attachment point, matching that layer's output width.
pub fn forward(
    net: &NetworkParams,
    snap: &SnSnapshot,
    input: &[f64],
    gates: Option<&[Vec<f64>]>,
) -> Result<(Vec<f64>, Tape), NetError> {
    if input.len() != net.input_dim() {
        return Err(NetError::Dimension(format!(
            "input has {} values, network expects {}",
            input.len(),
            net.input_dim()
        )));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite("network input"));
    }
    let supplied = gates.map_or(0, |g| g.len());
    if supplied != net.gate_layers.len() {
        return Err(NetError::GateCount { expected: net.gate_layers.len(), got: supplied });
    }
    if let Some(gs) = gates {
        for (k, g) in gs.iter().enumerate() {
            let want = net.layers[net.gate_layers[k]].spec.out_dim;
            if g.len() != want {
                return Err(NetError::Dimension(format!(
                    "gate {k} has {} values, layer emits {want}",
                    g.len()
                )));
            }
        }
    }

    let mut xs = Vec::with_capacity(net.layers.len());
    let mut pres = Vec::with_capacity(net.layers.len());
    let mut gate_traces = Vec::with_capacity(net.gate_layers.len());
    let mut x = input.to_vec();
    for (l, layer) in net.layers.iter().enumerate() {
        let spec = layer.spec;
        let mut pre = vec![0.0; spec.out_dim];
        matvec(&layer.w, spec.out_dim, spec.in_dim, &x, &mut pre);
        if let Some(entry) = snap.entries[l].as_ref() {
            if !entry.degenerate {
                pre.iter_mut().for_each(|p| *p /= entry.sigma);
            }
        }
        for (p, bi) in pre.iter_mut().zip(&layer.b) {
            *p += bi;
        }
        let mut h: Vec<f64> = pre.iter().map(|&z| spec.activation.apply(z)).collect();
        if let Some(k) = net.gate_layers.iter().position(|&g| g == l) {
            let gate = &gates.unwrap()[k];
            let post = h.clone();
            for (hi, gi) in h.iter_mut().zip(gate) {
                *hi *= gi;
            }
            gate_traces.push((post, gate.clone()));
        }
        xs.push(x);
        pres.push(pre);
        x = h;
    }
    let tape = Tape { xs, pres, gate_traces, output: x.clone() };
    Ok((x, tape))
}

/// Reverse sweep. Consumes the tape (one sweep per forward record),
/// accumulates parameter gradients into `grads`, and returns input and gate
/// gradients. Call [`NetGrads::finalize`] before using the weight gradients.
pub fn backward(
    net: &NetworkParams,
    snap: &SnSnapshot,
    tape: Tape,
    d_output: &[f64],
    grads: &mut NetGrads,
) -> Result<InputGrads, NetError> {
    if d_output.len() != net.output_dim() {
        return Err(NetError::Dimension(format!(
            "output gradient has {} values, network emits {}",
            d_output.len(),
            net.output_dim()
        )));
    }
    let mut d_gates: Vec<Vec<f64>> = net
        .gate_layers
        .iter()
        .map(|&l| vec![0.0; net.layers[l].spec.out_dim])
        .collect();
    let mut d_h = d_output.to_vec();
    for l in (0..net.layers.len()).rev() {
        let layer = &net.layers[l];
        let spec = layer.spec;
        let x = &tape.xs[l];
        let pre = &tape.pres[l];
        if let Some(k) = net.gate_layers.iter().position(|&g| g == l) {
            let (post, gate) = &tape.gate_traces[k];
            for i in 0..spec.out_dim {
                d_gates[k][i] += d_h[i] * post[i];
                d_h[i] *= gate[i];
            }
        }
        // d_pre = d_h * act'(pre)
        let mut d_pre = d_h;
        for (dp, &z) in d_pre.iter_mut().zip(pre) {
            *dp *= spec.activation.derivative(z);
        }
        // Bias gradient and effective-weight gradient d_pre (x)'.
        let entry = snap.entries[l].as_ref().filter(|e| !e.degenerate);
        let inv_sigma = entry.map_or(1.0, |e| 1.0 / e.sigma);
        let gw = &mut grads.w[l];
        for i in 0..spec.out_dim {
            grads.b[l][i] += d_pre[i];
            let c = d_pre[i] * inv_sigma;
            if c != 0.0 {
                let row = &mut gw[i * spec.in_dim..(i + 1) * spec.in_dim];
                for (wj, xj) in row.iter_mut().zip(x) {
                    *wj += c * xj;
                }
            }
        }
        if let Some(e) = entry {
            // d sigma term: <G, W>_F / sigma^2 with <G, W> = d_pre' (W x),
            // and W x = sigma * (pre - b).
            let dot: f64 = d_pre
                .iter()
                .zip(pre.iter().zip(&layer.b))
                .map(|(dp, (p, b))| dp * (p - b))
                .sum();
            grads.sn_c[l] += dot / e.sigma;
        }
        // d_x = W_eff' d_pre
        let mut d_x = vec![0.0; spec.in_dim];
        matvec_transpose_acc(&layer.w, spec.out_dim, spec.in_dim, &d_pre, &mut d_x);
        if inv_sigma != 1.0 {
            d_x.iter_mut().for_each(|v| *v *= inv_sigma);
        }
        d_h = d_x;
    }
    Ok(InputGrads { d_input: d_h, d_gates })
}

// --- Adam -------------------------------------------------------------------

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamParams,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(hyper: AdamParams, n_params: usize) -> Self {
        Self { hyper, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    /// One update over `params`, rejecting non-finite gradients.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NetError> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NetError::NonFinite("gradient"));
        }
        self.step += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g;
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
        Ok(())
    }
}

/// Adam over every parameter block of a network, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetAdam {
    pub states: Vec<AdamState>,
}

impl NetAdam {
    pub fn new(hyper: AdamParams, net: &NetworkParams) -> Self {
        let states = net
            .layers
            .iter()
            .flat_map(|l| [l.w.len(), l.b.len()])
            .map(|n| AdamState::new(hyper, n))
            .collect();
        Self { states }
    }

    /// Apply finalized gradients.
    pub fn step(&mut self, net: &mut NetworkParams, grads: &NetGrads) -> Result<(), NetError> {
        assert!(grads.finalized, "gradients must be finalized before the update");
        for (l, layer) in net.layers.iter_mut().enumerate() {
            self.states[2 * l].step(&mut layer.w, &grads.w[l])?;
            self.states[2 * l + 1].step(&mut layer.b, &grads.b[l])?;
        }
        Ok(())
    }
}

// --- gradient checking --------------------------------------------------------

/// Outcome of comparing backward against central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params_checked: usize,
}

/// `probe . output` with the spectral-norm scale recomputed from the
/// current weights (u frozen). This is the function backward differentiates,
/// so finite differences must re-derive sigma after each perturbation.
fn scalar_loss(
    net: &NetworkParams,
    input: &[f64],
    gates: Option<&[Vec<f64>]>,
    probe: &[f64],
) -> f64 {
    let snap = net.sn_snapshot();
    let (out, _) = forward(net, &snap, input, gates).expect("forward in loss probe");
    out.iter().zip(probe).map(|(o, p)| o * p).sum()
}

/// Analytic gradients of `probe . output` for every parameter, finalized.
pub fn analytic_grads(
    net: &NetworkParams,
    snap: &SnSnapshot,
    input: &[f64],
    gates: Option<&[Vec<f64>]>,
    probe: &[f64],
) -> Result<NetGrads, NetError> {
    let (_, tape) = forward(net, snap, input, gates)?;
    let mut grads = NetGrads::zeros(net);
    backward(net, snap, tape, probe, &mut grads)?;
    grads.finalize(net, snap);
    Ok(grads)
}

/// Central-difference gradients of `probe . output` for every parameter.
/// Independent of the reverse sweep; this is the oracle side.
pub fn finite_difference_grads(
    net: &NetworkParams,
    input: &[f64],
    gates: Option<&[Vec<f64>]>,
    probe: &[f64],
    h: f64,
) -> NetGrads {
    let mut work = net.clone();
    let mut fd = NetGrads::zeros(net);
    for l in 0..net.layers.len() {
        for j in 0..net.layers[l].w.len() {
            let orig = work.layers[l].w[j];
            work.layers[l].w[j] = orig + h;
            let fp = scalar_loss(&work, input, gates, probe);
            work.layers[l].w[j] = orig - h;
            let fm = scalar_loss(&work, input, gates, probe);
            work.layers[l].w[j] = orig;
            fd.w[l][j] = (fp - fm) / (2.0 * h);
        }
        for j in 0..net.layers[l].b.len() {
            let orig = work.layers[l].b[j];
            work.layers[l].b[j] = orig + h;
            let fp = scalar_loss(&work, input, gates, probe);
            work.layers[l].b[j] = orig - h;
            let fm = scalar_loss(&work, input, gates, probe);
            work.layers[l].b[j] = orig;
            fd.b[l][j] = (fp - fm) / (2.0 * h);
        }
    }
    fd.finalized = true;
    fd
}

/// Largest relative disagreement between two gradient sets. The denominator
/// floor of 1e-2 keeps the 1e-10 absolute noise floor of central differences
/// from registering as relative error on near-zero gradients.
pub fn max_relative_error(a: &NetGrads, b: &NetGrads) -> f64 {
    let mut worst = 0.0_f64;
    for (wa, wb) in a.w.iter().zip(&b.w).chain(a.b.iter().zip(&b.b)) {
        for (x, y) in wa.iter().zip(wb) {
            let denom = x.abs().max(y.abs()).max(1e-2);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Compare backward against central differences on every parameter.
pub fn grad_check(
    net: &NetworkParams,
    input: &[f64],
    gates: Option<&[Vec<f64>]>,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport, NetError> {
    let snap = net.sn_snapshot();
    let probe: Vec<f64> = (0..net.output_dim()).map(|_| gauss(rng)).collect();
    let analytic = analytic_grads(net, &snap, input, gates, &probe)?;
    let fd = finite_difference_grads(net, input, gates, &probe, 1e-5);
    Ok(GradCheckReport {
        max_rel_error: max_relative_error(&analytic, &fd),
        params_checked: net.param_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn spec(i: usize, o: usize, act: Activation, sn: bool) -> LayerSpec {
        LayerSpec { in_dim: i, out_dim: o, activation: act, spectral_norm: sn }
    }

    fn single_linear(w: Vec<f64>, b: Vec<f64>, i: usize, o: usize) -> NetworkParams {
        NetworkParams {
            layers: vec![Layer {
                spec: spec(i, o, Activation::Linear, false),
                w,
                b,
                sn_u: None,
            }],
            gate_layers: vec![],
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = single_linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        let snap = net.sn_snapshot();
        let (out, _) = forward(&net, &snap, &[0.3, -0.8], None).unwrap();
        assert_eq!(out, vec![0.3, -0.8]);
    }

    #[test]
    fn zero_weights_emit_bias() {
        let net = single_linear(vec![0.0; 4], vec![0.7, -0.2], 2, 2);
        let snap = net.sn_snapshot();
        let (out, _) = forward(&net, &snap, &[5.0, 5.0], None).unwrap();
        assert_eq!(out, vec![0.7, -0.2]);
    }

    #[test]
    fn all_ones_gate_is_neutral() {
        let mut rng = derive_rng(1, "gate-neutral", 0);
        let specs = [
            spec(3, 8, Activation::LeakyRelu(0.2), false),
            spec(8, 2, Activation::Linear, false),
        ];
        let gated = NetworkParams::init(&specs, vec![0], &mut rng).unwrap();
        let ungated = NetworkParams { layers: gated.layers.clone(), gate_layers: vec![] };
        let snap = gated.sn_snapshot();
        let x = [0.1, -0.4, 0.9];
        let (a, _) = forward(&gated, &snap, &x, Some(&[vec![1.0; 8]])).unwrap();
        let (b, _) = forward(&ungated, &snap, &x, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let net = single_linear(vec![1.0], vec![0.0], 1, 1);
        let snap = net.sn_snapshot();
        assert!(matches!(
            forward(&net, &snap, &[1.0, 2.0], None),
            Err(NetError::Dimension(_))
        ));
        assert!(matches!(
            forward(&net, &snap, &[f64::NAN], None),
            Err(NetError::NonFinite(_))
        ));
        assert!(matches!(
            forward(&net, &snap, &[1.0], Some(&[vec![1.0]])),
            Err(NetError::GateCount { .. })
        ));
    }

    #[test]
    fn backward_single_linear_matches_transpose() {
        // y = Wx; dL/dx = W' g.
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let net = single_linear(w, vec![0.0, 0.0], 3, 2);
        let snap = net.sn_snapshot();
        let x = [0.5, -1.0, 2.0];
        let (_, tape) = forward(&net, &snap, &x, None).unwrap();
        let mut grads = NetGrads::zeros(&net);
        let g = [1.0, -1.0];
        let ig = backward(&net, &snap, tape, &g, &mut grads).unwrap();
        // W' g = [1-4, 2-5, 3-6]
        assert_eq!(ig.d_input, vec![-3.0, -3.0, -3.0]);
        // dW = g x'
        assert_eq!(grads.w[0], vec![0.5, -1.0, 2.0, -0.5, 1.0, -2.0]);
        assert_eq!(grads.b[0], vec![1.0, -1.0]);
    }

    #[test]
    fn leaky_relu_scales_negative_side() {
        let net = NetworkParams {
            layers: vec![Layer {
                spec: spec(1, 1, Activation::LeakyRelu(0.2), false),
                w: vec![1.0],
                b: vec![0.0],
                sn_u: None,
            }],
            gate_layers: vec![],
        };
        let snap = net.sn_snapshot();
        let (out, tape) = forward(&net, &snap, &[-2.0], None).unwrap();
        assert!((out[0] + 0.4).abs() < 1e-15);
        let mut grads = NetGrads::zeros(&net);
        let ig = backward(&net, &snap, tape, &[1.0], &mut grads).unwrap();
        assert!((ig.d_input[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn random_three_layer_net_matches_finite_differences() {
        let mut rng = derive_rng(7, "gradcheck", 0);
        let specs = [
            spec(4, 10, Activation::LeakyRelu(0.2), false),
            spec(10, 10, Activation::LeakyRelu(0.2), true),
            spec(10, 3, Activation::Linear, false),
        ];
        let mut net = NetworkParams::init(&specs, vec![], &mut rng).unwrap();
        net.refresh_spectral(3);
        let input: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = grad_check(&net, &input, None, &mut rng).unwrap();
        assert!(
            report.max_rel_error < 1e-6,
            "max relative error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn gradcheck_passes_with_gating() {
        let mut rng = derive_rng(7, "gradcheck-gated", 0);
        let specs = [
            spec(3, 12, Activation::LeakyRelu(0.2), false),
            spec(12, 12, Activation::LeakyRelu(0.2), true),
            spec(12, 12, Activation::LeakyRelu(0.2), true),
            spec(12, 2, Activation::Linear, false),
        ];
        let net_rng = &mut rng.clone();
        let mut net = NetworkParams::init(&specs, vec![1, 2], net_rng).unwrap();
        net.refresh_spectral(2);
        let input: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gates: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..12).map(|_| rng.gen_range(0.2..1.8)).collect())
            .collect();
        let report = grad_check(&net, &input, Some(&gates), &mut rng).unwrap();
        assert!(
            report.max_rel_error < 1e-6,
            "max relative error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn gradcheck_detects_injected_fault() {
        let mut rng = derive_rng(7, "gradcheck-fault", 0);
        let specs = [
            spec(3, 6, Activation::LeakyRelu(0.2), false),
            spec(6, 2, Activation::Linear, false),
        ];
        let net = NetworkParams::init(&specs, vec![], &mut rng).unwrap();
        let snap = net.sn_snapshot();
        let input = [0.2, -0.3, 0.5];
        let probe = [1.0, 0.5];
        let mut analytic = analytic_grads(&net, &snap, &input, None, &probe).unwrap();
        analytic.w[0][3] = -analytic.w[0][3] - 1.0; // corrupt one entry
        let fd = finite_difference_grads(&net, &input, None, &probe, 1e-6);
        assert!(max_relative_error(&analytic, &fd) > 1e-3);
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        let mut rng = derive_rng(7, "gate-grad", 0);
        let specs = [
            spec(2, 6, Activation::LeakyRelu(0.2), false),
            spec(6, 2, Activation::Linear, false),
        ];
        let net = NetworkParams::init(&specs, vec![0], &mut rng).unwrap();
        let snap = net.sn_snapshot();
        let input = [0.4, -0.1];
        let mut gates = vec![(0..6).map(|_| rng.gen_range(0.5..1.5)).collect::<Vec<f64>>()];
        let probe = [0.7, -1.3];
        let (_, tape) = forward(&net, &snap, &input, Some(&gates)).unwrap();
        let mut grads = NetGrads::zeros(&net);
        let ig = backward(&net, &snap, tape, &probe, &mut grads).unwrap();
        let h = 1e-6;
        for j in 0..6 {
            let orig = gates[0][j];
            gates[0][j] = orig + h;
            let fp = scalar_loss(&net, &input, Some(&gates), &probe);
            gates[0][j] = orig - h;
            let fm = scalar_loss(&net, &input, Some(&gates), &probe);
            gates[0][j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((ig.d_gates[0][j] - fd).abs() < 1e-7);
        }
        // Input gradients too.
        let mut input_var = input;
        for j in 0..2 {
            let orig = input_var[j];
            input_var[j] = orig + h;
            let fp = scalar_loss(&net, &input_var, Some(&gates), &probe);
            input_var[j] = orig - h;
            let fm = scalar_loss(&net, &input_var, Some(&gates), &probe);
            input_var[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((ig.d_input[j] - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn spectral_normalize_scales_diagonal() {
        let mut u = vec![1.0, 0.0];
        let (w, sigma, degenerate) = spectral_normalize(&[2.0, 0.0, 0.0, 2.0], 2, 2, 5, &mut u);
        assert!(!degenerate);
        assert!((sigma - 2.0).abs() < 1e-12);
        assert!((w[0] - 1.0).abs() < 1e-12 && (w[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_normalize_rank_one_single_iteration() {
        // W = a b' has sigma = |a||b|; one iteration lands exactly.
        let a = [3.0, 4.0];
        let b = [1.0, 2.0, 2.0];
        let w: Vec<f64> = a.iter().flat_map(|ai| b.iter().map(move |bj| ai * bj)).collect();
        let mut u = vec![0.6, 0.8];
        let (_, sigma, _) = spectral_normalize(&w, 2, 3, 1, &mut u);
        assert!((sigma - 15.0).abs() < 1e-9);
    }

    #[test]
    fn spectral_normalize_zero_matrix_flagged() {
        let mut u = vec![1.0, 0.0];
        let (w, _, degenerate) = spectral_normalize(&[0.0; 4], 2, 2, 3, &mut u);
        assert!(degenerate);
        assert_eq!(w, vec![0.0; 4]);
    }

    /// Brute-force top singular value via many eigen-iterations on W'W.
    fn sigma_oracle(w: &[f64], out_dim: usize, in_dim: usize) -> f64 {
        let mut v = vec![1.0; in_dim];
        normalize_in_place(&mut v);
        for _ in 0..10_000 {
            // t = W v; v = W' t
            let mut t = vec![0.0; out_dim];
            matvec(w, out_dim, in_dim, &v, &mut t);
            let mut next = vec![0.0; in_dim];
            matvec_transpose_acc(w, out_dim, in_dim, &t, &mut next);
            normalize_in_place(&mut next);
            v = next;
        }
        let mut t = vec![0.0; out_dim];
        matvec(w, out_dim, in_dim, &v, &mut t);
        t.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn sigma_estimate_close_to_oracle_after_five_iterations() {
        // Frozen cases with ordinary spectral gaps. Five iterations cannot
        // separate near-degenerate top singular values (no power method
        // can); those converge in the 30-iteration test below.
        let mut rng = derive_rng(10, "sigma-oracle", 0);
        for case in 0..10 {
            let w: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut u: Vec<f64> = (0..8).map(|_| gauss(&mut rng)).collect();
            normalize_in_place(&mut u);
            let (_, sigma, _) = spectral_normalize(&w, 8, 8, 5, &mut u);
            let oracle = sigma_oracle(&w, 8, 8);
            assert!(
                (sigma - oracle).abs() < 1e-2 * oracle.max(1.0),
                "case {case}: estimate {sigma} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn sigma_estimate_converges_for_any_gap() {
        let mut rng = derive_rng(13, "sigma-converge", 0);
        for case in 0..10 {
            let w: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut u: Vec<f64> = (0..8).map(|_| gauss(&mut rng)).collect();
            normalize_in_place(&mut u);
            let (_, sigma, _) = spectral_normalize(&w, 8, 8, 60, &mut u);
            let oracle = sigma_oracle(&w, 8, 8);
            assert!(
                (sigma - oracle).abs() < 1e-3 * oracle.max(1.0),
                "case {case}: estimate {sigma} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn normalized_layer_has_unit_sigma() {
        let mut rng = derive_rng(13, "unit-sigma", 0);
        for _ in 0..10 {
            let w: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut u: Vec<f64> = (0..10).map(|_| gauss(&mut rng)).collect();
            normalize_in_place(&mut u);
            let (w_norm, _, _) = spectral_normalize(&w, 10, 10, 30, &mut u);
            let sigma = sigma_oracle(&w_norm, 10, 10);
            assert!((0.99..=1.01).contains(&sigma), "sigma after normalization {sigma}");
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let hyper = AdamParams { lr: 0.01, ..AdamParams::default() };
        let mut state = AdamState::new(hyper, 3);
        let mut p = vec![1.0, 2.0, 3.0];
        state.step(&mut p, &[0.5, -2.0, 1e-3]).unwrap();
        for (after, before) in p.iter().zip(&[1.0, 2.0, 3.0]) {
            let delta = (after - before).abs();
            assert!(delta <= 0.01 + 1e-12 && delta > 0.0099, "delta {delta}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut state = AdamState::new(AdamParams::default(), 2);
        let mut p = vec![0.4, -0.6];
        for _ in 0..10 {
            state.step(&mut p, &[0.0, 0.0]).unwrap();
        }
        assert_eq!(p, vec![0.4, -0.6]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut state = AdamState::new(AdamParams::default(), 1);
        let mut p = vec![1.0];
        assert!(state.step(&mut p, &[f64::NAN]).is_err());
        assert_eq!(p, vec![1.0]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let hyper = AdamParams { lr: 0.01, ..AdamParams::default() };
        let target = [0.3, -0.7, 1.2];
        let mut p = vec![0.0; 3];
        let mut state = AdamState::new(hyper, 3);
        for _ in 0..2000 {
            let grads: Vec<f64> = p.iter().zip(&target).map(|(x, t)| x - t).collect();
            state.step(&mut p, &grads).unwrap();
        }
        let f: f64 = p
            .iter()
            .zip(&target)
            .map(|(x, t)| 0.5 * (x - t) * (x - t))
            .sum();
        assert!(f < 1e-6, "bowl value {f}");
    }

    #[test]
    fn init_is_deterministic() {
        let specs = [
            spec(4, 16, Activation::LeakyRelu(0.2), true),
            spec(16, 2, Activation::Linear, false),
        ];
        let a = NetworkParams::init(&specs, vec![0], &mut derive_rng(3, "init", 0)).unwrap();
        let b = NetworkParams::init(&specs, vec![0], &mut derive_rng(3, "init", 0)).unwrap();
        assert_eq!(a, b);
    }
}
