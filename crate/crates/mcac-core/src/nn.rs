//! Feedforward function approximation: MLPs with rectifier hidden layers,
//! reverse-mode gradients, Adam, and Polyak-averaged target copies.
//!
//! Everything is `f64` and single-threaded; identical seeds give
//! bit-identical parameter trajectories. Batched passes are the hot path
//! (the batch dimension is rows), with the dense products delegated to
//! `ndarray`'s matrix multiply.
//!
//! Weight matrices are stored with shape `(in_dim, out_dim)` so a batched
//! forward is a plain `x.dot(&w)`. Checkpoints are written row-major in the
//! conventional `(out_dim, in_dim)` orientation; see [`Mlp::save_text`].

use std::io::{self, BufRead, Write};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

/// Clamp range for log standard deviations produced by a
/// [`OutputHead::GaussianPolicy`] head, keeping sampled actions finite.
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input length {got} does not match input width {want}")]
    InputShape { got: usize, want: usize },
    #[error("adjoint length {got} does not match output width {want}")]
    AdjointShape { got: usize, want: usize },
    #[error("gradient shape mismatch at layer {layer}")]
    GradShape { layer: usize },
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("non-finite parameter in layer {layer} after optimizer step")]
    NonFiniteParameter { layer: usize },
    #[error("polyak update requires identical architectures")]
    ArchitectureMismatch,
    #[error("tau must lie in [0, 1], got {0}")]
    InvalidTau(f64),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
}

/// Interpretation of the final linear layer's outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    /// Raw affine outputs.
    Linear,
    /// First `action_dim` outputs are Gaussian means, the next `action_dim`
    /// are log standard deviations clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    /// The tanh squash and log-density live with the policy that owns the
    /// network.
    GaussianPolicy { action_dim: usize },
}

#[derive(Debug, Clone)]
struct Layer {
    /// Shape `(in_dim, out_dim)`.
    w: Array2<f64>,
    b: Array1<f64>,
}

impl Layer {
    fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    fn out_dim(&self) -> usize {
        self.w.ncols()
    }
}

/// Fixed-topology feedforward network: rectifier hidden layers, linear
/// output layer, optional Gaussian-policy head interpretation.
#[derive(Debug, Clone)]
pub struct Mlp {
    widths: Vec<usize>,
    head: OutputHead,
    layers: Vec<Layer>,
}

/// Per-layer parameter gradients, shaped exactly like the network.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    w: Vec<Array2<f64>>,
    b: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            w: net.layers.iter().map(|l| Array2::zeros(l.w.dim())).collect(),
            b: net.layers.iter().map(|l| Array1::zeros(l.b.len())).collect(),
        }
    }

    fn matches(&self, net: &Mlp) -> Option<usize> {
        for (i, layer) in net.layers.iter().enumerate() {
            if self.w.get(i).map(|w| w.dim()) != Some(layer.w.dim())
                || self.b.get(i).map(|b| b.len()) != Some(layer.b.len())
            {
                return Some(i);
            }
        }
        if self.w.len() != net.layers.len() {
            return Some(net.layers.len());
        }
        None
    }

    /// Flat copy of all gradient entries in checkpoint order (per layer:
    /// weights row-major in `(out, in)`, then biases).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.w.iter().zip(&self.b) {
            for o in 0..w.ncols() {
                for i in 0..w.nrows() {
                    out.push(w[(i, o)]);
                }
            }
            out.extend(b.iter().copied());
        }
        out
    }
}

/// Activations recorded by a traced forward pass, consumed by
/// [`Mlp::backward_batch`].
///
/// `acts[0]` is the input batch, `acts[i]` for `0 < i < L` the post-rectifier
/// output of layer `i-1`, and `acts[L]` the raw (pre-clamp) output layer
/// values.
#[derive(Debug, Clone, Default)]
pub struct BatchTrace {
    acts: Vec<Array2<f64>>,
}

impl Mlp {
    /// Builds a network with uniform fan-in scaled weights
    /// (`U(-1/sqrt(fan_in), 1/sqrt(fan_in))`) and zero biases.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        head: OutputHead,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if widths.len() < 2 {
            return Err(NnError::InvalidConfig(
                "need at least input and output widths".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(NnError::InvalidConfig("zero layer width".into()));
        }
        if let OutputHead::GaussianPolicy { action_dim } = head {
            let out = *widths.last().unwrap();
            if action_dim == 0 || out != 2 * action_dim {
                return Err(NnError::InvalidConfig(format!(
                    "gaussian head needs output width 2*action_dim, got {out} for action_dim {action_dim}"
                )));
            }
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut w = Array2::zeros((fan_in, fan_out));
            // Fill in (out, in) order so the draw sequence matches the
            // checkpoint's row-major layout.
            for o in 0..fan_out {
                for i in 0..fan_in {
                    w[(i, o)] = rng.gen_range(-bound..bound);
                }
            }
            layers.push(Layer {
                w,
                b: Array1::zeros(fan_out),
            });
        }
        Ok(Self {
            widths: widths.to_vec(),
            head,
            layers,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn same_architecture(&self, other: &Mlp) -> bool {
        self.widths == other.widths && self.head == other.head
    }

    /// Applies the head transform (log-std clamp) in place.
    fn apply_head(&self, out: &mut Array2<f64>) {
        if let OutputHead::GaussianPolicy { action_dim } = self.head {
            for mut row in out.rows_mut() {
                for j in action_dim..2 * action_dim {
                    row[j] = row[j].clamp(LOG_STD_MIN, LOG_STD_MAX);
                }
            }
        }
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::InputShape {
                got: input.len(),
                want: self.input_dim(),
            });
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("contiguous");
        Ok(self.forward_batch(x).row(0).to_vec())
    }

    /// Batched forward pass; rows are samples.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.input_dim(), "input width mismatch");
        let mut cur = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = cur.dot(&layer.w);
            z += &layer.b;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            cur = z;
        }
        self.apply_head(&mut cur);
        cur
    }

    /// Batched forward pass that records activations for a later backward
    /// pass. Returns the post-head outputs.
    pub fn forward_batch_traced(&self, x: ArrayView2<f64>, trace: &mut BatchTrace) -> Array2<f64> {
        assert_eq!(x.ncols(), self.input_dim(), "input width mismatch");
        trace.acts.clear();
        trace.acts.push(x.to_owned());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = trace.acts[i].dot(&layer.w);
            z += &layer.b;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            trace.acts.push(z);
        }
        let mut out = trace.acts[self.layers.len()].clone();
        self.apply_head(&mut out);
        out
    }

    /// Reverse accumulation over the recorded trace.
    ///
    /// `out_adjoint` is dLoss/dOutput at the post-head outputs. Writes
    /// parameter gradients into `grads` (overwriting) when given, and the
    /// adjoint with respect to the input batch into `input_adjoint` when
    /// given. The network itself is never mutated.
    pub fn backward_batch(
        &self,
        trace: &BatchTrace,
        out_adjoint: ArrayView2<f64>,
        mut grads: Option<&mut MlpGrads>,
        input_adjoint: Option<&mut Array2<f64>>,
    ) {
        let n_layers = self.layers.len();
        assert_eq!(
            trace.acts.len(),
            n_layers + 1,
            "trace does not match network"
        );
        assert_eq!(out_adjoint.ncols(), self.output_dim(), "adjoint width");
        assert_eq!(out_adjoint.nrows(), trace.acts[0].nrows(), "adjoint rows");
        if let Some(g) = grads.as_deref() {
            if let Some(layer) = g.matches(self) {
                panic!("gradient buffer shape mismatch at layer {layer}");
            }
        }

        let mut delta = out_adjoint.to_owned();
        // Clamped log-std outputs pass no gradient outside the active range.
        if let OutputHead::GaussianPolicy { action_dim } = self.head {
            let raw = &trace.acts[n_layers];
            for (mut drow, rrow) in delta.rows_mut().into_iter().zip(raw.rows()) {
                for j in action_dim..2 * action_dim {
                    if rrow[j] <= LOG_STD_MIN || rrow[j] >= LOG_STD_MAX {
                        drow[j] = 0.0;
                    }
                }
            }
        }

        for i in (0..n_layers).rev() {
            let layer = &self.layers[i];
            if let Some(g) = grads.as_deref_mut() {
                general_mat_mul(1.0, &trace.acts[i].t(), &delta.view(), 0.0, &mut g.w[i]);
                g.b[i].assign(&delta.sum_axis(Axis(0)));
            }
            let need_input = i > 0 || input_adjoint.is_some();
            if !need_input {
                break;
            }
            let mut prev = delta.dot(&layer.w.t());
            if i > 0 {
                // Rectifier mask: activations at zero pass no gradient.
                prev.zip_mut_with(&trace.acts[i], |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = prev;
            } else if let Some(inp) = input_adjoint {
                *inp = prev;
                break;
            }
        }
    }

    /// Single-sample parameter gradient for a given output adjoint.
    pub fn gradient(&self, input: &[f64], out_adjoint: &[f64]) -> Result<MlpGrads, NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::InputShape {
                got: input.len(),
                want: self.input_dim(),
            });
        }
        if out_adjoint.len() != self.output_dim() {
            return Err(NnError::AdjointShape {
                got: out_adjoint.len(),
                want: self.output_dim(),
            });
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("contiguous");
        let mut trace = BatchTrace::default();
        let _ = self.forward_batch_traced(x, &mut trace);
        let adj = ArrayView2::from_shape((1, out_adjoint.len()), out_adjoint).expect("contiguous");
        let mut grads = MlpGrads::zeros_like(self);
        self.backward_batch(&trace, adj, Some(&mut grads), None);
        Ok(grads)
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }

    /// Test/diagnostic access to a single parameter. Weights are addressed
    /// in `(out, in)` orientation to match the checkpoint layout.
    pub fn get_weight(&self, layer: usize, out: usize, inp: usize) -> f64 {
        self.layers[layer].w[(inp, out)]
    }

    pub fn set_weight(&mut self, layer: usize, out: usize, inp: usize, v: f64) {
        self.layers[layer].w[(inp, out)] = v;
    }

    pub fn get_bias(&self, layer: usize, out: usize) -> f64 {
        self.layers[layer].b[out]
    }

    pub fn set_bias(&mut self, layer: usize, out: usize, v: f64) {
        self.layers[layer].b[out] = v;
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Visits every parameter in checkpoint order (per layer: weights
    /// row-major in `(out, in)`, then biases).
    pub fn for_each_param(&self, mut f: impl FnMut(f64)) {
        for layer in &self.layers {
            for o in 0..layer.out_dim() {
                for i in 0..layer.in_dim() {
                    f(layer.w[(i, o)]);
                }
            }
            for &b in layer.b.iter() {
                f(b);
            }
        }
    }

    /// Mutates every parameter in checkpoint order.
    pub fn map_params_mut(&mut self, mut f: impl FnMut(f64) -> f64) {
        for layer in &mut self.layers {
            for o in 0..layer.w.ncols() {
                for i in 0..layer.w.nrows() {
                    layer.w[(i, o)] = f(layer.w[(i, o)]);
                }
            }
            for b in layer.b.iter_mut() {
                *b = f(*b);
            }
        }
    }

    /// Writes the textual checkpoint: layer shapes followed by row-major
    /// parameter values at 17 significant digits.
    pub fn save_text<W: Write>(&self, w: &mut W) -> Result<(), NnError> {
        writeln!(w, "mlp-checkpoint v1")?;
        match self.head {
            OutputHead::Linear => writeln!(w, "head linear")?,
            OutputHead::GaussianPolicy { action_dim } => {
                writeln!(w, "head gaussian {action_dim}")?
            }
        }
        write!(w, "widths")?;
        for width in &self.widths {
            write!(w, " {width}")?;
        }
        writeln!(w)?;
        for (idx, layer) in self.layers.iter().enumerate() {
            writeln!(w, "layer {idx} weights {} {}", layer.out_dim(), layer.in_dim())?;
            for o in 0..layer.out_dim() {
                for i in 0..layer.in_dim() {
                    if i > 0 {
                        write!(w, " ")?;
                    }
                    write!(w, "{:.16e}", layer.w[(i, o)])?;
                }
                writeln!(w)?;
            }
            writeln!(w, "layer {idx} biases {}", layer.out_dim())?;
            for (o, b) in layer.b.iter().enumerate() {
                if o > 0 {
                    write!(w, " ")?;
                }
                write!(w, "{b:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn load_text<R: BufRead>(r: &mut R) -> Result<Self, NnError> {
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String, NnError> {
            lines
                .next()
                .ok_or_else(|| NnError::Checkpoint(format!("missing {what}")))?
                .map_err(NnError::Io)
        };
        let magic = next("header")?;
        if magic.trim() != "mlp-checkpoint v1" {
            return Err(NnError::Checkpoint(format!("bad header {magic:?}")));
        }
        let head_line = next("head")?;
        let head = {
            let mut parts = head_line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some("head"), Some("linear"), None) => OutputHead::Linear,
                (Some("head"), Some("gaussian"), Some(d)) => OutputHead::GaussianPolicy {
                    action_dim: d
                        .parse()
                        .map_err(|_| NnError::Checkpoint("bad action_dim".into()))?,
                },
                _ => return Err(NnError::Checkpoint(format!("bad head line {head_line:?}"))),
            }
        };
        let widths_line = next("widths")?;
        let mut parts = widths_line.split_whitespace();
        if parts.next() != Some("widths") {
            return Err(NnError::Checkpoint("expected widths line".into()));
        }
        let widths: Vec<usize> = parts
            .map(|t| t.parse().map_err(|_| NnError::Checkpoint("bad width".into())))
            .collect::<Result<_, _>>()?;
        if widths.len() < 2 {
            return Err(NnError::Checkpoint("too few widths".into()));
        }

        let parse_row = |line: &str, n: usize| -> Result<Vec<f64>, NnError> {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse()
                        .map_err(|_| NnError::Checkpoint(format!("bad value {t:?}")))
                })
                .collect::<Result<_, _>>()?;
            if vals.len() != n {
                return Err(NnError::Checkpoint(format!(
                    "expected {n} values, got {}",
                    vals.len()
                )));
            }
            Ok(vals)
        };

        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (idx, pair) in widths.windows(2).enumerate() {
            let (in_dim, out_dim) = (pair[0], pair[1]);
            let header = next("layer weights header")?;
            let expect = format!("layer {idx} weights {out_dim} {in_dim}");
            if header.trim() != expect {
                return Err(NnError::Checkpoint(format!(
                    "expected {expect:?}, got {header:?}"
                )));
            }
            let mut w = Array2::zeros((in_dim, out_dim));
            for o in 0..out_dim {
                let row = parse_row(&next("weight row")?, in_dim)?;
                for (i, v) in row.into_iter().enumerate() {
                    w[(i, o)] = v;
                }
            }
            let header = next("layer biases header")?;
            let expect = format!("layer {idx} biases {out_dim}");
            if header.trim() != expect {
                return Err(NnError::Checkpoint(format!(
                    "expected {expect:?}, got {header:?}"
                )));
            }
            let b = Array1::from_vec(parse_row(&next("bias row")?, out_dim)?);
            layers.push(Layer { w, b });
        }
        let net = Self {
            widths,
            head,
            layers,
        };
        if let OutputHead::GaussianPolicy { action_dim } = net.head {
            if net.output_dim() != 2 * action_dim {
                return Err(NnError::Checkpoint("head/width mismatch".into()));
            }
        }
        Ok(net)
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: MlpGrads,
    v: MlpGrads,
    step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        Self {
            m: MlpGrads::zeros_like(net),
            v: MlpGrads::zeros_like(net),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam step. Errors on non-finite gradients or
    /// parameters, naming the offending layer.
    pub fn apply(&mut self, net: &mut Mlp, grads: &MlpGrads) -> Result<(), NnError> {
        if let Some(layer) = grads.matches(net) {
            return Err(NnError::GradShape { layer });
        }
        for (i, (gw, gb)) in grads.w.iter().zip(&grads.b).enumerate() {
            if gw.iter().chain(gb.iter()).any(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteGradient { layer: i });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let inv_bc1 = 1.0 / (1.0 - self.beta1.powi(t));
        let inv_bc2 = 1.0 / (1.0 - self.beta2.powi(t));
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        let kernel = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m * inv_bc1) / ((*v * inv_bc2).sqrt() + eps);
            }
        };
        for (i, layer) in net.layers.iter_mut().enumerate() {
            kernel(
                layer.w.as_slice_mut().expect("standard layout"),
                self.m.w[i].as_slice_mut().expect("standard layout"),
                self.v.w[i].as_slice_mut().expect("standard layout"),
                grads.w[i].as_slice().expect("standard layout"),
            );
            kernel(
                layer.b.as_slice_mut().expect("standard layout"),
                self.m.b[i].as_slice_mut().expect("standard layout"),
                self.v.b[i].as_slice_mut().expect("standard layout"),
                grads.b[i].as_slice().expect("standard layout"),
            );
            if layer.w.iter().any(|x| !x.is_finite()) || layer.b.iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFiniteParameter { layer: i });
            }
        }
        Ok(())
    }
}

/// `target <- (1 - tau) * target + tau * online`, elementwise.
pub fn polyak_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<(), NnError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(NnError::InvalidTau(tau));
    }
    if !target.same_architecture(online) {
        return Err(NnError::ArchitectureMismatch);
    }
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        let tw = t.w.as_slice_mut().expect("standard layout");
        for (t, &o) in tw.iter_mut().zip(o.w.as_slice().expect("standard layout")) {
            *t = (1.0 - tau) * *t + tau * o;
        }
        let tb = t.b.as_slice_mut().expect("standard layout");
        for (t, &o) in tb.iter_mut().zip(o.b.as_slice().expect("standard layout")) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngs::{stream_rng, Stream};
    use ndarray::Array2;
    use rand::Rng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        stream_rng(seed, Stream::AgentInit)
    }

    fn random_net(widths: &[usize], head: OutputHead, seed: u64) -> Mlp {
        Mlp::new(widths, head, &mut rng(seed)).unwrap()
    }

    #[test]
    fn zero_weight_net_outputs_bias() {
        let mut net = random_net(&[3, 4, 2], OutputHead::Linear, 0);
        net.map_params_mut(|_| 0.0);
        net.set_bias(1, 0, 1.25);
        net.set_bias(1, 1, -0.5);
        let out = net.forward(&[0.3, -9.0, 4.4]).unwrap();
        assert_eq!(out, vec![1.25, -0.5]);
    }

    #[test]
    fn identity_net_passes_positive_input() {
        let mut net = random_net(&[1, 1, 1], OutputHead::Linear, 0);
        net.map_params_mut(|_| 0.0);
        net.set_weight(0, 0, 0, 1.0);
        net.set_weight(1, 0, 0, 1.0);
        let out = net.forward(&[2.0]).unwrap();
        assert_eq!(out, vec![2.0]);
    }

    #[test]
    fn forward_rejects_bad_input_width() {
        let net = random_net(&[3, 4, 2], OutputHead::Linear, 0);
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(NnError::InputShape { got: 2, want: 3 })
        ));
    }

    /// Independent straight-line re-evaluation of the forward pass.
    fn forward_oracle(net: &Mlp, input: &[f64]) -> Vec<f64> {
        let mut cur = input.to_vec();
        for l in 0..net.n_layers() {
            let (in_dim, out_dim) = (net.widths()[l], net.widths()[l + 1]);
            let mut next = vec![0.0; out_dim];
            for (o, slot) in next.iter_mut().enumerate() {
                let mut acc = net.get_bias(l, o);
                for i in 0..in_dim {
                    acc += net.get_weight(l, o, i) * cur[i];
                }
                *slot = acc;
            }
            if l + 1 < net.n_layers() {
                for v in &mut next {
                    *v = v.max(0.0);
                }
            }
            cur = next;
        }
        if let OutputHead::GaussianPolicy { action_dim } = net.head() {
            for v in cur[action_dim..].iter_mut() {
                *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
            }
        }
        cur
    }

    #[test]
    fn forward_matches_independent_reevaluation() {
        let mut r = rng(42);
        for trial in 0..20 {
            let net = random_net(&[4, 8, 8, 1], OutputHead::Linear, 100 + trial);
            let input: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
            let got = net.forward(&input).unwrap();
            let want = forward_oracle(&net, &input);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn zero_adjoint_gives_zero_gradient() {
        let net = random_net(&[3, 5, 2], OutputHead::Linear, 1);
        let grads = net.gradient(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(grads.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_linear_layer_closed_form_gradient() {
        // One linear layer, squared-error loss: dL/dw = 2 (pred - target) x.
        let mut net = random_net(&[2, 1], OutputHead::Linear, 2);
        net.map_params_mut(|_| 0.0);
        net.set_weight(0, 0, 0, 0.7);
        net.set_weight(0, 0, 1, -0.3);
        net.set_bias(0, 0, 0.1);
        let x = [1.5, -2.0];
        let target = 0.4;
        let pred = net.forward(&x).unwrap()[0];
        let grads = net.gradient(&x, &[2.0 * (pred - target)]).unwrap();
        let flat = grads.to_flat();
        let expect_w0 = 2.0 * (pred - target) * x[0];
        let expect_w1 = 2.0 * (pred - target) * x[1];
        let expect_b = 2.0 * (pred - target);
        assert!((flat[0] - expect_w0).abs() < 1e-14);
        assert!((flat[1] - expect_w1).abs() < 1e-14);
        assert!((flat[2] - expect_b).abs() < 1e-14);
    }

    /// Central finite differences of `adjoint . f(x)` over every parameter.
    fn fd_param_grads(net: &Mlp, input: &[f64], adjoint: &[f64], h: f64) -> Vec<f64> {
        let n = net.param_count();
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let mut plus = net.clone();
            let mut idx = 0;
            plus.map_params_mut(|p| {
                let p2 = if idx == k { p + h } else { p };
                idx += 1;
                p2
            });
            let mut minus = net.clone();
            idx = 0;
            minus.map_params_mut(|p| {
                let p2 = if idx == k { p - h } else { p };
                idx += 1;
                p2
            });
            let fp: f64 = plus
                .forward(input)
                .unwrap()
                .iter()
                .zip(adjoint)
                .map(|(y, a)| y * a)
                .sum();
            let fm: f64 = minus
                .forward(input)
                .unwrap()
                .iter()
                .zip(adjoint)
                .map(|(y, a)| y * a)
                .sum();
            out.push((fp - fm) / (2.0 * h));
        }
        out
    }

    fn check_grad_against_fd(net: &Mlp, r: &mut impl Rng) -> (f64, usize) {
        let input: Vec<f64> = (0..net.input_dim()).map(|_| r.gen_range(-1.5..1.5)).collect();
        let adjoint: Vec<f64> = (0..net.output_dim()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let analytic = net.gradient(&input, &adjoint).unwrap().to_flat();
        let numeric = fd_param_grads(net, &input, &adjoint, 1e-5);
        let mut worst = 0.0_f64;
        let mut checked = 0;
        for (a, n) in analytic.iter().zip(&numeric) {
            let scale = a.abs().max(n.abs());
            if scale < 1e-7 {
                // Both zero to FD resolution (dead rectifier paths).
                assert!((a - n).abs() < 1e-7, "near-zero mismatch {a} vs {n}");
                continue;
            }
            worst = worst.max((a - n).abs() / scale);
            checked += 1;
        }
        (worst, checked)
    }

    #[test]
    fn gradients_match_finite_differences_both_heads() {
        let mut r = rng(7);
        let mut draws = 0;
        for trial in 0..60 {
            let net = random_net(&[4, 6, 6, 1], OutputHead::Linear, 200 + trial);
            let (worst, checked) = check_grad_against_fd(&net, &mut r);
            assert!(worst <= 1e-4, "linear head rel err {worst}");
            assert!(checked > 0);
            draws += 1;
        }
        for trial in 0..60 {
            let net = random_net(
                &[3, 6, 6, 4],
                OutputHead::GaussianPolicy { action_dim: 2 },
                300 + trial,
            );
            let (worst, checked) = check_grad_against_fd(&net, &mut r);
            assert!(worst <= 1e-4, "gaussian head rel err {worst}");
            assert!(checked > 0);
            draws += 1;
        }
        assert!(draws >= 100);
    }

    #[test]
    fn batched_backward_matches_single_sample_sum() {
        let net = random_net(&[3, 8, 2], OutputHead::Linear, 11);
        let mut r = rng(12);
        let batch = 5;
        let xs: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let adjs: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..2).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();

        let mut x = Array2::zeros((batch, 3));
        let mut adj = Array2::zeros((batch, 2));
        for (i, (xi, ai)) in xs.iter().zip(&adjs).enumerate() {
            for (j, v) in xi.iter().enumerate() {
                x[(i, j)] = *v;
            }
            for (j, v) in ai.iter().enumerate() {
                adj[(i, j)] = *v;
            }
        }
        let mut trace = BatchTrace::default();
        let _ = net.forward_batch_traced(x.view(), &mut trace);
        let mut grads = MlpGrads::zeros_like(&net);
        net.backward_batch(&trace, adj.view(), Some(&mut grads), None);
        let batched = grads.to_flat();

        let mut summed = vec![0.0; net.param_count()];
        for (xi, ai) in xs.iter().zip(&adjs) {
            let g = net.gradient(xi, ai).unwrap().to_flat();
            for (s, v) in summed.iter_mut().zip(g) {
                *s += v;
            }
        }
        for (b, s) in batched.iter().zip(&summed) {
            assert!((b - s).abs() <= 1e-10 * s.abs().max(1.0), "{b} vs {s}");
        }
    }

    #[test]
    fn input_adjoint_matches_finite_differences() {
        let net = random_net(&[4, 8, 3], OutputHead::Linear, 21);
        let mut r = rng(22);
        let input: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let adjoint: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x = Array2::from_shape_vec((1, 4), input.clone()).unwrap();
        let adj = Array2::from_shape_vec((1, 3), adjoint.clone()).unwrap();
        let mut trace = BatchTrace::default();
        let _ = net.forward_batch_traced(x.view(), &mut trace);
        let mut input_adj = Array2::zeros((1, 4));
        net.backward_batch(&trace, adj.view(), None, Some(&mut input_adj));

        let h = 1e-6;
        for k in 0..4 {
            let mut xp = input.clone();
            xp[k] += h;
            let mut xm = input.clone();
            xm[k] -= h;
            let fp: f64 = net
                .forward(&xp)
                .unwrap()
                .iter()
                .zip(&adjoint)
                .map(|(y, a)| y * a)
                .sum();
            let fm: f64 = net
                .forward(&xm)
                .unwrap()
                .iter()
                .zip(&adjoint)
                .map(|(y, a)| y * a)
                .sum();
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = input_adj[(0, k)];
            assert!(
                (analytic - numeric).abs() <= 1e-5 * numeric.abs().max(1.0),
                "input grad {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut net = random_net(&[2, 4, 1], OutputHead::Linear, 31);
        let before: Vec<f64> = {
            let mut v = Vec::new();
            net.for_each_param(|p| v.push(p));
            v
        };
        let mut state = AdamState::new(&net, 1e-3);
        let grads = MlpGrads::zeros_like(&net);
        state.apply(&mut net, &grads).unwrap();
        let mut after = Vec::new();
        net.for_each_param(|p| after.push(p));
        assert_eq!(before, after);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_constant_gradient_approaches_lr_sign_step() {
        let mut net = random_net(&[1, 1], OutputHead::Linear, 32);
        let lr = 1e-3;
        let mut state = AdamState::new(&net, lr);
        let mut grads = MlpGrads::zeros_like(&net);
        grads.w[0][(0, 0)] = 0.37;
        grads.b[0][0] = -2.2;
        let mut prev_w = net.get_weight(0, 0, 0);
        let mut prev_b = net.get_bias(0, 0);
        for step in 0..500 {
            state.apply(&mut net, &grads).unwrap();
            if step > 400 {
                let dw = net.get_weight(0, 0, 0) - prev_w;
                let db = net.get_bias(0, 0) - prev_b;
                assert!((dw + lr).abs() < 1e-5, "dw {dw}");
                assert!((db - lr).abs() < 1e-5, "db {db}");
            }
            prev_w = net.get_weight(0, 0, 0);
            prev_b = net.get_bias(0, 0);
        }
    }

    #[test]
    fn adam_single_step_matches_hand_computation() {
        let mut net = random_net(&[1, 1], OutputHead::Linear, 33);
        net.map_params_mut(|_| 0.5);
        let mut state = AdamState::new(&net, 0.01);
        let mut grads = MlpGrads::zeros_like(&net);
        grads.w[0][(0, 0)] = 0.2;
        grads.b[0][0] = -0.1;
        state.apply(&mut net, &grads).unwrap();

        // Hand computation from the Adam update equations, t = 1.
        let hand = |p: f64, g: f64| {
            let m = 0.1 * g;
            let v = 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9_f64);
            let v_hat = v / (1.0 - 0.999_f64);
            p - 0.01 * m_hat / (v_hat.sqrt() + 1e-8)
        };
        assert!((net.get_weight(0, 0, 0) - hand(0.5, 0.2)).abs() < 1e-12);
        assert!((net.get_bias(0, 0) - hand(0.5, -0.1)).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut net = random_net(&[2, 3, 1], OutputHead::Linear, 34);
        let mut state = AdamState::new(&net, 1e-3);
        let mut grads = MlpGrads::zeros_like(&net);
        grads.w[1][(0, 0)] = f64::NAN;
        match state.apply(&mut net, &grads) {
            Err(NnError::NonFiniteGradient { layer }) => assert_eq!(layer, 1),
            other => panic!("expected non-finite gradient error, got {other:?}"),
        }
    }

    #[test]
    fn polyak_endpoints_and_midpoint() {
        let online = random_net(&[2, 3, 1], OutputHead::Linear, 41);
        let base = random_net(&[2, 3, 1], OutputHead::Linear, 42);

        let mut t = base.clone();
        polyak_update(&mut t, &online, 1.0).unwrap();
        let mut got = Vec::new();
        t.for_each_param(|p| got.push(p));
        let mut want = Vec::new();
        online.for_each_param(|p| want.push(p));
        assert_eq!(got, want);

        let mut t = base.clone();
        polyak_update(&mut t, &online, 0.0).unwrap();
        let mut got = Vec::new();
        t.for_each_param(|p| got.push(p));
        let mut want = Vec::new();
        base.for_each_param(|p| want.push(p));
        assert_eq!(got, want);

        let mut t = random_net(&[1, 1], OutputHead::Linear, 43);
        t.map_params_mut(|_| 0.0);
        let mut o = t.clone();
        o.map_params_mut(|_| 1.0);
        polyak_update(&mut t, &o, 0.05).unwrap();
        t.for_each_param(|p| assert!((p - 0.05).abs() < 1e-16));
    }

    #[test]
    fn polyak_rejects_architecture_mismatch() {
        let mut t = random_net(&[2, 3, 1], OutputHead::Linear, 44);
        let o = random_net(&[2, 4, 1], OutputHead::Linear, 45);
        assert!(matches!(
            polyak_update(&mut t, &o, 0.5),
            Err(NnError::ArchitectureMismatch)
        ));
    }

    #[test]
    fn seeded_construction_and_updates_are_bit_deterministic() {
        let run = || {
            let mut net = random_net(&[3, 16, 16, 2], OutputHead::Linear, 55);
            let mut state = AdamState::new(&net, 3e-4);
            let mut r = rng(56);
            for _ in 0..50 {
                let input: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
                let adjoint: Vec<f64> = (0..2).map(|_| r.gen_range(-1.0..1.0)).collect();
                let grads = net.gradient(&input, &adjoint).unwrap();
                state.apply(&mut net, &grads).unwrap();
            }
            let mut bits = Vec::new();
            net.for_each_param(|p| bits.push(p.to_bits()));
            bits
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = random_net(&[4, 8, 8, 4], OutputHead::GaussianPolicy { action_dim: 2 }, 66);
        let mut buf = Vec::new();
        net.save_text(&mut buf).unwrap();
        let loaded = Mlp::load_text(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.widths(), net.widths());
        assert_eq!(loaded.head(), net.head());
        let mut a = Vec::new();
        net.for_each_param(|p| a.push(p.to_bits()));
        let mut b = Vec::new();
        loaded.for_each_param(|p| b.push(p.to_bits()));
        assert_eq!(a, b);

        // And the text itself is stable across a save/load/save cycle.
        let mut buf2 = Vec::new();
        loaded.save_text(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn gaussian_head_clamps_log_std() {
        let mut net = random_net(&[2, 4, 4], OutputHead::GaussianPolicy { action_dim: 2 }, 77);
        net.map_params_mut(|_| 0.0);
        net.set_bias(1, 2, 100.0);
        net.set_bias(1, 3, -100.0);
        let out = net.forward(&[0.0, 0.0]).unwrap();
        assert_eq!(out[2], LOG_STD_MAX);
        assert_eq!(out[3], LOG_STD_MIN);
    }
}
