//! Backpropagation through the unrolled horizon.
//!
//! A [`Tape`] holds every layer's inputs, membrane potentials and (for
//! stochastic layers) firing probabilities over all `T` steps. [`backward`]
//! sweeps it in reverse. Three rules replace the non-differentiable steps:
//!
//! * the arctan surrogate stands in for `∂o/∂V` of deterministic neurons,
//!   evaluated at `V − V_th` with the soft-reset path detached;
//! * the sign estimator maps a gradient on first-spike times onto the spike
//!   train, `−1` at the first spike;
//! * the straight-through estimator passes gradients through Bernoulli draws
//!   unchanged, so stochastic neurons backpropagate through `σ(V)`.
//!
//! Weight gradients are accumulated sample by sample in batch order, so the
//! gradient of a batch is exactly the ordered sum of per-sample gradients.

use std::f64::consts::PI;

use crate::coding::{self, ProbTable};
use crate::error::{Error, Result};
use crate::network::{Activation, LayerKind, ModelKind, Network, NeuronKind};
use crate::neuron::{first_spike_times, SpikeRecord};
use crate::tensor::{kernels, pool, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateConfig {
    pub alpha: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { alpha: 2.0 }
    }
}

impl SurrogateConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Parameter(format!("surrogate width must be > 0, got {alpha}")));
        }
        Ok(Self { alpha })
    }
}

/// Smooth stand-in for the spike nonlinearity, `(1/π)·atan(π·v·α/2)`.
pub fn smoothed_spike(v: f64, alpha: f64) -> f64 {
    (PI * v * alpha / 2.0).atan() / PI
}

/// `(1/π) / (1 + (π·v·α/2)²)`.
pub fn arctan_surrogate(v: f64, alpha: f64) -> f64 {
    let z = PI * v * alpha / 2.0;
    1.0 / (PI * (1.0 + z * z))
}

pub fn arctan_surrogate_grad(v: &Tensor, config: SurrogateConfig) -> Tensor {
    v.map(|x| arctan_surrogate(x, config.alpha))
}

/// Routes `dL/dt_i` onto the `[T × n]` spike train: `−dL/dt_i` at the first
/// spike, zero elsewhere. Silent neurons (time `T + 1`) receive it at `t = T`.
pub fn sign_estimator_backward(first_times: &Tensor, grad_times: &Tensor, horizon: usize) -> Result<Tensor> {
    first_times.check_same_shape(grad_times)?;
    let n = first_times.len();
    let mut out = vec![0.0; horizon * n];
    for (i, (&t, &g)) in first_times.data().iter().zip(grad_times.data()).enumerate() {
        if !(t >= 1.0 && t <= (horizon + 1) as f64) {
            return Err(Error::Index(format!(
                "first-spike time {t} outside 1..={}",
                horizon + 1
            )));
        }
        let step = (t as usize).min(horizon);
        out[(step - 1) * n + i] = -g;
    }
    Ok(Tensor::from_parts(vec![horizon, n], out))
}

/// Identity: the Bernoulli draw is invisible to the backward pass.
pub fn straight_through_backward(grad_out: &Tensor) -> Tensor {
    grad_out.clone()
}

/// What the backward pass needs from one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TapeNode {
    pub layer: usize,
    /// Membrane potentials `[batch × T × width]`; empty for pool layers.
    pub v: Vec<f64>,
    /// Firing probabilities of stochastic layers, same layout as `v`.
    pub probs: Option<Vec<f64>>,
    /// Winning input index per output of a max-pool layer.
    pub argmax: Option<Vec<usize>>,
}

/// Recorded forward pass. `slots[0]` is the input and `slots[i + 1]` the
/// output of layer `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tape {
    pub horizon: usize,
    pub batch: usize,
    pub slots: Vec<Activation>,
    pub nodes: Vec<TapeNode>,
    /// False when recording stopped before the horizon; such a tape cannot
    /// be differentiated.
    pub complete: bool,
}

impl Tape {
    pub(crate) fn new(horizon: usize, batch: usize, slots: Vec<Activation>, nodes: Vec<TapeNode>) -> Self {
        Self {
            horizon,
            batch,
            slots,
            nodes,
            complete: true,
        }
    }

    pub fn output(&self) -> &Activation {
        self.slots.last().expect("tape has an input slot")
    }

    /// `[T × width]` spike train of layer `layer` for sample `b`.
    pub fn spike_record(&self, layer: usize, b: usize) -> Result<SpikeRecord> {
        let slot = &self.slots[layer + 1];
        if slot.constant {
            return Err(Error::Argument(format!("layer {layer} does not spike")));
        }
        SpikeRecord::new(Tensor::from_parts(
            vec![self.horizon, slot.width],
            slot.sample(b).to_vec(),
        ))
    }

    /// `[T × width]` firing probabilities of stochastic layer `layer`, sample `b`.
    pub fn prob_table(&self, layer: usize, b: usize) -> Result<ProbTable> {
        let width = self.slots[layer + 1].width;
        let probs = self.nodes[layer]
            .probs
            .as_ref()
            .ok_or_else(|| Error::Argument(format!("layer {layer} is not stochastic")))?;
        let n = self.horizon * width;
        ProbTable::new(Tensor::from_parts(
            vec![self.horizon, width],
            probs[b * n..(b + 1) * n].to_vec(),
        ))
    }
}

/// One gradient per weighted layer, `None` for pool layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .weights
                .iter()
                .map(|w| w.as_ref().map(|w| Tensor::zeros(w.shape())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                a.add_assign(b)?;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(Tensor::is_finite)
    }
}

/// Which loss drives the output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Temporal cross-entropy on first-spike times, through the sign estimator.
    FirstSpikeCe,
    /// Maximum likelihood of the correct neuron firing first.
    MaxLikelihood,
    /// Cross-entropy on output spike counts.
    RateCe,
}

impl LossKind {
    pub fn for_model(kind: ModelKind) -> Self {
        match kind {
            ModelKind::DetFirst => Self::FirstSpikeCe,
            ModelKind::StochFirst => Self::MaxLikelihood,
            ModelKind::DetRate => Self::RateCe,
        }
    }
}

/// Loss gradient at the output layer, laid out like the tape's output slot
/// (`[batch × T × n]`).
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrad {
    pub data: Vec<f64>,
    /// True when `data` holds `dL/dV` (membrane potential) rather than
    /// `dL/do` (spikes).
    pub wrt_potential: bool,
}

/// Summed loss over the batch and its gradient at the output layer, with
/// every per-sample gradient multiplied by `scale`. The maximum-likelihood
/// loss is differentiated in log-odds space and yields `dL/dV`; the others
/// yield `dL/do`.
pub fn output_loss(tape: &Tape, targets: &[usize], kind: LossKind, scale: f64) -> Result<(f64, OutputGrad)> {
    if targets.len() != tape.batch {
        return Err(Error::Dimension(format!(
            "{} targets for a batch of {}",
            targets.len(),
            tape.batch
        )));
    }
    let last = tape.nodes.len() - 1;
    let (horizon, n) = (tape.horizon, tape.output().width);
    let mut total = 0.0;
    let mut grad = vec![0.0; tape.batch * horizon * n];
    for (b, &y) in targets.iter().enumerate() {
        let g = &mut grad[b * horizon * n..(b + 1) * horizon * n];
        match kind {
            LossKind::FirstSpikeCe => {
                let times = first_spike_times(&tape.spike_record(last, b)?);
                let lv = coding::fts_ce_loss(&times, y)?;
                let routed = sign_estimator_backward(&times, &lv.grads, horizon)?;
                total += lv.value;
                for (gi, r) in g.iter_mut().zip(routed.data()) {
                    *gi = r * scale;
                }
            }
            LossKind::MaxLikelihood => {
                let v = &tape.nodes[last].v[b * horizon * n..(b + 1) * horizon * n];
                let lv = coding::ml_loss_logits(&Tensor::from_parts(vec![horizon, n], v.to_vec()), y)?;
                total += lv.value;
                for (gi, r) in g.iter_mut().zip(lv.grads.data()) {
                    *gi = r * scale;
                }
            }
            LossKind::RateCe => {
                let counts = coding::accumulate(&tape.spike_record(last, b)?.spikes)?;
                let lv = coding::rate_ce_loss(&counts, y)?;
                total += lv.value;
                for row in g.chunks_mut(n) {
                    for (gi, r) in row.iter_mut().zip(lv.grads.data()) {
                        *gi = r * scale;
                    }
                }
            }
        }
    }
    Ok((
        total,
        OutputGrad {
            data: grad,
            wrt_potential: kind == LossKind::MaxLikelihood,
        },
    ))
}

/// Reverse sweep over a complete tape.
pub fn backward(net: &Network, tape: &Tape, out_grad: &OutputGrad, surrogate: SurrogateConfig) -> Result<Gradients> {
    let spec = &net.spec;
    if !tape.complete || tape.nodes.len() != spec.layers.len() || tape.slots.len() != spec.layers.len() + 1 {
        return Err(Error::State("tape does not hold a complete forward pass".into()));
    }
    if out_grad.data.len() != tape.output().data.len() {
        return Err(Error::Dimension(format!(
            "output gradient has {} values, output holds {}",
            out_grad.data.len(),
            tape.output().data.len()
        )));
    }
    let (batch, horizon) = (tape.batch, tape.horizon);
    let mut grads = Gradients::zeros_like(net);
    if out_grad.wrt_potential && !spec.output_layer().is_spiking() {
        return Err(Error::Argument("potential gradient for a non-spiking output".into()));
    }
    let mut g = out_grad.data.clone();
    let last = spec.layers.len() - 1;
    for li in (0..spec.layers.len()).rev() {
        let layer = &spec.layers[li];
        let node = &tape.nodes[li];
        let x = &tape.slots[li];
        let width = layer.out_len();

        if layer.is_spiking() {
            let wrt_potential = li == last && out_grad.wrt_potential;
            membrane_backward(layer, node, &mut g, horizon, width, surrogate, wrt_potential);
            if x.constant {
                g = sum_over_time(&g, batch, horizon, width);
            }
        }
        let rows = x.rows();
        let r = x.rows_per_sample();
        match layer.kind {
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let gw = grads.layers[li].as_mut().expect("weighted layer").data_mut();
                let mut scratch = vec![0.0; if r > 1 { gw.len() } else { 0 }];
                for b in 0..batch {
                    let gb = &g[b * r * out_features..(b + 1) * r * out_features];
                    if r == 1 {
                        kernels::gemm_tn(1, in_features, out_features, x.sample(b), gb, gw);
                    } else {
                        scratch.fill(0.0);
                        kernels::gemm_tn(r, in_features, out_features, x.sample(b), gb, &mut scratch);
                        add_into(gw, &scratch);
                    }
                }
                if li > 0 {
                    let mut gx = vec![0.0; rows * in_features];
                    kernels::gemm_nt(rows, out_features, in_features, &g, net.weight(li).data(), &mut gx);
                    g = gx;
                }
            }
            LayerKind::Conv { .. } => {
                let geom = layer.conv_geom().expect("validated conv");
                let gk = grads.layers[li].as_mut().expect("weighted layer").data_mut();
                let mut scratch = vec![0.0; gk.len()];
                for b in 0..batch {
                    let gb = &g[b * r * width..(b + 1) * r * width];
                    scratch.fill(0.0);
                    geom.kernel_grad_batch(r, gb, x.sample(b), &mut scratch);
                    add_into(gk, &scratch);
                }
                if li > 0 {
                    g = geom.input_grad_batch(rows, &g, net.weight(li).data());
                }
            }
            LayerKind::Pool {
                channels,
                in_h,
                in_w,
                window,
                mode,
            } => {
                let mut gx = vec![0.0; rows * layer.in_len()];
                pool::pool_backward_slices(
                    &g,
                    rows * channels,
                    in_h,
                    in_w,
                    window,
                    mode,
                    node.argmax.as_deref(),
                    &mut gx,
                );
                g = gx;
            }
        }
    }
    Ok(grads)
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

/// Turns `dL/do` (in place) into `dL/d drive` for one spiking layer, running
/// the membrane recurrence backwards in time for every sample and neuron.
///
/// Deterministic: `gV^t = g^t·surr(V^t − V_th) + λ·gV^{t+1}`, drive gradient `gV^t`.
/// Stochastic: `gV^t = g^t·σ'(V^t) + (λ/k)·gV^{t+1}`, drive gradient `gV^t / k`.
/// With `wrt_potential`, `g^t` already is `dL/dV^t` and the local factor is
/// skipped.
fn membrane_backward(
    layer: &crate::network::LayerSpec,
    node: &TapeNode,
    g: &mut [f64],
    horizon: usize,
    width: usize,
    surrogate: SurrogateConfig,
    wrt_potential: bool,
) {
    let per_sample = horizon * width;
    let mut carry = vec![0.0; width];
    for b in 0..g.len() / per_sample {
        carry.fill(0.0);
        for t in (0..horizon).rev() {
            let at = b * per_sample + t * width;
            let gt = &mut g[at..at + width];
            match layer.neuron {
                NeuronKind::Deterministic => {
                    let v = &node.v[at..at + width];
                    for i in 0..width {
                        let local = if wrt_potential {
                            gt[i]
                        } else {
                            gt[i] * arctan_surrogate(v[i] - layer.param, surrogate.alpha)
                        };
                        let gv = local + layer.lambda * carry[i];
                        carry[i] = gv;
                        gt[i] = gv;
                    }
                }
                NeuronKind::Stochastic => {
                    let p = &node.probs.as_ref().expect("stochastic layer records probabilities")[at..at + width];
                    let k = layer.param;
                    for i in 0..width {
                        let local = if wrt_potential {
                            gt[i]
                        } else {
                            gt[i] * p[i] * (1.0 - p[i])
                        };
                        let gv = local + layer.lambda / k * carry[i];
                        carry[i] = gv;
                        gt[i] = gv / k;
                    }
                }
                NeuronKind::None => {}
            }
        }
    }
}

fn sum_over_time(g: &[f64], batch: usize, horizon: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * width];
    for b in 0..batch {
        let dst = &mut out[b * width..(b + 1) * width];
        for t in 0..horizon {
            add_into(dst, &g[(b * horizon + t) * width..][..width]);
        }
    }
    out
}
