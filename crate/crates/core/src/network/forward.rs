//! Simulation of a [`Network`] over the unrolled horizon.
//!
//! Two drivers share the same per-layer arithmetic:
//!
//! * [`forward`] runs layer by layer over a batch and the full horizon,
//!   recording everything the backward pass needs into a [`Tape`].
//! * [`Simulator`] runs one sample timestep by timestep so inference can stop
//!   at the first output spike.
//!
//! Every matrix row is reduced on its own and stochastic draws are addressed
//! by `(sample stream, layer, t·width + neuron)`, so both drivers produce
//! bit-identical spikes.

use super::{LayerKind, LayerSpec, Network, NeuronKind};
use crate::bptt::{Tape, TapeNode};
use crate::error::{Error, Result};
use crate::neuron::{det_lif_update, stoch_lif_update, DetLifParams, StochLifParams};
use crate::tensor::{kernels, pool, PoolMode, RngStream};

/// Layer input or output over a batch, sample-major.
///
/// Constant activations (the direct-encoded input and anything computed from
/// it alone) hold `[batch × width]`; time-varying ones `[batch × T × width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Activation {
    pub constant: bool,
    pub batch: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Activation {
    pub fn rows(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn rows_per_sample(&self) -> usize {
        self.rows() / self.batch
    }

    /// All rows belonging to sample `b`.
    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.rows_per_sample() * self.width;
        &self.data[b * n..(b + 1) * n]
    }
}

pub(crate) fn det_params(l: &LayerSpec) -> DetLifParams {
    DetLifParams {
        v_th: l.param,
        lambda: l.lambda,
    }
}

pub(crate) fn stoch_params(l: &LayerSpec) -> StochLifParams {
    StochLifParams {
        k: l.param,
        lambda: l.lambda,
    }
}

/// Synaptic drive (or pooled output) for every row of `x`.
pub(crate) fn layer_drive(net: &Network, layer: usize, rows: usize, x: &[f64]) -> (Vec<f64>, Option<Vec<usize>>) {
    let spec = &net.spec.layers[layer];
    match spec.kind {
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            let mut out = vec![0.0; rows * out_features];
            kernels::gemm_nn(rows, in_features, out_features, x, net.weight(layer).data(), &mut out);
            (out, None)
        }
        LayerKind::Conv { .. } => {
            let g = spec.conv_geom().expect("validated conv");
            (g.forward_batch(rows, x, net.weight(layer).data()), None)
        }
        LayerKind::Pool {
            channels,
            in_h,
            in_w,
            window,
            mode,
        } => {
            let mut out = vec![0.0; rows * spec.out_len()];
            let mut am = (mode == PoolMode::Max).then(|| vec![0usize; out.len()]);
            pool::pool_slices(
                x,
                rows * channels,
                in_h,
                in_w,
                window,
                mode,
                &mut out,
                am.as_deref_mut(),
            );
            (out, am)
        }
    }
}

pub(crate) fn layer_stream(sample: &RngStream, layer: usize) -> RngStream {
    sample.child(layer as u64)
}

/// Runs every layer over the full horizon for a batch of direct-encoded
/// inputs `[batch × input_len]`. `streams` holds one stream per sample and may
/// be empty for deterministic networks.
pub fn forward(net: &Network, input: &[f64], batch: usize, streams: &[RngStream]) -> Result<Tape> {
    let spec = &net.spec;
    let horizon = spec.horizon;
    if batch == 0 || input.len() != batch * spec.input_len() {
        return Err(Error::Dimension(format!(
            "input holds {} values, expected {batch} x {}",
            input.len(),
            spec.input_len()
        )));
    }
    let stochastic = spec.layers.iter().any(|l| l.neuron == NeuronKind::Stochastic);
    if stochastic && streams.len() != batch {
        return Err(Error::Argument(format!(
            "stochastic network needs one stream per sample ({batch}), got {}",
            streams.len()
        )));
    }

    let mut slots = vec![Activation {
        constant: true,
        batch,
        width: spec.input_len(),
        data: input.to_vec(),
    }];
    let mut nodes = Vec::with_capacity(spec.layers.len());
    for (li, layer) in spec.layers.iter().enumerate() {
        let x = &slots[li];
        let (drive, argmax) = layer_drive(net, li, x.rows(), &x.data);
        let width = layer.out_len();
        let mut node = TapeNode {
            layer: li,
            v: Vec::new(),
            probs: None,
            argmax,
        };
        if layer.neuron == NeuronKind::None {
            let out = Activation {
                constant: x.constant,
                batch,
                width,
                data: drive,
            };
            nodes.push(node);
            slots.push(out);
            continue;
        }
        let drive_rows = if x.constant { 1 } else { horizon };
        let per_sample = horizon * width;
        let mut vs = vec![0.0; batch * per_sample];
        let mut spikes = vec![0.0; batch * per_sample];
        let mut v_state = vec![0.0; width];
        match layer.neuron {
            NeuronKind::Deterministic => {
                let p = det_params(layer);
                let mut fired = vec![0.0; width];
                for b in 0..batch {
                    v_state.fill(0.0);
                    fired.fill(0.0);
                    for t in 0..horizon {
                        let d = &drive[(b * drive_rows + t.min(drive_rows - 1)) * width..][..width];
                        det_lif_update(&mut v_state, &mut fired, d, p);
                        let at = b * per_sample + t * width;
                        vs[at..at + width].copy_from_slice(&v_state);
                        spikes[at..at + width].copy_from_slice(&fired);
                    }
                }
            }
            NeuronKind::Stochastic => {
                let p = stoch_params(layer);
                let mut probs = vec![0.0; batch * per_sample];
                let mut uniforms = vec![0.0; per_sample];
                for b in 0..batch {
                    layer_stream(&streams[b], li).fill_uniform(&mut uniforms);
                    v_state.fill(0.0);
                    for t in 0..horizon {
                        let d = &drive[(b * drive_rows + t.min(drive_rows - 1)) * width..][..width];
                        let at = b * per_sample + t * width;
                        stoch_lif_update(
                            &mut v_state,
                            d,
                            p,
                            &uniforms[t * width..(t + 1) * width],
                            &mut spikes[at..at + width],
                            &mut probs[at..at + width],
                        );
                        vs[at..at + width].copy_from_slice(&v_state);
                    }
                }
                node.probs = Some(probs);
            }
            NeuronKind::None => unreachable!(),
        }
        node.v = vs;
        nodes.push(node);
        slots.push(Activation {
            constant: false,
            batch,
            width,
            data: spikes,
        });
    }
    Ok(Tape::new(horizon, batch, slots, nodes))
}

/// What the output layer did at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub spikes: Vec<f64>,
    pub v: Vec<f64>,
    /// Firing probabilities, for stochastic output layers.
    pub probs: Option<Vec<f64>>,
}

/// Timestep-by-timestep simulation of a single sample.
pub struct Simulator<'a> {
    net: &'a Network,
    stream: RngStream,
    t: usize,
    /// Drives of the layers whose input never changes over time.
    cached_drive: Vec<Option<Vec<f64>>>,
    v: Vec<Vec<f64>>,
    fired: Vec<Vec<f64>>,
    spike_counts: Vec<f64>,
}

impl<'a> Simulator<'a> {
    /// `pixels` is one direct-encoded input, applied unchanged at every step.
    /// `stream` is the sample's stream; deterministic layers ignore it.
    pub fn new(net: &'a Network, pixels: &[f64], stream: RngStream) -> Result<Self> {
        let spec = &net.spec;
        if pixels.len() != spec.input_len() {
            return Err(Error::Dimension(format!(
                "sample has {} values, network expects {}",
                pixels.len(),
                spec.input_len()
            )));
        }
        let mut cached_drive = vec![None; spec.layers.len()];
        let mut x = pixels.to_vec();
        for (li, layer) in spec.layers.iter().enumerate() {
            let (drive, _) = layer_drive(net, li, 1, &x);
            cached_drive[li] = Some(drive.clone());
            if layer.is_spiking() {
                break;
            }
            x = drive;
        }
        let widths: Vec<usize> = spec.layers.iter().map(LayerSpec::out_len).collect();
        Ok(Self {
            net,
            stream,
            t: 0,
            cached_drive,
            v: widths.iter().map(|&w| vec![0.0; w]).collect(),
            fired: widths.iter().map(|&w| vec![0.0; w]).collect(),
            spike_counts: vec![0.0; widths.len()],
        })
    }

    /// Number of timesteps simulated so far.
    pub fn steps(&self) -> usize {
        self.t
    }

    /// Total spikes emitted by each layer so far (zero for non-spiking layers).
    pub fn spike_counts(&self) -> &[f64] {
        &self.spike_counts
    }

    /// Advances all layers by one timestep.
    pub fn step(&mut self) -> Result<StepOutput> {
        let spec = &self.net.spec;
        if self.t >= spec.horizon {
            return Err(Error::State(format!("horizon {} already simulated", spec.horizon)));
        }
        let t = self.t;
        let last = spec.layers.len() - 1;
        let mut x: Vec<f64> = Vec::new();
        let mut probs = None;
        for (li, layer) in spec.layers.iter().enumerate() {
            let width = layer.out_len();
            let drive = match &self.cached_drive[li] {
                Some(d) => d.clone(),
                None => layer_drive(self.net, li, 1, &x).0,
            };
            x = match layer.neuron {
                NeuronKind::None => drive,
                NeuronKind::Deterministic => {
                    det_lif_update(&mut self.v[li], &mut self.fired[li], &drive, det_params(layer));
                    self.fired[li].clone()
                }
                NeuronKind::Stochastic => {
                    let mut u = vec![0.0; width];
                    layer_stream(&self.stream, li)
                        .seek((t * width) as u64)
                        .fill_uniform(&mut u);
                    let mut spikes = vec![0.0; width];
                    let mut p = vec![0.0; width];
                    stoch_lif_update(&mut self.v[li], &drive, stoch_params(layer), &u, &mut spikes, &mut p);
                    if li == last {
                        probs = Some(p);
                    }
                    spikes
                }
            };
            if layer.is_spiking() {
                self.spike_counts[li] += x.iter().sum::<f64>();
            }
        }
        self.t += 1;
        Ok(StepOutput {
            spikes: x,
            v: self.v[last].clone(),
            probs,
        })
    }
}
