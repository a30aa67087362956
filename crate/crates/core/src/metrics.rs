//! Accuracy, latency, per-layer spiking rates, energy cost and the Gaussian
//! noise sweep.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use crate::coding::{argmax, first_to_spike_winner};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{Coding, LayerKind, LayerSpec, Network, NeuronKind, Simulator};
use crate::tensor::RngStream;

const EVAL_STREAM: u64 = 0xE7A1;
const NOISE_STREAM: u64 = 0x7015E;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub mode: Coding,
    /// Overrides the network's horizon (e.g. a fixed window for rate mode).
    pub horizon: Option<usize>,
    /// Seed of the per-sample streams used by stochastic neurons and noise.
    pub seed: u64,
    /// Variance of additive Gaussian input noise; 0 disables it.
    pub noise_variance: f64,
    pub workers: usize,
}

impl EvalOptions {
    pub fn for_network(net: &Network) -> Self {
        Self {
            mode: net.spec.coding,
            horizon: None,
            seed: 0,
            noise_variance: 0.0,
            workers: 1,
        }
    }
}

/// Result of simulating one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutcome {
    pub prediction: usize,
    /// Timesteps simulated: the first output spike under first-to-spike
    /// coding, the full window under rate coding.
    pub latency: usize,
    /// Output spike seen before the horizon ran out.
    pub decided: bool,
    /// Spikes per neuron per simulated step, for each spiking layer.
    pub rates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub mean_latency: f64,
    /// Mean spiking rate of each spiking layer, in layer order.
    pub layer_rates: Vec<f64>,
    /// Mean input activation, used as the input rate by
    /// [`Self::energy_cost_with_input`].
    pub input_rate: f64,
    /// Energy cost over weighted layers 2..L, each charged with the rate of
    /// the spiking layer that feeds it.
    pub energy_cost: f64,
    /// Energy cost that also charges the first weighted layer with the mean
    /// input activation.
    pub energy_cost_with_input: f64,
    pub n_samples: usize,
    pub horizon: usize,
}

/// Simulates one sample under `options`, stopping at the first output spike
/// in first-to-spike mode.
pub fn simulate_sample(net: &Network, pixels: &[f64], index: usize, options: &EvalOptions) -> Result<SampleOutcome> {
    let horizon = options.horizon.unwrap_or(net.spec.horizon);
    let stream = RngStream::new(options.seed, EVAL_STREAM).child(index as u64);
    let noisy;
    let input = if options.noise_variance > 0.0 {
        let mut noise = vec![0.0; pixels.len()];
        RngStream::new(options.seed, NOISE_STREAM)
            .child(index as u64)
            .fill_gaussian(&mut noise, 0.0, options.noise_variance.sqrt())?;
        noisy = pixels.iter().zip(&noise).map(|(p, n)| p + n).collect::<Vec<_>>();
        &noisy[..]
    } else {
        pixels
    };
    let sized;
    let net = if horizon != net.spec.horizon {
        let mut n = net.clone();
        n.spec.horizon = horizon;
        sized = n;
        &sized
    } else {
        net
    };
    let mut sim = Simulator::new(net, input, stream)?;
    let n_out = net.spec.output_layer().out_len();
    let mut counts = vec![0.0; n_out];
    let mut decision = None;
    let mut last = None;
    for _ in 0..horizon {
        let out = sim.step()?;
        if options.mode == Coding::FirstToSpike {
            let tiebreak = out.probs.as_deref().unwrap_or(&out.v);
            if let Some(w) = first_to_spike_winner(&out.spikes, tiebreak) {
                decision = Some(w);
                break;
            }
        } else {
            for (c, s) in counts.iter_mut().zip(&out.spikes) {
                *c += s;
            }
        }
        last = Some(out);
    }
    let steps = sim.steps();
    let prediction = match (options.mode, decision) {
        (_, Some(w)) => w,
        (Coding::FirstToSpike, None) => argmax(&last.expect("horizon >= 1").v),
        (Coding::Rate, None) => {
            // Highest count; ties by final potential, then lowest index.
            let v = last.expect("horizon >= 1").v;
            let mut best = 0;
            for i in 1..n_out {
                if counts[i] > counts[best] || (counts[i] == counts[best] && v[i] > v[best]) {
                    best = i;
                }
            }
            best
        }
    };
    let rates = net
        .spec
        .layers
        .iter()
        .zip(sim.spike_counts())
        .filter(|(l, _)| l.is_spiking())
        .map(|(l, &c)| c / (l.out_len() * steps) as f64)
        .collect();
    Ok(SampleOutcome {
        prediction,
        latency: steps,
        decided: decision.is_some(),
        rates,
    })
}

/// Per-sample outcomes in dataset order. Work is split across `workers`
/// threads; results do not depend on the split.
pub fn simulate_dataset(net: &Network, ds: &Dataset, options: &EvalOptions) -> Result<Vec<SampleOutcome>> {
    if ds.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty dataset".into()));
    }
    if ds.image_len() != net.spec.input_len() {
        return Err(Error::Dimension(format!(
            "dataset images have {} values, network expects {}",
            ds.image_len(),
            net.spec.input_len()
        )));
    }
    let workers = options.workers.clamp(1, ds.len());
    let chunk = ds.len().div_ceil(workers);
    let run = |range: std::ops::Range<usize>| -> Result<Vec<SampleOutcome>> {
        range.map(|i| simulate_sample(net, ds.image(i), i, options)).collect()
    };
    if workers == 1 {
        return run(0..ds.len());
    }
    let parts: Vec<Result<Vec<SampleOutcome>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let range = w * chunk..((w + 1) * chunk).min(ds.len());
                s.spawn(move || run(range))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(ds.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate(net: &Network, ds: &Dataset, options: &EvalOptions) -> Result<MetricsReport> {
    let outcomes = simulate_dataset(net, ds, options)?;
    report(net, ds, &outcomes, options)
}

/// Aggregates sample outcomes into a report.
pub fn report(net: &Network, ds: &Dataset, outcomes: &[SampleOutcome], options: &EvalOptions) -> Result<MetricsReport> {
    let n = outcomes.len() as f64;
    let correct = outcomes
        .iter()
        .enumerate()
        .filter(|(i, o)| o.prediction == ds.label(*i))
        .count();
    let mean_latency = outcomes.iter().map(|o| o.latency as f64).sum::<f64>() / n;
    let n_rates = outcomes[0].rates.len();
    let layer_rates: Vec<f64> = (0..n_rates)
        .map(|l| outcomes.iter().map(|o| o.rates[l]).sum::<f64>() / n)
        .collect();
    let input_rate = (0..outcomes.len()).map(|i| mean(ds.image(i))).sum::<f64>() / n;
    let (rates, ops) = energy_terms(&net.spec.layers, &layer_rates, None)?;
    // A single weighted layer has nothing downstream to charge.
    let spiking_only = if ops.is_empty() {
        0.0
    } else {
        energy_cost(&rates, mean_latency, &ops)?
    };
    let (rates, ops) = energy_terms(&net.spec.layers, &layer_rates, Some(input_rate))?;
    let with_input = energy_cost(&rates, mean_latency, &ops)?;
    Ok(MetricsReport {
        accuracy: correct as f64 / n,
        mean_latency,
        layer_rates,
        input_rate,
        energy_cost: spiking_only,
        energy_cost_with_input: with_input,
        n_samples: outcomes.len(),
        horizon: options.horizon.unwrap_or(net.spec.horizon),
    })
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Operation count of a layer: `C_I·K_H·K_W·C_O·O_H·O_W` for convolutions,
/// `I_F·O_F` for linear layers, 0 for pooling.
pub fn layer_ops(layer: &LayerSpec) -> u64 {
    match layer.kind {
        LayerKind::Linear {
            in_features,
            out_features,
        } => (in_features * out_features) as u64,
        LayerKind::Conv { .. } => {
            let g = layer.conv_geom().expect("validated conv");
            (g.c_in * g.kh * g.kw * g.c_out * g.oh * g.ow) as u64
        }
        LayerKind::Pool { .. } => 0,
    }
}

/// Pairs each charged weighted layer's operation count with the rate of the
/// activity feeding it. With `input_rate`, the first weighted layer is charged
/// at that rate; otherwise it is left out.
pub fn energy_terms(
    layers: &[LayerSpec],
    spiking_rates: &[f64],
    input_rate: Option<f64>,
) -> Result<(Vec<f64>, Vec<u64>)> {
    let mut rates = Vec::new();
    let mut ops = Vec::new();
    let mut feeding = input_rate;
    let mut spiking = spiking_rates.iter();
    for layer in layers {
        if layer.is_weighted() {
            if let Some(r) = feeding {
                rates.push(r);
                ops.push(layer_ops(layer));
            }
        }
        if layer.neuron != NeuronKind::None {
            feeding = Some(
                *spiking
                    .next()
                    .ok_or_else(|| Error::Dimension("fewer rates than spiking layers".into()))?,
            );
        }
    }
    Ok((rates, ops))
}

/// `E = Σ_i S_{i−1}·T·OP_i / Σ_j OP_j`, with `rates[i]` the rate feeding the
/// layer whose operation count is `ops[i]`.
pub fn energy_cost(rates: &[f64], horizon: f64, ops: &[u64]) -> Result<f64> {
    if rates.len() != ops.len() {
        return Err(Error::Dimension(format!(
            "{} rates for {} layers",
            rates.len(),
            ops.len()
        )));
    }
    let total: u64 = ops.iter().sum();
    if total == 0 {
        return Err(Error::Argument("total operation count is zero".into()));
    }
    Ok(rates
        .iter()
        .zip(ops)
        .map(|(s, &op)| s * horizon * (op as f64 / total as f64))
        .sum())
}

/// Accuracy under additive `N(0, σ²)` input noise for each variance.
pub fn noise_sweep(net: &Network, ds: &Dataset, variances: &[f64], options: &EvalOptions) -> Result<Vec<(f64, f64)>> {
    if let Some(bad) = variances.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Argument(format!("noise variance {bad} outside [0, 1]")));
    }
    variances
        .iter()
        .map(|&var| {
            let opts = EvalOptions {
                noise_variance: var,
                ..*options
            };
            Ok((var, evaluate(net, ds, &opts)?.accuracy))
        })
        .collect()
}

pub const REPORT_HEADER: &str =
    "model,accuracy,mean_latency,energy_cost,energy_cost_with_input,input_rate,n_samples,horizon";

impl MetricsReport {
    pub fn csv_row(&self, model: &str) -> String {
        format!(
            "{model},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.accuracy,
            self.mean_latency,
            self.energy_cost,
            self.energy_cost_with_input,
            self.input_rate,
            self.n_samples,
            self.horizon
        )
    }

    pub fn rates_csv(&self) -> String {
        let mut out = String::from("layer_index,rate\n");
        for (i, r) in self.layer_rates.iter().enumerate() {
            writeln!(out, "{},{r:.6}", i + 1).expect("write to String");
        }
        out
    }
}

pub fn noise_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("variance,accuracy\n");
    for (v, a) in rows {
        writeln!(out, "{v},{a:.6}").expect("write to String");
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)
}
