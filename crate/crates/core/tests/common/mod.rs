//! Shared oracles and fixtures for the integration tests and the acceptance
//! runner.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use spikefirst::bptt::{arctan_surrogate, backward, output_loss, smoothed_spike, LossKind, SurrogateConfig};
use spikefirst::coding::{first_spike_event_prob, ml_loss, ProbTable};
use spikefirst::data::{load_mnist, Dataset, Split};
use spikefirst::network::{forward, Coding, LayerKind, LayerSpec, Network, NetworkSpec, NeuronKind};
use spikefirst::neuron::sigmoid;
use spikefirst::tensor::{conv2d, conv2d_backward, pool2d, pool2d_backward, PoolMode};
use spikefirst::trainer::{load_checkpoint, train_from, Checkpoint, TrainConfig, TrainOptions};
use spikefirst::tuner::{de_optimize, DeConfig};
use spikefirst::{RngStream, Tensor};

pub type Check = Result<String, String>;

/// `|a − b| ≤ rel·max(|a|, |b|) + abs`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

fn compare(label: &str, got: &[f64], want: &[f64], rel: f64, abs: f64) -> Result<f64, String> {
    if got.len() != want.len() {
        return Err(format!("{label}: {} values vs {}", got.len(), want.len()));
    }
    let mut worst: f64 = 0.0;
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        if !close(g, w, rel, abs) {
            return Err(format!("{label}[{i}]: {g} vs {w}"));
        }
        worst = worst.max((g - w).abs() / g.abs().max(w.abs()).max(abs / rel));
    }
    Ok(worst)
}

// ---------------------------------------------------------------- criterion 1

/// Probability that `correct` is the sole first spiker, by enumerating every
/// joint outcome of the `n·T` Bernoulli variables.
pub fn brute_force_first_spike(p: &[f64], horizon: usize, n: usize, correct: usize) -> f64 {
    let vars = n * horizon;
    let mut total = 0.0;
    for mask in 0u64..(1 << vars) {
        let mut weight = 1.0;
        for v in 0..vars {
            weight *= if mask >> v & 1 == 1 { p[v] } else { 1.0 - p[v] };
        }
        let fired = |t: usize, i: usize| mask >> (t * n + i) & 1 == 1;
        let first = (0..horizon).find(|&t| (0..n).any(|i| fired(t, i)));
        if let Some(t) = first {
            if fired(t, correct) && (0..n).filter(|&i| i != correct).all(|i| !fired(t, i)) {
                total += weight;
            }
        }
    }
    total
}

pub fn check_event_probability_oracle() -> Check {
    let mut rng = RngStream::new(2024, 1);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in [2usize, 3] {
        for horizon in 1..=4 {
            for _ in 0..100 {
                let p: Vec<f64> = (0..n * horizon).map(|_| rng.next_f64()).collect();
                let table = ProbTable::new(Tensor::new(&[horizon, n], p.clone()).unwrap()).unwrap();
                let correct = rng.below(n as u64) as usize;
                let closed: f64 = (1..=horizon)
                    .map(|t| first_spike_event_prob(&table, correct, t).unwrap())
                    .sum();
                let brute = brute_force_first_spike(&p, horizon, n, correct);
                let err = (closed - brute).abs();
                if err > 1e-12 {
                    return Err(format!(
                        "n={n} T={horizon}: closed form {closed} vs enumeration {brute}"
                    ));
                }
                worst = worst.max(err);
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} tables, max abs error {worst:.1e}"))
}

// ---------------------------------------------------------------- criterion 2

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

pub fn check_ml_loss_gradient() -> Result<f64, String> {
    let mut rng = RngStream::new(5, 2);
    let mut worst: f64 = 0.0;
    for (horizon, n) in [(1, 2), (3, 4), (6, 10)] {
        let p: Vec<f64> = (0..horizon * n).map(|_| 0.05 + 0.9 * rng.next_f64()).collect();
        let correct = rng.below(n as u64) as usize;
        let loss = |x: &[f64]| {
            let t = ProbTable::new(Tensor::new(&[horizon, n], x.to_vec()).unwrap()).unwrap();
            ml_loss(&t, correct).unwrap().value
        };
        let table = ProbTable::new(Tensor::new(&[horizon, n], p.clone()).unwrap()).unwrap();
        let analytic = ml_loss(&table, correct).unwrap().grads.into_data();
        let fd = central_difference(loss, &p, 1e-6);
        worst = worst.max(compare("ml_loss", &analytic, &fd, 1e-6, 1e-9)?);
    }
    Ok(worst)
}

/// The surrogate equals the derivative of the smoothed spike divided by
/// `πα/2`.
pub fn check_surrogate_gradient() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for alpha in [1.0, 2.0, 4.0] {
        let scale = std::f64::consts::PI * alpha / 2.0;
        let points: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.05).collect();
        let analytic: Vec<f64> = points.iter().map(|&v| arctan_surrogate(v, alpha)).collect();
        let fd: Vec<f64> = points
            .iter()
            .map(|&v| (smoothed_spike(v + 1e-6, alpha) - smoothed_spike(v - 1e-6, alpha)) / 2e-6 / scale)
            .collect();
        worst = worst.max(compare("surrogate", &analytic, &fd, 1e-6, 1e-12)?);
    }
    Ok(worst)
}

pub fn check_conv_pool_gradients() -> Result<f64, String> {
    let mut rng = RngStream::new(9, 4);
    let mut worst: f64 = 0.0;
    for (c, h, co, k, stride, pad) in [(1, 6, 2, 3, 1, 0), (2, 7, 3, 3, 2, 1), (3, 5, 2, 5, 1, 2)] {
        let input = rng.gaussian(&[c, h, h], 0.0, 1.0).unwrap();
        let kernel = rng.gaussian(&[co, c, k, k], 0.0, 1.0).unwrap();
        let out = conv2d(&input, &kernel, stride, pad).unwrap();
        let weights = rng.gaussian(out.shape(), 0.0, 1.0).unwrap();
        let objective = |x: &Tensor, w: &Tensor| -> f64 {
            conv2d(x, w, stride, pad)
                .unwrap()
                .data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (gx, gk) = conv2d_backward(&weights, &input, &kernel, stride, pad).unwrap();
        let fd_x = central_difference(
            |x| objective(&Tensor::new(input.shape(), x.to_vec()).unwrap(), &kernel),
            input.data(),
            1e-5,
        );
        let fd_k = central_difference(
            |w| objective(&input, &Tensor::new(kernel.shape(), w.to_vec()).unwrap()),
            kernel.data(),
            1e-5,
        );
        worst = worst.max(compare("conv input", gx.data(), &fd_x, 1e-6, 1e-9)?);
        worst = worst.max(compare("conv kernel", gk.data(), &fd_k, 1e-6, 1e-9)?);
    }
    for mode in [PoolMode::Average, PoolMode::Max] {
        let input = rng.gaussian(&[2, 6, 6], 0.0, 1.0).unwrap();
        let pooled = pool2d(&input, 2, mode).unwrap();
        let weights = rng.gaussian(pooled.output.shape(), 0.0, 1.0).unwrap();
        let g = pool2d_backward(&weights, input.shape(), 2, mode, pooled.argmax.as_deref()).unwrap();
        let fd = central_difference(
            |x| {
                let t = Tensor::new(input.shape(), x.to_vec()).unwrap();
                let o = pool2d(&t, 2, mode).unwrap().output;
                o.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
            },
            input.data(),
            1e-6,
        );
        worst = worst.max(compare("pool", g.data(), &fd, 1e-6, 1e-9)?);
    }
    Ok(worst)
}

/// Two fully connected spiking layers, `n_in → hidden → 10`.
pub fn two_layer(neuron: NeuronKind, coding: Coding, n_in: usize, hidden: usize, horizon: usize, seed: u64) -> Network {
    let (param, lambda, scale) = match neuron {
        NeuronKind::Stochastic => (1.3, 0.7, 1.5),
        _ => (0.8, 0.9, 1.0),
    };
    let layer = |i, o| LayerSpec {
        kind: LayerKind::Linear {
            in_features: i,
            out_features: o,
        },
        neuron,
        param,
        lambda,
    };
    let spec = NetworkSpec {
        input_shape: vec![n_in],
        layers: vec![layer(n_in, hidden), layer(hidden, 10)],
        coding,
        horizon,
    };
    let mut rng = RngStream::new(seed, 77);
    let w1 = rng.gaussian(&[n_in, hidden], 0.3, scale).unwrap();
    let w2 = rng.gaussian(&[hidden, 10], 0.1, scale).unwrap();
    Network::from_parts(spec, vec![Some(w1), Some(w2)]).unwrap()
}

/// Scalar-loop BPTT of a two-layer network: forward with hard spikes (or
/// fixed-noise samples), backward with the arctan surrogate (or the
/// straight-through estimator), reset detached. Returns `(loss, dW1, dW2)`.
pub fn scalar_oracle(net: &Network, x: &[f64], target: usize, stream: &RngStream) -> (f64, Vec<f64>, Vec<f64>) {
    let spec = &net.spec;
    let (l1, l2) = (&spec.layers[0], &spec.layers[1]);
    let (n_in, hid, out, horizon) = (x.len(), l1.out_len(), 10, spec.horizon);
    let (w1, w2) = (net.weight(0).data(), net.weight(1).data());
    let stochastic = l1.neuron == NeuronKind::Stochastic;
    let mut u1 = stream.child(0);
    let mut u2 = stream.child(1);

    let d1: Vec<f64> = (0..hid)
        .map(|j| (0..n_in).map(|i| x[i] * w1[i * hid + j]).sum())
        .collect();
    let (mut v1, mut v2) = (vec![0.0; hid], vec![0.0; out]);
    let (mut o1_prev, mut o2_prev) = (vec![0.0; hid], vec![0.0; out]);
    let mut rec_v1 = vec![vec![0.0; hid]; horizon];
    let mut rec_v2 = vec![vec![0.0; out]; horizon];
    let mut rec_o1 = vec![vec![0.0; hid]; horizon];
    let mut rec_o2 = vec![vec![0.0; out]; horizon];
    for t in 0..horizon {
        for j in 0..hid {
            v1[j] = if stochastic {
                (l1.lambda * v1[j] + d1[j]) / l1.param
            } else {
                l1.lambda * v1[j] + d1[j] - o1_prev[j] * l1.param
            };
            let fire = if stochastic {
                u1.next_f64() < sigmoid(v1[j])
            } else {
                v1[j] >= l1.param
            };
            rec_o1[t][j] = if fire { 1.0 } else { 0.0 };
        }
        for k in 0..out {
            let d2: f64 = (0..hid).map(|j| rec_o1[t][j] * w2[j * out + k]).sum();
            v2[k] = if stochastic {
                (l2.lambda * v2[k] + d2) / l2.param
            } else {
                l2.lambda * v2[k] + d2 - o2_prev[k] * l2.param
            };
            let fire = if stochastic {
                u2.next_f64() < sigmoid(v2[k])
            } else {
                v2[k] >= l2.param
            };
            rec_o2[t][k] = if fire { 1.0 } else { 0.0 };
        }
        rec_v1[t].clone_from(&v1);
        rec_v2[t].clone_from(&v2);
        o1_prev.clone_from(&rec_o1[t]);
        o2_prev.clone_from(&rec_o2[t]);
    }

    // loss and dL/d(output) per step
    let (loss, g_out) = if stochastic {
        let probs: Vec<f64> = rec_v2.iter().flatten().map(|&v| sigmoid(v)).collect();
        let lv = ml_loss(
            &ProbTable::new(Tensor::new(&[horizon, out], probs).unwrap()).unwrap(),
            target,
        )
        .unwrap();
        (lv.value, lv.grads.into_data())
    } else {
        let counts: Vec<f64> = (0..out).map(|k| (0..horizon).map(|t| rec_o2[t][k]).sum()).collect();
        let m = counts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = counts.iter().map(|c| (c - m).exp()).sum();
        let soft: Vec<f64> = counts.iter().map(|c| (c - m).exp() / z).collect();
        let loss = -(soft[target].ln());
        let g: Vec<f64> = (0..horizon)
            .flat_map(|_| (0..out).map(|k| soft[k] - if k == target { 1.0 } else { 0.0 }))
            .collect();
        (loss, g)
    };

    let local = |layer: &LayerSpec, v: f64| {
        if stochastic {
            let p = sigmoid(v);
            p * (1.0 - p)
        } else {
            arctan_surrogate(v - layer.param, 2.0)
        }
    };
    let carry_factor = |layer: &LayerSpec| {
        if stochastic {
            layer.lambda / layer.param
        } else {
            layer.lambda
        }
    };
    let drive_factor = |layer: &LayerSpec| if stochastic { 1.0 / layer.param } else { 1.0 };

    let mut dw1 = vec![0.0; n_in * hid];
    let mut dw2 = vec![0.0; hid * out];
    let mut gv2_next = vec![0.0; out];
    let mut gv1_next = vec![0.0; hid];
    let mut gd1_total = vec![0.0; hid];
    for t in (0..horizon).rev() {
        let mut gd2 = vec![0.0; out];
        for k in 0..out {
            let gv = g_out[t * out + k] * local(l2, rec_v2[t][k]) + carry_factor(l2) * gv2_next[k];
            gv2_next[k] = gv;
            gd2[k] = gv * drive_factor(l2);
        }
        for j in 0..hid {
            for k in 0..out {
                dw2[j * out + k] += rec_o1[t][j] * gd2[k];
            }
        }
        for j in 0..hid {
            let g_o1: f64 = (0..out).map(|k| w2[j * out + k] * gd2[k]).sum();
            let gv = g_o1 * local(l1, rec_v1[t][j]) + carry_factor(l1) * gv1_next[j];
            gv1_next[j] = gv;
            gd1_total[j] += gv * drive_factor(l1);
        }
    }
    for i in 0..n_in {
        for j in 0..hid {
            dw1[i * hid + j] = x[i] * gd1_total[j];
        }
    }
    (loss, dw1, dw2)
}

fn library_gradients(
    net: &Network,
    x: &[f64],
    target: usize,
    stream: &RngStream,
    kind: LossKind,
) -> (f64, Vec<f64>, Vec<f64>) {
    let tape = forward(net, x, 1, std::slice::from_ref(stream)).unwrap();
    let (loss, og) = output_loss(&tape, &[target], kind, 1.0).unwrap();
    let g = backward(net, &tape, &og, SurrogateConfig::default()).unwrap();
    let mut layers = g.layers.into_iter().flatten();
    (
        loss,
        layers.next().unwrap().into_data(),
        layers.next().unwrap().into_data(),
    )
}

/// Library BPTT against the scalar oracle on deterministic (rate loss) and
/// stochastic (likelihood loss) two-layer networks with fixed noise, plus
/// finite differences on the stochastic output weights.
pub fn check_end_to_end_gradients() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    let mut rng = RngStream::new(31, 5);
    for seed in 0..4u64 {
        let x: Vec<f64> = (0..6).map(|_| rng.next_f64()).collect();
        let target = (seed as usize * 3) % 10;
        let stream = RngStream::new(seed, 99);

        let det = two_layer(NeuronKind::Deterministic, Coding::Rate, 6, 8, 5, seed);
        let (lo, o1, o2) = scalar_oracle(&det, &x, target, &stream);
        let (ll, g1, g2) = library_gradients(&det, &x, target, &stream, LossKind::RateCe);
        if !close(lo, ll, 1e-12, 1e-12) {
            return Err(format!("deterministic loss {ll} vs oracle {lo}"));
        }
        worst = worst.max(compare("det dW1", &g1, &o1, 1e-5, 1e-10)?);
        worst = worst.max(compare("det dW2", &g2, &o2, 1e-5, 1e-10)?);

        let sto = two_layer(NeuronKind::Stochastic, Coding::FirstToSpike, 6, 8, 4, seed);
        let (lo, o1, o2) = scalar_oracle(&sto, &x, target, &stream);
        let (ll, g1, g2) = library_gradients(&sto, &x, target, &stream, LossKind::MaxLikelihood);
        if !close(lo, ll, 1e-9, 1e-12) {
            return Err(format!("stochastic loss {ll} vs oracle {lo}"));
        }
        worst = worst.max(compare("stoch dW1", &g1, &o1, 1e-5, 1e-10)?);
        worst = worst.max(compare("stoch dW2", &g2, &o2, 1e-5, 1e-10)?);

        // hidden spikes are fixed by the noise, so the loss is smooth in W2
        let fd = central_difference(
            |w| {
                let mut n = sto.clone();
                n.weights[1] = Some(Tensor::new(&[8, 10], w.to_vec()).unwrap());
                library_gradients(&n, &x, target, &stream, LossKind::MaxLikelihood).0
            },
            sto.weight(1).data(),
            1e-6,
        );
        worst = worst.max(compare("stoch dW2 vs FD", &g2, &fd, 1e-5, 1e-9)?);
    }
    Ok(worst)
}

pub fn check_gradients() -> Check {
    let ml = check_ml_loss_gradient()?;
    let surr = check_surrogate_gradient()?;
    let conv = check_conv_pool_gradients()?;
    let e2e = check_end_to_end_gradients()?;
    Ok(format!(
        "max rel error: ml_loss {ml:.1e}, surrogate {surr:.1e}, conv/pool {conv:.1e}, 2-layer {e2e:.1e}"
    ))
}

// ---------------------------------------------------------------- criterion 10

pub const DE_SPHERE_SEEDS: u64 = 20;

pub struct DeSphereStats {
    pub converged: Vec<u64>,
    pub stalled: Vec<(u64, Vec<f64>)>,
    pub non_monotone: Vec<u64>,
    pub slowest: usize,
}

/// Runs the sphere objective Σ(x − 1)² on `[0, 2]²` with 8 members for 50
/// generations under each seed.
pub fn de_sphere_stats() -> DeSphereStats {
    let mut stats = DeSphereStats {
        converged: vec![],
        stalled: vec![],
        non_monotone: vec![],
        slowest: 0,
    };
    for seed in 0..DE_SPHERE_SEEDS {
        let mut config = DeConfig::with_bounds(vec![(0.0, 2.0); 2]);
        config.pop_size = 8;
        config.max_generations = 50;
        config.seed = seed;
        let r = de_optimize(&config, |x| Ok(x.iter().map(|v| (v - 1.0).powi(2)).sum())).unwrap();
        if r.history.windows(2).any(|w| w[1].best_objective > w[0].best_objective) {
            stats.non_monotone.push(seed);
        }
        match r
            .history
            .iter()
            .position(|h| h.best_vector.iter().all(|v| (v - 1.0).abs() <= 1e-2))
        {
            Some(g) => {
                stats.converged.push(seed);
                stats.slowest = stats.slowest.max(g);
            }
            None => stats.stalled.push((seed, r.best_vector)),
        }
    }
    stats
}

pub fn check_de_sphere() -> Check {
    let s = de_sphere_stats();
    let summary = format!(
        "{}/{DE_SPHERE_SEEDS} seeds within 1e-2 of (1, 1) (slowest by generation {}), {} non-monotone runs",
        s.converged.len(),
        s.slowest,
        s.non_monotone.len()
    );
    if s.stalled.is_empty() && s.non_monotone.is_empty() {
        Ok(summary)
    } else {
        let stalled: Vec<String> = s
            .stalled
            .iter()
            .map(|(seed, x)| format!("seed {seed} at {x:.4?}"))
            .collect();
        Err(format!("{summary}; stalled: {}", stalled.join(", ")))
    }
}

// ---------------------------------------------------------------- MNIST

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .ancestors()
        .nth(2)
        .unwrap()
        .to_path_buf()
}

/// MNIST directory from `SPIKEFIRST_DATA`, else `<workspace>/data/mnist`.
pub fn mnist_root() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("SPIKEFIRST_DATA").map(PathBuf::from),
        Some(workspace_root().join("data/mnist")),
    ];
    candidates
        .into_iter()
        .flatten()
        .find(|p| p.join("train-images-idx3-ubyte").is_file())
}

pub fn load_mnist_splits() -> Option<(Dataset, Dataset)> {
    let root = mnist_root()?;
    Some((
        load_mnist(&root, Split::Train).ok()?,
        load_mnist(&root, Split::Test).ok()?,
    ))
}

/// Trained checkpoints live under `target/acceptance-cache/<name>-<hash>`.
pub fn cache_dir(config: &TrainConfig, name: &str) -> PathBuf {
    let base = std::env::var_os("SPIKEFIRST_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("target/acceptance-cache"));
    base.join(format!("{name}-{}", config.hash()))
}

/// Trains `config` to completion, resuming from the cache when possible.
pub fn cached_training(
    config: &TrainConfig,
    name: &str,
    train: &Dataset,
    test: &Dataset,
) -> spikefirst::Result<Checkpoint> {
    let dir = cache_dir(config, name);
    let start = match load_checkpoint(&dir.join("last.ckpt")) {
        Ok(c) if c.config == *config => c,
        _ => Checkpoint::fresh(config)?,
    };
    if start.epoch >= config.epochs {
        return Ok(start);
    }
    eprintln!(
        "training {name} ({} of {} epochs cached) in {}",
        start.epoch,
        config.epochs,
        dir.display()
    );
    let options = TrainOptions {
        workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        out_dir: Some(dir),
        stop_after: None,
    };
    Ok(train_from(start, train, test, &options)?.last)
}
