//! Output coding schemes and their losses.
//!
//! * First-to-spike, deterministic: softmax over negated first-spike times,
//!   trained with the negative log-likelihood of the target class.
//! * First-to-spike, stochastic: probability that the correct neuron is the
//!   first to fire, summed over the horizon, trained with its negative log.
//! * Rate: softmax cross-entropy over spike counts accumulated across `T`.

use crate::error::{Error, Result};
use crate::neuron::sigmoid;
use crate::tensor::Tensor;

/// Clamp applied to firing probabilities before products and logs.
pub const PROB_EPS: f64 = 1e-7;

/// Per-timestep firing probabilities of the output layer, `[T × n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbTable {
    p: Tensor,
}

impl ProbTable {
    pub fn new(p: Tensor) -> Result<Self> {
        if p.rank() != 2 || p.shape()[0] == 0 || p.shape()[1] == 0 {
            return Err(Error::Dimension(format!(
                "probability table must be a non-empty [T x n], got {:?}",
                p.shape()
            )));
        }
        if let Some(bad) = p.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("probability {bad} outside [0, 1]")));
        }
        Ok(Self { p })
    }

    pub fn horizon(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.p.shape()[1]
    }

    /// Probability at 1-indexed step `t` for neuron `i`.
    pub fn at(&self, t: usize, i: usize) -> f64 {
        self.p.data()[(t - 1) * self.classes() + i]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Gradient of `value` with respect to the loss input, same shape as it.
    pub grads: Tensor,
}

fn check_target(target: usize, n: usize) -> Result<()> {
    if target >= n {
        return Err(Error::Index(format!("target class {target} with {n} outputs")));
    }
    Ok(())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `−log softmax(logits)[target]` via log-sum-exp, plus `softmax − onehot`.
fn softmax_ce(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    (lse - logits[target], grad)
}

/// `p_i = exp(−t_i) / Σ_k exp(−t_k)`, max-shifted.
pub fn fts_softmax(first_times: &Tensor) -> Tensor {
    let neg: Vec<f64> = first_times.data().iter().map(|t| -t).collect();
    Tensor::from_parts(first_times.shape().to_vec(), softmax(&neg))
}

/// Negative log-likelihood of the target under [`fts_softmax`]; gradients are
/// with respect to the first-spike times.
pub fn fts_ce_loss(first_times: &Tensor, target: usize) -> Result<LossValue> {
    check_target(target, first_times.len())?;
    let neg: Vec<f64> = first_times.data().iter().map(|t| -t).collect();
    let (value, g_logits) = softmax_ce(&neg, target);
    // logits are −t, so dL/dt = −dL/dlogit.
    let grads = g_logits.into_iter().map(|g| -g).collect();
    Ok(LossValue {
        value,
        grads: Tensor::from_parts(first_times.shape().to_vec(), grads),
    })
}

/// Probability that `correct` fires first, exactly at 1-indexed step `t`, with
/// no wrong neuron firing at or before `t`. Unclamped.
pub fn first_spike_event_prob(probs: &ProbTable, correct: usize, t: usize) -> Result<f64> {
    check_target(correct, probs.classes())?;
    if t == 0 || t > probs.horizon() {
        return Err(Error::Index(format!("timestep {t} outside 1..={}", probs.horizon())));
    }
    let mut value = probs.at(t, correct);
    for i in (0..probs.classes()).filter(|&i| i != correct) {
        for tp in 1..=t {
            value *= 1.0 - probs.at(tp, i);
        }
    }
    for tp in 1..t {
        value *= 1.0 - probs.at(tp, correct);
    }
    Ok(value)
}

/// `−log Σ_t P_t` on clamped probabilities, with the exact gradient with
/// respect to every raw table entry.
pub fn ml_loss(probs: &ProbTable, correct: usize) -> Result<LossValue> {
    let (t_max, n) = (probs.horizon(), probs.classes());
    check_target(correct, n)?;
    let raw = probs.tensor().data();
    let q: Vec<f64> = raw.iter().map(|p| p.clamp(PROB_EPS, 1.0 - PROB_EPS)).collect();

    // a[t]: everything in P_t except the correct neuron's own firing factor.
    let mut a = vec![0.0; t_max];
    let mut big_p = vec![0.0; t_max];
    let mut survive = 1.0;
    for t in 0..t_max {
        let row = &q[t * n..(t + 1) * n];
        let wrong_silent: f64 = (0..n).filter(|&i| i != correct).map(|i| 1.0 - row[i]).product();
        a[t] = survive * wrong_silent;
        big_p[t] = row[correct] * a[t];
        survive = a[t] * (1.0 - row[correct]);
    }
    let total: f64 = big_p.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numerical(format!(
            "first-spike likelihood {total} is not positive even after clamping"
        )));
    }
    // suffix[t] = Σ_{t' ≥ t} P_t'
    let mut suffix = vec![0.0; t_max + 1];
    for t in (0..t_max).rev() {
        suffix[t] = suffix[t + 1] + big_p[t];
    }
    let mut grads = vec![0.0; t_max * n];
    for t in 0..t_max {
        for i in 0..n {
            let idx = t * n + i;
            if raw[idx] < PROB_EPS || raw[idx] > 1.0 - PROB_EPS {
                continue;
            }
            let ds = if i == correct {
                a[t] - suffix[t + 1] / (1.0 - q[idx])
            } else {
                -suffix[t] / (1.0 - q[idx])
            };
            grads[idx] = -ds / total;
        }
    }
    Ok(LossValue {
        value: -total.ln(),
        grads: Tensor::from_parts(vec![t_max, n], grads),
    })
}

/// `ln σ(x)`, stable for large `|x|`.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// [`ml_loss`] taken on the log-odds `V` (`p = σ(V)`), `[T × n]`, with the
/// gradient with respect to `V`. No clamping is needed: the likelihood is
/// summed in log space and every gradient term is a ratio in `[0, 1]`, so
/// saturated neurons keep a usable gradient.
pub fn ml_loss_logits(logits: &Tensor, correct: usize) -> Result<LossValue> {
    let (t_max, n) = logits.dims2()?;
    check_target(correct, n)?;
    if let Some(bad) = logits.data().iter().find(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("logit {bad}")));
    }
    let v = logits.data();
    // ln P_t and ln a_t, where a_t is P_t without the correct neuron's own factor.
    let mut log_p = vec![0.0; t_max];
    let mut log_survive = 0.0;
    for t in 0..t_max {
        let row = &v[t * n..(t + 1) * n];
        let log_wrong_silent: f64 = (0..n).filter(|&i| i != correct).map(|i| log_sigmoid(-row[i])).sum();
        let log_a = log_survive + log_wrong_silent;
        log_p[t] = log_sigmoid(row[correct]) + log_a;
        log_survive = log_a + log_sigmoid(-row[correct]);
    }
    let peak = log_p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(Error::Numerical("first-spike likelihood underflowed".into()));
    }
    let log_total = peak + log_p.iter().map(|l| (l - peak).exp()).sum::<f64>().ln();
    // share[t] = P_t / Σ P, suffix[t] = Σ_{t' ≥ t} share[t']
    let share: Vec<f64> = log_p.iter().map(|l| (l - log_total).exp()).collect();
    let mut suffix = vec![0.0; t_max + 1];
    for t in (0..t_max).rev() {
        suffix[t] = suffix[t + 1] + share[t];
    }
    let mut grads = vec![0.0; t_max * n];
    for t in 0..t_max {
        for i in 0..n {
            let p = sigmoid(v[t * n + i]);
            let ds = if i == correct {
                (1.0 - p) * share[t] - p * suffix[t + 1]
            } else {
                -p * suffix[t]
            };
            grads[t * n + i] = -ds;
        }
    }
    Ok(LossValue {
        value: -log_total,
        grads: Tensor::from_parts(vec![t_max, n], grads),
    })
}

/// Per-neuron spike counts over the horizon of a `[T × n]` record.
pub fn accumulate(record: &Tensor) -> Result<Tensor> {
    let (t_max, n) = record.dims2()?;
    let mut acc = vec![0.0; n];
    for t in 0..t_max {
        for (a, &s) in acc.iter_mut().zip(&record.data()[t * n..(t + 1) * n]) {
            *a += s;
        }
    }
    Ok(Tensor::from_parts(vec![n], acc))
}

/// Softmax cross-entropy on accumulated outputs; gradients are with respect
/// to the accumulation.
pub fn rate_ce_loss(accumulated: &Tensor, target: usize) -> Result<LossValue> {
    check_target(target, accumulated.len())?;
    let (value, grads) = softmax_ce(accumulated.data(), target);
    Ok(LossValue {
        value,
        grads: Tensor::from_parts(accumulated.shape().to_vec(), grads),
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Decision at a timestep under first-to-spike coding: among neurons that
/// fired, the one with the largest tiebreak value (membrane potential or
/// firing probability), then the lowest index. `None` if nobody fired.
pub fn first_to_spike_winner(spikes: &[f64], tiebreak: &[f64]) -> Option<usize> {
    let mut winner: Option<usize> = None;
    for (i, &s) in spikes.iter().enumerate() {
        if s != 1.0 {
            continue;
        }
        match winner {
            Some(w) if tiebreak[i] <= tiebreak[w] => {}
            _ => winner = Some(i),
        }
    }
    winner
}
