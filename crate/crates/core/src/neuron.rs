//! Leaky integrate-and-fire dynamics.
//!
//! The deterministic neuron integrates `V^t = λV^{t-1} + I^t − [V^{t-1} ≥ V_th]·V_th`
//! and emits `[V^t ≥ V_th]`. Its reset is soft (the threshold is subtracted, the
//! residual carries over) and lags one step behind the crossing.
//!
//! The stochastic neuron scales `V^t = (λV^{t-1} + I^t)/k`, fires with
//! probability `sigmoid(V^t)` and has no reset term.

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetLifParams {
    pub v_th: f64,
    pub lambda: f64,
}

impl DetLifParams {
    pub fn new(v_th: f64, lambda: f64) -> Result<Self> {
        if !(v_th > 0.0) || !v_th.is_finite() {
            return Err(Error::Parameter(format!("threshold must be > 0, got {v_th}")));
        }
        check_lambda(lambda)?;
        Ok(Self { v_th, lambda })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StochLifParams {
    pub k: f64,
    pub lambda: f64,
}

impl StochLifParams {
    pub fn new(k: f64, lambda: f64) -> Result<Self> {
        if !(k > 0.0) || !k.is_finite() {
            return Err(Error::Parameter(format!("scale k must be > 0, got {k}")));
        }
        check_lambda(lambda)?;
        Ok(Self { k, lambda })
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("leak must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub v: Tensor,
    pub fired_prev: Tensor,
}

impl LayerState {
    /// Resting state: zero potential, no previous spike.
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            v: Tensor::zeros(shape),
            fired_prev: Tensor::zeros(shape),
        }
    }
}

/// Binary spikes of one layer, `[T × neurons]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeRecord {
    pub spikes: Tensor,
}

impl SpikeRecord {
    pub fn new(spikes: Tensor) -> Result<Self> {
        if spikes.rank() != 2 {
            return Err(Error::Dimension(format!(
                "spike record must be [T x neurons], got {:?}",
                spikes.shape()
            )));
        }
        if spikes.data().iter().any(|&s| s != 0.0 && s != 1.0) {
            return Err(Error::Argument("spike record entries must be 0 or 1".into()));
        }
        Ok(Self { spikes })
    }

    pub fn horizon(&self) -> usize {
        self.spikes.shape()[0]
    }

    pub fn neurons(&self) -> usize {
        self.spikes.shape()[1]
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// In-place deterministic update; `fired` holds the previous spikes on entry
/// and the new ones on exit.
pub(crate) fn det_lif_update(v: &mut [f64], fired: &mut [f64], drive: &[f64], p: DetLifParams) {
    for ((vi, fi), &d) in v.iter_mut().zip(fired.iter_mut()).zip(drive) {
        let next = p.lambda * *vi + d - *fi * p.v_th;
        *vi = next;
        *fi = if next >= p.v_th { 1.0 } else { 0.0 };
    }
}

/// In-place stochastic update. `uniforms` supplies one draw per neuron.
pub(crate) fn stoch_lif_update(
    v: &mut [f64],
    drive: &[f64],
    p: StochLifParams,
    uniforms: &[f64],
    spikes: &mut [f64],
    probs: &mut [f64],
) {
    for i in 0..v.len() {
        let next = (p.lambda * v[i] + drive[i]) / p.k;
        v[i] = next;
        let pr = sigmoid(next);
        probs[i] = pr;
        spikes[i] = if uniforms[i] < pr { 1.0 } else { 0.0 };
    }
}

pub fn det_lif_step(state: &LayerState, params: &DetLifParams, drive: &Tensor) -> Result<(LayerState, Tensor)> {
    state.v.check_same_shape(drive)?;
    state.v.check_same_shape(&state.fired_prev)?;
    let mut next = state.clone();
    det_lif_update(next.v.data_mut(), next.fired_prev.data_mut(), drive.data(), *params);
    let spikes = next.fired_prev.clone();
    Ok((next, spikes))
}

/// Returns `(new_state, spikes, probs)`; draws one uniform per neuron from `stream`.
pub fn stoch_lif_step(
    state: &LayerState,
    params: &StochLifParams,
    drive: &Tensor,
    stream: &mut RngStream,
) -> Result<(LayerState, Tensor, Tensor)> {
    let params = StochLifParams::new(params.k, params.lambda)?;
    state.v.check_same_shape(drive)?;
    let shape = drive.shape();
    let uniforms = stream.uniform(shape);
    let mut v = state.v.clone();
    let mut spikes = Tensor::zeros(shape);
    let mut probs = Tensor::zeros(shape);
    stoch_lif_update(
        v.data_mut(),
        drive.data(),
        params,
        uniforms.data(),
        spikes.data_mut(),
        probs.data_mut(),
    );
    let next = LayerState {
        v,
        fired_prev: spikes.clone(),
    };
    Ok((next, spikes, probs))
}

/// 1-indexed first spike time per neuron; silent neurons get `T + 1`.
pub fn first_spike_times(record: &SpikeRecord) -> Tensor {
    let (t_max, n) = (record.horizon(), record.neurons());
    let mut times = vec![(t_max + 1) as f64; n];
    for (i, slot) in times.iter_mut().enumerate() {
        if let Some(t) = (0..t_max).find(|&t| record.spikes.data()[t * n + i] == 1.0) {
            *slot = (t + 1) as f64;
        }
    }
    Tensor::from_parts(vec![n], times)
}
