//! Declarative architectures and their parameters.
//!
//! A [`NetworkSpec`] is an ordered list of layers (linear, conv, pool) with
//! the neuron model attached to each weighted layer. It serializes to a flat
//! `key = value` block that is embedded verbatim in checkpoints.

use std::fmt;
use std::str::FromStr;

mod forward;

pub use forward::{forward, Activation, Simulator, StepOutput};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, PoolMode, RngStream, Tensor};

pub const NUM_CLASSES: usize = 10;
pub const MLP_HIDDEN: usize = 800;
pub const LEAK_DETERMINISTIC: f64 = 0.9;
pub const LEAK_STOCHASTIC: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    Mlp2,
    Lenet5,
    Vgg15,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Deterministic neurons, first-to-spike output.
    DetFirst,
    /// Stochastic neurons, first-to-spike output.
    StochFirst,
    /// Deterministic neurons, rate-coded output.
    DetRate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Coding {
    FirstToSpike,
    Rate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NeuronKind {
    Deterministic,
    Stochastic,
    None,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::Argument(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"), other
                    ))),
                }
            }
        }
    };
}

text_enum!(Arch { Mlp2 => "mlp2", Lenet5 => "lenet5", Vgg15 => "vgg15" });
text_enum!(ModelKind { DetFirst => "d-f-bptt", StochFirst => "s-f-bptt", DetRate => "d-r-bptt" });
text_enum!(Coding { FirstToSpike => "first-to-spike", Rate => "rate" });
text_enum!(NeuronKind { Deterministic => "deterministic-lif", Stochastic => "stochastic-lif", None => "none" });
text_enum!(PoolMode { Average => "average", Max => "max" });

impl ModelKind {
    pub fn neuron(self) -> NeuronKind {
        match self {
            ModelKind::StochFirst => NeuronKind::Stochastic,
            ModelKind::DetFirst | ModelKind::DetRate => NeuronKind::Deterministic,
        }
    }

    pub fn coding(self) -> Coding {
        match self {
            ModelKind::DetRate => Coding::Rate,
            ModelKind::DetFirst | ModelKind::StochFirst => Coding::FirstToSpike,
        }
    }

    pub fn default_leak(self) -> f64 {
        match self.neuron() {
            NeuronKind::Stochastic => LEAK_STOCHASTIC,
            _ => LEAK_DETERMINISTIC,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerKind {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv {
        c_in: usize,
        in_h: usize,
        in_w: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Pool {
        channels: usize,
        in_h: usize,
        in_w: usize,
        window: usize,
        mode: PoolMode,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub neuron: NeuronKind,
    /// Threshold `V_th` for deterministic neurons, scale `k` for stochastic ones.
    pub param: f64,
    pub lambda: f64,
}

impl LayerSpec {
    pub fn in_len(&self) -> usize {
        match self.kind {
            LayerKind::Linear { in_features, .. } => in_features,
            LayerKind::Conv { c_in, in_h, in_w, .. } => c_in * in_h * in_w,
            LayerKind::Pool {
                channels, in_h, in_w, ..
            } => channels * in_h * in_w,
        }
    }

    pub fn out_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Linear { out_features, .. } => vec![out_features],
            LayerKind::Conv { .. } => {
                let g = self.conv_geom().expect("validated conv geometry");
                vec![g.c_out, g.oh, g.ow]
            }
            LayerKind::Pool {
                channels,
                in_h,
                in_w,
                window,
                ..
            } => {
                vec![channels, in_h / window, in_w / window]
            }
        }
    }

    pub fn out_len(&self) -> usize {
        self.out_shape().iter().product()
    }

    pub fn conv_geom(&self) -> Option<ConvGeom> {
        match self.kind {
            LayerKind::Conv {
                c_in,
                in_h,
                in_w,
                c_out,
                kernel,
                stride,
                pad,
            } => ConvGeom::new(c_in, in_h, in_w, c_out, kernel, kernel, stride, pad).ok(),
            _ => None,
        }
    }

    pub fn is_weighted(&self) -> bool {
        !matches!(self.kind, LayerKind::Pool { .. })
    }

    pub fn is_spiking(&self) -> bool {
        self.neuron != NeuronKind::None
    }

    /// Weight tensor shape. Linear weights are stored `[in × out]`.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Linear {
                in_features,
                out_features,
            } => Some(vec![in_features, out_features]),
            LayerKind::Conv {
                c_in, c_out, kernel, ..
            } => Some(vec![c_out, c_in, kernel, kernel]),
            LayerKind::Pool { .. } => None,
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Linear { in_features, .. } => in_features,
            LayerKind::Conv { c_in, kernel, .. } => c_in * kernel * kernel,
            LayerKind::Pool { .. } => 0,
        }
    }

    fn shape_label(&self) -> String {
        match self.kind {
            LayerKind::Linear {
                in_features,
                out_features,
            } => format!("linear {in_features}->{out_features}"),
            LayerKind::Conv {
                c_in,
                c_out,
                kernel,
                stride,
                pad,
                ..
            } => {
                format!("conv {c_in}->{c_out} {kernel}x{kernel} s{stride} p{pad}")
            }
            LayerKind::Pool { window, mode, .. } => format!("{mode}-pool {window}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub coding: Coding,
    pub horizon: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub hidden: Option<usize>,
    /// Per weighted layer `V_th` or `k`, in layer order.
    pub layer_params: Option<Vec<f64>>,
    pub lambda: Option<f64>,
    pub horizon: Option<usize>,
}

/// Default simulation horizon per architecture and model kind.
pub fn default_horizon(arch: Arch, kind: ModelKind) -> usize {
    match (kind.coding(), arch) {
        (Coding::FirstToSpike, _) => 20,
        (Coding::Rate, Arch::Mlp2) => 15,
        (Coding::Rate, Arch::Lenet5) => 35,
        (Coding::Rate, Arch::Vgg15) => 100,
    }
}

pub fn build(arch: Arch, kind: ModelKind, overrides: &Overrides) -> Result<NetworkSpec> {
    let neuron = kind.neuron();
    let lambda = overrides.lambda.unwrap_or_else(|| kind.default_leak());
    let spiking = |k: LayerKind| LayerSpec {
        kind: k,
        neuron,
        param: 1.0,
        lambda,
    };
    let pool = |channels, side, mode| LayerSpec {
        kind: LayerKind::Pool {
            channels,
            in_h: side,
            in_w: side,
            window: 2,
            mode,
        },
        neuron: NeuronKind::None,
        param: 0.0,
        lambda: 0.0,
    };
    let conv = |c_in, side, c_out, kernel, pad| {
        spiking(LayerKind::Conv {
            c_in,
            in_h: side,
            in_w: side,
            c_out,
            kernel,
            stride: 1,
            pad,
        })
    };
    let linear = |i, o| {
        spiking(LayerKind::Linear {
            in_features: i,
            out_features: o,
        })
    };

    let (input_shape, layers) = match arch {
        Arch::Mlp2 => {
            let h = overrides.hidden.unwrap_or(MLP_HIDDEN);
            (vec![1, 28, 28], vec![linear(784, h), linear(h, NUM_CLASSES)])
        }
        Arch::Lenet5 => (
            vec![1, 28, 28],
            vec![
                conv(1, 28, 6, 5, 2),
                pool(6, 28, PoolMode::Average),
                conv(6, 14, 16, 5, 0),
                pool(16, 10, PoolMode::Average),
                linear(400, 120),
                linear(120, 84),
                linear(84, NUM_CLASSES),
            ],
        ),
        Arch::Vgg15 => {
            let plan: [&[usize]; 5] = [
                &[64, 64],
                &[128, 128],
                &[256, 256, 256],
                &[512, 512, 512],
                &[512, 512, 512],
            ];
            let mut layers = Vec::new();
            let (mut c, mut side) = (3, 32);
            for block in plan {
                for &width in block {
                    layers.push(conv(c, side, width, 3, 1));
                    c = width;
                }
                layers.push(pool(c, side, PoolMode::Max));
                side /= 2;
            }
            layers.push(linear(512, 512));
            layers.push(linear(512, NUM_CLASSES));
            (vec![3, 32, 32], layers)
        }
    };

    let mut spec = NetworkSpec {
        input_shape,
        layers,
        coding: kind.coding(),
        horizon: overrides.horizon.unwrap_or_else(|| default_horizon(arch, kind)),
    };
    if let Some(params) = &overrides.layer_params {
        spec.set_layer_params(params)?;
    }
    spec.validate()?;
    Ok(spec)
}

impl NetworkSpec {
    pub fn weighted_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.is_weighted())
    }

    pub fn spiking_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.is_spiking())
    }

    pub fn output_layer(&self) -> &LayerSpec {
        self.layers.last().expect("validated spec has layers")
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layer_params(&self) -> Vec<f64> {
        self.spiking_layers().map(|(_, l)| l.param).collect()
    }

    /// Replaces `V_th` / `k` of every spiking layer, in order.
    pub fn set_layer_params(&mut self, params: &[f64]) -> Result<()> {
        let slots: Vec<usize> = self.spiking_layers().map(|(i, _)| i).collect();
        if params.len() != slots.len() {
            return Err(Error::Argument(format!(
                "{} layer parameters given for {} spiking layers",
                params.len(),
                slots.len()
            )));
        }
        for (&i, &p) in slots.iter().zip(params) {
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::Parameter(format!("layer {i} parameter must be > 0, got {p}")));
            }
            self.layers[i].param = p;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Argument("network has no layers".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Argument("horizon must be >= 1".into()));
        }
        let mut width = self.input_len();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_len() != width {
                return Err(Error::Dimension(format!(
                    "layer {i} expects {} inputs, previous layer provides {width}",
                    layer.in_len()
                )));
            }
            match layer.kind {
                LayerKind::Pool {
                    channels,
                    in_h,
                    in_w,
                    window,
                    ..
                } => {
                    if layer.neuron != NeuronKind::None {
                        return Err(Error::Argument(format!("pool layer {i} cannot carry a neuron")));
                    }
                    crate::tensor::pool2d(&Tensor::zeros(&[channels, in_h, in_w]), window, PoolMode::Average)
                        .map_err(|e| Error::Dimension(format!("layer {i}: {e}")))?;
                }
                LayerKind::Conv {
                    c_in,
                    in_h,
                    in_w,
                    c_out,
                    kernel,
                    stride,
                    pad,
                } => {
                    ConvGeom::new(c_in, in_h, in_w, c_out, kernel, kernel, stride, pad)
                        .map_err(|e| Error::Dimension(format!("layer {i}: {e}")))?;
                }
                LayerKind::Linear { .. } => {}
            }
            if layer.is_weighted() {
                if layer.neuron == NeuronKind::None {
                    return Err(Error::Argument(format!("weighted layer {i} needs a neuron model")));
                }
                if !(layer.param > 0.0) || !(0.0..=1.0).contains(&layer.lambda) {
                    return Err(Error::Parameter(format!(
                        "layer {i}: param {} / lambda {}",
                        layer.param, layer.lambda
                    )));
                }
            }
            width = layer.out_len();
        }
        if width != NUM_CLASSES || !self.output_layer().is_spiking() {
            return Err(Error::Dimension(format!(
                "output layer must be a spiking layer of {NUM_CLASSES} neurons, got width {width}"
            )));
        }
        Ok(())
    }

    /// One line per layer: index, operation, neuron, output shape.
    pub fn audit(&self) -> String {
        let mut out = format!(
            "input {:?}, coding {}, T = {}\n",
            self.input_shape, self.coding, self.horizon
        );
        for (i, l) in self.layers.iter().enumerate() {
            out += &format!(
                "  [{i}] {:<24} {:<18} out {:?}\n",
                l.shape_label(),
                l.neuron.to_string(),
                l.out_shape()
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let dims = |s: &[usize]| s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let mut out = String::new();
        out += &format!("coding = {}\n", self.coding);
        out += &format!("horizon = {}\n", self.horizon);
        out += &format!("input = {}\n", dims(&self.input_shape));
        out += &format!("layers = {}\n", self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let mut kv = |k: &str, v: String| out += &format!("layer.{i}.{k} = {v}\n");
            match l.kind {
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    kv("kind", "linear".into());
                    kv("in", in_features.to_string());
                    kv("out", out_features.to_string());
                }
                LayerKind::Conv {
                    c_in,
                    in_h,
                    in_w,
                    c_out,
                    kernel,
                    stride,
                    pad,
                } => {
                    kv("kind", "conv".into());
                    kv("input", dims(&[c_in, in_h, in_w]));
                    kv("out_channels", c_out.to_string());
                    kv("kernel", kernel.to_string());
                    kv("stride", stride.to_string());
                    kv("pad", pad.to_string());
                }
                LayerKind::Pool {
                    channels,
                    in_h,
                    in_w,
                    window,
                    mode,
                } => {
                    kv("kind", "pool".into());
                    kv("input", dims(&[channels, in_h, in_w]));
                    kv("window", window.to_string());
                    kv("mode", mode.to_string());
                }
            }
            kv("neuron", l.neuron.to_string());
            kv("param", format!("{:?}", l.param));
            kv("lambda", format!("{:?}", l.lambda));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let map = KvMap::parse(text)?;
        let n: usize = map.num("layers")?;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let key = |k: &str| format!("layer.{i}.{k}");
            let kind = match map.get(&key("kind"))? {
                "linear" => LayerKind::Linear {
                    in_features: map.num(&key("in"))?,
                    out_features: map.num(&key("out"))?,
                },
                "conv" => {
                    let [c_in, in_h, in_w] = map.dims3(&key("input"))?;
                    LayerKind::Conv {
                        c_in,
                        in_h,
                        in_w,
                        c_out: map.num(&key("out_channels"))?,
                        kernel: map.num(&key("kernel"))?,
                        stride: map.num(&key("stride"))?,
                        pad: map.num(&key("pad"))?,
                    }
                }
                "pool" => {
                    let [channels, in_h, in_w] = map.dims3(&key("input"))?;
                    LayerKind::Pool {
                        channels,
                        in_h,
                        in_w,
                        window: map.num(&key("window"))?,
                        mode: map.get(&key("mode"))?.parse()?,
                    }
                }
                other => return Err(Error::Config(format!("{}: unknown layer kind '{other}'", key("kind")))),
            };
            layers.push(LayerSpec {
                kind,
                neuron: map.get(&key("neuron"))?.parse()?,
                param: map.num(&key("param"))?,
                lambda: map.num(&key("lambda"))?,
            });
        }
        let spec = NetworkSpec {
            input_shape: map.dims("input")?,
            layers,
            coding: map.get("coding")?.parse()?,
            horizon: map.num("horizon")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Ordered `key = value` lines; `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    entries: Vec<(String, String)>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let k = k.trim().to_string();
            let v = v.trim().to_string();
            match entries.iter_mut().find(|(key, _)| *key == k) {
                Some(slot) => slot.1 = v,
                None => entries.push((k, v)),
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn try_get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.try_get(key)
            .ok_or_else(|| Error::Config(format!("missing key '{key}'")))
    }

    pub fn num<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{raw}'")))
    }

    pub fn dims(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)?
            .split('x')
            .map(|d| {
                d.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("key '{key}': bad dimension '{d}'")))
            })
            .collect()
    }

    fn dims3(&self, key: &str) -> Result<[usize; 3]> {
        let d = self.dims(key)?;
        d.as_slice()
            .try_into()
            .map_err(|_| Error::Config(format!("key '{key}' needs three dimensions")))
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// A spec together with one weight tensor per weighted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    /// Indexed by layer; `None` for pool layers.
    pub weights: Vec<Option<Tensor>>,
}

impl Network {
    /// Uniform fan-in initialization `U(−1/√fan_in, 1/√fan_in)`, one stream per layer.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let root = RngStream::new(seed, 0x1417);
        let weights = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.weight_shape().map(|shape| {
                    let bound = 1.0 / (l.fan_in() as f64).sqrt();
                    root.child(i as u64).uniform(&shape).map(|u| (2.0 * u - 1.0) * bound)
                })
            })
            .collect();
        Ok(Self { spec, weights })
    }

    pub fn from_parts(spec: NetworkSpec, weights: Vec<Option<Tensor>>) -> Result<Self> {
        spec.validate()?;
        if weights.len() != spec.layers.len() {
            return Err(Error::Dimension(format!(
                "{} weight slots for {} layers",
                weights.len(),
                spec.layers.len()
            )));
        }
        for (i, (l, w)) in spec.layers.iter().zip(&weights).enumerate() {
            let want = l.weight_shape();
            let got = w.as_ref().map(|t| t.shape().to_vec());
            if want != got {
                return Err(Error::Dimension(format!(
                    "layer {i}: weights {got:?}, expected {want:?}"
                )));
            }
        }
        Ok(Self { spec, weights })
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        self.weights[layer].as_ref().expect("weighted layer")
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().flatten().map(Tensor::len).sum()
    }
}
