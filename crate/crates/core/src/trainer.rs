//! Mini-batch BPTT training: presets, Adam with coupled L2 decay, the step
//! learning-rate schedule, the epoch loop and checkpoint files.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;
use std::time::Instant;

use byteorder::{ByteOrder, LittleEndian};
use sha2::{Digest, Sha256};

use crate::bptt::{backward, output_loss, Gradients, LossKind, SurrogateConfig};
use crate::data::{augment, AugmentConfig, Dataset, DatasetName};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions};
use crate::network::{build, default_horizon, forward, Arch, KvMap, ModelKind, Network, NetworkSpec, Overrides};
use crate::tensor::{RngStream, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPKFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const EPOCH_CSV_HEADER: &str = "epoch,lr,train_loss,test_acc,wall_time_s";

/// Samples per unit of parallel work. Fixed so results do not depend on the
/// worker count.
pub const MICRO_BATCH: usize = 32;

const SHUFFLE_STREAM: u64 = 0x5AF1;
const SAMPLE_STREAM: u64 = 0x7A11;
const AUGMENT_STREAM: u64 = 0xA46;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub arch: Arch,
    pub dataset: DatasetName,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub scheduler_step: usize,
    pub scheduler_gamma: f64,
    pub lambda_leak: f64,
    pub horizon: usize,
    pub seed: u64,
    /// MLP hidden width; `None` keeps the architecture default.
    pub hidden: Option<usize>,
    /// Train on the first `n` training images only.
    pub train_subset: Option<usize>,
    /// Report test accuracy on the first `n` test images only.
    pub test_subset: Option<usize>,
    pub augment: bool,
}

pub const PRESETS: [&str; 6] = [
    "mnist-df-bptt",
    "mnist-sf-bptt",
    "mnist-dr-bptt",
    "cifar-df-bptt",
    "cifar-sf-bptt",
    "cifar-dr-bptt",
];

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (data, model) = name
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("unknown preset '{name}'")))?;
        let model = match model {
            "df-bptt" => ModelKind::DetFirst,
            "sf-bptt" => ModelKind::StochFirst,
            "dr-bptt" => ModelKind::DetRate,
            _ => return Err(Error::Config(format!("unknown preset '{name}'"))),
        };
        let stochastic = model == ModelKind::StochFirst;
        // (epochs, batch, lr, decay, step, gamma)
        let (dataset, arch, h) = match data {
            "mnist" => (
                DatasetName::Mnist,
                Arch::Mlp2,
                if stochastic {
                    (150, 512, 5e-2, 1e-6, 50, 0.8)
                } else {
                    (150, 512, 1e-3, 1e-4, 50, 0.5)
                },
            ),
            "cifar" => (
                DatasetName::Cifar10,
                Arch::Vgg15,
                if stochastic {
                    (1000, 64, 1e-2, 1e-6, 200, 0.5)
                } else {
                    (1000, 64, 5e-5, 1e-2, 120, 0.5)
                },
            ),
            _ => return Err(Error::Config(format!("unknown preset '{name}'"))),
        };
        Ok(Self {
            model,
            arch,
            dataset,
            epochs: h.0,
            batch_size: h.1,
            lr: h.2,
            weight_decay: h.3,
            scheduler_step: h.4,
            scheduler_gamma: h.5,
            lambda_leak: model.default_leak(),
            horizon: default_horizon(arch, model),
            seed: 0,
            hidden: None,
            train_subset: None,
            test_subset: None,
            augment: dataset == DatasetName::Cifar10,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("key '{key}': {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be >= 0");
        }
        if self.scheduler_step == 0 {
            return bad("scheduler_step", "must be >= 1");
        }
        if !(self.scheduler_gamma > 0.0 && self.scheduler_gamma <= 1.0) {
            return bad("scheduler_gamma", "must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda_leak) {
            return bad("lambda_leak", "must lie in [0, 1]");
        }
        if self.horizon == 0 {
            return bad("horizon", "must be >= 1");
        }
        if self.hidden == Some(0) {
            return bad("hidden", "must be >= 1");
        }
        Ok(())
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let overrides = Overrides {
            hidden: self.hidden,
            layer_params: None,
            lambda: Some(self.lambda_leak),
            horizon: Some(self.horizon),
        };
        build(self.arch, self.model, &overrides)
    }

    pub fn to_kv(&self) -> KvMap {
        let opt = |v: Option<usize>| v.map_or_else(|| "none".to_string(), |v| v.to_string());
        let mut kv = KvMap::default();
        kv.set("model", self.model.to_string());
        kv.set("arch", self.arch.to_string());
        kv.set("dataset", self.dataset.to_string());
        kv.set("epochs", self.epochs.to_string());
        kv.set("batch_size", self.batch_size.to_string());
        kv.set("lr", format!("{:e}", self.lr));
        kv.set("weight_decay", format!("{:e}", self.weight_decay));
        kv.set("scheduler_step", self.scheduler_step.to_string());
        kv.set("scheduler_gamma", self.scheduler_gamma.to_string());
        kv.set("lambda_leak", self.lambda_leak.to_string());
        kv.set("horizon", self.horizon.to_string());
        kv.set("seed", self.seed.to_string());
        kv.set("hidden", opt(self.hidden));
        kv.set("train_subset", opt(self.train_subset));
        kv.set("test_subset", opt(self.test_subset));
        kv.set("augment", self.augment.to_string());
        kv
    }

    /// Applies every key of `kv` on top of `self`. Unknown keys are errors.
    pub fn apply(&mut self, kv: &KvMap) -> Result<()> {
        fn opt(kv: &KvMap, key: &str) -> Result<Option<usize>> {
            match kv.get(key)? {
                "none" => Ok(None),
                _ => kv.num(key).map(Some),
            }
        }
        for (key, value) in kv.entries() {
            let parsed = |e: Error| Error::Config(format!("key '{key}': {e}"));
            match key.as_str() {
                "model" => self.model = ModelKind::from_str(value).map_err(parsed)?,
                "arch" => self.arch = Arch::from_str(value).map_err(parsed)?,
                "dataset" => self.dataset = DatasetName::from_str(value).map_err(parsed)?,
                "epochs" => self.epochs = kv.num(key)?,
                "batch_size" => self.batch_size = kv.num(key)?,
                "lr" => self.lr = kv.num(key)?,
                "weight_decay" => self.weight_decay = kv.num(key)?,
                "scheduler_step" => self.scheduler_step = kv.num(key)?,
                "scheduler_gamma" => self.scheduler_gamma = kv.num(key)?,
                "lambda_leak" => self.lambda_leak = kv.num(key)?,
                "horizon" => self.horizon = kv.num(key)?,
                "seed" => self.seed = kv.num(key)?,
                "hidden" => self.hidden = opt(kv, key)?,
                "train_subset" => self.train_subset = opt(kv, key)?,
                "test_subset" => self.test_subset = opt(kv, key)?,
                "augment" => self.augment = kv.num(key)?,
                _ => return Err(Error::Config(format!("unknown key '{key}'"))),
            }
        }
        Ok(())
    }

    /// Parses a complete config written by [`Self::to_text`].
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvMap::parse(text)?;
        let mut config = Self::preset(&base_preset(&kv)?)?;
        config.apply(&kv)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    /// Short hex digest of the config text; names cached artifacts.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Preset matching the `dataset` and `model` keys of a config map.
pub fn base_preset(kv: &KvMap) -> Result<String> {
    let suffix = match ModelKind::from_str(kv.get("model")?)? {
        ModelKind::DetFirst => "df-bptt",
        ModelKind::StochFirst => "sf-bptt",
        ModelKind::DetRate => "dr-bptt",
    };
    Ok(format!("{}-{suffix}", kv.get("dataset")?))
}

/// Step schedule `lr0 · gamma^⌊epoch / step⌋`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr * config.scheduler_gamma.powi((epoch / config.scheduler_step) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub names: Vec<String>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[(String, &Tensor)]) -> Self {
        Self {
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            m: params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn for_network(net: &Network) -> Self {
        let params: Vec<(String, &Tensor)> = net
            .weights
            .iter()
            .enumerate()
            .filter_map(|(i, w)| w.as_ref().map(|w| (format!("layer{i}.weight"), w)))
            .collect();
        Self::new(&params)
    }
}

/// One bias-corrected Adam step with the decay added to the gradient.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.check_same_shape(g)?;
        p.check_same_shape(&state.m[i])?;
        if !g.is_finite() {
            return Err(Error::Divergence(format!("non-finite gradient for {}", state.names[i])));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = g.data()[j] + weight_decay * *w;
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_acc: f64,
}

impl EpochRecord {
    pub fn csv_row(&self, wall_time_s: f64) -> String {
        format!(
            "{},{:e},{:.10},{:.6},{:.3}",
            self.epoch, self.lr, self.train_loss, self.test_acc, wall_time_s
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub config: TrainConfig,
    pub weights: Vec<Option<Tensor>>,
    pub adam: AdamState,
    /// Root of every training stream; draws are keyed below it by epoch and
    /// sample index.
    pub rng: RngStream,
    /// Epochs completed.
    pub epoch: usize,
    pub best_acc: f64,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn fresh(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::init(config.network_spec()?, config.seed)?;
        let adam = AdamState::for_network(&net);
        Ok(Self {
            spec: net.spec,
            config: config.clone(),
            weights: net.weights,
            adam,
            rng: RngStream::new(config.seed, 0),
            epoch: 0,
            best_acc: f64::NEG_INFINITY,
            history: Vec::new(),
        })
    }

    pub fn network(&self) -> Result<Network> {
        Network::from_parts(self.spec.clone(), self.weights.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        section(&mut out, b"SPEC", self.spec.to_text().as_bytes());
        section(&mut out, b"CONF", self.config.to_text().as_bytes());

        let mut w = Vec::new();
        put_u64(&mut w, self.weights.len() as u64);
        for slot in &self.weights {
            match slot {
                Some(t) => {
                    w.push(1);
                    put_tensor(&mut w, t);
                }
                None => w.push(0),
            }
        }
        section(&mut out, b"WGHT", &w);

        let mut a = Vec::new();
        put_u64(&mut a, self.adam.step);
        put_u64(&mut a, self.adam.names.len() as u64);
        for ((name, m), v) in self.adam.names.iter().zip(&self.adam.m).zip(&self.adam.v) {
            put_u64(&mut a, name.len() as u64);
            a.extend_from_slice(name.as_bytes());
            put_tensor(&mut a, m);
            put_tensor(&mut a, v);
        }
        section(&mut out, b"ADAM", &a);

        let mut r = Vec::new();
        put_u64(&mut r, self.rng.seed);
        put_u64(&mut r, self.rng.stream_id);
        put_u64(&mut r, self.rng.counter);
        section(&mut out, b"RNGS", &r);

        let mut e = Vec::new();
        put_u64(&mut e, self.epoch as u64);
        put_f64(&mut e, self.best_acc);
        put_u64(&mut e, self.history.len() as u64);
        for h in &self.history {
            put_u64(&mut e, h.epoch as u64);
            put_f64(&mut e, h.lr);
            put_f64(&mut e, h.train_loss);
            put_f64(&mut e, h.test_acc);
        }
        section(&mut out, b"EPOC", &e);

        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |why: &str| Error::Corrupt(why.to_string());
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing magic"));
        }
        let version = LittleEndian::read_u32(&bytes[8..12]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 12 + 32 {
            return Err(corrupt("truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }

        let mut r = Reader { buf: &body[12..] };
        let spec_text = utf8(r.section(b"SPEC")?)?;
        let conf_text = utf8(r.section(b"CONF")?)?;
        let spec = NetworkSpec::parse(&spec_text)?;
        let config = TrainConfig::parse(&conf_text)?;

        let mut w = Reader {
            buf: r.section(b"WGHT")?,
        };
        let slots = w.u64()? as usize;
        let mut weights = Vec::with_capacity(slots.min(1024));
        for _ in 0..slots {
            weights.push(match w.u8()? {
                0 => None,
                1 => Some(w.tensor()?),
                _ => return Err(corrupt("bad weight slot tag")),
            });
        }

        let mut a = Reader {
            buf: r.section(b"ADAM")?,
        };
        let step = a.u64()?;
        let count = a.u64()? as usize;
        let mut adam = AdamState {
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            step,
        };
        for _ in 0..count {
            let len = a.u64()? as usize;
            adam.names.push(utf8(a.take(len)?)?);
            adam.m.push(a.tensor()?);
            adam.v.push(a.tensor()?);
        }

        let mut g = Reader {
            buf: r.section(b"RNGS")?,
        };
        let rng = RngStream::at(g.u64()?, g.u64()?, g.u64()?);

        let mut e = Reader {
            buf: r.section(b"EPOC")?,
        };
        let epoch = e.u64()? as usize;
        let best_acc = e.f64()?;
        let n = e.u64()? as usize;
        let mut history = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            history.push(EpochRecord {
                epoch: e.u64()? as usize,
                lr: e.f64()?,
                train_loss: e.f64()?,
                test_acc: e.f64()?,
            });
        }
        if !r.buf.is_empty() {
            return Err(corrupt("trailing bytes after sections"));
        }

        let ckpt = Self {
            spec,
            config,
            weights,
            adam,
            rng,
            epoch,
            best_acc,
            history,
        };
        ckpt.network()
            .map_err(|e| Error::Corrupt(format!("inconsistent weights: {e}")))?;
        Ok(ckpt)
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    put_u64(out, payload.len() as u64);
    out.extend_from_slice(payload);
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u64(out, t.rank() as u64);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &x in t.data() {
        put_f64(out, x);
    }
}

fn utf8(bytes: &[u8]) -> Result<String> {
    String::from_utf8(bytes.to_vec()).map_err(|_| Error::Corrupt("section is not UTF-8".into()))
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Corrupt("truncated section".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u64()? as usize;
        if rank > 8 {
            return Err(Error::Corrupt(format!("tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let len = len
            .filter(|&l| l.saturating_mul(8) <= self.buf.len())
            .ok_or_else(|| Error::Corrupt("tensor overruns section".into()))?;
        let raw = self.take(len * 8)?;
        let mut data = vec![0.0; len];
        LittleEndian::read_f64_into(raw, &mut data);
        Tensor::new(&shape, data).map_err(|e| Error::Corrupt(e.to_string()))
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<&'a [u8]> {
        let found = self.take(4)?;
        if found != tag {
            return Err(Error::Corrupt(format!(
                "expected section {}, found {}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(found)
            )));
        }
        let len = self.u64()? as usize;
        self.take(len)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Execution settings that do not influence results.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub workers: usize,
    /// Directory for `last.ckpt`, `best.ckpt` and `epochs.csv`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many total epochs even if the config asks for more.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// State after the last completed epoch.
    pub last: Checkpoint,
    /// State after the epoch with the highest test accuracy.
    pub best: Checkpoint,
}

/// Deterministic Fisher-Yates permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, root: &RngStream, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut stream = root.child(SHUFFLE_STREAM).child(epoch as u64);
    for i in (1..n).rev() {
        let j = stream.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}

/// Per-sample stream for stochastic neurons in one epoch.
pub fn sample_stream(root: &RngStream, epoch: usize, index: usize) -> RngStream {
    root.child(SAMPLE_STREAM).child(epoch as u64).child(index as u64)
}

/// Summed loss and gradient (scaled by `scale`) over one group of samples.
pub fn group_gradient(
    net: &Network,
    ds: &Dataset,
    indices: &[usize],
    loss: LossKind,
    scale: f64,
    root: &RngStream,
    epoch: usize,
    augment_config: Option<&AugmentConfig>,
) -> Result<(f64, Gradients)> {
    let len = ds.image_len();
    let mut input = Vec::with_capacity(indices.len() * len);
    let mut targets = Vec::with_capacity(indices.len());
    let mut streams = Vec::with_capacity(indices.len());
    for &i in indices {
        match augment_config {
            Some(cfg) => {
                let mut s = root.child(AUGMENT_STREAM).child(epoch as u64).child(i as u64);
                input.extend_from_slice(augment(&ds.get(i), cfg, &mut s).pixels.data());
            }
            None => input.extend_from_slice(ds.image(i)),
        }
        targets.push(ds.label(i));
        streams.push(sample_stream(root, epoch, i));
    }
    let tape = forward(net, &input, indices.len(), &streams)?;
    let (value, out_grad) = output_loss(&tape, &targets, loss, scale)?;
    let grads = backward(net, &tape, &out_grad, SurrogateConfig::default())?;
    Ok((value, grads))
}

/// Gradient of the mean batch loss, reduced over fixed-size micro-batches in
/// order; the worker count only changes the schedule.
fn batch_gradient(
    net: &Network,
    ds: &Dataset,
    batch: &[usize],
    loss: LossKind,
    root: &RngStream,
    epoch: usize,
    augment_config: Option<&AugmentConfig>,
    workers: usize,
) -> Result<(f64, Gradients)> {
    let scale = 1.0 / batch.len() as f64;
    let micro: Vec<&[usize]> = batch.chunks(MICRO_BATCH).collect();
    let run = |m: &[usize]| group_gradient(net, ds, m, loss, scale, root, epoch, augment_config);
    let parts: Vec<Result<(f64, Gradients)>> = if workers <= 1 || micro.len() == 1 {
        micro.iter().map(|m| run(m)).collect()
    } else {
        let per = micro.len().div_ceil(workers);
        thread::scope(|s| {
            let handles: Vec<_> = micro
                .chunks(per)
                .map(|group| s.spawn(move || group.iter().map(|m| run(m)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("training worker panicked"))
                .collect()
        })
    };
    let mut total = 0.0;
    let mut grads = Gradients::zeros_like(net);
    for part in parts {
        let (l, g) = part?;
        total += l;
        grads.add_assign(&g)?;
    }
    Ok((total, grads))
}

fn apply_update(ckpt: &mut Checkpoint, grads: &Gradients, lr: f64) -> Result<()> {
    let mut params: Vec<&mut Tensor> = ckpt.weights.iter_mut().flatten().collect();
    let grads: Vec<&Tensor> = grads.layers.iter().flatten().collect();
    adam_step(&mut params, &grads, &mut ckpt.adam, lr, ckpt.config.weight_decay)
}

fn test_accuracy(net: &Network, test: &Dataset, config: &TrainConfig, workers: usize) -> Result<f64> {
    let ds;
    let test = match config.test_subset {
        Some(n) if n < test.len() => {
            ds = test.take(n);
            &ds
        }
        _ => test,
    };
    let mut options = EvalOptions::for_network(net);
    options.seed = config.seed;
    options.workers = workers.max(1);
    Ok(evaluate(net, test, &options)?.accuracy)
}

/// Runs (or continues) training from `start` until `config.epochs` epochs are
/// complete. Each finished epoch is written to `options.out_dir` when set;
/// a diverging epoch aborts with the previous files left in place.
pub fn train_from(start: Checkpoint, train: &Dataset, test: &Dataset, options: &TrainOptions) -> Result<TrainOutcome> {
    let config = start.config.clone();
    config.validate()?;
    let train_ds;
    let train = match config.train_subset {
        Some(n) if n < train.len() => {
            train_ds = train.take(n);
            &train_ds
        }
        _ => train,
    };
    if train.image_len() != start.spec.input_len() {
        return Err(Error::Dimension(format!(
            "dataset images hold {} values, network expects {}",
            train.image_len(),
            start.spec.input_len()
        )));
    }
    let loss = LossKind::for_model(config.model);
    let augment_config = config.augment.then(AugmentConfig::cifar);
    let workers = options.workers.max(1);
    let end = options.stop_after.map_or(config.epochs, |s| s.min(config.epochs));

    let mut csv = match &options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(open_epoch_csv(&dir.join("epochs.csv"), &start.history)?)
        }
        None => None,
    };

    let mut ckpt = start;
    let mut best = ckpt.clone();
    if let Some(dir) = &options.out_dir {
        if ckpt.epoch == 0 {
            save_checkpoint(&ckpt, &dir.join("last.ckpt"))?;
        }
        if let Ok(b) = load_checkpoint(&dir.join("best.ckpt")) {
            if b.config == ckpt.config && b.epoch <= ckpt.epoch {
                best = b;
            }
        }
    }

    while ckpt.epoch < end {
        let epoch = ckpt.epoch;
        let clock = Instant::now();
        let lr = lr_at(epoch, &config);
        let order = epoch_order(train.len(), &ckpt.rng, epoch);
        let mut net = ckpt.network()?;
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (l, grads) = batch_gradient(
                &net,
                train,
                batch,
                loss,
                &ckpt.rng,
                epoch,
                augment_config.as_ref(),
                workers,
            )?;
            if !l.is_finite() {
                return Err(Error::Divergence(format!("loss became {l} in epoch {}", epoch + 1)));
            }
            loss_sum += l;
            apply_update(&mut ckpt, &grads, lr)?;
            net.weights.clone_from(&ckpt.weights);
        }
        let test_acc = test_accuracy(&net, test, &config, workers)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train.len() as f64,
            test_acc,
        };
        log::info!(
            "epoch {} lr {:e} loss {:.5} test_acc {:.4} ({:.1}s)",
            record.epoch,
            lr,
            record.train_loss,
            test_acc,
            clock.elapsed().as_secs_f64()
        );
        ckpt.epoch += 1;
        ckpt.history.push(record.clone());
        let improved = test_acc > ckpt.best_acc;
        if improved {
            ckpt.best_acc = test_acc;
        }
        if let Some(dir) = &options.out_dir {
            save_checkpoint(&ckpt, &dir.join("last.ckpt"))?;
            if improved {
                save_checkpoint(&ckpt, &dir.join("best.ckpt"))?;
            }
        }
        if improved {
            best = ckpt.clone();
        }
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", record.csv_row(clock.elapsed().as_secs_f64()))?;
            f.flush()?;
        }
    }
    Ok(TrainOutcome { last: ckpt, best })
}

/// Trains `config` from a fresh initialization.
pub fn train(config: &TrainConfig, train_ds: &Dataset, test: &Dataset, options: &TrainOptions) -> Result<TrainOutcome> {
    train_from(Checkpoint::fresh(config)?, train_ds, test, options)
}

/// Rewrites the CSV with `history` (wall time unknown, written as 0) and
/// leaves it open for appending.
fn open_epoch_csv(path: &Path, history: &[EpochRecord]) -> io::Result<fs::File> {
    let mut text = String::new();
    writeln!(text, "{EPOCH_CSV_HEADER}").expect("write to string");
    let previous = fs::read_to_string(path).unwrap_or_default();
    let mut old_rows = previous.lines().skip(1);
    for h in history {
        let wall = old_rows
            .next()
            .and_then(|row| row.rsplit(',').next())
            .and_then(|w| w.parse().ok())
            .unwrap_or(0.0);
        writeln!(text, "{}", h.csv_row(wall)).expect("write to string");
    }
    fs::write(path, &text)?;
    fs::OpenOptions::new().append(true).open(path)
}

/// Drops the wall-time column so two runs' logs can be compared byte for byte.
pub fn csv_without_wall_time(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .fold(String::new(), |mut acc, l| {
            acc.push_str(l);
            acc.push('\n');
            acc
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = RngStream::new(seed, 3);
        let mut pixels = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 10;
            for p in 0..784 {
                let on = (p / 28) / 3 == label || (p % 28) / 3 == label;
                pixels.push(if on { 0.8 } else { 0.0 } + 0.2 * rng.next_f64());
            }
            labels.push(label as u8);
        }
        Dataset {
            name: DatasetName::Mnist,
            split: Split::Train,
            shape: [1, 28, 28],
            pixels,
            labels,
        }
    }

    fn toy_config(model: ModelKind) -> TrainConfig {
        let mut c = TrainConfig::preset(match model {
            ModelKind::DetFirst => "mnist-df-bptt",
            ModelKind::StochFirst => "mnist-sf-bptt",
            ModelKind::DetRate => "mnist-dr-bptt",
        })
        .unwrap();
        c.epochs = 3;
        c.batch_size = 40;
        c.lr = 1e-2;
        c.hidden = Some(24);
        c.horizon = 6;
        c.seed = 11;
        c
    }

    fn toy_train(config: &TrainConfig, options: &TrainOptions) -> Result<TrainOutcome> {
        train(config, &toy_data(100, 1), &toy_data(30, 2), options)
    }

    #[test]
    fn adam_first_step() {
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(1.0);
        let mut state = AdamState::new(&[("w".into(), &p)]);
        adam_step(&mut [&mut p], &[&g], &mut state, 0.1, 0.0).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert_eq!(p.data()[0], expected);
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = Tensor::from_fn(&[3, 2], |i| i as f64 - 2.5);
        let before = p.clone();
        let g = Tensor::zeros(&[3, 2]);
        let mut state = AdamState::new(&[("w".into(), &p)]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[&g], &mut state, 0.1, 0.0).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_symmetric_parameters_stay_equal() {
        let mut a = Tensor::full(&[4], 0.3);
        let mut b = Tensor::full(&[4], 0.3);
        let g = Tensor::from_fn(&[4], |i| 0.1 * i as f64 - 0.2);
        let mut state = AdamState::new(&[("a".into(), &a), ("b".into(), &b)]);
        for _ in 0..3 {
            adam_step(&mut [&mut a, &mut b], &[&g, &g], &mut state, 0.05, 1e-3).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn adam_decay_zero_matches_plain_adam() {
        let mut p = Tensor::from_fn(&[5], |i| i as f64);
        let g = Tensor::from_fn(&[5], |i| 1.0 - 0.3 * i as f64);
        let mut state = AdamState::new(&[("w".into(), &p)]);
        let mut reference = p.data().to_vec();
        let (mut m, mut v) = (vec![0.0; 5], vec![0.0; 5]);
        for t in 1..=4 {
            adam_step(&mut [&mut p], &[&g], &mut state, 0.01, 0.0).unwrap();
            for j in 0..5 {
                let gj = g.data()[j];
                m[j] = 0.9 * m[j] + (1.0 - 0.9) * gj;
                v[j] = 0.999 * v[j] + (1.0 - 0.999) * gj * gj;
                let mh = m[j] / (1.0 - 0.9f64.powi(t));
                let vh = v[j] / (1.0 - 0.999f64.powi(t));
                reference[j] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
        }
        assert_eq!(p.data(), &reference[..]);
    }

    #[test]
    fn adam_names_non_finite_gradient() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(f64::NAN);
        let mut state = AdamState::new(&[("layer3.weight".into(), &p)]);
        let err = adam_step(&mut [&mut p], &[&g], &mut state, 0.1, 0.0).unwrap_err();
        assert!(
            matches!(&err, Error::Divergence(m) if m.contains("layer3.weight")),
            "{err}"
        );
    }

    #[test]
    fn lr_schedule() {
        let mut c = TrainConfig::preset("mnist-sf-bptt").unwrap();
        assert_eq!(lr_at(0, &c), 5e-2);
        assert_eq!(lr_at(49, &c), 5e-2);
        assert!((lr_at(100, &c) - 3.2e-2).abs() < 1e-15);
        c.scheduler_gamma = 1.0;
        assert_eq!(lr_at(149, &c), c.lr);
    }

    #[test]
    fn presets_carry_table_values() {
        let sf = TrainConfig::preset("mnist-sf-bptt").unwrap();
        assert_eq!(
            (sf.epochs, sf.batch_size, sf.lr, sf.weight_decay),
            (150, 512, 5e-2, 1e-6)
        );
        assert_eq!((sf.scheduler_step, sf.scheduler_gamma, sf.lambda_leak), (50, 0.8, 0.7));
        let df = TrainConfig::preset("mnist-df-bptt").unwrap();
        assert_eq!(
            (df.lr, df.weight_decay, df.scheduler_gamma, df.lambda_leak),
            (1e-3, 1e-4, 0.5, 0.9)
        );
        let cdf = TrainConfig::preset("cifar-df-bptt").unwrap();
        assert_eq!(
            (cdf.epochs, cdf.batch_size, cdf.lr, cdf.weight_decay, cdf.scheduler_step),
            (1000, 64, 5e-5, 1e-2, 120)
        );
        let csf = TrainConfig::preset("cifar-sf-bptt").unwrap();
        assert_eq!((csf.lr, csf.scheduler_step, csf.scheduler_gamma), (1e-2, 200, 0.5));
        assert!(TrainConfig::preset("mnist-xx-bptt").is_err());
        for name in PRESETS {
            TrainConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = TrainConfig::preset("mnist-dr-bptt").unwrap();
        c.hidden = Some(100);
        c.train_subset = Some(512);
        c.seed = 99;
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        c.seed = 100;
        assert_ne!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_config_key_is_named() {
        let mut c = TrainConfig::preset("mnist-df-bptt").unwrap();
        let err = c.apply(&KvMap::parse("learning_rate = 3").unwrap()).unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let root = RngStream::new(5, 0);
        let a = epoch_order(50, &root, 0);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, &root, 0));
        assert_ne!(a, epoch_order(50, &root, 1));
    }

    #[test]
    fn checkpoint_round_trip_and_damage() {
        let mut ckpt = Checkpoint::fresh(&toy_config(ModelKind::StochFirst)).unwrap();
        ckpt.epoch = 2;
        ckpt.best_acc = 0.5;
        ckpt.adam.step = 7;
        ckpt.history.push(EpochRecord {
            epoch: 1,
            lr: 0.1,
            train_loss: 2.0,
            test_acc: 0.25,
        });
        let bytes = ckpt.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);

        let cut = Checkpoint::from_bytes(&bytes[..bytes.len() - 100]).unwrap_err();
        assert!(matches!(cut, Error::Corrupt(_)), "{cut}");
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corrupt(_))));
        let mut versioned = bytes.clone();
        versioned[8..12].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&versioned),
            Err(Error::Version { found: 9, expected: 1 })
        ));
        assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(Error::Corrupt(_))));
    }

    #[test]
    fn micro_batch_reduction_ignores_worker_count() {
        let config = toy_config(ModelKind::StochFirst);
        let one = toy_train(
            &config,
            &TrainOptions {
                workers: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let three = toy_train(
            &config,
            &TrainOptions {
                workers: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(one.last.to_bytes(), three.last.to_bytes());
    }

    #[test]
    fn training_lowers_loss() {
        for model in [ModelKind::DetFirst, ModelKind::StochFirst, ModelKind::DetRate] {
            let mut config = toy_config(model);
            config.epochs = 6;
            let out = toy_train(&config, &TrainOptions::default()).unwrap();
            let h = &out.last.history;
            assert_eq!(h.len(), 6);
            assert!(h[5].train_loss < h[0].train_loss, "{model}: {h:?}");
            assert_eq!(
                out.best.best_acc,
                h.iter().map(|r| r.test_acc).fold(f64::NEG_INFINITY, f64::max)
            );
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let config = toy_config(ModelKind::DetFirst);
        let dir = tempfile::tempdir().unwrap();
        let full = toy_train(&config, &TrainOptions::default()).unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            stop_after: Some(1),
            ..Default::default()
        };
        let part = toy_train(&config, &opts).unwrap();
        assert_eq!(part.last.epoch, 1);
        let loaded = load_checkpoint(&dir.path().join("last.ckpt")).unwrap();
        assert_eq!(loaded, part.last);
        let data = toy_data(100, 1);
        let test = toy_data(30, 2);
        let resumed = train_from(loaded, &data, &test, &TrainOptions::default()).unwrap();
        assert_eq!(resumed.last.to_bytes(), full.last.to_bytes());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut config = toy_config(ModelKind::DetFirst);
        config.epochs = 0;
        let out = toy_train(&config, &TrainOptions::default()).unwrap();
        assert_eq!(out.last.epoch, 0);
        assert_eq!(out.last.adam.step, 0);
        assert!(out.last.history.is_empty());
    }

    #[test]
    fn wall_time_column_is_dropped() {
        let csv = "epoch,lr,train_loss,test_acc,wall_time_s\n1,1e-3,0.5,0.9,12.5\n";
        assert_eq!(
            csv_without_wall_time(csv),
            "epoch,lr,train_loss,test_acc\n1,1e-3,0.5,0.9\n"
        );
    }
}
