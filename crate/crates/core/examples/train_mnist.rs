//! Trains a preset on MNIST and writes checkpoints plus the epoch log.
//!
//! ```text
//! cargo run --release --example train_mnist -- mnist-sf-bptt 20 out/sf [key=value ...]
//! ```
//! Trailing `key=value` pairs override config keys (`lr=1e-3`, `train_subset=4096`).
//! MNIST IDX files are read from `$SPIKEFIRST_DATA` (default `data/mnist`).

use std::env;
use std::path::PathBuf;

use spikefirst::data::{data_root_from_env, load_mnist, Split};
use spikefirst::network::KvMap;
use spikefirst::trainer::{train, TrainConfig, TrainOptions};

fn main() -> spikefirst::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = env::args().skip(1).collect();
    let preset = args.first().map_or("mnist-sf-bptt", String::as_str);
    let mut config = TrainConfig::preset(preset)?;
    if let Some(epochs) = args.get(1) {
        config.epochs = epochs.parse().expect("epochs must be an integer");
    }
    let out = PathBuf::from(args.get(2).map_or("runs/train_mnist", String::as_str));
    let overrides = args.get(3..).unwrap_or_default().join("\n");
    config.apply(&KvMap::parse(&overrides)?)?;
    config.validate()?;

    let root = data_root_from_env().unwrap_or_else(|| PathBuf::from("data/mnist"));
    let train_ds = load_mnist(&root, Split::Train)?;
    let test_ds = load_mnist(&root, Split::Test)?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let options = TrainOptions {
        workers,
        out_dir: Some(out.clone()),
        stop_after: None,
    };
    let outcome = train(&config, &train_ds, &test_ds, &options)?;
    println!(
        "{preset}: {} epochs, best test accuracy {:.4}, checkpoints in {}",
        outcome.last.epoch,
        outcome.best.best_acc,
        out.display()
    );
    Ok(())
}
