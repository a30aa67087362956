//! Differential evolution over per-layer thresholds (or stochastic scales)
//! of a trained checkpoint.
//!
//! ```text
//! cargo run --release --example tune_thresholds -- runs/df/best.ckpt runs/df_tuned [generations]
//! ```

use std::path::PathBuf;

use spikefirst::data::{data_root_from_env, load_mnist, Split};
use spikefirst::metrics::write_text;
use spikefirst::trainer::{load_checkpoint, save_checkpoint};
use spikefirst::tuner::{tune_checkpoint, DeConfig, TuneOptions, DEFAULT_BOUNDS};

fn main() -> spikefirst::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(
        args.next()
            .expect("usage: tune_thresholds <checkpoint> <out_dir> [generations]"),
    );
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/tuned".into()));
    let generations = args
        .next()
        .map_or(30, |s| s.parse().expect("generations must be an integer"));

    let ckpt = load_checkpoint(&path)?;
    let root = data_root_from_env().unwrap_or_else(|| PathBuf::from("data/mnist"));
    let train = load_mnist(&root, Split::Train)?;

    let dims = ckpt.spec.layer_params().len();
    let mut config = DeConfig::with_bounds(vec![DEFAULT_BOUNDS; dims]);
    config.max_generations = generations;
    let options = TuneOptions {
        workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        ..TuneOptions::default()
    };
    let (result, tuned) = tune_checkpoint(&ckpt, &train, &config, &options)?;
    for h in &result.history {
        println!(
            "gen {:>3}  objective {:.5}  {:?}",
            h.generation, h.best_objective, h.best_vector
        );
    }
    write_text(&out.join("de_history.csv"), &result.history_csv())?;
    save_checkpoint(&tuned, &out.join("tuned.ckpt"))?;
    Ok(())
}
