//! Side-by-side comparison of trained D-F, S-F and D-R checkpoints:
//! accuracy, latency, energy, output-layer rate and accuracy under noise.
//!
//! ```text
//! cargo run --release --example reproduce_table -- df.ckpt sf.ckpt dr.ckpt
//! ```

use std::path::PathBuf;

use spikefirst::data::{data_root_from_env, load_mnist, Split};
use spikefirst::metrics::{evaluate, noise_sweep, EvalOptions};
use spikefirst::trainer::load_checkpoint;

fn main() -> spikefirst::Result<()> {
    let paths: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    assert!(!paths.is_empty(), "usage: reproduce_table <checkpoint>...");
    let root = data_root_from_env().unwrap_or_else(|| PathBuf::from("data/mnist"));
    let test = load_mnist(&root, Split::Test)?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());

    println!(
        "{:<10} {:>9} {:>9} {:>8} {:>12} {:>12}",
        "model", "accuracy", "latency", "energy", "output rate", "acc @ var 1"
    );
    for path in &paths {
        let ckpt = load_checkpoint(path)?;
        let net = ckpt.network()?;
        let mut options = EvalOptions::for_network(&net);
        options.workers = workers;
        let r = evaluate(&net, &test, &options)?;
        let noisy = noise_sweep(&net, &test, &[1.0], &options)?[0].1;
        println!(
            "{:<10} {:>9.4} {:>9.3} {:>8.4} {:>12.5} {:>12.4}",
            ckpt.config.model.to_string(),
            r.accuracy,
            r.mean_latency,
            r.energy_cost,
            r.layer_rates.last().copied().unwrap_or(0.0),
            noisy
        );
    }
    Ok(())
}
