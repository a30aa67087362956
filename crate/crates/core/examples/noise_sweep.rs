//! Test accuracy under additive Gaussian input noise of growing variance.
//!
//! ```text
//! cargo run --release --example noise_sweep -- runs/df/best.ckpt [limit]
//! ```

use std::path::PathBuf;

use spikefirst::data::{data_root_from_env, load_mnist, Split};
use spikefirst::metrics::{noise_csv, noise_sweep, EvalOptions};
use spikefirst::trainer::load_checkpoint;

fn main() -> spikefirst::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(args.next().expect("usage: noise_sweep <checkpoint> [limit]"));
    let limit: Option<usize> = args.next().map(|s| s.parse().expect("limit must be an integer"));

    let net = load_checkpoint(&path)?.network()?;
    let root = data_root_from_env().unwrap_or_else(|| PathBuf::from("data/mnist"));
    let mut test = load_mnist(&root, Split::Test)?;
    if let Some(n) = limit {
        test = test.take(n);
    }
    let mut options = EvalOptions::for_network(&net);
    options.workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let rows = noise_sweep(&net, &test, &[0.0, 0.25, 0.5, 0.75, 1.0], &options)?;
    print!("{}", noise_csv(&rows));
    Ok(())
}
