//! Accuracy, latency, spiking rates and energy of a trained checkpoint on
//! the MNIST test set.
//!
//! ```text
//! cargo run --release --example evaluate_checkpoint -- runs/sf/best.ckpt [rate_timesteps]
//! ```

use std::path::PathBuf;

use spikefirst::data::{data_root_from_env, load_mnist, Split};
use spikefirst::metrics::{evaluate, EvalOptions};
use spikefirst::network::Coding;
use spikefirst::trainer::load_checkpoint;

fn main() -> spikefirst::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(
        args.next()
            .expect("usage: evaluate_checkpoint <checkpoint> [rate_timesteps]"),
    );
    let rate_window: Option<usize> = args.next().map(|s| s.parse().expect("timesteps must be an integer"));

    let ckpt = load_checkpoint(&path)?;
    let net = ckpt.network()?;
    print!("{}", net.spec.audit());
    let root = data_root_from_env().unwrap_or_else(|| PathBuf::from("data/mnist"));
    let test = load_mnist(&root, Split::Test)?;

    let mut options = EvalOptions::for_network(&net);
    options.workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    if let Some(t) = rate_window {
        options.mode = Coding::Rate;
        options.horizon = Some(t);
    }
    let r = evaluate(&net, &test, &options)?;
    println!("accuracy      {:.4}", r.accuracy);
    println!("mean latency  {:.3} / {}", r.mean_latency, r.horizon);
    println!("layer rates   {:?}", r.layer_rates);
    println!(
        "energy cost   {:.4} (input charged: {:.4})",
        r.energy_cost, r.energy_cost_with_input
    );
    Ok(())
}
