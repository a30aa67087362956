//! Energy cost from spiking rates and per-layer operation counts.
//!
//! ```text
//! cargo run --example energy_cost
//! ```

use spikefirst::metrics::{energy_cost, energy_terms, layer_ops};
use spikefirst::network::{build, Arch, ModelKind, Overrides};

fn main() -> spikefirst::Result<()> {
    // two layers with 12 and 6 operations, rates 0.5 and 0.25, four steps
    let e = energy_cost(&[0.5, 0.25], 4.0, &[12, 6])?;
    println!("toy network: E = {e:.4}");

    for arch in [Arch::Mlp2, Arch::Lenet5] {
        let spec = build(arch, ModelKind::DetFirst, &Overrides::default())?;
        let ops: Vec<u64> = spec.layers.iter().map(layer_ops).collect();
        println!("{arch}: operations per layer {ops:?}");
    }

    // MLP with hidden rate 0.05 and mean latency 3 steps
    let mlp = build(Arch::Mlp2, ModelKind::DetFirst, &Overrides::default())?;
    let rates = [0.05, 0.02];
    let (r, o) = energy_terms(&mlp.layers, &rates, None)?;
    println!("mlp2, spiking layers only: E = {:.4}", energy_cost(&r, 3.0, &o)?);
    let (r, o) = energy_terms(&mlp.layers, &rates, Some(0.13))?;
    println!(
        "mlp2, input layer charged at rate 0.13: E = {:.4}",
        energy_cost(&r, 3.0, &o)?
    );
    Ok(())
}
