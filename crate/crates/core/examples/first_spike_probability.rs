//! The probability that the correct output neuron is the first to fire,
//! computed in closed form and checked against sampling.
//!
//! ```text
//! cargo run --release --example first_spike_probability
//! ```

use spikefirst::coding::{first_spike_event_prob, ml_loss, ProbTable};
use spikefirst::{RngStream, Tensor};

fn main() -> spikefirst::Result<()> {
    // three output neurons over four steps; neuron 0 is the target
    let table = ProbTable::new(Tensor::new(
        &[4, 3],
        vec![
            0.30, 0.10, 0.05, //
            0.50, 0.20, 0.10, //
            0.60, 0.20, 0.20, //
            0.70, 0.30, 0.20,
        ],
    )?)?;
    let mut total = 0.0;
    for t in 1..=table.horizon() {
        let p = first_spike_event_prob(&table, 0, t)?;
        total += p;
        println!("P(neuron 0 fires first, alone, at t={t}) = {p:.6}");
    }
    let loss = ml_loss(&table, 0)?;
    println!("sum {total:.6}, loss -ln(sum) = {:.6}", loss.value);

    let trials = 200_000;
    let mut stream = RngStream::new(7, 0);
    let mut wins = 0usize;
    for _ in 0..trials {
        let mut decided = false;
        for t in 1..=table.horizon() {
            let fired: Vec<bool> = (0..3).map(|i| stream.next_f64() < table.at(t, i)).collect();
            if fired.iter().any(|&f| f) {
                wins += usize::from(fired == [true, false, false]);
                decided = true;
            }
            if decided {
                break;
            }
        }
    }
    println!("Monte Carlo over {trials} trials: {:.6}", wins as f64 / trials as f64);
    println!("dL/dp for the target at t=1: {:.6}", loss.grads.data()[0]);
    Ok(())
}
