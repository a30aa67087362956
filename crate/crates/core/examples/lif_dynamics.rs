//! Membrane traces of one deterministic and one stochastic LIF neuron under
//! a constant drive.
//!
//! ```text
//! cargo run --example lif_dynamics -- 0.6
//! ```

use spikefirst::neuron::{det_lif_step, stoch_lif_step, DetLifParams, LayerState, StochLifParams};
use spikefirst::{RngStream, Tensor};

fn main() -> spikefirst::Result<()> {
    let drive: f64 = std::env::args()
        .nth(1)
        .map_or(0.6, |s| s.parse().expect("drive must be a number"));
    let steps = 12;
    let input = Tensor::full(&[1], drive);

    let det = DetLifParams::new(1.0, 0.9)?;
    let stoch = StochLifParams::new(1.0, 0.7)?;
    let mut d_state = LayerState::zeros(&[1]);
    let mut s_state = LayerState::zeros(&[1]);
    let mut stream = RngStream::new(42, 0);

    println!("drive {drive}: deterministic (V_th 1, λ 0.9) vs stochastic (k 1, λ 0.7)");
    println!(
        "{:>3}  {:>8} {:>5}   {:>8} {:>6} {:>5}",
        "t", "V", "spike", "V", "p", "spike"
    );
    for t in 1..=steps {
        let (next_d, d_spike) = det_lif_step(&d_state, &det, &input)?;
        let (next_s, s_spike, p) = stoch_lif_step(&s_state, &stoch, &input, &mut stream)?;
        println!(
            "{t:>3}  {:>8.4} {:>5}   {:>8.4} {:>6.3} {:>5}",
            next_d.v.data()[0],
            d_spike.data()[0],
            next_s.v.data()[0],
            p.data()[0],
            s_spike.data()[0]
        );
        d_state = next_d;
        s_state = next_s;
    }
    Ok(())
}
