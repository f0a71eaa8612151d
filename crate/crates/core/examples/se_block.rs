//! Squeeze-and-excitation on a hand-built (1, 4, 8) feature map with fixed
//! weights: per-channel squeeze values, gates and rescaled means.
//!
//! `cargo run --release --example se_block`

use ecg_senet::autodiff::{Tape, Tensor};
use ecg_senet::model::se_block;

fn main() -> ecg_senet::Result<()> {
    let (channels, hidden, len) = (4, 2, 8);
    let mut x = vec![0.0; channels * len];
    for t in 0..len {
        x[t] = 2.0;
        x[len + t] = 0.5;
        x[2 * len + t] = (t as f64 * 0.7).sin();
        x[3 * len + t] = -1.0;
    }
    // w1: (hidden, C), w2: (C, hidden)
    let w1 = vec![1.0, 0.5, 0.0, -0.5, -0.5, 0.0, 1.0, 0.5];
    let w2 = vec![1.5, -0.5, 0.2, 0.2, -1.0, 1.0, 0.0, -1.5];

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, channels, len], x)?);
    let w1 = tape.leaf(Tensor::new(vec![hidden, channels], w1)?);
    let w2 = tape.leaf(Tensor::new(vec![channels, hidden], w2)?);
    let (out, gate) = se_block(&mut tape, x, w1, w2)?;

    let input = tape.data(x).to_vec();
    let output = tape.data(out).to_vec();
    for c in 0..channels {
        let mean_in = input[c * len..(c + 1) * len].iter().sum::<f64>() / len as f64;
        let mean_out = output[c * len..(c + 1) * len].iter().sum::<f64>() / len as f64;
        println!(
            "channel {c}: squeeze {mean_in:+.3}  gate {:.3}  mean out {mean_out:+.3}",
            tape.data(gate)[c]
        );
    }
    Ok(())
}
