//! Compare reverse-mode gradients of a conv -> BN -> ReLU -> pool -> dense
//! stack with central finite differences.
//!
//! `cargo run --release --example gradient_check`

use ecg_senet::autodiff::{BatchNormOptions, Mode, RunningStats, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn loss(
    tape: &mut Tape,
    leaves: &[Tensor],
    targets: &[f64],
) -> ecg_senet::Result<(ecg_senet::autodiff::Var, Vec<ecg_senet::autodiff::Var>)> {
    let vars: Vec<_> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let (x, w, gamma, beta, fc) = (vars[0], vars[1], vars[2], vars[3], vars[4]);
    let h = tape.conv1d(x, w, None, 1, 2)?;
    let mut stats = RunningStats::new(4);
    let h = tape.batch_norm1d(h, gamma, beta, &mut stats, Mode::Train, BatchNormOptions::default())?;
    let h = tape.relu(h);
    let h = tape.max_pool1d(h, 3, 2, 1)?;
    let h = tape.global_avg_pool(h)?;
    let logits = tape.dense(h, fc, None)?;
    Ok((tape.bce_mean(logits, targets)?, vars))
}

fn main() -> ecg_senet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let leaves = vec![
        random(&[3, 2, 16], &mut rng),
        random(&[4, 2, 5], &mut rng),
        random(&[4], &mut rng),
        random(&[4], &mut rng),
        random(&[3, 4], &mut rng),
    ];
    let targets = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
    let mut tape = Tape::new();
    let with_grad: Vec<Tensor> = leaves.iter().cloned().map(Tensor::requires_grad).collect();
    let (l, vars) = loss(&mut tape, &with_grad, &targets)?;
    tape.backward(l)?;

    let h = 1e-5;
    for (name, (li, var)) in ["input", "conv weight", "bn gamma", "bn beta", "dense weight"]
        .iter()
        .zip(vars.iter().enumerate())
    {
        let analytic = tape.grad(*var).unwrap().to_vec();
        let mut numeric = Vec::new();
        for i in 0..leaves[li].len() {
            let eval = |delta: f64| {
                let mut probe = leaves.clone();
                probe[li].data_mut()[i] += delta;
                let mut t = Tape::new();
                let (l, _) = loss(&mut t, &probe, &targets).unwrap();
                t.value(l).item()
            };
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let err = norm(&diff) / norm(&analytic).max(norm(&numeric));
        println!("{name:<13} {:>3} coords  relative error {err:.2e}", leaves[li].len());
    }
    Ok(())
}
