//! Two-phase threshold search on simulated classifier outputs whose
//! calibration differs by class.
//!
//! `cargo run --release --example threshold_search`

use ecg_senet::inference::apply_all;
use ecg_senet::metrics::{challenge_score, optimize_thresholds, ThresholdVector, WeightMatrix};
use ecg_senet::record_io::{ClassMap, ClassSet, NUM_CLASSES};
use rand::{Rng, SeedableRng};

fn main() -> ecg_senet::Result<()> {
    let map = ClassMap::default_map();
    let normal = map.normal_class_index();
    let classes: Vec<usize> = ["AF", "LAD", "RAD", "SB", "STach", "SNR"]
        .iter()
        .map(|a| map.class_index(a).unwrap())
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);

    // the model is over-confident on some classes and timid on others
    let bias = [0.25, -0.2, 0.1, -0.3, 0.0, 0.15];
    let mut truth = Vec::new();
    let mut probs = Vec::new();
    for _ in 0..400 {
        let k = rng.random_range(0..classes.len());
        truth.push(ClassSet::from_indices([classes[k]]));
        let mut p = [0.0; NUM_CLASSES];
        for (j, &c) in classes.iter().enumerate() {
            let centre: f64 = if j == k { 0.65 } else { 0.3 } + bias[j];
            p[c] = (centre + rng.random_range(-0.25..0.25)).clamp(0.0, 1.0);
        }
        probs.push(p);
    }

    let weights = WeightMatrix::identity();
    let uniform = challenge_score(
        &truth,
        &apply_all(&probs, &ThresholdVector::uniform(0.5)),
        &weights,
        normal,
    )?;
    let search = optimize_thresholds(&probs, &truth, &weights, normal)?;
    println!("uniform 0.5 thresholds: s_normalized {uniform:.4}");
    println!(
        "best global threshold {:.1}, tuned s_normalized {:.4}",
        search.global, search.score
    );
    for &c in &classes {
        println!("  {:<6} threshold {:.2}", map.abbrev(c), search.thresholds.get(c));
    }
    Ok(())
}
