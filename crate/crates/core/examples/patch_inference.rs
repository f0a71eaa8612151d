//! Patch plans for a few record lengths, then patch-averaged prediction of a
//! 40 s record with an untrained quarter-width network.
//!
//! `cargo run --release --example patch_inference`

use ecg_senet::inference::{patch_probabilities, predict_record, PatchPlan, DEFAULT_OVERLAP};
use ecg_senet::metrics::ThresholdVector;
use ecg_senet::model::{Model, ModelConfig, WidthScale};
use ecg_senet::preprocess::prepare_record;
use ecg_senet::record_io::ClassMap;
use ecg_senet::synth::{generate_record, Rhythm, SynthSpec};
use rand::SeedableRng;

fn main() -> ecg_senet::Result<()> {
    for len in [2_000, 4_096, 4_097, 10_000, 20_000] {
        let plan = PatchPlan::new(len, DEFAULT_OVERLAP);
        println!(
            "L = {len:>6}: {} patch(es) starting at {:?}",
            plan.patch_starts.len(),
            plan.patch_starts
        );
    }

    let map = ClassMap::default_map();
    let spec = SynthSpec {
        duration_s: 40.0,
        rhythm: Rhythm::AFib,
        seed: 2,
        ..SynthSpec::default()
    };
    let record = prepare_record(&generate_record(&spec, "long", &map)?)?;
    let config = ModelConfig::scaled(WidthScale::new(1, 4)?, 16);
    let model = Model::new(config, map.identity(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;

    let per_patch = patch_probabilities(&model, &record)?;
    let pred = predict_record(
        std::slice::from_ref(&model),
        &record,
        &ThresholdVector::uniform(0.5),
        &map,
    )?;
    let af = map.class_index("AF").expect("AF in class map");
    println!(
        "\n{} samples at 257 Hz -> {} patches",
        record.signal.len(),
        per_patch.len()
    );
    for (i, p) in per_patch.iter().enumerate() {
        println!("  patch {i}: P(AF) = {:.4}", p[af]);
    }
    println!("  averaged: P(AF) = {:.4}", pred.probabilities[af]);
    Ok(())
}
