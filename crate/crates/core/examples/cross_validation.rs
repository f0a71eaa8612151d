//! Stratified k-fold training on a small synthetic set: per-fold checkpoints,
//! tuned thresholds and the out-of-fold score, written as a run directory.
//!
//! `cargo run --release --example cross_validation [run_dir]`

use ecg_senet::inference::apply_all;
use ecg_senet::metrics::{challenge_score, WeightMatrix};
use ecg_senet::model::{ModelConfig, WidthScale};
use ecg_senet::preprocess::prepare_record;
use ecg_senet::record_io::ClassMap;
use ecg_senet::synth::{generate_dataset, DatasetSpec};
use ecg_senet::training::{train_model, write_run, Scoring, TrainConfig};

fn main() -> ecg_senet::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "cv_run".into());
    let map = ClassMap::default_map();
    let weights = WeightMatrix::identity();
    let spec = DatasetSpec {
        duration_s: 8.0,
        ..DatasetSpec::balanced(10, 0.05, 4)
    };
    let records: Vec<_> = generate_dataset(&spec, &map)?
        .iter()
        .map(prepare_record)
        .collect::<Result<_, _>>()?;

    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        folds: 3,
        lr_drop_epochs: vec![],
        seed: 9,
        ..TrainConfig::default()
    };
    let config = ModelConfig::scaled(WidthScale::new(1, 8)?, 8);
    let scoring = Scoring {
        class_map: &map,
        weights: &weights,
    };
    let run = train_model(&records, &config, &cfg, &scoring, &mut |r| {
        let val = r.val_score.map(|v| format!("{v:.3}")).unwrap_or_default();
        println!("fold {} epoch {} loss {:.4} val {val}", r.fold, r.epoch, r.loss);
    })?;

    for (fold, held) in run.heldout.iter().enumerate() {
        let pred = apply_all(&held.probabilities, &run.thresholds[fold]);
        let s = challenge_score(&held.truth, &pred, &weights, map.normal_class_index())?;
        println!(
            "fold {fold}: {} held-out records, tuned s_normalized {s:.4}",
            held.truth.len()
        );
    }
    write_run(std::path::Path::new(&out), &run, &map)?;
    println!("run written to {out}");
    Ok(())
}
