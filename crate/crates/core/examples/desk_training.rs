//! Train a quarter-width network on 600 synthetic records and report
//! held-out macro-F1 over the six synthesized classes.
//!
//! `cargo run --release --example desk_training [epochs] [per_class]`

use std::time::Instant;

use ecg_senet::inference::apply_all;
use ecg_senet::metrics::{class_stats, ThresholdVector, WeightMatrix};
use ecg_senet::model::{ModelConfig, WidthScale};
use ecg_senet::preprocess::{prepare_record, PreparedRecord};
use ecg_senet::record_io::ClassMap;
use ecg_senet::synth::{generate_dataset, DatasetSpec, SynthClass};
use ecg_senet::training::{fit, predict_probabilities, stratified_kfold, Scoring, TrainConfig};

fn main() -> ecg_senet::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(15, |s| s.parse().expect("epochs"));
    let per_class: usize = args.next().map_or(100, |s| s.parse().expect("per-class count"));

    let map = ClassMap::default_map();
    let weights = WeightMatrix::identity();
    let start = Instant::now();
    let records = generate_dataset(&DatasetSpec::balanced(per_class, 0.05, 7), &map)?;
    let prepared: Vec<PreparedRecord> = records.iter().map(prepare_record).collect::<Result<_, _>>()?;
    let labels: Vec<_> = prepared.iter().map(|r| r.labels).collect();
    let split = stratified_kfold(&labels, 5, 11)?;
    let train: Vec<&PreparedRecord> = split.training(0).into_iter().map(|i| &prepared[i]).collect();
    let held: Vec<&PreparedRecord> = split.heldout(0).into_iter().map(|i| &prepared[i]).collect();
    println!("{} train / {} held-out records", train.len(), held.len());

    let cfg = TrainConfig {
        epochs,
        lr_drop_epochs: vec![],
        seed: 3,
        ..TrainConfig::default()
    };
    let model_config = ModelConfig::scaled(WidthScale::new(1, 4)?, 16);
    let scoring = Scoring {
        class_map: &map,
        weights: &weights,
    };
    let (model, _) = fit(&model_config, &train, Some(&held), &cfg, &scoring, 0, &mut |r| {
        let val = r.val_score.map(|v| format!("{v:.4}")).unwrap_or_default();
        println!(
            "epoch {:>2}  loss {:.5}  val s_normalized {val}  ({:.0?} elapsed)",
            r.epoch,
            r.loss,
            start.elapsed()
        );
    })?;

    let probs = predict_probabilities(&model, &held, &map)?;
    let truth: Vec<_> = held.iter().map(|r| r.labels).collect();
    let stats = class_stats(&truth, &apply_all(&probs, &ThresholdVector::uniform(0.5)))?;
    let mut f1_sum = 0.0;
    for class in SynthClass::ALL {
        let c = map.class_index(class.abbrev()).expect("class in map");
        let f1 = stats.per_class[c].f1.unwrap_or(0.0);
        println!("{:>6}  F1 {f1:.3}", class.abbrev());
        f1_sum += f1;
    }
    println!("macro-F1 {:.4} in {:.0?}", f1_sum / 6.0, start.elapsed());
    Ok(())
}
