//! Whole-recording classification.
//!
//! Recordings longer than the 4096-sample network input are split into
//! patches overlapping by `O` samples; the patch count is
//! `P = ceil((L - 4096) / (4096 - O)) + 1`, with the final patch shifted back
//! so it ends flush with the signal. Class probabilities are averaged over
//! patches, then over models when several fold checkpoints are combined.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::ThresholdVector;
use crate::model::Model;
use crate::preprocess::{PreparedRecord, INPUT_LEN};
use crate::record_io::{ClassMap, ClassSet, Signal, NUM_CLASSES};

pub const DEFAULT_OVERLAP: usize = 256;

/// Largest number of patches pushed through the network at once.
const PATCH_CHUNK: usize = 8;

pub fn patch_count(len: usize, overlap: usize) -> usize {
    assert!(overlap < INPUT_LEN, "overlap must be shorter than a patch");
    if len <= INPUT_LEN {
        1
    } else {
        (len - INPUT_LEN).div_ceil(INPUT_LEN - overlap) + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPlan {
    pub patch_starts: Vec<usize>,
    pub patch_length: usize,
    pub overlap: usize,
}

impl PatchPlan {
    pub fn new(len: usize, overlap: usize) -> Self {
        let count = patch_count(len, overlap);
        let step = INPUT_LEN - overlap;
        let last = len.saturating_sub(INPUT_LEN);
        let patch_starts = (0..count).map(|p| (p * step).min(last)).collect();
        Self {
            patch_starts,
            patch_length: INPUT_LEN,
            overlap,
        }
    }
}

/// Cut `signal` into 4096-sample patches; short signals give one zero-padded patch.
pub fn segment_patches(signal: &Signal, overlap: usize) -> Vec<Signal> {
    PatchPlan::new(signal.len(), overlap)
        .patch_starts
        .iter()
        .map(|&start| signal.window(start, INPUT_LEN))
        .collect()
}

/// Class `c` is set iff `p[c] >= t[c]`.
pub fn apply_thresholds(probabilities: &[f64; NUM_CLASSES], thresholds: &ThresholdVector) -> ClassSet {
    ClassSet::from_indices((0..NUM_CLASSES).filter(|&c| probabilities[c] >= thresholds.get(c)))
}

pub fn apply_all(probabilities: &[[f64; NUM_CLASSES]], thresholds: &ThresholdVector) -> Vec<ClassSet> {
    probabilities.iter().map(|p| apply_thresholds(p, thresholds)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: [f64; NUM_CLASSES],
    pub binary: ClassSet,
    /// Per-patch probabilities, averaged across models.
    pub per_patch: Vec<[f64; NUM_CLASSES]>,
}

/// Mean of per-patch probabilities for one model.
pub fn patch_probabilities(model: &Model, record: &PreparedRecord) -> Result<Vec<[f64; NUM_CLASSES]>> {
    let patches = segment_patches(&record.signal, DEFAULT_OVERLAP);
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(PATCH_CHUNK) {
        let demographics = vec![record.demographics; chunk.len()];
        out.extend(model.predict_batch(chunk, &demographics)?);
    }
    Ok(out)
}

fn mean_rows(rows: &[[f64; NUM_CLASSES]]) -> [f64; NUM_CLASSES] {
    let mut acc = [0.0; NUM_CLASSES];
    for row in rows {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc.map(|v| v / rows.len() as f64)
}

/// Classify one record (already resampled to 257 Hz) with one model or an
/// equal-weight ensemble.
pub fn predict_record(
    models: &[Model],
    record: &PreparedRecord,
    thresholds: &ThresholdVector,
    class_map: &ClassMap,
) -> Result<Prediction> {
    if models.is_empty() {
        return Err(Error::InvalidConfig("prediction needs at least one model".into()));
    }
    let expected = class_map.identity();
    for model in models {
        if model.class_map_identity != expected {
            return Err(Error::ModelClassMapMismatch {
                expected,
                found: model.class_map_identity.clone(),
            });
        }
    }
    let mut sum = [0.0; NUM_CLASSES];
    let mut per_patch_sum: Vec<[f64; NUM_CLASSES]> = Vec::new();
    for model in models {
        let rows = patch_probabilities(model, record)?;
        let mean = mean_rows(&rows);
        sum.iter_mut().zip(&mean).for_each(|(s, m)| *s += m);
        if per_patch_sum.is_empty() {
            per_patch_sum = vec![[0.0; NUM_CLASSES]; rows.len()];
        }
        for (acc, row) in per_patch_sum.iter_mut().zip(&rows) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
    }
    let m = models.len() as f64;
    let probabilities = sum.map(|v| v / m);
    let per_patch = per_patch_sum.into_iter().map(|row| row.map(|v| v / m)).collect();
    Ok(Prediction {
        binary: apply_thresholds(&probabilities, thresholds),
        probabilities,
        per_patch,
    })
}

/// Three rows: class abbreviations, 0/1 labels, probabilities.
pub fn format_prediction_csv(prediction: &Prediction, class_map: &ClassMap) -> String {
    let abbrevs = class_map.abbrevs().join(",");
    let binary: Vec<String> = (0..NUM_CLASSES)
        .map(|c| u8::from(prediction.binary.contains(c)).to_string())
        .collect();
    let probs: Vec<String> = prediction.probabilities.iter().map(|p| p.to_string()).collect();
    format!("{abbrevs}\n{}\n{}\n", binary.join(","), probs.join(","))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub binary: ClassSet,
    pub probabilities: [f64; NUM_CLASSES],
}

pub fn parse_prediction_csv(text: &str, class_map: &ClassMap) -> Result<PredictionFile> {
    let bad = |msg: &str| Error::InvalidConfig(format!("prediction file: {msg}"));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("missing header"))?
        .split(',')
        .map(str::trim)
        .collect();
    if header != class_map.abbrevs() {
        return Err(bad("class columns do not match the class map"));
    }
    let labels: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("missing label row"))?
        .split(',')
        .collect();
    let probs: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("missing probability row"))?
        .split(',')
        .collect();
    if labels.len() != NUM_CLASSES || probs.len() != NUM_CLASSES {
        return Err(bad("rows must have 24 columns"));
    }
    let mut binary = ClassSet::empty();
    let mut probabilities = [0.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        match labels[c].trim() {
            "1" => binary.insert(c),
            "0" => {}
            other => return Err(bad(&format!("label `{other}` is not 0/1"))),
        }
        probabilities[c] = probs[c].trim().parse().map_err(|_| bad("non-numeric probability"))?;
    }
    Ok(PredictionFile { binary, probabilities })
}

pub fn write_prediction(dir: &Path, record_id: &str, prediction: &Prediction, class_map: &ClassMap) -> Result<()> {
    fs::write(
        dir.join(format!("{record_id}.csv")),
        format_prediction_csv(prediction, class_map),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record_io::NUM_LEADS;
    use proptest::prelude::*;

    #[test]
    fn patch_count_examples() {
        assert_eq!(patch_count(4096, 256), 1);
        assert_eq!(patch_count(1, 256), 1);
        assert_eq!(patch_count(10_000, 256), 3);
        assert_eq!(patch_count(4097, 256), 2);
    }

    #[test]
    fn final_patch_is_clamped() {
        assert_eq!(PatchPlan::new(10_000, 256).patch_starts, vec![0, 3840, 5904]);
        assert_eq!(PatchPlan::new(4000, 256).patch_starts, vec![0]);
    }

    #[test]
    fn short_signal_is_padded() {
        let s = Signal::from_leads(vec![vec![1.0; 4000]; NUM_LEADS]).unwrap();
        let patches = segment_patches(&s, 256);
        assert_eq!(patches.len(), 1);
        assert!(patches[0].lead(0)[..4000].iter().all(|&v| v == 1.0));
        assert!(patches[0].lead(0)[4000..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn thresholds_use_greater_or_equal() {
        let mut p = [0.1; NUM_CLASSES];
        p[0] = 0.6;
        p[1] = 0.4;
        p[2] = 0.5;
        let set = apply_thresholds(&p, &ThresholdVector::uniform(0.5));
        assert!(set.contains(0) && !set.contains(1) && set.contains(2));
        assert_eq!(apply_thresholds(&p, &ThresholdVector::uniform(0.0)).len(), NUM_CLASSES);
    }

    #[test]
    fn prediction_csv_round_trip() {
        let map = ClassMap::default_map();
        let mut probabilities = [0.25; NUM_CLASSES];
        probabilities[3] = 0.875;
        let pred = Prediction {
            probabilities,
            binary: ClassSet::from_indices([3]),
            per_patch: vec![probabilities],
        };
        let text = format_prediction_csv(&pred, &map);
        assert_eq!(text.lines().count(), 3);
        let parsed = parse_prediction_csv(&text, &map).unwrap();
        assert_eq!(parsed.binary, pred.binary);
        assert_eq!(parsed.probabilities, pred.probabilities);
    }

    proptest! {
        #[test]
        fn plan_matches_count_and_covers(len in 1usize..1_000_000) {
            let plan = PatchPlan::new(len, 256);
            prop_assert_eq!(plan.patch_starts.len(), patch_count(len, 256));
            prop_assert_eq!(plan.patch_starts[0], 0);
            let padded = len.max(INPUT_LEN);
            prop_assert!(plan.patch_starts.iter().all(|&s| s + INPUT_LEN <= padded));
            for w in plan.patch_starts.windows(2) {
                // consecutive patches overlap or touch, so the union has no gaps
                prop_assert!(w[1] > w[0] && w[1] <= w[0] + INPUT_LEN);
            }
            let n = plan.patch_starts.len();
            if n > 2 {
                for w in plan.patch_starts[..n - 1].windows(2) {
                    prop_assert_eq!(w[1] - w[0], INPUT_LEN - 256);
                }
            }
            if len > INPUT_LEN {
                prop_assert_eq!(plan.patch_starts[n - 1] + INPUT_LEN, len);
            }
        }
    }
}
