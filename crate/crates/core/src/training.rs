//! Optimisation: Adam with a step learning-rate schedule, the epoch loop with
//! fresh random clipping, multi-label stratified k-fold assignment and the
//! cross-validated training run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::inference::{apply_all, predict_record};
use crate::metrics::{challenge_score, optimize_thresholds, ThresholdVector, WeightMatrix};
use crate::model::{batch_demographics, batch_signals, BoundParams, ForwardOptions, Model, ModelConfig, Network};
use crate::preprocess::{fit_length_train, PreparedRecord};
use crate::record_io::{ClassMap, ClassSet, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdMode {
    /// Tune each fold's thresholds on that fold's held-out records.
    #[default]
    PerFold,
    /// Tune one vector on all out-of-fold predictions and give it to every fold.
    Pooled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// 1-based epochs at whose start the learning rate drops.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub folds: usize,
    pub threshold_mode: ThresholdMode,
    /// Score the held-out fold at uniform 0.5 thresholds after every epoch.
    pub track_validation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr_initial: 0.003,
            lr_drop_epochs: vec![20, 40],
            lr_drop_factor: 10.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 20200,
            folds: 5,
            threshold_mode: ThresholdMode::PerFold,
            track_validation: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if self.folds < 2 {
            return bad("cross-validation needs at least 2 folds");
        }
        if !(self.lr_initial > 0.0 && self.lr_drop_factor > 0.0 && self.adam_eps > 0.0) {
            return bad("learning rate, drop factor and epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if self.lr_drop_epochs.iter().any(|&e| e == 0 || e > self.epochs) {
            return bad("learning-rate drop epochs must lie in [1, epochs]");
        }
        Ok(())
    }
}

/// Learning rate in effect during 1-based `epoch`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let drops = cfg.lr_drop_epochs.iter().filter(|&&e| epoch >= e).count();
    cfg.lr_initial / cfg.lr_drop_factor.powi(drops as i32)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// left untouched.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("gradient for unknown parameter `{name}`")))?;
        if p.len() != g.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for `{name}` has {} values, parameter has {}",
                g.len(),
                p.len()
            )));
        }
        for moments in [&state.m, &state.v] {
            if moments.get(name).is_some_and(|m| m.len() != g.len()) {
                return Err(Error::ShapeMismatch(format!(
                    "optimizer state for `{name}` has the wrong size"
                )));
            }
        }
    }
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above").data_mut();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Fold index per record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub folds: Vec<usize>,
    pub k: usize,
}

impl FoldAssignment {
    pub fn heldout(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }
}

/// Iterative stratification: the label with the fewest unassigned records is
/// handled first, each of its records going to the fold that still wants the
/// most of that label. Ties fall to the fold with the most remaining total
/// capacity, then to a seeded random choice. An annealed swap search then
/// pulls every label count and fold size to within one record of its
/// proportional share, restarting from reseeded greedy passes while any
/// count is still further off.
pub fn stratified_kfold(labels: &[ClassSet], k: usize, seed: u64) -> Result<FoldAssignment> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset("<label list>".into()));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("fold count must be positive".into()));
    }
    let mut best: Option<(i64, Vec<usize>)> = None;
    let restarts = (STRATIFY_STEP_CAP / repair_budget(labels.len()) as u64).clamp(4, 128);
    for attempt in 0..restarts {
        let attempt_seed = if attempt == 0 {
            seed
        } else {
            derive_seed(seed, "stratify", attempt)
        };
        let (excess, folds) = stratify_once(labels, k, attempt_seed);
        if best.as_ref().is_none_or(|(e, _)| excess < *e) {
            best = Some((excess, folds));
        }
        if excess == 0 {
            break;
        }
    }
    let (_, folds) = best.expect("at least one attempt");
    Ok(FoldAssignment { folds, k })
}

/// Total annealing steps spent across restarts, before the 4..=128 clamp.
const STRATIFY_STEP_CAP: u64 = 40_000_000;

fn repair_budget(n: usize) -> usize {
    1000 * n + 200_000
}

fn stratify_once(labels: &[ClassSet], k: usize, seed: u64) -> (i64, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = labels.len();
    let mut total_demand = vec![n as f64 / k as f64; k];
    let mut label_demand: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|c| {
            let count = labels.iter().filter(|s| s.contains(c)).count();
            vec![count as f64 / k as f64; k]
        })
        .collect();
    let mut folds = vec![usize::MAX; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let pick = |scores: &[(f64, f64)], rng: &mut ChaCha8Rng| {
        let best = scores
            .iter()
            .copied()
            .fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |a, b| if b > a { b } else { a });
        let ties: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] == best).collect();
        ties[rng.random_range(0..ties.len())]
    };

    loop {
        let remaining = |c: usize| {
            order
                .iter()
                .filter(|&&i| folds[i] == usize::MAX && labels[i].contains(c))
                .count()
        };
        let next = (0..NUM_CLASSES)
            .map(|c| (remaining(c), c))
            .filter(|&(r, _)| r > 0)
            .min();
        let Some((_, label)) = next else { break };
        for &i in &order {
            if folds[i] != usize::MAX || !labels[i].contains(label) {
                continue;
            }
            let scores: Vec<(f64, f64)> = (0..k).map(|j| (label_demand[label][j], total_demand[j])).collect();
            let j = pick(&scores, &mut rng);
            folds[i] = j;
            total_demand[j] -= 1.0;
            for c in labels[i].iter() {
                label_demand[c][j] -= 1.0;
            }
        }
    }
    for &i in &order {
        if folds[i] == usize::MAX {
            let scores: Vec<(f64, f64)> = (0..k).map(|j| (total_demand[j], 0.0)).collect();
            let j = pick(&scores, &mut rng);
            folds[i] = j;
            total_demand[j] -= 1.0;
        }
    }
    let excess = repair_folds(labels, &mut folds, k, &mut rng);
    (excess, folds)
}

/// Integer counts within one record of the proportional share `t/k`.
fn band(total: usize, k: usize) -> (i64, i64) {
    let lo = total.saturating_sub(k).div_ceil(k);
    let hi = (total + k) / k;
    (lo as i64, hi as i64)
}

fn band_excess(x: i64, total: usize, k: usize) -> i64 {
    let (lo, hi) = band(total, k);
    (lo - x).max(0) + (x - hi).max(0)
}

/// Annealed local search after the greedy pass. A record in a fold whose
/// count for one of its labels is more than one record from proportional is
/// moved to another fold, or swapped with a record there. Moves that do not increase
/// the total out-of-band excess (label counts plus fold sizes) are always
/// taken, worse ones with a cooling probability. The best assignment seen
/// is kept; returns its excess.
fn repair_folds<R: Rng + ?Sized>(labels: &[ClassSet], folds: &mut [usize], k: usize, rng: &mut R) -> i64 {
    let n = labels.len();
    if k < 2 {
        return 0;
    }
    let totals: Vec<usize> = (0..NUM_CLASSES)
        .map(|c| labels.iter().filter(|s| s.contains(c)).count())
        .collect();
    let mut counts = vec![vec![0i64; k]; NUM_CLASSES];
    let mut sizes = vec![0i64; k];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &f) in folds.iter().enumerate() {
        sizes[f] += 1;
        members[f].push(i);
        for c in labels[i].iter() {
            counts[c][f] += 1;
        }
    }
    let excess_of = |counts: &[Vec<i64>], sizes: &[i64]| -> i64 {
        let label: i64 = (0..NUM_CLASSES)
            .map(|c| (0..k).map(|f| band_excess(counts[c][f], totals[c], k)).sum::<i64>())
            .sum();
        label + sizes.iter().map(|&s| band_excess(s, n, k)).sum::<i64>()
    };
    // excess change in fold `f` when `out` leaves and `inn` enters
    let delta = |counts: &[Vec<i64>], sizes: &[i64], f: usize, out: Option<usize>, inn: Option<usize>| -> i64 {
        let mut d = 0;
        let size_change = i64::from(inn.is_some()) - i64::from(out.is_some());
        if size_change != 0 {
            d += band_excess(sizes[f] + size_change, n, k) - band_excess(sizes[f], n, k);
        }
        let touched = out
            .map(|i| labels[i])
            .unwrap_or_default()
            .union(&inn.map(|i| labels[i]).unwrap_or_default());
        for c in touched.iter() {
            let change = out.map_or(0, |i| -i64::from(labels[i].contains(c)))
                + inn.map_or(0, |i| i64::from(labels[i].contains(c)));
            if change != 0 {
                d += band_excess(counts[c][f] + change, totals[c], k) - band_excess(counts[c][f], totals[c], k);
            }
        }
        d
    };
    let mut excess = excess_of(&counts, &sizes);
    let mut best = (excess, folds.to_vec());
    let budget = repair_budget(n);
    for step in 0..budget {
        if excess == 0 {
            break;
        }
        let temperature = 0.6 * (1.0 - step as f64 / budget as f64) + 0.05;
        let offenders: Vec<(usize, usize)> = (0..NUM_CLASSES)
            .flat_map(|c| (0..k).map(move |f| (c, f)))
            .filter(|&(c, f)| band_excess(counts[c][f], totals[c], k) > 0)
            .collect();
        // a size-only violation: pick any record from an oversize or undersize fold
        let (c, f) = match offenders.choose(rng) {
            Some(&cell) => cell,
            None => (
                usize::MAX,
                (0..k).find(|&f| band_excess(sizes[f], n, k) > 0).unwrap_or(0),
            ),
        };
        let too_many = c == usize::MAX || counts[c][f] > band(totals[c], k).1;
        let others: Vec<usize> = (0..k)
            .filter(|&g| g != f)
            .filter(|&g| {
                c == usize::MAX
                    || if too_many {
                        counts[c][g] < band(totals[c], k).1
                    } else {
                        counts[c][g] > band(totals[c], k).0
                    }
            })
            .collect();
        let g = match others.choose(rng) {
            Some(&g) => g,
            None => (f + rng.random_range(1..k)) % k,
        };
        let (from, to, i) = if rng.random_bool(0.3) {
            // unconstrained proposal, lets chains pass through balanced cells
            let i = rng.random_range(0..n);
            (folds[i], (folds[i] + rng.random_range(1..k)) % k, i)
        } else {
            let (from, to) = if too_many { (f, g) } else { (g, f) };
            let candidate = (0..64)
                .filter_map(|_| members[from].choose(rng).copied())
                .find(|&i| c == usize::MAX || labels[i].contains(c));
            let Some(i) = candidate else { continue };
            (from, to, i)
        };
        let partner = if rng.random_bool(0.5) {
            None
        } else {
            (0..16)
                .filter_map(|_| members[to].choose(rng).copied())
                .find(|&j| c == usize::MAX || !labels[j].contains(c))
        };
        let d = delta(&counts, &sizes, from, Some(i), partner) + delta(&counts, &sizes, to, partner, Some(i));
        if d > 0 && rng.random::<f64>() >= (-(d as f64) / temperature).exp() {
            continue;
        }
        let mut relocate = |i: usize, a: usize, b: usize| {
            sizes[a] -= 1;
            sizes[b] += 1;
            for c in labels[i].iter() {
                counts[c][a] -= 1;
                counts[c][b] += 1;
            }
            let pos = members[a].iter().position(|&m| m == i).expect("member");
            members[a].swap_remove(pos);
            members[b].push(i);
            folds[i] = b;
        };
        relocate(i, from, to);
        if let Some(j) = partner {
            relocate(j, to, from);
        }
        excess += d;
        if excess < best.0 {
            best = (excess, folds.to_vec());
        }
    }
    folds.copy_from_slice(&best.1);
    best.0
}

/// Independent stream seed for one purpose within a run.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    let mut z = seed ^ h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One pass over `records` in a fresh shuffled order; returns the
/// record-weighted mean batch loss.
pub fn train_epoch<R: Rng + ?Sized>(
    model: &mut Model,
    adam: &mut AdamState,
    records: &[&PreparedRecord],
    cfg: &TrainConfig,
    rng: &mut R,
    epoch: usize,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("<training split>".into()));
    }
    let lr = lr_schedule(epoch, cfg);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(rng);
    let mut loss_sum = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let signals: Vec<_> = batch
            .iter()
            .map(|&i| fit_length_train(&records[i].signal, rng))
            .collect();
        let demo: Vec<_> = batch.iter().map(|&i| records[i].demographics).collect();
        let targets: Vec<f64> = batch.iter().flat_map(|&i| records[i].labels.to_targets()).collect();

        let mut tape = Tape::low_memory();
        let params = BoundParams::bind(&mut tape, &model.params, true);
        let x = tape.leaf(batch_signals(&signals)?);
        let d = tape.leaf(batch_demographics(&demo)?);
        drop(signals);
        let mut net = Network {
            config: &model.config,
            params: &params,
            running: &mut model.params.running,
            opts: ForwardOptions::train(),
        };
        let out = net.forward(&mut tape, x, d, rng)?;
        let loss = tape.bce_mean(out.logits, &targets)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        tape.backward(loss)?;
        let grads: BTreeMap<String, Vec<f64>> = params
            .iter()
            .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g.to_vec())))
            .collect();
        drop(tape);
        adam_step(&mut model.params.tensors, &grads, adam, lr, cfg)?;
        loss_sum += value * batch.len() as f64;
    }
    Ok(loss_sum / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_score: Option<f64>,
}

pub type TrainHistory = Vec<EpochRecord>;

/// Metric context for held-out scoring.
#[derive(Debug, Clone)]
pub struct Scoring<'a> {
    pub class_map: &'a ClassMap,
    pub weights: &'a WeightMatrix,
}

/// Patch-averaged probabilities for each record, in order.
pub fn predict_probabilities(
    model: &Model,
    records: &[&PreparedRecord],
    class_map: &ClassMap,
) -> Result<Vec<[f64; NUM_CLASSES]>> {
    let models = std::slice::from_ref(model);
    let half = ThresholdVector::uniform(0.5);
    records
        .par_iter()
        .map(|r| predict_record(models, r, &half, class_map).map(|p| p.probabilities))
        .collect()
}

/// Train one freshly initialised model for `cfg.epochs` epochs on `train`,
/// optionally scoring `validation` after each epoch.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model_config: &ModelConfig,
    train: &[&PreparedRecord],
    validation: Option<&[&PreparedRecord]>,
    cfg: &TrainConfig,
    scoring: &Scoring<'_>,
    fold: usize,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init", fold as u64));
    let mut model = Model::new(model_config.clone(), scoring.class_map.identity(), &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "epochs", fold as u64));
    let mut adam = AdamState::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let loss = train_epoch(&mut model, &mut adam, train, cfg, &mut rng, epoch)?;
        let val_score = match validation {
            Some(val) if cfg.track_validation && !val.is_empty() => {
                let probs = predict_probabilities(&model, val, scoring.class_map)?;
                let truth: Vec<ClassSet> = val.iter().map(|r| r.labels).collect();
                let pred = apply_all(&probs, &ThresholdVector::uniform(0.5));
                challenge_score(&truth, &pred, scoring.weights, scoring.class_map.normal_class_index()).ok()
            }
            _ => None,
        };
        let record = EpochRecord {
            fold,
            epoch,
            lr: lr_schedule(epoch, cfg),
            loss,
            val_score,
        };
        observer(&record);
        history.push(record);
    }
    Ok((model, history))
}

/// Held-out predictions of one fold's model.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOut {
    pub record_ids: Vec<String>,
    pub truth: Vec<ClassSet>,
    pub probabilities: Vec<[f64; NUM_CLASSES]>,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub assignment: FoldAssignment,
    pub models: Vec<Model>,
    pub thresholds: Vec<ThresholdVector>,
    pub heldout: Vec<HeldOut>,
    pub history: TrainHistory,
}

/// k-fold cross-validated training: one model per fold, thresholds tuned on
/// held-out predictions.
pub fn train_model(
    records: &[PreparedRecord],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    scoring: &Scoring<'_>,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainRun> {
    cfg.validate()?;
    model_config.validate()?;
    let labels: Vec<ClassSet> = records.iter().map(|r| r.labels).collect();
    let assignment = stratified_kfold(&labels, cfg.folds, derive_seed(cfg.seed, "folds", 0))?;
    let normal = scoring.class_map.normal_class_index();
    let mut run = TrainRun {
        assignment,
        models: Vec::new(),
        thresholds: Vec::new(),
        heldout: Vec::new(),
        history: Vec::new(),
    };
    for fold in 0..cfg.folds {
        let train: Vec<&PreparedRecord> = run.assignment.training(fold).into_iter().map(|i| &records[i]).collect();
        let held: Vec<&PreparedRecord> = run.assignment.heldout(fold).into_iter().map(|i| &records[i]).collect();
        if train.is_empty() || held.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "fold {fold} is empty; use fewer folds or more records"
            )));
        }
        let (model, history) = fit(model_config, &train, Some(&held), cfg, scoring, fold, observer)?;
        let probabilities = predict_probabilities(&model, &held, scoring.class_map)?;
        let truth: Vec<ClassSet> = held.iter().map(|r| r.labels).collect();
        if cfg.threshold_mode == ThresholdMode::PerFold {
            run.thresholds
                .push(optimize_thresholds(&probabilities, &truth, scoring.weights, normal)?.thresholds);
        }
        run.heldout.push(HeldOut {
            record_ids: held.iter().map(|r| r.record_id.clone()).collect(),
            truth,
            probabilities,
        });
        run.models.push(model);
        run.history.extend(history);
    }
    if cfg.threshold_mode == ThresholdMode::Pooled {
        let probs: Vec<_> = run
            .heldout
            .iter()
            .flat_map(|h| h.probabilities.iter().copied())
            .collect();
        let truth: Vec<_> = run.heldout.iter().flat_map(|h| h.truth.iter().copied()).collect();
        let tuned = optimize_thresholds(&probs, &truth, scoring.weights, normal)?.thresholds;
        run.thresholds = vec![tuned; cfg.folds];
    }
    Ok(run)
}

pub fn format_history(history: &[EpochRecord]) -> String {
    let mut out = String::from("fold,epoch,lr,loss,val_score\n");
    for r in history {
        let val = r.val_score.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", r.fold, r.epoch, r.lr, r.loss, val);
    }
    out
}

/// `record_id,truth,<class columns>`; truth is a `|`-joined abbreviation list.
pub fn format_heldout(heldout: &HeldOut, map: &ClassMap) -> String {
    let mut out = format!("record_id,truth,{}\n", map.abbrevs().join(","));
    for ((id, truth), probs) in heldout
        .record_ids
        .iter()
        .zip(&heldout.truth)
        .zip(&heldout.probabilities)
    {
        let labels: Vec<&str> = truth.iter().map(|c| map.abbrev(c)).collect();
        let cells: Vec<String> = probs.iter().map(f64::to_string).collect();
        let _ = writeln!(out, "{id},{},{}", labels.join("|"), cells.join(","));
    }
    out
}

pub fn parse_heldout(text: &str, map: &ClassMap) -> Result<HeldOut> {
    let bad = |msg: String| Error::InvalidConfig(format!("held-out probability file: {msg}"));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let expected = format!("record_id,truth,{}", map.abbrevs().join(","));
    if lines.next().map(str::trim) != Some(expected.as_str()) {
        return Err(bad("header does not match the class map".into()));
    }
    let mut heldout = HeldOut {
        record_ids: Vec::new(),
        truth: Vec::new(),
        probabilities: Vec::new(),
    };
    for line in lines {
        let cells: Vec<&str> = line.trim().split(',').collect();
        if cells.len() != NUM_CLASSES + 2 {
            return Err(bad(format!("row `{}` has {} columns", cells[0], cells.len())));
        }
        let mut truth = ClassSet::empty();
        for abbrev in cells[1].split('|').filter(|s| !s.is_empty()) {
            truth.insert(
                map.class_index(abbrev)
                    .ok_or_else(|| bad(format!("unknown class `{abbrev}`")))?,
            );
        }
        let mut probs = [0.0; NUM_CLASSES];
        for (p, cell) in probs.iter_mut().zip(&cells[2..]) {
            *p = cell.parse().map_err(|_| bad(format!("`{cell}` is not a number")))?;
        }
        heldout.record_ids.push(cells[0].to_string());
        heldout.truth.push(truth);
        heldout.probabilities.push(probs);
    }
    Ok(heldout)
}

/// Writes `fold<i>/model.senet`, `fold<i>/thresholds.csv`,
/// `fold<i>/heldout_probabilities.csv` and `history.csv`.
pub fn write_run(dir: &Path, run: &TrainRun, map: &ClassMap) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (fold, model) in run.models.iter().enumerate() {
        let fold_dir = dir.join(format!("fold{fold}"));
        fs::create_dir_all(&fold_dir)?;
        model.save(&fold_dir.join("model.senet"))?;
        run.thresholds[fold].save(&fold_dir.join("thresholds.csv"), map)?;
        fs::write(
            fold_dir.join("heldout_probabilities.csv"),
            format_heldout(&run.heldout[fold], map),
        )?;
    }
    fs::write(dir.join("history.csv"), format_history(&run.history))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(1, &cfg), 0.003);
        assert_eq!(lr_schedule(19, &cfg), 0.003);
        assert!((lr_schedule(20, &cfg) - 0.0003).abs() < 1e-18);
        assert!((lr_schedule(39, &cfg) - 0.0003).abs() < 1e-18);
        assert!((lr_schedule(40, &cfg) - 0.00003).abs() < 1e-18);
        assert!((lr_schedule(50, &cfg) - 0.00003).abs() < 1e-18);
        for e in 1..50 {
            assert!(lr_schedule(e + 1, &cfg) <= lr_schedule(e, &cfg));
        }
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn scalar_params(value: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(value))])
    }

    #[test]
    fn first_adam_step_is_lr_times_sign() {
        let cfg = TrainConfig::default();
        for g in [0.37, -2.5, 1e-3] {
            let mut params = scalar_params(1.0);
            let mut state = AdamState::default();
            let grads = BTreeMap::from([("w".to_string(), vec![g])]);
            adam_step(&mut params, &grads, &mut state, 0.003, &cfg).unwrap();
            // m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps)
            let expected = 1.0 - 0.003 * g / (g.abs() + 1e-8);
            assert!((params["w"].item() - expected).abs() < 1e-15);
            assert_eq!(state.step, 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = TrainConfig::default();
        let mut params = scalar_params(0.25);
        let mut state = AdamState::default();
        adam_step(
            &mut params,
            &BTreeMap::from([("w".into(), vec![1.0])]),
            &mut state,
            0.01,
            &cfg,
        )
        .unwrap();
        let after_one = params["w"].item();
        let m1 = state.m["w"][0];
        adam_step(
            &mut params,
            &BTreeMap::from([("w".into(), vec![0.0])]),
            &mut state,
            0.0,
            &cfg,
        )
        .unwrap();
        assert_eq!(params["w"].item(), after_one);
        assert_eq!(state.m["w"][0], 0.9 * m1);
        assert!(adam_step(
            &mut params,
            &BTreeMap::from([("w".into(), vec![0.0, 1.0])]),
            &mut state,
            0.01,
            &cfg
        )
        .is_err());
    }

    #[test]
    fn single_class_folds_are_even() {
        let labels = vec![ClassSet::from_indices([3]); 100];
        let a = stratified_kfold(&labels, 5, 1).unwrap();
        for f in 0..5 {
            assert_eq!(a.heldout(f).len(), 20);
        }
        assert_eq!(a, stratified_kfold(&labels, 5, 1).unwrap());
    }

    #[test]
    fn seven_positives_spread() {
        let mut labels = vec![ClassSet::empty(); 40];
        for l in labels.iter_mut().take(7) {
            l.insert(0);
        }
        let a = stratified_kfold(&labels, 5, 9).unwrap();
        for f in 0..5 {
            let pos = a.heldout(f).iter().filter(|&&i| labels[i].contains(0)).count();
            assert!((1..=2).contains(&pos));
            assert_eq!(a.heldout(f).len(), 8);
        }
    }

    #[test]
    fn heldout_file_round_trip() {
        let map = ClassMap::default_map();
        let h = HeldOut {
            record_ids: vec!["A1".into(), "A2".into()],
            truth: vec![ClassSet::from_indices([0, 20]), ClassSet::empty()],
            probabilities: vec![[0.125; NUM_CLASSES], [0.75; NUM_CLASSES]],
        };
        assert_eq!(parse_heldout(&format_heldout(&h, &map), &map).unwrap(), h);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, "init", 0), derive_seed(1, "init", 1));
        assert_ne!(derive_seed(1, "init", 0), derive_seed(1, "epochs", 0));
        assert_eq!(derive_seed(5, "x", 2), derive_seed(5, "x", 2));
    }
}
