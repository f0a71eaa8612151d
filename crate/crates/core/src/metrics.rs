//! Evaluation: the normalised challenge score, per-class confusion
//! statistics, two-phase threshold search and Cohen's kappa.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::inference::apply_thresholds;
use crate::record_io::{ClassMap, ClassSet, NUM_CLASSES};

/// Reward for predicting class `j` when class `i` is true.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    values: [[f64; NUM_CLASSES]; NUM_CLASSES],
}

impl WeightMatrix {
    /// Exact matches only: every off-diagonal reward is zero.
    pub fn identity() -> Self {
        let mut values = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        for (i, row) in values.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { values }
    }

    pub fn new(values: [[f64; NUM_CLASSES]; NUM_CLASSES]) -> Result<Self> {
        for (i, row) in values.iter().enumerate() {
            if row[i] != 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "weight matrix diagonal entry {i} is {}, not 1",
                    row[i]
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "weight matrix row {i} has a non-finite entry"
                )));
            }
        }
        Ok(Self { values })
    }

    /// Header row of class abbreviations (optionally led by an empty cell),
    /// then 24 rows of 24 decimals, each optionally led by its class label.
    pub fn parse(text: &str, map: &ClassMap) -> Result<Self> {
        let bad = |msg: String| Error::InvalidConfig(format!("weight matrix: {msg}"));
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("empty file".into()))?
            .split(',')
            .map(str::trim)
            .collect();
        let labelled_rows = header.len() == NUM_CLASSES + 1;
        let columns = if labelled_rows { &header[1..] } else { &header[..] };
        if columns != map.abbrevs().as_slice() {
            return Err(bad("header does not match the class map order".into()));
        }
        let mut values = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            if i >= NUM_CLASSES {
                return Err(bad("more than 24 rows".into()));
            }
            let mut cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if labelled_rows {
                if cells.first() != Some(&map.abbrev(i)) {
                    return Err(bad(format!("row {} is not labelled {}", i + 1, map.abbrev(i))));
                }
                cells.remove(0);
            }
            if cells.len() != NUM_CLASSES {
                return Err(bad(format!("row {} has {} values", i + 1, cells.len())));
            }
            for (j, cell) in cells.iter().enumerate() {
                values[i][j] = cell.parse().map_err(|_| bad(format!("`{cell}` is not a number")))?;
            }
            rows += 1;
        }
        if rows != NUM_CLASSES {
            return Err(bad(format!("expected 24 rows, found {rows}")));
        }
        Self::new(values)
    }

    pub fn load(path: &Path, map: &ClassMap) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::parse(&text, map).map_err(|e| e.in_file(path))
    }

    pub fn to_csv(&self, map: &ClassMap) -> String {
        let mut out = map.abbrevs().join(",");
        out.push('\n');
        for row in &self.values {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn get(&self, truth: usize, pred: usize) -> f64 {
        self.values[truth][pred]
    }
}

/// One decision threshold per class, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdVector([f64; NUM_CLASSES]);

impl ThresholdVector {
    pub fn uniform(t: f64) -> Self {
        Self([t; NUM_CLASSES])
    }

    pub fn new(values: [f64; NUM_CLASSES]) -> Result<Self> {
        if let Some(c) = values.iter().position(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidConfig(format!(
                "threshold {} for class {c} is outside [0, 1]",
                values[c]
            )));
        }
        Ok(Self(values))
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn set(&mut self, class: usize, t: f64) {
        assert!((0.0..=1.0).contains(&t), "threshold {t} outside [0, 1]");
        self.0[class] = t;
    }

    pub fn as_array(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }

    /// 24 lines of `class,threshold`.
    pub fn to_csv(&self, map: &ClassMap) -> String {
        (0..NUM_CLASSES).fold(String::new(), |mut out, c| {
            let _ = writeln!(out, "{},{}", map.abbrev(c), self.0[c]);
            out
        })
    }

    pub fn parse(text: &str, map: &ClassMap) -> Result<Self> {
        let bad = |msg: String| Error::InvalidConfig(format!("threshold file: {msg}"));
        let mut values = [f64::NAN; NUM_CLASSES];
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (name, value) = line
                .split_once(',')
                .ok_or_else(|| bad(format!("line `{line}` is not `class,threshold`")))?;
            if name.trim() == "class" {
                continue;
            }
            let c = map
                .class_index(name.trim())
                .ok_or_else(|| bad(format!("unknown class `{name}`")))?;
            values[c] = value
                .trim()
                .parse()
                .map_err(|_| bad(format!("`{value}` is not a number")))?;
        }
        if let Some(c) = values.iter().position(|v| v.is_nan()) {
            return Err(bad(format!("no threshold for {}", map.abbrev(c))));
        }
        Self::new(values)
    }

    pub fn load(path: &Path, map: &ClassMap) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::parse(&text, map).map_err(|e| e.in_file(path))
    }

    pub fn save(&self, path: &Path, map: &ClassMap) -> Result<()> {
        fs::write(path, self.to_csv(map))?;
        Ok(())
    }
}

/// Multi-label confusion weights: each record spreads `|truth|·|pred|/n`
/// over its (true, predicted) pairs, with `n = max(1, |truth ∪ pred|)`.
pub fn confusion_weights(truth: &[ClassSet], pred: &[ClassSet]) -> Result<[[f64; NUM_CLASSES]; NUM_CLASSES]> {
    check_lengths(truth, pred)?;
    let mut a = [[0.0; NUM_CLASSES]; NUM_CLASSES];
    for (t, p) in truth.iter().zip(pred) {
        let n = t.union(p).len().max(1) as f64;
        for i in t.iter() {
            for j in p.iter() {
                a[i][j] += 1.0 / n;
            }
        }
    }
    Ok(a)
}

fn check_lengths(truth: &[ClassSet], pred: &[ClassSet]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    Ok(())
}

/// `Σ W ∘ A`, accumulated record by record.
fn weighted_sum<'a>(pairs: impl Iterator<Item = (&'a ClassSet, &'a ClassSet)>, w: &WeightMatrix) -> f64 {
    pairs
        .map(|(t, p)| {
            let n = t.union(p).len().max(1) as f64;
            let raw: f64 = t.iter().map(|i| p.iter().map(|j| w.get(i, j)).sum::<f64>()).sum();
            raw / n
        })
        .sum()
}

/// Normalisation constants for one fixed truth list.
struct ScoreBasis<'a> {
    truth: &'a [ClassSet],
    weights: &'a WeightMatrix,
    inactive: f64,
    span: f64,
}

impl<'a> ScoreBasis<'a> {
    fn new(truth: &'a [ClassSet], weights: &'a WeightMatrix, normal_index: usize) -> Result<Self> {
        let correct = weighted_sum(truth.iter().zip(truth), weights);
        let normal = ClassSet::from_indices([normal_index]);
        let inactive = weighted_sum(truth.iter().map(|t| (t, &normal)), weights);
        let span = correct - inactive;
        if span == 0.0 {
            return Err(Error::DegenerateNormalization);
        }
        Ok(Self {
            truth,
            weights,
            inactive,
            span,
        })
    }

    fn score(&self, pred: &[ClassSet]) -> f64 {
        (weighted_sum(self.truth.iter().zip(pred), self.weights) - self.inactive) / self.span
    }
}

/// `(s_obs − s_inactive) / (s_correct − s_inactive)`.
pub fn challenge_score(
    truth: &[ClassSet],
    pred: &[ClassSet],
    weights: &WeightMatrix,
    normal_index: usize,
) -> Result<f64> {
    check_lengths(truth, pred)?;
    Ok(ScoreBasis::new(truth, weights, normal_index)?.score(pred))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    /// `None` when the ratio's denominator is zero.
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsReport {
    pub per_class: Vec<ClassStats>,
    pub macro_sensitivity: Option<f64>,
    pub macro_specificity: Option<f64>,
    pub macro_f1: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub fn class_stats(truth: &[ClassSet], pred: &[ClassSet]) -> Result<StatsReport> {
    check_lengths(truth, pred)?;
    let per_class: Vec<ClassStats> = (0..NUM_CLASSES)
        .map(|c| {
            let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
            for (t, p) in truth.iter().zip(pred) {
                match (t.contains(c), p.contains(c)) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
            ClassStats {
                tp,
                fp,
                fn_,
                tn,
                sensitivity: ratio(tp, tp + fn_),
                specificity: ratio(tn, tn + fp),
                f1: ratio(2 * tp, 2 * tp + fp + fn_),
            }
        })
        .collect();
    Ok(StatsReport {
        macro_sensitivity: mean_present(per_class.iter().map(|s| s.sensitivity)),
        macro_specificity: mean_present(per_class.iter().map(|s| s.specificity)),
        macro_f1: mean_present(per_class.iter().map(|s| s.f1)),
        per_class,
    })
}

impl StatsReport {
    /// Per-class CSV; absent ratios are left as empty cells.
    pub fn to_csv(&self, map: &ClassMap) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("class,tp,fp,fn,tn,sensitivity,specificity,f1\n");
        for (c, s) in self.per_class.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                map.abbrev(c),
                s.tp,
                s.fp,
                s.fn_,
                s.tn,
                cell(s.sensitivity),
                cell(s.specificity),
                cell(s.f1)
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSearch {
    pub thresholds: ThresholdVector,
    /// Best uniform threshold from the coarse phase.
    pub global: f64,
    pub score: f64,
}

/// Coarse uniform sweep over `{0.0, 0.1, …, 1.0}`, then one pass over the
/// classes in index order refining each on `{0.00, 0.01, …, 1.00}` with the
/// other thresholds held fixed.
pub fn optimize_thresholds(
    probabilities: &[[f64; NUM_CLASSES]],
    truth: &[ClassSet],
    weights: &WeightMatrix,
    normal_index: usize,
) -> Result<ThresholdSearch> {
    if probabilities.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            actual: probabilities.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidConfig(
            "threshold search needs at least one record".into(),
        ));
    }
    let basis = ScoreBasis::new(truth, weights, normal_index)?;
    let mut preds: Vec<ClassSet> = vec![ClassSet::empty(); truth.len()];
    let evaluate = |t: &ThresholdVector, preds: &mut Vec<ClassSet>| {
        for (p, probs) in preds.iter_mut().zip(probabilities) {
            *p = apply_thresholds(probs, t);
        }
        basis.score(preds)
    };

    let (mut global, mut best) = (0.0, f64::NEG_INFINITY);
    for i in 0..=10 {
        let t = i as f64 / 10.0;
        let s = evaluate(&ThresholdVector::uniform(t), &mut preds);
        if s > best {
            (global, best) = (t, s);
        }
    }

    let mut thresholds = ThresholdVector::uniform(global);
    for c in 0..NUM_CLASSES {
        let mut chosen = thresholds.get(c);
        let mut chosen_score = evaluate(&thresholds, &mut preds);
        for j in 0..=100 {
            let t = j as f64 / 100.0;
            let mut trial = thresholds;
            trial.set(c, t);
            let s = evaluate(&trial, &mut preds);
            let closer = (t - global).abs() < (chosen - global).abs();
            let tie_wins = (t - global).abs() == (chosen - global).abs() && t < chosen;
            if s > chosen_score || (s == chosen_score && (closer || tie_wins)) {
                (chosen, chosen_score) = (t, s);
            }
        }
        thresholds.set(c, chosen);
        best = chosen_score;
    }
    Ok(ThresholdSearch {
        thresholds,
        global,
        score: best,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rating {
    Positive,
    Negative,
    Unsure,
}

impl Rating {
    fn index(self) -> usize {
        match self {
            Rating::Positive => 0,
            Rating::Negative => 1,
            Rating::Unsure => 2,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pos" | "positive" | "1" => Some(Rating::Positive),
            "neg" | "negative" | "0" => Some(Rating::Negative),
            "unsure" | "?" => Some(Rating::Unsure),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaterSeries(Vec<Rating>);

impl RaterSeries {
    pub fn new(ratings: Vec<Rating>) -> Result<Self> {
        if ratings.is_empty() {
            return Err(Error::InvalidConfig("rater series is empty".into()));
        }
        Ok(Self(ratings))
    }

    pub fn ratings(&self) -> &[Rating] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KappaResult {
    pub kappa: f64,
    pub n_used: usize,
    /// `table[a][b]` counts rater-1 category `a` against rater-2 category `b`,
    /// indexed positive, negative, unsure.
    pub table: [[usize; 3]; 3],
}

pub fn cohens_kappa(r1: &RaterSeries, r2: &RaterSeries, exclude_unsure: bool) -> Result<KappaResult> {
    if r1.len() != r2.len() {
        return Err(Error::LengthMismatch {
            expected: r1.len(),
            actual: r2.len(),
        });
    }
    let mut table = [[0usize; 3]; 3];
    for (&a, &b) in r1.ratings().iter().zip(r2.ratings()) {
        if exclude_unsure && (a == Rating::Unsure || b == Rating::Unsure) {
            continue;
        }
        table[a.index()][b.index()] += 1;
    }
    let n_used: usize = table.iter().flatten().sum();
    if n_used == 0 {
        return Err(Error::NoDecisiveExamples);
    }
    let n = n_used as f64;
    let p_o = (0..3).map(|k| table[k][k]).sum::<usize>() as f64 / n;
    let p_e: f64 = (0..3)
        .map(|k| {
            let row: usize = table[k].iter().sum();
            let col: usize = table.iter().map(|r| r[k]).sum();
            (row as f64 / n) * (col as f64 / n)
        })
        .sum();
    if p_e >= 1.0 {
        return Err(Error::DegenerateMarginals);
    }
    Ok(KappaResult {
        kappa: (p_o - p_e) / (1.0 - p_e),
        n_used,
        table,
    })
}

/// `example_id,rater1,rater2` rows with `pos`, `neg` or `unsure`; a header
/// row is skipped.
pub fn parse_rater_csv(text: &str) -> Result<(RaterSeries, RaterSeries)> {
    let bad = |line: usize, msg: &str| Error::InvalidConfig(format!("rater file line {line}: {msg}"));
    let (mut r1, mut r2) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 3 {
            return Err(bad(i + 1, "expected 3 columns"));
        }
        match (Rating::parse(cells[1]), Rating::parse(cells[2])) {
            (Some(a), Some(b)) => {
                r1.push(a);
                r2.push(b);
            }
            _ if i == 0 => continue,
            _ => return Err(bad(i + 1, "ratings must be pos, neg or unsure")),
        }
    }
    Ok((RaterSeries::new(r1)?, RaterSeries::new(r2)?))
}
