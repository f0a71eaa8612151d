//! Labelled synthetic 12-lead ECGs.
//!
//! Each beat is a sum of three Gaussians (P, R, T). In the limb leads the R
//! amplitude follows `cos(axis − lead angle)` so the frontal QRS axis sets the
//! sign pattern across I, II and III; P and T waves use a fixed 60° axis.
//! Precordial leads carry a fixed template with no label information.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::record_io::{write_record, ClassMap, ClassSet, EcgRecord, RecordMeta, Sex, Signal, NUM_LEADS};
use crate::training::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rhythm {
    Sinus,
    AFib,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub heart_rate_bpm: f64,
    /// Frontal QRS axis in (−180, 180].
    pub qrs_axis_degrees: f64,
    pub rhythm: Rhythm,
    pub noise_std_mv: f64,
    pub duration_s: f64,
    pub sampling_rate_hz: u32,
    pub seed: u64,
    pub age_years: Option<i64>,
    pub sex: Option<Sex>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            heart_rate_bpm: 75.0,
            qrs_axis_degrees: 45.0,
            rhythm: Rhythm::Sinus,
            noise_std_mv: 0.0,
            duration_s: 10.0,
            sampling_rate_hz: 500,
            seed: 0,
            age_years: None,
            sex: None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if !(self.heart_rate_bpm.is_finite() && self.heart_rate_bpm > 0.0) {
            return bad(format!("heart rate {} must be positive", self.heart_rate_bpm));
        }
        if !(self.qrs_axis_degrees > -180.0 && self.qrs_axis_degrees <= 180.0) {
            return bad(format!("QRS axis {} is outside (-180, 180]", self.qrs_axis_degrees));
        }
        if !(self.noise_std_mv.is_finite() && self.noise_std_mv >= 0.0) {
            return bad("noise level must be non-negative".into());
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) || self.sampling_rate_hz == 0 {
            return bad("duration and sampling rate must be positive".into());
        }
        if self.num_samples() < 2 {
            return bad("a record needs at least 2 samples".into());
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sampling_rate_hz as f64).round() as usize
    }
}

/// The six classes this generator can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SynthClass {
    Snr,
    Lad,
    Rad,
    Sb,
    STach,
    Af,
}

impl SynthClass {
    pub const ALL: [SynthClass; 6] = [
        SynthClass::Snr,
        SynthClass::Lad,
        SynthClass::Rad,
        SynthClass::Sb,
        SynthClass::STach,
        SynthClass::Af,
    ];

    pub fn abbrev(self) -> &'static str {
        match self {
            SynthClass::Snr => "SNR",
            SynthClass::Lad => "LAD",
            SynthClass::Rad => "RAD",
            SynthClass::Sb => "SB",
            SynthClass::STach => "STach",
            SynthClass::Af => "AF",
        }
    }

    pub fn from_abbrev(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.abbrev().eq_ignore_ascii_case(s))
    }

    /// Axis and rate intervals sampled for this class, 5° / 5 bpm inside
    /// the label boundaries.
    pub fn region(self) -> Region {
        let normal_axis = (-25.0, 85.0);
        let normal_rate = (65.0, 95.0);
        let (axis, rate, rhythm) = match self {
            SynthClass::Snr => (normal_axis, normal_rate, Rhythm::Sinus),
            SynthClass::Lad => ((-85.0, -35.0), normal_rate, Rhythm::Sinus),
            SynthClass::Rad => ((95.0, 175.0), normal_rate, Rhythm::Sinus),
            SynthClass::Sb => (normal_axis, (40.0, 55.0), Rhythm::Sinus),
            SynthClass::STach => (normal_axis, (105.0, 150.0), Rhythm::Sinus),
            SynthClass::Af => (normal_axis, normal_rate, Rhythm::AFib),
        };
        Region { axis, rate, rhythm }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub axis: (f64, f64),
    pub rate: (f64, f64),
    pub rhythm: Rhythm,
}

/// Labels implied by a spec, independent of the noise draw.
pub fn label_rule(spec: &SynthSpec) -> Vec<SynthClass> {
    let (axis, rate) = (spec.qrs_axis_degrees, spec.heart_rate_bpm);
    let sinus = spec.rhythm == Rhythm::Sinus;
    let mut out = Vec::new();
    if sinus && (60.0..=100.0).contains(&rate) && (-30.0..=90.0).contains(&axis) {
        out.push(SynthClass::Snr);
    }
    if axis > -90.0 && axis < -30.0 {
        out.push(SynthClass::Lad);
    }
    if axis > 90.0 && axis <= 180.0 {
        out.push(SynthClass::Rad);
    }
    if sinus && rate < 60.0 {
        out.push(SynthClass::Sb);
    }
    if sinus && rate > 100.0 {
        out.push(SynthClass::STach);
    }
    if !sinus {
        out.push(SynthClass::Af);
    }
    out
}

const LIMB_ANGLES: [f64; 6] = [0.0, 60.0, 120.0, -150.0, -30.0, 90.0];
const PT_AXIS: f64 = 60.0;
/// (R, P, T) amplitudes in mV for V1..V6.
const PRECORDIAL: [(f64, f64, f64); 6] = [
    (-0.8, 0.08, -0.1),
    (-0.4, 0.1, 0.2),
    (0.3, 0.1, 0.3),
    (0.9, 0.12, 0.35),
    (1.0, 0.12, 0.3),
    (0.8, 0.1, 0.25),
];
const R_AMP: f64 = 1.0;
const P_AMP: f64 = 0.15;
const T_AMP: f64 = 0.3;
const P_OFFSET: f64 = -0.16;
const T_OFFSET: f64 = 0.28;
const R_SIGMA: f64 = 0.012;
const P_SIGMA: f64 = 0.022;
const T_SIGMA: f64 = 0.045;

/// Largest absolute noiseless sample value any lead can reach.
pub const TEMPLATE_PEAK_MV: f64 = R_AMP + P_AMP + T_AMP;

/// Per-lead (R, P, T) amplitudes.
fn lead_amplitudes(axis_degrees: f64) -> [(f64, f64, f64); NUM_LEADS] {
    let mut out = [(0.0, 0.0, 0.0); NUM_LEADS];
    for (lead, &angle) in LIMB_ANGLES.iter().enumerate() {
        let r = R_AMP * (axis_degrees - angle).to_radians().cos();
        let pt = (PT_AXIS - angle).to_radians().cos();
        out[lead] = (r, P_AMP * pt, T_AMP * pt);
    }
    out[6..].copy_from_slice(&PRECORDIAL);
    out
}

fn gaussian(dt: f64, sigma: f64) -> f64 {
    (-0.5 * (dt / sigma).powi(2)).exp()
}

/// A record plus the R-peak times (seconds) used to build it.
#[derive(Debug, Clone)]
pub struct SynthRecord {
    pub record: EcgRecord,
    pub beat_times: Vec<f64>,
}

pub fn generate_record(spec: &SynthSpec, record_id: &str, map: &ClassMap) -> Result<EcgRecord> {
    generate_with_beats(spec, record_id, map).map(|s| s.record)
}

pub fn generate_with_beats(spec: &SynthSpec, record_id: &str, map: &ClassMap) -> Result<SynthRecord> {
    spec.validate()?;
    let classes = label_rule(spec);
    if classes.is_empty() {
        return Err(Error::InvalidSpec(format!(
            "axis {} at {} bpm matches no synthesizable class",
            spec.qrs_axis_degrees, spec.heart_rate_bpm
        )));
    }
    let mut labels = ClassSet::empty();
    for c in &classes {
        let idx = map
            .class_index(c.abbrev())
            .ok_or_else(|| Error::InvalidSpec(format!("class map has no {}", c.abbrev())))?;
        labels.insert(idx);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rr = 60.0 / spec.heart_rate_bpm;
    let duration = spec.duration_s;
    let mut beat_times = Vec::new();
    let mut t = rng.random_range(0.0..rr) - rr;
    while t < duration + rr {
        beat_times.push(t);
        t += match spec.rhythm {
            Rhythm::Sinus => rr,
            Rhythm::AFib => rr * rng.random_range(0.8..=1.2),
        };
    }

    let fs = spec.sampling_rate_hz as f64;
    let n = spec.num_samples();
    let amps = lead_amplitudes(spec.qrs_axis_degrees);
    let with_p = spec.rhythm == Rhythm::Sinus;
    let mut signal = Signal::zeros(NUM_LEADS, n);
    // only beats within a few widths of a sample contribute measurably
    let reach = 0.5;
    let mut first = 0;
    for i in 0..n {
        let ts = i as f64 / fs;
        while first < beat_times.len() && beat_times[first] < ts - reach {
            first += 1;
        }
        let (mut r, mut p, mut tw) = (0.0, 0.0, 0.0);
        for &b in beat_times[first..].iter().take_while(|&&b| b <= ts + reach) {
            r += gaussian(ts - b, R_SIGMA);
            if with_p {
                p += gaussian(ts - (b + P_OFFSET), P_SIGMA);
            }
            tw += gaussian(ts - (b + T_OFFSET), T_SIGMA);
        }
        for (lead, &(ar, ap, at)) in amps.iter().enumerate() {
            signal.lead_mut(lead)[i] = ar * r + ap * p + at * tw;
        }
    }
    if spec.noise_std_mv > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std_mv).expect("validated noise level");
        for lead in 0..NUM_LEADS {
            for v in signal.lead_mut(lead) {
                *v += noise.sample(&mut rng);
            }
        }
    }

    let mut meta = RecordMeta::new(record_id, spec.sampling_rate_hz, n);
    meta.age_years = spec.age_years;
    meta.sex = spec.sex;
    meta.dx_codes = labels.iter().map(|c| map.primary_code(c).to_string()).collect();
    let beat_times = beat_times
        .into_iter()
        .filter(|&b| (0.0..duration).contains(&b))
        .collect();
    Ok(SynthRecord {
        record: EcgRecord { meta, signal, labels },
        beat_times,
    })
}

/// Dataset request: how many records of each class, at what noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub counts: Vec<(SynthClass, usize)>,
    pub noise_std_mv: f64,
    pub duration_s: f64,
    pub sampling_rate_hz: u32,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn balanced(per_class: usize, noise_std_mv: f64, seed: u64) -> Self {
        Self {
            counts: SynthClass::ALL.iter().map(|&c| (c, per_class)).collect(),
            noise_std_mv,
            duration_s: 10.0,
            sampling_rate_hz: 500,
            seed,
        }
    }
}

/// Draw a spec uniformly inside `class`'s region.
pub fn sample_spec<R: Rng + ?Sized>(class: SynthClass, base: &DatasetSpec, rng: &mut R) -> SynthSpec {
    let region = class.region();
    SynthSpec {
        heart_rate_bpm: rng.random_range(region.rate.0..=region.rate.1),
        qrs_axis_degrees: rng.random_range(region.axis.0..=region.axis.1),
        rhythm: region.rhythm,
        noise_std_mv: base.noise_std_mv,
        duration_s: base.duration_s,
        sampling_rate_hz: base.sampling_rate_hz,
        seed: rng.random(),
        age_years: Some(rng.random_range(18..=90)),
        sex: Some(if rng.random_bool(0.5) { Sex::Female } else { Sex::Male }),
    }
}

/// Records with ids `S00001…`, returned in a seeded shuffled order.
pub fn generate_dataset(spec: &DatasetSpec, map: &ClassMap) -> Result<Vec<EcgRecord>> {
    let classes: Vec<SynthClass> = spec
        .counts
        .iter()
        .flat_map(|&(c, n)| std::iter::repeat_n(c, n))
        .collect();
    let mut records = classes
        .par_iter()
        .enumerate()
        .map(|(i, &class)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth", i as u64));
            let s = sample_spec(class, spec, &mut rng);
            generate_record(&s, &format!("S{:05}", i + 1), map)
        })
        .collect::<Result<Vec<_>>>()?;
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "shuffle", 0)));
    Ok(records)
}

pub fn write_dataset(dir: &Path, records: &[EcgRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).in_file(dir))?;
    records.par_iter().try_for_each(|r| write_record(r, dir))
}
