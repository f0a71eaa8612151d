//! Fixed-shape model inputs: resampling to 257 Hz, fixing the length at 4096
//! samples and encoding age/sex with missing-value masks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::inference;
use crate::record_io::{ClassSet, EcgRecord, Sex, Signal, NUM_LEADS};

pub const TARGET_RATE_HZ: u32 = 257;
pub const INPUT_LEN: usize = 4096;
pub const DEMOGRAPHIC_DIM: usize = 10;
pub const MAX_AGE: i64 = 130;

/// Linear interpolation onto an endpoint-preserving grid of
/// `round(L * fs_out / fs_in)` samples.
pub fn resample_linear(signal: &Signal, fs_in: u32, fs_out: u32) -> Result<Signal> {
    let len = signal.len();
    if len < 2 {
        return Err(Error::DegenerateSignal(len));
    }
    if fs_in == 0 || fs_out == 0 {
        return Err(Error::InvalidConfig("sampling rates must be positive".into()));
    }
    if fs_in == fs_out {
        return Ok(signal.clone());
    }
    let (l, fi, fo) = (len as u128, u128::from(fs_in), u128::from(fs_out));
    let out_len = ((2 * l * fo + fi) / (2 * fi)).max(1) as usize;

    let mut out = Signal::zeros(signal.leads(), out_len);
    for lead in 0..signal.leads() {
        let src = signal.lead(lead);
        let dst = out.lead_mut(lead);
        if out_len == 1 {
            dst[0] = src[0];
            continue;
        }
        for (j, y) in dst.iter_mut().enumerate() {
            let pos = (j * (len - 1)) as f64 / (out_len - 1) as f64;
            let i0 = (pos.floor() as usize).min(len - 2);
            let frac = pos - i0 as f64;
            *y = src[i0] * (1.0 - frac) + src[i0 + 1] * frac;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMode {
    /// Zero-pad short signals, randomly clip long ones.
    Train,
    /// Split long signals into overlapping patches.
    Eval,
}

#[derive(Debug, Clone)]
pub enum Fitted {
    Window(Signal),
    Patches(Vec<Signal>),
}

impl Fitted {
    pub fn into_signals(self) -> Vec<Signal> {
        match self {
            Fitted::Window(s) => vec![s],
            Fitted::Patches(p) => p,
        }
    }
}

/// Zero-pad at the end or clip a uniformly random 4096-sample window.
pub fn fit_length_train<R: Rng + ?Sized>(signal: &Signal, rng: &mut R) -> Signal {
    let len = signal.len();
    if len <= INPUT_LEN {
        return signal.window(0, INPUT_LEN);
    }
    let offset = rng.random_range(0..=len - INPUT_LEN);
    signal.window(offset, INPUT_LEN)
}

pub fn fit_length<R: Rng + ?Sized>(signal: &Signal, mode: FitMode, rng: &mut R) -> Fitted {
    match mode {
        FitMode::Train => Fitted::Window(fit_length_train(signal, rng)),
        FitMode::Eval => Fitted::Patches(inference::segment_patches(signal, inference::DEFAULT_OVERLAP)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Demographics {
    pub age_years: Option<i64>,
    pub sex: Option<Sex>,
}

/// Layout: `[age/100 clamped, age missing, female, male, sex missing, 0, 0, 0, 0, 0]`.
pub fn encode_demographics(d: &Demographics) -> Result<[f64; DEMOGRAPHIC_DIM]> {
    let mut out = [0.0; DEMOGRAPHIC_DIM];
    match d.age_years {
        Some(age) if !(0..=MAX_AGE).contains(&age) => return Err(Error::InvalidAge(age)),
        Some(age) => out[0] = (age as f64 / 100.0).clamp(0.0, 1.0),
        None => out[1] = 1.0,
    }
    match d.sex {
        Some(Sex::Female) => out[2] = 1.0,
        Some(Sex::Male) => out[3] = 1.0,
        None => out[4] = 1.0,
    }
    Ok(out)
}

/// One network input: a 12x4096 window and its demographic features.
#[derive(Debug, Clone)]
pub struct ModelInput {
    signal: Signal,
    demographics: [f64; DEMOGRAPHIC_DIM],
}

impl ModelInput {
    pub fn new(signal: Signal, demographics: [f64; DEMOGRAPHIC_DIM]) -> Result<Self> {
        if signal.leads() != NUM_LEADS || signal.len() != INPUT_LEN {
            return Err(Error::ShapeMismatch(format!(
                "model input must be {NUM_LEADS}x{INPUT_LEN}, got {}x{}",
                signal.leads(),
                signal.len()
            )));
        }
        if !signal.as_slice().iter().chain(&demographics).all(|v| v.is_finite()) {
            return Err(Error::ShapeMismatch("model input contains non-finite values".into()));
        }
        Ok(Self { signal, demographics })
    }

    pub fn signal(&self) -> &Signal {
        &self.signal
    }

    pub fn demographics(&self) -> &[f64; DEMOGRAPHIC_DIM] {
        &self.demographics
    }
}

/// A record resampled to 257 Hz with encoded demographics, length not yet fixed.
#[derive(Debug, Clone)]
pub struct PreparedRecord {
    pub record_id: String,
    pub signal: Signal,
    pub demographics: [f64; DEMOGRAPHIC_DIM],
    pub labels: ClassSet,
}

pub fn prepare_record(record: &EcgRecord) -> Result<PreparedRecord> {
    let signal = resample_linear(&record.signal, record.meta.sampling_rate_hz, TARGET_RATE_HZ)?;
    let demographics = encode_demographics(&Demographics {
        age_years: record.meta.age_years,
        sex: record.meta.sex,
    })?;
    Ok(PreparedRecord {
        record_id: record.meta.record_id.clone(),
        signal,
        demographics,
        labels: record.labels,
    })
}
