//! ECG record ingestion.
//!
//! A record is a pair of files sharing a stem: a WFDB-flavoured text header
//! (`<stem>.hea`) and a little-endian 16-bit signal file (`<stem>.dat`) stored
//! lead-major. The header layout is
//!
//! ```text
//! <record_id> <num_leads> <rate_hz> <num_samples>
//! <gain>/mV <baseline> <lead_name>        (12 lines)
//! #Age: <int|NaN>
//! #Sex: <Female|Male|NaN>
//! #Dx: <code>[,<code>...]
//! ```
//!
//! Diagnosis codes are mapped onto the 24 scored classes through a [`ClassMap`],
//! which lets several codes stand for one class (e.g. the two right bundle
//! branch block codes).

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const NUM_LEADS: usize = 12;
pub const NUM_CLASSES: usize = 24;

pub const LEAD_NAMES: [&str; NUM_LEADS] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

/// Multi-lead sample matrix, lead-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    leads: usize,
    len: usize,
    data: Vec<f64>,
}

impl Signal {
    pub fn zeros(leads: usize, len: usize) -> Self {
        Self {
            leads,
            len,
            data: vec![0.0; leads * len],
        }
    }

    pub fn from_vec(leads: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != leads * len {
            return Err(Error::LengthMismatch {
                expected: leads * len,
                actual: data.len(),
            });
        }
        Ok(Self { leads, len, data })
    }

    pub fn from_leads(rows: Vec<Vec<f64>>) -> Result<Self> {
        let leads = rows.len();
        let len = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(leads * len);
        for row in rows {
            if row.len() != len {
                return Err(Error::LengthMismatch {
                    expected: len,
                    actual: row.len(),
                });
            }
            data.extend(row);
        }
        Ok(Self { leads, len, data })
    }

    pub fn leads(&self) -> usize {
        self.leads
    }

    /// Samples per lead.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn lead(&self, i: usize) -> &[f64] {
        &self.data[i * self.len..(i + 1) * self.len]
    }

    pub fn lead_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.len..(i + 1) * self.len]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Copy of columns `start..start + width`, zero-filled past the end.
    pub fn window(&self, start: usize, width: usize) -> Signal {
        let mut out = Signal::zeros(self.leads, width);
        let end = (start + width).min(self.len);
        if start < end {
            for lead in 0..self.leads {
                out.lead_mut(lead)[..end - start].copy_from_slice(&self.lead(lead)[start..end]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sex {
    Female,
    Male,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordMeta {
    pub record_id: String,
    pub num_leads: usize,
    pub sampling_rate_hz: u32,
    pub num_samples: usize,
    /// Analog-to-digital units per millivolt.
    pub gains: [f64; NUM_LEADS],
    pub baselines: [i32; NUM_LEADS],
    pub lead_names: [String; NUM_LEADS],
    pub age_years: Option<i64>,
    pub sex: Option<Sex>,
    pub dx_codes: Vec<String>,
}

impl RecordMeta {
    /// Metadata with unit-ish defaults: gain 1000/mV, zero baseline, standard lead names.
    pub fn new(record_id: impl Into<String>, sampling_rate_hz: u32, num_samples: usize) -> Self {
        Self {
            record_id: record_id.into(),
            num_leads: NUM_LEADS,
            sampling_rate_hz,
            num_samples,
            gains: [1000.0; NUM_LEADS],
            baselines: [0; NUM_LEADS],
            lead_names: LEAD_NAMES.map(String::from),
            age_years: None,
            sex: None,
            dx_codes: Vec::new(),
        }
    }
}

/// Membership over the 24 scored classes, in class-map order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ClassSet([bool; NUM_CLASSES]);

impl ClassSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut set = Self::empty();
        for i in indices {
            set.insert(i);
        }
        set
    }

    pub fn insert(&mut self, class: usize) {
        self.0[class] = true;
    }

    pub fn remove(&mut self, class: usize) {
        self.0[class] = false;
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0[class]
    }

    pub fn len(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..NUM_CLASSES).filter(move |&i| self.0[i])
    }

    pub fn union(&self, other: &ClassSet) -> ClassSet {
        let mut out = *self;
        for i in other.iter() {
            out.insert(i);
        }
        out
    }

    pub fn as_array(&self) -> &[bool; NUM_CLASSES] {
        &self.0
    }

    /// 0/1 encoding, used as training targets.
    pub fn to_targets(&self) -> [f64; NUM_CLASSES] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }
}

impl fmt::Debug for ClassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub meta: RecordMeta,
    pub signal: Signal,
    pub labels: ClassSet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassEntry {
    pub abbrev: String,
    pub codes: Vec<String>,
    pub scored: bool,
}

/// Diagnosis-code to class mapping.
#[derive(Debug, Clone)]
pub struct ClassMap {
    entries: Vec<ClassEntry>,
    /// Position of each scored entry in `entries`, by class index.
    scored: Vec<usize>,
    by_code: HashMap<String, usize>,
    normal_class_index: usize,
}

const DEFAULT_CLASS_MAP: &str = "\
IAVB,270492004,1
AF,164889003,1
AFL,164890007,1
Brady,426627000,1
CRBBB,713427006|59118001,1
IRBBB,713426002,1
LAnFB,445118002,1
LAD,39732003,1
LBBB,164909002,1
LQRSV,251146004,1
NSIVCB,698252002,1
PR,10370003,1
PAC,284470004|63593006,1
PVC,427172004|17338001,1
LPR,164947007,1
LQT,111975006,1
QAb,164917005,1
RAD,47665007,1
SA,427393009,1
SB,426177001,1
SNR,426783006,1
STach,427084000,1
TAb,164934002,1
TInv,59931005,1
LVH,164873001,0
STD,429622005,0
STE,164931005,0
";

impl ClassMap {
    pub const NORMAL_ABBREV: &'static str = "SNR";

    /// The 24 scored challenge classes, with RBBB, SVPB and VPB folded into
    /// CRBBB, PAC and PVC, plus a few unscored codes.
    pub fn default_map() -> Self {
        Self::parse(DEFAULT_CLASS_MAP).expect("built-in class map is valid")
    }

    pub fn default_text() -> &'static str {
        DEFAULT_CLASS_MAP
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| e.in_file(path))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::InvalidClassMap(format!(
                    "line {}: expected `abbrev,code[|code],scored`",
                    lineno + 1
                )));
            }
            let codes: Vec<String> = fields[1]
                .split('|')
                .map(str::trim)
                .filter(|c| !c.is_empty())
                .map(String::from)
                .collect();
            if fields[0].is_empty() || codes.is_empty() {
                return Err(Error::InvalidClassMap(format!(
                    "line {}: empty abbreviation or code list",
                    lineno + 1
                )));
            }
            let scored = match fields[2] {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::InvalidClassMap(format!(
                        "line {}: scored flag must be 0 or 1, got `{other}`",
                        lineno + 1
                    )))
                }
            };
            entries.push(ClassEntry {
                abbrev: fields[0].to_string(),
                codes,
                scored,
            });
        }
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<ClassEntry>) -> Result<Self> {
        let mut by_code = HashMap::new();
        for (idx, entry) in entries.iter().enumerate() {
            for code in &entry.codes {
                if by_code.insert(code.clone(), idx).is_some() {
                    return Err(Error::InvalidClassMap(format!(
                        "code {code} appears in more than one entry"
                    )));
                }
            }
        }
        let scored: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].scored).collect();
        if scored.len() != NUM_CLASSES {
            return Err(Error::InvalidClassMap(format!(
                "expected {NUM_CLASSES} scored classes, found {}",
                scored.len()
            )));
        }
        let normal_class_index = scored
            .iter()
            .position(|&i| entries[i].abbrev == Self::NORMAL_ABBREV)
            .ok_or_else(|| Error::InvalidClassMap(format!("no scored `{}` entry", Self::NORMAL_ABBREV)))?;
        Ok(Self {
            entries,
            scored,
            by_code,
            normal_class_index,
        })
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn normal_class_index(&self) -> usize {
        self.normal_class_index
    }

    pub fn abbrev(&self, class: usize) -> &str {
        &self.entries[self.scored[class]].abbrev
    }

    pub fn abbrevs(&self) -> Vec<&str> {
        (0..NUM_CLASSES).map(|c| self.abbrev(c)).collect()
    }

    pub fn class_index(&self, abbrev: &str) -> Option<usize> {
        (0..NUM_CLASSES).find(|&c| self.abbrev(c) == abbrev)
    }

    /// First code listed for a class; used when writing records.
    pub fn primary_code(&self, class: usize) -> &str {
        &self.entries[self.scored[class]].codes[0]
    }

    /// Canonical description of the scored classes, stored in checkpoints.
    pub fn identity(&self) -> String {
        (0..NUM_CLASSES)
            .map(|c| {
                let e = &self.entries[self.scored[c]];
                format!("{}={}", e.abbrev, e.codes.join("|"))
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.abbrev, e.codes.join("|"), u8::from(e.scored)));
        }
        out
    }

    pub fn map_labels<S: AsRef<str>>(&self, dx_codes: &[S]) -> MappedLabels {
        map_labels(dx_codes, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MappedLabels {
    pub classes: ClassSet,
    /// Codes absent from the class map.
    pub unknown_codes: usize,
}

/// Set every scored class whose code list intersects `dx_codes`.
pub fn map_labels<S: AsRef<str>>(dx_codes: &[S], map: &ClassMap) -> MappedLabels {
    let mut classes = ClassSet::empty();
    let mut unknown_codes = 0;
    for code in dx_codes {
        match map.by_code.get(code.as_ref().trim()) {
            Some(&entry) => {
                if let Some(class) = map.scored.iter().position(|&s| s == entry) {
                    classes.insert(class);
                }
            }
            None => unknown_codes += 1,
        }
    }
    MappedLabels { classes, unknown_codes }
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedHeader(msg.into())
}

fn is_missing_token(value: &str) -> bool {
    value.is_empty() || value.eq_ignore_ascii_case("nan") || value.eq_ignore_ascii_case("unknown")
}

pub fn parse_header(text: &str) -> Result<RecordMeta> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let first = lines.next().ok_or_else(|| malformed("empty header"))?;
    if first.starts_with('#') {
        return Err(malformed("missing record line"));
    }
    let fields: Vec<&str> = first.split_whitespace().collect();
    if fields.len() < 4 {
        return Err(malformed(format!("record line has {} fields, need 4", fields.len())));
    }
    let count = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| malformed(format!("non-numeric {what} `{s}`")))
    };
    let num_leads = count(fields[1], "lead count")?;
    if num_leads != NUM_LEADS {
        return Err(Error::LeadCountMismatch(num_leads));
    }
    let sampling_rate_hz = count(fields[2], "sampling rate")?;
    let num_samples = count(fields[3], "sample count")?;
    if sampling_rate_hz == 0 || sampling_rate_hz > u32::MAX as usize {
        return Err(malformed("sampling rate must be a positive integer"));
    }
    if num_samples == 0 {
        return Err(malformed("sample count must be positive"));
    }

    let mut meta = RecordMeta::new(fields[0], sampling_rate_hz as u32, num_samples);
    for lead in 0..NUM_LEADS {
        let line = lines
            .next()
            .filter(|l| !l.starts_with('#'))
            .ok_or_else(|| malformed(format!("missing signal line for lead {}", lead + 1)))?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() < 3 {
            return Err(malformed(format!(
                "signal line {} needs gain, baseline, name",
                lead + 1
            )));
        }
        let gain_text = parts[0].strip_suffix("/mV").unwrap_or(parts[0]);
        let gain: f64 = gain_text
            .parse()
            .map_err(|_| malformed(format!("non-numeric gain `{}`", parts[0])))?;
        if !(gain.is_finite() && gain > 0.0) {
            return Err(malformed(format!("gain must be positive, got {gain}")));
        }
        let baseline: i32 = parts[1]
            .parse()
            .map_err(|_| malformed(format!("non-numeric baseline `{}`", parts[1])))?;
        meta.gains[lead] = gain;
        meta.baselines[lead] = baseline;
        meta.lead_names[lead] = parts[2..].join(" ");
    }

    for line in lines {
        let Some(comment) = line.strip_prefix('#') else {
            continue;
        };
        let Some((key, value)) = comment.split_once(':') else {
            continue;
        };
        let value = value.trim();
        match key.trim() {
            "Age" => {
                meta.age_years = if is_missing_token(value) {
                    None
                } else {
                    Some(value.parse().map_err(|_| malformed(format!("bad age `{value}`")))?)
                };
            }
            "Sex" => {
                meta.sex = if is_missing_token(value) {
                    None
                } else if value.eq_ignore_ascii_case("female") || value.eq_ignore_ascii_case("f") {
                    Some(Sex::Female)
                } else if value.eq_ignore_ascii_case("male") || value.eq_ignore_ascii_case("m") {
                    Some(Sex::Male)
                } else {
                    return Err(malformed(format!("bad sex `{value}`")));
                };
            }
            "Dx" => {
                meta.dx_codes = value
                    .split(',')
                    .map(str::trim)
                    .filter(|c| !c.is_empty())
                    .map(String::from)
                    .collect();
            }
            _ => {}
        }
    }
    Ok(meta)
}

pub fn format_header(meta: &RecordMeta) -> String {
    let mut out = format!(
        "{} {} {} {}\n",
        meta.record_id, NUM_LEADS, meta.sampling_rate_hz, meta.num_samples
    );
    for lead in 0..NUM_LEADS {
        out.push_str(&format!(
            "{}/mV {} {}\n",
            meta.gains[lead], meta.baselines[lead], meta.lead_names[lead]
        ));
    }
    match meta.age_years {
        Some(age) => out.push_str(&format!("#Age: {age}\n")),
        None => out.push_str("#Age: NaN\n"),
    }
    out.push_str(match meta.sex {
        Some(Sex::Female) => "#Sex: Female\n",
        Some(Sex::Male) => "#Sex: Male\n",
        None => "#Sex: NaN\n",
    });
    out.push_str(&format!("#Dx: {}\n", meta.dx_codes.join(",")));
    out
}

/// Decode raw lead-major `i16` samples into millivolts. Labels are left empty.
pub fn read_signal(meta: RecordMeta, bytes: &[u8]) -> Result<EcgRecord> {
    let expected = 2 * NUM_LEADS * meta.num_samples;
    if bytes.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let n = meta.num_samples;
    let mut data = Vec::with_capacity(NUM_LEADS * n);
    for (i, pair) in bytes.chunks_exact(2).enumerate() {
        let lead = i / n;
        let raw = i16::from_le_bytes([pair[0], pair[1]]);
        data.push((f64::from(raw) - f64::from(meta.baselines[lead])) / meta.gains[lead]);
    }
    let signal = Signal::from_vec(NUM_LEADS, n, data)?;
    Ok(EcgRecord {
        meta,
        signal,
        labels: ClassSet::empty(),
    })
}

/// Quantize millivolts back to raw `i16` units, saturating at the type bounds.
pub fn encode_signal(meta: &RecordMeta, signal: &Signal) -> Result<Vec<u8>> {
    if signal.leads() != NUM_LEADS || signal.len() != meta.num_samples {
        return Err(Error::ShapeMismatch(format!(
            "signal is {}x{}, header says {}x{}",
            signal.leads(),
            signal.len(),
            NUM_LEADS,
            meta.num_samples
        )));
    }
    let mut bytes = Vec::with_capacity(2 * NUM_LEADS * meta.num_samples);
    for lead in 0..NUM_LEADS {
        let gain = meta.gains[lead];
        let baseline = f64::from(meta.baselines[lead]);
        for &mv in signal.lead(lead) {
            let raw = (mv * gain + baseline)
                .round()
                .clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16;
            bytes.extend_from_slice(&raw.to_le_bytes());
        }
    }
    Ok(bytes)
}

/// Write `<record_id>.hea` and `<record_id>.dat` into `dir`.
pub fn write_record(record: &EcgRecord, dir: &Path) -> Result<()> {
    let bytes = encode_signal(&record.meta, &record.signal)?;
    fs::write(
        dir.join(format!("{}.hea", record.meta.record_id)),
        format_header(&record.meta),
    )?;
    fs::write(dir.join(format!("{}.dat", record.meta.record_id)), bytes)?;
    Ok(())
}

/// Parse one header/signal pair and map its labels.
pub fn read_record(header_path: &Path, map: &ClassMap) -> Result<(EcgRecord, usize)> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::from(e).in_file(header_path))?;
    let meta = parse_header(&text).map_err(|e| e.in_file(header_path))?;
    let dat = header_path.with_extension("dat");
    let bytes = fs::read(&dat).map_err(|e| Error::from(e).in_file(&dat))?;
    let mut record = read_signal(meta, &bytes).map_err(|e| e.in_file(&dat))?;
    let mapped = map.map_labels(&record.meta.dx_codes);
    record.labels = mapped.classes;
    Ok((record, mapped.unknown_codes))
}

#[derive(Debug)]
pub struct LoadedDataset {
    /// Sorted by record id.
    pub records: Vec<EcgRecord>,
    pub failures: Vec<(PathBuf, Error)>,
    pub unknown_codes: usize,
}

/// Load every `<stem>.hea`/`<stem>.dat` pair in `dir`.
///
/// Files that fail to parse are collected in `failures`; only a directory with
/// no loadable records is an error.
pub fn load_dataset(dir: &Path, map: &ClassMap) -> Result<LoadedDataset> {
    let mut headers: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::from(e).in_file(dir))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "hea"))
        .collect();
    headers.sort();

    let results: Vec<(PathBuf, Result<(EcgRecord, usize)>)> = headers
        .into_par_iter()
        .map(|path| {
            let result = read_record(&path, map);
            (path, result)
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut unknown_codes = 0;
    for (path, result) in results {
        match result {
            Ok((record, unknown)) => {
                unknown_codes += unknown;
                records.push(record);
            }
            Err(e) => failures.push((path, e)),
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    records.sort_by(|a, b| a.meta.record_id.cmp(&b.meta.record_id));
    Ok(LoadedDataset {
        records,
        failures,
        unknown_codes,
    })
}
