//! Generate a small labelled dataset, write it in WFDB form and read it back.
//!
//! `cargo run --release --example synthesize_dataset [out_dir]`

use ecg_senet::record_io::{load_dataset, ClassMap};
use ecg_senet::synth::{generate_dataset, write_dataset, DatasetSpec};

fn main() -> ecg_senet::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic_ecg".into());
    let out = std::path::Path::new(&out);
    let map = ClassMap::default_map();
    let records = generate_dataset(&DatasetSpec::balanced(4, 0.05, 1), &map)?;
    write_dataset(out, &records)?;

    let loaded = load_dataset(out, &map)?;
    println!(
        "wrote {} records to {}, read back {}",
        records.len(),
        out.display(),
        loaded.records.len()
    );
    for r in loaded.records.iter().take(6) {
        let labels: Vec<&str> = r.labels.iter().map(|c| map.abbrev(c)).collect();
        let lead_ii = r.signal.lead(1);
        let peak = lead_ii.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        println!(
            "{}  {:>3} Hz x {:>5}  age {:?}  {:<6}  |II| max {peak:.2} mV",
            r.meta.record_id,
            r.meta.sampling_rate_hz,
            r.meta.num_samples,
            r.meta.age_years,
            labels.join("+")
        );
    }
    Ok(())
}
