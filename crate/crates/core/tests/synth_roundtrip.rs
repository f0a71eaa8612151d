mod common;

use common::*;
use ecg_senet::record_io::{load_dataset, ClassMap};
use ecg_senet::synth::*;
use proptest::prelude::*;

#[test]
fn write_parse_round_trip() {
    let map = ClassMap::default_map();
    let spec = DatasetSpec {
        duration_s: 3.0,
        ..DatasetSpec::balanced(3, 0.05, 9)
    };
    let records = generate_dataset(&spec, &map).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &records).unwrap();
    let loaded = load_dataset(dir.path(), &map).unwrap();
    assert!(loaded.failures.is_empty());
    assert_eq!(loaded.records.len(), records.len());
    for back in &loaded.records {
        let orig = records
            .iter()
            .find(|r| r.meta.record_id == back.meta.record_id)
            .unwrap();
        assert_eq!(back.meta, orig.meta);
        assert_eq!(back.labels, orig.labels);
        for lead in 0..12 {
            let tol = 0.5 / orig.meta.gains[lead] + 1e-12;
            for (a, b) in back.signal.lead(lead).iter().zip(orig.signal.lead(lead)) {
                assert!((a - b).abs() <= tol);
            }
        }
    }
}

#[test]
fn lad_oracle_recovers_labels() {
    let map = ClassMap::default_map();
    let lad = map.class_index("LAD").unwrap();
    let base = DatasetSpec::balanced(0, 0.05, 0);
    let mut agree = 0;
    let total = 120;
    for i in 0..total {
        let class = if i % 2 == 0 { SynthClass::Lad } else { SynthClass::Snr };
        let spec = sample_spec(class, &base, &mut rng(i));
        let s = generate_with_beats(&spec, "r", &map).unwrap();
        if lad_oracle(&s.record, &s.beat_times) == s.record.labels.contains(lad) {
            agree += 1;
        }
    }
    assert!(agree as f64 >= 0.98 * total as f64, "{agree}/{total}");
}

#[test]
fn rhythm_statistics() {
    let map = ClassMap::default_map();
    let rr = |rhythm| {
        let spec = SynthSpec {
            rhythm,
            duration_s: 30.0,
            seed: 4,
            ..SynthSpec::default()
        };
        let b = generate_with_beats(&spec, "r", &map).unwrap().beat_times;
        let d: Vec<f64> = b.windows(2).map(|w| w[1] - w[0]).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
        (mean, var)
    };
    let (_, sinus_var) = rr(Rhythm::Sinus);
    assert!(sinus_var < 1e-20);
    let (mean, var) = rr(Rhythm::AFib);
    assert!(var.sqrt() / mean > 0.05);
}

#[test]
fn regions_keep_margins() {
    let base = DatasetSpec::balanced(0, 0.0, 0);
    let mut r = rng(2);
    for class in SynthClass::ALL {
        for _ in 0..200 {
            let s = sample_spec(class, &base, &mut r);
            assert_eq!(label_rule(&s), vec![class]);
            let a = s.qrs_axis_degrees;
            for edge in [-90.0, -30.0, 90.0, 180.0] {
                assert!((a - edge).abs() >= 5.0 - 1e-9);
            }
            for edge in [60.0, 100.0] {
                assert!((s.heart_rate_bpm - edge).abs() >= 5.0 - 1e-9);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn bounded_and_label_pure(axis in -89.0f64..180.0, rate in 40.0f64..150.0, afib: bool, noise in 0.0f64..0.1, seed: u64) {
        let map = ClassMap::default_map();
        let spec = SynthSpec {
            heart_rate_bpm: rate,
            qrs_axis_degrees: axis,
            rhythm: if afib { Rhythm::AFib } else { Rhythm::Sinus },
            noise_std_mv: noise,
            duration_s: 3.0,
            seed,
            ..SynthSpec::default()
        };
        let rec = generate_record(&spec, "p", &map);
        prop_assume!(rec.is_ok());
        let rec = rec.unwrap();
        let bound = TEMPLATE_PEAK_MV + 6.0 * noise;
        prop_assert!(rec.signal.as_slice().iter().all(|v| v.is_finite() && v.abs() <= bound));
        let quiet = generate_record(&SynthSpec { noise_std_mv: 0.0, seed: seed.wrapping_add(1), ..spec }, "q", &map).unwrap();
        prop_assert_eq!(quiet.labels, rec.labels);
        prop_assert!(!rec.labels.is_empty());
    }
}
