mod common;

use common::*;
use ecg_senet::autodiff::{Mode, Tape, Tensor};
use ecg_senet::model::{init_params, BoundParams, ForwardOptions, Model, ModelConfig, Network, WidthScale};

#[test]
fn default_network_shapes() {
    let config = ModelConfig::default();
    let params = init_params(&config, &mut rng(1)).unwrap();
    let signal = random_tensor(&[2, 12, 4096], &mut rng(2));
    let demo = random_tensor(&[2, 10], &mut rng(3));
    let (tape, out) = forward_eval(&config, &params, &signal, &demo, false);
    assert_eq!(tape.shape(out.features), &[2, 512]);
    assert_eq!(tape.shape(out.fused), &[2, 522]);
    assert_eq!(tape.shape(out.probabilities), &[2, 24]);
    assert!(tape.data(out.probabilities).iter().all(|&p| p > 0.0 && p < 1.0));
    assert_eq!(out.se_gates.len(), 8);
    for (g, c) in out.se_gates.iter().zip(&config.channel_plan) {
        assert_eq!(tape.shape(*g), &[2, *c]);
        assert!(tape.data(*g).iter().all(|&s| s > 0.0 && s < 1.0));
    }
}

#[test]
fn parameter_count_is_pinned() {
    // stem 12·15·64 + 64 + 2·64; per block two K=7 convs with biases, two BNs,
    // the two SE matrices (2·C·C/16) and a 1×1 projection where channels or
    // stride change (blocks 3, 4, 5, 6, 7, 8); classifier 24·522 + 24
    let params = init_params(&ModelConfig::default(), &mut rng(1)).unwrap();
    assert_eq!(params.num_learnable(), 9_188_552);
    assert_eq!(params.get("fc.weight").shape(), &[24, 522]);
    assert_eq!(params.get("block7.se.w1").shape(), &[32, 512]);
    assert_eq!(params.get("block7.se.w2").shape(), &[512, 32]);
}

#[test]
fn feature_extractor_temporal_trace() {
    let config = ModelConfig::scaled(WidthScale::new(1, 4).unwrap(), 16);
    let params = init_params(&config, &mut rng(1)).unwrap();
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params, false);
    let mut h = tape.leaf(random_tensor(&[1, 16, 2048], &mut rng(2)));
    let mut running = params.running.clone();
    let mut net = Network {
        config: &config,
        params: &bound,
        running: &mut running,
        opts: ForwardOptions::eval(),
    };
    let mut lengths = Vec::new();
    for b in 0..8 {
        h = net.res_block(&mut tape, h, b, &mut rng(3)).unwrap().0;
        lengths.push(tape.shape(h)[2]);
    }
    assert_eq!(lengths, [2048, 2048, 2048, 1024, 1024, 512, 512, 256]);
}

#[test]
fn se_bypass_equals_plain_resnet_oracle() {
    let config = small_config();
    let params = perturbed_params(&config, 5);
    let signal = random_tensor(&[3, 12, 40], &mut rng(6));
    let demo = random_tensor(&[3, 10], &mut rng(7));
    let (tape, out) = forward_eval(&config, &params, &signal, &demo, true);
    let oracle = naive_forward(&config, &params, arr(&signal), &demo_rows(&demo), false);
    assert!(out.se_gates.is_empty());
    let logits: Vec<f64> = oracle.logits.concat();
    assert!(max_abs_diff(tape.data(out.logits), &logits) < 1e-12);
    assert!(max_abs_diff(tape.data(out.features), &oracle.features.concat()) < 1e-12);
}

#[test]
fn se_network_matches_dense_math_oracle() {
    let config = small_config();
    let params = perturbed_params(&config, 8);
    let signal = random_tensor(&[2, 12, 40], &mut rng(9));
    let demo = random_tensor(&[2, 10], &mut rng(10));
    let (tape, out) = forward_eval(&config, &params, &signal, &demo, false);
    let oracle = naive_forward(&config, &params, arr(&signal), &demo_rows(&demo), true);
    assert!(max_abs_diff(tape.data(out.logits), &oracle.logits.concat()) < 1e-12);
    for (g, o) in out.se_gates.iter().zip(&oracle.gates) {
        assert!(max_abs_diff(tape.data(*g), &o.concat()) < 1e-12);
    }
}

#[test]
fn zero_input_gives_zero_features() {
    let config = small_config();
    let params = init_params(&config, &mut rng(1)).unwrap();
    let (tape, out) = forward_eval(
        &config,
        &params,
        &Tensor::zeros(&[2, 12, 32]),
        &Tensor::zeros(&[2, 10]),
        false,
    );
    assert!(tape.data(out.features).iter().all(|&v| v == 0.0));
}

#[test]
fn batch_order_is_irrelevant_in_eval() {
    let config = small_config();
    let params = perturbed_params(&config, 2);
    let s = random_tensor(&[3, 12, 32], &mut rng(3));
    let d = random_tensor(&[3, 10], &mut rng(4));
    let swap = |t: &Tensor, row: usize| {
        let rows: Vec<&[f64]> = t.data().chunks_exact(row).collect();
        let data = [rows[2], rows[0], rows[1]].concat();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    };
    let (ta, a) = forward_eval(&config, &params, &s, &d, false);
    let (tb, b) = forward_eval(&config, &params, &swap(&s, 12 * 32), &swap(&d, 10), false);
    let pa: Vec<&[f64]> = ta.data(a.probabilities).chunks_exact(24).collect();
    let pb: Vec<&[f64]> = tb.data(b.probabilities).chunks_exact(24).collect();
    assert_eq!(pb[0], pa[2]);
    assert_eq!(pb[1], pa[0]);
    assert_eq!(pb[2], pa[1]);
}

#[test]
fn sex_bit_reaches_the_logits() {
    let config = small_config();
    let mut params = init_params(&config, &mut rng(1)).unwrap();
    let fused = config.fused_dim();
    let female_col = config.feature_dim() + 2;
    let w = params.get_mut("fc.weight").data_mut();
    w.fill(0.0);
    w[female_col] = 1.5; // class 0 reads the female flag
    let s = random_tensor(&[2, 12, 32], &mut rng(2));
    let mut demo = vec![0.0; 20];
    demo[2] = 1.0;
    demo[10 + 3] = 1.0;
    let (tape, out) = forward_eval(&config, &params, &s, &Tensor::new(vec![2, 10], demo).unwrap(), false);
    let logits = tape.data(out.logits);
    assert_eq!(logits[0], 1.5);
    assert_eq!(logits[24], 0.0);
    assert_eq!(fused, 18);
}

#[test]
fn he_init_variance() {
    let config = ModelConfig::default();
    let params = init_params(&config, &mut rng(12)).unwrap();
    for name in ["block6.conv2.weight", "block2.conv1.weight", "fc.weight"] {
        let t = params.get(name);
        let fan_in: usize = t.shape()[1..].iter().product();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / fan_in as f64;
        assert!(t.len() >= 10_000);
        assert!((var / expected - 1.0).abs() < 0.1, "{name}: {var} vs {expected}");
    }
    assert!(params
        .tensors
        .iter()
        .filter(|(k, _)| k.ends_with("gamma"))
        .all(|(_, t)| t.data().iter().all(|&g| g == 1.0)));
}

#[test]
fn predict_batch_matches_network_and_checkpoint_survives() {
    let config = small_config();
    let params = perturbed_params(&config, 3);
    let model = Model {
        config: config.clone(),
        params: params.clone(),
        class_map_identity: "m".into(),
    };
    let s = random_tensor(&[2, 12, 64], &mut rng(4));
    let d = random_tensor(&[2, 10], &mut rng(5));
    let (tape, out) = forward_eval(&config, &params, &s, &d, false);
    let signals: Vec<_> = s
        .data()
        .chunks_exact(12 * 64)
        .map(|c| ecg_senet::record_io::Signal::from_vec(12, 64, c.to_vec()).unwrap())
        .collect();
    let probs = model.predict_batch(&signals, &demo_rows(&d)).unwrap();
    assert_eq!(probs.concat(), tape.data(out.probabilities));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.senet");
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(loaded, model);
    assert_eq!(loaded.predict_batch(&signals, &demo_rows(&d)).unwrap(), probs);
}

#[test]
fn train_mode_updates_running_stats() {
    let config = small_config();
    let params = init_params(&config, &mut rng(1)).unwrap();
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params, false);
    let x = tape.leaf(random_tensor(&[2, 12, 32], &mut rng(2)));
    let d = tape.leaf(Tensor::zeros(&[2, 10]));
    let mut running = params.running.clone();
    let mut net = Network {
        config: &config,
        params: &bound,
        running: &mut running,
        opts: ForwardOptions {
            mode: Mode::Train,
            ..ForwardOptions::train()
        },
    };
    net.forward(&mut tape, x, d, &mut rng(3)).unwrap();
    assert_ne!(running, params.running);
}
