//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code, clippy::needless_range_loop)]

use ecg_senet::autodiff::{Tape, Tensor, Var};
use ecg_senet::model::{ModelConfig, ModelParams};
use ecg_senet::record_io::{ClassSet, EcgRecord, NUM_CLASSES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central-difference check of `build` with respect to every leaf. At most
/// `max_coords` coordinates per leaf are probed; the rest are skipped in both
/// the analytic and numeric vectors. Returns the worst relative error.
pub fn check_grads(leaves: &[Tensor], max_coords: usize, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let h = 1e-5;
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone().requires_grad())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let eval = |leaves: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };
    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic_full = tape
            .grad(vars[li])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; leaf.len()]);
        let stride = leaf.len().div_ceil(max_coords).max(1);
        let coords: Vec<usize> = (0..leaf.len()).step_by(stride).collect();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &i in &coords {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[i] += h;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[i] -= h;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * h));
            analytic.push(analytic_full[i]);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Smooth scalar read-out of a `(B, C, T)` node that weights every element
/// differently.
pub fn readout3(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let r = tape.leaf(random_tensor(&[shape[0], shape[1]], &mut rng(seed)));
    let z = tape.channel_scale(y, r).unwrap();
    let s = tape.sigmoid(z);
    tape.sum(s)
}

/// Smooth scalar read-out of a `(B, F)` node.
pub fn readout2(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let n = tape.value(y).len();
    let mut r = rng(seed);
    let targets: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    tape.bce_mean(y, &targets).unwrap()
}

/// Row-major `(B, C, T)` array.
#[derive(Debug, Clone)]
pub struct Arr {
    pub b: usize,
    pub c: usize,
    pub t: usize,
    pub v: Vec<f64>,
}

impl Arr {
    pub fn at(&self, b: usize, c: usize, t: usize) -> f64 {
        self.v[(b * self.c + c) * self.t + t]
    }
}

fn naive_conv(x: &Arr, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Arr {
    let (co, ci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(ci, x.c);
    let t_out = (x.t + 2 * pad - k) / stride + 1;
    let mut v = vec![0.0; x.b * co * t_out];
    for b in 0..x.b {
        for o in 0..co {
            for t in 0..t_out {
                let mut acc = bias.data()[o];
                for i in 0..ci {
                    for j in 0..k {
                        let src = (t * stride + j) as isize - pad as isize;
                        if src >= 0 && (src as usize) < x.t {
                            acc += w.data()[(o * ci + i) * k + j] * x.at(b, i, src as usize);
                        }
                    }
                }
                v[(b * co + o) * t_out + t] = acc;
            }
        }
    }
    Arr {
        b: x.b,
        c: co,
        t: t_out,
        v,
    }
}

fn naive_bn_eval(x: &Arr, params: &ModelParams, name: &str) -> Arr {
    let g = params.get(&format!("{name}.gamma")).data();
    let be = params.get(&format!("{name}.beta")).data();
    let stats = &params.running[name];
    let mut out = x.clone();
    for b in 0..x.b {
        for c in 0..x.c {
            for t in 0..x.t {
                let i = (b * x.c + c) * x.t + t;
                out.v[i] = g[c] * (x.v[i] - stats.mean[c]) / (stats.var[c] + 1e-5).sqrt() + be[c];
            }
        }
    }
    out
}

fn relu(mut x: Arr) -> Arr {
    x.v.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

fn naive_maxpool(x: &Arr) -> Arr {
    let t_out = (x.t + 2 - 3) / 2 + 1;
    let mut v = vec![0.0; x.b * x.c * t_out];
    for b in 0..x.b {
        for c in 0..x.c {
            for t in 0..t_out {
                let mut m = f64::NEG_INFINITY;
                for j in 0..3 {
                    let src = (2 * t + j) as isize - 1;
                    if src >= 0 && (src as usize) < x.t {
                        m = m.max(x.at(b, c, src as usize));
                    }
                }
                v[(b * x.c + c) * t_out + t] = m;
            }
        }
    }
    Arr {
        b: x.b,
        c: x.c,
        t: t_out,
        v,
    }
}

fn naive_gap(x: &Arr) -> Vec<Vec<f64>> {
    (0..x.b)
        .map(|b| {
            (0..x.c)
                .map(|c| (0..x.t).map(|t| x.at(b, c, t)).sum::<f64>() / x.t as f64)
                .collect()
        })
        .collect()
}

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..rows)
        .map(|r| (0..cols).map(|c| w.data()[r * cols + c] * x[c]).sum())
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub struct OracleOutput {
    pub features: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub gates: Vec<Vec<Vec<f64>>>,
}

/// Eval-mode forward pass written with explicit loops; `with_se = false`
/// gives the plain ResNet.
pub fn naive_forward(
    config: &ModelConfig,
    params: &ModelParams,
    x: Arr,
    demo: &[[f64; 10]],
    with_se: bool,
) -> OracleOutput {
    let conv = |x: &Arr, name: &str, stride: usize, pad: usize| {
        naive_conv(
            x,
            params.get(&format!("{name}.weight")),
            params.get(&format!("{name}.bias")),
            stride,
            pad,
        )
    };
    let mut h = conv(&x, "stem.conv", 1, config.stem_kernel / 2);
    h = relu(naive_bn_eval(&h, params, "stem.bn"));
    h = naive_maxpool(&h);
    let mut gates = Vec::new();
    for blk in 0..config.num_blocks {
        let p = format!("block{blk}");
        let stride = config.block_stride(blk);
        let pad = config.block_kernel / 2;
        let mut m = conv(&h, &format!("{p}.conv1"), stride, pad);
        m = relu(naive_bn_eval(&m, params, &format!("{p}.bn1")));
        m = conv(&m, &format!("{p}.conv2"), 1, pad);
        m = naive_bn_eval(&m, params, &format!("{p}.bn2"));
        if with_se {
            let z = naive_gap(&m);
            let mut block_gates = Vec::new();
            for b in 0..m.b {
                let hidden: Vec<f64> = matvec(params.get(&format!("{p}.se.w1")), &z[b])
                    .into_iter()
                    .map(|v| v.max(0.0))
                    .collect();
                let s: Vec<f64> = matvec(params.get(&format!("{p}.se.w2")), &hidden)
                    .into_iter()
                    .map(sigmoid)
                    .collect();
                for c in 0..m.c {
                    for t in 0..m.t {
                        m.v[(b * m.c + c) * m.t + t] *= s[c];
                    }
                }
                block_gates.push(s);
            }
            gates.push(block_gates);
        }
        let shortcut = if params.tensors.contains_key(&format!("{p}.proj.weight")) {
            naive_bn_eval(
                &conv(&h, &format!("{p}.proj"), stride, 0),
                params,
                &format!("{p}.proj_bn"),
            )
        } else {
            h.clone()
        };
        for (a, s) in m.v.iter_mut().zip(&shortcut.v) {
            *a += s;
        }
        h = relu(m);
    }
    let features = naive_gap(&h);
    let logits = features
        .iter()
        .zip(demo)
        .map(|(f, d)| {
            let fused: Vec<f64> = f.iter().chain(d.iter()).copied().collect();
            let mut out = matvec(params.get("fc.weight"), &fused);
            out.iter_mut()
                .zip(params.get("fc.bias").data())
                .for_each(|(o, b)| *o += b);
            out
        })
        .collect();
    OracleOutput {
        features,
        logits,
        gates,
    }
}

/// Challenge score written straight from its definition: a dense 24×24
/// confusion-weight matrix per prediction list, then the normalisation.
pub fn brute_force_score(
    truth: &[ClassSet],
    pred: &[ClassSet],
    w: &[[f64; NUM_CLASSES]; NUM_CLASSES],
    normal: usize,
) -> Option<f64> {
    let observed = |preds: &dyn Fn(usize) -> ClassSet| {
        let mut a = vec![vec![0.0; NUM_CLASSES]; NUM_CLASSES];
        for (k, t) in truth.iter().enumerate() {
            let p = preds(k);
            let mut union = 0;
            for c in 0..NUM_CLASSES {
                if t.contains(c) || p.contains(c) {
                    union += 1;
                }
            }
            let n = if union == 0 { 1.0 } else { union as f64 };
            for i in 0..NUM_CLASSES {
                for j in 0..NUM_CLASSES {
                    if t.contains(i) && p.contains(j) {
                        a[i][j] += 1.0 / n;
                    }
                }
            }
        }
        let mut s = 0.0;
        for i in 0..NUM_CLASSES {
            for j in 0..NUM_CLASSES {
                s += w[i][j] * a[i][j];
            }
        }
        s
    };
    let obs = observed(&|k| pred[k]);
    let correct = observed(&|k| truth[k]);
    let inactive = observed(&|_| ClassSet::from_indices([normal]));
    if correct == inactive {
        None
    } else {
        Some((obs - inactive) / (correct - inactive))
    }
}

pub fn random_classset(rng: &mut impl Rng, classes: usize, p: f64) -> ClassSet {
    ClassSet::from_indices((0..classes).filter(|_| rng.random_bool(p)))
}

/// Largest `|count − total/k|` over labels and folds.
pub fn max_fold_deviation(labels: &[ClassSet], folds: &[usize], k: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for c in 0..NUM_CLASSES {
        let total = labels.iter().filter(|l| l.contains(c)).count();
        if total == 0 {
            continue;
        }
        for f in 0..k {
            let count = labels
                .iter()
                .zip(folds)
                .filter(|(l, &g)| g == f && l.contains(c))
                .count();
            worst = worst.max((count as f64 - total as f64 / k as f64).abs());
        }
    }
    worst
}

/// Rule-based axis reading: sum R-peak samples (largest |value| near each
/// QRS in lead I) and call LAD when lead I is positive while II and III are
/// negative.
pub fn lad_oracle(record: &EcgRecord, beats: &[f64]) -> bool {
    let fs = record.meta.sampling_rate_hz as f64;
    let n = record.signal.len();
    let peak_sum = |lead: usize| -> f64 {
        let x = record.signal.lead(lead);
        beats
            .iter()
            .map(|&b| {
                let centre = (b * fs).round() as isize;
                let lo = (centre - 10).max(0) as usize;
                let hi = ((centre + 10).max(0) as usize).min(n - 1);
                x[lo..=hi]
                    .iter()
                    .copied()
                    .fold(0.0, |m: f64, y| if y.abs() > m.abs() { y } else { m })
            })
            .sum()
    };
    peak_sum(0) > 0.0 && peak_sum(1) < 0.0 && peak_sum(2) < 0.0
}

use ecg_senet::autodiff::{BatchNormOptions, Mode, RunningStats};
use ecg_senet::model::{init_params, BoundParams, ForwardOptions, Network, WidthScale};

/// Worst central-difference error of each autodiff primitive.
pub fn primitive_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng(17);
    let x3 = random_tensor(&[2, 3, 9], &mut r);
    let mut cases: Vec<(&'static str, f64)> = Vec::new();

    let w = random_tensor(&[4, 3, 5], &mut r);
    let b = random_tensor(&[4], &mut r);
    for (name, stride, pad) in [("conv1d", 1, 2), ("conv1d stride 2", 2, 2), ("conv1d unpadded", 1, 0)] {
        let e = check_grads(&[x3.clone(), w.clone(), b.clone()], 40, |t, v| {
            let y = t.conv1d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
            readout3(t, y, 1)
        });
        cases.push((name, e));
    }
    let gamma = random_tensor(&[3], &mut r);
    let beta = random_tensor(&[3], &mut r);
    cases.push((
        "batch_norm1d",
        check_grads(&[x3.clone(), gamma, beta], 60, |t, v| {
            let mut stats = RunningStats::new(3);
            let y = t
                .batch_norm1d(v[0], v[1], v[2], &mut stats, Mode::Train, BatchNormOptions::default())
                .unwrap();
            readout3(t, y, 2)
        }),
    ));
    cases.push((
        "relu",
        check_grads(std::slice::from_ref(&x3), 60, |t, v| {
            let y = t.relu(v[0]);
            readout3(t, y, 3)
        }),
    ));
    cases.push((
        "sigmoid",
        check_grads(std::slice::from_ref(&x3), 60, |t, v| {
            let y = t.sigmoid(v[0]);
            readout3(t, y, 4)
        }),
    ));
    cases.push((
        "max_pool1d",
        check_grads(std::slice::from_ref(&x3), 60, |t, v| {
            let y = t.max_pool1d(v[0], 3, 2, 1).unwrap();
            readout3(t, y, 5)
        }),
    ));
    cases.push((
        "global_avg_pool",
        check_grads(std::slice::from_ref(&x3), 60, |t, v| {
            let y = t.global_avg_pool(v[0]).unwrap();
            readout2(t, y, 6)
        }),
    ));
    let x2 = random_tensor(&[3, 5], &mut r);
    let wd = random_tensor(&[4, 5], &mut r);
    let bd = random_tensor(&[4], &mut r);
    cases.push((
        "dense",
        check_grads(&[x2.clone(), wd, bd], 60, |t, v| {
            let y = t.dense(v[0], v[1], Some(v[2])).unwrap();
            readout2(t, y, 7)
        }),
    ));
    cases.push((
        "dropout",
        check_grads(std::slice::from_ref(&x3), 60, |t, v| {
            let y = t.dropout(v[0], 0.3, Mode::Train, &mut rng(8)).unwrap();
            readout3(t, y, 8)
        }),
    ));
    let s = random_tensor(&[2, 3], &mut r);
    cases.push((
        "channel_scale",
        check_grads(&[x3.clone(), s], 60, |t, v| {
            let y = t.channel_scale(v[0], v[1]).unwrap();
            readout3(t, y, 9)
        }),
    ));
    let y3 = random_tensor(&[2, 3, 9], &mut r);
    cases.push((
        "add",
        check_grads(&[x3.clone(), y3], 60, |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            readout3(t, y, 10)
        }),
    ));
    let x2b = random_tensor(&[3, 2], &mut r);
    cases.push((
        "concat",
        check_grads(&[x2.clone(), x2b], 60, |t, v| {
            let y = t.concat(v[0], v[1]).unwrap();
            readout2(t, y, 11)
        }),
    ));
    cases.push((
        "scale",
        check_grads(std::slice::from_ref(&x2), 60, |t, v| {
            let y = t.scale(v[0], -1.7);
            readout2(t, y, 12)
        }),
    ));
    cases.push((
        "sum",
        check_grads(std::slice::from_ref(&x3), 60, |t, v| {
            let y = t.sigmoid(v[0]);
            t.sum(y)
        }),
    ));
    cases.push(("bce_mean", check_grads(&[x2], 60, |t, v| readout2(t, v[0], 13))));
    cases
}

/// Two-block, eighth-width network with a strided projection block.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        num_blocks: 2,
        channel_plan: vec![64, 64],
        downsample_blocks: vec![2],
        se_reduction: 4,
        width_scale: WidthScale::new(1, 8).unwrap(),
        ..ModelConfig::default()
    }
}

fn model_loss(
    config: &ModelConfig,
    params: &ModelParams,
    signal: &Tensor,
    demo: &Tensor,
    targets: &[f64],
    grads: bool,
) -> (f64, Vec<(String, Vec<f64>)>) {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, grads);
    let x = tape.leaf(signal.clone());
    let d = tape.leaf(demo.clone());
    let mut running = params.running.clone();
    let mut net = Network {
        config,
        params: &bound,
        running: &mut running,
        opts: ForwardOptions::train(),
    };
    let out = net.forward(&mut tape, x, d, &mut rng(99)).unwrap();
    let loss = tape.bce_mean(out.logits, targets).unwrap();
    let value = tape.value(loss).item();
    if !grads {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    let g = bound
        .iter()
        .map(|(name, &v)| (name.clone(), tape.grad(v).unwrap().to_vec()))
        .collect();
    (value, g)
}

/// Worst relative error over all parameter tensors of the small network,
/// probing up to `per_tensor` coordinates in each.
pub fn end_to_end_gradient_error(per_tensor: usize) -> f64 {
    let config = small_config();
    let mut r = rng(23);
    let params = init_params(&config, &mut r).unwrap();
    let signal = random_tensor(&[3, 12, 48], &mut r);
    let demo = random_tensor(&[3, 10], &mut r);
    let targets: Vec<f64> = (0..3 * 24).map(|_| f64::from(u8::from(r.random_bool(0.3)))).collect();
    let (_, analytic) = model_loss(&config, &params, &signal, &demo, &targets, true);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, grad) in analytic {
        let len = grad.len();
        let stride = len.div_ceil(per_tensor).max(1);
        let mut a = Vec::new();
        let mut n = Vec::new();
        for i in (0..len).step_by(stride) {
            let mut plus = params.clone();
            plus.get_mut(&name).data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(&name).data_mut()[i] -= h;
            let lp = model_loss(&config, &plus, &signal, &demo, &targets, false).0;
            let lm = model_loss(&config, &minus, &signal, &demo, &targets, false).0;
            n.push((lp - lm) / (2.0 * h));
            a.push(grad[i]);
        }
        // conv biases feeding a batch-statistics BN
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm(&a).max(norm(&n)) < 1e-9 {
            continue;
        }
        worst = worst.max(rel_err(&a, &n));
    }
    worst
}

use ecg_senet::model::ForwardOutput;

pub fn forward_eval(
    config: &ModelConfig,
    params: &ModelParams,
    signal: &Tensor,
    demo: &Tensor,
    se_bypass: bool,
) -> (Tape, ForwardOutput) {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let x = tape.leaf(signal.clone());
    let d = tape.leaf(demo.clone());
    let mut running = params.running.clone();
    let mut net = Network {
        config,
        params: &bound,
        running: &mut running,
        opts: ForwardOptions {
            se_bypass,
            ..ForwardOptions::eval()
        },
    };
    let out = net.forward(&mut tape, x, d, &mut rng(0)).unwrap();
    (tape, out)
}

/// Random BN statistics and affine terms so eval-mode BN is not an identity.
pub fn perturbed_params(config: &ModelConfig, seed: u64) -> ModelParams {
    let mut r = rng(seed);
    let mut params = init_params(config, &mut r).unwrap();
    for (name, t) in params.tensors.iter_mut() {
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
            for v in t.data_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
    }
    for stats in params.running.values_mut() {
        for m in &mut stats.mean {
            *m = r.random_range(-0.2..0.2);
        }
        for v in &mut stats.var {
            *v = r.random_range(0.5..1.5);
        }
    }
    params
}

pub fn arr(t: &Tensor) -> Arr {
    Arr {
        b: t.shape()[0],
        c: t.shape()[1],
        t: t.shape()[2],
        v: t.data().to_vec(),
    }
}

pub fn demo_rows(t: &Tensor) -> Vec<[f64; 10]> {
    t.data().chunks_exact(10).map(|c| c.try_into().unwrap()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn random_weights(r: &mut impl Rng) -> [[f64; NUM_CLASSES]; NUM_CLASSES] {
    let mut w = [[0.0; NUM_CLASSES]; NUM_CLASSES];
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if i == j { 1.0 } else { r.random_range(0.0..1.0) };
        }
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feasibility {
    Feasible,
    Infeasible,
    Unknown,
}

/// Exact depth-first search for a `k`-fold assignment with every fold size
/// and per-label fold count within one record of `total / k`, giving up
/// after `node_budget` nodes.
pub fn balanced_folds_exist(labels: &[ClassSet], k: usize, node_budget: u64) -> Feasibility {
    let n = labels.len();
    let active: Vec<usize> = (0..NUM_CLASSES)
        .filter(|&c| labels.iter().any(|l| l.contains(c)))
        .collect();
    let totals: Vec<usize> = active
        .iter()
        .map(|&c| labels.iter().filter(|l| l.contains(c)).count())
        .collect();
    let rarity = |i: usize| {
        active
            .iter()
            .zip(&totals)
            .filter(|(&c, _)| labels[i].contains(c))
            .map(|(_, &t)| t)
            .min()
            .unwrap_or(usize::MAX)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (rarity(i), std::cmp::Reverse(labels[i].len())));
    let rows: Vec<Vec<usize>> = order
        .iter()
        .map(|&i| (0..active.len()).filter(|&a| labels[i].contains(active[a])).collect())
        .collect();
    // records with label a among positions >= p
    let mut remaining = vec![vec![0usize; active.len()]; n + 1];
    for p in (0..n).rev() {
        remaining[p] = remaining[p + 1].clone();
        for &a in &rows[p] {
            remaining[p][a] += 1;
        }
    }

    let lo = |t: usize| t.saturating_sub(k).div_ceil(k);
    let hi = |t: usize| (t + k) / k;
    let lows: Vec<usize> = totals.iter().map(|&t| lo(t)).collect();
    let highs: Vec<usize> = totals.iter().map(|&t| hi(t)).collect();

    struct Search<'a> {
        k: usize,
        n: usize,
        lows: &'a [usize],
        highs: &'a [usize],
        size_band: (usize, usize),
        rows: &'a [Vec<usize>],
        remaining: &'a [Vec<usize>],
        counts: Vec<Vec<usize>>,
        sizes: Vec<usize>,
        nodes: u64,
        budget: u64,
    }
    impl Search<'_> {
        fn ok(&self, p: usize) -> bool {
            let left = self.n - p;
            let need: usize = self.sizes.iter().map(|&s| self.size_band.0.saturating_sub(s)).sum();
            if need > left {
                return false;
            }
            for (a, &low) in self.lows.iter().enumerate() {
                let need: usize = self.counts[a].iter().map(|&c| low.saturating_sub(c)).sum();
                if need > self.remaining[p][a] {
                    return false;
                }
            }
            true
        }
        fn go(&mut self, p: usize, used: usize) -> Option<bool> {
            self.nodes += 1;
            if self.nodes > self.budget {
                return None;
            }
            if p == self.n {
                return Some(true);
            }
            // folds beyond the first unused one are symmetric
            for f in 0..(used + 1).min(self.k) {
                if self.sizes[f] + 1 > self.size_band.1 {
                    continue;
                }
                if self.rows[p].iter().any(|&a| self.counts[a][f] + 1 > self.highs[a]) {
                    continue;
                }
                self.sizes[f] += 1;
                for &a in &self.rows[p] {
                    self.counts[a][f] += 1;
                }
                let result = if self.ok(p + 1) {
                    self.go(p + 1, used.max(f + 1))
                } else {
                    Some(false)
                };
                self.sizes[f] -= 1;
                for &a in &self.rows[p] {
                    self.counts[a][f] -= 1;
                }
                match result {
                    Some(true) => return Some(true),
                    None => return None,
                    Some(false) => {}
                }
            }
            Some(false)
        }
    }
    let mut search = Search {
        k,
        n,
        lows: &lows,
        highs: &highs,
        size_band: (lo(n), hi(n)),
        rows: &rows,
        remaining: &remaining,
        counts: vec![vec![0; k]; active.len()],
        sizes: vec![0; k],
        nodes: 0,
        budget: node_budget,
    };
    match search.go(0, 0) {
        Some(true) => Feasibility::Feasible,
        Some(false) => Feasibility::Infeasible,
        None => Feasibility::Unknown,
    }
}
