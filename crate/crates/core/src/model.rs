//! The squeeze-and-excitation ResNet.
//!
//! Feature extraction is a wide-kernel stem (conv, BN, ReLU, max-pool)
//! followed by residual blocks and global average pooling. Each block runs
//! `conv → BN → ReLU → dropout → conv → BN → SE` on its main path and adds an
//! identity (or 1×1 projection) shortcut before the final ReLU. The SE gate is
//! `s = sigmoid(W2 · relu(W1 · z))` with `z` the per-channel mean. Pooled deep
//! features are concatenated with the demographic vector and mapped to 24
//! logits by one dense layer.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchNormOptions, Mode, RunningStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::preprocess::DEMOGRAPHIC_DIM;
use crate::record_io::{Signal, NUM_CLASSES, NUM_LEADS};

/// Rational channel multiplier, e.g. `1/4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WidthScale {
    pub num: usize,
    pub den: usize,
}

impl WidthScale {
    pub const ONE: WidthScale = WidthScale { num: 1, den: 1 };

    pub fn new(num: usize, den: usize) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidConfig("width scale must be positive".into()));
        }
        Ok(Self { num, den })
    }

    fn apply(&self, channels: usize) -> Result<usize> {
        let scaled = channels * self.num;
        if !scaled.is_multiple_of(self.den) || scaled == 0 {
            return Err(Error::InvalidConfig(format!(
                "width scale {self} does not give an integer channel count for {channels}"
            )));
        }
        Ok(scaled / self.den)
    }
}

impl fmt::Display for WidthScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for WidthScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("bad width scale `{s}`, expected e.g. 1/4"));
        match s.split_once('/') {
            Some((n, d)) => Self::new(
                n.trim().parse().map_err(|_| bad())?,
                d.trim().parse().map_err(|_| bad())?,
            ),
            None => Self::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stem_filters: usize,
    pub stem_kernel: usize,
    pub block_kernel: usize,
    pub num_blocks: usize,
    pub channel_plan: Vec<usize>,
    /// 1-based indices of the blocks that halve the temporal length.
    pub downsample_blocks: Vec<usize>,
    pub se_reduction: usize,
    pub dropout_rate: f64,
    pub demographic_dim: usize,
    pub num_classes: usize,
    pub width_scale: WidthScale,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stem_filters: 64,
            stem_kernel: 15,
            block_kernel: 7,
            num_blocks: 8,
            channel_plan: vec![64, 64, 128, 128, 256, 256, 512, 512],
            downsample_blocks: vec![4, 6, 8],
            se_reduction: 16,
            dropout_rate: 0.2,
            demographic_dim: DEMOGRAPHIC_DIM,
            num_classes: NUM_CLASSES,
            width_scale: WidthScale::ONE,
        }
    }
}

impl ModelConfig {
    /// Full-depth network with narrower channels.
    pub fn scaled(width_scale: WidthScale, se_reduction: usize) -> Self {
        Self {
            width_scale,
            se_reduction,
            ..Self::default()
        }
    }

    /// The first `num_blocks` blocks of the default plan, with the default
    /// downsampling positions that still fall inside it.
    pub fn truncated(num_blocks: usize) -> Self {
        let base = Self::default();
        Self {
            num_blocks,
            channel_plan: base.channel_plan[..num_blocks].to_vec(),
            downsample_blocks: base
                .downsample_blocks
                .into_iter()
                .filter(|&b| b <= num_blocks)
                .collect(),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_blocks == 0 || self.channel_plan.len() != self.num_blocks {
            return bad(format!(
                "channel plan has {} entries for {} blocks",
                self.channel_plan.len(),
                self.num_blocks
            ));
        }
        for (i, &c) in self.channel_plan.iter().enumerate() {
            let expected = self.stem_filters << (i / 2);
            if c != expected {
                return bad(format!(
                    "block {} has {c} channels, the doubling rule requires {expected}",
                    i + 1
                ));
            }
        }
        if self.stem_kernel.is_multiple_of(2) || self.block_kernel.is_multiple_of(2) {
            return bad("kernel sizes must be odd".into());
        }
        if self.downsample_blocks.iter().any(|&b| b == 0 || b > self.num_blocks) {
            return bad("downsampling block index out of range".into());
        }
        if self.se_reduction == 0 {
            return bad("SE reduction must be positive".into());
        }
        for c in std::iter::once(self.stem_filters).chain(self.channel_plan.iter().copied()) {
            let scaled = self.width_scale.apply(c)?;
            if scaled % self.se_reduction != 0 {
                return bad(format!(
                    "SE reduction {} does not divide {scaled} channels",
                    self.se_reduction
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout rate must be in [0, 1)".into());
        }
        if self.num_classes != NUM_CLASSES || self.demographic_dim != DEMOGRAPHIC_DIM {
            return bad(format!(
                "the pipeline is fixed at {NUM_CLASSES} classes and {DEMOGRAPHIC_DIM} demographic features"
            ));
        }
        Ok(())
    }

    pub fn stem_channels(&self) -> usize {
        self.width_scale.apply(self.stem_filters).expect("validated config")
    }

    pub fn block_channels(&self, block: usize) -> usize {
        self.width_scale
            .apply(self.channel_plan[block])
            .expect("validated config")
    }

    /// Stride of 0-based block `block`.
    pub fn block_stride(&self, block: usize) -> usize {
        if self.downsample_blocks.contains(&(block + 1)) {
            2
        } else {
            1
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.block_channels(self.num_blocks - 1)
    }

    pub fn fused_dim(&self) -> usize {
        self.feature_dim() + self.demographic_dim
    }

    fn block_in_channels(&self, block: usize) -> usize {
        if block == 0 {
            self.stem_channels()
        } else {
            self.block_channels(block - 1)
        }
    }

    fn has_projection(&self, block: usize) -> bool {
        self.block_in_channels(block) != self.block_channels(block) || self.block_stride(block) != 1
    }

    /// Every learnable tensor, in construction order: name, shape, fan-in for
    /// He initialisation (`None` for BN and bias terms).
    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<_>, name: &str, c_out: usize, c_in: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![c_out, c_in, k], Init::He(c_in * k)));
            out.push((format!("{name}.bias"), vec![c_out], Init::Zero));
        };
        let bn = |out: &mut Vec<_>, name: &str, c: usize| {
            out.push((format!("{name}.gamma"), vec![c], Init::One));
            out.push((format!("{name}.beta"), vec![c], Init::Zero));
        };
        let c0 = self.stem_channels();
        conv(&mut out, "stem.conv", c0, NUM_LEADS, self.stem_kernel);
        bn(&mut out, "stem.bn", c0);
        for b in 0..self.num_blocks {
            let (c_in, c) = (self.block_in_channels(b), self.block_channels(b));
            let hidden = c / self.se_reduction;
            let p = format!("block{b}");
            conv(&mut out, &format!("{p}.conv1"), c, c_in, self.block_kernel);
            bn(&mut out, &format!("{p}.bn1"), c);
            conv(&mut out, &format!("{p}.conv2"), c, c, self.block_kernel);
            bn(&mut out, &format!("{p}.bn2"), c);
            out.push((format!("{p}.se.w1"), vec![hidden, c], Init::He(c)));
            out.push((format!("{p}.se.w2"), vec![c, hidden], Init::He(hidden)));
            if self.has_projection(b) {
                conv(&mut out, &format!("{p}.proj"), c, c_in, 1);
                bn(&mut out, &format!("{p}.proj_bn"), c);
            }
        }
        let fused = self.fused_dim();
        out.push(("fc.weight".into(), vec![self.num_classes, fused], Init::He(fused)));
        out.push(("fc.bias".into(), vec![self.num_classes], Init::Zero));
        out
    }

    fn bn_layers(&self) -> Vec<(String, usize)> {
        let mut out = vec![("stem.bn".to_string(), self.stem_channels())];
        for b in 0..self.num_blocks {
            let c = self.block_channels(b);
            out.push((format!("block{b}.bn1"), c));
            out.push((format!("block{b}.bn2"), c));
            if self.has_projection(b) {
                out.push((format!("block{b}.proj_bn"), c));
            }
        }
        out
    }

    fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        format!(
            "stem_filters={}\nstem_kernel={}\nblock_kernel={}\nnum_blocks={}\nchannel_plan={}\n\
             downsample_blocks={}\nse_reduction={}\ndropout_rate={}\ndemographic_dim={}\n\
             num_classes={}\nwidth_scale={}\n",
            self.stem_filters,
            self.stem_kernel,
            self.block_kernel,
            self.num_blocks,
            list(&self.channel_plan),
            list(&self.downsample_blocks),
            self.se_reduction,
            self.dropout_rate,
            self.demographic_dim,
            self.num_classes,
            self.width_scale
        )
    }

    fn from_fields(fields: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing config field `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for `{k}`")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|x| x.parse().map_err(|_| Error::Checkpoint(format!("bad list `{k}`"))))
                .collect()
        };
        let config = Self {
            stem_filters: num("stem_filters")?,
            stem_kernel: num("stem_kernel")?,
            block_kernel: num("block_kernel")?,
            num_blocks: num("num_blocks")?,
            channel_plan: list("channel_plan")?,
            downsample_blocks: list("downsample_blocks")?,
            se_reduction: num("se_reduction")?,
            dropout_rate: get("dropout_rate")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad dropout rate".into()))?,
            demographic_dim: num("demographic_dim")?,
            num_classes: num("num_classes")?,
            width_scale: get("width_scale")?.parse()?,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    He(usize),
    Zero,
    One,
}

/// Learnable tensors plus batch-norm running statistics, keyed by layer name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
    pub running: BTreeMap<String, RunningStats>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter `{name}`"))
    }

    pub fn num_learnable(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// He-normal weights, unit BN scale, zero shifts and biases.
pub fn init_params<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ModelParams> {
    config.validate()?;
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in config.layout() {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::He(fan_in) => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| normal.sample(rng)).collect()
            }
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    let running = config
        .bn_layers()
        .into_iter()
        .map(|(name, c)| (name, RunningStats::new(c)))
        .collect();
    Ok(ModelParams { tensors, running })
}

/// Parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ModelParams, requires_grad: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(name, t)| {
                let mut t = t.clone();
                t.set_requires_grad(requires_grad);
                (name.clone(), tape.leaf(t))
            })
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Skip every SE gate, leaving a plain ResNet.
    pub se_bypass: bool,
    pub bn: BatchNormOptions,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            se_bypass: false,
            bn: BatchNormOptions::default(),
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            ..Self::train()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Pooled deep features, `(B, feature_dim)`.
    pub features: Var,
    /// Deep features with demographics appended, `(B, fused_dim)`.
    pub fused: Var,
    pub logits: Var,
    pub probabilities: Var,
    /// SE gate vectors `(B, C)`, one per block.
    pub se_gates: Vec<Var>,
}

/// Channel recalibration: returns the gated output and the gate itself.
pub fn se_block(tape: &mut Tape, x: Var, w1: Var, w2: Var) -> Result<(Var, Var)> {
    let c = tape.shape(x).get(1).copied().unwrap_or(0);
    match (tape.shape(w1), tape.shape(w2)) {
        (&[h1, c1], &[c2, h2]) if c1 == c && c2 == c && h1 == h2 => {}
        (a, b) => {
            return Err(Error::ShapeMismatch(format!(
                "SE weights {a:?}/{b:?} do not fit {c} channels"
            )))
        }
    }
    let z = tape.global_avg_pool(x)?;
    let h = tape.dense(z, w1, None)?;
    let h = tape.relu(h);
    let s = tape.dense(h, w2, None)?;
    let s = tape.sigmoid(s);
    let out = tape.channel_scale(x, s)?;
    Ok((out, s))
}

/// Forward-pass context: bound parameters, running statistics and options.
pub struct Network<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a BoundParams,
    pub running: &'a mut BTreeMap<String, RunningStats>,
    pub opts: ForwardOptions,
}

impl Network<'_> {
    fn conv(&self, tape: &mut Tape, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        tape.conv1d(
            x,
            self.params.var(&format!("{name}.weight")),
            Some(self.params.var(&format!("{name}.bias"))),
            stride,
            pad,
        )
    }

    fn bn(&mut self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let stats = self
            .running
            .get_mut(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("no running stats for `{name}`")))?;
        tape.batch_norm1d(
            x,
            self.params.var(&format!("{name}.gamma")),
            self.params.var(&format!("{name}.beta")),
            stats,
            self.opts.mode,
            self.opts.bn,
        )
    }

    /// One residual block; returns the output and the SE gate (absent in bypass mode).
    pub fn res_block<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        x: Var,
        block: usize,
        rng: &mut R,
    ) -> Result<(Var, Option<Var>)> {
        let (_, c_in, _) = match *tape.shape(x) {
            [b, c, t] => (b, c, t),
            ref s => return Err(Error::ShapeMismatch(format!("res_block expects (B, C, T), got {s:?}"))),
        };
        if c_in != self.config.block_in_channels(block) {
            return Err(Error::ShapeMismatch(format!(
                "block {block} expects {} input channels, got {c_in}",
                self.config.block_in_channels(block)
            )));
        }
        let stride = self.config.block_stride(block);
        let pad = self.config.block_kernel / 2;
        let p = format!("block{block}");

        let h = self.conv(tape, x, &format!("{p}.conv1"), stride, pad)?;
        let h = self.bn(tape, h, &format!("{p}.bn1"))?;
        let h = tape.relu(h);
        let h = tape.dropout(h, self.config.dropout_rate, self.opts.mode, rng)?;
        let h = self.conv(tape, h, &format!("{p}.conv2"), 1, pad)?;
        let h = self.bn(tape, h, &format!("{p}.bn2"))?;
        let (h, gate) = if self.opts.se_bypass {
            (h, None)
        } else {
            let (out, s) = se_block(
                tape,
                h,
                self.params.var(&format!("{p}.se.w1")),
                self.params.var(&format!("{p}.se.w2")),
            )?;
            (out, Some(s))
        };
        let shortcut = if self.config.has_projection(block) {
            let s = self.conv(tape, x, &format!("{p}.proj"), stride, 0)?;
            self.bn(tape, s, &format!("{p}.proj_bn"))?
        } else {
            x
        };
        let sum = tape.add(h, shortcut)?;
        Ok((tape.relu(sum), gate))
    }

    /// Stem, residual blocks and global pooling: `(B, 12, T)` to `(B, feature_dim)`.
    pub fn feature_extractor<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        signal: Var,
        rng: &mut R,
    ) -> Result<(Var, Vec<Var>)> {
        match *tape.shape(signal) {
            [_, NUM_LEADS, _] => {}
            ref s => return Err(Error::ShapeMismatch(format!("expected (B, 12, T) signal, got {s:?}"))),
        }
        let h = self.conv(tape, signal, "stem.conv", 1, self.config.stem_kernel / 2)?;
        let h = self.bn(tape, h, "stem.bn")?;
        let h = tape.relu(h);
        let mut h = tape.max_pool1d(h, 3, 2, 1)?;
        let mut gates = Vec::new();
        for block in 0..self.config.num_blocks {
            let (out, gate) = self.res_block(tape, h, block, rng)?;
            h = out;
            gates.extend(gate);
        }
        Ok((tape.global_avg_pool(h)?, gates))
    }

    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        signal: Var,
        demographics: Var,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let (features, se_gates) = self.feature_extractor(tape, signal, rng)?;
        match (tape.shape(features), tape.shape(demographics)) {
            (&[b1, _], &[b2, d]) if b1 == b2 && d == self.config.demographic_dim => {}
            (_, s) => {
                return Err(Error::ShapeMismatch(format!(
                    "demographics must be (B, {}), got {s:?}",
                    self.config.demographic_dim
                )))
            }
        }
        let fused = tape.concat(features, demographics)?;
        let logits = tape.dense(fused, self.params.var("fc.weight"), Some(self.params.var("fc.bias")))?;
        let probabilities = tape.sigmoid(logits);
        Ok(ForwardOutput {
            features,
            fused,
            logits,
            probabilities,
            se_gates,
        })
    }
}

/// Stack equal-length signals into a `(B, 12, T)` tensor.
pub fn batch_signals(signals: &[Signal]) -> Result<Tensor> {
    let first = signals
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
    let (leads, len) = (first.leads(), first.len());
    let mut data = Vec::with_capacity(signals.len() * leads * len);
    for s in signals {
        if s.leads() != leads || s.len() != len {
            return Err(Error::ShapeMismatch("signals in a batch must share a shape".into()));
        }
        data.extend_from_slice(s.as_slice());
    }
    Tensor::new(vec![signals.len(), leads, len], data)
}

pub fn batch_demographics(rows: &[[f64; DEMOGRAPHIC_DIM]]) -> Result<Tensor> {
    Tensor::new(
        vec![rows.len(), DEMOGRAPHIC_DIM],
        rows.iter().flatten().copied().collect(),
    )
}

/// A trained network together with the class map it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub class_map_identity: String,
}

const MAGIC: &[u8; 6] = b"SENET1";

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, class_map_identity: String, rng: &mut R) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(Self {
            config,
            params,
            class_map_identity,
        })
    }

    /// Eval-mode class probabilities for a batch of inputs.
    pub fn predict_batch(
        &self,
        signals: &[Signal],
        demographics: &[[f64; DEMOGRAPHIC_DIM]],
    ) -> Result<Vec<[f64; NUM_CLASSES]>> {
        if signals.len() != demographics.len() {
            return Err(Error::ShapeMismatch("signal and demographic batch sizes differ".into()));
        }
        let mut tape = Tape::new();
        let params = BoundParams::bind(&mut tape, &self.params, false);
        let signal = tape.leaf(batch_signals(signals)?);
        let demo = tape.leaf(batch_demographics(demographics)?);
        // eval mode never writes running stats; the clone keeps `self` shared
        let mut running = self.params.running.clone();
        let mut net = Network {
            config: &self.config,
            params: &params,
            running: &mut running,
            opts: ForwardOptions::eval(),
        };
        // dropout is inert in eval mode, so this generator is never drawn from
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = net.forward(&mut tape, signal, demo, &mut rng)?;
        Ok(tape
            .data(out.probabilities)
            .chunks_exact(NUM_CLASSES)
            .map(|row| row.try_into().expect("24 columns"))
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let text = format!("{}class_map={}\n", self.config.to_text(), self.class_map_identity);
        write_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        write_u32(&mut out, self.params.tensors.len());
        for (name, t) in &self.params.tensors {
            write_name(&mut out, name);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                write_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_u32(&mut out, self.params.running.len());
        for (name, stats) in &self.params.running {
            write_name(&mut out, name);
            write_u32(&mut out, stats.mean.len());
            for v in stats.mean.iter().chain(&stats.var) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("missing SENET1 magic".into()));
        }
        let text_len = r.u32()?;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let fields: BTreeMap<String, String> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let config = ModelConfig::from_fields(&fields)?;
        let class_map_identity = fields
            .get("class_map")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing class map identity".into()))?;

        let mut tensors = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.f64s(n)?;
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        let mut running = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let c = r.u32()?;
            let mean = r.f64s(c)?;
            let var = r.f64s(c)?;
            running.insert(name, RunningStats { mean, var });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }

        let expected = init_shapes(&config);
        let found: Vec<(String, Vec<usize>)> = tensors.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect();
        if expected != found {
            return Err(Error::Checkpoint(
                "parameter set does not match the stored config".into(),
            ));
        }
        let expected_bn = config.bn_layers().into_iter().collect::<BTreeMap<_, _>>();
        if expected_bn.len() != running.len() || running.iter().any(|(k, s)| expected_bn.get(k) != Some(&s.mean.len()))
        {
            return Err(Error::Checkpoint(
                "running statistics do not match the stored config".into(),
            ));
        }
        Ok(Self {
            config,
            params: ModelParams { tensors, running },
            class_map_identity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::from(e).in_file(path))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}

fn init_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut v: Vec<_> = config.layout().into_iter().map(|(n, s, _)| (n, s)).collect();
    v.sort();
    v
}

fn write_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn write_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn name(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
