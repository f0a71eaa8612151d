//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every forward op appends a node to a [`Tape`] and returns a [`Var`] handle.
//! [`Tape::backward`] walks the nodes in exact reverse order, accumulating
//! gradients into every node that (transitively) depends on a leaf created with
//! `requires_grad`. Activations are laid out batch-first: `(B, C, T)` for
//! signals and `(B, F)` for feature vectors.
//!
//! ```
//! use ecg_senet::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(2.0).requires_grad());
//! let y = tape.scale(x, 3.0);
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[3.0]);
//! ```

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zeros shape is consistent")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("full shape is consistent")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar shape is consistent")
    }

    /// Marks the tensor as a differentiation target.
    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, value: bool) {
        self.requires_grad = value;
    }

    pub fn is_requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm running statistics, updated in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormOptions {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Dropout {
        x: Var,
        keep: Vec<bool>,
        scale: f64,
    },
    ChannelScale {
        x: Var,
        s: Var,
    },
    Add(Var, Var),
    Concat(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    BceMean {
        logits: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records forward ops and runs the reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    free_intermediates: bool,
    freed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that releases intermediate values and gradients as the reverse
    /// pass consumes them. Only leaf tensors remain readable after `backward`.
    pub fn low_memory() -> Self {
        Self {
            free_intermediates: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        self.backward_done = false;
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        if !matches!(op, Op::Leaf) {
            value.requires_grad = op_inputs(&op).iter().any(|&v| self.requires(v));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape3(&self, v: Var, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape(v) {
            [b, c, t] => Ok((b, c, t)),
            ref s => Err(Error::ShapeMismatch(format!("{what} expects (B, C, T), got {s:?}"))),
        }
    }

    fn shape2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [b, f] => Ok((b, f)),
            ref s => Err(Error::ShapeMismatch(format!("{what} expects (B, F), got {s:?}"))),
        }
    }

    /// 1-D cross-correlation with zero padding.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (batch, c_in, t_in) = self.shape3(x, "conv1d")?;
        let (c_out, wc_in, k) = self.shape3(w, "conv1d weight")?;
        if wc_in != c_in {
            return Err(Error::ShapeMismatch(format!(
                "conv1d input has {c_in} channels, weight expects {wc_in}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::ShapeMismatch(format!("conv1d kernel must be odd, got {k}")));
        }
        if stride == 0 || t_in + 2 * pad < k {
            return Err(Error::ShapeMismatch(format!(
                "conv1d: length {t_in} with padding {pad} is shorter than kernel {k}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::ShapeMismatch(format!(
                    "conv1d bias must be [{c_out}], got {:?}",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom {
            c_in,
            t_in,
            k,
            stride,
            pad,
            t_out: (t_in + 2 * pad - k) / stride + 1,
        };
        let ck = c_in * k;
        let mut out = vec![0.0; batch * c_out * geom.t_out];
        let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { ck * geom.t_out }];
        {
            let xs = self.data(x);
            let ws = self.data(w);
            for bi in 0..batch {
                let xb = &xs[bi * c_in * t_in..(bi + 1) * c_in * t_in];
                let cols = if geom.is_pointwise() {
                    xb
                } else {
                    im2col(xb, &geom, &mut col);
                    &col
                };
                let ob = &mut out[bi * c_out * geom.t_out..(bi + 1) * c_out * geom.t_out];
                matmul(ws, false, cols, false, c_out, ck, geom.t_out, ob, false);
            }
            if let Some(b) = b {
                let bs = self.data(b);
                for row in out.chunks_exact_mut(geom.t_out).enumerate() {
                    let bias = bs[row.0 % c_out];
                    row.1.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let value = Tensor::new(vec![batch, c_out, geom.t_out], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, stride, pad }))
    }

    /// Per-channel normalisation over `(B, T)`.
    ///
    /// Train mode normalises with batch statistics and folds them into
    /// `running` (the variance update uses the unbiased batch estimate); eval
    /// mode normalises with `running`.
    pub fn batch_norm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        mode: Mode,
        opts: BatchNormOptions,
    ) -> Result<Var> {
        let (batch, c, t) = self.shape3(x, "batch_norm1d")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch(format!(
                "batch_norm1d affine params must be [{c}]"
            )));
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "batch_norm1d running stats must have {c} channels"
            )));
        }
        let n = batch * t;
        let train = mode == Mode::Train;
        if train && n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        let xs = self.data(x);
        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            if train {
                let mut sum = 0.0;
                for bi in 0..batch {
                    sum += xs[(bi * c + ch) * t..(bi * c + ch + 1) * t].iter().sum::<f64>();
                }
                let m = sum / n as f64;
                let mut ss = 0.0;
                for bi in 0..batch {
                    ss += xs[(bi * c + ch) * t..(bi * c + ch + 1) * t]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f64>();
                }
                let var = ss / n as f64;
                mean[ch] = m;
                inv_std[ch] = 1.0 / (var + opts.eps).sqrt();
                let unbiased = ss / (n - 1) as f64;
                running.mean[ch] = (1.0 - opts.momentum) * running.mean[ch] + opts.momentum * m;
                running.var[ch] = (1.0 - opts.momentum) * running.var[ch] + opts.momentum * unbiased;
            } else {
                mean[ch] = running.mean[ch];
                inv_std[ch] = 1.0 / (running.var[ch] + opts.eps).sqrt();
            }
        }
        let gs = self.data(gamma);
        let bs = self.data(beta);
        let mut out = vec![0.0; xs.len()];
        for (row, (src, dst)) in xs.chunks_exact(t).zip(out.chunks_exact_mut(t)).enumerate() {
            let ch = row % c;
            let (m, is, g, b) = (mean[ch], inv_std[ch], gs[ch], bs[ch]);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = g * (v - m) * is + b;
            }
        }
        let value = Tensor::new(vec![batch, c, t], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data.iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(src.shape.clone(), data).expect("same shape");
        self.push(value, Op::Relu(x))
    }

    /// Logistic function, kept strictly inside `(0, 1)`.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data.iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(src.shape.clone(), data).expect("same shape");
        self.push(value, Op::Sigmoid(x))
    }

    /// Max pooling with -inf padding; ties go to the lowest index.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (batch, c, t) = self.shape3(x, "max_pool1d")?;
        if kernel == 0 || stride == 0 || 2 * pad > kernel || t + 2 * pad < kernel {
            return Err(Error::ShapeMismatch(format!(
                "max_pool1d: bad geometry kernel={kernel} stride={stride} pad={pad} for length {t}"
            )));
        }
        let t_out = (t + 2 * pad - kernel) / stride + 1;
        let xs = self.data(x);
        let mut out = Vec::with_capacity(batch * c * t_out);
        let mut argmax = Vec::with_capacity(batch * c * t_out);
        for row in xs.chunks_exact(t) {
            for j in 0..t_out {
                let start = (j * stride) as isize - pad as isize;
                let lo = start.max(0) as usize;
                let hi = ((start + kernel as isize) as usize).min(t);
                let mut best = lo;
                for i in lo + 1..hi {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                out.push(row[best]);
                argmax.push(best as u32);
            }
        }
        let value = Tensor::new(vec![batch, c, t_out], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (batch, c, t) = self.shape3(x, "global_avg_pool")?;
        let data = self
            .data(x)
            .chunks_exact(t)
            .map(|row| row.iter().sum::<f64>() / t as f64)
            .collect();
        let value = Tensor::new(vec![batch, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    /// `x · wᵀ + b` with `w` shaped `(F_out, F_in)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (batch, f_in) = self.shape2(x, "dense")?;
        let (f_out, wf_in) = self.shape2(w, "dense weight")?;
        if wf_in != f_in {
            return Err(Error::ShapeMismatch(format!(
                "dense input has {f_in} features, weight expects {wf_in}"
            )));
        }
        let mut out = vec![0.0; batch * f_out];
        matmul(
            self.data(x),
            false,
            self.data(w),
            true,
            batch,
            f_in,
            f_out,
            &mut out,
            false,
        );
        if let Some(b) = b {
            if self.shape(b) != [f_out] {
                return Err(Error::ShapeMismatch(format!("dense bias must be [{f_out}]")));
            }
            let bs = self.data(b);
            for row in out.chunks_exact_mut(f_out) {
                row.iter_mut().zip(bs).for_each(|(v, b)| *v += b);
            }
        }
        let value = Tensor::new(vec![batch, f_out], out)?;
        Ok(self.push(value, Op::Dense { x, w, b }))
    }

    /// Inverted dropout. Eval mode and `rate == 0` return `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let src = self.value(x);
        let keep: Vec<bool> = (0..src.len()).map(|_| rng.random::<f64>() >= rate).collect();
        let data = src
            .data
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { 0.0 })
            .collect();
        let value = Tensor::new(src.shape.clone(), data)?;
        Ok(self.push(value, Op::Dropout { x, keep, scale }))
    }

    /// Multiplies every `(b, c)` row of `x` by the scalar `s[b, c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (batch, c, t) = self.shape3(x, "channel_scale")?;
        if self.shape(s) != [batch, c] {
            return Err(Error::ShapeMismatch(format!(
                "channel_scale gate must be [{batch}, {c}], got {:?}",
                self.shape(s)
            )));
        }
        let ss = self.data(s);
        let mut out = self.data(x).to_vec();
        for (row, chunk) in out.chunks_exact_mut(t).enumerate() {
            let g = ss[row];
            chunk.iter_mut().for_each(|v| *v *= g);
        }
        let value = Tensor::new(vec![batch, c, t], out)?;
        Ok(self.push(value, Op::ChannelScale { x, s }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Joins `(B, F1)` and `(B, F2)` into `(B, F1 + F2)`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, fa) = self.shape2(a, "concat")?;
        let (bb, fb) = self.shape2(b, "concat")?;
        if batch != bb {
            return Err(Error::ShapeMismatch(format!("concat batch sizes {batch} vs {bb}")));
        }
        let mut data = Vec::with_capacity(batch * (fa + fb));
        for (ra, rb) in self.data(a).chunks_exact(fa).zip(self.data(b).chunks_exact(fb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let value = Tensor::new(vec![batch, fa + fb], data)?;
        Ok(self.push(value, Op::Concat(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = self.value(x);
        let data = src.data.iter().map(|v| v * factor).collect();
        let value = Tensor::new(src.shape.clone(), data).expect("same shape");
        self.push(value, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets,
    /// evaluated in the overflow-free logit form.
    pub fn bce_mean(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let src = self.value(logits);
        if src.shape.len() != 2 || targets.len() != src.len() {
            return Err(Error::ShapeMismatch(format!(
                "bce_mean: logits {:?} vs {} targets",
                src.shape,
                targets.len()
            )));
        }
        let total: f64 = src
            .data
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let loss = total / src.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceMean {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done || self.freed {
            return Err(Error::DoubleBackward);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.requires(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let contributions = {
                let node = &self.nodes[i];
                match node.value.grad.as_deref() {
                    Some(g) if node.value.requires_grad => self.node_backward(&node.op, g),
                    _ => Vec::new(),
                }
            };
            for (v, g) in contributions {
                let target = &mut self.nodes[v.0].value;
                match &mut target.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            if self.free_intermediates && !matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                node.value.grad = None;
                node.value.data = Vec::new();
                self.freed = true;
            }
        }
        Ok(())
    }

    fn node_backward(&self, op: &Op, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut out = Vec::new();
        match *op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, stride, pad } => {
                let (batch, c_in, t_in) = self.shape3(x, "").expect("checked in forward");
                let (c_out, _, k) = self.shape3(w, "").expect("checked in forward");
                let geom = ConvGeom {
                    c_in,
                    t_in,
                    k,
                    stride,
                    pad,
                    t_out: (t_in + 2 * pad - k) / stride + 1,
                };
                let t_out = geom.t_out;
                let ck = c_in * k;
                let xs = self.data(x);
                let ws = self.data(w);
                let need_x = self.requires(x);
                let need_w = self.requires(w);
                let mut gx = if need_x { vec![0.0; xs.len()] } else { Vec::new() };
                let mut gw = if need_w { vec![0.0; ws.len()] } else { Vec::new() };
                let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { ck * t_out }];
                for bi in 0..batch {
                    let gb = &g[bi * c_out * t_out..(bi + 1) * c_out * t_out];
                    let xb = &xs[bi * c_in * t_in..(bi + 1) * c_in * t_in];
                    if need_w {
                        let cols = if geom.is_pointwise() {
                            xb
                        } else {
                            im2col(xb, &geom, &mut col);
                            &col
                        };
                        matmul(gb, false, cols, true, c_out, t_out, ck, &mut gw, true);
                    }
                    if need_x {
                        let gxb = &mut gx[bi * c_in * t_in..(bi + 1) * c_in * t_in];
                        if geom.is_pointwise() {
                            matmul(ws, true, gb, false, ck, c_out, t_out, gxb, true);
                        } else {
                            matmul(ws, true, gb, false, ck, c_out, t_out, &mut col, false);
                            col2im(&col, &geom, gxb);
                        }
                    }
                }
                if need_x {
                    out.push((x, gx));
                }
                if need_w {
                    out.push((w, gw));
                }
                if let Some(b) = b.filter(|&b| self.requires(b)) {
                    let mut gbias = vec![0.0; c_out];
                    for (row, chunk) in g.chunks_exact(t_out).enumerate() {
                        gbias[row % c_out] += chunk.iter().sum::<f64>();
                    }
                    out.push((b, gbias));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ref mean,
                ref inv_std,
                train,
            } => {
                let (batch, c, t) = self.shape3(x, "").expect("checked in forward");
                let xs = self.data(x);
                let gs = self.data(gamma);
                let n = (batch * t) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (row, (xr, gr)) in xs.chunks_exact(t).zip(g.chunks_exact(t)).enumerate() {
                    let ch = row % c;
                    let (m, is) = (mean[ch], inv_std[ch]);
                    let mut dg = 0.0;
                    let mut db = 0.0;
                    for (&xv, &gv) in xr.iter().zip(gr) {
                        dg += gv * (xv - m) * is;
                        db += gv;
                    }
                    dgamma[ch] += dg;
                    dbeta[ch] += db;
                }
                if self.requires(x) {
                    let mut gx = vec![0.0; xs.len()];
                    for (row, ((xr, gr), dst)) in xs
                        .chunks_exact(t)
                        .zip(g.chunks_exact(t))
                        .zip(gx.chunks_exact_mut(t))
                        .enumerate()
                    {
                        let ch = row % c;
                        let (m, is, gm) = (mean[ch], inv_std[ch], gs[ch]);
                        if train {
                            let k = gm * is / n;
                            let (sg, sgx) = (dbeta[ch], dgamma[ch]);
                            for ((d, &xv), &gv) in dst.iter_mut().zip(xr).zip(gr) {
                                let xhat = (xv - m) * is;
                                *d = k * (n * gv - sg - xhat * sgx);
                            }
                        } else {
                            for (d, &gv) in dst.iter_mut().zip(gr) {
                                *d = gv * gm * is;
                            }
                        }
                    }
                    out.push((x, gx));
                }
                if self.requires(gamma) {
                    out.push((gamma, dgamma));
                }
                if self.requires(beta) {
                    out.push((beta, dbeta));
                }
            }
            Op::Relu(x) => {
                if self.requires(x) {
                    let xs = self.data(x);
                    let gx = g.iter().zip(xs).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
                    out.push((x, gx));
                }
            }
            Op::Sigmoid(x) => {
                if self.requires(x) {
                    let gx = g
                        .iter()
                        .zip(self.data(x))
                        .map(|(&g, &v)| {
                            let s = sigmoid(v);
                            g * s * (1.0 - s)
                        })
                        .collect();
                    out.push((x, gx));
                }
            }
            Op::MaxPool { x, ref argmax } => {
                if self.requires(x) {
                    let (_, _, t) = self.shape3(x, "").expect("checked in forward");
                    let t_out = g.len() / (self.value(x).len() / t);
                    let mut gx = vec![0.0; self.value(x).len()];
                    for (j, (&gv, &idx)) in g.iter().zip(argmax).enumerate() {
                        let row = j / t_out;
                        gx[row * t + idx as usize] += gv;
                    }
                    out.push((x, gx));
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.requires(x) {
                    let (_, _, t) = self.shape3(x, "").expect("checked in forward");
                    let inv = 1.0 / t as f64;
                    let gx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, t)).collect();
                    out.push((x, gx));
                }
            }
            Op::Dense { x, w, b } => {
                let (batch, f_in) = self.shape2(x, "").expect("checked in forward");
                let (f_out, _) = self.shape2(w, "").expect("checked in forward");
                if self.requires(x) {
                    let mut gx = vec![0.0; batch * f_in];
                    matmul(g, false, self.data(w), false, batch, f_out, f_in, &mut gx, false);
                    out.push((x, gx));
                }
                if self.requires(w) {
                    let mut gw = vec![0.0; f_out * f_in];
                    matmul(g, true, self.data(x), false, f_out, batch, f_in, &mut gw, false);
                    out.push((w, gw));
                }
                if let Some(b) = b.filter(|&b| self.requires(b)) {
                    let mut gb = vec![0.0; f_out];
                    for row in g.chunks_exact(f_out) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    out.push((b, gb));
                }
            }
            Op::Dropout { x, ref keep, scale } => {
                if self.requires(x) {
                    let gx = g
                        .iter()
                        .zip(keep)
                        .map(|(&g, &k)| if k { g * scale } else { 0.0 })
                        .collect();
                    out.push((x, gx));
                }
            }
            Op::ChannelScale { x, s } => {
                let (_, _, t) = self.shape3(x, "").expect("checked in forward");
                let xs = self.data(x);
                let ss = self.data(s);
                if self.requires(x) {
                    let mut gx = g.to_vec();
                    for (row, chunk) in gx.chunks_exact_mut(t).enumerate() {
                        let gate = ss[row];
                        chunk.iter_mut().for_each(|v| *v *= gate);
                    }
                    out.push((x, gx));
                }
                if self.requires(s) {
                    let gs = g
                        .chunks_exact(t)
                        .zip(xs.chunks_exact(t))
                        .map(|(gr, xr)| dot(gr, xr))
                        .collect();
                    out.push((s, gs));
                }
            }
            Op::Add(a, b) => {
                if self.requires(a) {
                    out.push((a, g.to_vec()));
                }
                if self.requires(b) {
                    out.push((b, g.to_vec()));
                }
            }
            Op::Concat(a, b) => {
                let (_, fa) = self.shape2(a, "").expect("checked in forward");
                let (_, fb) = self.shape2(b, "").expect("checked in forward");
                let rows = g.chunks_exact(fa + fb);
                if self.requires(a) {
                    out.push((a, rows.clone().flat_map(|r| r[..fa].to_vec()).collect()));
                }
                if self.requires(b) {
                    out.push((b, rows.flat_map(|r| r[fa..].to_vec()).collect()));
                }
            }
            Op::Scale(x, factor) => {
                if self.requires(x) {
                    out.push((x, g.iter().map(|v| v * factor).collect()));
                }
            }
            Op::Sum(x) => {
                if self.requires(x) {
                    out.push((x, vec![g[0]; self.value(x).len()]));
                }
            }
            Op::BceMean { logits, ref targets } => {
                if self.requires(logits) {
                    let k = g[0] / targets.len() as f64;
                    let gx = self
                        .data(logits)
                        .iter()
                        .zip(targets)
                        .map(|(&x, &t)| k * (logistic(x) - t))
                        .collect();
                    out.push((logits, gx));
                }
            }
        }
        out
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match *op {
        Op::Leaf => vec![],
        Op::Conv1d { x, w, b, .. } | Op::Dense { x, w, b } => {
            let mut v = vec![x, w];
            v.extend(b);
            v
        }
        Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::GlobalAvgPool(x)
        | Op::Scale(x, _)
        | Op::Sum(x)
        | Op::MaxPool { x, .. }
        | Op::Dropout { x, .. } => vec![x],
        Op::BceMean { logits, .. } => vec![logits],
        Op::ChannelScale { x, s } => vec![x, s],
        Op::Add(a, b) | Op::Concat(a, b) => vec![a, b],
    }
}

/// Plain logistic function without clamping.
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const SIGMOID_LO: f64 = f64::MIN_POSITIVE;
const SIGMOID_HI: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function clamped to the open unit interval.
pub fn sigmoid(x: f64) -> f64 {
    logistic(x).clamp(SIGMOID_LO, SIGMOID_HI)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    t_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `t` whose tap `kk` lands inside the input.
    fn valid_range(&self, kk: usize) -> (usize, usize) {
        // input index = t * stride + kk - pad, must lie in [0, t_in)
        let lo = if kk >= self.pad {
            0
        } else {
            (self.pad - kk).div_ceil(self.stride)
        };
        let hi = if self.t_in + self.pad > kk {
            ((self.t_in + self.pad - kk - 1) / self.stride + 1).min(self.t_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn im2col(x: &[f64], geom: &ConvGeom, col: &mut [f64]) {
    let t_out = geom.t_out;
    for i in 0..geom.c_in {
        let src = &x[i * geom.t_in..(i + 1) * geom.t_in];
        for kk in 0..geom.k {
            let row = &mut col[(i * geom.k + kk) * t_out..(i * geom.k + kk + 1) * t_out];
            let (lo, hi) = geom.valid_range(kk);
            row[..lo].fill(0.0);
            row[hi..].fill(0.0);
            if geom.stride == 1 {
                let start = lo + kk - geom.pad;
                row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
            } else {
                for (t, r) in row.iter_mut().enumerate().take(hi).skip(lo) {
                    *r = src[t * geom.stride + kk - geom.pad];
                }
            }
        }
    }
}

fn col2im(col: &[f64], geom: &ConvGeom, gx: &mut [f64]) {
    let t_out = geom.t_out;
    for i in 0..geom.c_in {
        let dst = &mut gx[i * geom.t_in..(i + 1) * geom.t_in];
        for kk in 0..geom.k {
            let row = &col[(i * geom.k + kk) * t_out..(i * geom.k + kk + 1) * t_out];
            let (lo, hi) = geom.valid_range(kk);
            if geom.stride == 1 {
                let start = lo + kk - geom.pad;
                dst[start..start + (hi - lo)]
                    .iter_mut()
                    .zip(&row[lo..hi])
                    .for_each(|(d, v)| *d += v);
            } else {
                for (t, v) in row.iter().enumerate().take(hi).skip(lo) {
                    dst[t * geom.stride + kk - geom.pad] += v;
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `c = op(a) · op(b)` (or `c +=` when `accumulate`), all row-major.
///
/// `op(a)` is `m × k`: `a` is stored `m × k`, or `k × m` when `a_t`.
/// `op(b)` is `k × n`: `b` is stored `k × n`, or `n × k` when `b_t`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul(
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assert above bounds every index dgemm touches for these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
