//! Reverse-mode differentiation over a fixed operator set.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value. Nodes are appended in evaluation order, so the tape is already
//! topologically sorted and [`Tape::backward`] is a single reverse sweep that
//! visits each node once.
//!
//! ```
//! use latent_tucker::autodiff::Tape;
//! use latent_tucker::DenseTensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(DenseTensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
//! let loss = tape.frobenius_sq(x).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

mod conv;

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_a_bt, matmul_at_b, mode_product, unfold, DenseTensor};
use conv::{conv2d_backward, conv2d_forward, ConvGeometry};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    ModeProduct { x: Var, m: Var, mode: usize },
    Transpose(Var),
    Conv2d { input: Var, kernel: Var, geometry: ConvGeometry },
    BatchNorm { input: Var, gamma: Var, beta: Var, x_hat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu(Var),
    AvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Add(Var, Var),
    Scale(Var, f64),
    FrobeniusSq(Var),
    Sum(Var),
    KernelSlice { theta: Var, block: usize, unit: usize },
    Subsample { x: Var, stride: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: DenseTensor,
    requires_grad: bool,
}

/// Per-channel statistics of one train-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate (biased when only one element per channel).
    pub var: Vec<f64>,
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseTensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&DenseTensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<DenseTensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(msg: String) -> Error {
    Error::DimensionMismatch(msg)
}

fn dims4(t: &DenseTensor, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(shape_err(format!("{what} must be 4-D (NCHW), got {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &DenseTensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// An input tensor. Constants are leaves with `requires_grad = false`.
    pub fn leaf(&mut self, value: DenseTensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: DenseTensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, value: DenseTensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn mode_product(&mut self, x: Var, m: Var, mode: usize) -> Result<Var> {
        let value = mode_product(self.value(x), self.value(m), mode)?;
        Ok(self.push(Op::ModeProduct { x, m, mode }, value, &[x, m]))
    }

    /// Sequential mode products over modes `0..N`.
    pub fn tucker(&mut self, core: Var, factors: &[Var]) -> Result<Var> {
        if factors.len() != self.value(core).order() {
            return Err(shape_err(format!(
                "{} factors for a core of order {}",
                factors.len(),
                self.value(core).order()
            )));
        }
        let mut out = core;
        for (mode, &f) in factors.iter().enumerate() {
            out = self.mode_product(out, f, mode)?;
        }
        Ok(out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(Op::Transpose(x), value, &[x]))
    }

    /// 2-D convolution of an `(N, C, H, W)` input with an `(O, C, KH, KW)`
    /// kernel, zero padding `pad` on every side.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(input), "conv2d input")?;
        let [o, kc, kh, kw] = dims4(self.value(kernel), "conv2d kernel")?;
        if kc != c {
            return Err(shape_err(format!("conv2d kernel expects {kc} channels, input has {c}")));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(format!(
                "conv2d geometry: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
            )));
        }
        let geometry =
            ConvGeometry { batch: n, in_channels: c, height: h, width: w, out_channels: o, kh, kw, stride, pad };
        let data = conv2d_forward(&geometry, self.value(input).data(), self.value(kernel).data());
        let value = DenseTensor::new(vec![n, o, geometry.out_height(), geometry.out_width()], data)?;
        Ok(self.push(Op::Conv2d { input, kernel, geometry }, value, &[input, kernel]))
    }

    /// Train-mode batch norm: normalizes each channel (mode 1) with the batch
    /// statistics and returns them for the running-average update.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (n, c, inner) = self.bn_dims(input, gamma, beta)?;
        let x = self.value(input).data();
        let m = (n * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += x[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter().sum::<f64>();
            }
            mean[ch] = s / m;
            let mut sq = 0.0;
            for b in 0..n {
                sq += x[(b * c + ch) * inner..(b * c + ch + 1) * inner]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
            var[ch] = sq / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (value, x_hat) = self.bn_apply(input, gamma, beta, &mean, &inv_std, n, c, inner)?;
        let unbiased = if m > 1.0 { var.iter().map(|v| v * m / (m - 1.0)).collect() } else { var };
        let stats = BatchStats { mean, var: unbiased };
        let op = Op::BatchNorm { input, gamma, beta, x_hat, inv_std, train: true };
        Ok((self.push(op, value, &[input, gamma, beta]), stats))
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let (n, c, inner) = self.bn_dims(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err(format!("running statistics must have {c} channels")));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (value, x_hat) = self.bn_apply(input, gamma, beta, running_mean, &inv_std, n, c, inner)?;
        let op = Op::BatchNorm { input, gamma, beta, x_hat, inv_std, train: false };
        Ok(self.push(op, value, &[input, gamma, beta]))
    }

    fn bn_dims(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let shape = self.value(input).shape();
        if shape.len() < 2 {
            return Err(shape_err(format!("batch norm input needs (N, C, ..), got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner = shape[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(shape_err(format!(
                    "batch norm {name} has shape {:?}, expected [{c}]",
                    self.value(v).shape()
                )));
            }
        }
        Ok((n, c, inner))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        n: usize,
        c: usize,
        inner: usize,
    ) -> Result<(DenseTensor, Vec<f64>)> {
        let x = self.value(input).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut x_hat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * inner;
                for i in base..base + inner {
                    x_hat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    y[i] = g[ch] * x_hat[i] + b[ch];
                }
            }
        }
        Ok((DenseTensor::new(self.value(input).shape().to_vec(), y)?, x_hat))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value, &[x])
    }

    /// Averages `(N, C, H, W)` over the spatial modes to `(N, C)`.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "avg pool input")?;
        let area = (h * w) as f64;
        let data = self.value(x).data().chunks(h * w).map(|p| p.iter().sum::<f64>() / area).collect();
        let value = DenseTensor::new(vec![n, c], data)?;
        Ok(self.push(Op::AvgPool(x), value, &[x]))
    }

    /// `x wᵀ + b` for `x: (N, I)`, `w: (O, I)`, `b: (O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, i) = self.value(x).matrix_dims()?;
        let (o, wi) = self.value(w).matrix_dims()?;
        if wi != i || self.value(b).shape() != [o] {
            return Err(shape_err(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                self.value(x).shape(),
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let mut data = matmul_a_bt(self.value(x).data(), self.value(w).data(), n, i, o);
        let bias = self.value(b).data();
        for row in data.chunks_mut(o) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let value = DenseTensor::new(vec![n, o], data)?;
        Ok(self.push(Op::Linear { x, w, b }, value, &[x, w, b]))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).matrix_dims()?;
        if labels.len() != n {
            return Err(shape_err(format!("{} labels for a batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &z[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - max).exp() / denom;
            }
            loss += denom.ln() + max - row[label];
        }
        let value = DenseTensor::scalar(loss / n as f64);
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push(op, value, &[logits]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        self.push(Op::Scale(x, factor), value, &[x])
    }

    pub fn frobenius_sq(&mut self, x: Var) -> Result<Var> {
        let value = DenseTensor::scalar(self.value(x).frobenius_sq());
        Ok(self.push(Op::FrobeniusSq(x), value, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = DenseTensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value, &[x])
    }

    /// Kernel `θ[.., .., .., .., block, unit]` of a 6th-order grouped tensor.
    pub fn kernel_slice(&mut self, theta: Var, block: usize, unit: usize) -> Result<Var> {
        let t = self.value(theta);
        let &[d0, d1, d2, d3, d4, d5] = t.shape() else {
            return Err(shape_err(format!("kernel_slice needs a 6th-order tensor, got {:?}", t.shape())));
        };
        if block >= d4 || unit >= d5 {
            return Err(shape_err(format!("slice ({block}, {unit}) outside ({d4}, {d5})")));
        }
        let l = d4 * d5;
        let slot = block * d5 + unit;
        let data = t.data().iter().skip(slot).step_by(l).copied().collect();
        let value = DenseTensor::new(vec![d0, d1, d2, d3], data)?;
        Ok(self.push(Op::KernelSlice { theta, block, unit }, value, &[theta]))
    }

    /// `x[:, :, ::stride, ::stride]`.
    pub fn subsample(&mut self, x: Var, stride: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.value(x), "subsample input")?;
        if stride == 0 {
            return Err(shape_err("subsample stride must be positive".into()));
        }
        let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    data.push(src[(plane * h + y * stride) * w + xx * stride]);
                }
            }
        }
        let value = DenseTensor::new(vec![n, c, ho, wo], data)?;
        Ok(self.push(Op::Subsample { x, stride }, value, &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<DenseTensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseTensor::filled(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<DenseTensor>], var: Var, g: DenseTensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, node: &Node, gy: &DenseTensor, grads: &mut [Option<DenseTensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::ModeProduct { x, m, mode } => {
                if self.needs(*x) {
                    let mt = self.value(*m).transpose()?;
                    self.accumulate(grads, *x, mode_product(gy, &mt, *mode)?);
                }
                if self.needs(*m) {
                    let ug = unfold(gy, *mode)?.matrix;
                    let ux = unfold(self.value(*x), *mode)?.matrix;
                    let (r, cols) = ug.matrix_dims()?;
                    let (d, _) = ux.matrix_dims()?;
                    let data = matmul_a_bt(ug.data(), ux.data(), r, cols, d);
                    self.accumulate(grads, *m, DenseTensor::new(vec![r, d], data)?);
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, gy.transpose()?),
            Op::Conv2d { input, kernel, geometry } => {
                let (dx, dk) = conv2d_backward(
                    geometry,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    gy.data(),
                    self.needs(*input),
                    self.needs(*kernel),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, DenseTensor::new(self.value(*input).shape().to_vec(), dx)?);
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *kernel, DenseTensor::new(self.value(*kernel).shape().to_vec(), dk)?);
                }
            }
            Op::BatchNorm { input, gamma, beta, x_hat, inv_std, train } => {
                let shape = self.value(*input).shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let g = gy.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for i in base..base + inner {
                            dbeta[ch] += g[i];
                            dgamma[ch] += g[i] * x_hat[i];
                        }
                    }
                }
                if self.needs(*input) {
                    let gam = self.value(*gamma).data();
                    let m = (n * inner) as f64;
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            let k = gam[ch] * inv_std[ch];
                            for i in base..base + inner {
                                dx[i] = if *train {
                                    k * (g[i] - dbeta[ch] / m - x_hat[i] * dgamma[ch] / m)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *input, DenseTensor::new(shape.to_vec(), dx)?);
                }
                self.accumulate(grads, *gamma, DenseTensor::new(vec![c], dgamma)?);
                self.accumulate(grads, *beta, DenseTensor::new(vec![c], dbeta)?);
            }
            Op::Relu(x) => {
                let g = self.value(*x).zip_map(gy, |v, g| if v > 0.0 { g } else { 0.0 })?;
                self.accumulate(grads, *x, g);
            }
            Op::AvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let area = shape[2] * shape[3];
                let data = gy.data().iter().flat_map(|&g| std::iter::repeat_n(g / area as f64, area)).collect();
                self.accumulate(grads, *x, DenseTensor::new(shape, data)?);
            }
            Op::Linear { x, w, b } => {
                let (n, i) = self.value(*x).matrix_dims()?;
                let (o, _) = self.value(*w).matrix_dims()?;
                if self.needs(*x) {
                    let dx = matmul(gy.data(), self.value(*w).data(), n, o, i);
                    self.accumulate(grads, *x, DenseTensor::new(vec![n, i], dx)?);
                }
                if self.needs(*w) {
                    let dw = matmul_at_b(gy.data(), self.value(*x).data(), o, n, i);
                    self.accumulate(grads, *w, DenseTensor::new(vec![o, i], dw)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; o];
                    for row in gy.data().chunks(o) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *b, DenseTensor::new(vec![o], db)?);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let (n, k) = self.value(*logits).matrix_dims()?;
                let scale = gy.data()[0] / n as f64;
                let mut d = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    d[r * k + label] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, DenseTensor::new(vec![n, k], d)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, gy.scale(*f)),
            Op::FrobeniusSq(x) => {
                let s = 2.0 * gy.data()[0];
                self.accumulate(grads, *x, self.value(*x).scale(s));
            }
            Op::Sum(x) => {
                let g = DenseTensor::filled(self.value(*x).shape(), gy.data()[0]);
                self.accumulate(grads, *x, g);
            }
            Op::KernelSlice { theta, block, unit } => {
                let shape = self.value(*theta).shape().to_vec();
                let l = shape[4] * shape[5];
                let slot = block * shape[5] + unit;
                let mut d = DenseTensor::zeros(&shape);
                for (e, &g) in gy.data().iter().enumerate() {
                    d.data_mut()[e * l + slot] = g;
                }
                self.accumulate(grads, *theta, d);
            }
            Op::Subsample { x, stride } => {
                let shape = self.value(*x).shape().to_vec();
                let (h, w) = (shape[2], shape[3]);
                let (ho, wo) = (h.div_ceil(*stride), w.div_ceil(*stride));
                let mut d = DenseTensor::zeros(&shape);
                for plane in 0..shape[0] * shape[1] {
                    for y in 0..ho {
                        for xx in 0..wo {
                            d.data_mut()[(plane * h + y * stride) * w + xx * stride] =
                                gy.data()[(plane * ho + y) * wo + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
        }
        Ok(())
    }
}
