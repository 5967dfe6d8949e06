//! Recording tape for reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value. `backward`
//! walks the nodes in reverse, keeping adjoints of intermediates in a
//! scratch buffer and adding the final adjoints of `requires_grad` leaves
//! into their `grad` fields. Calling `backward` twice therefore doubles the
//! leaf gradients unless [`Tape::zero_grad`] is called in between.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::conv::{self, ConvDims};
use super::{dim_err, Mask, Padding, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const BN_EPS: f64 = 1e-5;

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Per-feature batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        dims: ConvDims,
    },
    ApplyMask {
        input: Var,
        mask: Mask,
        channels: usize,
    },
    Relu {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Square {
        input: Var,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
    Scale {
        input: Var,
        factors: Vec<f64>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
        rows: usize,
        k_in: usize,
        k_out: usize,
    },
    GlobalAvgPool {
        input: Var,
        mask: Mask,
        channels: usize,
    },
    CausalAvgPool {
        input: Var,
        mask: Mask,
        channels: usize,
    },
    ColumnsToRows {
        input: Var,
        batch: usize,
        channels: usize,
        len: usize,
    },
    SegmentSum {
        input: Var,
        groups: Vec<Vec<usize>>,
        width: usize,
        mean: bool,
    },
    ConcatRows {
        inputs: Vec<Var>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mask: Mask,
        channels: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    BinaryCe {
        logits: Var,
        labels: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SigmoidCe {
        logits: Var,
        labels: Vec<usize>,
        classes: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-threaded record of executed primitives.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

/// Binary cross entropy of one logit against a 0/1 label.
pub fn loss_binary_ce(label: f64, logit: f64) -> Result<f64, TensorError> {
    if !logit.is_finite() || !label.is_finite() {
        return Err(TensorError::NonFinite("binary cross entropy input"));
    }
    Ok(softplus(logit) - label * logit)
}

/// Softmax cross entropy of a logit vector against a class index.
pub fn loss_softmax_ce(label: usize, logits: &[f64]) -> Result<f64, TensorError> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(TensorError::NonFinite("softmax cross entropy logits"));
    }
    if label >= logits.len() {
        return dim_err(format!("label {label} out of range for {} logits", logits.len()));
    }
    Ok(-log_softmax_row(logits)[label])
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.index].needs_grad);
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn check(&self, v: Var) -> Result<(), TensorError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::Usage("variable is not recorded on this tape".into()));
        }
        Ok(())
    }

    /// Records an input tensor; its `requires_grad` flag decides whether a
    /// gradient is accumulated for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        let index = self.nodes.len();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.index).and_then(|n| n.value.grad())
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    /// Whether each ReLU input entry on the tape is positive, in recording
    /// order. Two points with equal patterns lie in the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { input } => Some(self.data(input)),
                _ => None,
            })
            .flat_map(|d| d.iter().map(|&x| x > 0.0))
            .collect()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.index].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.index].value.data()
    }

    fn shape3(&self, v: Var, what: &str) -> Result<(usize, usize, usize), TensorError> {
        match *self.shape(v) {
            [n, c, l] => Ok((n, c, l)),
            ref s => dim_err(format!("{what} expects an (N, C, L) tensor, got {s:?}")),
        }
    }

    fn shape2(&self, v: Var, what: &str) -> Result<(usize, usize), TensorError> {
        match *self.shape(v) {
            [r, k] => Ok((r, k)),
            ref s => dim_err(format!("{what} expects a (rows, K) tensor, got {s:?}")),
        }
    }

    fn check_mask(mask: &Mask, n: usize, l: usize) -> Result<(), TensorError> {
        if mask.rows() != n || mask.width() != l {
            return dim_err(format!(
                "mask is {}x{} but activations have {n} rows of length {l}",
                mask.rows(),
                mask.width()
            ));
        }
        Ok(())
    }

    /// Batched cross-correlation: `(N, C_in, L) * (C_out, C_in, k) -> (N, C_out, L)`.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        padding: Padding,
    ) -> Result<Var, TensorError> {
        for v in [input, weight, bias] {
            self.check(v)?;
        }
        let (batch, c_in, len) = self.shape3(input, "conv1d")?;
        let (c_out, wc_in, kernel) = match *self.shape(weight) {
            [o, i, k] => (o, i, k),
            ref s => return dim_err(format!("conv1d weight must be (C_out, C_in, k), got {s:?}")),
        };
        if wc_in != c_in {
            return dim_err(format!("conv1d weight expects {wc_in} input rows, got {c_in}"));
        }
        if kernel == 0 || len == 0 {
            return dim_err("conv1d needs k >= 1 and L >= 1");
        }
        if self.shape(bias) != [c_out] {
            return dim_err(format!("conv1d bias must have {c_out} entries"));
        }
        let dims = ConvDims {
            batch,
            c_in,
            c_out,
            len,
            kernel,
            pad_left: padding.left(kernel),
        };
        let out = conv::conv1d_forward(self.data(input), self.data(weight), self.data(bias), dims);
        let value = Tensor::new(vec![batch, c_out, len], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                weight,
                bias,
                dims,
            },
            &[input, weight, bias],
        ))
    }

    /// Zeroes every column outside the mask.
    pub fn apply_mask(&mut self, input: Var, mask: &Mask) -> Result<Var, TensorError> {
        self.check(input)?;
        let (n, c, l) = self.shape3(input, "apply_mask")?;
        Self::check_mask(mask, n, l)?;
        let mut out = self.data(input).to_vec();
        for (row, chunk) in out.chunks_exact_mut(c * l).enumerate() {
            let valid = mask.valid(row);
            for feat in chunk.chunks_exact_mut(l) {
                feat[valid..].fill(0.0);
            }
        }
        let value = Tensor::new(vec![n, c, l], out)?;
        Ok(self.push(
            value,
            Op::ApplyMask {
                input,
                mask: mask.clone(),
                channels: c,
            },
            &[input],
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, TensorError> {
        self.check(input)?;
        let src = &self.nodes[input.index].value;
        let out = src.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Relu { input }, &[input]))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var, TensorError> {
        self.check(lhs)?;
        self.check(rhs)?;
        if self.shape(lhs) != self.shape(rhs) {
            return dim_err(format!(
                "add of {:?} and {:?}",
                self.shape(lhs),
                self.shape(rhs)
            ));
        }
        let out = self
            .data(lhs)
            .iter()
            .zip(self.data(rhs))
            .map(|(a, b)| a + b)
            .collect();
        let value = Tensor::new(self.shape(lhs).to_vec(), out)?;
        Ok(self.push(value, Op::Add { lhs, rhs }, &[lhs, rhs]))
    }

    pub fn square(&mut self, input: Var) -> Result<Var, TensorError> {
        self.check(input)?;
        let out = self.data(input).iter().map(|x| x * x).collect();
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        Ok(self.push(value, Op::Square { input }, &[input]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var, TensorError> {
        self.check(input)?;
        let s = self.data(input).iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { input }, &[input]))
    }

    /// `sum(weights * input)` as a scalar; `weights` are constants.
    pub fn weighted_sum(&mut self, input: Var, weights: &[f64]) -> Result<Var, TensorError> {
        self.check(input)?;
        if weights.len() != self.nodes[input.index].value.numel() {
            return dim_err("weighted_sum weights must match the input size");
        }
        let s = self.data(input).iter().zip(weights).map(|(x, w)| x * w).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
            &[input],
        ))
    }

    /// Inverted dropout. A rate of zero records nothing and returns `input`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f64,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        self.check(input)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Usage(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let factors: Vec<f64> = (0..self.nodes[input.index].value.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self
            .data(input)
            .iter()
            .zip(&factors)
            .map(|(x, f)| x * f)
            .collect();
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        Ok(self.push(value, Op::Scale { input, factors }, &[input]))
    }

    /// Affine map on rows: `(rows, K_in) -> (rows, K_out)` with `W: (K_out, K_in)`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        for v in [input, weight, bias] {
            self.check(v)?;
        }
        let (rows, k_in) = self.shape2(input, "dense")?;
        let (k_out, wk_in) = self.shape2(weight, "dense weight")?;
        if wk_in != k_in {
            return dim_err(format!("dense weight expects {wk_in} inputs, got {k_in}"));
        }
        if self.shape(bias) != [k_out] {
            return dim_err(format!("dense bias must have {k_out} entries"));
        }
        let out = conv::dense_forward(
            self.data(input),
            self.data(weight),
            self.data(bias),
            rows,
            k_in,
            k_out,
        );
        let value = Tensor::new(vec![rows, k_out], out)?;
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
                rows,
                k_in,
                k_out,
            },
            &[input, weight, bias],
        ))
    }

    /// Mean over the valid positions of each row: `(N, C, L) -> (N, C)`.
    pub fn global_avg_pool(&mut self, input: Var, mask: &Mask) -> Result<Var, TensorError> {
        self.check(input)?;
        let (n, c, l) = self.shape3(input, "global_avg_pool")?;
        Self::check_mask(mask, n, l)?;
        let src = self.data(input);
        let mut out = Vec::with_capacity(n * c);
        for row in 0..n {
            let valid = mask.valid(row);
            if valid == 0 {
                return Err(TensorError::EmptyPool { row });
            }
            for f in 0..c {
                let base = (row * c + f) * l;
                let mut s = 0.0;
                for t in 0..valid {
                    s += src[base + t];
                }
                out.push(s / valid as f64);
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(
            value,
            Op::GlobalAvgPool {
                input,
                mask: mask.clone(),
                channels: c,
            },
            &[input],
        ))
    }

    /// Running mean over valid positions up to each step; padding is zero.
    pub fn causal_avg_pool(&mut self, input: Var, mask: &Mask) -> Result<Var, TensorError> {
        self.check(input)?;
        let (n, c, l) = self.shape3(input, "causal_avg_pool")?;
        Self::check_mask(mask, n, l)?;
        let src = self.data(input);
        let mut out = vec![0.0; n * c * l];
        for row in 0..n {
            let valid = mask.valid(row);
            for f in 0..c {
                let base = (row * c + f) * l;
                let mut s = 0.0;
                for t in 0..valid {
                    s += src[base + t];
                    out[base + t] = s / (t + 1) as f64;
                }
            }
        }
        let value = Tensor::new(vec![n, c, l], out)?;
        Ok(self.push(
            value,
            Op::CausalAvgPool {
                input,
                mask: mask.clone(),
                channels: c,
            },
            &[input],
        ))
    }

    /// `(N, C, L) -> (N * L, C)`; row `n * L + t` holds column `t` of sequence `n`.
    pub fn columns_to_rows(&mut self, input: Var) -> Result<Var, TensorError> {
        self.check(input)?;
        let (batch, channels, len) = self.shape3(input, "columns_to_rows")?;
        let src = self.data(input);
        let mut out = vec![0.0; batch * channels * len];
        for n in 0..batch {
            for c in 0..channels {
                for t in 0..len {
                    out[(n * len + t) * channels + c] = src[(n * channels + c) * len + t];
                }
            }
        }
        let value = Tensor::new(vec![batch * len, channels], out)?;
        Ok(self.push(
            value,
            Op::ColumnsToRows {
                input,
                batch,
                channels,
                len,
            },
            &[input],
        ))
    }

    /// Sums (or averages) groups of rows of a `(M, K)` tensor, in the order
    /// each group lists them.
    pub fn segment_sum(
        &mut self,
        input: Var,
        groups: &[Vec<usize>],
        mean: bool,
    ) -> Result<Var, TensorError> {
        self.check(input)?;
        let (rows, width) = self.shape2(input, "segment_sum")?;
        let src = self.data(input);
        let mut out = vec![0.0; groups.len() * width];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return dim_err(format!("aggregation group {g} is empty"));
            }
            let dst = &mut out[g * width..(g + 1) * width];
            for &r in members {
                if r >= rows {
                    return dim_err(format!("row {r} out of range for {rows} rows"));
                }
                dst.iter_mut()
                    .zip(&src[r * width..(r + 1) * width])
                    .for_each(|(d, s)| *d += s);
            }
            if mean {
                let scale = members.len() as f64;
                dst.iter_mut().for_each(|d| *d /= scale);
            }
        }
        let value = Tensor::new(vec![groups.len(), width], out)?;
        Ok(self.push(
            value,
            Op::SegmentSum {
                input,
                groups: groups.to_vec(),
                width,
                mean,
            },
            &[input],
        ))
    }

    /// Stacks `(M_i, K)` tensors into `(sum M_i, K)`.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = inputs.first() else {
            return dim_err("concat_rows of nothing");
        };
        for &v in inputs {
            self.check(v)?;
        }
        let (_, width) = self.shape2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &v in inputs {
            let (r, k) = self.shape2(v, "concat_rows")?;
            if k != width {
                return dim_err("concat_rows inputs differ in width");
            }
            rows += r;
            out.extend_from_slice(self.data(v));
        }
        let value = Tensor::new(vec![rows, width], out)?;
        Ok(self.push(
            value,
            Op::ConcatRows {
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    /// Batch normalisation over all valid `(n, t)` positions of each feature
    /// row. Padding neither contributes to the statistics nor receives output.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mask: &Mask,
    ) -> Result<(Var, BatchStats), TensorError> {
        self.check(input)?;
        let (n, c, l) = self.shape3(input, "batch_norm")?;
        Self::check_mask(mask, n, l)?;
        let count: usize = mask.lengths().iter().sum();
        if count == 0 {
            return Err(TensorError::EmptyPool { row: 0 });
        }
        let src = self.data(input);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (f, (m, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
            let mut s = 0.0;
            for row in 0..n {
                let base = (row * c + f) * l;
                s += src[base..base + mask.valid(row)].iter().sum::<f64>();
            }
            *m = s / count as f64;
            let mut ss = 0.0;
            for row in 0..n {
                let base = (row * c + f) * l;
                ss += src[base..base + mask.valid(row)]
                    .iter()
                    .map(|x| (x - *m).powi(2))
                    .sum::<f64>();
            }
            *v = ss / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let var_out = self.normalise(input, gamma, beta, mask, &mean, inv_std, true)?;
        Ok((var_out, BatchStats { mean, var }))
    }

    /// Batch normalisation with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mask: &Mask,
        stats: &BatchStats,
    ) -> Result<Var, TensorError> {
        self.check(input)?;
        let (n, _, l) = self.shape3(input, "batch_norm")?;
        Self::check_mask(mask, n, l)?;
        let inv_std = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        self.normalise(input, gamma, beta, mask, &stats.mean, inv_std, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalise(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mask: &Mask,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var, TensorError> {
        self.check(gamma)?;
        self.check(beta)?;
        let (n, c, l) = self.shape3(input, "batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || mean.len() != c {
            return dim_err(format!("batch_norm parameters must have {c} entries"));
        }
        let src = self.data(input);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; n * c * l];
        let mut out = vec![0.0; n * c * l];
        for row in 0..n {
            for f in 0..c {
                let base = (row * c + f) * l;
                for t in 0..mask.valid(row) {
                    let h = (src[base + t] - mean[f]) * inv_std[f];
                    xhat[base + t] = h;
                    out[base + t] = g[f] * h + b[f];
                }
            }
        }
        let value = Tensor::new(vec![n, c, l], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mask: mask.clone(),
                channels: c,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        ))
    }

    /// Mean binary cross entropy over `B` logits (shape `(B,)` or `(B, 1)`).
    pub fn binary_ce(&mut self, logits: Var, labels: &[f64]) -> Result<Var, TensorError> {
        self.check(logits)?;
        let z = self.data(logits);
        if z.len() != labels.len() || z.is_empty() {
            return dim_err(format!("{} logits for {} labels", z.len(), labels.len()));
        }
        let mut total = 0.0;
        for (&zi, &yi) in z.iter().zip(labels) {
            total += loss_binary_ce(yi, zi)?;
        }
        let value = Tensor::scalar(total / z.len() as f64);
        Ok(self.push(
            value,
            Op::BinaryCe {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean softmax cross entropy over rows of `(B, L)` logits.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        self.check(logits)?;
        let (rows, classes) = self.shape2(logits, "softmax_ce")?;
        if rows != labels.len() || rows == 0 {
            return dim_err(format!("{rows} logit rows for {} labels", labels.len()));
        }
        let z = self.data(logits);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("softmax cross entropy logits"));
        }
        let mut probs = Vec::with_capacity(z.len());
        let mut total = 0.0;
        for (row, &y) in z.chunks_exact(classes).zip(labels) {
            if y >= classes {
                return dim_err(format!("label {y} out of range for {classes} classes"));
            }
            let lp = log_softmax_row(row);
            total -= lp[y];
            probs.extend(lp.iter().map(|v| v.exp()));
        }
        let value = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Per-class sigmoid cross entropy against one-hot targets, summed over
    /// classes and averaged over rows.
    pub fn sigmoid_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        self.check(logits)?;
        let (rows, classes) = self.shape2(logits, "sigmoid_ce")?;
        if rows != labels.len() || rows == 0 {
            return dim_err(format!("{rows} logit rows for {} labels", labels.len()));
        }
        let z = self.data(logits);
        let mut total = 0.0;
        for (row, &y) in z.chunks_exact(classes).zip(labels) {
            if y >= classes {
                return dim_err(format!("label {y} out of range for {classes} classes"));
            }
            for (c, &zc) in row.iter().enumerate() {
                total += loss_binary_ce(if c == y { 1.0 } else { 0.0 }, zc)?;
            }
        }
        let value = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            value,
            Op::SigmoidCe {
                logits,
                labels: labels.to_vec(),
                classes,
            },
            &[logits],
        ))
    }

    /// Back-propagates from a scalar node and accumulates leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.check(loss)?;
        if self.nodes[loss.index].value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        adj[loss.index] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.index).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                op => self.propagate(op, &g, &mut adj)?,
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn take(&self, adj: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
        let node = &self.nodes[v.index];
        if !node.needs_grad {
            return None;
        }
        Some(
            adj[v.index]
                .take()
                .unwrap_or_else(|| vec![0.0; node.value.numel()]),
        )
    }

    fn update(
        &self,
        adj: &mut [Option<Vec<f64>>],
        v: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if let Some(mut buf) = self.take(adj, v) {
            f(&mut buf);
            adj[v.index] = Some(buf);
        }
    }

    fn propagate(
        &self,
        op: &Op,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) -> Result<(), TensorError> {
        match op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                dims,
            } => {
                let w = self.data(*weight);
                self.update(adj, *input, |dx| conv::conv1d_backward_input(g, w, dx, *dims));
                let wants_w = self.nodes[weight.index].needs_grad;
                let wants_b = self.nodes[bias.index].needs_grad;
                if wants_w || wants_b {
                    let mut dw = self
                        .take(adj, *weight)
                        .unwrap_or_else(|| vec![0.0; w.len()]);
                    let mut db = self.take(adj, *bias).unwrap_or_else(|| vec![0.0; dims.c_out]);
                    conv::conv1d_backward_params(g, self.data(*input), &mut dw, &mut db, *dims);
                    if wants_w {
                        adj[weight.index] = Some(dw);
                    }
                    if wants_b {
                        adj[bias.index] = Some(db);
                    }
                }
            }
            Op::ApplyMask {
                input,
                mask,
                channels,
            } => {
                let l = mask.width();
                self.update(adj, *input, |dx| {
                    for (row, (d, s)) in dx
                        .chunks_exact_mut(channels * l)
                        .zip(g.chunks_exact(channels * l))
                        .enumerate()
                    {
                        let valid = mask.valid(row);
                        for (df, sf) in d.chunks_exact_mut(l).zip(s.chunks_exact(l)) {
                            df[..valid].iter_mut().zip(&sf[..valid]).for_each(|(a, b)| *a += b);
                        }
                    }
                });
            }
            Op::Relu { input } => {
                let x = self.data(*input);
                self.update(adj, *input, |dx| {
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Add { lhs, rhs } => {
                self.update(adj, *lhs, |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                self.update(adj, *rhs, |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            Op::Square { input } => {
                let x = self.data(*input);
                self.update(adj, *input, |d| {
                    for ((a, gi), xi) in d.iter_mut().zip(g).zip(x) {
                        *a += 2.0 * xi * gi;
                    }
                });
            }
            Op::Sum { input } => {
                self.update(adj, *input, |d| d.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::WeightedSum { input, weights } => {
                self.update(adj, *input, |d| {
                    d.iter_mut().zip(weights).for_each(|(a, w)| *a += w * g[0])
                });
            }
            Op::Scale { input, factors } => {
                self.update(adj, *input, |d| {
                    for ((a, gi), f) in d.iter_mut().zip(g).zip(factors) {
                        *a += gi * f;
                    }
                });
            }
            Op::Dense {
                input,
                weight,
                bias,
                rows,
                k_in,
                k_out,
            } => {
                let (rows, k_in, k_out) = (*rows, *k_in, *k_out);
                let w = self.data(*weight);
                self.update(adj, *input, |dx| {
                    conv::dense_backward_input(g, w, dx, rows, k_in, k_out)
                });
                let wants_w = self.nodes[weight.index].needs_grad;
                let wants_b = self.nodes[bias.index].needs_grad;
                if wants_w || wants_b {
                    let mut dw = self
                        .take(adj, *weight)
                        .unwrap_or_else(|| vec![0.0; w.len()]);
                    let mut db = self.take(adj, *bias).unwrap_or_else(|| vec![0.0; k_out]);
                    conv::dense_backward_params(
                        g,
                        self.data(*input),
                        &mut dw,
                        &mut db,
                        rows,
                        k_in,
                        k_out,
                    );
                    if wants_w {
                        adj[weight.index] = Some(dw);
                    }
                    if wants_b {
                        adj[bias.index] = Some(db);
                    }
                }
            }
            Op::GlobalAvgPool {
                input,
                mask,
                channels,
            } => {
                let l = mask.width();
                let c = *channels;
                self.update(adj, *input, |dx| {
                    for row in 0..mask.rows() {
                        let valid = mask.valid(row);
                        for f in 0..c {
                            let share = g[row * c + f] / valid as f64;
                            let base = (row * c + f) * l;
                            dx[base..base + valid].iter_mut().for_each(|a| *a += share);
                        }
                    }
                });
            }
            Op::CausalAvgPool {
                input,
                mask,
                channels,
            } => {
                let l = mask.width();
                let c = *channels;
                self.update(adj, *input, |dx| {
                    for row in 0..mask.rows() {
                        let valid = mask.valid(row);
                        for f in 0..c {
                            let base = (row * c + f) * l;
                            let mut acc = 0.0;
                            for t in (0..valid).rev() {
                                acc += g[base + t] / (t + 1) as f64;
                                dx[base + t] += acc;
                            }
                        }
                    }
                });
            }
            Op::ColumnsToRows {
                input,
                batch,
                channels,
                len,
            } => {
                let (b, c, l) = (*batch, *channels, *len);
                self.update(adj, *input, |dx| {
                    for n in 0..b {
                        for f in 0..c {
                            for t in 0..l {
                                dx[(n * c + f) * l + t] += g[(n * l + t) * c + f];
                            }
                        }
                    }
                });
            }
            Op::SegmentSum {
                input,
                groups,
                width,
                mean,
            } => {
                let w = *width;
                self.update(adj, *input, |dx| {
                    for (gi, members) in groups.iter().enumerate() {
                        let scale = if *mean { 1.0 / members.len() as f64 } else { 1.0 };
                        let src = &g[gi * w..(gi + 1) * w];
                        for &r in members {
                            dx[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b * scale);
                        }
                    }
                });
            }
            Op::ConcatRows { inputs } => {
                let mut offset = 0;
                for &v in inputs {
                    let n = self.nodes[v.index].value.numel();
                    let src = &g[offset..offset + n];
                    self.update(adj, v, |d| d.iter_mut().zip(src).for_each(|(a, b)| *a += b));
                    offset += n;
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mask,
                channels,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = *channels;
                let l = mask.width();
                let gam = self.data(*gamma);
                let count: usize = mask.lengths().iter().sum();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for row in 0..mask.rows() {
                    for f in 0..c {
                        let base = (row * c + f) * l;
                        for t in 0..mask.valid(row) {
                            dgamma[f] += g[base + t] * xhat[base + t];
                            dbeta[f] += g[base + t];
                        }
                    }
                }
                self.update(adj, *input, |dx| {
                    for f in 0..c {
                        let scale = gam[f] * inv_std[f];
                        let m = count as f64;
                        for row in 0..mask.rows() {
                            let base = (row * c + f) * l;
                            for t in 0..mask.valid(row) {
                                let i = base + t;
                                dx[i] += if *batch_stats {
                                    scale * (g[i] - dbeta[f] / m - xhat[i] * dgamma[f] / m)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                });
                self.update(adj, *gamma, |d| {
                    d.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b)
                });
                self.update(adj, *beta, |d| d.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b));
            }
            Op::BinaryCe { logits, labels } => {
                let z = self.data(*logits);
                let scale = g[0] / z.len() as f64;
                self.update(adj, *logits, |d| {
                    for ((a, zi), yi) in d.iter_mut().zip(z).zip(labels) {
                        *a += (sigmoid(*zi) - yi) * scale;
                    }
                });
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let rows = labels.len();
                let classes = probs.len() / rows;
                let scale = g[0] / rows as f64;
                self.update(adj, *logits, |d| {
                    for (r, &y) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let target = if c == y { 1.0 } else { 0.0 };
                            d[r * classes + c] += (probs[r * classes + c] - target) * scale;
                        }
                    }
                });
            }
            Op::SigmoidCe {
                logits,
                labels,
                classes,
            } => {
                let z = self.data(*logits);
                let scale = g[0] / labels.len() as f64;
                self.update(adj, *logits, |d| {
                    for (r, &y) in labels.iter().enumerate() {
                        for c in 0..*classes {
                            let target = if c == y { 1.0 } else { 0.0 };
                            d[r * classes + c] += (sigmoid(z[r * classes + c]) - target) * scale;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(n: usize, c: usize, l: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![n, c, l], data.to_vec()).unwrap()
    }

    fn conv_once(x: &[f64], w: &[f64], padding: Padding) -> Vec<f64> {
        let mut tape = Tape::new();
        let xi = tape.leaf(t3(1, 1, x.len(), x));
        let wi = tape.leaf(t3(1, 1, w.len(), w));
        let bi = tape.leaf(Tensor::from_vec(vec![0.0]));
        let y = tape.conv1d(xi, wi, bi, padding).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn conv_same_difference_kernel() {
        assert_eq!(conv_once(&[1.0, 2.0, 3.0], &[1.0, 0.0, -1.0], Padding::Same), vec![-2.0, -2.0, 2.0]);
    }

    #[test]
    fn conv_same_delta_is_identity() {
        let x = [0.3, -1.2, 4.5, 2.0];
        assert_eq!(conv_once(&x, &[0.0, 1.0, 0.0], Padding::Same), x.to_vec());
    }

    #[test]
    fn conv_causal_sliding_sum() {
        assert_eq!(conv_once(&[1.0, 2.0, 3.0], &[1.0, 1.0], Padding::Causal), vec![1.0, 3.0, 5.0]);
    }

    #[test]
    fn conv_rejects_mismatched_weights() {
        let mut tape = Tape::new();
        let x = tape.leaf(t3(1, 2, 3, &[0.0; 6]));
        let w = tape.leaf(t3(1, 3, 1, &[0.0; 3]));
        let b = tape.leaf(Tensor::from_vec(vec![0.0]));
        assert!(matches!(
            tape.conv1d(x, w, b, Padding::Same),
            Err(TensorError::Dimension(_))
        ));
    }

    #[test]
    fn mask_zeroes_padding_and_its_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t3(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]).with_requires_grad(true));
        let mask = Mask::from_lengths(vec![1], 2).unwrap();
        let y = tape.apply_mask(x, &mask).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 3.0, 0.0]);
        let s = tape.weighted_sum(y, &[1.0, 5.0, -2.0, 7.0]).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, -2.0, 0.0]);

        let full = Mask::full(1, 2);
        let z = tape.apply_mask(x, &full).unwrap();
        assert_eq!(tape.value(z).data(), &[1.0, 2.0, 3.0, 4.0]);
        let bad = Mask::full(1, 3);
        assert!(tape.apply_mask(x, &bad).is_err());
    }

    #[test]
    fn global_pool_ignores_padding() {
        let mut tape = Tape::new();
        let x = tape.leaf(t3(1, 2, 3, &[1.0, 3.0, 99.0, 2.0, 6.0, 99.0]));
        let y = tape.global_avg_pool(x, &Mask::from_lengths(vec![2], 3).unwrap()).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0]);
        let z = tape.global_avg_pool(x, &Mask::from_lengths(vec![1], 3).unwrap()).unwrap();
        assert_eq!(tape.value(z).data(), &[1.0, 2.0]);
        assert!(matches!(
            tape.global_avg_pool(x, &Mask::from_lengths(vec![0], 3).unwrap()),
            Err(TensorError::EmptyPool { row: 0 })
        ));
    }

    #[test]
    fn causal_pool_running_mean() {
        let mut tape = Tape::new();
        let x = tape.leaf(t3(1, 1, 3, &[2.0, 4.0, 6.0]));
        let full = tape.causal_avg_pool(x, &Mask::full(1, 3)).unwrap();
        assert_eq!(tape.value(full).data(), &[2.0, 3.0, 4.0]);
        let part = tape
            .causal_avg_pool(x, &Mask::from_lengths(vec![2], 3).unwrap())
            .unwrap();
        assert_eq!(tape.value(part).data(), &[2.0, 3.0, 0.0]);
        let gap = tape.global_avg_pool(x, &Mask::full(1, 3)).unwrap();
        assert_eq!(tape.value(gap).data()[0], tape.value(full).data()[2]);
    }

    #[test]
    fn relu_and_dense() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let v = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let w = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![0.5]));
        let y = tape.dense(v, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5]);

        let input = tape.leaf(Tensor::new(vec![1, 3], vec![0.2, -0.7, 1.1]).unwrap());
        let eye = tape.leaf(
            Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let zero = tape.leaf(Tensor::zeros(vec![3]));
        let same = tape.dense(input, eye, zero).unwrap();
        assert_eq!(tape.value(same).data(), &[0.2, -0.7, 1.1]);
        assert!(tape.dense(input, w, b).is_err());
    }

    #[test]
    fn binary_ce_values() {
        assert!((loss_binary_ce(1.0, 0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((loss_binary_ce(0.0, 2.0).unwrap() - 2.126_928_011_042_972_5).abs() < 1e-12);
        assert!(loss_binary_ce(1.0, 800.0).unwrap() < 1e-300);
        assert!(loss_binary_ce(1.0, f64::NAN).is_err());
    }

    #[test]
    fn softmax_ce_limit() {
        assert!(loss_softmax_ce(1, &[0.0, 1e3, -3.0]).unwrap() < 1e-12);
        let uniform = loss_softmax_ce(0, &[0.0, 0.0, 0.0]).unwrap();
        assert!((uniform - 3f64.ln()).abs() < 1e-15);
        assert!(loss_softmax_ce(0, &[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn square_gradient_and_accumulation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_requires_grad(true));
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
        tape.zero_grad();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_foreign_or_vector_nodes() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Tensor::scalar(1.0));
        assert!(matches!(b.backward(x), Err(TensorError::Usage(_))));
        let v = a.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(a.backward(v), Err(TensorError::Usage(_))));
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        assert!(tape
            .value(y)
            .data()
            .iter()
            .zip([1.0, 2.0])
            .all(|(v, x)| *v == 0.0 || *v == 2.0 * x));
    }

    #[test]
    fn segment_sum_orders_and_means() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = tape.segment_sum(x, &[vec![0, 1]], false).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
        let m = tape.segment_sum(x, &[vec![1, 0], vec![0]], true).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 3.0, 1.0, 2.0]);
        assert!(tape.segment_sum(x, &[vec![]], false).is_err());
    }
}
