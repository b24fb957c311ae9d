//! Reverse-mode differentiation on a tape.
//!
//! A [`Graph`] records every operation as a node; [`Var`] is an index into
//! the tape. `backward` seeds the (scalar) loss with 1 and walks the tape in
//! reverse, accumulating gradients additively across fan-out. Each call to
//! `backward` starts from cleared gradient buffers, so no gradient can
//! survive from an earlier pass. Training code builds a fresh graph per
//! step.

use crate::error::{Error, Result};
use crate::num::{sign, stable_sigmoid, Scalar};
use crate::tensor::conv::{self, conv_out_dim, ConvDims, PadMode};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        weights: Var,
        dims: ConvDims,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Sigmoid {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Abs {
        input: Var,
    },
    Square {
        input: Var,
    },
    SqrtEps {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
        broadcast_rhs: bool,
    },
    AddScalar {
        input: Var,
    },
    MulScalar {
        input: Var,
        factor: T,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Reshape {
        input: Var,
    },
    SumAll {
        input: Var,
    },
    GatherRows {
        input: Var,
        indices: Vec<usize>,
    },
    Pick {
        input: Var,
        flat: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        /// Row-stabilized softmax cached at forward time for the backward rule.
        probs: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Insert a tensor as a leaf. Gradients are accumulated for it during
    /// `backward` when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`, if `v`
    /// participated.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    /// Drop all recorded gradients.
    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.data().iter().all(|v| v.is_finite()));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // Operations

    /// 2-D convolution of `input` [N,C,H,W] with `weights` [O,C,kh,kw],
    /// zero-padded, differentiable in both operands.
    pub fn conv2d(&mut self, input: Var, weights: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_padded(input, weights, stride, padding, PadMode::Zeros)
    }

    /// Convolution with an explicit out-of-bounds fill rule.
    pub fn conv2d_padded(
        &mut self,
        input: Var,
        weights: Var,
        stride: usize,
        padding: usize,
        pad_mode: PadMode,
    ) -> Result<Var> {
        let xs = self.shape_of(input);
        let ws = self.shape_of(weights);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} and weights {:?} must be rank 4", xs, ws),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", xs[1], ws[1]),
            ));
        }
        let out_h = conv_out_dim(xs[2], ws[2], stride, padding);
        let out_w = conv_out_dim(xs[3], ws[3], stride, padding);
        let (out_h, out_w) = match (out_h, out_w) {
            (Some(h), Some(w)) if h >= 1 && w >= 1 => (h, w),
            _ => {
                return Err(Error::DegenerateOutput(format!(
                    "input {}x{}, kernel {}x{}, stride {}, padding {}",
                    xs[2], xs[3], ws[2], ws[3], stride, padding
                )))
            }
        };
        let dims = ConvDims {
            n: xs[0],
            in_channels: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_channels: ws[0],
            k_h: ws[2],
            k_w: ws[3],
            out_h,
            out_w,
            stride,
            padding,
            pad_mode,
        };
        let value = conv::forward(&self.nodes[input.0].value, &self.nodes[weights.0].value, &dims);
        let rg = self.needs(&[input, weights]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weights,
                dims,
            },
            rg,
        ))
    }

    /// Affine map: x[N,D] @ w[D,K] + b[K].
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let xs = self.shape_of(input);
        let ws = self.shape_of(weights);
        let bs = self.shape_of(bias);
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::shape(
                "dense",
                format!("x {:?}, w {:?}, b {:?}", xs, ws, bs),
            ));
        }
        let value = conv::dense_forward(
            &self.nodes[input.0].value,
            &self.nodes[weights.0].value,
            &self.nodes[bias.0].value,
        );
        let rg = self.needs(&[input, weights, bias]);
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weights,
                bias,
            },
            rg,
        ))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.nodes[input.0]
            .value
            .map(stable_sigmoid)
            .expect("sigmoid preserves finiteness");
        let rg = self.needs(&[input]);
        self.push(value, Op::Sigmoid { input }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.nodes[input.0]
            .value
            .map(|v| v.max(T::zero()))
            .expect("relu preserves finiteness");
        let rg = self.needs(&[input]);
        self.push(value, Op::Relu { input }, rg)
    }

    /// Elementwise absolute value; subgradient 0 at 0.
    pub fn abs(&mut self, input: Var) -> Var {
        let value = self.nodes[input.0]
            .value
            .map(|v| v.abs())
            .expect("abs preserves finiteness");
        let rg = self.needs(&[input]);
        self.push(value, Op::Abs { input }, rg)
    }

    pub fn square(&mut self, input: Var) -> Var {
        let value = self.nodes[input.0]
            .value
            .map(|v| v * v)
            .expect("square preserves finiteness");
        let rg = self.needs(&[input]);
        self.push(value, Op::Square { input }, rg)
    }

    /// sqrt(x + eps) for nonnegative x and eps > 0; the offset keeps the
    /// derivative finite at x = 0.
    pub fn sqrt_eps(&mut self, input: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::InvalidConfig("sqrt_eps requires eps > 0".into()));
        }
        if self.nodes[input.0].value.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::NonFinite("sqrt_eps: negative input".into()));
        }
        let value = self.nodes[input.0]
            .value
            .map(|v| (v + eps).sqrt())
            .expect("sqrt of nonnegative input is finite");
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::SqrtEps { input }, rg))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let value =
            self.nodes[lhs.0]
                .value
                .zip_map(&self.nodes[rhs.0].value, "add", |a, b| a + b)?;
        let rg = self.needs(&[lhs, rhs]);
        Ok(self.push(value, Op::Add { lhs, rhs }, rg))
    }

    /// Elementwise product. When `rhs` has shape [N,1,H,W] and `lhs` is
    /// [N,C,H,W], the single channel of `rhs` broadcasts across the C
    /// channels of `lhs`.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let ls = self.shape_of(lhs).to_vec();
        let rs = self.shape_of(rhs).to_vec();
        let broadcast_rhs = ls != rs;
        if broadcast_rhs {
            let ok = ls.len() == 4
                && rs.len() == 4
                && rs[1] == 1
                && ls[0] == rs[0]
                && ls[2] == rs[2]
                && ls[3] == rs[3];
            if !ok {
                return Err(Error::shape(
                    "mul",
                    format!("incompatible shapes {:?} vs {:?}", ls, rs),
                ));
            }
        }
        let value = if broadcast_rhs {
            let (n, c, h, w) = (ls[0], ls[1], ls[2], ls[3]);
            let plane = h * w;
            let a = self.nodes[lhs.0].value.data();
            let b = self.nodes[rhs.0].value.data();
            let mut out = vec![T::zero(); a.len()];
            for s in 0..n {
                let mask = &b[s * plane..][..plane];
                for ch in 0..c {
                    let base = (s * c + ch) * plane;
                    for i in 0..plane {
                        out[base + i] = a[base + i] * mask[i];
                    }
                }
            }
            Tensor::from_parts(ls.clone(), out)
        } else {
            self.nodes[lhs.0]
                .value
                .zip_map(&self.nodes[rhs.0].value, "mul", |a, b| a * b)?
        };
        let rg = self.needs(&[lhs, rhs]);
        Ok(self.push(
            value,
            Op::Mul {
                lhs,
                rhs,
                broadcast_rhs,
            },
            rg,
        ))
    }

    pub fn add_scalar(&mut self, input: Var, c: T) -> Var {
        let value = self.nodes[input.0]
            .value
            .map(|v| v + c)
            .expect("add_scalar preserves finiteness");
        let rg = self.needs(&[input]);
        self.push(value, Op::AddScalar { input }, rg)
    }

    pub fn mul_scalar(&mut self, input: Var, factor: T) -> Var {
        let value = self.nodes[input.0]
            .value
            .map(|v| v * factor)
            .expect("mul_scalar preserves finiteness");
        let rg = self.needs(&[input]);
        self.push(value, Op::MulScalar { input, factor }, rg)
    }

    /// x[N,C,H,W] + b[C], b broadcast over batch and spatial positions.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let xs = self.shape_of(input).to_vec();
        let bs = self.shape_of(bias);
        if xs.len() != 4 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(Error::shape(
                "channel_bias",
                format!("x {:?}, b {:?}", xs, bs),
            ));
        }
        let plane = xs[2] * xs[3];
        let x = self.nodes[input.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let mut out = vec![T::zero(); x.len()];
        for s in 0..xs[0] {
            for c in 0..xs[1] {
                let base = (s * xs[1] + c) * plane;
                for i in 0..plane {
                    out[base + i] = x[base + i] + b[c];
                }
            }
        }
        let value = Tensor::from_parts(xs, out);
        let rg = self.needs(&[input, bias]);
        Ok(self.push(value, Op::ChannelBias { input, bias }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[input.0].value.reshape(shape)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    /// Collapse [N, ...] to [N, D].
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape_of(input);
        if s.is_empty() {
            return Err(Error::shape("flatten", "scalar input"));
        }
        let n = s[0];
        let d: usize = s[1..].iter().product();
        self.reshape(input, &[n, d])
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let total: T = self.nodes[input.0].value.data().iter().cloned().sum();
        let value = Tensor::from_parts(vec![], vec![total]);
        let rg = self.needs(&[input]);
        self.push(value, Op::SumAll { input }, rg)
    }

    /// Select rows along axis 0; duplicate indices are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape_of(input).to_vec();
        if s.is_empty() {
            return Err(Error::shape("gather_rows", "scalar input"));
        }
        let row = s[1..].iter().product::<usize>();
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {} out of range for {} rows", bad, s[0]),
            ));
        }
        let x = self.nodes[input.0].value.data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&x[i * row..][..row]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&s[1..]);
        let value = Tensor::from_parts(shape, out);
        let rg = self.needs(&[input]);
        Ok(self.push(
            value,
            Op::GatherRows {
                input,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Extract one element at a full multi-index, as a rank-0 scalar.
    pub fn pick(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape_of(input);
        if index.len() != s.len() || index.iter().zip(s).any(|(&i, &d)| i >= d) {
            return Err(Error::shape(
                "pick",
                format!("index {:?} invalid for shape {:?}", index, s),
            ));
        }
        let flat = self.nodes[input.0].value.flat_index(index);
        let value = Tensor::from_parts(vec![], vec![self.nodes[input.0].value.data()[flat]]);
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::Pick { input, flat }, rg))
    }

    /// Mean over the batch of -log softmax(logits)[label], stabilized by
    /// max-subtraction. Returns a rank-0 scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape_of(logits);
        if s.len() != 2 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("expected [N, K] logits, got {:?}", s),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if n == 0 {
            return Err(Error::EmptyInput("softmax_cross_entropy: empty batch"));
        }
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} logit rows but {} labels", n, labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let x = self.nodes[logits.0].value.data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (r, row) in x.chunks_exact(k).enumerate() {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (&v, p) in row.iter().zip(&mut probs[r * k..(r + 1) * k]) {
                *p = (v - max).exp();
                denom += *p;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p = *p / denom;
            }
            // -log softmax[label] = log(denom) - (logit[label] - max)
            total += denom.ln() - (row[labels[r]] - max);
        }
        let mean = total / T::from_usize(n).unwrap();
        if !mean.is_finite() {
            return Err(Error::NonFinite("softmax_cross_entropy".into()));
        }
        let value = Tensor::from_parts(vec![], vec![mean]);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // Backward

    /// Reverse-mode gradient accumulation from a scalar loss. Gradients from
    /// any previous call are cleared first; within a single pass, gradients
    /// accumulate additively across fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarBackward(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        self.clear_grads();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<T>) {
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, node: usize, g: &[T]) {
        // Ops store only Vars (indices), so cheap copies of the op metadata
        // let us borrow node values immutably while accumulating grads.
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weights,
                dims,
            } => {
                let (input, weights, dims) = (*input, *weights, *dims);
                let (gi, gw) = conv::backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weights.0].value,
                    g,
                    &dims,
                    self.wants(input),
                    self.wants(weights),
                );
                if let Some(gi) = gi {
                    self.accumulate(input, gi.into_data());
                }
                if let Some(gw) = gw {
                    self.accumulate(weights, gw.into_data());
                }
            }
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let (input, weights, bias) = (*input, *weights, *bias);
                let (gi, gw, gb) = conv::dense_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weights.0].value,
                    g,
                    self.wants(input),
                    self.wants(weights) || self.wants(bias),
                );
                if let Some(gi) = gi {
                    self.accumulate(input, gi.into_data());
                }
                if let Some(gw) = gw {
                    if self.wants(weights) {
                        self.accumulate(weights, gw.into_data());
                    }
                }
                if let Some(gb) = gb {
                    if self.wants(bias) {
                        self.accumulate(bias, gb.into_data());
                    }
                }
            }
            Op::Sigmoid { input } => {
                let input = *input;
                if self.wants(input) {
                    let y = self.nodes[node].value.data();
                    let gi = g
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                        .collect();
                    self.accumulate(input, gi);
                }
            }
            Op::Relu { input } => {
                let input = *input;
                if self.wants(input) {
                    let x = self.nodes[input.0].value.data();
                    let gi = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    self.accumulate(input, gi);
                }
            }
            Op::Abs { input } => {
                let input = *input;
                if self.wants(input) {
                    let x = self.nodes[input.0].value.data();
                    let gi = g.iter().zip(x).map(|(&gv, &xv)| gv * sign(xv)).collect();
                    self.accumulate(input, gi);
                }
            }
            Op::Square { input } => {
                let input = *input;
                if self.wants(input) {
                    let x = self.nodes[input.0].value.data();
                    let two = T::from_f64_lossy(2.0);
                    let gi = g.iter().zip(x).map(|(&gv, &xv)| gv * two * xv).collect();
                    self.accumulate(input, gi);
                }
            }
            Op::SqrtEps { input } => {
                let input = *input;
                if self.wants(input) {
                    let y = self.nodes[node].value.data();
                    let half = T::from_f64_lossy(0.5);
                    let gi = g.iter().zip(y).map(|(&gv, &yv)| gv * half / yv).collect();
                    self.accumulate(input, gi);
                }
            }
            Op::Add { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                if self.wants(lhs) {
                    self.accumulate(lhs, g.to_vec());
                }
                if self.wants(rhs) {
                    self.accumulate(rhs, g.to_vec());
                }
            }
            Op::Mul {
                lhs,
                rhs,
                broadcast_rhs,
            } => {
                let (lhs, rhs, broadcast) = (*lhs, *rhs, *broadcast_rhs);
                if !broadcast {
                    if self.wants(lhs) {
                        let b = self.nodes[rhs.0].value.data();
                        let gl = g.iter().zip(b).map(|(&gv, &bv)| gv * bv).collect();
                        self.accumulate(lhs, gl);
                    }
                    if self.wants(rhs) {
                        let a = self.nodes[lhs.0].value.data();
                        let gr = g.iter().zip(a).map(|(&gv, &av)| gv * av).collect();
                        self.accumulate(rhs, gr);
                    }
                } else {
                    let ls = self.nodes[lhs.0].value.shape();
                    let (n, c, h, w) = (ls[0], ls[1], ls[2], ls[3]);
                    let plane = h * w;
                    if self.wants(lhs) {
                        let b = self.nodes[rhs.0].value.data();
                        let mut gl = vec![T::zero(); n * c * plane];
                        for s in 0..n {
                            let mask = &b[s * plane..][..plane];
                            for ch in 0..c {
                                let base = (s * c + ch) * plane;
                                for i in 0..plane {
                                    gl[base + i] = g[base + i] * mask[i];
                                }
                            }
                        }
                        self.accumulate(lhs, gl);
                    }
                    if self.wants(rhs) {
                        let a = self.nodes[lhs.0].value.data();
                        let mut gr = vec![T::zero(); n * plane];
                        for s in 0..n {
                            let m = &mut gr[s * plane..][..plane];
                            for ch in 0..c {
                                let base = (s * c + ch) * plane;
                                for i in 0..plane {
                                    m[i] += g[base + i] * a[base + i];
                                }
                            }
                        }
                        self.accumulate(rhs, gr);
                    }
                }
            }
            Op::AddScalar { input } => {
                let input = *input;
                if self.wants(input) {
                    self.accumulate(input, g.to_vec());
                }
            }
            Op::MulScalar { input, factor } => {
                let (input, factor) = (*input, *factor);
                if self.wants(input) {
                    self.accumulate(input, g.iter().map(|&gv| gv * factor).collect());
                }
            }
            Op::ChannelBias { input, bias } => {
                let (input, bias) = (*input, *bias);
                if self.wants(input) {
                    self.accumulate(input, g.to_vec());
                }
                if self.wants(bias) {
                    let xs = self.nodes[input.0].value.shape();
                    let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                    let mut gb = vec![T::zero(); c];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            for i in 0..plane {
                                gb[ch] += g[base + i];
                            }
                        }
                    }
                    self.accumulate(bias, gb);
                }
            }
            Op::Reshape { input } => {
                let input = *input;
                if self.wants(input) {
                    self.accumulate(input, g.to_vec());
                }
            }
            Op::SumAll { input } => {
                let input = *input;
                if self.wants(input) {
                    let numel = self.nodes[input.0].value.numel();
                    self.accumulate(input, vec![g[0]; numel]);
                }
            }
            Op::GatherRows { input, indices } => {
                let input = *input;
                let indices = indices.clone();
                if self.wants(input) {
                    let s = self.nodes[input.0].value.shape();
                    let row: usize = s[1..].iter().product();
                    let mut gi = vec![T::zero(); self.nodes[input.0].value.numel()];
                    for (r, &src) in indices.iter().enumerate() {
                        for i in 0..row {
                            gi[src * row + i] += g[r * row + i];
                        }
                    }
                    self.accumulate(input, gi);
                }
            }
            Op::Pick { input, flat } => {
                let (input, flat) = (*input, *flat);
                if self.wants(input) {
                    let mut gi = vec![T::zero(); self.nodes[input.0].value.numel()];
                    gi[flat] = g[0];
                    self.accumulate(input, gi);
                }
            }
            Op::SoftmaxCrossEntropy { logits, .. } => {
                let logits = *logits;
                if self.wants(logits) {
                    let (labels, probs) = match &self.nodes[node].op {
                        Op::SoftmaxCrossEntropy { labels, probs, .. } => {
                            (labels.clone(), probs.clone())
                        }
                        _ => unreachable!(),
                    };
                    let k = self.nodes[logits.0].value.shape()[1];
                    let n = labels.len();
                    let scale = g[0] / T::from_usize(n).unwrap();
                    let mut gl = probs;
                    for (r, &label) in labels.iter().enumerate() {
                        gl[r * k + label] -= T::one();
                        for v in &mut gl[r * k..(r + 1) * k] {
                            *v *= scale;
                        }
                    }
                    self.accumulate(logits, gl);
                }
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn into_data(self) -> Vec<T> {
        self.into_raw().1
    }

    pub fn into_raw(self) -> (Vec<usize>, Vec<T>) {
        let Tensor { shape, data } = self;
        (shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, 7.0]), true);
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = g.square(x);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(
            g.backward(x),
            Err(Error::NonScalarBackward(_))
        ));
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // loss = sum(x * x + x * x) => grad = 4x
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.5, -0.5]), true);
        let a = g.mul(x, x).unwrap();
        let b = g.mul(x, x).unwrap();
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn sigmoid_trivial_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 40.0, -40.0]));
        let y = g.sigmoid(x);
        let d = g.value(y).data();
        assert_eq!(d[0], 0.5);
        assert!((d[1] - 1.0).abs() < 1e-12);
        assert!(d[2].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 10], &[0.25; 10]));
        let loss = g.softmax_cross_entropy(x, &[3]).unwrap();
        assert!((g.value(loss).item().unwrap() - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[0.0, 1.0, 2.0]));
        assert!(matches!(
            g.softmax_cross_entropy(x, &[3]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(
            g.conv2d(x, w, 1, 0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv2d_rejects_degenerate_output() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(
            g.conv2d(x, w, 1, 0),
            Err(Error::DegenerateOutput(_))
        ));
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[0.1, 0.2, 0.3, 0.4]));
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[3.0, -1.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -1.0]);

        // zero input => rows equal bias
        let x0 = g.constant(t(&[2, 2], &[0.0; 4]));
        let b2 = g.constant(t(&[2], &[0.5, -0.25]));
        let y2 = g.dense(x0, w, b2).unwrap();
        assert_eq!(g.value(y2).data(), &[0.5, -0.25, 0.5, -0.25]);
    }

    #[test]
    fn dense_hand_example() {
        // weights [2,3] viewed as [D=2,K=1], bias [1], input [1,1] => 2*1+3*1? no:
        // x [1,2] = [1,1], w [2,1] = [[2],[3]], b [1] = [1] => 1*2+1*3+1 = 6
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = g.constant(t(&[2, 1], &[2.0, 3.0]));
        let b = g.constant(t(&[1], &[1.0]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn broadcast_mul_across_channels() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(&[1, 3, 2, 2], 2.0).unwrap(), true);
        let b = g.leaf(Tensor::full(&[1, 1, 2, 2], 0.5).unwrap(), true);
        let y = g.mul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0; 12]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        // d/da = broadcast(b); d/db = sum_c a
        assert_eq!(g.grad(a).unwrap().data(), &[0.5; 12]);
        assert_eq!(g.grad(b).unwrap().data(), &[6.0; 4]);
    }

    #[test]
    fn backward_twice_does_not_accumulate_across_calls() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }
}
