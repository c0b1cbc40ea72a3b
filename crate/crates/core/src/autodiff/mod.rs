//! Minimal reverse-mode differentiation engine.
//!
//! Operations are recorded into an append-only arena; parents always precede
//! children, so walking the arena backwards is a reverse topological order
//! and `backward` visits each node exactly once.

mod conv;
mod gradcheck;

pub use gradcheck::grad_check;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ndarray::ArrayView2;

/// Handle to a node in a [`Graph`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// A named trainable leaf.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub id: NodeId,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    PRelu(NodeId, f64),
    Sigmoid(NodeId),
    Recip(NodeId),
    Clamp(NodeId, f64, f64),
    /// cos(arccos(u) + m) with the arccos argument clamped to the open unit interval.
    CosAngleAdd(NodeId, f64),
    /// lo + (2*sigmoid(gamma*x) - 1) * (hi - lo), saturating strictly below hi.
    SigmoidRange(NodeId, SigmoidRangeParams),
    RowL2Norm(NodeId),
    /// out[i, j] = mat[i, j] * v[i]
    ScaleRows(NodeId, NodeId),
    /// out[i, j] = mat[i, j] + b[j]
    BiasAdd(NodeId, NodeId),
    /// out[n, c, y, x] = input[n, c, y, x] + b[c]
    ChannelBias(NodeId, NodeId),
    Reshape(NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    },
    /// Fused log-sum-exp cross entropy over rows; caches softmax probabilities.
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Sum(NodeId),
}

#[derive(Debug, Clone, Copy)]
pub struct SigmoidRangeParams {
    pub gamma: f64,
    pub lo: f64,
    pub hi: f64,
}

struct NodeData {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    trainable: bool,
}

/// Computation graph confined to one thread of control during construction
/// and backward. Distinct graphs may run on distinct threads concurrently.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<NodeData>,
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Largest f64 strictly below `v` (for positive finite `v`).
fn prev_below(v: f64) -> f64 {
    debug_assert!(v.is_finite() && v > 0.0);
    f64::from_bits(v.to_bits() - 1)
}

/// lo + (2*sigmoid(gamma*x) - 1) * (hi - lo), saturating strictly below `hi`.
///
/// At x = 0 the sigmoid is exactly 1/2 and the result is exactly `lo`; for
/// large x the sigmoid rounds to 1 in f64, so the value is pinned one ulp
/// below `hi` to keep the half-open range.
pub fn sigmoid_range(p: SigmoidRangeParams, x: f64) -> f64 {
    let y = p.lo + (2.0 * sigmoid(p.gamma * x) - 1.0) * (p.hi - p.lo);
    if y >= p.hi {
        prev_below(p.hi)
    } else {
        y
    }
}

/// d/dx of [`sigmoid_range`]: 2*gamma*(hi-lo)*sigmoid'(gamma*x), computed via
/// exp(-|t|)/(1+exp(-|t|))^2 so it stays strictly positive and strictly
/// decreasing for x > 0 instead of rounding to zero at saturation.
pub fn sigmoid_range_deriv(p: SigmoidRangeParams, x: f64) -> f64 {
    let t = (p.gamma * x).abs();
    let e = (-t).exp();
    let denom = 1.0 + e;
    2.0 * p.gamma * (p.hi - p.lo) * e / (denom * denom)
}

fn view2(t: &Tensor) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((t.shape()[0], t.shape()[1]), t.data()).expect("rank-2 tensor")
}

fn dot(a: &Tensor, b: &Tensor) -> Tensor {
    let c = view2(a).dot(&view2(b));
    let shape = vec![c.nrows(), c.ncols()];
    Tensor::new(shape, c.into_raw_vec_and_offset().0).expect("dot shape")
}

/// a · bᵀ
fn dot_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let c = view2(a).dot(&view2(b).t());
    let shape = vec![c.nrows(), c.ncols()];
    Tensor::new(shape, c.into_raw_vec_and_offset().0).expect("dot shape")
}

/// aᵀ · b
fn dot_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let c = view2(a).t().dot(&view2(b));
    let shape = vec![c.nrows(), c.ncols()];
    Tensor::new(shape, c.into_raw_vec_and_offset().0).expect("dot shape")
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op, trainable: bool) -> NodeId {
        self.nodes.push(NodeData {
            value,
            grad: None,
            op,
            trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf; receives a gradient but is not flagged trainable.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient populated by the most recent [`Graph::backward`] call.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    fn same_shape(&self, a: NodeId, b: NodeId, context: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                context,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), false))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub(a, b), false))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), false))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.value(a).map(|v| v * k);
        self.push(value, Op::Scale(a, k), false)
    }

    pub fn add_const(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.value(a).map(|v| v + k);
        self.push(value, Op::AddConst(a), false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                context: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let value = dot(self.value(a), self.value(b));
        Ok(self.push(value, Op::Matmul(a, b), false))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::Dimension {
                context: "transpose",
                left: s.to_vec(),
                right: vec![],
            });
        }
        let (n, m) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = src[i * m + j];
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::Transpose(a), false))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(a), false)
    }

    pub fn prelu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        if !slope.is_finite() {
            return Err(Error::Domain(format!("prelu slope must be finite, got {slope}")));
        }
        let value = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        Ok(self.push(value, Op::PRelu(a, slope), false))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), false)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| 1.0 / v);
        self.push(value, Op::Recip(a), false)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi), false)
    }

    /// Elementwise cos(arccos(u) + m); the arccos argument is clamped to
    /// [-1+1e-7, 1-1e-7] so the derivative stays finite.
    pub fn cos_angle_add(&mut self, a: NodeId, m: f64) -> NodeId {
        let value = self
            .value(a)
            .map(|u| (u.clamp(COS_CLAMP_LO, COS_CLAMP_HI).acos() + m).cos());
        self.push(value, Op::CosAngleAdd(a, m), false)
    }

    pub fn sigmoid_range(&mut self, a: NodeId, params: SigmoidRangeParams) -> NodeId {
        let value = self.value(a).map(|v| sigmoid_range(params, v));
        self.push(value, Op::SigmoidRange(a, params), false)
    }

    /// Per-row Euclidean norm of a rank-2 tensor: [n, d] -> [n].
    pub fn row_l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::Dimension {
                context: "row_l2_norm",
                left: s.to_vec(),
                right: vec![],
            });
        }
        let (n, d) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            data.push(row.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        let value = Tensor::new(vec![n], data)?;
        Ok(self.push(value, Op::RowL2Norm(a), false))
    }

    /// out[i, j] = mat[i, j] * v[i]
    pub fn scale_rows(&mut self, mat: NodeId, v: NodeId) -> Result<NodeId> {
        let (sm, sv) = (self.value(mat).shape(), self.value(v).shape());
        if sm.len() != 2 || sv.len() != 1 || sm[0] != sv[0] {
            return Err(Error::Dimension {
                context: "scale_rows",
                left: sm.to_vec(),
                right: sv.to_vec(),
            });
        }
        let (n, c) = (sm[0], sm[1]);
        let m = self.value(mat).data();
        let w = self.value(v).data();
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                data.push(m[i * c + j] * w[i]);
            }
        }
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(value, Op::ScaleRows(mat, v), false))
    }

    /// out[i, j] = mat[i, j] + b[j]
    pub fn bias_add(&mut self, mat: NodeId, b: NodeId) -> Result<NodeId> {
        let (sm, sb) = (self.value(mat).shape(), self.value(b).shape());
        if sm.len() != 2 || sb.len() != 1 || sm[1] != sb[0] {
            return Err(Error::Dimension {
                context: "bias_add",
                left: sm.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (n, c) = (sm[0], sm[1]);
        let m = self.value(mat).data();
        let bias = self.value(b).data();
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                data.push(m[i * c + j] + bias[j]);
            }
        }
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(value, Op::BiasAdd(mat, b), false))
    }

    /// out[n, c, y, x] = input[n, c, y, x] + b[c]
    pub fn channel_bias(&mut self, input: NodeId, b: NodeId) -> Result<NodeId> {
        let (si, sb) = (self.value(input).shape(), self.value(b).shape());
        if si.len() != 4 || sb.len() != 1 || si[1] != sb[0] {
            return Err(Error::Dimension {
                context: "channel_bias",
                left: si.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let src = self.value(input).data();
        let bias = self.value(b).data();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * c * hw);
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for k in 0..hw {
                    data.push(src[base + k] + bias[ch]);
                }
            }
        }
        let value = Tensor::new(si.to_vec(), data)?;
        Ok(self.push(value, Op::ChannelBias(input, b), false))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::Dimension {
                context: "reshape",
                left: self.value(a).shape().to_vec(),
                right: shape,
            });
        }
        let value = Tensor::new(shape, self.value(a).data().to_vec())?;
        Ok(self.push(value, Op::Reshape(a), false))
    }

    /// Cross-correlation (no kernel flip) with zero padding.
    ///
    /// input [n, c_in, h, w], kernel [c_out, c_in, kh, kw] ->
    /// [n, c_out, floor((h+2p-kh)/stride)+1, floor((w+2p-kw)/stride)+1]
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let dims = conv::ConvDims::check(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        let value = conv::forward(self.value(input), self.value(kernel), &dims);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            false,
        ))
    }

    /// Numerically stable softmax cross entropy, averaged over rows.
    ///
    /// Returns the scalar loss node and the cached softmax matrix [m, c].
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<(NodeId, Tensor)> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension {
                context: "softmax_xent",
                left: s.to_vec(),
                right: vec![labels.len()],
            });
        }
        let (m, c) = (s[0], s[1]);
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Index(format!(
                    "label {y} out of range for {c} classes (sample {i})"
                )));
            }
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; m * c];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &z[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[i * c + j] /= sum;
            }
            loss += sum.ln() - (row[labels[i]] - mx);
        }
        loss /= m as f64;
        let probs = Tensor::new(vec![m, c], probs)?;
        let node = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs: probs.clone(),
            },
            false,
        );
        Ok((node, probs))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), false)
    }

    fn accumulate(&mut self, target: NodeId, delta: Tensor) {
        match &mut self.nodes[target.0].grad {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Populates `grad` on every node; nodes unreachable from `loss` get zeros.
    ///
    /// Seed gradient is 1.0 at the loss; accumulation is additive across
    /// fan-out. Deterministic: repeated calls produce identical gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let da = {
                        let bv = self.value(b).data();
                        Tensor::new(
                            g.shape().to_vec(),
                            g.data().iter().zip(bv).map(|(gi, bi)| gi * bi).collect(),
                        )?
                    };
                    let db = {
                        let av = self.value(a).data();
                        Tensor::new(
                            g.shape().to_vec(),
                            g.data().iter().zip(av).map(|(gi, ai)| gi * ai).collect(),
                        )?
                    };
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Scale(a, k) => self.accumulate(a, g.map(|v| v * k)),
                Op::AddConst(a) => self.accumulate(a, g.clone()),
                Op::Matmul(a, b) => {
                    let da = dot_nt(&g, self.value(b));
                    let db = dot_tn(self.value(a), &g);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Transpose(a) => {
                    let (rows, cols) = (g.shape()[0], g.shape()[1]);
                    let gd = g.data();
                    let mut data = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            data[c * rows + r] = gd[r * cols + c];
                        }
                    }
                    self.accumulate(a, Tensor::new(vec![cols, rows], data)?);
                }
                Op::Relu(a) => {
                    let da = {
                        let av = self.value(a).data();
                        Tensor::new(
                            g.shape().to_vec(),
                            g.data()
                                .iter()
                                .zip(av)
                                .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                                .collect(),
                        )?
                    };
                    self.accumulate(a, da);
                }
                Op::PRelu(a, slope) => {
                    // subgradient at 0 taken from the positive branch
                    let da = {
                        let av = self.value(a).data();
                        Tensor::new(
                            g.shape().to_vec(),
                            g.data()
                                .iter()
                                .zip(av)
                                .map(|(gi, x)| if *x >= 0.0 { *gi } else { slope * gi })
                                .collect(),
                        )?
                    };
                    self.accumulate(a, da);
                }
                Op::Sigmoid(a) => {
                    let da = {
                        let out = self.nodes[i].value.data();
                        Tensor::new(
                            g.shape().to_vec(),
                            g.data()
                                .iter()
                                .zip(out)
                                .map(|(gi, s)| gi * s * (1.0 - s))
                                .collect(),
                        )?
                    };
                    self.accumulate(a, da);
                }
                Op::Recip(a) => {
                    let da = {
                        let out = self.nodes[i].value.data();
                        Tensor::new(
                            g.shape().to_vec(),
                            g.data()
                                .iter()
                                .zip(out)
                                .map(|(gi, y)| -gi * y * y)
                                .collect(),
                        )?
                    };
                    self.accumulate(a, da);
                }
                Op::Clamp(a, lo, hi) => {
                    let da = {
                        let av = self.value(a).data();
                        Tensor::new(
                            g.shape().to_vec(),
                            g.data()
                                .iter()
                                .zip(av)
                                .map(|(gi, x)| if *x > lo && *x < hi { *gi } else { 0.0 })
                                .collect(),
                        )?
                    };
                    self.accumulate(a, da);
                }
                Op::CosAngleAdd(a, m) => {
                    // d/du cos(arccos(u)+m) = sin(arccos(u)+m) / sqrt(1-u^2)
                    let da = {
                        let av = self.value(a).data();
                        Tensor::new(
                            g.shape().to_vec(),
                            g.data()
                                .iter()
                                .zip(av)
                                .map(|(gi, u)| {
                                    if *u < COS_CLAMP_LO || *u > COS_CLAMP_HI {
                                        0.0
                                    } else {
                                        let theta = u.acos();
                                        gi * (theta + m).sin() / theta.sin()
                                    }
                                })
                                .collect(),
                        )?
                    };
                    self.accumulate(a, da);
                }
                Op::SigmoidRange(a, p) => {
                    let da = {
                        let av = self.value(a).data();
                        Tensor::new(
                            g.shape().to_vec(),
                            g.data()
                                .iter()
                                .zip(av)
                                .map(|(gi, x)| gi * sigmoid_range_deriv(p, *x))
                                .collect(),
                        )?
                    };
                    self.accumulate(a, da);
                }
                Op::RowL2Norm(a) => {
                    // d||row||/drow = row / ||row||, defined as 0 for zero rows
                    let da = {
                        let av = self.value(a);
                        let (n, d) = (av.shape()[0], av.shape()[1]);
                        let src = av.data();
                        let norms = self.nodes[i].value.data();
                        let mut data = vec![0.0; n * d];
                        for r in 0..n {
                            if norms[r] > 0.0 {
                                let f = g.data()[r] / norms[r];
                                for c in 0..d {
                                    data[r * d + c] = f * src[r * d + c];
                                }
                            }
                        }
                        Tensor::new(vec![n, d], data)?
                    };
                    self.accumulate(a, da);
                }
                Op::ScaleRows(mat, v) => {
                    let (n, c) = (g.shape()[0], g.shape()[1]);
                    let dmat = {
                        let w = self.value(v).data();
                        let mut data = vec![0.0; n * c];
                        for r in 0..n {
                            for j in 0..c {
                                data[r * c + j] = g.data()[r * c + j] * w[r];
                            }
                        }
                        Tensor::new(vec![n, c], data)?
                    };
                    let dv = {
                        let m = self.value(mat).data();
                        let mut data = vec![0.0; n];
                        for r in 0..n {
                            let mut acc = 0.0;
                            for j in 0..c {
                                acc += g.data()[r * c + j] * m[r * c + j];
                            }
                            data[r] = acc;
                        }
                        Tensor::new(vec![n], data)?
                    };
                    self.accumulate(mat, dmat);
                    self.accumulate(v, dv);
                }
                Op::BiasAdd(mat, b) => {
                    let (n, c) = (g.shape()[0], g.shape()[1]);
                    let db = {
                        let mut data = vec![0.0; c];
                        for r in 0..n {
                            for j in 0..c {
                                data[j] += g.data()[r * c + j];
                            }
                        }
                        Tensor::new(vec![c], data)?
                    };
                    self.accumulate(mat, g.clone());
                    self.accumulate(b, db);
                }
                Op::ChannelBias(input, b) => {
                    let s = g.shape().to_vec();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let db = {
                        let mut data = vec![0.0; c];
                        for i_n in 0..n {
                            for ch in 0..c {
                                let base = (i_n * c + ch) * hw;
                                data[ch] += g.data()[base..base + hw].iter().sum::<f64>();
                            }
                        }
                        Tensor::new(vec![c], data)?
                    };
                    self.accumulate(input, g.clone());
                    self.accumulate(b, db);
                }
                Op::Reshape(a) => {
                    let shape = self.value(a).shape().to_vec();
                    self.accumulate(a, Tensor::new(shape, g.data().to_vec())?);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    padding,
                } => {
                    let dims = conv::ConvDims::check(
                        self.value(input).shape(),
                        self.value(kernel).shape(),
                        stride,
                        padding,
                    )?;
                    let (dinput, dkernel) =
                        conv::backward(self.value(input), self.value(kernel), &g, &dims);
                    self.accumulate(input, dinput);
                    self.accumulate(kernel, dkernel);
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    let (m, c) = (probs.shape()[0], probs.shape()[1]);
                    let gs = g.item();
                    let mut data = probs.data().to_vec();
                    for (r, &y) in labels.iter().enumerate() {
                        data[r * c + y] -= 1.0;
                    }
                    let inv_m = 1.0 / m as f64;
                    for v in data.iter_mut() {
                        *v *= gs * inv_m;
                    }
                    self.accumulate(logits, Tensor::new(vec![m, c], data)?);
                }
                Op::Sum(a) => {
                    let gs = g.item();
                    let shape = self.value(a).shape().to_vec();
                    self.accumulate(a, Tensor::full(&shape, gs));
                }
            }
            self.nodes[i].grad = Some(g);
        }

        for node in &mut self.nodes {
            if node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }
}

/// Cosine values are clamped into this closed interval before any arccos.
pub const COS_CLAMP_LO: f64 = -1.0 + 1e-7;
pub const COS_CLAMP_HI: f64 = 1.0 - 1e-7;

#[cfg(test)]
mod tests;
