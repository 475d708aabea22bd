use std::sync::Arc;

use super::kernels::{gemm, gemm_view, TimeConv, View};
use super::{softmax_row, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running statistics of a batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Sum(Var),
    Matmul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    ConvTime {
        x: Var,
        w: Var,
        geom: TimeConv,
        batch: usize,
        out_channels: usize,
    },
    JointMix {
        x: Var,
        adj: Arc<[f64]>,
        joints: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Relu(Var),
    MeanPool(Var),
    Concat(Vec<Var>),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// Define-by-run record of primitive operations. Nodes are appended in
/// evaluation order, so the node list is already topologically sorted.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` as a leaf; it receives a gradient when
    /// `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        let needs_grad = value.requires_grad();
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `t` as a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Scale(a, s), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    /// `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul: incompatible shapes {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(false, false, m, n, k, 1.0, self.value(a).data(), self.value(b).data(), 0.0, &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    /// `[N x C] + [C]`, broadcasting the bias over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(shape_err(format!("add_row_bias: shapes {sx:?} and {sb:?}")));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(bias.len()) {
            row.iter_mut().zip(bias).for_each(|(r, b)| *r += b);
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::AddRowBias(x, b), &[x, b]))
    }

    /// `[N x C x ...] + [C]`, broadcasting the bias over batch and trailing axes.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(shape_err(format!("add_channel_bias: shapes {sx:?} and {sb:?}")));
        }
        let inner: usize = sx[2..].iter().product();
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_exact_mut(inner).enumerate() {
            let bv = bias[i % bias.len()];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::AddChannelBias(x, b), &[x, b]))
    }

    /// Convolution along the time axis. `x: [N x C x T x V]`,
    /// `w: [C' x C x K x 1]`; the kernel spans frames only.
    pub fn conv_time(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 {
            return Err(shape_err(format!("conv_time: input must be N x C x T x V, got {sx:?}")));
        }
        if sw.len() != 4 || sw[3] != 1 || sw[1] != sx[1] {
            return Err(shape_err(format!(
                "conv_time: weight {sw:?} incompatible with input {sx:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv_time: stride must be positive".into()));
        }
        let kernel = sw[2];
        let pad = match padding {
            Padding::Same => {
                if kernel % 2 == 0 {
                    return Err(Error::Config(format!(
                        "conv_time: same-length padding needs an odd kernel, got {kernel}"
                    )));
                }
                (kernel - 1) / 2
            }
            Padding::Explicit(p) => p,
        };
        if sx[2] + 2 * pad < kernel {
            return Err(shape_err(format!(
                "conv_time: kernel {kernel} longer than padded input {}",
                sx[2] + 2 * pad
            )));
        }
        let geom = TimeConv {
            channels: sx[1],
            frames: sx[2],
            joints: sx[3],
            kernel,
            stride,
            pad,
        };
        let (batch, out_channels) = (sx[0], sw[0]);
        let t_out = geom.out_frames();
        let in_len = geom.channels * geom.frames * geom.joints;
        let out_len = out_channels * t_out * geom.joints;
        let mut out = vec![0.0; batch * out_len];
        let direct = kernel == 1 && stride == 1 && pad == 0;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        if stride == 1 && !direct {
            for n in 0..batch {
                conv_taps_forward(&geom, out_channels, ws, &xs[n * in_len..], &mut out[n * out_len..]);
            }
            let out = Tensor::new(vec![batch, out_channels, t_out, geom.joints], out)?;
            return Ok(self.push(
                out,
                Op::ConvTime {
                    x,
                    w,
                    geom,
                    batch,
                    out_channels,
                },
                &[x, w],
            ));
        }
        let mut col = if direct { Vec::new() } else { vec![0.0; geom.col_rows() * geom.col_cols()] };
        for n in 0..batch {
            let xn = &xs[n * in_len..(n + 1) * in_len];
            let src = if direct {
                xn
            } else {
                geom.im2col(xn, &mut col);
                &col
            };
            gemm(
                false,
                false,
                out_channels,
                geom.col_cols(),
                geom.col_rows(),
                1.0,
                ws,
                src,
                0.0,
                &mut out[n * out_len..(n + 1) * out_len],
            );
        }
        let out = Tensor::new(vec![batch, out_channels, t_out, geom.joints], out)?;
        Ok(self.push(
            out,
            Op::ConvTime {
                x,
                w,
                geom,
                batch,
                out_channels,
            },
            &[x, w],
        ))
    }

    /// Mixes joint features of every frame through a fixed `V x V` matrix:
    /// `y[n,c,t,v] = sum_u x[n,c,t,u] * adj[u,v]`.
    pub fn joint_mix(&mut self, x: Var, adj: Arc<[f64]>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(shape_err(format!("joint_mix: input must be N x C x T x V, got {sx:?}")));
        }
        let v = sx[3];
        if adj.len() != v * v {
            return Err(shape_err(format!(
                "joint_mix: adjacency has {} entries, input has {v} joints",
                adj.len()
            )));
        }
        let rows = sx[0] * sx[1] * sx[2];
        let mut out = vec![0.0; rows * v];
        gemm(false, false, rows, v, v, 1.0, self.value(x).data(), &adj, 0.0, &mut out);
        let out = Tensor::new(sx, out)?;
        Ok(self.push(out, Op::JointMix { x, adj, joints: v }, &[x]))
    }

    /// Per-channel batch normalization over every axis except axis 1.
    ///
    /// In training mode the batch statistics are used and `stats` is updated
    /// with momentum [`BN_MOMENTUM`] (unbiased variance). In eval mode the
    /// running statistics in `stats` are used unchanged.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        training: bool,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(shape_err(format!("batch_norm: input rank too small: {sx:?}")));
        }
        let c = sx[1];
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [c] {
                return Err(shape_err(format!(
                    "batch_norm: {name} shape {:?}, expected [{c}]",
                    self.shape(p)
                )));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(shape_err("batch_norm: running statistics have wrong length".into()));
        }
        let n = sx[0];
        let inner: usize = sx[2..].iter().product();
        let count = n * inner;
        let xs = self.value(x).data();
        let (mean, var) = if training {
            if count < 2 {
                return Err(Error::DegenerateBatch(format!(
                    "batch_norm needs at least two values per channel in training mode, got {count}"
                )));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for (i, chunk) in xs.chunks_exact(inner).enumerate() {
                mean[i % c] += chunk.iter().sum::<f64>();
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for (i, chunk) in xs.chunks_exact(inner).enumerate() {
                let m = mean[i % c];
                var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            let unbias = count as f64 / (count as f64 - 1.0);
            for ch in 0..c {
                stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean[ch];
                stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Vec::with_capacity(xs.len());
        for (i, chunk) in xs.chunks_exact(inner).enumerate() {
            let ch = i % c;
            let (m, s, gg, bb) = (mean[ch], inv_std[ch], g[ch], b[ch]);
            out.extend(chunk.iter().map(|v| (v - m) * s * gg + bb));
        }
        let out = Tensor::new(sx, out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::Relu(x), &[x]))
    }

    /// Average over every axis after the second: `[N x C x ...] -> [N x C]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 3 {
            return Err(shape_err(format!("mean_pool: need rank >= 3, got {sx:?}")));
        }
        let inner: usize = sx[2..].iter().product();
        let data = self
            .value(x)
            .data()
            .chunks_exact(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let out = Tensor::new(vec![sx[0], sx[1]], data)?;
        Ok(self.push(out, Op::MeanPool(x), &[x]))
    }

    /// Concatenates `[N x C_i]` matrices along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat: no inputs".into()))?;
        let n = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(shape_err(format!("concat: incompatible part shape {s:?}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for row in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[row * w..(row + 1) * w]);
            }
        }
        let out = Tensor::new(vec![n, total], data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = super::softmax(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err(format!(
                "cross_entropy: logits {s:?} for {} labels",
                labels.len()
            )));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label(format!("label {bad} outside [0, {c})")));
        }
        let mut probs = Vec::with_capacity(labels.len() * c);
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).rows().zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_row(row, &mut probs)?;
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar. Each node is visited once; gradients
    /// reaching a value along several paths are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Rank(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(false, true, m, k, n, 1.0, g, self.value(*b).data(), 0.0, &mut da);
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(true, false, k, n, m, 1.0, self.value(*a).data(), g, 0.0, &mut db);
                    acc(*b, db);
                }
            }
            Op::AddRowBias(x, b) => {
                if self.wants(*x) {
                    acc(*x, g.to_vec());
                }
                if self.wants(*b) {
                    let c = self.value(*b).numel();
                    let mut db = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    acc(*b, db);
                }
            }
            Op::AddChannelBias(x, b) => {
                if self.wants(*x) {
                    acc(*x, g.to_vec());
                }
                if self.wants(*b) {
                    let c = self.value(*b).numel();
                    let inner: usize = self.shape(*x)[2..].iter().product();
                    let mut db = vec![0.0; c];
                    for (i, chunk) in g.chunks_exact(inner).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    acc(*b, db);
                }
            }
            Op::ConvTime {
                x,
                w,
                geom,
                batch,
                out_channels,
            } => {
                let (want_x, want_w) = (self.wants(*x), self.wants(*w));
                let in_len = geom.channels * geom.frames * geom.joints;
                let out_len = out_channels * geom.out_frames() * geom.joints;
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let direct = geom.kernel == 1 && geom.stride == 1 && geom.pad == 0;
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let mut dw = if want_w { vec![0.0; out_channels * rows] } else { Vec::new() };
                let mut dx = if want_x { vec![0.0; batch * in_len] } else { Vec::new() };
                let mut col = vec![0.0; if direct { 0 } else { rows * cols }];
                let mut dcol = vec![0.0; if want_x && !direct { rows * cols } else { 0 }];
                for n in 0..*batch {
                    let gn = &g[n * out_len..(n + 1) * out_len];
                    if want_w {
                        let xn = &xs[n * in_len..(n + 1) * in_len];
                        let src = if direct {
                            xn
                        } else {
                            geom.im2col(xn, &mut col);
                            &col
                        };
                        gemm(false, true, *out_channels, rows, cols, 1.0, gn, src, 1.0, &mut dw);
                    }
                    if want_x {
                        let dxn = &mut dx[n * in_len..(n + 1) * in_len];
                        if direct {
                            gemm(true, false, rows, cols, *out_channels, 1.0, ws, gn, 0.0, dxn);
                        } else {
                            gemm(true, false, rows, cols, *out_channels, 1.0, ws, gn, 0.0, &mut dcol);
                            geom.col2im(&dcol, dxn);
                        }
                    }
                }
                if want_w {
                    acc(*w, dw);
                }
                if want_x {
                    acc(*x, dx);
                }
            }
            Op::JointMix { x, adj, joints } => {
                let rows = g.len() / joints;
                let mut dx = vec![0.0; g.len()];
                gemm(false, true, rows, *joints, *joints, 1.0, g, adj, 0.0, &mut dx);
                acc(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            } => {
                let s = self.shape(*x);
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                let count = (s[0] * inner) as f64;
                let xs = self.value(*x).data();
                let gam = self.value(*gamma).data();
                // Per-channel sums of g and g * xhat.
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (xc, gc)) in xs.chunks_exact(inner).zip(g.chunks_exact(inner)).enumerate() {
                    let ch = i % c;
                    let (m, is) = (mean[ch], inv_std[ch]);
                    for (&xv, &gv) in xc.iter().zip(gc) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * (xv - m) * is;
                    }
                }
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(xs.len());
                    for (i, (xc, gc)) in xs.chunks_exact(inner).zip(g.chunks_exact(inner)).enumerate() {
                        let ch = i % c;
                        let (m, is, gm) = (mean[ch], inv_std[ch], gam[ch]);
                        if *training {
                            let (sg, sgx) = (sum_g[ch] / count, sum_gx[ch] / count);
                            dx.extend(
                                xc.iter()
                                    .zip(gc)
                                    .map(|(&xv, &gv)| gm * is * (gv - sg - (xv - m) * is * sgx)),
                            );
                        } else {
                            dx.extend(gc.iter().map(|&gv| gm * is * gv));
                        }
                    }
                    acc(*x, dx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, sum_gx);
                }
                if self.wants(*beta) {
                    acc(*beta, sum_g);
                }
            }
            Op::Relu(x) => {
                let out = node.value.data();
                acc(*x, g.iter().zip(out).map(|(g, &o)| if o > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::MeanPool(x) => {
                let inner: usize = self.shape(*x)[2..].iter().product();
                let mut dx = Vec::with_capacity(g.len() * inner);
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv / inner as f64, inner));
                }
                acc(*x, dx);
            }
            Op::Concat(parts) => {
                let n = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(n * w);
                        for row in 0..n {
                            dp.extend_from_slice(&g[row * total + offset..row * total + offset + w]);
                        }
                        acc(p, dp);
                    }
                    offset += w;
                }
            }
            Op::Softmax(x) => {
                let c = *node.value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(g.len());
                for (sr, gr) in node.value.data().chunks_exact(c).zip(g.chunks_exact(c)) {
                    let dot: f64 = sr.iter().zip(gr).map(|(s, g)| s * g).sum();
                    dx.extend(sr.iter().zip(gr).map(|(s, g)| s * (g - dot)));
                }
                acc(*x, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dl[i * c + l] -= scale;
                }
                acc(*logits, dl);
            }
        }
    }
}

/// Unit-stride time convolution of one sample as a sum over kernel taps:
/// `y[:, lo..hi] += W_k x[:, src..]`, with no unfolded copy of the input.
fn conv_taps_forward(geom: &TimeConv, out_channels: usize, w: &[f64], x: &[f64], y: &mut [f64]) {
    let (c, v, kk) = (geom.channels, geom.joints, geom.kernel);
    let (in_row, out_row) = (geom.frames * v, geom.out_frames() * v);
    for k in 0..kk {
        if let Some((lo, hi, src)) = geom.tap_range(k) {
            gemm_view(
                out_channels,
                (hi - lo) * v,
                c,
                1.0,
                w,
                View { offset: k, rs: c * kk, cs: kk },
                x,
                View { offset: src * v, rs: in_row, cs: 1 },
                1.0,
                y,
                View { offset: lo * v, rs: out_row, cs: 1 },
            );
        }
    }
}

/// Padding rule for [`Tape::conv_time`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// `(K - 1) / 2` frames on each side; requires an odd kernel.
    Same,
    Explicit(usize),
}
