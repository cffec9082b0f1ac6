//! Forward op builders and their backward rules.
//!
//! The op set is fixed: exactly what the network layers, the quantizer and
//! the loss terms need. Reductions accumulate in f64 in index order.

use std::sync::Arc;

use super::{dims2, dims4, same_shape, GradStore, Tensor};
use crate::error::{Error, Result};

pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<Tensor>,
}

pub(crate) enum Op {
    // elementwise, equal shapes
    Add,
    Sub,
    Mul,
    Div,
    // scalar
    AddScalar,
    MulScalar(f32),
    // unary
    Abs,
    Square,
    Sqrt,
    Exp,
    Log,
    Tanh,
    Relu,
    LeakyRelu(f32),
    Clip { lo: f32, hi: f32 },
    RoundSte,
    FakeQuant { bounds: Arc<Vec<(f32, f32)>>, per_channel: bool },
    // shape
    Reshape,
    ConcatChannels { channels: Vec<usize> },
    SliceChannels { from: usize, count: usize },
    // reductions
    Sum,
    Mean,
    SumRows,
    MeanRows,
    RowMax { argmax: Vec<u32> },
    SumChannels,
    MeanPerChannel,
    VarPerChannel,
    // broadcasts
    AddChannel,
    SubChannel,
    MulChannel,
    DivChannel,
    MulNc,
    AddNc,
    SubRows,
    DivRows,
    AddBias,
    // indexing
    Gather { idx: Arc<Vec<usize>> },
    Embed { idx: Arc<Vec<usize>> },
    StackScalars,
    // rows
    Softmax,
    // linear algebra
    MatMul,
    MatMulNt,
    // spatial (rules live in spatial.rs)
    Conv2d { stride: usize, pad: usize },
    MaxPool2d { argmax: Vec<u32> },
    AdaptiveMaxPool { argmax: Vec<u32> },
    AdaptiveAvgPool { oh: usize, ow: usize },
    UpsampleNearest { factor: usize },
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("add", self, rhs)?;
        let data = zip_map(self, rhs, |x, y| x + y);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Add, vec![self.clone(), rhs.clone()]))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, rhs)?;
        let data = zip_map(self, rhs, |x, y| x - y);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Sub, vec![self.clone(), rhs.clone()]))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, rhs)?;
        let data = zip_map(self, rhs, |x, y| x * y);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Mul, vec![self.clone(), rhs.clone()]))
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("div", self, rhs)?;
        let data = zip_map(self, rhs, |x, y| x / y);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Div, vec![self.clone(), rhs.clone()]))
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        let data = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::AddScalar, vec![self.clone()])
    }

    pub fn mul_scalar(&self, c: f32) -> Tensor {
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::MulScalar(c), vec![self.clone()])
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn abs(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.abs()).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Abs, vec![self.clone()])
    }

    pub fn square(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x * x).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Square, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.data().iter().any(|&x| x < 0.0) {
            return Err(Error::NonFinite { context: "sqrt of negative input".into() });
        }
        let data = self.data().iter().map(|&x| x.sqrt()).collect();
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Sqrt, vec![self.clone()]))
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.exp()).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Exp, vec![self.clone()])
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite { context: "log of non-positive input".into() });
        }
        let data = self.data().iter().map(|&x| x.ln()).collect();
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Log, vec![self.clone()]))
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.tanh()).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Tanh, vec![self.clone()])
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.max(0.0)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Relu, vec![self.clone()])
    }

    pub fn leaky_relu(&self, slope: f32) -> Tensor {
        let data = self.data().iter().map(|&x| if x >= 0.0 { x } else { slope * x }).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::LeakyRelu(slope), vec![self.clone()])
    }

    /// Clamp to [lo, hi]; gradient passes only where the input lies inside.
    pub fn clip(&self, lo: f32, hi: f32) -> Tensor {
        let data = self.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Clip { lo, hi }, vec![self.clone()])
    }

    pub fn clamp_max(&self, hi: f32) -> Tensor {
        self.clip(f32::NEG_INFINITY, hi)
    }

    /// Round half away from zero; backward is the identity (straight-through).
    pub fn round_ste(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.round()).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::RoundSte, vec![self.clone()])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::BadShape {
                op: "reshape",
                expected: format!("{} elements", self.numel()),
                got: shape.to_vec(),
            });
        }
        let data = self.data().to_vec();
        Ok(Tensor::from_op(data, shape.to_vec(), Op::Reshape, vec![self.clone()]))
    }

    pub fn slice_channels(&self, from: usize, to: usize) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "slice_channels")?;
        if from >= to || to > c {
            return Err(Error::invalid("slice_channels", format!("range {from}..{to} of {c} channels")));
        }
        let count = to - from;
        let plane = h * w;
        let mut data = vec![0.0; n * count * plane];
        for i in 0..n {
            let src = &self.data()[i * c * plane + from * plane..i * c * plane + to * plane];
            data[i * count * plane..(i + 1) * count * plane].copy_from_slice(src);
        }
        Ok(Tensor::from_op(
            data,
            vec![n, count, h, w],
            Op::SliceChannels { from, count },
            vec![self.clone()],
        ))
    }

    /// Σ over all elements, f64 accumulation, shape [1].
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().map(|&x| x as f64).sum();
        Tensor::from_op(vec![s as f32], vec![1], Op::Sum, vec![self.clone()])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        let s: f64 = self.data().iter().map(|&x| x as f64).sum();
        Tensor::from_op(vec![(s / n) as f32], vec![1], Op::Mean, vec![self.clone()])
    }

    /// Per-row Σ of a 2-D tensor → [rows].
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (rows, cols) = dims2(self, "sum_rows")?;
        let data = self
            .data()
            .chunks(cols)
            .map(|r| r.iter().map(|&x| x as f64).sum::<f64>() as f32)
            .collect();
        Ok(Tensor::from_op(data, vec![rows], Op::SumRows, vec![self.clone()]))
    }

    pub fn mean_rows(&self) -> Result<Tensor> {
        let (rows, cols) = dims2(self, "mean_rows")?;
        let data = self
            .data()
            .chunks(cols)
            .map(|r| (r.iter().map(|&x| x as f64).sum::<f64>() / cols as f64) as f32)
            .collect();
        Ok(Tensor::from_op(data, vec![rows], Op::MeanRows, vec![self.clone()]))
    }

    /// Per-row max → [rows]; ties break to the first (row-major) position.
    pub fn row_max(&self) -> Result<Tensor> {
        let (rows, cols) = dims2(self, "row_max")?;
        let mut data = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in self.data().chunks(cols) {
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for (i, &v) in r.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            data.push(best_v);
            argmax.push(best as u32);
        }
        Ok(Tensor::from_op(data, vec![rows], Op::RowMax { argmax }, vec![self.clone()]))
    }

    /// x[n,c] - v[n] with v of shape [rows].
    pub fn sub_rows(&self, v: &Tensor) -> Result<Tensor> {
        let (rows, cols) = dims2(self, "sub_rows")?;
        if v.shape() != [rows] {
            return Err(Error::ShapeMismatch { op: "sub_rows", lhs: self.shape().to_vec(), rhs: v.shape().to_vec() });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for (n, r) in self.data().chunks(cols).enumerate() {
            let off = v.data()[n];
            data.extend(r.iter().map(|&x| x - off));
        }
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::SubRows, vec![self.clone(), v.clone()]))
    }

    /// x[n,c] / v[n] with v of shape [rows].
    pub fn div_rows(&self, v: &Tensor) -> Result<Tensor> {
        let (rows, cols) = dims2(self, "div_rows")?;
        if v.shape() != [rows] {
            return Err(Error::ShapeMismatch { op: "div_rows", lhs: self.shape().to_vec(), rhs: v.shape().to_vec() });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for (n, r) in self.data().chunks(cols).enumerate() {
            let d = v.data()[n];
            data.extend(r.iter().map(|&x| x / d));
        }
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::DivRows, vec![self.clone(), v.clone()]))
    }

    /// x[n,c] + b[c].
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (rows, cols) = dims2(self, "add_bias")?;
        if bias.shape() != [cols] {
            return Err(Error::ShapeMismatch { op: "add_bias", lhs: self.shape().to_vec(), rhs: bias.shape().to_vec() });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in self.data().chunks(cols) {
            data.extend(r.iter().zip(bias.data()).map(|(&x, &b)| x + b));
        }
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::AddBias, vec![self.clone(), bias.clone()]))
    }

    /// Flat-index gather → [idx.len()].
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor> {
        for &i in idx {
            if i >= self.numel() {
                return Err(Error::invalid("gather", format!("index {i} out of {}", self.numel())));
            }
        }
        let data = idx.iter().map(|&i| self.data()[i]).collect();
        let idx = Arc::new(idx.to_vec());
        Ok(Tensor::from_op(data, vec![idx.len()], Op::Gather { idx }, vec![self.clone()]))
    }

    /// Row lookup into an embedding table of shape [vocab, dim] → [idx.len(), dim].
    pub fn embed(&self, idx: &[usize]) -> Result<Tensor> {
        let (vocab, dim) = dims2(self, "embed")?;
        for &i in idx {
            if i >= vocab {
                return Err(Error::invalid("embed", format!("index {i} out of vocabulary {vocab}")));
            }
        }
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            data.extend_from_slice(&self.data()[i * dim..(i + 1) * dim]);
        }
        let n = idx.len();
        let idx = Arc::new(idx.to_vec());
        Ok(Tensor::from_op(data, vec![n, dim], Op::Embed { idx }, vec![self.clone()]))
    }

    /// Numerically stable per-row softmax of a 2-D tensor.
    pub fn softmax(&self) -> Result<Tensor> {
        let (rows, cols) = dims2(self, "softmax")?;
        let mut data = Vec::with_capacity(rows * cols);
        for r in self.data().chunks(cols) {
            let m = r.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = r.iter().map(|&x| (x - m).exp()).collect();
            let s: f64 = exps.iter().map(|&x| x as f64).sum();
            data.extend(exps.iter().map(|&e| (e as f64 / s) as f32));
        }
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Softmax, vec![self.clone()]))
    }

    /// Per-row log-softmax, composed from tape ops (max-shifted, stable).
    pub fn log_softmax(&self) -> Result<Tensor> {
        let m = self.row_max()?;
        let shifted = self.sub_rows(&m)?;
        let lse = shifted.exp().sum_rows()?.log()?;
        shifted.sub_rows(&lse)
    }

    /// Σ over the channel axis of NCHW → [n, h·w].
    pub fn sum_channels(&self) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "sum_channels")?;
        let plane = h * w;
        let mut data = vec![0.0f32; n * plane];
        for i in 0..n {
            for ch in 0..c {
                let src = &self.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                let dst = &mut data[i * plane..(i + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Ok(Tensor::from_op(data, vec![n, plane], Op::SumChannels, vec![self.clone()]))
    }

    /// Per-channel mean over (N, H, W) → [c].
    pub fn mean_per_channel(&self) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "mean_per_channel")?;
        let plane = h * w;
        let m = (n * plane) as f64;
        let mut data = vec![0.0f32; c];
        for (ch, out) in data.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for i in 0..n {
                let src = &self.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                for &x in src {
                    acc += x as f64;
                }
            }
            *out = (acc / m) as f32;
        }
        Ok(Tensor::from_op(data, vec![c], Op::MeanPerChannel, vec![self.clone()]))
    }

    /// Per-channel population variance over (N, H, W) → [c].
    pub fn var_per_channel(&self) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "var_per_channel")?;
        let plane = h * w;
        let m = (n * plane) as f64;
        let mut data = vec![0.0f32; c];
        for (ch, out) in data.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for i in 0..n {
                let src = &self.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                for &x in src {
                    acc += x as f64;
                }
            }
            let mu = acc / m;
            let mut var = 0.0f64;
            for i in 0..n {
                let src = &self.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                for &x in src {
                    let d = x as f64 - mu;
                    var += d * d;
                }
            }
            *out = (var / m) as f32;
        }
        Ok(Tensor::from_op(data, vec![c], Op::VarPerChannel, vec![self.clone()]))
    }

    fn channel_broadcast(&self, v: &Tensor, op: Op, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, name)?;
        if v.shape() != [c] {
            return Err(Error::ShapeMismatch { op: name, lhs: self.shape().to_vec(), rhs: v.shape().to_vec() });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(self.numel());
        for i in 0..n {
            for ch in 0..c {
                let vv = v.data()[ch];
                let src = &self.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                data.extend(src.iter().map(|&x| f(x, vv)));
            }
        }
        Ok(Tensor::from_op(data, self.shape().to_vec(), op, vec![self.clone(), v.clone()]))
    }

    pub fn add_channel(&self, v: &Tensor) -> Result<Tensor> {
        self.channel_broadcast(v, Op::AddChannel, "add_channel", |x, v| x + v)
    }

    pub fn sub_channel(&self, v: &Tensor) -> Result<Tensor> {
        self.channel_broadcast(v, Op::SubChannel, "sub_channel", |x, v| x - v)
    }

    pub fn mul_channel(&self, v: &Tensor) -> Result<Tensor> {
        self.channel_broadcast(v, Op::MulChannel, "mul_channel", |x, v| x * v)
    }

    pub fn div_channel(&self, v: &Tensor) -> Result<Tensor> {
        self.channel_broadcast(v, Op::DivChannel, "div_channel", |x, v| x / v)
    }

    fn nc_broadcast(&self, s: &Tensor, op: Op, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, name)?;
        if s.shape() != [n, c] {
            return Err(Error::ShapeMismatch { op: name, lhs: self.shape().to_vec(), rhs: s.shape().to_vec() });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(self.numel());
        for i in 0..n {
            for ch in 0..c {
                let vv = s.data()[i * c + ch];
                let src = &self.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                data.extend(src.iter().map(|&x| f(x, vv)));
            }
        }
        Ok(Tensor::from_op(data, self.shape().to_vec(), op, vec![self.clone(), s.clone()]))
    }

    /// Per-sample per-channel scale: out[n,c,·] = x[n,c,·] · s[n,c].
    pub fn mul_nc(&self, s: &Tensor) -> Result<Tensor> {
        self.nc_broadcast(s, Op::MulNc, "mul_nc", |x, v| x * v)
    }

    /// Per-sample per-channel shift: out[n,c,·] = x[n,c,·] + s[n,c].
    pub fn add_nc(&self, s: &Tensor) -> Result<Tensor> {
        self.nc_broadcast(s, Op::AddNc, "add_nc", |x, v| x + v)
    }

    /// A[m,k] · B[k,n].
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(rhs, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: self.shape().to_vec(), rhs: rhs.shape().to_vec() });
        }
        let mut data = vec![0.0f32; m * n];
        super::gemm::gemm(m, k, n, 1.0, self.data(), k, false, rhs.data(), n, false, 0.0, &mut data, n);
        Ok(Tensor::from_op(data, vec![m, n], Op::MatMul, vec![self.clone(), rhs.clone()]))
    }

    /// A[m,k] · B[n,k]ᵀ — the linear-layer product.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul_nt")?;
        let (n, k2) = dims2(rhs, "matmul_nt")?;
        if k != k2 {
            return Err(Error::ShapeMismatch { op: "matmul_nt", lhs: self.shape().to_vec(), rhs: rhs.shape().to_vec() });
        }
        let mut data = vec![0.0f32; m * n];
        super::gemm::gemm(m, k, n, 1.0, self.data(), k, false, rhs.data(), k, true, 0.0, &mut data, n);
        Ok(Tensor::from_op(data, vec![m, n], Op::MatMulNt, vec![self.clone(), rhs.clone()]))
    }
}

/// Stack scalar tensors into one vector [k]; gradients route back per element.
pub fn stack_scalars(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::invalid("stack_scalars", "empty input"));
    }
    let mut data = Vec::with_capacity(parts.len());
    for p in parts {
        if p.numel() != 1 {
            return Err(Error::BadShape { op: "stack_scalars", expected: "scalars".into(), got: p.shape().to_vec() });
        }
        data.push(p.item());
    }
    Ok(Tensor::from_op(data, vec![parts.len()], Op::StackScalars, parts.to_vec()))
}

/// Concatenate NCHW tensors along the channel axis.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::invalid("concat_channels", "empty input"));
    }
    let (n, c0, h, w) = dims4(&parts[0], "concat_channels")?;
    let mut channels = vec![c0];
    for p in &parts[1..] {
        let (pn, pc, ph, pw) = dims4(p, "concat_channels")?;
        if pn != n || ph != h || pw != w {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        channels.push(pc);
    }
    let c_total: usize = channels.iter().sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * c_total * plane);
    for i in 0..n {
        for (p, &pc) in parts.iter().zip(&channels) {
            data.extend_from_slice(&p.data()[i * pc * plane..(i + 1) * pc * plane]);
        }
    }
    Ok(Tensor::from_op(data, vec![n, c_total, h, w], Op::ConcatChannels { channels }, parts.to_vec()))
}

/// Per-site fake-quantization with the bound-clamped straight-through
/// gradient: 1 where l ≤ x ≤ u, 0 outside. Built by the quantizer module.
pub(crate) fn fake_quant_op(
    x: &Tensor,
    data: Vec<f32>,
    bounds: Arc<Vec<(f32, f32)>>,
    per_channel: bool,
) -> Tensor {
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        Op::FakeQuant { bounds, per_channel },
        vec![x.clone()],
    )
}

// ───────────────────────── backward rules ─────────────────────────

pub(crate) fn backward_op(out: &Tensor, node: &Node, g: &[f32], sink: &mut GradStore) -> Result<()> {
    let ins = &node.inputs;
    match &node.op {
        Op::Add => {
            sink.add(&ins[0], g.to_vec());
            sink.add(&ins[1], g.to_vec());
        }
        Op::Sub => {
            sink.add(&ins[0], g.to_vec());
            sink.add(&ins[1], g.iter().map(|&v| -v).collect());
        }
        Op::Mul => {
            let (a, b) = (&ins[0], &ins[1]);
            sink.add(a, g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect());
            sink.add(b, g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect());
        }
        Op::Div => {
            let (a, b) = (&ins[0], &ins[1]);
            sink.add(a, g.iter().zip(b.data()).map(|(&gv, &bv)| gv / bv).collect());
            sink.add(
                b,
                g.iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect(),
            );
        }
        Op::AddScalar => sink.add(&ins[0], g.to_vec()),
        Op::MulScalar(c) => sink.add(&ins[0], g.iter().map(|&v| v * c).collect()),
        Op::Abs => {
            let x = ins[0].data();
            sink.add(
                &ins[0],
                g.iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else if xv < 0.0 { -gv } else { 0.0 })
                    .collect(),
            );
        }
        Op::Square => {
            let x = ins[0].data();
            sink.add(&ins[0], g.iter().zip(x).map(|(&gv, &xv)| 2.0 * xv * gv).collect());
        }
        Op::Sqrt => {
            let y = out.data();
            sink.add(
                &ins[0],
                g.iter().zip(y).map(|(&gv, &yv)| if yv > 0.0 { gv / (2.0 * yv) } else { 0.0 }).collect(),
            );
        }
        Op::Exp => {
            let y = out.data();
            sink.add(&ins[0], g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect());
        }
        Op::Log => {
            let x = ins[0].data();
            sink.add(&ins[0], g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect());
        }
        Op::Tanh => {
            let y = out.data();
            sink.add(&ins[0], g.iter().zip(y).map(|(&gv, &yv)| gv * (1.0 - yv * yv)).collect());
        }
        Op::Relu => {
            let x = ins[0].data();
            sink.add(&ins[0], g.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect());
        }
        Op::LeakyRelu(slope) => {
            let x = ins[0].data();
            sink.add(
                &ins[0],
                g.iter().zip(x).map(|(&gv, &xv)| if xv >= 0.0 { gv } else { slope * gv }).collect(),
            );
        }
        Op::Clip { lo, hi } => {
            let x = ins[0].data();
            sink.add(
                &ins[0],
                g.iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { 0.0 })
                    .collect(),
            );
        }
        Op::RoundSte => sink.add(&ins[0], g.to_vec()),
        Op::FakeQuant { bounds, per_channel } => {
            let x = ins[0].data();
            let grad = if *per_channel {
                let rows = bounds.len();
                let row_len = x.len() / rows;
                g.iter()
                    .zip(x)
                    .enumerate()
                    .map(|(i, (&gv, &xv))| {
                        let (l, u) = bounds[i / row_len];
                        if xv >= l && xv <= u {
                            gv
                        } else {
                            0.0
                        }
                    })
                    .collect()
            } else {
                let (l, u) = bounds[0];
                g.iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv >= l && xv <= u { gv } else { 0.0 })
                    .collect()
            };
            sink.add(&ins[0], grad);
        }
        Op::Reshape => sink.add(&ins[0], g.to_vec()),
        Op::ConcatChannels { channels } => {
            let [n, _, h, w] = out.shape() else { unreachable!() };
            let plane = h * w;
            let c_total: usize = channels.iter().sum();
            let mut offset = 0;
            for (p, &pc) in ins.iter().zip(channels) {
                let mut gi = vec![0.0f32; n * pc * plane];
                for i in 0..*n {
                    let src = &g[(i * c_total + offset) * plane..(i * c_total + offset + pc) * plane];
                    gi[i * pc * plane..(i + 1) * pc * plane].copy_from_slice(src);
                }
                sink.add(p, gi);
                offset += pc;
            }
        }
        Op::SliceChannels { from, count } => {
            let x = &ins[0];
            let [n, c, h, w] = x.shape() else { unreachable!() };
            let plane = h * w;
            sink.add_with(x, |buf| {
                for i in 0..*n {
                    for ch in 0..*count {
                        let src = &g[(i * count + ch) * plane..(i * count + ch + 1) * plane];
                        let dst = &mut buf[(i * c + from + ch) * plane..(i * c + from + ch + 1) * plane];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            });
        }
        Op::Sum => sink.add(&ins[0], vec![g[0]; ins[0].numel()]),
        Op::Mean => {
            let n = ins[0].numel() as f32;
            sink.add(&ins[0], vec![g[0] / n; ins[0].numel()]);
        }
        Op::SumRows => {
            let (_, cols) = dims2(&ins[0], "sum_rows")?;
            let mut gi = Vec::with_capacity(ins[0].numel());
            for &gr in g {
                gi.extend(std::iter::repeat(gr).take(cols));
            }
            sink.add(&ins[0], gi);
        }
        Op::MeanRows => {
            let (_, cols) = dims2(&ins[0], "mean_rows")?;
            let mut gi = Vec::with_capacity(ins[0].numel());
            for &gr in g {
                gi.extend(std::iter::repeat(gr / cols as f32).take(cols));
            }
            sink.add(&ins[0], gi);
        }
        Op::RowMax { argmax } => {
            let (_, cols) = dims2(&ins[0], "row_max")?;
            sink.add_with(&ins[0], |buf| {
                for (n, (&gr, &am)) in g.iter().zip(argmax).enumerate() {
                    buf[n * cols + am as usize] += gr;
                }
            });
        }
        Op::SumChannels => {
            let x = &ins[0];
            let [n, c, h, w] = x.shape() else { unreachable!() };
            let plane = h * w;
            let mut gi = Vec::with_capacity(x.numel());
            for i in 0..*n {
                for _ in 0..*c {
                    gi.extend_from_slice(&g[i * plane..(i + 1) * plane]);
                }
            }
            sink.add(x, gi);
        }
        Op::MeanPerChannel => {
            let x = &ins[0];
            let [n, c, h, w] = x.shape() else { unreachable!() };
            let plane = h * w;
            let m = (n * plane) as f32;
            let mut gi = Vec::with_capacity(x.numel());
            for _ in 0..*n {
                for ch in 0..*c {
                    gi.extend(std::iter::repeat(g[ch] / m).take(plane));
                }
            }
            sink.add(x, gi);
        }
        Op::VarPerChannel => {
            let x = &ins[0];
            let [n, c, h, w] = x.shape() else { unreachable!() };
            let (n, c, plane) = (*n, *c, h * w);
            let m = (n * plane) as f64;
            // recompute per-channel means
            let mut means = vec![0.0f64; c];
            for (ch, mu) in means.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for i in 0..n {
                    for &v in &x.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                        acc += v as f64;
                    }
                }
                *mu = acc / m;
            }
            let mut gi = vec![0.0f32; x.numel()];
            for i in 0..n {
                for ch in 0..c {
                    let mu = means[ch] as f32;
                    let scale = 2.0 * g[ch] / m as f32;
                    let src = &x.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                    let dst = &mut gi[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                    for (d, &xv) in dst.iter_mut().zip(src) {
                        *d = scale * (xv - mu);
                    }
                }
            }
            sink.add(x, gi);
        }
        Op::AddChannel | Op::SubChannel | Op::MulChannel | Op::DivChannel => {
            let (x, v) = (&ins[0], &ins[1]);
            let [n, c, h, w] = x.shape() else { unreachable!() };
            let (n, c, plane) = (*n, *c, h * w);
            // gradient w.r.t. x
            match &node.op {
                Op::AddChannel | Op::SubChannel => sink.add(x, g.to_vec()),
                Op::MulChannel => {
                    let mut gx = Vec::with_capacity(x.numel());
                    for i in 0..n {
                        for ch in 0..c {
                            let vv = v.data()[ch];
                            gx.extend(g[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().map(|&gv| gv * vv));
                        }
                    }
                    sink.add(x, gx);
                }
                Op::DivChannel => {
                    let mut gx = Vec::with_capacity(x.numel());
                    for i in 0..n {
                        for ch in 0..c {
                            let vv = v.data()[ch];
                            gx.extend(g[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().map(|&gv| gv / vv));
                        }
                    }
                    sink.add(x, gx);
                }
                _ => unreachable!(),
            }
            // gradient w.r.t. the channel vector, f64 accumulation per channel
            if v.requires_grad() {
                let mut gv = vec![0.0f32; c];
                for (ch, out_g) in gv.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for i in 0..n {
                        let base = (i * c + ch) * plane;
                        for s in 0..plane {
                            let gval = g[base + s] as f64;
                            acc += match &node.op {
                                Op::AddChannel => gval,
                                Op::SubChannel => -gval,
                                Op::MulChannel => gval * x.data()[base + s] as f64,
                                Op::DivChannel => {
                                    let vv = v.data()[ch] as f64;
                                    -gval * x.data()[base + s] as f64 / (vv * vv)
                                }
                                _ => unreachable!(),
                            };
                        }
                    }
                    *out_g = acc as f32;
                }
                sink.add(v, gv);
            }
        }
        Op::MulNc | Op::AddNc => {
            let (x, s) = (&ins[0], &ins[1]);
            let [n, c, h, w] = x.shape() else { unreachable!() };
            let (n, c, plane) = (*n, *c, h * w);
            match &node.op {
                Op::MulNc => {
                    let mut gx = Vec::with_capacity(x.numel());
                    for i in 0..n {
                        for ch in 0..c {
                            let vv = s.data()[i * c + ch];
                            gx.extend(g[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().map(|&gv| gv * vv));
                        }
                    }
                    sink.add(x, gx);
                }
                Op::AddNc => sink.add(x, g.to_vec()),
                _ => unreachable!(),
            }
            if s.requires_grad() {
                let mut gs = vec![0.0f32; n * c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        let mut acc = 0.0f64;
                        for off in 0..plane {
                            acc += match &node.op {
                                Op::MulNc => g[base + off] as f64 * x.data()[base + off] as f64,
                                Op::AddNc => g[base + off] as f64,
                                _ => unreachable!(),
                            };
                        }
                        gs[i * c + ch] = acc as f32;
                    }
                }
                sink.add(s, gs);
            }
        }
        Op::SubRows | Op::DivRows => {
            let (x, v) = (&ins[0], &ins[1]);
            let (rows, cols) = dims2(x, "sub_rows")?;
            match &node.op {
                Op::SubRows => sink.add(x, g.to_vec()),
                Op::DivRows => {
                    let mut gx = Vec::with_capacity(x.numel());
                    for i in 0..rows {
                        let vv = v.data()[i];
                        gx.extend(g[i * cols..(i + 1) * cols].iter().map(|&gv| gv / vv));
                    }
                    sink.add(x, gx);
                }
                _ => unreachable!(),
            }
            if v.requires_grad() {
                let mut gv = vec![0.0f32; rows];
                for (i, out_g) in gv.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for j in 0..cols {
                        let gval = g[i * cols + j] as f64;
                        acc += match &node.op {
                            Op::SubRows => -gval,
                            Op::DivRows => {
                                let vv = v.data()[i] as f64;
                                -gval * x.data()[i * cols + j] as f64 / (vv * vv)
                            }
                            _ => unreachable!(),
                        };
                    }
                    *out_g = acc as f32;
                }
                sink.add(v, gv);
            }
        }
        Op::AddBias => {
            let (x, b) = (&ins[0], &ins[1]);
            let (rows, cols) = dims2(x, "add_bias")?;
            sink.add(x, g.to_vec());
            if b.requires_grad() {
                let mut gb = vec![0.0f32; cols];
                for (j, out_g) in gb.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for i in 0..rows {
                        acc += g[i * cols + j] as f64;
                    }
                    *out_g = acc as f32;
                }
                sink.add(b, gb);
            }
        }
        Op::Gather { idx } => {
            sink.add_with(&ins[0], |buf| {
                for (&i, &gv) in idx.iter().zip(g) {
                    buf[i] += gv;
                }
            });
        }
        Op::Embed { idx } => {
            let dim = ins[0].shape()[1];
            sink.add_with(&ins[0], |buf| {
                for (n, &row) in idx.iter().enumerate() {
                    let src = &g[n * dim..(n + 1) * dim];
                    let dst = &mut buf[row * dim..(row + 1) * dim];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            });
        }
        Op::StackScalars => {
            for (p, &gv) in ins.iter().zip(g) {
                sink.add(p, vec![gv]);
            }
        }
        Op::Softmax => {
            let y = out.data();
            let (rows, cols) = dims2(&ins[0], "softmax")?;
            let mut gi = vec![0.0f32; rows * cols];
            for i in 0..rows {
                let yr = &y[i * cols..(i + 1) * cols];
                let gr = &g[i * cols..(i + 1) * cols];
                let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv as f64 * gv as f64).sum();
                for j in 0..cols {
                    gi[i * cols + j] = yr[j] * (gr[j] - dot as f32);
                }
            }
            sink.add(&ins[0], gi);
        }
        Op::MatMul => {
            let (a, b) = (&ins[0], &ins[1]);
            let (m, k) = dims2(a, "matmul")?;
            let n = b.shape()[1];
            if a.requires_grad() {
                sink.add_with(a, |buf| {
                    super::gemm::gemm(m, n, k, 1.0, g, n, false, b.data(), n, true, 1.0, buf, k);
                });
            }
            if b.requires_grad() {
                sink.add_with(b, |buf| {
                    super::gemm::gemm(k, m, n, 1.0, a.data(), k, true, g, n, false, 1.0, buf, n);
                });
            }
        }
        Op::MatMulNt => {
            let (a, b) = (&ins[0], &ins[1]);
            let (m, k) = dims2(a, "matmul_nt")?;
            let n = b.shape()[0];
            if a.requires_grad() {
                sink.add_with(a, |buf| {
                    super::gemm::gemm(m, n, k, 1.0, g, n, false, b.data(), k, false, 1.0, buf, k);
                });
            }
            if b.requires_grad() {
                sink.add_with(b, |buf| {
                    super::gemm::gemm(n, m, k, 1.0, g, n, true, a.data(), k, false, 1.0, buf, k);
                });
            }
        }
        Op::Conv2d { stride, pad } => {
            super::spatial::conv2d_backward(out, ins, g, *stride, *pad, sink)?;
        }
        Op::MaxPool2d { argmax, .. } | Op::AdaptiveMaxPool { argmax, .. } => {
            sink.add_with(&ins[0], |buf| {
                for (&am, &gv) in argmax.iter().zip(g) {
                    buf[am as usize] += gv;
                }
            });
        }
        Op::AdaptiveAvgPool { oh, ow } => {
            super::spatial::adaptive_avg_pool_backward(&ins[0], g, *oh, *ow, sink)?;
        }
        Op::UpsampleNearest { factor } => {
            super::spatial::upsample_backward(&ins[0], g, *factor, sink)?;
        }
    }
    Ok(())
}
