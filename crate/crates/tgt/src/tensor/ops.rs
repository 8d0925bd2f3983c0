//! Forward op constructors and their gradient rules.

use super::{kernels, Tensor};
use crate::error::{Error, Result};

/// Recorded operation node: operand references plus whatever the gradient
/// rule needs (kernel geometry, axes, clamp bounds).
pub enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor, f64),
    /// per-item scaling: x `[B, ...]` times s `[B]`
    MulRows(Tensor, Tensor),
    /// x `[B,C,H,W]` + bias `[C]`
    AddBiasChan(Tensor, Tensor),
    /// x `[..., D]` + bias `[D]`
    AddBiasLast(Tensor, Tensor),
    Matmul(Tensor, Tensor),
    Conv2d { x: Tensor, w: Tensor, stride: usize, pad: usize },
    Silu(Tensor),
    Sigmoid(Tensor),
    Exp(Tensor),
    Ln(Tensor),
    Clamp { x: Tensor, lo: f64, hi: f64 },
    Softmax { x: Tensor, axis: usize },
    LayerNorm { x: Tensor, gamma: Tensor, beta: Tensor, eps: f64 },
    Concat { parts: Vec<Tensor>, axis: usize },
    Crop { x: Tensor, axis: usize, start: usize, len: usize },
    Reshape(Tensor),
    Permute { x: Tensor, axes: Vec<usize> },
    SumAll(Tensor),
    MeanAll(Tensor),
}

impl Op {
    pub fn operands(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulRows(a, b) => vec![a, b],
            Op::AddBiasChan(a, b) | Op::AddBiasLast(a, b) | Op::Matmul(a, b) => vec![a, b],
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::Scale(a, _) | Op::AddScalar(a, _) => vec![a],
            Op::Silu(a) | Op::Sigmoid(a) | Op::Exp(a) | Op::Ln(a) => vec![a],
            Op::Clamp { x, .. } | Op::Softmax { x, .. } => vec![x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::Crop { x, .. } | Op::Reshape(x) | Op::Permute { x, .. } => vec![x],
            Op::SumAll(x) | Op::MeanAll(x) => vec![x],
        }
    }

    /// Propagate `dy` (gradient at `node`) onto each operand via `sink`.
    /// Operands that cannot reach a trainable leaf are skipped.
    pub(super) fn backward(&self, node: &Tensor, dy: &[f64], sink: &mut dyn FnMut(&Tensor, Vec<f64>)) {
        match self {
            Op::Add(a, b) => {
                if a.needs_grad() {
                    sink(a, dy.to_vec());
                }
                if b.needs_grad() {
                    sink(b, dy.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if a.needs_grad() {
                    sink(a, dy.to_vec());
                }
                if b.needs_grad() {
                    sink(b, dy.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if a.needs_grad() {
                    sink(a, dy.iter().zip(b.data()).map(|(d, bv)| d * bv).collect());
                }
                if b.needs_grad() {
                    sink(b, dy.iter().zip(a.data()).map(|(d, av)| d * av).collect());
                }
            }
            Op::Scale(a, c) => {
                if a.needs_grad() {
                    sink(a, dy.iter().map(|v| v * c).collect());
                }
            }
            Op::AddScalar(a, _) => {
                if a.needs_grad() {
                    sink(a, dy.to_vec());
                }
            }
            Op::MulRows(a, s) => {
                let b = s.numel();
                let stride = a.numel() / b;
                if a.needs_grad() {
                    let mut g = vec![0.0; a.numel()];
                    for i in 0..b {
                        let sv = s.data()[i];
                        for j in 0..stride {
                            g[i * stride + j] = dy[i * stride + j] * sv;
                        }
                    }
                    sink(a, g);
                }
                if s.needs_grad() {
                    let mut g = vec![0.0; b];
                    for i in 0..b {
                        let mut acc = 0.0;
                        for j in 0..stride {
                            acc += dy[i * stride + j] * a.data()[i * stride + j];
                        }
                        g[i] = acc;
                    }
                    sink(s, g);
                }
            }
            Op::AddBiasChan(x, bias) => {
                if x.needs_grad() {
                    sink(x, dy.to_vec());
                }
                if bias.needs_grad() {
                    let (bsz, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                    let sp = h * w;
                    let mut g = vec![0.0; c];
                    for bi in 0..bsz {
                        for ci in 0..c {
                            let base = (bi * c + ci) * sp;
                            let mut acc = 0.0;
                            for j in 0..sp {
                                acc += dy[base + j];
                            }
                            g[ci] += acc;
                        }
                    }
                    sink(bias, g);
                }
            }
            Op::AddBiasLast(x, bias) => {
                if x.needs_grad() {
                    sink(x, dy.to_vec());
                }
                if bias.needs_grad() {
                    let d = bias.numel();
                    let rows = x.numel() / d;
                    let mut g = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += dy[r * d + j];
                        }
                    }
                    sink(bias, g);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.needs_grad() {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(dy, b.data(), m, n, k, &mut da);
                    sink(a, da);
                }
                if b.needs_grad() {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(a.data(), dy, m, k, n, &mut db);
                    sink(b, db);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (bsz, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let oh = node.shape()[2];
                let ow = node.shape()[3];
                let (dx, dw) = kernels::conv2d_backward(
                    x.data(),
                    w.data(),
                    dy,
                    bsz,
                    c,
                    h,
                    wd,
                    o,
                    kh,
                    kw,
                    *stride,
                    *pad,
                    oh,
                    ow,
                );
                if x.needs_grad() {
                    sink(x, dx);
                }
                if w.needs_grad() {
                    sink(w, dw);
                }
            }
            Op::Silu(x) => {
                if x.needs_grad() {
                    let g = x
                        .data()
                        .iter()
                        .zip(dy.iter())
                        .map(|(&v, d)| {
                            let s = 1.0 / (1.0 + (-v).exp());
                            d * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    sink(x, g);
                }
            }
            Op::Sigmoid(x) => {
                if x.needs_grad() {
                    let g = node.data().iter().zip(dy.iter()).map(|(&y, d)| d * y * (1.0 - y)).collect();
                    sink(x, g);
                }
            }
            Op::Exp(x) => {
                if x.needs_grad() {
                    let g = node.data().iter().zip(dy.iter()).map(|(&y, d)| d * y).collect();
                    sink(x, g);
                }
            }
            Op::Ln(x) => {
                if x.needs_grad() {
                    let g = x.data().iter().zip(dy.iter()).map(|(&v, d)| d / v).collect();
                    sink(x, g);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if x.needs_grad() {
                    let g = x
                        .data()
                        .iter()
                        .zip(dy.iter())
                        .map(|(&v, d)| if v >= *lo && v <= *hi { *d } else { 0.0 })
                        .collect();
                    sink(x, g);
                }
            }
            Op::Softmax { x, axis } => {
                if x.needs_grad() {
                    let y = node.data();
                    let (outer, lane, inner) = lane_geometry(x.shape(), *axis);
                    let mut g = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lane * inner + i;
                            let mut dot = 0.0;
                            for l in 0..lane {
                                let idx = base + l * inner;
                                dot += dy[idx] * y[idx];
                            }
                            for l in 0..lane {
                                let idx = base + l * inner;
                                g[idx] = y[idx] * (dy[idx] - dot);
                            }
                        }
                    }
                    sink(x, g);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *x.shape().last().unwrap();
                let rows = x.numel() / d;
                let xv = x.data();
                let gv = gamma.data();
                let mut dx = if x.needs_grad() { vec![0.0; x.numel()] } else { Vec::new() };
                let mut dgamma = if gamma.needs_grad() { vec![0.0; d] } else { Vec::new() };
                let mut dbeta = if beta.needs_grad() { vec![0.0; d] } else { Vec::new() };
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let dyr = &dy[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    if !dgamma.is_empty() || !dbeta.is_empty() {
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            if !dgamma.is_empty() {
                                dgamma[j] += dyr[j] * xhat;
                            }
                            if !dbeta.is_empty() {
                                dbeta[j] += dyr[j];
                            }
                        }
                    }
                    if !dx.is_empty() {
                        // dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat .* xhat))
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            let dxhat = dyr[j] * gv[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            let dxhat = dyr[j] * gv[j];
                            dx[r * d + j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
                if !dx.is_empty() {
                    sink(x, dx);
                }
                if !dgamma.is_empty() {
                    sink(gamma, dgamma);
                }
                if !dbeta.is_empty() {
                    sink(beta, dbeta);
                }
            }
            Op::Concat { parts, axis } => {
                let (_, _, inner) = lane_geometry(node.shape(), *axis);
                let total_axis = node.shape()[*axis];
                let outer: usize = node.shape()[..*axis].iter().product();
                let mut offset = 0;
                for part in parts {
                    let alen = part.shape()[*axis];
                    if part.needs_grad() {
                        let mut g = vec![0.0; part.numel()];
                        for o in 0..outer {
                            let src = (o * total_axis + offset) * inner;
                            let dst = o * alen * inner;
                            g[dst..dst + alen * inner].copy_from_slice(&dy[src..src + alen * inner]);
                        }
                        sink(part, g);
                    }
                    offset += alen;
                }
            }
            Op::Crop { x, axis, start, len } => {
                if x.needs_grad() {
                    let (_, _, inner) = lane_geometry(x.shape(), *axis);
                    let total_axis = x.shape()[*axis];
                    let outer: usize = x.shape()[..*axis].iter().product();
                    let mut g = vec![0.0; x.numel()];
                    for o in 0..outer {
                        let dst = (o * total_axis + start) * inner;
                        let src = o * len * inner;
                        g[dst..dst + len * inner].copy_from_slice(&dy[src..src + len * inner]);
                    }
                    sink(x, g);
                }
            }
            Op::Reshape(x) => {
                if x.needs_grad() {
                    sink(x, dy.to_vec());
                }
            }
            Op::Permute { x, axes } => {
                if x.needs_grad() {
                    // gradient of permute is permute by the inverse axes
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    sink(x, permute_data(dy, node.shape(), &inv));
                }
            }
            Op::SumAll(x) => {
                if x.needs_grad() {
                    sink(x, vec![dy[0]; x.numel()]);
                }
            }
            Op::MeanAll(x) => {
                if x.needs_grad() {
                    let g = dy[0] / x.numel() as f64;
                    sink(x, vec![g; x.numel()]);
                }
            }
        }
    }
}

/// (outer, lane, inner) strides for iterating along `axis`.
fn lane_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

fn permute_data(src: &[f64], src_shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = src_shape.len();
    let dst_shape: Vec<usize> = axes.iter().map(|&a| src_shape[a]).collect();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    }
    let mut dst = vec![0.0; src.len()];
    let mut idx = vec![0usize; rank];
    for v in dst.iter_mut() {
        let mut off = 0;
        for (d, &i) in idx.iter().enumerate() {
            off += i * src_strides[axes[d]];
        }
        *v = src[off];
        // odometer over dst_shape
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < dst_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    dst
}

fn same_shape(a: &Tensor, b: &Tensor, opname: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{opname}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Add(self.clone(), other.clone()), "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Sub(self.clone(), other.clone()), "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Mul(self.clone(), other.clone()), "mul")
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Scale(self.clone(), c), "scale")
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::AddScalar(self.clone(), c), "add_scalar")
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    /// Scale each leading-axis item by its own factor: x `[B, ...]` * s `[B]`.
    pub fn mul_rows(&self, s: &Tensor) -> Result<Tensor> {
        if s.shape().len() != 1 || s.shape()[0] != self.shape()[0] {
            return Err(Error::shape(format!(
                "mul_rows: scale shape {:?} does not match leading dim of {:?}",
                s.shape(),
                self.shape()
            )));
        }
        let b = s.numel();
        let stride = self.numel() / b;
        let mut data = vec![0.0; self.numel()];
        for i in 0..b {
            let sv = s.data()[i];
            for j in 0..stride {
                data[i * stride + j] = self.data()[i * stride + j] * sv;
            }
        }
        Tensor::from_op(data, self.shape().to_vec(), Op::MulRows(self.clone(), s.clone()), "mul_rows")
    }

    /// x `[B,C,H,W]` + bias `[C]` broadcast over batch and spatial dims.
    pub fn add_bias_chan(&self, bias: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 4 || bias.shape() != [self.shape()[1]] {
            return Err(Error::shape(format!(
                "add_bias_chan: x {:?} bias {:?}",
                self.shape(),
                bias.shape()
            )));
        }
        let (bsz, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let sp = h * w;
        let mut data = self.data().to_vec();
        for bi in 0..bsz {
            for ci in 0..c {
                let bv = bias.data()[ci];
                for v in data[(bi * c + ci) * sp..(bi * c + ci + 1) * sp].iter_mut() {
                    *v += bv;
                }
            }
        }
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::AddBiasChan(self.clone(), bias.clone()),
            "add_bias_chan",
        )
    }

    /// x `[..., D]` + bias `[D]` broadcast over leading dims.
    pub fn add_bias_last(&self, bias: &Tensor) -> Result<Tensor> {
        let d = *self.shape().last().unwrap();
        if bias.shape() != [d] {
            return Err(Error::shape(format!(
                "add_bias_last: x {:?} bias {:?}",
                self.shape(),
                bias.shape()
            )));
        }
        let rows = self.numel() / d;
        let mut data = self.data().to_vec();
        for r in 0..rows {
            for j in 0..d {
                data[r * d + j] += bias.data()[j];
            }
        }
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::AddBiasLast(self.clone(), bias.clone()),
            "add_bias_last",
        )
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 2 || other.shape().len() != 2 {
            return Err(Error::shape(format!(
                "matmul expects 2-D operands, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(Error::shape(format!("matmul: inner dims {k} vs {k2}")));
        }
        let mut data = vec![0.0; m * n];
        kernels::matmul(self.data(), other.data(), m, k, n, &mut data);
        Tensor::from_op(data, vec![m, n], Op::Matmul(self.clone(), other.clone()), "matmul")
    }

    /// Cross-correlation of x `[B,C,H,W]` with w `[O,C,kh,kw]`, zero padding.
    pub fn conv2d(&self, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        if self.shape().len() != 4 || w.shape().len() != 4 {
            return Err(Error::shape("conv2d expects 4-D x and w"));
        }
        let (bsz, c, h, wd) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (o, cw, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if c != cw {
            return Err(Error::shape(format!("conv2d: channels {c} vs kernel {cw}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!("conv2d: kernel dims must be odd, got {kh}x{kw}")));
        }
        let oh = kernels::conv_out_dim(h, kh, stride, pad)
            .ok_or_else(|| Error::shape(format!("conv2d: non-integral output for H={h} k={kh} s={stride} p={pad}")))?;
        let ow = kernels::conv_out_dim(wd, kw, stride, pad)
            .ok_or_else(|| Error::shape(format!("conv2d: non-integral output for W={wd} k={kw} s={stride} p={pad}")))?;
        let mut data = vec![0.0; bsz * o * oh * ow];
        kernels::conv2d_forward(self.data(), w.data(), bsz, c, h, wd, o, kh, kw, stride, pad, oh, ow, &mut data);
        Tensor::from_op(
            data,
            vec![bsz, o, oh, ow],
            Op::Conv2d { x: self.clone(), w: w.clone(), stride, pad },
            "conv2d",
        )
    }

    pub fn silu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Silu(self.clone()), "silu")
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Sigmoid(self.clone()), "sigmoid")
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| v.exp()).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Exp(self.clone()), "exp")
    }

    pub fn ln(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| v.ln()).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Ln(self.clone()), "ln")
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Clamp { x: self.clone(), lo, hi }, "clamp")
    }

    /// Numerically stable softmax along `axis` (max subtraction per lane).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(Error::shape(format!(
                "softmax: axis {axis} out of range for {:?}",
                self.shape()
            )));
        }
        let (outer, lane, inner) = lane_geometry(self.shape(), axis);
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..lane {
                    mx = mx.max(x[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..lane {
                    let e = (x[base + l * inner] - mx).exp();
                    data[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..lane {
                    data[base + l * inner] /= sum;
                }
            }
        }
        Tensor::from_op(data, self.shape().to_vec(), Op::Softmax { x: self.clone(), axis }, "softmax")
    }

    /// Normalize over the last dimension to zero mean / unit variance, then
    /// apply the per-feature affine `gamma * xhat + beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().unwrap();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{d}]",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = self.numel() / d;
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = gamma.data()[j] * (row[j] - mean) * rstd + beta.data()[j];
            }
        }
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::LayerNorm { x: self.clone(), gamma: gamma.clone(), beta: beta.clone(), eps },
            "layer_norm",
        )
    }

    /// Join tensors along `axis`; all other dims must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat: no operands"));
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(Error::shape(format!("concat: axis {axis} out of range")));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.shape().len() != rank {
                return Err(Error::shape("concat: rank mismatch"));
            }
            for (d, (&a, &b)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::shape(format!(
                        "concat: non-axis dims differ: {:?} vs {:?}",
                        parts[0].shape(),
                        p.shape()
                    )));
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for p in parts {
            let alen = p.shape()[axis];
            for o in 0..outer {
                let src = o * alen * inner;
                let dst = (o * axis_total + offset) * inner;
                data[dst..dst + alen * inner].copy_from_slice(&p.data()[src..src + alen * inner]);
            }
            offset += alen;
        }
        Tensor::from_op(data, shape, Op::Concat { parts: parts.to_vec(), axis }, "concat")
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn crop(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(Error::shape(format!("crop: axis {axis} out of range")));
        }
        if start + len > self.shape()[axis] || len == 0 {
            return Err(Error::shape(format!(
                "crop: range {start}..{} out of bounds for axis of {}",
                start + len,
                self.shape()[axis]
            )));
        }
        let (_, lane, inner) = lane_geometry(self.shape(), axis);
        let outer: usize = self.shape()[..axis].iter().product();
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * lane + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data()[src..src + len * inner]);
        }
        Tensor::from_op(data, shape, Op::Crop { x: self.clone(), axis, start, len }, "crop")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(format!(
                "reshape: {:?} ({} elems) -> {shape:?} ({numel} elems)",
                self.shape(),
                self.numel()
            )));
        }
        Tensor::from_op(self.data().to_vec(), shape.to_vec(), Op::Reshape(self.clone()), "reshape")
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!("permute: bad axes {axes:?} for rank {rank}")));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_data(self.data(), self.shape(), axes);
        Tensor::from_op(data, shape, Op::Permute { x: self.clone(), axes: axes.to_vec() }, "permute")
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        self.permute(&[1, 0])
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![1], Op::SumAll(self.clone()), "sum_all")
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![s / self.numel() as f64], vec![1], Op::MeanAll(self.clone()), "mean_all")
    }

    /// Mean squared error against `target`, reduced over all elements.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        let d = self.sub(target)?;
        d.mul(&d)?.mean_all()
    }
}
