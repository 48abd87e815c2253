//! Differentiable operations. None of them broadcast: operand shapes must
//! match exactly, and the two expansions the model needs (row bias and
//! per-channel gating) are separate explicit ops.

use super::kernels::{self, Conv2dGeom, Conv3dGeom, PoolGeom, UpsampleGeom};
use super::tape::Op;
use super::value::{numel, Tensor};
use super::Var;
use crate::error::{config_err, data_err, shape_err, Error, Result};

fn elementwise<'t>(
    a: &Var<'t>,
    b: &Var<'t>,
    name: &str,
    f: impl Fn(f64, f64) -> f64,
    op: Op,
) -> Result<Var<'t>> {
    a.same_tape(b)?;
    let nodes = a.tape().nodes();
    let (av, bv) = (&nodes[a.id()].value, &nodes[b.id()].value);
    if av.shape() != bv.shape() {
        return Err(shape_err!(
            "{name}: operand shapes {:?} and {:?} differ",
            av.shape(),
            bv.shape()
        ));
    }
    let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
    let out = Tensor::from_parts(av.shape().to_vec(), data);
    drop(nodes);
    a.tape().push(out, op)
}

fn unary<'t>(x: &Var<'t>, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
    let out = x.with_value(|t| {
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
    });
    x.tape().push(out, op)
}

fn expect_rank(t: &Tensor, rank: usize, op: &str) -> Result<()> {
    if t.ndim() != rank {
        return Err(shape_err!(
            "{op}: expected a rank-{rank} tensor, got shape {:?}",
            t.shape()
        ));
    }
    Ok(())
}

fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        elementwise(self, other, "add", |a, b| a + b, Op::Add(self.id(), other.id()))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        elementwise(self, other, "sub", |a, b| a - b, Op::Sub(self.id(), other.id()))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        elementwise(self, other, "mul", |a, b| a * b, Op::Mul(self.id(), other.id()))
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        unary(self, |v| v * s, Op::Scale(self.id(), s))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        unary(self, |v| v * v, Op::Square(self.id()))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        unary(self, |v| v.max(0.0), Op::Relu(self.id()))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        unary(self, stable_sigmoid, Op::Sigmoid(self.id()))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.with_value(|t| t.data().iter().sum::<f64>());
        self.tape().push(Tensor::scalar(s), Op::Sum(self.id()))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let s = self.with_value(|t| t.data().iter().sum::<f64>() / t.numel() as f64);
        self.tape().push(Tensor::scalar(s), Op::Mean(self.id()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        self.tape().push(out, Op::Reshape(self.id()))
    }

    /// `[M,K] · [K,N]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let nodes = self.tape().nodes();
        let (a, b) = (&nodes[self.id()].value, &nodes[other.id()].value);
        expect_rank(a, 2, "matmul")?;
        expect_rank(b, 2, "matmul")?;
        let (m, k, k2, n) = (a.shape()[0], a.shape()[1], b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(shape_err!(
                "matmul: inner dimensions of {:?} and {:?} differ",
                a.shape(),
                b.shape()
            ));
        }
        let out = Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n));
        drop(nodes);
        self.tape().push(out, Op::Matmul(self.id(), other.id()))
    }

    /// Batched matrix product `[B,M,K] · [B,K,N]`.
    pub fn bmm(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let nodes = self.tape().nodes();
        let (a, b) = (&nodes[self.id()].value, &nodes[other.id()].value);
        expect_rank(a, 3, "bmm")?;
        expect_rank(b, 3, "bmm")?;
        let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        if b.shape()[0] != batch || b.shape()[1] != k {
            return Err(shape_err!(
                "bmm: shapes {:?} and {:?} are incompatible",
                a.shape(),
                b.shape()
            ));
        }
        let n = b.shape()[2];
        let mut data = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            data.extend(kernels::matmul(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let out = Tensor::from_parts(vec![batch, m, n], data);
        drop(nodes);
        self.tape().push(out, Op::Bmm(self.id(), other.id()))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(&self) -> Result<Var<'t>> {
        let out = self.with_value(|t| {
            if t.ndim() < 2 {
                return Err(shape_err!("transpose needs rank >= 2, got {:?}", t.shape()));
            }
            let r = t.ndim();
            let (rows, cols) = (t.shape()[r - 2], t.shape()[r - 1]);
            let mut shape = t.shape().to_vec();
            shape.swap(r - 2, r - 1);
            let data = kernels::transpose_last2(t.data(), t.numel() / (rows * cols), rows, cols);
            Ok(Tensor::from_parts(shape, data))
        })?;
        self.tape().push(out, Op::TransposeLast2(self.id()))
    }

    /// Replicates the whole tensor `batch` times along a new leading axis.
    pub fn expand_batch(&self, batch: usize) -> Result<Var<'t>> {
        if batch == 0 {
            return Err(shape_err!("expand_batch: batch must be positive"));
        }
        let out = self.with_value(|t| {
            let mut shape = vec![batch];
            shape.extend_from_slice(t.shape());
            Tensor::from_parts(shape, t.data().repeat(batch))
        });
        self.tape().push(out, Op::ExpandBatch(self.id()))
    }

    /// `x[..., C] + b[C]`, the bias of a linear layer.
    pub fn add_row_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias)?;
        let nodes = self.tape().nodes();
        let (x, b) = (&nodes[self.id()].value, &nodes[bias.id()].value);
        let c = *x.shape().last().unwrap_or(&1);
        if b.ndim() != 1 || b.shape()[0] != c || x.ndim() == 0 {
            return Err(shape_err!(
                "add_row_bias: bias {:?} does not match trailing extent of {:?}",
                b.shape(),
                x.shape()
            ));
        }
        let data = x
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(b.data()).map(|(v, bb)| v + bb))
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        drop(nodes);
        self.tape().push(out, Op::AddRowBias(self.id(), bias.id()))
    }

    /// `x[B,C,H,W] ⊙ gate[B,C]`, the gate expanded over spatial positions.
    pub fn scale_channels(&self, gate: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(gate)?;
        let nodes = self.tape().nodes();
        let (x, g) = (&nodes[self.id()].value, &nodes[gate.id()].value);
        expect_rank(x, 4, "scale_channels")?;
        if g.shape() != &x.shape()[..2] {
            return Err(shape_err!(
                "scale_channels: gate {:?} does not match {:?}",
                g.shape(),
                x.shape()
            ));
        }
        let plane = x.shape()[2] * x.shape()[3];
        let data = x
            .data()
            .chunks_exact(plane)
            .zip(g.data())
            .flat_map(|(p, s)| p.iter().map(move |v| v * s))
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        drop(nodes);
        self.tape().push(out, Op::ScaleChannels(self.id(), gate.id()))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let out = self.with_value(|t| {
            expect_rank(t, 2, "softmax_rows")?;
            if let Some(v) = t.data().iter().find(|v| v.is_nan()) {
                return Err(Error::Numeric(format!("softmax_rows: input contains {v}")));
            }
            let n = t.shape()[1];
            let mut data = Vec::with_capacity(t.numel());
            for row in t.data().chunks_exact(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let start = data.len();
                data.extend(row.iter().map(|v| (v - max).exp()));
                let z: f64 = data[start..].iter().sum();
                data[start..].iter_mut().for_each(|v| *v /= z);
            }
            Ok(Tensor::from_parts(t.shape().to_vec(), data))
        })?;
        self.tape().push(out, Op::SoftmaxRows(self.id()))
    }

    /// `sqrt(Σ x²)` over all elements. The gradient at the zero tensor is zero.
    pub fn frobenius_norm(&self) -> Result<Var<'t>> {
        let s = self.with_value(|t| t.data().iter().map(|v| v * v).sum::<f64>().sqrt());
        self.tape().push(Tensor::scalar(s), Op::Frobenius(self.id()))
    }

    /// Euclidean norm of every row of a `[B,N]` tensor.
    pub fn row_norms(&self) -> Result<Var<'t>> {
        let out = self.with_value(|t| {
            expect_rank(t, 2, "row_norms")?;
            let n = t.shape()[1];
            let data = t
                .data()
                .chunks_exact(n)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            Ok(Tensor::from_parts(vec![t.shape()[0]], data))
        })?;
        self.tape().push(out, Op::RowNorms(self.id()))
    }

    /// Mean over the batch of `logsumexp(logits) - logits[label]`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let loss = self.with_value(|t| {
            expect_rank(t, 2, "cross_entropy")?;
            let (b, k) = (t.shape()[0], t.shape()[1]);
            if labels.len() != b {
                return Err(shape_err!(
                    "cross_entropy: {} labels for a batch of {b}",
                    labels.len()
                ));
            }
            if let Some(l) = labels.iter().find(|&&l| l >= k) {
                return Err(data_err!("cross_entropy: label {l} outside 0..{k}"));
            }
            let total: f64 = t
                .data()
                .chunks_exact(k)
                .zip(labels)
                .map(|(row, &l)| logsumexp(row) - row[l])
                .sum();
            Ok(total / b as f64)
        })?;
        self.tape()
            .push(Tensor::scalar(loss), Op::CrossEntropy(self.id(), labels.to_vec()))
    }

    /// `[B,C,H,W] → [B,C]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let out = self.with_value(|t| {
            expect_rank(t, 4, "global_avg_pool")?;
            let plane = t.shape()[2] * t.shape()[3];
            let data = t
                .data()
                .chunks_exact(plane)
                .map(|p| p.iter().sum::<f64>() / plane as f64)
                .collect();
            Ok(Tensor::from_parts(t.shape()[..2].to_vec(), data))
        })?;
        self.tape().push(out, Op::GlobalAvgPool(self.id()))
    }

    /// 2-D cross-correlation with zero padding. `w` is `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&self, w: &Var<'t>, b: Option<&Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.conv2d_grouped(w, b, stride, pad, 1)
    }

    /// One `[kh, kw]` filter per channel; `w` is `[C, 1, kh, kw]`.
    pub fn depthwise_conv2d(&self, w: &Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let c = self.with_value(|t| t.shape().get(1).copied().unwrap_or(0));
        let wshape = w.shape();
        if wshape.len() != 4 || wshape[0] != c || wshape[1] != 1 {
            return Err(shape_err!(
                "depthwise_conv2d: weight {wshape:?} is not [{c}, 1, kh, kw]"
            ));
        }
        self.conv2d_grouped(w, None, stride, pad, c)
    }

    fn conv2d_grouped(
        &self,
        w: &Var<'t>,
        b: Option<&Var<'t>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(w)?;
        if let Some(b) = b {
            self.same_tape(b)?;
        }
        if stride == 0 {
            return Err(config_err!("conv2d: stride must be >= 1"));
        }
        let nodes = self.tape().nodes();
        let (x, wt) = (&nodes[self.id()].value, &nodes[w.id()].value);
        expect_rank(x, 4, "conv2d input")?;
        expect_rank(wt, 4, "conv2d weight")?;
        let (batch, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, cin_g, kh, kw) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
        if c_in % groups != 0 || c_out % groups != 0 || cin_g * groups != c_in {
            return Err(shape_err!(
                "conv2d: weight {:?} incompatible with input {:?} ({groups} groups)",
                wt.shape(),
                x.shape()
            ));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(shape_err!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            ));
        }
        let bias = match b {
            Some(b) => {
                let bv = &nodes[b.id()].value;
                if bv.shape() != [c_out] {
                    return Err(shape_err!("conv2d: bias {:?} for {c_out} outputs", bv.shape()));
                }
                Some(bv.data())
            }
            None => None,
        };
        let geom = Conv2dGeom {
            batch,
            c_in,
            c_out,
            groups,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: kernels::conv_out_len(h, kh, stride, pad),
            ow: kernels::conv_out_len(wd, kw, stride, pad),
        };
        let data = kernels::conv2d_forward(x.data(), wt.data(), bias, &geom);
        let out = Tensor::from_parts(vec![batch, c_out, geom.oh, geom.ow], data);
        drop(nodes);
        self.tape().push(
            out,
            Op::Conv2d {
                x: self.id(),
                w: w.id(),
                b: b.map(|b| b.id()),
                geom,
            },
        )
    }

    /// 3-D cross-correlation; `x` is `[B,Cin,D,H,W]`, `w` is `[Cout,Cin,kd,kh,kw]`.
    pub fn conv3d(&self, w: &Var<'t>, b: Option<&Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(w)?;
        if stride == 0 {
            return Err(config_err!("conv3d: stride must be >= 1"));
        }
        let nodes = self.tape().nodes();
        let (x, wt) = (&nodes[self.id()].value, &nodes[w.id()].value);
        expect_rank(x, 5, "conv3d input")?;
        expect_rank(wt, 5, "conv3d weight")?;
        let s = x.shape();
        let ws = wt.shape();
        if ws[1] != s[1] {
            return Err(shape_err!(
                "conv3d: weight {ws:?} expects {} input channels, input is {s:?}",
                ws[1]
            ));
        }
        if ws[2] > s[2] + 2 * pad || ws[3] > s[3] + 2 * pad || ws[4] > s[4] + 2 * pad {
            return Err(shape_err!("conv3d: kernel {ws:?} larger than padded input {s:?}"));
        }
        let bias = match b {
            Some(b) => {
                self.same_tape(b)?;
                let bv = &nodes[b.id()].value;
                if bv.shape() != [ws[0]] {
                    return Err(shape_err!("conv3d: bias {:?} for {} outputs", bv.shape(), ws[0]));
                }
                Some(bv.data())
            }
            None => None,
        };
        let geom = Conv3dGeom {
            batch: s[0],
            c_in: s[1],
            c_out: ws[0],
            d: s[2],
            h: s[3],
            w: s[4],
            kd: ws[2],
            kh: ws[3],
            kw: ws[4],
            stride,
            pad,
            od: kernels::conv_out_len(s[2], ws[2], stride, pad),
            oh: kernels::conv_out_len(s[3], ws[3], stride, pad),
            ow: kernels::conv_out_len(s[4], ws[4], stride, pad),
        };
        let data = kernels::conv3d_forward(x.data(), wt.data(), bias, &geom);
        let out = Tensor::from_parts(vec![geom.batch, geom.c_out, geom.od, geom.oh, geom.ow], data);
        drop(nodes);
        self.tape().push(
            out,
            Op::Conv3d {
                x: self.id(),
                w: w.id(),
                b: b.map(|b| b.id()),
                geom,
            },
        )
    }

    /// Ceil-mode average pooling over `[B,C,H,W]` without padding.
    pub fn avg_pool2d(&self, kernel: usize, stride: usize) -> Result<Var<'t>> {
        if kernel == 0 || stride == 0 {
            return Err(config_err!(
                "avg_pool2d: kernel ({kernel}) and stride ({stride}) must be >= 1"
            ));
        }
        let (out, geom) = self.with_value(|t| {
            expect_rank(t, 4, "avg_pool2d")?;
            let s = t.shape();
            let geom = PoolGeom {
                planes: s[0] * s[1],
                h: s[2],
                w: s[3],
                kernel,
                stride,
                oh: kernels::pool_out_len(s[2], kernel, stride),
                ow: kernels::pool_out_len(s[3], kernel, stride),
            };
            let data = kernels::avg_pool2d_forward(t.data(), &geom);
            Ok((Tensor::from_parts(vec![s[0], s[1], geom.oh, geom.ow], data), geom))
        })?;
        self.tape().push(out, Op::AvgPool2d(self.id(), geom))
    }

    /// Bilinear enlargement of `[B,C,h,w]` to `[B,C,out_h,out_w]`.
    pub fn bilinear_upsample(&self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let (out, geom) = self.with_value(|t| {
            expect_rank(t, 4, "bilinear_upsample")?;
            let s = t.shape();
            if out_h < s[2] || out_w < s[3] {
                return Err(shape_err!(
                    "bilinear_upsample: target {out_h}x{out_w} smaller than source {}x{}",
                    s[2],
                    s[3]
                ));
            }
            let geom = UpsampleGeom {
                planes: s[0] * s[1],
                h: s[2],
                w: s[3],
                oh: out_h,
                ow: out_w,
            };
            let data = kernels::upsample_forward(t.data(), &geom);
            Ok((Tensor::from_parts(vec![s[0], s[1], out_h, out_w], data), geom))
        })?;
        self.tape().push(out, Op::Upsample(self.id(), geom))
    }
}

/// Joins tensors along `axis`; every other extent must agree.
pub fn concat<'t>(xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Usage("concat of an empty list".into()))?;
    for x in &xs[1..] {
        first.same_tape(x)?;
    }
    let nodes = first.tape().nodes();
    let vals: Vec<&Tensor> = xs.iter().map(|x| &nodes[x.id()].value).collect();
    let rank = vals[0].ndim();
    if axis >= rank {
        return Err(shape_err!("concat: axis {axis} out of range for rank {rank}"));
    }
    for v in &vals[1..] {
        let ok = v.ndim() == rank
            && (0..rank).all(|d| d == axis || v.shape()[d] == vals[0].shape()[d]);
        if !ok {
            return Err(shape_err!(
                "concat: {:?} and {:?} disagree off axis {axis}",
                vals[0].shape(),
                v.shape()
            ));
        }
    }
    let outer: usize = numel(&vals[0].shape()[..axis]);
    let inner: usize = numel(&vals[0].shape()[axis + 1..]);
    let mut shape = vals[0].shape().to_vec();
    shape[axis] = vals.iter().map(|v| v.shape()[axis]).sum();
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for v in &vals {
            let len = v.shape()[axis] * inner;
            data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
        }
    }
    let out = Tensor::from_parts(shape, data);
    let ids = xs.iter().map(|x| x.id()).collect();
    drop(nodes);
    first.tape().push(out, Op::Concat(ids, axis))
}

pub(crate) fn split_concat_grad(g: &[f64], shapes: &[&[usize]], axis: usize) -> Vec<Vec<f64>> {
    let outer: usize = numel(&shapes[0][..axis]);
    let inner: usize = numel(&shapes[0][axis + 1..]);
    let mut parts: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(numel(s))).collect();
    let mut pos = 0;
    for _ in 0..outer {
        for (part, s) in parts.iter_mut().zip(shapes) {
            let len = s[axis] * inner;
            part.extend_from_slice(&g[pos..pos + len]);
            pos += len;
        }
    }
    parts
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn cross_entropy_grad(logits: &Tensor, labels: &[usize], upstream: f64) -> Vec<f64> {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let scale = upstream / b as f64;
    let mut g = Vec::with_capacity(b * k);
    for (row, &l) in logits.data().chunks_exact(k).zip(labels) {
        let lse = logsumexp(row);
        g.extend(
            row.iter()
                .enumerate()
                .map(|(j, v)| scale * ((v - lse).exp() - if j == l { 1.0 } else { 0.0 })),
        );
    }
    g
}
