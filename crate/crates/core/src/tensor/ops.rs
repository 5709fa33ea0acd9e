//! Differentiable primitives. Every forward records an [`Op`] whose
//! `backward` routes the output gradient to the parents.

use super::graph::{Node, NodeId, Var};
use super::{check_order, invert_order, permute_raw, strides, Real, Tensor};
use crate::error::{Error, Result};

pub(crate) enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: Real },
    AddScalar { a: NodeId },
    Sigmoid { a: NodeId },
    Relu { a: NodeId },
    Log { a: NodeId },
    ClampMin { a: NodeId, floor: Real },
    Sum { a: NodeId },
    Mean { a: NodeId },
    Permute { a: NodeId, order: Vec<usize> },
    Reshape { a: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    MatMul { a: NodeId, b: NodeId },
    Softmax { a: NodeId },
    LogSoftmax { a: NodeId },
    GlobalAvgPool { a: NodeId },
    ChannelMean { a: NodeId },
    ChannelMax { a: NodeId, argmax: Vec<usize> },
    ChannelNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<Real>, inv_std: Vec<Real> },
    L2Normalize { a: NodeId, norms: Vec<Real> },
    Gather { a: NodeId, index: Vec<usize> },
}

/// Epsilon inside the channel normalisation square root.
pub const NORM_EPS: Real = 1e-5;

fn same_graph(a: &Var<'_>, b: &Var<'_>) {
    assert!(std::ptr::eq(a.graph, b.graph), "vars belong to different graphs");
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`; broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out.iter().product();
    if a == out && b == out {
        for i in 0..numel {
            f(i, i, i);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..numel {
        f(o, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
}

/// Output positions `o` for which `o * stride + k - pad` lands in `0..len`.
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad <= len - 1
    let hi = if len + pad < k + 1 { 0 } else { ((len + pad - k - 1) / stride + 1).min(out_len) };
    (lo.min(hi), hi)
}

fn sigmoid(v: Real) -> Real {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'g> Var<'g> {
    fn record(self, value: Tensor, op: Op, parents: &[Var<'g>]) -> Var<'g> {
        let needs = parents.iter().any(|p| p.needs_grad());
        self.graph.push(value, op, needs)
    }

    fn map(self, op: Op, f: impl Fn(Real) -> Real) -> Var<'g> {
        let out = {
            let nodes = self.graph.nodes();
            let x = &nodes[self.id].value;
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
                .expect("elementwise shape")
        };
        self.record(out, op, &[self])
    }

    fn binary(
        self,
        other: Var<'g>,
        op: Op,
        f: impl Fn(Real, Real) -> Real,
    ) -> Result<Var<'g>> {
        same_graph(&self, &other);
        let out = {
            let nodes = self.graph.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let shape = broadcast_shape(a.shape(), b.shape())?;
            let mut data = vec![0.0; shape.iter().product()];
            let (ad, bd) = (a.data(), b.data());
            for_each_broadcast(&shape, a.shape(), b.shape(), |o, i, j| data[o] = f(ad[i], bd[j]));
            Tensor::new(shape, data)?
        };
        Ok(self.record(out, op, &[self, other]))
    }

    /// Elementwise sum with broadcasting over unit axes of equal rank.
    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Add { a: self.id, b: other.id }, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Sub { a: self.id, b: other.id }, |x, y| x - y)
    }

    /// Elementwise product with broadcasting over unit axes of equal rank.
    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Mul { a: self.id, b: other.id }, |x, y| x * y)
    }

    pub fn scale(self, factor: Real) -> Result<Var<'g>> {
        Ok(self.map(Op::Scale { a: self.id, factor }, |v| v * factor))
    }

    pub fn add_scalar(self, c: Real) -> Result<Var<'g>> {
        Ok(self.map(Op::AddScalar { a: self.id }, |v| v + c))
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        Ok(self.map(Op::Sigmoid { a: self.id }, sigmoid))
    }

    pub fn relu(self) -> Result<Var<'g>> {
        Ok(self.map(Op::Relu { a: self.id }, |v| v.max(0.0)))
    }

    /// Natural log; non-positive inputs are a domain error.
    pub fn log(self) -> Result<Var<'g>> {
        {
            let nodes = self.graph.nodes();
            if let Some(v) = nodes[self.id].value.data().iter().find(|v| !(**v > 0.0)) {
                return Err(Error::Domain(format!("log of non-positive value {v}")));
            }
        }
        Ok(self.map(Op::Log { a: self.id }, |v| v.ln()))
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(self, floor: Real) -> Result<Var<'g>> {
        Ok(self.map(Op::ClampMin { a: self.id, floor }, |v| v.max(floor)))
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let s = self.graph.nodes()[self.id].value.sum();
        Ok(self.record(Tensor::scalar(s), Op::Sum { a: self.id }, &[self]))
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let (s, n) = {
            let nodes = self.graph.nodes();
            let v = &nodes[self.id].value;
            (v.sum(), v.numel())
        };
        Ok(self.record(Tensor::scalar(s / n as Real), Op::Mean { a: self.id }, &[self]))
    }

    /// Axis permutation; `out.shape[i] == in.shape[order[i]]`.
    pub fn permute(self, order: &[usize]) -> Result<Var<'g>> {
        let out = {
            let nodes = self.graph.nodes();
            let x = &nodes[self.id].value;
            check_order(order, x.rank())?;
            permute_raw(x, order)
        };
        Ok(self.record(out, Op::Permute { a: self.id, order: order.to_vec() }, &[self]))
    }

    /// Undoes `permute(order)`.
    pub fn inverse_permute(self, order: &[usize]) -> Result<Var<'g>> {
        {
            let nodes = self.graph.nodes();
            check_order(order, nodes[self.id].value.rank())?;
        }
        self.permute(&invert_order(order))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(self.record(out, Op::Reshape { a: self.id }, &[self]))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let out = {
            let nodes = first.graph.nodes();
            let base = nodes[first.id].value.shape().to_vec();
            if axis >= base.len() {
                return Err(Error::Shape(format!("concat axis {axis} on rank {}", base.len())));
            }
            let mut total = 0;
            for p in parts {
                same_graph(&first, p);
                let s = nodes[p.id].value.shape();
                let compatible = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::Shape(format!("concat of {base:?} with {s:?} on axis {axis}")));
                }
                total += s[axis];
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.record(out, Op::Concat { parts: ids, axis }, parts))
    }

    /// 2-D convolution of `(N, C, H, W)` with weights `(O, C, KH, KW)` and optional bias `(O)`.
    pub fn conv2d(
        self,
        weight: Var<'g>,
        bias: Option<Var<'g>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g>> {
        same_graph(&self, &weight);
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        let out = {
            let nodes = self.graph.nodes();
            let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
                return Err(Error::Shape(format!("conv2d input {xs:?} with kernel {ws:?}")));
            }
            let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (o, kh, kw) = (ws[0], ws[2], ws[3]);
            let (Some(oh), Some(ow)) = (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad))
            else {
                return Err(Error::Shape(format!("kernel {kh}x{kw} larger than padded {h}x{wd}")));
            };
            let bvals = match bias {
                Some(b) => {
                    same_graph(&self, &b);
                    let bv = &nodes[b.id].value;
                    if bv.shape() != [o] {
                        return Err(Error::Shape(format!("conv2d bias {:?} for {o} filters", bv.shape())));
                    }
                    bv.data().to_vec()
                }
                None => vec![0.0; o],
            };
            let (xd, wdat) = (x.data(), w.data());
            let mut data = vec![0.0; n * o * oh * ow];
            let rows: Vec<(usize, usize)> = (0..kh).map(|k| valid_range(oh, h, k, stride, pad)).collect();
            let cols: Vec<(usize, usize)> = (0..kw).map(|k| valid_range(ow, wd, k, stride, pad)).collect();
            for ni in 0..n {
                for oi in 0..o {
                    let out_plane = &mut data[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                    out_plane.fill(bvals[oi]);
                    for ci in 0..c {
                        let in_plane = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                        for ki in 0..kh {
                            let (r0, r1) = rows[ki];
                            for kj in 0..kw {
                                let wv = wdat[((oi * c + ci) * kh + ki) * kw + kj];
                                let (c0, c1) = cols[kj];
                                for r in r0..r1 {
                                    let ir = r * stride + ki - pad;
                                    let orow = &mut out_plane[r * ow..(r + 1) * ow];
                                    let irow = &in_plane[ir * wd..(ir + 1) * wd];
                                    for col in c0..c1 {
                                        orow[col] += wv * irow[col * stride + kj - pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Tensor::new(vec![n, o, oh, ow], data)?
        };
        let op = Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), stride, pad };
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.record(out, op, &parents))
    }

    /// Affine map of `(N, in)` rows by weights `(out, in)` and optional bias `(out)`.
    pub fn linear(self, weight: Var<'g>, bias: Option<Var<'g>>) -> Result<Var<'g>> {
        same_graph(&self, &weight);
        let out = {
            let nodes = self.graph.nodes();
            let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
                return Err(Error::Shape(format!("linear input {xs:?} with weight {ws:?}")));
            }
            let (n, inp, outp) = (xs[0], xs[1], ws[0]);
            let mut data = vec![0.0; n * outp];
            if let Some(b) = bias {
                same_graph(&self, &b);
                let bv = &nodes[b.id].value;
                if bv.shape() != [outp] {
                    return Err(Error::Shape(format!("linear bias {:?} for {outp} outputs", bv.shape())));
                }
                for row in data.chunks_mut(outp) {
                    row.copy_from_slice(bv.data());
                }
            }
            for ni in 0..n {
                let xr = &x.data()[ni * inp..(ni + 1) * inp];
                for oi in 0..outp {
                    let wr = &w.data()[oi * inp..(oi + 1) * inp];
                    data[ni * outp + oi] += xr.iter().zip(wr).map(|(a, b)| a * b).sum::<Real>();
                }
            }
            Tensor::new(vec![n, outp], data)?
        };
        let op = Op::Linear { x: self.id, w: weight.id, b: bias.map(|b| b.id) };
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.record(out, op, &parents))
    }

    /// Matrix product `(M, K) x (K, N)`.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        same_graph(&self, &other);
        let out = {
            let nodes = self.graph.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (as_, bs) = (a.shape(), b.shape());
            if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
                return Err(Error::Shape(format!("matmul {as_:?} x {bs:?}")));
            }
            let (m, k, n) = (as_[0], as_[1], bs[1]);
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a.data()[i * k + p];
                    let brow = &b.data()[p * n..(p + 1) * n];
                    for (o, bv) in data[i * n..(i + 1) * n].iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::new(vec![m, n], data)?
        };
        Ok(self.record(out, Op::MatMul { a: self.id, b: other.id }, &[self, other]))
    }

    fn last_axis(&self) -> Result<(usize, usize)> {
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| Error::Shape("rank-0 tensor".into()))?;
        Ok((shape.iter().product::<usize>() / d, d))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'g>> {
        let (rows, d) = self.last_axis()?;
        let mut v = self.value();
        for r in 0..rows {
            let row = &mut v.data_mut()[r * d..(r + 1) * d];
            let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        Ok(self.record(v, Op::Softmax { a: self.id }, &[self]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'g>> {
        let (rows, d) = self.last_axis()?;
        let mut v = self.value();
        for r in 0..rows {
            let row = &mut v.data_mut()[r * d..(r + 1) * d];
            let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<Real>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(self.record(v, Op::LogSoftmax { a: self.id }, &[self]))
    }

    fn dims4(&self) -> Result<[usize; 4]> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("expected (N, C, H, W), got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Mean over the spatial axes: `(N, C, H, W) -> (N, C)`.
    pub fn global_avg_pool(self) -> Result<Var<'g>> {
        let [n, c, h, w] = self.dims4()?;
        let x = self.value();
        let hw = h * w;
        let data = x.data().chunks(hw).map(|p| p.iter().sum::<Real>() / hw as Real).collect();
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.record(out, Op::GlobalAvgPool { a: self.id }, &[self]))
    }

    /// Mean over channels at every position: `(N, C, H, W) -> (N, 1, H, W)`.
    pub fn channel_mean(self) -> Result<Var<'g>> {
        let [n, c, h, w] = self.dims4()?;
        let x = self.value();
        let hw = h * w;
        let mut data = vec![0.0; n * hw];
        for ni in 0..n {
            for ci in 0..c {
                let plane = &x.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                for (o, v) in data[ni * hw..(ni + 1) * hw].iter_mut().zip(plane) {
                    *o += v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= c as Real);
        let out = Tensor::new(vec![n, 1, h, w], data)?;
        Ok(self.record(out, Op::ChannelMean { a: self.id }, &[self]))
    }

    /// Max over channels at every position: `(N, C, H, W) -> (N, 1, H, W)`.
    /// Ties route the gradient to the lowest channel index.
    pub fn channel_max(self) -> Result<Var<'g>> {
        let [n, c, h, w] = self.dims4()?;
        let x = self.value();
        let hw = h * w;
        let mut data = vec![Real::NEG_INFINITY; n * hw];
        let mut argmax = vec![0usize; n * hw];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for p in 0..hw {
                    let v = x.data()[base + p];
                    if v > data[ni * hw + p] {
                        data[ni * hw + p] = v;
                        argmax[ni * hw + p] = base + p;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, 1, h, w], data)?;
        Ok(self.record(out, Op::ChannelMax { a: self.id, argmax }, &[self]))
    }

    /// Normalises across channels at every spatial position, then applies a
    /// per-channel gain and offset.
    pub fn channel_norm(self, gamma: Var<'g>, beta: Var<'g>) -> Result<Var<'g>> {
        same_graph(&self, &gamma);
        same_graph(&self, &beta);
        let [n, c, h, w] = self.dims4()?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::Shape(format!(
                "channel_norm affine {:?}/{:?} for {c} channels",
                gv.shape(),
                bv.shape()
            )));
        }
        let x = self.value();
        let hw = h * w;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; n * hw];
        let mut data = vec![0.0; x.numel()];
        for ni in 0..n {
            for p in 0..hw {
                let at = |ci: usize| (ni * c + ci) * hw + p;
                let mean = (0..c).map(|ci| x.data()[at(ci)]).sum::<Real>() / c as Real;
                let var = (0..c).map(|ci| (x.data()[at(ci)] - mean).powi(2)).sum::<Real>() / c as Real;
                let is = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[ni * hw + p] = is;
                for ci in 0..c {
                    let xh = (x.data()[at(ci)] - mean) * is;
                    xhat[at(ci)] = xh;
                    data[at(ci)] = gv.data()[ci] * xh + bv.data()[ci];
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], data)?;
        let op = Op::ChannelNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std };
        Ok(self.record(out, op, &[self, gamma, beta]))
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(self) -> Result<Var<'g>> {
        let (rows, d) = self.last_axis()?;
        let mut v = self.value();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut v.data_mut()[r * d..(r + 1) * d];
            let norm = row.iter().map(|x| x * x).sum::<Real>().sqrt();
            if !(norm > 0.0) {
                return Err(Error::Domain(format!("cannot normalise row {r} with norm {norm}")));
            }
            row.iter_mut().for_each(|x| *x /= norm);
            norms.push(norm);
        }
        Ok(self.record(v, Op::L2Normalize { a: self.id, norms }, &[self]))
    }

    /// Picks elements by flat index into a 1-D result.
    pub fn gather(self, index: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        if index.is_empty() {
            return Err(Error::Shape("gather of zero elements".into()));
        }
        let data = index
            .iter()
            .map(|&i| {
                x.data().get(i).copied().ok_or_else(|| {
                    Error::Shape(format!("gather index {i} out of {} elements", x.numel()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out = Tensor::new(vec![index.len()], data)?;
        Ok(self.record(out, Op::Gather { a: self.id, index: index.to_vec() }, &[self]))
    }
}

fn slot<'a>(
    grads: &'a mut [Option<Vec<Real>>],
    nodes: &[Node],
    id: NodeId,
) -> Option<&'a mut Vec<Real>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

impl Op {
    pub(crate) fn backward(
        &self,
        out: &Tensor,
        g: &[Real],
        nodes: &[Node],
        grads: &mut [Option<Vec<Real>>],
    ) {
        let val = |id: NodeId| &nodes[id].value;
        match self {
            Op::Leaf => {}
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(self, Op::Sub { .. }) { -1.0 } else { 1.0 };
                let (ash, bsh) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
                if let Some(ga) = slot(grads, nodes, *a) {
                    for_each_broadcast(out.shape(), &ash, &bsh, |o, i, _| ga[i] += g[o]);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for_each_broadcast(out.shape(), &ash, &bsh, |o, _, j| gb[j] += sign * g[o]);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = slot(grads, nodes, *a) {
                    for_each_broadcast(out.shape(), av.shape(), bv.shape(), |o, i, j| {
                        ga[i] += g[o] * bv.data()[j]
                    });
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for_each_broadcast(out.shape(), av.shape(), bv.shape(), |o, i, j| {
                        gb[j] += g[o] * av.data()[i]
                    });
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += factor * s);
                }
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Sigmoid { a } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *d += s * y * (1.0 - y);
                    }
                }
            }
            Op::Relu { a } => {
                let x = val(*a);
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((d, s), xv) in ga.iter_mut().zip(g).zip(x.data()) {
                        if *xv > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Log { a } => {
                let x = val(*a);
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((d, s), xv) in ga.iter_mut().zip(g).zip(x.data()) {
                        *d += s / xv;
                    }
                }
            }
            Op::ClampMin { a, floor } => {
                let x = val(*a);
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((d, s), xv) in ga.iter_mut().zip(g).zip(x.data()) {
                        if xv > floor {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    let s = g[0] / ga.len() as Real;
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Permute { a, order } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    let gt = Tensor::new(out.shape().to_vec(), g.to_vec()).expect("grad shape");
                    let back = permute_raw(&gt, &invert_order(order));
                    ga.iter_mut().zip(back.data()).for_each(|(d, s)| *d += s);
                }
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out.shape()[..*axis].iter().product();
                let inner: usize = out.shape()[axis + 1..].iter().product();
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = val(p).shape()[*axis] * inner;
                    if let Some(gp) = slot(grads, nodes, p) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            for (d, s) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => conv2d_backward(
                out, g, nodes, grads, *x, *w, *b, *stride, *pad,
            ),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, inp) = (xv.shape()[0], xv.shape()[1]);
                let outp = wv.shape()[0];
                if let Some(gx) = slot(grads, nodes, *x) {
                    for ni in 0..n {
                        for oi in 0..outp {
                            let gv = g[ni * outp + oi];
                            let wr = &wv.data()[oi * inp..(oi + 1) * inp];
                            for (d, wval) in gx[ni * inp..(ni + 1) * inp].iter_mut().zip(wr) {
                                *d += gv * wval;
                            }
                        }
                    }
                }
                if let Some(gw) = slot(grads, nodes, *w) {
                    for ni in 0..n {
                        let xr = &xv.data()[ni * inp..(ni + 1) * inp];
                        for oi in 0..outp {
                            let gv = g[ni * outp + oi];
                            for (d, xval) in gw[oi * inp..(oi + 1) * inp].iter_mut().zip(xr) {
                                *d += gv * xval;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = slot(grads, nodes, *b) {
                        for row in g.chunks(outp) {
                            gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if let Some(ga) = slot(grads, nodes, *a) {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            ga[i * k + p] +=
                                g[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum::<Real>();
                        }
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for i in 0..m {
                        for p in 0..k {
                            let av_ip = av.data()[i * k + p];
                            for (d, s) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *d += av_ip * s;
                            }
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let d = *out.shape().last().unwrap();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((gr, yr), dr) in g.chunks(d).zip(out.data().chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: Real = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let d = *out.shape().last().unwrap();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((gr, yr), dr) in g.chunks(d).zip(out.data().chunks(d)).zip(ga.chunks_mut(d)) {
                        let total: Real = gr.iter().sum();
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += gv - yv.exp() * total;
                        }
                    }
                }
            }
            Op::GlobalAvgPool { a } => {
                let s = val(*a).shape();
                let hw = s[2] * s[3];
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (plane, gv) in ga.chunks_mut(hw).zip(g) {
                        let v = gv / hw as Real;
                        plane.iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::ChannelMean { a } => {
                let s = val(*a).shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ni in 0..n {
                        let gp = &g[ni * hw..(ni + 1) * hw];
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for (d, gv) in ga[base..base + hw].iter_mut().zip(gp) {
                                *d += gv / c as Real;
                            }
                        }
                    }
                }
            }
            Op::ChannelMax { a, argmax } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (&src, gv) in argmax.iter().zip(g) {
                        ga[src] += gv;
                    }
                }
            }
            Op::ChannelNorm { x, gamma, beta, xhat, inv_std } => {
                let s = val(*x).shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gam = val(*gamma).data();
                if let Some(gg) = slot(grads, nodes, *gamma) {
                    for (i, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                        gg[(i / hw) % c] += gv * xh;
                    }
                }
                if let Some(gb) = slot(grads, nodes, *beta) {
                    for (i, gv) in g.iter().enumerate() {
                        gb[(i / hw) % c] += gv;
                    }
                }
                if let Some(gx) = slot(grads, nodes, *x) {
                    let cf = c as Real;
                    for ni in 0..n {
                        for p in 0..hw {
                            let at = |ci: usize| (ni * c + ci) * hw + p;
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for ci in 0..c {
                                let d = g[at(ci)] * gam[ci];
                                sum_d += d;
                                sum_dx += d * xhat[at(ci)];
                            }
                            let is = inv_std[ni * hw + p];
                            for ci in 0..c {
                                let d = g[at(ci)] * gam[ci];
                                gx[at(ci)] += is / cf * (cf * d - sum_d - xhat[at(ci)] * sum_dx);
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { a, norms } => {
                let d = *out.shape().last().unwrap();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (((gr, yr), dr), norm) in
                        g.chunks(d).zip(out.data().chunks(d)).zip(ga.chunks_mut(d)).zip(norms)
                    {
                        let dot: Real = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += (gv - yv * dot) / norm;
                        }
                    }
                }
            }
            Op::Gather { a, index } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (&i, gv) in index.iter().zip(g) {
                        ga[i] += gv;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    out: &Tensor,
    g: &[Real],
    nodes: &[Node],
    grads: &mut [Option<Vec<Real>>],
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
    stride: usize,
    pad: usize,
) {
    let (xv, wv) = (&nodes[x].value, &nodes[w].value);
    let (n, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (o, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
    let (oh, ow) = (out.shape()[2], out.shape()[3]);
    let rows: Vec<(usize, usize)> = (0..kh).map(|k| valid_range(oh, h, k, stride, pad)).collect();
    let cols: Vec<(usize, usize)> = (0..kw).map(|k| valid_range(ow, wd, k, stride, pad)).collect();

    if let Some(b) = b {
        if let Some(gb) = slot(grads, nodes, b) {
            for (i, plane) in g.chunks(oh * ow).enumerate() {
                gb[i % o] += plane.iter().sum::<Real>();
            }
        }
    }
    if let Some(gw) = slot(grads, nodes, w) {
        for ni in 0..n {
            for oi in 0..o {
                let gplane = &g[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                for ci in 0..c {
                    let in_plane = &xv.data()[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                    for ki in 0..kh {
                        let (r0, r1) = rows[ki];
                        for kj in 0..kw {
                            let (c0, c1) = cols[kj];
                            let mut acc = 0.0;
                            for r in r0..r1 {
                                let ir = r * stride + ki - pad;
                                let grow = &gplane[r * ow..(r + 1) * ow];
                                let irow = &in_plane[ir * wd..(ir + 1) * wd];
                                for col in c0..c1 {
                                    acc += grow[col] * irow[col * stride + kj - pad];
                                }
                            }
                            gw[((oi * c + ci) * kh + ki) * kw + kj] += acc;
                        }
                    }
                }
            }
        }
    }
    if let Some(gx) = slot(grads, nodes, x) {
        for ni in 0..n {
            for oi in 0..o {
                let gplane = &g[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                for ci in 0..c {
                    let in_plane = &mut gx[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                    for ki in 0..kh {
                        let (r0, r1) = rows[ki];
                        for kj in 0..kw {
                            let wval = wv.data()[((oi * c + ci) * kh + ki) * kw + kj];
                            let (c0, c1) = cols[kj];
                            for r in r0..r1 {
                                let ir = r * stride + ki - pad;
                                let grow = &gplane[r * ow..(r + 1) * ow];
                                let irow = &mut in_plane[ir * wd..(ir + 1) * wd];
                                for col in c0..c1 {
                                    irow[col * stride + kj - pad] += wval * grow[col];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
