//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] is built per forward call and owned by one logical thread.
//! Node ids are assigned in topological order, so backward is a single
//! reverse sweep that visits each node exactly once. Leaves flagged
//! `requires_grad` receive gradient accumulators; frozen leaves keep an
//! exactly-zero accumulator (nothing is ever added to them).

use super::{strides, Scalar, Tensor};
use crate::error::{shape_err, AmcError, Result};
use ndarray::ArrayView2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub usize);

#[derive(Debug, Clone)]
pub enum Op<T> {
    Leaf,
    MatMul {
        a: VarId,
        b: VarId,
    },
    /// Elementwise add; `b`'s shape must equal `a`'s or be a trailing suffix
    /// of it (bias-style broadcast).
    Add {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Scale {
        a: VarId,
        c: f64,
    },
    Softmax {
        a: VarId,
        axis: usize,
    },
    LogSoftmax {
        a: VarId,
        axis: usize,
    },
    /// Normalization над last axis with per-feature scale/shift.
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        saved_mean: Vec<T>,
        saved_inv_std: Vec<T>,
    },
    Gelu {
        a: VarId,
    },
    LeakyRelu {
        a: VarId,
        slope: f64,
    },
    Sigmoid {
        a: VarId,
    },
    Log {
        a: VarId,
    },
    Pow {
        a: VarId,
        p: f64,
    },
    Reshape {
        a: VarId,
    },
    Permute {
        a: VarId,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<VarId>,
        axis: usize,
    },
    Slice {
        a: VarId,
        axis: usize,
        start: usize,
        len: usize,
    },
    MeanAxis {
        a: VarId,
        axis: usize,
    },
    MeanAll {
        a: VarId,
    },
    SumAll {
        a: VarId,
    },
    Conv3d {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    TrilinearUpsample {
        x: VarId,
        factors: [usize; 3],
    },
    InstanceNorm3 {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        saved_mean: Vec<T>,
        saved_inv_std: Vec<T>,
    },
    /// Fused query attention pool: v = softmax(Hq/sqrt(d))^T H.
    /// Cross-slice reductions accumulate in f64 so slice order does not
    /// perturb the f32 result.
    AttnPool {
        h: VarId,
        q: VarId,
        saved_weights: Vec<T>,
    },
    /// The weight vector of the same pool, as its own differentiable output.
    AttnPoolWeights {
        h: VarId,
        q: VarId,
    },
    /// Mean focal BCE over logits with {0,1} targets (multi-label).
    FocalBce {
        logits: VarId,
        targets: Vec<T>,
        gamma: f64,
        alpha: f64,
    },
    /// Mean focal loss over softmax rows with integer class targets.
    FocalSoftmax {
        logits: VarId,
        targets: Vec<usize>,
        gamma: f64,
        alpha: f64,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mm<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let av = ArrayView2::from_shape((m, k), a).unwrap();
    let bv = ArrayView2::from_shape((k, n), b).unwrap();
    let mut out = ndarray::Array2::<T>::zeros((m, n));
    ndarray::linalg::general_mat_mul(T::one(), &av, &bv, T::zero(), &mut out);
    out.into_raw_vec_and_offset().0
}

/// a[m,k] (optionally transposed) times b (optionally transposed).
fn mm_t<T: Scalar>(
    a: &[T],
    ad: (usize, usize),
    ta: bool,
    b: &[T],
    bd: (usize, usize),
    tb: bool,
) -> Vec<T> {
    let av = ArrayView2::from_shape(ad, a).unwrap();
    let bv = ArrayView2::from_shape(bd, b).unwrap();
    let av = if ta { av.reversed_axes() } else { av };
    let bv = if tb { bv.reversed_axes() } else { bv };
    let mut out = ndarray::Array2::<T>::zeros((av.nrows(), bv.ncols()));
    ndarray::linalg::general_mat_mul(T::one(), &av, &bv, T::zero(), &mut out);
    out.into_raw_vec_and_offset().0
}

fn pool_weights_f64<T: Scalar>(h: &[T], s: usize, d: usize, q: &[T]) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = vec![0.0f64; s];
    for i in 0..s {
        let mut acc = 0.0f64;
        for j in 0..d {
            acc += h[i * d + j].to_f64() * q[j].to_f64();
        }
        scores[i] = acc * scale;
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    let mut exps = vec![0.0f64; s];
    for i in 0..s {
        exps[i] = (scores[i] - max).exp();
        sum += exps[i];
    }
    exps.iter().map(|e| e / sum).collect()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Graph<T> {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> VarId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last backward() target wrt this node.
    /// Zero tensor for nodes the loss never reached.
    pub fn grad(&self, id: VarId) -> Tensor<T> {
        match self.grads.get(id.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(self.nodes[id.0].value.shape().to_vec()),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, op_name: &str) -> Result<VarId> {
        if !value.all_finite() {
            return Err(AmcError::NonFinite {
                op: op_name.to_string(),
            });
        }
        let requires_grad = op_inputs(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(VarId(self.nodes.len() - 1))
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (
            self.value(a).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        let value = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(shape_err("matmul", &sa, &sb));
                }
                Tensor::new(
                    vec![sa[0], sb[1]],
                    mm(self.value(a).data(), sa[0], sa[1], self.value(b).data(), sb[1]),
                )?
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(shape_err("matmul", &sa, &sb));
                }
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let mut out = Vec::with_capacity(bt * m * n);
                for i in 0..bt {
                    out.extend(mm(
                        &self.value(a).data()[i * m * k..(i + 1) * m * k],
                        m,
                        k,
                        &self.value(b).data()[i * k * n..(i + 1) * k * n],
                        n,
                    ));
                }
                Tensor::new(vec![bt, m, n], out)?
            }
            _ => return Err(shape_err("matmul", &sa, &sb)),
        };
        self.push(value, Op::MatMul { a, b }, "matmul")
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(shape_err("add", &sa, &sb));
        }
        let bn = self.value(b).numel().max(1);
        let mut out = self.value(a).data().to_vec();
        let bd = self.value(b).data();
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v + bd[i % bn];
        }
        self.push(Tensor::new(sa, out)?, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let sa = self.value(a).shape().to_vec();
        if sa != self.value(b).shape() {
            return Err(shape_err("mul", &sa, self.value(b).shape()));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(Tensor::new(sa, out)?, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let cv = T::from_f64(c);
        let value = self.value(a).map(|v| v * cv);
        self.push(value, Op::Scale { a, c }, "scale")
    }

    pub fn softmax(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let value = softmax_forward(self.value(a), axis, false)?;
        self.push(value, Op::Softmax { a, axis }, "softmax")
    }

    pub fn log_softmax(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let value = softmax_forward(self.value(a), axis, true)?;
        self.push(value, Op::LogSoftmax { a, axis }, "log-softmax")
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        let d = *xs.last().ok_or_else(|| {
            AmcError::Contract("layer-norm on 0-d tensor".into())
        })?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(shape_err("layer-norm", &xs, self.value(gamma).shape()));
        }
        let rows = self.value(x).numel() / d;
        let eps = 1e-6f64;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![T::zero(); rows * d];
        let mut means = vec![T::zero(); rows];
        let mut inv_stds = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean: f64 = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
            let var: f64 =
                row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means[r] = T::from_f64(mean);
            inv_stds[r] = T::from_f64(inv_std);
            for j in 0..d {
                let xhat = (row[j].to_f64() - mean) * inv_std;
                out[r * d + j] = T::from_f64(xhat) * gd[j] + bd[j];
            }
        }
        self.push(
            Tensor::new(xs, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved_mean: means,
                saved_inv_std: inv_stds,
            },
            "layer-norm",
        )
    }

    pub fn gelu(&mut self, a: VarId) -> Result<VarId> {
        let value = self.value(a).map(|v| T::from_f64(gelu_f(v.to_f64())));
        self.push(value, Op::Gelu { a }, "gelu")
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> Result<VarId> {
        let s = T::from_f64(slope);
        let value = self
            .value(a)
            .map(|v| if v.to_f64() >= 0.0 { v } else { v * s });
        self.push(value, Op::LeakyRelu { a, slope }, "leaky-relu")
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        let value = self.value(a).map(|v| T::from_f64(sigmoid_f(v.to_f64())));
        self.push(value, Op::Sigmoid { a }, "sigmoid")
    }

    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        let value = self.value(a).map(|v| T::from_f64(v.to_f64().ln()));
        self.push(value, Op::Log { a }, "log")
    }

    pub fn pow(&mut self, a: VarId, p: f64) -> Result<VarId> {
        let value = self.value(a).map(|v| T::from_f64(v.to_f64().powf(p)));
        self.push(value, Op::Pow { a, p }, "power")
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let value = self.value(a).reshaped(shape)?;
        self.push(value, Op::Reshape { a }, "reshape")
    }

    pub fn permute(&mut self, a: VarId, axes: Vec<usize>) -> Result<VarId> {
        let value = permute_tensor(self.value(a), &axes)?;
        self.push(value, Op::Permute { a, axes }, "transpose")
    }

    /// 2-D transpose, the common case of `permute`.
    pub fn transpose2(&mut self, a: VarId) -> Result<VarId> {
        self.permute(a, vec![1, 0])
    }

    pub fn concat(&mut self, inputs: &[VarId], axis: usize) -> Result<VarId> {
        if inputs.is_empty() {
            return Err(AmcError::Contract("concat of zero tensors".into()));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(AmcError::Contract(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &i in inputs {
            let s = self.value(i).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(ax, (a, b))| ax != axis && a != b)
            {
                return Err(shape_err("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &i in inputs {
                let s = self.value(i).shape()[axis];
                let d = self.value(i).data();
                out.extend_from_slice(&d[o * s * inner..(o + 1) * s * inner]);
            }
        }
        self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            "concat",
        )
    }

    pub fn slice(&mut self, a: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        let s = self.value(a).shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(AmcError::Contract(format!(
                "slice [{start}, {}) on axis {axis} of shape {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        self.push(
            Tensor::new(out_shape, out)?,
            Op::Slice {
                a,
                axis,
                start,
                len,
            },
            "slice-select",
        )
    }

    pub fn mean_axis(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let s = self.value(a).shape().to_vec();
        if axis >= s.len() {
            return Err(AmcError::Contract(format!(
                "mean axis {axis} out of range for shape {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let n = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.value(a).data();
        let inv = T::from_f64(1.0 / n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for j in 0..inner {
                    out[o * inner + j] = out[o * inner + j] + d[base + j];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::MeanAxis { a, axis },
            "mean-over-axis",
        )
    }

    pub fn mean_all(&mut self, a: VarId) -> Result<VarId> {
        let n = self.value(a).numel();
        let sum: f64 = self.value(a).data().iter().map(|v| v.to_f64()).sum();
        self.push(
            Tensor::scalar(T::from_f64(sum / n as f64)),
            Op::MeanAll { a },
            "mean-all",
        )
    }

    pub fn sum_all(&mut self, a: VarId) -> Result<VarId> {
        let sum: f64 = self.value(a).data().iter().map(|v| v.to_f64()).sum();
        self.push(
            Tensor::scalar(T::from_f64(sum)),
            Op::SumAll { a },
            "sum-all",
        )
    }

    /// 3-D convolution, stride 1, "same" zero padding, odd kernel.
    /// x: [Ci, H, W, S], w: [Co, Ci, kh, kw, ks], b: [Co] -> [Co, H, W, S].
    pub fn conv3d(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 5 || ws[1] != xs[0] {
            return Err(shape_err("conv3d", &xs, &ws));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 || ws[4] % 2 == 0 {
            return Err(AmcError::Contract(format!("conv3d needs odd kernel, got {ws:?}")));
        }
        if self.value(b).shape() != [ws[0]] {
            return Err(shape_err("conv3d", &ws, self.value(b).shape()));
        }
        let value = conv3d_forward(self.value(x), self.value(w), self.value(b))?;
        self.push(value, Op::Conv3d { x, w, b }, "conv3d")
    }

    /// Trilinear upsampling by integer per-axis factors. x: [C, H, W, S].
    pub fn trilinear_upsample(&mut self, x: VarId, factors: [usize; 3]) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(AmcError::Contract(format!(
                "trilinear-upsample wants [C,H,W,S], got {xs:?}"
            )));
        }
        if factors.iter().any(|&f| f == 0) {
            return Err(AmcError::Contract("upsample factor 0".into()));
        }
        let value = upsample_forward(self.value(x), factors)?;
        self.push(value, Op::TrilinearUpsample { x, factors }, "trilinear-upsample")
    }

    /// Per-channel normalization over the spatial extent. x: [C, H, W, S].
    pub fn instance_norm3(&mut self, x: VarId, gamma: VarId, beta: VarId) -> Result<VarId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(AmcError::Contract(format!(
                "instance-norm wants [C,H,W,S], got {xs:?}"
            )));
        }
        let c = xs[0];
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err("instance-norm", &xs, self.value(gamma).shape()));
        }
        let n = xs[1] * xs[2] * xs[3];
        let eps = 1e-5f64;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![T::zero(); c * n];
        let mut means = vec![T::zero(); c];
        let mut inv_stds = vec![T::zero(); c];
        for ch in 0..c {
            let sl = &xd[ch * n..(ch + 1) * n];
            let mean: f64 = sl.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
            let var: f64 = sl.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means[ch] = T::from_f64(mean);
            inv_stds[ch] = T::from_f64(inv_std);
            for j in 0..n {
                out[ch * n + j] =
                    T::from_f64((sl[j].to_f64() - mean) * inv_std) * gd[ch] + bd[ch];
            }
        }
        self.push(
            Tensor::new(xs, out)?,
            Op::InstanceNorm3 {
                x,
                gamma,
                beta,
                saved_mean: means,
                saved_inv_std: inv_stds,
            },
            "instance-norm",
        )
    }

    /// Fused attention pool. h: [S, d], q: [d] -> v: [d].
    pub fn attn_pool(&mut self, h: VarId, q: VarId) -> Result<VarId> {
        let (s, d) = self.pool_dims(h, q)?;
        let a = pool_weights_f64(self.value(h).data(), s, d, self.value(q).data());
        let hd = self.value(h).data();
        let mut v = vec![T::zero(); d];
        for j in 0..d {
            let mut acc = 0.0f64;
            for (i, &ai) in a.iter().enumerate() {
                acc += ai * hd[i * d + j].to_f64();
            }
            v[j] = T::from_f64(acc);
        }
        let saved: Vec<T> = a.iter().map(|&x| T::from_f64(x)).collect();
        self.push(
            Tensor::new(vec![d], v)?,
            Op::AttnPool {
                h,
                q,
                saved_weights: saved,
            },
            "attention-pool",
        )
    }

    /// The normalized weight vector of the same pool. h: [S, d], q: [d] -> [S].
    pub fn attn_pool_weights(&mut self, h: VarId, q: VarId) -> Result<VarId> {
        let (s, d) = self.pool_dims(h, q)?;
        let a = pool_weights_f64(self.value(h).data(), s, d, self.value(q).data());
        let av: Vec<T> = a.iter().map(|&x| T::from_f64(x)).collect();
        self.push(
            Tensor::new(vec![s], av)?,
            Op::AttnPoolWeights { h, q },
            "attention-pool-weights",
        )
    }

    fn pool_dims(&self, h: VarId, q: VarId) -> Result<(usize, usize)> {
        let hs = self.value(h).shape().to_vec();
        let qs = self.value(q).shape().to_vec();
        if hs.len() != 2 || qs != [hs[1]] {
            return Err(shape_err("attention-pool", &hs, &qs));
        }
        if hs[0] == 0 {
            return Err(AmcError::Contract("attention-pool over zero slices".into()));
        }
        Ok((hs[0], hs[1]))
    }

    /// Mean focal BCE over per-class sigmoid probabilities (multi-label).
    /// targets must be 0/1 and shaped like logits.
    pub fn focal_bce(&mut self, logits: VarId, targets: &Tensor<T>, gamma: f64, alpha: f64) -> Result<VarId> {
        let ls = self.value(logits).shape().to_vec();
        if targets.shape() != ls {
            return Err(shape_err("focal-bce", &ls, targets.shape()));
        }
        if targets
            .data()
            .iter()
            .any(|t| t.to_f64() != 0.0 && t.to_f64() != 1.0)
        {
            return Err(AmcError::Contract("focal-bce targets must be 0/1".into()));
        }
        let n = targets.numel() as f64;
        let mut total = 0.0f64;
        for (z, y) in self.value(logits).data().iter().zip(targets.data()) {
            let s = if y.to_f64() == 1.0 { 1.0 } else { -1.0 };
            let u = s * z.to_f64();
            let pt = sigmoid_f(u);
            let log_pt = -softplus_f(-u);
            total += alpha * (1.0 - pt).powf(gamma) * (-log_pt);
        }
        self.push(
            Tensor::scalar(T::from_f64(total / n)),
            Op::FocalBce {
                logits,
                targets: targets.data().to_vec(),
                gamma,
                alpha,
            },
            "focal-bce",
        )
    }

    /// Mean focal loss over softmax rows. logits: [n, K], targets: class ids.
    pub fn focal_softmax(&mut self, logits: VarId, targets: &[usize], gamma: f64, alpha: f64) -> Result<VarId> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(AmcError::Contract(format!(
                "focal-softmax wants [n,K] logits with n targets, got {ls:?} and {}",
                targets.len()
            )));
        }
        let k = ls[1];
        if targets.iter().any(|&t| t >= k) {
            return Err(AmcError::Contract("focal-softmax target out of range".into()));
        }
        let probs = softmax_forward(self.value(logits), 1, false)?;
        let logp = softmax_forward(self.value(logits), 1, true)?;
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let pt = probs.data()[r * k + t].to_f64();
            let lpt = logp.data()[r * k + t].to_f64();
            total += alpha * (1.0 - pt).powf(gamma) * (-lpt);
        }
        self.push(
            Tensor::scalar(T::from_f64(total / targets.len() as f64)),
            Op::FocalSoftmax {
                logits,
                targets: targets.to_vec(),
                gamma,
                alpha,
            },
            "focal-softmax",
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Fills gradient accumulators for every
    /// reachable node with `requires_grad`.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(AmcError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(
            self.value(loss).shape().to_vec(),
            T::one(),
        ));
        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = self.grads[id].take().unwrap();
            self.backward_node(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: VarId, delta: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a = *a + *d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backward_node(&mut self, id: usize, g: &Tensor<T>) -> Result<()> {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                if sa.len() == 2 {
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if self.requires_grad(a) {
                        let da = mm_t(g.data(), (m, n), false, self.value(b).data(), (k, n), true);
                        self.accumulate(a, Tensor::new(vec![m, k], da)?);
                    }
                    if self.requires_grad(b) {
                        let db = mm_t(self.value(a).data(), (m, k), true, g.data(), (m, n), false);
                        self.accumulate(b, Tensor::new(vec![k, n], db)?);
                    }
                } else {
                    let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    if self.requires_grad(a) {
                        let mut da = Vec::with_capacity(bt * m * k);
                        for i in 0..bt {
                            da.extend(mm_t(
                                &g.data()[i * m * n..(i + 1) * m * n],
                                (m, n),
                                false,
                                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                                (k, n),
                                true,
                            ));
                        }
                        self.accumulate(a, Tensor::new(vec![bt, m, k], da)?);
                    }
                    if self.requires_grad(b) {
                        let mut db = Vec::with_capacity(bt * k * n);
                        for i in 0..bt {
                            db.extend(mm_t(
                                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                                (m, k),
                                true,
                                &g.data()[i * m * n..(i + 1) * m * n],
                                (m, n),
                                false,
                            ));
                        }
                        self.accumulate(b, Tensor::new(vec![bt, k, n], db)?);
                    }
                }
            }
            Op::Add { a, b } => {
                if self.requires_grad(a) {
                    self.accumulate(a, g.clone());
                }
                if self.requires_grad(b) {
                    let bn = self.value(b).numel();
                    let mut db = vec![T::zero(); bn];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i % bn] = db[i % bn] + *v;
                    }
                    self.accumulate(b, Tensor::new(self.value(b).shape().to_vec(), db)?);
                }
            }
            Op::Mul { a, b } => {
                if self.requires_grad(a) {
                    let da: Vec<T> = g
                        .data()
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.accumulate(a, Tensor::new(g.shape().to_vec(), da)?);
                }
                if self.requires_grad(b) {
                    let db: Vec<T> = g
                        .data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.accumulate(b, Tensor::new(g.shape().to_vec(), db)?);
                }
            }
            Op::Scale { a, c } => {
                let cv = T::from_f64(c);
                self.accumulate(a, g.map(|v| v * cv));
            }
            Op::Softmax { a, axis } => {
                let p = self.nodes[id].value.clone();
                let da = softmax_backward(&p, g, axis);
                self.accumulate(a, da);
            }
            Op::LogSoftmax { a, axis } => {
                // dz = g - softmax(z) * sum(g) along axis
                let lp = &self.nodes[id].value;
                let s = lp.shape().to_vec();
                let (outer, nn, inner) = axis_split(&s, axis);
                let mut da = g.data().to_vec();
                let lpd = lp.data();
                for o in 0..outer {
                    for j in 0..inner {
                        let mut gs = 0.0f64;
                        for kk in 0..nn {
                            gs += g.data()[(o * nn + kk) * inner + j].to_f64();
                        }
                        for kk in 0..nn {
                            let idx = (o * nn + kk) * inner + j;
                            let p = lpd[idx].to_f64().exp();
                            da[idx] = T::from_f64(da[idx].to_f64() - p * gs);
                        }
                    }
                }
                self.accumulate(a, Tensor::new(s, da)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved_mean,
                saved_inv_std,
            } => {
                let d = *self.value(x).shape().last().unwrap();
                let rows = self.value(x).numel() / d;
                let xd = self.value(x).data().to_vec();
                let gd = self.value(gamma).data().to_vec();
                let mut dx = vec![T::zero(); rows * d];
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                for r in 0..rows {
                    let mean = saved_mean[r].to_f64();
                    let inv_std = saved_inv_std[r].to_f64();
                    let mut sum_dxhat = 0.0f64;
                    let mut sum_dxhat_xhat = 0.0f64;
                    let mut xhat = vec![0.0f64; d];
                    let mut dxhat = vec![0.0f64; d];
                    for j in 0..d {
                        let idx = r * d + j;
                        xhat[j] = (xd[idx].to_f64() - mean) * inv_std;
                        let gv = g.data()[idx].to_f64();
                        dgamma[j] += gv * xhat[j];
                        dbeta[j] += gv;
                        dxhat[j] = gv * gd[j].to_f64();
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    for j in 0..d {
                        let v = inv_std
                            * (dxhat[j]
                                - sum_dxhat / d as f64
                                - xhat[j] * sum_dxhat_xhat / d as f64);
                        dx[r * d + j] = T::from_f64(v);
                    }
                }
                if self.requires_grad(x) {
                    self.accumulate(x, Tensor::new(self.value(x).shape().to_vec(), dx)?);
                }
                if self.requires_grad(gamma) {
                    let dg: Vec<T> = dgamma.iter().map(|&v| T::from_f64(v)).collect();
                    self.accumulate(gamma, Tensor::new(vec![d], dg)?);
                }
                if self.requires_grad(beta) {
                    let db: Vec<T> = dbeta.iter().map(|&v| T::from_f64(v)).collect();
                    self.accumulate(beta, Tensor::new(vec![d], db)?);
                }
            }
            Op::Gelu { a } => {
                let da: Vec<T> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| T::from_f64(gelu_grad_f(x.to_f64()) * gv.to_f64()))
                    .collect();
                self.accumulate(a, Tensor::new(g.shape().to_vec(), da)?);
            }
            Op::LeakyRelu { a, slope } => {
                let s = T::from_f64(slope);
                let da: Vec<T> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| if x.to_f64() >= 0.0 { gv } else { gv * s })
                    .collect();
                self.accumulate(a, Tensor::new(g.shape().to_vec(), da)?);
            }
            Op::Sigmoid { a } => {
                let p = &self.nodes[id].value;
                let da: Vec<T> = p
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&pv, &gv)| {
                        let pf = pv.to_f64();
                        T::from_f64(pf * (1.0 - pf) * gv.to_f64())
                    })
                    .collect();
                self.accumulate(a, Tensor::new(g.shape().to_vec(), da)?);
            }
            Op::Log { a } => {
                let da: Vec<T> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| T::from_f64(gv.to_f64() / x.to_f64()))
                    .collect();
                self.accumulate(a, Tensor::new(g.shape().to_vec(), da)?);
            }
            Op::Pow { a, p } => {
                let da: Vec<T> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| {
                        T::from_f64(p * x.to_f64().powf(p - 1.0) * gv.to_f64())
                    })
                    .collect();
                self.accumulate(a, Tensor::new(g.shape().to_vec(), da)?);
            }
            Op::Reshape { a } => {
                let da = g.reshaped(self.value(a).shape().to_vec())?;
                self.accumulate(a, da);
            }
            Op::Permute { a, axes } => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let da = permute_tensor(g, &inv)?;
                self.accumulate(a, da);
            }
            Op::Concat { inputs, axis } => {
                let gs = g.shape().to_vec();
                let outer: usize = gs[..axis].iter().product();
                let inner: usize = gs[axis + 1..].iter().product();
                let mut offset = 0usize;
                for &i in &inputs {
                    let s = self.value(i).shape()[axis];
                    if self.requires_grad(i) {
                        let mut di = Vec::with_capacity(outer * s * inner);
                        for o in 0..outer {
                            let base = (o * gs[axis] + offset) * inner;
                            di.extend_from_slice(&g.data()[base..base + s * inner]);
                        }
                        self.accumulate(i, Tensor::new(self.value(i).shape().to_vec(), di)?);
                    }
                    offset += s;
                }
            }
            Op::Slice {
                a,
                axis,
                start,
                len,
            } => {
                let s = self.value(a).shape().to_vec();
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut da = vec![T::zero(); self.value(a).numel()];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * s[axis] + start) * inner;
                    da[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(a, Tensor::new(s, da)?);
            }
            Op::MeanAxis { a, axis } => {
                let s = self.value(a).shape().to_vec();
                let (outer, n, inner) = axis_split(&s, axis);
                let inv = T::from_f64(1.0 / n as f64);
                let mut da = vec![T::zero(); self.value(a).numel()];
                for o in 0..outer {
                    for kk in 0..n {
                        let base = (o * n + kk) * inner;
                        for j in 0..inner {
                            da[base + j] = g.data()[o * inner + j] * inv;
                        }
                    }
                }
                self.accumulate(a, Tensor::new(s, da)?);
            }
            Op::MeanAll { a } => {
                let n = self.value(a).numel();
                let gv = g.data()[0] * T::from_f64(1.0 / n as f64);
                self.accumulate(a, Tensor::full(self.value(a).shape().to_vec(), gv));
            }
            Op::SumAll { a } => {
                let gv = g.data()[0];
                self.accumulate(a, Tensor::full(self.value(a).shape().to_vec(), gv));
            }
            Op::Conv3d { x, w, b } => {
                let (dx, dw, db) = conv3d_backward(
                    self.value(x),
                    self.value(w),
                    g,
                    self.requires_grad(x),
                    self.requires_grad(w),
                    self.requires_grad(b),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(w, dw);
                }
                if let Some(db) = db {
                    self.accumulate(b, db);
                }
            }
            Op::TrilinearUpsample { x, factors } => {
                let da = upsample_backward(self.value(x).shape(), g, factors)?;
                self.accumulate(x, da);
            }
            Op::InstanceNorm3 {
                x,
                gamma,
                beta,
                saved_mean,
                saved_inv_std,
            } => {
                let xs = self.value(x).shape().to_vec();
                let c = xs[0];
                let n = xs[1] * xs[2] * xs[3];
                let xd = self.value(x).data().to_vec();
                let gd = self.value(gamma).data().to_vec();
                let mut dx = vec![T::zero(); c * n];
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for ch in 0..c {
                    let mean = saved_mean[ch].to_f64();
                    let inv_std = saved_inv_std[ch].to_f64();
                    let gch = gd[ch].to_f64();
                    let mut sum_dxhat = 0.0f64;
                    let mut sum_dxhat_xhat = 0.0f64;
                    for j in 0..n {
                        let idx = ch * n + j;
                        let xhat = (xd[idx].to_f64() - mean) * inv_std;
                        let gv = g.data()[idx].to_f64();
                        dgamma[ch] += gv * xhat;
                        dbeta[ch] += gv;
                        sum_dxhat += gv * gch;
                        sum_dxhat_xhat += gv * gch * xhat;
                    }
                    for j in 0..n {
                        let idx = ch * n + j;
                        let xhat = (xd[idx].to_f64() - mean) * inv_std;
                        let dxhat = g.data()[idx].to_f64() * gch;
                        let v = inv_std
                            * (dxhat - sum_dxhat / n as f64 - xhat * sum_dxhat_xhat / n as f64);
                        dx[idx] = T::from_f64(v);
                    }
                }
                if self.requires_grad(x) {
                    self.accumulate(x, Tensor::new(xs, dx)?);
                }
                if self.requires_grad(gamma) {
                    let dg: Vec<T> = dgamma.iter().map(|&v| T::from_f64(v)).collect();
                    self.accumulate(gamma, Tensor::new(vec![c], dg)?);
                }
                if self.requires_grad(beta) {
                    let db: Vec<T> = dbeta.iter().map(|&v| T::from_f64(v)).collect();
                    self.accumulate(beta, Tensor::new(vec![c], db)?);
                }
            }
            Op::AttnPool {
                h,
                q,
                saved_weights,
            } => {
                let (s, d) = {
                    let hs = self.value(h).shape();
                    (hs[0], hs[1])
                };
                let hd = self.value(h).data().to_vec();
                let qd = self.value(q).data().to_vec();
                let scale = 1.0 / (d as f64).sqrt();
                let a: Vec<f64> = saved_weights.iter().map(|v| v.to_f64()).collect();
                // da_i = g . h_i ; plus direct dH from v = sum a_i h_i
                let mut da = vec![0.0f64; s];
                for i in 0..s {
                    let mut acc = 0.0f64;
                    for j in 0..d {
                        acc += g.data()[j].to_f64() * hd[i * d + j].to_f64();
                    }
                    da[i] = acc;
                }
                let dot: f64 = da.iter().zip(&a).map(|(x, y)| x * y).sum();
                let dz: Vec<f64> = (0..s).map(|i| a[i] * (da[i] - dot)).collect();
                if self.requires_grad(h) {
                    let mut dh = vec![T::zero(); s * d];
                    for i in 0..s {
                        for j in 0..d {
                            let v = a[i] * g.data()[j].to_f64() + dz[i] * qd[j].to_f64() * scale;
                            dh[i * d + j] = T::from_f64(v);
                        }
                    }
                    self.accumulate(h, Tensor::new(vec![s, d], dh)?);
                }
                if self.requires_grad(q) {
                    let mut dq = vec![T::zero(); d];
                    for j in 0..d {
                        let mut acc = 0.0f64;
                        for i in 0..s {
                            acc += dz[i] * hd[i * d + j].to_f64();
                        }
                        dq[j] = T::from_f64(acc * scale);
                    }
                    self.accumulate(q, Tensor::new(vec![d], dq)?);
                }
            }
            Op::AttnPoolWeights { h, q } => {
                let (s, d) = {
                    let hs = self.value(h).shape();
                    (hs[0], hs[1])
                };
                let hd = self.value(h).data().to_vec();
                let qd = self.value(q).data().to_vec();
                let scale = 1.0 / (d as f64).sqrt();
                let a: Vec<f64> = self.nodes[id].value.data().iter().map(|v| v.to_f64()).collect();
                let ga: Vec<f64> = g.data().iter().map(|v| v.to_f64()).collect();
                let dot: f64 = ga.iter().zip(&a).map(|(x, y)| x * y).sum();
                let dz: Vec<f64> = (0..s).map(|i| a[i] * (ga[i] - dot)).collect();
                if self.requires_grad(h) {
                    let mut dh = vec![T::zero(); s * d];
                    for i in 0..s {
                        for j in 0..d {
                            dh[i * d + j] = T::from_f64(dz[i] * qd[j].to_f64() * scale);
                        }
                    }
                    self.accumulate(h, Tensor::new(vec![s, d], dh)?);
                }
                if self.requires_grad(q) {
                    let mut dq = vec![T::zero(); d];
                    for j in 0..d {
                        let mut acc = 0.0f64;
                        for i in 0..s {
                            acc += dz[i] * hd[i * d + j].to_f64();
                        }
                        dq[j] = T::from_f64(acc * scale);
                    }
                    self.accumulate(q, Tensor::new(vec![d], dq)?);
                }
            }
            Op::FocalBce {
                logits,
                targets,
                gamma,
                alpha,
            } => {
                let n = targets.len() as f64;
                let gscale = g.data()[0].to_f64() / n;
                let da: Vec<T> = self
                    .value(logits)
                    .data()
                    .iter()
                    .zip(&targets)
                    .map(|(&z, &y)| {
                        let s = if y.to_f64() == 1.0 { 1.0 } else { -1.0 };
                        let u = s * z.to_f64();
                        let pt = sigmoid_f(u);
                        let log_pt = -softplus_f(-u);
                        let dldu = alpha * gamma * pt * (1.0 - pt).powf(gamma) * log_pt
                            - alpha * (1.0 - pt).powf(gamma + 1.0);
                        T::from_f64(s * dldu * gscale)
                    })
                    .collect();
                self.accumulate(
                    logits,
                    Tensor::new(self.value(logits).shape().to_vec(), da)?,
                );
            }
            Op::FocalSoftmax {
                logits,
                targets,
                gamma,
                alpha,
            } => {
                let ls = self.value(logits).shape().to_vec();
                let k = ls[1];
                let n = targets.len() as f64;
                let gscale = g.data()[0].to_f64() / n;
                let probs = softmax_forward(self.value(logits), 1, false)?;
                let mut da = vec![T::zero(); self.value(logits).numel()];
                for (r, &t) in targets.iter().enumerate() {
                    let pt = probs.data()[r * k + t].to_f64();
                    let log_pt = pt.max(1e-300).ln();
                    let c1 = if gamma == 0.0 || pt >= 1.0 - 1e-12 {
                        -alpha * (1.0 - pt).powf(gamma) / pt
                    } else {
                        alpha * gamma * (1.0 - pt).powf(gamma - 1.0) * log_pt
                            - alpha * (1.0 - pt).powf(gamma) / pt
                    };
                    for j in 0..k {
                        let pj = probs.data()[r * k + j].to_f64();
                        let delta = if j == t { 1.0 } else { 0.0 };
                        da[r * k + j] =
                            T::from_f64(c1 * pt * (delta - pj) * gscale);
                    }
                }
                self.accumulate(logits, Tensor::new(ls, da)?);
            }
        }
        Ok(())
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<VarId> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::Scale { a, .. }
        | Op::Softmax { a, .. }
        | Op::LogSoftmax { a, .. }
        | Op::Gelu { a }
        | Op::LeakyRelu { a, .. }
        | Op::Sigmoid { a }
        | Op::Log { a }
        | Op::Pow { a, .. }
        | Op::Reshape { a }
        | Op::Permute { a, .. }
        | Op::Slice { a, .. }
        | Op::MeanAxis { a, .. }
        | Op::MeanAll { a }
        | Op::SumAll { a } => vec![*a],
        Op::LayerNorm { x, gamma, beta, .. } | Op::InstanceNorm3 { x, gamma, beta, .. } => {
            vec![*x, *gamma, *beta]
        }
        Op::Concat { inputs, .. } => inputs.clone(),
        Op::Conv3d { x, w, b } => vec![*x, *w, *b],
        Op::TrilinearUpsample { x, .. } => vec![*x],
        Op::AttnPool { h, q, .. } | Op::AttnPoolWeights { h, q } => vec![*h, *q],
        Op::FocalBce { logits, .. } | Op::FocalSoftmax { logits, .. } => vec![*logits],
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax (or log-softmax) over one axis.
fn softmax_forward<T: Scalar>(x: &Tensor<T>, axis: usize, log: bool) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    if axis >= s.len() {
        return Err(AmcError::Contract(format!(
            "softmax axis {axis} out of range for shape {s:?}"
        )));
    }
    let (outer, n, inner) = axis_split(&s, axis);
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + j;
            let mut max = f64::NEG_INFINITY;
            for k in 0..n {
                max = max.max(d[idx(k)].to_f64());
            }
            let mut sum = 0.0f64;
            for k in 0..n {
                sum += (d[idx(k)].to_f64() - max).exp();
            }
            for k in 0..n {
                let e = d[idx(k)].to_f64() - max;
                out[idx(k)] = if log {
                    T::from_f64(e - sum.ln())
                } else {
                    T::from_f64(e.exp() / sum)
                };
            }
        }
    }
    Tensor::new(s, out)
}

fn softmax_backward<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let s = p.shape().to_vec();
    let (outer, n, inner) = axis_split(&s, axis);
    let mut out = vec![T::zero(); p.numel()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + j;
            let mut dot = 0.0f64;
            for k in 0..n {
                dot += g.data()[idx(k)].to_f64() * p.data()[idx(k)].to_f64();
            }
            for k in 0..n {
                let pv = p.data()[idx(k)].to_f64();
                out[idx(k)] = T::from_f64(pv * (g.data()[idx(k)].to_f64() - dot));
            }
        }
    }
    Tensor::new(s, out).unwrap()
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let s = x.shape();
    if axes.len() != s.len() {
        return Err(AmcError::Contract(format!(
            "permute axes {axes:?} for rank {}",
            s.len()
        )));
    }
    let mut seen = vec![false; s.len()];
    for &a in axes {
        if a >= s.len() || seen[a] {
            return Err(AmcError::Contract(format!("bad permutation {axes:?}")));
        }
        seen[a] = true;
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
    let in_str = strides(s);
    let out_str = strides(&out_shape);
    let mut out = vec![T::zero(); x.numel()];
    let rank = s.len();
    let mut idx = vec![0usize; rank];
    for flat_out in 0..x.numel() {
        let mut rem = flat_out;
        for i in 0..rank {
            idx[i] = rem / out_str[i];
            rem %= out_str[i];
        }
        let mut flat_in = 0usize;
        for i in 0..rank {
            flat_in += idx[i] * in_str[axes[i]];
        }
        out[flat_out] = x.data()[flat_in];
    }
    Tensor::new(out_shape, out)
}

fn gelu_f(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_f(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Direct 3-D convolution via shifted-row accumulation.
fn conv3d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ci, h, wd, s) = {
        let xs = x.shape();
        (xs[0], xs[1], xs[2], xs[3])
    };
    let (co, kh, kw, ks) = {
        let ws = w.shape();
        (ws[0], ws[2], ws[3], ws[4])
    };
    let (ph, pw, ps) = (kh / 2, kw / 2, ks / 2);
    let vol = h * wd * s;
    let mut out = vec![T::zero(); co * vol];
    for c_out in 0..co {
        let bias = b.data()[c_out];
        for v in out[c_out * vol..(c_out + 1) * vol].iter_mut() {
            *v = bias;
        }
    }
    let xd = x.data();
    let wdta = w.data();
    for c_out in 0..co {
        for c_in in 0..ci {
            for kz in 0..kh {
                let dh = kz as isize - ph as isize;
                for ky in 0..kw {
                    let dw = ky as isize - pw as isize;
                    for kx in 0..ks {
                        let ds = kx as isize - ps as isize;
                        let wv = wdta[(((c_out * ci + c_in) * kh + kz) * kw + ky) * ks + kx];
                        shifted_axpy(
                            &mut out[c_out * vol..(c_out + 1) * vol],
                            &xd[c_in * vol..(c_in + 1) * vol],
                            wv,
                            h,
                            wd,
                            s,
                            dh,
                            dw,
                            ds,
                        );
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, h, wd, s], out)
}

/// out[h,w,s] += v * x[h+dh, w+dw, s+ds] over the valid overlap.
#[allow(clippy::too_many_arguments)]
fn shifted_axpy<T: Scalar>(
    out: &mut [T],
    x: &[T],
    v: T,
    h: usize,
    w: usize,
    s: usize,
    dh: isize,
    dw: isize,
    ds: isize,
) {
    let h0 = (-dh).max(0) as usize;
    let h1 = (h as isize).min(h as isize - dh).max(0) as usize;
    let w0 = (-dw).max(0) as usize;
    let w1 = (w as isize).min(w as isize - dw).max(0) as usize;
    let s0 = (-ds).max(0) as usize;
    let s1 = (s as isize).min(s as isize - ds).max(0) as usize;
    if s1 <= s0 {
        return;
    }
    for i in h0..h1 {
        let xi = (i as isize + dh) as usize;
        for j in w0..w1 {
            let xj = (j as isize + dw) as usize;
            let ob = (i * w + j) * s;
            let xb = (xi * w + xj) * s + (s0 as isize + ds) as usize;
            let orow = &mut out[ob + s0..ob + s1];
            let xrow = &x[xb..xb + (s1 - s0)];
            for (o, &xv) in orow.iter_mut().zip(xrow) {
                *o = *o + v * xv;
            }
        }
    }
}

/// Dot of shifted rows: sum over valid overlap of a[h,w,s] * b[h+dh, w+dw, s+ds].
#[allow(clippy::too_many_arguments)]
fn shifted_dot<T: Scalar>(
    a: &[T],
    b: &[T],
    h: usize,
    w: usize,
    s: usize,
    dh: isize,
    dw: isize,
    ds: isize,
) -> f64 {
    let h0 = (-dh).max(0) as usize;
    let h1 = (h as isize).min(h as isize - dh).max(0) as usize;
    let w0 = (-dw).max(0) as usize;
    let w1 = (w as isize).min(w as isize - dw).max(0) as usize;
    let s0 = (-ds).max(0) as usize;
    let s1 = (s as isize).min(s as isize - ds).max(0) as usize;
    if s1 <= s0 {
        return 0.0;
    }
    let mut acc = T::zero();
    for i in h0..h1 {
        let bi = (i as isize + dh) as usize;
        for j in w0..w1 {
            let bj = (j as isize + dw) as usize;
            let ab = (i * w + j) * s;
            let bb = (bi * w + bj) * s + (s0 as isize + ds) as usize;
            let arow = &a[ab + s0..ab + s1];
            let brow = &b[bb..bb + (s1 - s0)];
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
        }
    }
    acc.to_f64()
}

type Conv3dGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<Conv3dGrads<T>> {
    let (ci, h, wd, s) = {
        let xs = x.shape();
        (xs[0], xs[1], xs[2], xs[3])
    };
    let (co, kh, kw, ks) = {
        let ws = w.shape();
        (ws[0], ws[2], ws[3], ws[4])
    };
    let (ph, pw, ps) = (kh / 2, kw / 2, ks / 2);
    let vol = h * wd * s;
    let gd = g.data();
    let dx = if need_dx {
        // dx[ci] += w[co,ci,k] * g[co] shifted by the negated kernel offset
        let mut dx = vec![T::zero(); ci * vol];
        let wdta = w.data();
        for c_out in 0..co {
            for c_in in 0..ci {
                for kz in 0..kh {
                    let dh = kz as isize - ph as isize;
                    for ky in 0..kw {
                        let dwo = ky as isize - pw as isize;
                        for kx in 0..ks {
                            let ds = kx as isize - ps as isize;
                            let wv = wdta[(((c_out * ci + c_in) * kh + kz) * kw + ky) * ks + kx];
                            shifted_axpy(
                                &mut dx[c_in * vol..(c_in + 1) * vol],
                                &gd[c_out * vol..(c_out + 1) * vol],
                                wv,
                                h,
                                wd,
                                s,
                                -dh,
                                -dwo,
                                -ds,
                            );
                        }
                    }
                }
            }
        }
        Some(Tensor::new(vec![ci, h, wd, s], dx)?)
    } else {
        None
    };
    let dw = if need_dw {
        let xd = x.data();
        let mut dw = vec![T::zero(); co * ci * kh * kw * ks];
        for c_out in 0..co {
            for c_in in 0..ci {
                for kz in 0..kh {
                    let dh = kz as isize - ph as isize;
                    for ky in 0..kw {
                        let dwo = ky as isize - pw as isize;
                        for kx in 0..ks {
                            let ds = kx as isize - ps as isize;
                            let v = shifted_dot(
                                &gd[c_out * vol..(c_out + 1) * vol],
                                &xd[c_in * vol..(c_in + 1) * vol],
                                h,
                                wd,
                                s,
                                dh,
                                dwo,
                                ds,
                            );
                            dw[(((c_out * ci + c_in) * kh + kz) * kw + ky) * ks + kx] =
                                T::from_f64(v);
                        }
                    }
                }
            }
        }
        Some(Tensor::new(vec![co, ci, kh, kw, ks], dw)?)
    } else {
        None
    };
    let db = if need_db {
        let mut db = vec![T::zero(); co];
        for c_out in 0..co {
            let mut acc = T::zero();
            for &v in &gd[c_out * vol..(c_out + 1) * vol] {
                acc = acc + v;
            }
            db[c_out] = acc;
        }
        Some(Tensor::new(vec![co], db)?)
    } else {
        None
    };
    Ok((dx, dw, db))
}

/// Per-axis sampling table for half-pixel-centered linear interpolation.
fn lerp_table(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let n_out = n_in * factor;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn upsample_forward<T: Scalar>(x: &Tensor<T>, factors: [usize; 3]) -> Result<Tensor<T>> {
    let xs = x.shape();
    let (c, h, w, s) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow, os) = (h * factors[0], w * factors[1], s * factors[2]);
    let th = lerp_table(h, factors[0]);
    let tw = lerp_table(w, factors[1]);
    let ts = lerp_table(s, factors[2]);
    let xd = x.data();
    let mut out = vec![T::zero(); c * oh * ow * os];
    for ch in 0..c {
        let xb = ch * h * w * s;
        let ob = ch * oh * ow * os;
        for (i, &(i0, i1, ti)) in th.iter().enumerate() {
            for (j, &(j0, j1, tj)) in tw.iter().enumerate() {
                for (k, &(k0, k1, tk)) in ts.iter().enumerate() {
                    let f = |a: usize, b: usize, cc: usize| xd[xb + (a * w + b) * s + cc].to_f64();
                    let v = f(i0, j0, k0) * (1.0 - ti) * (1.0 - tj) * (1.0 - tk)
                        + f(i0, j0, k1) * (1.0 - ti) * (1.0 - tj) * tk
                        + f(i0, j1, k0) * (1.0 - ti) * tj * (1.0 - tk)
                        + f(i0, j1, k1) * (1.0 - ti) * tj * tk
                        + f(i1, j0, k0) * ti * (1.0 - tj) * (1.0 - tk)
                        + f(i1, j0, k1) * ti * (1.0 - tj) * tk
                        + f(i1, j1, k0) * ti * tj * (1.0 - tk)
                        + f(i1, j1, k1) * ti * tj * tk;
                    out[ob + (i * ow + j) * os + k] = T::from_f64(v);
                }
            }
        }
    }
    Tensor::new(vec![c, oh, ow, os], out)
}

fn upsample_backward<T: Scalar>(
    in_shape: &[usize],
    g: &Tensor<T>,
    factors: [usize; 3],
) -> Result<Tensor<T>> {
    let (c, h, w, s) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow, os) = (h * factors[0], w * factors[1], s * factors[2]);
    let th = lerp_table(h, factors[0]);
    let tw = lerp_table(w, factors[1]);
    let ts = lerp_table(s, factors[2]);
    let gd = g.data();
    let mut out = vec![0.0f64; c * h * w * s];
    for ch in 0..c {
        let ob = ch * h * w * s;
        let gb = ch * oh * ow * os;
        for (i, &(i0, i1, ti)) in th.iter().enumerate() {
            for (j, &(j0, j1, tj)) in tw.iter().enumerate() {
                for (k, &(k0, k1, tk)) in ts.iter().enumerate() {
                    let gv = gd[gb + (i * ow + j) * os + k].to_f64();
                    let mut add = |a: usize, b: usize, cc: usize, wgt: f64| {
                        out[ob + (a * w + b) * s + cc] += gv * wgt;
                    };
                    add(i0, j0, k0, (1.0 - ti) * (1.0 - tj) * (1.0 - tk));
                    add(i0, j0, k1, (1.0 - ti) * (1.0 - tj) * tk);
                    add(i0, j1, k0, (1.0 - ti) * tj * (1.0 - tk));
                    add(i0, j1, k1, (1.0 - ti) * tj * tk);
                    add(i1, j0, k0, ti * (1.0 - tj) * (1.0 - tk));
                    add(i1, j0, k1, ti * (1.0 - tj) * tk);
                    add(i1, j1, k0, ti * tj * (1.0 - tk));
                    add(i1, j1, k1, ti * tj * tk);
                }
            }
        }
    }
    Tensor::new(
        in_shape.to_vec(),
        out.into_iter().map(T::from_f64).collect(),
    )
}
