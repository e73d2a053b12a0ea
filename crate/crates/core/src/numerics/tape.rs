//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Operations are recorded during the forward pass; [`Tape::backward`]
//! replays them once in reverse topological order (which is simply reverse
//! insertion order). A tape is single-owner and not shareable across
//! threads; inference paths build a short-lived tape and never call
//! `backward`.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::tensor::Tensor;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LogAddExp(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { axis: usize, parts: Vec<Var> },
    Slice { src: Var, start: Vec<usize>, len: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax { src: Var, axis: usize },
    LogSoftmax { src: Var, axis: usize },
    LogSumExp { src: Var, axis: usize },
    LayerNorm { src: Var, gain: Var, bias: Var, eps: f64 },
    Conv2d { src: Var, kernel: Var, bias: Var, stride: usize, pad: usize },
    Conv1dCausal { src: Var, kernel: Var, bias: Var },
    MaxPool2d { src: Var, argmax: Vec<usize> },
    GatherRows { src: Var, ids: Vec<usize> },
    GatherRowElems { src: Var, row: usize, ids: Vec<usize> },
    PickPerRow { src: Var, ids: Vec<usize> },
    MergeChannels { src: Var },
    SumAll(Var),
    Dropout { src: Var, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Dynamic gradient tape; owns every tensor produced during a forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_index: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    spent: bool,
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

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        let id = self.nodes.len();
        value.tape_id = Some(id);
        self.nodes.push(Node { value, op });
        Var(id)
    }

    /// Insert a gradient-tracked leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf)
    }

    /// Insert a leaf with no gradient of interest (masks, features, labels).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf)
    }

    /// Insert a named parameter leaf. Binding the same name twice returns
    /// the original handle so gradients accumulate on one node.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            debug_assert_eq!(self.nodes[v.0].value.shape(), t.shape());
            return v;
        }
        let v = self.push(t.detached(), Op::Leaf);
        self.param_index.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Named parameter gradients in first-bind order. Empty before `backward`.
    pub fn named_grads(&self) -> Vec<(&str, &[f64])> {
        self.param_order
            .iter()
            .filter_map(|(name, v)| self.grad(*v).map(|g| (name.as_str(), g)))
            .collect()
    }

    // ---- element-wise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(shape_err("add", ta, tb));
        }
        let data = zip_map(ta.data(), tb.data(), |x, y| x + y);
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `mat[m x n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, mat: Var, bias: Var) -> Result<Var> {
        let (tm, tb) = (&self.nodes[mat.0].value, &self.nodes[bias.0].value);
        if tm.ndim() != 2 || tb.ndim() != 1 || tm.cols() != tb.numel() {
            return Err(shape_err("add_bias", tm, tb));
        }
        let n = tm.cols();
        let mut data = tm.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_vec(tm.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(mat, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(shape_err("mul", ta, tb));
        }
        let data = zip_map(ta.data(), tb.data(), |x, y| x * y);
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| x * c).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(a, c))
    }

    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(shape_err("log_add_exp", ta, tb));
        }
        let data = zip_map(ta.data(), tb.data(), |x, y| kernels::log_add_exp(x, y));
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::LogAddExp(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| x.tanh()).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Tanh(a))
    }

    /// Train-mode inverted dropout with an explicit RNG; scales kept
    /// activations by `1/(1-p)`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} outside [0, 1)")));
        }
        let ta = &self.nodes[a.0].value;
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..ta.numel())
            .map(|_| if rng.random_bool(p) { 0.0 } else { keep })
            .collect();
        let data = zip_map(ta.data(), &mask, |x, m| x * m);
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { src: a, mask }))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let out = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.ndim() != 2 {
            return Err(Error::Contract(format!("transpose needs 2-D, got {:?}", ta.shape())));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let data = kernels::transpose(ta.data(), r, c);
        let out = Tensor::from_vec(vec![c, r], data)?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != ta.numel() {
            return Err(Error::Contract(format!(
                "reshape {:?} -> {:?} changes element count",
                ta.shape(),
                shape
            )));
        }
        let out = Tensor::from_vec(shape, ta.data().to_vec())?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Concatenate 1-D tensors, or 2-D tensors along `axis` 0 (rows) / 1 (cols).
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let ndim = first.len();
        if axis >= ndim {
            return Err(Error::Contract(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != ndim || (0..ndim).any(|d| d != axis && s[d] != first[d]) {
                return Err(Error::DimMismatch { op: "concat", lhs: first, rhs: s.to_vec() });
            }
            out_shape[axis] += s[axis];
        }
        let data = match (ndim, axis) {
            (1, 0) => {
                let mut data = Vec::with_capacity(out_shape[0]);
                for &p in parts {
                    data.extend_from_slice(self.nodes[p.0].value.data());
                }
                data
            }
            (2, 0) => {
                let mut data = Vec::with_capacity(out_shape[0] * out_shape[1]);
                for &p in parts {
                    data.extend_from_slice(self.nodes[p.0].value.data());
                }
                data
            }
            (2, 1) => {
                let rows = out_shape[0];
                let mut data = Vec::with_capacity(rows * out_shape[1]);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.nodes[p.0].value.row(r));
                    }
                }
                data
            }
            _ => {
                return Err(Error::Contract(format!(
                    "concat unsupported for {ndim}-D along axis {axis}"
                )))
            }
        };
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(out, Op::Concat { axis, parts: parts.to_vec() }))
    }

    /// Rectangular slice of a 1-D or 2-D tensor.
    pub fn slice(&mut self, src: Var, start: &[usize], len: &[usize]) -> Result<Var> {
        let ts = &self.nodes[src.0].value;
        let shape = ts.shape();
        if start.len() != shape.len() || len.len() != shape.len() {
            return Err(Error::Contract(format!(
                "slice rank mismatch: tensor {:?}, start {:?}, len {:?}",
                shape, start, len
            )));
        }
        for d in 0..shape.len() {
            if start[d] + len[d] > shape[d] || len[d] == 0 {
                return Err(Error::Contract(format!(
                    "slice [{}..{}] out of range for dim {} of {:?}",
                    start[d],
                    start[d] + len[d],
                    d,
                    shape
                )));
            }
        }
        let data = match shape.len() {
            1 => ts.data()[start[0]..start[0] + len[0]].to_vec(),
            2 => {
                let cols = shape[1];
                let mut data = Vec::with_capacity(len[0] * len[1]);
                for r in start[0]..start[0] + len[0] {
                    data.extend_from_slice(&ts.data()[r * cols + start[1]..r * cols + start[1] + len[1]]);
                }
                data
            }
            n => return Err(Error::Contract(format!("slice unsupported for {n}-D"))),
        };
        let out = Tensor::from_vec(len.to_vec(), data)?;
        Ok(self.push(out, Op::Slice { src, start: start.to_vec(), len: len.to_vec() }))
    }

    // ---- reductions and normalizations ----

    /// Stable softmax along `axis`; rows along the axis sum to one.
    pub fn softmax(&mut self, src: Var, axis: usize) -> Result<Var> {
        let ts = &self.nodes[src.0].value;
        if ts.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let (outer, lane, inner) = lane_split(ts.shape(), axis)?;
        let mut data = ts.data().to_vec();
        for_each_lane(&mut data, outer, lane, inner, |vals| {
            let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in vals.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in vals.iter_mut() {
                *v /= sum;
            }
        });
        let out = Tensor::from_vec(ts.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax { src, axis }))
    }

    pub fn log_softmax(&mut self, src: Var, axis: usize) -> Result<Var> {
        let ts = &self.nodes[src.0].value;
        if ts.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("log_softmax input contains NaN".into()));
        }
        let (outer, lane, inner) = lane_split(ts.shape(), axis)?;
        let mut data = ts.data().to_vec();
        for_each_lane(&mut data, outer, lane, inner, |vals| {
            let lse = kernels::log_sum_exp(vals);
            for v in vals.iter_mut() {
                *v -= lse;
            }
        });
        let out = Tensor::from_vec(ts.shape().to_vec(), data)?;
        Ok(self.push(out, Op::LogSoftmax { src, axis }))
    }

    /// `log(sum(exp(x)))` along `axis`; the reduced axis is removed
    /// (a 1-D input yields a scalar).
    pub fn logsumexp(&mut self, src: Var, axis: usize) -> Result<Var> {
        let ts = &self.nodes[src.0].value;
        let (outer, lane, inner) = lane_split(ts.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        let data = ts.data();
        for o in 0..outer {
            for i in 0..inner {
                let mut m = f64::NEG_INFINITY;
                for l in 0..lane {
                    m = m.max(data[(o * lane + l) * inner + i]);
                }
                out[o * inner + i] = if m == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    let mut s = 0.0;
                    for l in 0..lane {
                        s += (data[(o * lane + l) * inner + i] - m).exp();
                    }
                    m + s.ln()
                };
            }
        }
        let mut shape: Vec<usize> = ts.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::from_vec(shape, out)?;
        Ok(self.push(out, Op::LogSumExp { src, axis }))
    }

    /// Normalize each trailing-dimension lane to zero mean / unit variance,
    /// then apply elementwise `gain` and `bias`.
    pub fn layer_norm(&mut self, src: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ts, tg, tb) = (
            &self.nodes[src.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let d = ts.cols();
        if tg.numel() != d || tb.numel() != d || eps <= 0.0 {
            return Err(shape_err("layer_norm", ts, tg));
        }
        let mut data = ts.data().to_vec();
        let (g, b) = (tg.data(), tb.data());
        for lane in data.chunks_mut(d) {
            let mean = lane.iter().sum::<f64>() / d as f64;
            let var = lane.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in lane.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        let out = Tensor::from_vec(ts.shape().to_vec(), data)?;
        Ok(self.push(out, Op::LayerNorm { src, gain, bias, eps }))
    }

    pub fn sum_all(&mut self, src: Var) -> Var {
        let s: f64 = self.nodes[src.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(src))
    }

    // ---- convolution / pooling ----

    /// Cross-correlation of `src[c_in x h x w]` with
    /// `kernel[c_out x c_in x kh x kw]` plus per-channel `bias[c_out]`.
    pub fn conv2d(&mut self, src: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ts, tk, tb) = (
            &self.nodes[src.0].value,
            &self.nodes[kernel.0].value,
            &self.nodes[bias.0].value,
        );
        if ts.ndim() != 3 || tk.ndim() != 4 || ts.shape()[0] != tk.shape()[1] {
            return Err(shape_err("conv2d", ts, tk));
        }
        let (c_in, h, w) = (ts.shape()[0], ts.shape()[1], ts.shape()[2]);
        let (c_out, kh, kw) = (tk.shape()[0], tk.shape()[2], tk.shape()[3]);
        if tb.numel() != c_out {
            return Err(shape_err("conv2d bias", tk, tb));
        }
        let oh = kernels::conv_out_dim(h, kh, stride, pad);
        let ow = kernels::conv_out_dim(w, kw, stride, pad);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(shape_err("conv2d kernel exceeds padded input", ts, tk)),
        };
        let data = kernels::conv2d(
            ts.data(),
            tk.data(),
            Some(tb.data()),
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
        );
        let out = Tensor::from_vec(vec![c_out, oh, ow], data)?;
        Ok(self.push(out, Op::Conv2d { src, kernel, bias, stride, pad }))
    }

    /// Causal 1-D convolution over time: `src[t x c_in]`,
    /// `kernel[c_out x c_in x kw]`, left-padded by `kw - 1` zeros so
    /// output row `t` depends only on input rows `<= t`.
    pub fn conv1d_causal(&mut self, src: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (ts, tk, tb) = (
            &self.nodes[src.0].value,
            &self.nodes[kernel.0].value,
            &self.nodes[bias.0].value,
        );
        if ts.ndim() != 2 || tk.ndim() != 3 || ts.cols() != tk.shape()[1] {
            return Err(shape_err("conv1d_causal", ts, tk));
        }
        let (t_len, c_in) = (ts.rows(), ts.cols());
        let (c_out, kw) = (tk.shape()[0], tk.shape()[2]);
        if tb.numel() != c_out {
            return Err(shape_err("conv1d_causal bias", tk, tb));
        }
        let x = ts.data();
        let k = tk.data();
        let mut data = vec![0.0; t_len * c_out];
        for t in 0..t_len {
            for co in 0..c_out {
                let mut acc = tb.data()[co];
                for j in 0..kw {
                    let tt = t as isize - (kw - 1) as isize + j as isize;
                    if tt < 0 {
                        continue;
                    }
                    let xr = &x[tt as usize * c_in..(tt as usize + 1) * c_in];
                    let kr = &k[co * c_in * kw..(co + 1) * c_in * kw];
                    for ci in 0..c_in {
                        acc += xr[ci] * kr[ci * kw + j];
                    }
                }
                data[t * c_out + co] = acc;
            }
        }
        let out = Tensor::from_vec(vec![t_len, c_out], data)?;
        Ok(self.push(out, Op::Conv1dCausal { src, kernel, bias }))
    }

    /// Per-window maximum over `src[c x h x w]`. Uses ceil semantics: the
    /// last window along each axis may be partial, so `h' = ceil(h/stride)`
    /// for window == stride. Ties route the gradient to the first occurrence
    /// in row-major scan order.
    pub fn max_pool2d(&mut self, src: Var, window: usize, stride: usize) -> Result<Var> {
        let ts = &self.nodes[src.0].value;
        if ts.ndim() != 3 {
            return Err(Error::Contract(format!("max_pool2d needs 3-D, got {:?}", ts.shape())));
        }
        let (c, h, w) = (ts.shape()[0], ts.shape()[1], ts.shape()[2]);
        if window > h || window > w || window == 0 || stride == 0 {
            return Err(Error::DimMismatch {
                op: "max_pool2d window",
                lhs: ts.shape().to_vec(),
                rhs: vec![window, window],
            });
        }
        let oh = (h - window + stride - 1) / stride + 1;
        let ow = (w - window + stride - 1) / stride + 1;
        let x = ts.data();
        let mut data = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..window.min(h - oy * stride) {
                        for kx in 0..window.min(w - ox * stride) {
                            let idx = ci * h * w + (oy * stride + ky) * w + (ox * stride + kx);
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ci * oh * ow + oy * ow + ox;
                    data[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let out = Tensor::from_vec(vec![c, oh, ow], data)?;
        Ok(self.push(out, Op::MaxPool2d { src, argmax }))
    }

    /// Reorder `src[c x h x w]` to `[h x (c*w)]`, grouping all channels of
    /// one time step into a single row.
    pub fn merge_channels(&mut self, src: Var) -> Result<Var> {
        let ts = &self.nodes[src.0].value;
        if ts.ndim() != 3 {
            return Err(Error::Contract(format!("merge_channels needs 3-D, got {:?}", ts.shape())));
        }
        let (c, h, w) = (ts.shape()[0], ts.shape()[1], ts.shape()[2]);
        let x = ts.data();
        let mut data = vec![0.0; c * h * w];
        for ci in 0..c {
            for hh in 0..h {
                for ww in 0..w {
                    data[hh * (c * w) + ci * w + ww] = x[ci * h * w + hh * w + ww];
                }
            }
        }
        let out = Tensor::from_vec(vec![h, c * w], data)?;
        Ok(self.push(out, Op::MergeChannels { src }))
    }

    // ---- gathers ----

    /// Row lookup: `out[i] = src[ids[i], :]`. Also serves as embedding lookup.
    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> Result<Var> {
        let ts = &self.nodes[src.0].value;
        if ts.ndim() != 2 || ids.is_empty() {
            return Err(Error::Contract(format!(
                "gather_rows needs 2-D source and non-empty ids, got {:?} / {} ids",
                ts.shape(),
                ids.len()
            )));
        }
        let (rows, cols) = (ts.rows(), ts.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!("gather_rows id {bad} out of range 0..{rows}")));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(ts.row(i));
        }
        let out = Tensor::from_vec(vec![ids.len(), cols], data)?;
        Ok(self.push(out, Op::GatherRows { src, ids: ids.to_vec() }))
    }

    /// Element lookup within one row: `out[j] = src[row, ids[j]]`.
    pub fn gather_row_elems(&mut self, src: Var, row: usize, ids: &[usize]) -> Result<Var> {
        let ts = &self.nodes[src.0].value;
        if ts.ndim() != 2 || row >= ts.rows() {
            return Err(Error::Contract(format!(
                "gather_row_elems row {row} out of range for {:?}",
                ts.shape()
            )));
        }
        let r = ts.row(row);
        if let Some(&bad) = ids.iter().find(|&&i| i >= r.len()) {
            return Err(Error::Contract(format!("gather_row_elems col {bad} out of range")));
        }
        let data: Vec<f64> = ids.iter().map(|&i| r[i]).collect();
        let out = Tensor::from_vec(vec![ids.len()], data)?;
        Ok(self.push(out, Op::GatherRowElems { src, row, ids: ids.to_vec() }))
    }

    /// One element per row: `out[i] = src[i, ids[i]]`.
    pub fn pick_per_row(&mut self, src: Var, ids: &[usize]) -> Result<Var> {
        let ts = &self.nodes[src.0].value;
        if ts.ndim() != 2 || ids.len() != ts.rows() {
            return Err(Error::Contract(format!(
                "pick_per_row needs one id per row: {:?} vs {} ids",
                ts.shape(),
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= ts.cols()) {
            return Err(Error::Contract(format!("pick_per_row col {bad} out of range")));
        }
        let data: Vec<f64> = ids.iter().enumerate().map(|(i, &c)| ts.at2(i, c)).collect();
        let out = Tensor::from_vec(vec![ids.len()], data)?;
        Ok(self.push(out, Op::PickPerRow { src, ids: ids.to_vec() }))
    }

    // ---- backward ----

    /// Propagate `d(loss)/d(node)` to every node. `loss` must be scalar;
    /// a second call on the same tape is a contract error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.spent {
            return Err(Error::Contract(
                "backward called twice on one tape; rebuild the forward pass first".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss handle does not belong to this tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.spent = true;

        let n = self.nodes.len();
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|nd| vec![0.0; nd.value.numel()]).collect();
        grads[loss.0][0] = 1.0;

        for i in (0..n).rev() {
            // Move this node's grad out so input grads can be mutated freely;
            // restored after the match.
            let g = std::mem::take(&mut grads[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    axpy(&mut grads[a.0], &g, 1.0);
                    axpy(&mut grads[b.0], &g, 1.0);
                }
                Op::AddBias(m, bias) => {
                    axpy(&mut grads[m.0], &g, 1.0);
                    let ncols = self.nodes[bias.0].value.numel();
                    for (j, &gv) in g.iter().enumerate() {
                        grads[bias.0][j % ncols] += gv;
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    let da: Vec<f64> = zip_map(&g, vb, |gv, y| gv * y);
                    let db: Vec<f64> = zip_map(&g, va, |gv, x| gv * x);
                    axpy(&mut grads[a.0], &da, 1.0);
                    axpy(&mut grads[b.0], &db, 1.0);
                }
                Op::Scale(a, c) => {
                    axpy(&mut grads[a.0], &g, *c);
                }
                Op::LogAddExp(a, b) => {
                    let out = node.value.data();
                    let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    for j in 0..g.len() {
                        if out[j] == f64::NEG_INFINITY {
                            continue;
                        }
                        grads[a.0][j] += g[j] * (va[j] - out[j]).exp();
                        grads[b.0][j] += g[j] * (vb[j] - out[j]).exp();
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, nn) = (ta.rows(), ta.cols(), tb.cols());
                    // dA = G * B^T, dB = A^T * G
                    let bt = kernels::transpose(tb.data(), k, nn);
                    let da = kernels::matmul(&g, &bt, m, nn, k);
                    let at = kernels::transpose(ta.data(), m, k);
                    let db = kernels::matmul(&at, &g, k, m, nn);
                    axpy(&mut grads[a.0], &da, 1.0);
                    axpy(&mut grads[b.0], &db, 1.0);
                }
                Op::Transpose(a) => {
                    let out_shape = node.value.shape();
                    let gt = kernels::transpose(&g, out_shape[0], out_shape[1]);
                    axpy(&mut grads[a.0], &gt, 1.0);
                }
                Op::Reshape(a) => {
                    axpy(&mut grads[a.0], &g, 1.0);
                }
                Op::Concat { axis, parts } => match (node.value.ndim(), *axis) {
                    (_, 0) => {
                        let mut off = 0;
                        for &p in parts {
                            let len = self.nodes[p.0].value.numel();
                            axpy(&mut grads[p.0], &g[off..off + len], 1.0);
                            off += len;
                        }
                    }
                    (2, 1) => {
                        let rows = node.value.rows();
                        let total = node.value.cols();
                        let mut col_off = 0;
                        for &p in parts {
                            let pc = self.nodes[p.0].value.cols();
                            for r in 0..rows {
                                for cc in 0..pc {
                                    grads[p.0][r * pc + cc] += g[r * total + col_off + cc];
                                }
                            }
                            col_off += pc;
                        }
                    }
                    _ => unreachable!("validated at forward"),
                },
                Op::Slice { src, start, len } => {
                    let src_shape = self.nodes[src.0].value.shape().to_vec();
                    match src_shape.len() {
                        1 => {
                            for j in 0..len[0] {
                                grads[src.0][start[0] + j] += g[j];
                            }
                        }
                        2 => {
                            let cols = src_shape[1];
                            for r in 0..len[0] {
                                for c in 0..len[1] {
                                    grads[src.0][(start[0] + r) * cols + start[1] + c] +=
                                        g[r * len[1] + c];
                                }
                            }
                        }
                        _ => unreachable!("validated at forward"),
                    }
                }
                Op::Relu(a) => {
                    let x = self.nodes[a.0].value.data();
                    for j in 0..g.len() {
                        if x[j] > 0.0 {
                            grads[a.0][j] += g[j];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let s = node.value.data();
                    for j in 0..g.len() {
                        grads[a.0][j] += g[j] * s[j] * (1.0 - s[j]);
                    }
                }
                Op::Tanh(a) => {
                    let t = node.value.data();
                    for j in 0..g.len() {
                        grads[a.0][j] += g[j] * (1.0 - t[j] * t[j]);
                    }
                }
                Op::Softmax { src, axis } => {
                    let s = node.value.data();
                    let (outer, lane, inner) = lane_split(node.value.shape(), *axis).unwrap();
                    for o in 0..outer {
                        for ii in 0..inner {
                            let mut dot = 0.0;
                            for l in 0..lane {
                                let idx = (o * lane + l) * inner + ii;
                                dot += g[idx] * s[idx];
                            }
                            for l in 0..lane {
                                let idx = (o * lane + l) * inner + ii;
                                grads[src.0][idx] += s[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax { src, axis } => {
                    let out = node.value.data();
                    let (outer, lane, inner) = lane_split(node.value.shape(), *axis).unwrap();
                    for o in 0..outer {
                        for ii in 0..inner {
                            let mut gsum = 0.0;
                            for l in 0..lane {
                                gsum += g[(o * lane + l) * inner + ii];
                            }
                            for l in 0..lane {
                                let idx = (o * lane + l) * inner + ii;
                                grads[src.0][idx] += g[idx] - out[idx].exp() * gsum;
                            }
                        }
                    }
                }
                Op::LogSumExp { src, axis } => {
                    let x = self.nodes[src.0].value.data();
                    let out = node.value.data();
                    let (outer, lane, inner) = lane_split(self.nodes[src.0].value.shape(), *axis).unwrap();
                    for o in 0..outer {
                        for ii in 0..inner {
                            let ov = out[o * inner + ii];
                            if ov == f64::NEG_INFINITY {
                                continue;
                            }
                            let gv = g[o * inner + ii];
                            for l in 0..lane {
                                let idx = (o * lane + l) * inner + ii;
                                grads[src.0][idx] += gv * (x[idx] - ov).exp();
                            }
                        }
                    }
                }
                Op::LayerNorm { src, gain, bias, eps } => {
                    let x = self.nodes[src.0].value.data();
                    let gw = self.nodes[gain.0].value.data();
                    let d = self.nodes[gain.0].value.numel();
                    let lanes = x.len() / d;
                    for v in 0..lanes {
                        let xs = &x[v * d..(v + 1) * d];
                        let gs = &g[v * d..(v + 1) * d];
                        let mean = xs.iter().sum::<f64>() / d as f64;
                        let var = xs.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xs.iter().map(|&a| (a - mean) * inv).collect();
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            grads[gain.0][j] += gs[j] * xhat[j];
                            grads[bias.0][j] += gs[j];
                            dxhat[j] = gs[j] * gw[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            grads[src.0][v * d + j] +=
                                inv / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                }
                Op::Conv2d { src, kernel, bias, stride, pad } => {
                    let ts = &self.nodes[src.0].value;
                    let tk = &self.nodes[kernel.0].value;
                    let (c_in, h, w) = (ts.shape()[0], ts.shape()[1], ts.shape()[2]);
                    let (c_out, kh, kw) = (tk.shape()[0], tk.shape()[2], tk.shape()[3]);
                    let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                    let x = ts.data();
                    let kk = tk.data();
                    let (stride, pad) = (*stride, *pad);
                    for co in 0..c_out {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[co * oh * ow + oy * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                grads[bias.0][co] += gv;
                                for ci in 0..c_in {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = ci * h * w + iy as usize * w + ix as usize;
                                            let ki = ((co * c_in + ci) * kh + ky) * kw + kx;
                                            grads[kernel.0][ki] += gv * x[xi];
                                            grads[src.0][xi] += gv * kk[ki];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Conv1dCausal { src, kernel, bias } => {
                    let ts = &self.nodes[src.0].value;
                    let tk = &self.nodes[kernel.0].value;
                    let (t_len, c_in) = (ts.rows(), ts.cols());
                    let (c_out, kw) = (tk.shape()[0], tk.shape()[2]);
                    let x = ts.data();
                    let kk = tk.data();
                    for t in 0..t_len {
                        for co in 0..c_out {
                            let gv = g[t * c_out + co];
                            if gv == 0.0 {
                                continue;
                            }
                            grads[bias.0][co] += gv;
                            for j in 0..kw {
                                let tt = t as isize - (kw - 1) as isize + j as isize;
                                if tt < 0 {
                                    continue;
                                }
                                for ci in 0..c_in {
                                    let xi = tt as usize * c_in + ci;
                                    let ki = (co * c_in + ci) * kw + j;
                                    grads[kernel.0][ki] += gv * x[xi];
                                    grads[src.0][xi] += gv * kk[ki];
                                }
                            }
                        }
                    }
                }
                Op::MaxPool2d { src, argmax } => {
                    for (o, &idx) in argmax.iter().enumerate() {
                        grads[src.0][idx] += g[o];
                    }
                }
                Op::MergeChannels { src } => {
                    let ts = &self.nodes[src.0].value;
                    let (c, h, w) = (ts.shape()[0], ts.shape()[1], ts.shape()[2]);
                    for ci in 0..c {
                        for hh in 0..h {
                            for ww in 0..w {
                                grads[src.0][ci * h * w + hh * w + ww] +=
                                    g[hh * (c * w) + ci * w + ww];
                            }
                        }
                    }
                }
                Op::GatherRows { src, ids } => {
                    let cols = self.nodes[src.0].value.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            grads[src.0][id * cols + c] += g[r * cols + c];
                        }
                    }
                }
                Op::GatherRowElems { src, row, ids } => {
                    let cols = self.nodes[src.0].value.cols();
                    for (j, &id) in ids.iter().enumerate() {
                        grads[src.0][row * cols + id] += g[j];
                    }
                }
                Op::PickPerRow { src, ids } => {
                    let cols = self.nodes[src.0].value.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        grads[src.0][r * cols + id] += g[r];
                    }
                }
                Op::SumAll(a) => {
                    for gv in grads[a.0].iter_mut() {
                        *gv += g[0];
                    }
                }
                Op::Dropout { src, mask } => {
                    for j in 0..g.len() {
                        grads[src.0][j] += g[j] * mask[j];
                    }
                }
            }
            grads[i] = g;
        }

        for (node, gv) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = Some(gv);
        }
        Ok(())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::DimMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `dst += alpha * src`
fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Decompose a shape around `axis` into (outer, lane, inner) extents.
fn lane_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Contract(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn for_each_lane(data: &mut [f64], outer: usize, lane: usize, inner: usize, f: impl Fn(&mut [f64])) {
    let mut buf = vec![0.0; lane];
    for o in 0..outer {
        for i in 0..inner {
            if inner == 1 {
                let s = o * lane;
                f(&mut data[s..s + lane]);
            } else {
                for l in 0..lane {
                    buf[l] = data[(o * lane + l) * inner + i];
                }
                f(&mut buf);
                for l in 0..lane {
                    data[(o * lane + l) * inner + i] = buf[l];
                }
            }
        }
    }
}
