//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter through
//! [`Graph::param`], which returns one shared leaf per parameter so repeated
//! uses accumulate their gradients.

use std::collections::HashMap;

use super::losses;
use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};
use crate::error::{Error, Result};
use crate::hgc::{self, Aggregate, AdjacencySet, HgcCache};
use crate::skeleton::W_MIN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Hgc { x: Var, ws: Vec<Var>, adj: AdjacencySet, aggregate: Aggregate, cache: HgcCache },
    TemporalConv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    MeanAxis0(Var),
    PoolTN(Var),
    ConcatRows(Vec<Var>),
    BroadcastRows(Var),
    Stack(Vec<Var>),
    L2Normalize(Var),
    PairSum { a: Var, b: Var, bias: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, cols: Vec<f64> },
    AdaptiveAvgPool2d(Var),
    TriFactor { raw: Var, lower: bool, init_scale: f64, delta: f64 },
    Transform { q: Var, xy: Var },
    Reshape(Var),
    SupCon { f: Var, grad: Tensor },
    FrobNorm(Var),
    SpectralNorm { x: Var, grad: Tensor },
    ConcatLast(Vec<Var>),
    BatchNormRows { x: Var, inv_std: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor>>,
}

/// Output length of a padded strided 1-D window.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

fn adaptive_bins(len: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out).map(|i| (i * len / out, ((i + 1) * len).div_ceil(out))).collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf that does not belong to a parameter store.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Var {
        self.param(store, store.expect(name))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&v| f(v)).collect() };
        self.push(out, op, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "elementwise shapes differ");
        let out = Tensor { shape: ta.shape.clone(), data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect() };
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sum of several same-shape values.
    pub fn add_all(&mut self, xs: &[Var]) -> Var {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.shape.len() == 2 && tb.shape.len() == 2 && ta.shape[1] == tb.shape[0], "matmul {:?} x {:?}", ta.shape, tb.shape);
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = Tensor::zeros(&[m, n]);
        matmul_acc(&ta.data, &tb.data, &mut out.data, m, k, n);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `x W + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let cin = *tx.shape.last().expect("linear input has an axis");
        assert!(tw.shape.len() == 2 && tw.shape[0] == cin, "linear {:?} x {:?}", tx.shape, tw.shape);
        let cout = tw.shape[1];
        let m = tx.len() / cin;
        let mut shape = tx.shape.clone();
        *shape.last_mut().unwrap() = cout;
        let mut out = Tensor::zeros(&shape);
        if let Some(b) = b {
            let tb = &self.value(b).data;
            assert_eq!(tb.len(), cout);
            for row in out.data.chunks_mut(cout) {
                row.copy_from_slice(tb);
            }
        }
        let (tx, tw) = (self.value(x), self.value(w));
        matmul_acc(&tx.data, &tw.data, &mut out.data, m, cin, cout);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    /// Multi-order hypergraph convolution of a `T x N x C` input.
    pub fn hgc(&mut self, x: Var, ws: &[Var], adj: &AdjacencySet, aggregate: Aggregate) -> Result<Var> {
        let weights: Vec<&Tensor> = ws.iter().map(|&w| self.value(w)).collect();
        let (out, cache) = hgc::forward_kernel(self.value(x), &weights, adj, aggregate)?;
        let mut inputs = vec![x];
        inputs.extend_from_slice(ws);
        Ok(self.push(out, Op::Hgc { x, ws: ws.to_vec(), adj: adj.clone(), aggregate, cache }, &inputs))
    }

    /// Convolution along the first axis of `T x N x C_in` with weights
    /// `K x C_in x C_out`, applied independently per node.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.shape.len() != 3 || tw.shape.len() != 3 || tw.shape[1] != tx.shape[2] {
            return Err(Error::Contract(format!("temporal conv {:?} with weights {:?}", tx.shape, tw.shape)));
        }
        let (t, n, cin) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (k, cout) = (tw.shape[0], tw.shape[2]);
        if t + 2 * pad < k {
            return Err(Error::Contract(format!("sequence of {t} frames shorter than kernel {k}")));
        }
        let to = conv_out_len(t, k, stride, pad);
        let mut out = Tensor::zeros(&[to, n, cout]);
        if let Some(b) = b {
            let tb = &self.value(b).data;
            for row in out.data.chunks_mut(cout) {
                row.copy_from_slice(tb);
            }
        }
        let (tx, tw) = (self.value(x), self.value(w));
        for o in 0..to {
            for kk in 0..k {
                let src = (o * stride + kk) as isize - pad as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let src = src as usize;
                matmul_acc(
                    &tx.data[src * n * cin..(src + 1) * n * cin],
                    &tw.data[kk * cin * cout..(kk + 1) * cin * cout],
                    &mut out.data[o * n * cout..(o + 1) * n * cout],
                    n,
                    cin,
                    cout,
                );
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::TemporalConv { x, w, b, stride, pad }, &inputs))
    }

    /// Mean over the first axis.
    pub fn mean_axis0(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let rows = t.shape[0];
        let inner = t.len() / rows;
        let mut out = Tensor::zeros(&t.shape[1..]);
        for r in t.data.chunks(inner) {
            for (o, v) in out.data.iter_mut().zip(r) {
                *o += v;
            }
        }
        out.data.iter_mut().for_each(|v| *v /= rows as f64);
        self.push(out, Op::MeanAxis0(x), &[x])
    }

    /// Global average over the first two axes of `T x N x C`.
    pub fn pool_tn(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = *t.shape.last().unwrap();
        let rows = t.len() / c;
        let mut out = Tensor::zeros(&[c]);
        for r in t.data.chunks(c) {
            for (o, v) in out.data.iter_mut().zip(r) {
                *o += v;
            }
        }
        out.data.iter_mut().for_each(|v| *v /= rows as f64);
        self.push(out, Op::PoolTN(x), &[x])
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let tail = self.value(xs[0]).shape[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            assert_eq!(t.shape[1..], tail[..], "concat trailing shapes differ");
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(Tensor::new(&shape, data), Op::ConcatRows(xs.to_vec()), xs)
    }

    /// Repeats a vector as `n` rows.
    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Var {
        let t = self.value(v);
        assert_eq!(t.shape.len(), 1);
        let c = t.len();
        let data = t.data.iter().copied().cycle().take(n * c).collect();
        self.push(Tensor::new(&[n, c], data), Op::BroadcastRows(v), &[v])
    }

    /// Stacks same-shape values along a new first axis.
    pub fn stack(&mut self, xs: &[Var]) -> Var {
        let inner = self.value(xs[0]).shape.clone();
        let mut data = Vec::with_capacity(xs.len() * self.value(xs[0]).len());
        for &x in xs {
            assert_eq!(self.value(x).shape, inner, "stack shapes differ");
            data.extend_from_slice(&self.value(x).data);
        }
        let mut shape = vec![xs.len()];
        shape.extend(inner);
        self.push(Tensor::new(&shape, data), Op::Stack(xs.to_vec()), xs)
    }

    /// Scales a vector to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let norm = t.norm();
        if !(norm > 1e-12) || !norm.is_finite() {
            return Err(Error::Normalization);
        }
        let out = t.scale(1.0 / norm);
        Ok(self.push(out, Op::L2Normalize(x), &[x]))
    }

    /// Pairwise map `out[c, i, j] = a[i, c] + b[j, c] + bias[c]` from `M x C`
    /// row features.
    pub fn pair_sum(&mut self, a: Var, b: Var, bias: Var) -> Var {
        let (ta, tb, tc) = (self.value(a), self.value(b), self.value(bias));
        assert_eq!(ta.shape, tb.shape);
        let (m, c) = (ta.shape[0], ta.shape[1]);
        assert_eq!(tc.shape, [c]);
        let mut out = Tensor::zeros(&[c, m, m]);
        for ch in 0..c {
            for i in 0..m {
                let ai = ta.data[i * c + ch] + tc.data[ch];
                let row = &mut out.data[(ch * m + i) * m..(ch * m + i + 1) * m];
                for (j, o) in row.iter_mut().enumerate() {
                    *o = ai + tb.data[j * c + ch];
                }
            }
        }
        self.push(out, Op::PairSum { a, b, bias }, &[a, b, bias])
    }

    /// 2-D convolution of a `C_in x H x W` map with weights
    /// `C_out x C_in x kh x kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.shape.len() != 3 || tw.shape.len() != 4 || tw.shape[1] != tx.shape[0] {
            return Err(Error::Contract(format!("conv2d {:?} with weights {:?}", tx.shape, tw.shape)));
        }
        let (ci, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let (co, kh, kw) = (tw.shape[0], tw.shape[2], tw.shape[3]);
        let (ho, wo) = (conv_out_len(h, kh, stride, pad), conv_out_len(wd, kw, stride, pad));
        let patch = ci * kh * kw;
        let mut cols = vec![0.0; ho * wo * patch];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (oy * wo + ox) * patch;
                for c in 0..ci {
                    for ky in 0..kh {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y as usize >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if xx < 0 || xx as usize >= wd {
                                continue;
                            }
                            cols[base + (c * kh + ky) * kw + kx] = tx.data[(c * h + y as usize) * wd + xx as usize];
                        }
                    }
                }
            }
        }
        let mut out = Tensor::zeros(&[co, ho, wo]);
        if let Some(b) = b {
            let tb = &self.value(b).data;
            for (c, plane) in out.data.chunks_mut(ho * wo).enumerate() {
                plane.iter_mut().for_each(|v| *v = tb[c]);
            }
        }
        matmul_a_bt_acc(&self.value(w).data, &cols, &mut out.data, co, patch, ho * wo);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad, cols }, &inputs))
    }

    /// Average pooling of a `C x H x W` map onto an `oh x ow` grid with
    /// possibly overlapping bins `[floor(i H / oh), ceil((i + 1) H / oh))`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let t = self.value(x);
        let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        let (by, bx) = (adaptive_bins(h, oh), adaptive_bins(w, ow));
        for ch in 0..c {
            for (i, &(y0, y1)) in by.iter().enumerate() {
                for (j, &(x0, x1)) in bx.iter().enumerate() {
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += t.data[(ch * h + y) * w + xx];
                        }
                    }
                    out.data[(ch * oh + i) * ow + j] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        self.push(out, Op::AdaptiveAvgPool2d(x), &[x])
    }

    /// Triangular factor `mask(I + init_scale * raw)` with every diagonal entry
    /// pushed to magnitude at least `delta`.
    pub fn tri_factor(&mut self, raw: Var, lower: bool, init_scale: f64, delta: f64) -> Var {
        let t = self.value(raw);
        assert_eq!(t.shape, [3, 3]);
        let mut out = Tensor::zeros(&[3, 3]);
        for r in 0..3 {
            for c in 0..3 {
                let keep = if lower { c <= r } else { c >= r };
                if !keep {
                    continue;
                }
                let mut v = init_scale * t.data[r * 3 + c] + if r == c { 1.0 } else { 0.0 };
                if r == c {
                    let sign = if v < 0.0 { -1.0 } else { 1.0 };
                    v = sign * v.abs().max(delta);
                }
                out.data[r * 3 + c] = v;
            }
        }
        self.push(out, Op::TriFactor { raw, lower, init_scale, delta }, &[raw])
    }

    /// Applies the homography `q` to every `(x, y)` of a `T x N x 2` array and
    /// dehomogenizes.
    pub fn transform(&mut self, q: Var, xy: Var) -> Result<Var> {
        let (tq, tp) = (self.value(q), self.value(xy));
        assert_eq!(tq.shape, [3, 3]);
        assert_eq!(*tp.shape.last().unwrap(), 2);
        let qd = &tq.data;
        let mut out = Tensor::zeros(&tp.shape);
        for (k, p) in tp.data.chunks(2).enumerate() {
            let w = qd[6] * p[0] + qd[7] * p[1] + qd[8];
            if w.abs() < W_MIN || !w.is_finite() {
                let n = tp.shape[tp.shape.len() - 2];
                return Err(Error::DegenerateDepth { frame: k / n, joint: k % n, w });
            }
            out.data[2 * k] = (qd[0] * p[0] + qd[1] * p[1] + qd[2]) / w;
            out.data[2 * k + 1] = (qd[3] * p[0] + qd[4] * p[1] + qd[5]) / w;
        }
        Ok(self.push(out, Op::Transform { q, xy }, &[q, xy]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Supervised contrastive loss of `n x d` features.
    pub fn supcon(&mut self, f: Var, labels: &[usize], tau: f64) -> Result<Var> {
        let (loss, grad) = losses::supcon(self.value(f), labels, tau)?;
        Ok(self.push(Tensor::scalar(loss), Op::SupCon { f, grad }, &[f]))
    }

    /// Frobenius norm; its subgradient at zero is taken as zero.
    pub fn frob_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).norm();
        self.push(Tensor::scalar(n), Op::FrobNorm(x), &[x])
    }

    /// Largest singular value of a matrix; the gradient is `u₁ v₁ᵀ`.
    pub fn spectral_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape.len(), 2);
        let (r, c) = (t.shape[0], t.shape[1]);
        let m = nalgebra::DMatrix::from_row_slice(r, c, &t.data);
        let svd = m.svd(true, true);
        let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
        let k = svd.singular_values.imax();
        let sigma = svd.singular_values[k];
        let mut grad = Tensor::zeros(&[r, c]);
        for i in 0..r {
            for j in 0..c {
                grad.data[i * c + j] = u[(i, k)] * vt[(k, j)];
            }
        }
        self.push(Tensor::scalar(sigma), Op::SpectralNorm { x, grad }, &[x])
    }

    /// Concatenation along the last axis of values with equal leading shapes.
    pub fn concat_last(&mut self, xs: &[Var]) -> Var {
        let lead = self.value(xs[0]).shape[..self.value(xs[0]).shape.len() - 1].to_vec();
        let widths: Vec<usize> = xs
            .iter()
            .map(|&x| {
                let s = self.shape(x);
                assert_eq!(s[..s.len() - 1], lead[..], "concat leading shapes differ");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor::new(&shape, data), Op::ConcatLast(xs.to_vec()), xs)
    }

    /// Column-wise standardization of a `B x D` batch with its own
    /// statistics: `(x - mean) / sqrt(var + eps)`. Also returns the column
    /// means and (biased) variances.
    pub fn batch_norm_rows(&mut self, x: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let t = self.value(x);
        assert_eq!(t.shape.len(), 2, "batch_norm_rows expects B x D");
        let (b, d) = (t.shape[0], t.shape[1]);
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for r in 0..b {
            for c in 0..d {
                mean[c] += t.data[r * d + c] / b as f64;
            }
        }
        for r in 0..b {
            for c in 0..d {
                var[c] += (t.data[r * d + c] - mean[c]).powi(2) / b as f64;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let data = t.data.iter().enumerate().map(|(k, v)| (v - mean[k % d]) * inv_std[k % d]).collect();
        let out = Tensor::new(&[b, d], data);
        (self.push(out, Op::BatchNormRows { x, inv_std }, &[x]), mean, var)
    }

    /// Scales every row of a `B x D` matrix to unit length.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        assert_eq!(t.shape.len(), 2, "l2_normalize_rows expects B x D");
        let d = t.shape[1];
        let norms: Vec<f64> = t.data.chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        if norms.iter().any(|n| !(*n > 1e-12) || !n.is_finite()) {
            return Err(Error::Normalization);
        }
        let data = t.data.iter().enumerate().map(|(k, v)| v / norms[k / d]).collect();
        let out = Tensor::new(&t.shape.clone(), data);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&mut self, out: Var) {
        assert_eq!(self.value(out).len(), 1, "backward() needs a scalar");
        let seed = Tensor::filled(&self.value(out).shape, 1.0);
        self.backward_with(out, seed);
    }

    /// Back-propagates an explicit output gradient.
    pub fn backward_with(&mut self, out: Var, seed: Tensor) {
        assert_eq!(seed.shape, self.value(out).shape);
        self.grads = vec![None; self.nodes.len()];
        self.grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter that took part in the last backward pass.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .map(|(&id, &v)| (id, self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v)))))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) {
        let node_value = &self.nodes[idx].value;
        let mut pending: Vec<(Var, Tensor)> = Vec::new();
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let map = |t: &Tensor, f: &dyn Fn(usize, f64) -> f64| Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().enumerate().map(|(k, &v)| f(k, v)).collect(),
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                pending.push((*a, g.clone()));
                pending.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                pending.push((*a, g.clone()));
                pending.push((*b, g.scale(-1.0)));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                pending.push((*a, map(g, &|k, gv| gv * tb.data[k])));
                pending.push((*b, map(g, &|k, gv| gv * ta.data[k])));
            }
            Op::Affine(x, s) => pending.push((*x, g.scale(*s))),
            Op::Relu(x) => {
                let tx = val(*x);
                pending.push((*x, map(g, &|k, gv| if tx.data[k] > 0.0 { gv } else { 0.0 })));
            }
            Op::Sigmoid(x) => {
                pending.push((*x, map(g, &|k, gv| {
                    let y = node_value.data[k];
                    gv * y * (1.0 - y)
                })));
            }
            Op::Square(x) => {
                let tx = val(*x);
                pending.push((*x, map(g, &|k, gv| 2.0 * gv * tx.data[k])));
            }
            Op::Sum(x) => pending.push((*x, Tensor::filled(&val(*x).shape, g.item()))),
            Op::Mean(x) => {
                let t = val(*x);
                pending.push((*x, Tensor::filled(&t.shape, g.item() / t.len() as f64)));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if needs(*a) {
                    let mut ga = Tensor::zeros(&ta.shape);
                    matmul_a_bt_acc(&g.data, &tb.data, &mut ga.data, m, n, k);
                    pending.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = Tensor::zeros(&tb.shape);
                    matmul_at_b_acc(&ta.data, &g.data, &mut gb.data, m, k, n);
                    pending.push((*b, gb));
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (cin, cout) = (tw.shape[0], tw.shape[1]);
                let m = tx.len() / cin;
                if needs(*x) {
                    let mut gx = Tensor::zeros(&tx.shape);
                    matmul_a_bt_acc(&g.data, &tw.data, &mut gx.data, m, cout, cin);
                    pending.push((*x, gx));
                }
                if needs(*w) {
                    let mut gw = Tensor::zeros(&tw.shape);
                    matmul_at_b_acc(&tx.data, &g.data, &mut gw.data, m, cin, cout);
                    pending.push((*w, gw));
                }
                if let Some(b) = b {
                    let mut gb = Tensor::zeros(&[cout]);
                    for row in g.data.chunks(cout) {
                        for (o, v) in gb.data.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    pending.push((*b, gb));
                }
            }
            Op::Hgc { x, ws, adj, aggregate, cache } => {
                let weights: Vec<&Tensor> = ws.iter().map(|&w| val(w)).collect();
                let (dx, dws) = hgc::backward_kernel(val(*x), &weights, adj, *aggregate, cache, g);
                pending.push((*x, dx));
                pending.extend(ws.iter().copied().zip(dws));
            }
            Op::TemporalConv { x, w, b, stride, pad } => {
                let (tx, tw) = (val(*x), val(*w));
                let (t, n, cin) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                let (k, cout) = (tw.shape[0], tw.shape[2]);
                let to = g.shape[0];
                let mut gx = needs(*x).then(|| Tensor::zeros(&tx.shape));
                let mut gw = needs(*w).then(|| Tensor::zeros(&tw.shape));
                for o in 0..to {
                    let go = &g.data[o * n * cout..(o + 1) * n * cout];
                    for kk in 0..k {
                        let src = (o * stride + kk) as isize - *pad as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let src = src as usize;
                        if let Some(gx) = gx.as_mut() {
                            matmul_a_bt_acc(
                                go,
                                &tw.data[kk * cin * cout..(kk + 1) * cin * cout],
                                &mut gx.data[src * n * cin..(src + 1) * n * cin],
                                n,
                                cout,
                                cin,
                            );
                        }
                        if let Some(gw) = gw.as_mut() {
                            matmul_at_b_acc(
                                &tx.data[src * n * cin..(src + 1) * n * cin],
                                go,
                                &mut gw.data[kk * cin * cout..(kk + 1) * cin * cout],
                                n,
                                cin,
                                cout,
                            );
                        }
                    }
                }
                pending.extend(gx.map(|t| (*x, t)));
                pending.extend(gw.map(|t| (*w, t)));
                if let Some(b) = b {
                    let mut gb = Tensor::zeros(&[cout]);
                    for row in g.data.chunks(cout) {
                        for (o, v) in gb.data.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    pending.push((*b, gb));
                }
            }
            Op::MeanAxis0(x) => {
                let t = val(*x);
                let rows = t.shape[0];
                let data = (0..rows).flat_map(|_| g.data.iter().map(move |v| v / rows as f64)).collect();
                pending.push((*x, Tensor::new(&t.shape, data)));
            }
            Op::PoolTN(x) => {
                let t = val(*x);
                let c = g.len();
                let rows = t.len() / c;
                let data = (0..rows).flat_map(|_| g.data.iter().map(move |v| v / rows as f64)).collect();
                pending.push((*x, Tensor::new(&t.shape, data)));
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let t = val(x);
                    pending.push((x, Tensor::new(&t.shape, g.data[offset..offset + t.len()].to_vec())));
                    offset += t.len();
                }
            }
            Op::BroadcastRows(v) => {
                let c = val(*v).len();
                let mut gv = Tensor::zeros(&[c]);
                for row in g.data.chunks(c) {
                    for (o, x) in gv.data.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                pending.push((*v, gv));
            }
            Op::Stack(xs) => {
                let inner = val(xs[0]).len();
                for (i, &x) in xs.iter().enumerate() {
                    pending.push((x, Tensor::new(&val(x).shape, g.data[i * inner..(i + 1) * inner].to_vec())));
                }
            }
            Op::L2Normalize(x) => {
                let tx = val(*x);
                let norm = tx.norm();
                let y = node_value;
                let dot: f64 = g.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
                pending.push((*x, map(g, &|k, gv| (gv - dot * y.data[k]) / norm)));
            }
            Op::PairSum { a, b, bias } => {
                let m = val(*a).shape[0];
                let c = val(*a).shape[1];
                let mut ga = Tensor::zeros(&[m, c]);
                let mut gb = Tensor::zeros(&[m, c]);
                let mut gc = Tensor::zeros(&[c]);
                for ch in 0..c {
                    for i in 0..m {
                        let row = &g.data[(ch * m + i) * m..(ch * m + i + 1) * m];
                        let s: f64 = row.iter().sum();
                        ga.data[i * c + ch] += s;
                        gc.data[ch] += s;
                        for (j, v) in row.iter().enumerate() {
                            gb.data[j * c + ch] += v;
                        }
                    }
                }
                pending.push((*a, ga));
                pending.push((*b, gb));
                pending.push((*bias, gc));
            }
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let (tx, tw) = (val(*x), val(*w));
                let (ci, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                let (co, kh, kw) = (tw.shape[0], tw.shape[2], tw.shape[3]);
                let (ho, wo) = (g.shape[1], g.shape[2]);
                let patch = ci * kh * kw;
                if needs(*w) {
                    let mut gw = Tensor::zeros(&tw.shape);
                    matmul_acc(&g.data, cols, &mut gw.data, co, ho * wo, patch);
                    pending.push((*w, gw));
                }
                if needs(*x) {
                    let mut gcols = vec![0.0; ho * wo * patch];
                    matmul_at_b_acc(&g.data, &tw.data, &mut gcols, co, ho * wo, patch);
                    let mut gx = Tensor::zeros(&tx.shape);
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let base = (oy * wo + ox) * patch;
                            for c in 0..ci {
                                for ky in 0..kh {
                                    let y = (oy * stride + ky) as isize - *pad as isize;
                                    if y < 0 || y as usize >= h {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let xx = (ox * stride + kx) as isize - *pad as isize;
                                        if xx < 0 || xx as usize >= wd {
                                            continue;
                                        }
                                        gx.data[(c * h + y as usize) * wd + xx as usize] += gcols[base + (c * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                    pending.push((*x, gx));
                }
                if let Some(b) = b {
                    let gb = Tensor::new(&[co], g.data.chunks(ho * wo).map(|p| p.iter().sum()).collect());
                    pending.push((*b, gb));
                }
            }
            Op::AdaptiveAvgPool2d(x) => {
                let t = val(*x);
                let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
                let (oh, ow) = (g.shape[1], g.shape[2]);
                let (by, bx) = (adaptive_bins(h, oh), adaptive_bins(w, ow));
                let mut gx = Tensor::zeros(&t.shape);
                for ch in 0..c {
                    for (i, &(y0, y1)) in by.iter().enumerate() {
                        for (j, &(x0, x1)) in bx.iter().enumerate() {
                            let share = g.data[(ch * oh + i) * ow + j] / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    gx.data[(ch * h + y) * w + xx] += share;
                                }
                            }
                        }
                    }
                }
                pending.push((*x, gx));
            }
            Op::TriFactor { raw, lower, init_scale, delta } => {
                let traw = val(*raw);
                let mut gr = Tensor::zeros(&[3, 3]);
                for r in 0..3 {
                    for c in 0..3 {
                        let keep = if *lower { c <= r } else { c >= r };
                        if !keep {
                            continue;
                        }
                        let k = r * 3 + c;
                        let pre = init_scale * traw.data[k] + if r == c { 1.0 } else { 0.0 };
                        let pass = r != c || pre.abs() > *delta;
                        if pass {
                            gr.data[k] = init_scale * g.data[k];
                        }
                    }
                }
                pending.push((*raw, gr));
            }
            Op::Transform { q, xy } => {
                let (tq, tp) = (val(*q), val(*xy));
                let qd = &tq.data;
                let mut gq = Tensor::zeros(&[3, 3]);
                let mut gp = needs(*xy).then(|| Tensor::zeros(&tp.shape));
                for (k, p) in tp.data.chunks(2).enumerate() {
                    let w = qd[6] * p[0] + qd[7] * p[1] + qd[8];
                    let (ox, oy) = (node_value.data[2 * k], node_value.data[2 * k + 1]);
                    let (gx, gy) = (g.data[2 * k], g.data[2 * k + 1]);
                    let du = gx / w;
                    let dv = gy / w;
                    let dw = -(gx * ox + gy * oy) / w;
                    let basis = [p[0], p[1], 1.0];
                    for c in 0..3 {
                        gq.data[c] += du * basis[c];
                        gq.data[3 + c] += dv * basis[c];
                        gq.data[6 + c] += dw * basis[c];
                    }
                    if let Some(gp) = gp.as_mut() {
                        gp.data[2 * k] += du * qd[0] + dv * qd[3] + dw * qd[6];
                        gp.data[2 * k + 1] += du * qd[1] + dv * qd[4] + dw * qd[7];
                    }
                }
                pending.push((*q, gq));
                pending.extend(gp.map(|t| (*xy, t)));
            }
            Op::Reshape(x) => pending.push((*x, g.clone().reshaped(&val(*x).shape))),
            Op::SupCon { f, grad } => pending.push((*f, grad.scale(g.item()))),
            Op::FrobNorm(x) => {
                let n = node_value.item();
                let s = if n > 0.0 { g.item() / n } else { 0.0 };
                pending.push((*x, val(*x).scale(s)));
            }
            Op::SpectralNorm { x, grad } => pending.push((*x, grad.scale(g.item()))),
            Op::ConcatLast(xs) => {
                let widths: Vec<usize> = xs.iter().map(|&x| *val(x).shape.last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&x, &w) in xs.iter().zip(&widths) {
                    let mut gx = Tensor::zeros(&val(x).shape);
                    for r in 0..rows {
                        gx.data[r * w..(r + 1) * w].copy_from_slice(&g.data[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    pending.push((x, gx));
                }
            }
            Op::BatchNormRows { x, inv_std } => {
                let y = node_value;
                let d = inv_std.len();
                let b = g.len() / d;
                let mut mg = vec![0.0; d];
                let mut mgy = vec![0.0; d];
                for k in 0..g.len() {
                    mg[k % d] += g.data[k] / b as f64;
                    mgy[k % d] += g.data[k] * y.data[k] / b as f64;
                }
                pending.push((*x, map(g, &|k, gv| inv_std[k % d] * (gv - mg[k % d] - y.data[k] * mgy[k % d]))));
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node_value;
                let d = g.len() / norms.len();
                let dots: Vec<f64> =
                    g.data.chunks(d).zip(y.data.chunks(d)).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum()).collect();
                pending.push((*x, map(g, &|k, gv| (gv - dots[k / d] * y.data[k]) / norms[k / d])));
            }
        }
        for (v, gv) in pending {
            self.accumulate(v, gv);
        }
    }
}
