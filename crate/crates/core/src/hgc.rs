//! Multi-order hypergraph convolution.
//!
//! Each order `j` contributes `ReLU(Â_j X W_j)` per frame, with
//! `Â = D^{-1/2} H B^{-1} Hᵀ D^{-1/2}` built from the incidence matrix `H`,
//! node degrees `D` and hyperedge sizes `B`. The per-order outputs are summed
//! (or averaged, when configured).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};
use crate::skeleton::HypergraphSpec;

/// How the per-order outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    #[default]
    Sum,
    Mean,
}

impl Aggregate {
    fn factor(self, heads: usize) -> f64 {
        match self {
            Aggregate::Sum => 1.0,
            Aggregate::Mean => 1.0 / heads as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub matrix: DMatrix<f64>,
    pub source_order: u8,
    /// Row-major copy of `matrix` for the convolution kernels.
    flat: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn new(matrix: DMatrix<f64>, source_order: u8) -> Self {
        let n = matrix.nrows();
        let flat = (0..n * n).map(|k| matrix[(k / n, k % n)]).collect();
        NormalizedAdjacency { matrix, source_order, flat }
    }

    pub fn nodes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn row_major(&self) -> &[f64] {
        &self.flat
    }
}

/// Diagonal node-degree matrix `D` and hyperedge-degree matrix `B`.
pub fn degree_matrices(h: &HypergraphSpec) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d: Vec<f64> = (0..h.node_count()).map(|i| h.node_degree(i) as f64).collect();
    let b: Vec<f64> = (0..h.hyperedge_count()).map(|e| h.hyperedge_size(e) as f64).collect();
    if let Some(i) = d.iter().position(|&v| v == 0.0) {
        return Err(Error::IsolatedElement { kind: "node", index: i });
    }
    if let Some(e) = b.iter().position(|&v| v == 0.0) {
        return Err(Error::IsolatedElement { kind: "hyperedge", index: e });
    }
    Ok((DMatrix::from_diagonal(&DVector::from_vec(d)), DMatrix::from_diagonal(&DVector::from_vec(b))))
}

pub fn normalized_adjacency(h: &HypergraphSpec) -> Result<NormalizedAdjacency> {
    let (d, b) = degree_matrices(h)?;
    let hm = h.matrix();
    let d_inv_sqrt = DMatrix::from_diagonal(&d.diagonal().map(|v| 1.0 / v.sqrt()));
    let b_inv = DMatrix::from_diagonal(&b.diagonal().map(|v| 1.0 / v));
    let a = &d_inv_sqrt * &hm * b_inv * hm.transpose() * &d_inv_sqrt;
    // exact symmetry; the product above can differ in the last ulp
    let sym = (&a + a.transpose()) * 0.5;
    Ok(NormalizedAdjacency::new(sym, h.order))
}

/// The adjacency set a layer propagates over, one per hypergraph order.
pub type AdjacencySet = Arc<Vec<NormalizedAdjacency>>;

pub fn adjacency_set(hypergraphs: &[HypergraphSpec]) -> Result<AdjacencySet> {
    Ok(Arc::new(hypergraphs.iter().map(normalized_adjacency).collect::<Result<Vec<_>>>()?))
}

/// Weights of one HGC layer together with the adjacencies it uses.
#[derive(Debug, Clone)]
pub struct HgcLayerParams {
    pub weights: Vec<Tensor>,
    pub adjacencies: AdjacencySet,
    pub aggregate: Aggregate,
}

impl HgcLayerParams {
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.adjacencies.len() || self.weights.is_empty() {
            return Err(Error::Contract(format!(
                "{} weight matrices for {} adjacencies",
                self.weights.len(),
                self.adjacencies.len()
            )));
        }
        let shape = &self.weights[0].shape;
        if shape.len() != 2 || self.weights.iter().any(|w| &w.shape != shape) {
            return Err(Error::Contract("HGC weights must share one 2-D shape".into()));
        }
        Ok(())
    }
}

/// Per-order pre-activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HgcCache {
    pub preact: Vec<Tensor>,
}

fn check_input(x: &Tensor, weights: &[&Tensor], adj: &[NormalizedAdjacency]) -> Result<(usize, usize, usize, usize)> {
    if x.shape.len() != 3 {
        return Err(Error::Contract(format!("HGC input must be T x N x C, got {:?}", x.shape)));
    }
    let (t, n, cin) = (x.shape[0], x.shape[1], x.shape[2]);
    if weights.len() != adj.len() || weights.is_empty() {
        return Err(Error::Contract("HGC needs one weight matrix per adjacency".into()));
    }
    let cout = weights[0].shape.get(1).copied().unwrap_or(0);
    for (w, a) in weights.iter().zip(adj) {
        if w.shape != [cin, cout] {
            return Err(Error::Contract(format!("HGC weight {:?} does not map {cin} -> {cout}", w.shape)));
        }
        if a.nodes() != n {
            return Err(Error::Contract(format!("adjacency over {} nodes, input has {n}", a.nodes())));
        }
    }
    Ok((t, n, cin, cout))
}

/// `Σ_j ReLU(Â_j X_t W_j)` for every frame `t`.
pub fn forward_kernel(
    x: &Tensor,
    weights: &[&Tensor],
    adj: &[NormalizedAdjacency],
    aggregate: Aggregate,
) -> Result<(Tensor, HgcCache)> {
    let (t, n, cin, cout) = check_input(x, weights, adj)?;
    let scale = aggregate.factor(weights.len());
    let mut out = Tensor::zeros(&[t, n, cout]);
    let mut preact = Vec::with_capacity(weights.len());
    let mut xw = vec![0.0; t * n * cout];
    for (w, a) in weights.iter().zip(adj) {
        xw.iter_mut().for_each(|v| *v = 0.0);
        matmul_acc(&x.data, &w.data, &mut xw, t * n, cin, cout);
        let mut z = Tensor::zeros(&[t, n, cout]);
        for f in 0..t {
            let range = f * n * cout..(f + 1) * n * cout;
            matmul_acc(a.row_major(), &xw[range.clone()], &mut z.data[range], n, n, cout);
        }
        for (o, &zv) in out.data.iter_mut().zip(&z.data) {
            if zv > 0.0 {
                *o += scale * zv;
            }
        }
        preact.push(z);
    }
    Ok((out, HgcCache { preact }))
}

/// Gradients of the layer output with respect to the input and each weight.
pub fn backward_kernel(
    x: &Tensor,
    weights: &[&Tensor],
    adj: &[NormalizedAdjacency],
    aggregate: Aggregate,
    cache: &HgcCache,
    upstream: &Tensor,
) -> (Tensor, Vec<Tensor>) {
    let (t, n, cin) = (x.shape[0], x.shape[1], x.shape[2]);
    let cout = weights[0].shape[1];
    let scale = aggregate.factor(weights.len());
    let mut dx = Tensor::zeros(&x.shape);
    let mut dws = Vec::with_capacity(weights.len());
    let mut g = vec![0.0; t * n * cout];
    let mut ag = vec![0.0; t * n * cout];
    for ((w, a), z) in weights.iter().zip(adj).zip(&cache.preact) {
        for ((gv, &uv), &zv) in g.iter_mut().zip(&upstream.data).zip(&z.data) {
            *gv = if zv > 0.0 { scale * uv } else { 0.0 };
        }
        // Â is symmetric, so Âᵀ G = Â G.
        ag.iter_mut().for_each(|v| *v = 0.0);
        for f in 0..t {
            let range = f * n * cout..(f + 1) * n * cout;
            matmul_acc(a.row_major(), &g[range.clone()], &mut ag[range], n, n, cout);
        }
        let mut dw = Tensor::zeros(&[cin, cout]);
        matmul_at_b_acc(&x.data, &ag, &mut dw.data, t * n, cin, cout);
        matmul_a_bt_acc(&ag, &w.data, &mut dx.data, t * n, cout, cin);
        dws.push(dw);
    }
    (dx, dws)
}

/// Layer output for `x` of shape `T x N x C_in`.
pub fn hgc_forward(x: &Tensor, params: &HgcLayerParams) -> Result<(Tensor, HgcCache)> {
    params.validate()?;
    let ws: Vec<&Tensor> = params.weights.iter().collect();
    forward_kernel(x, &ws, &params.adjacencies, params.aggregate)
}

/// Input gradient and one gradient per weight matrix, given the gradient of
/// some scalar with respect to the layer output.
pub fn hgc_backward(x: &Tensor, params: &HgcLayerParams, cache: &HgcCache, upstream: &Tensor) -> (Tensor, Vec<Tensor>) {
    let ws: Vec<&Tensor> = params.weights.iter().collect();
    backward_kernel(x, &ws, &params.adjacencies, params.aggregate, cache, upstream)
}
