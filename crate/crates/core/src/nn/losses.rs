//! Loss kernels with closed-form gradients.

use super::tensor::Tensor;
use crate::error::{Error, Result};

fn check_batch(labels: &[usize]) -> Result<()> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::BatchComposition(format!("{} distinct labels, need at least 2", counts.len())));
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::BatchComposition(format!("label {l} appears once, every label needs a positive")));
    }
    Ok(())
}

/// Supervised contrastive loss over an `n x d` feature batch.
///
/// For anchor `i` the positives are `j != i` with the same label and the
/// denominator sums `exp(f_i·f_k / tau)` over the other labels only:
/// `L = 1/n Σ_i Σ_{j∈P(i)} -log(exp(s_ij) / Σ_{k∈N(i)} exp(s_ik))`.
/// The value is not bounded below by zero.
pub fn supcon(features: &Tensor, labels: &[usize], tau: f64) -> Result<(f64, Tensor)> {
    if features.shape.len() != 2 || features.shape[0] != labels.len() {
        return Err(Error::Contract(format!("features {:?} vs {} labels", features.shape, labels.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    check_batch(labels)?;
    let (n, d) = (features.shape[0], features.shape[1]);
    let f = &features.data;
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = f[i * d..(i + 1) * d].iter().zip(&f[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
            s[i * n + j] = dot / tau;
            s[j * n + i] = dot / tau;
        }
    }
    // dL/ds_ij, later mapped onto the features
    let mut gs = vec![0.0; n * n];
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let neg: Vec<usize> = (0..n).filter(|&k| labels[k] != labels[i]).collect();
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let m = neg.iter().map(|&k| s[i * n + k]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = neg.iter().map(|&k| (s[i * n + k] - m).exp()).sum();
        let lse = m + z.ln();
        let np = pos.len() as f64;
        for &j in &pos {
            loss += inv_n * (lse - s[i * n + j]);
            gs[i * n + j] -= inv_n;
        }
        for &k in &neg {
            gs[i * n + k] += inv_n * np * (s[i * n + k] - lse).exp();
        }
    }
    let mut grad = Tensor::zeros(&[n, d]);
    for i in 0..n {
        for j in 0..n {
            let g = gs[i * n + j] / tau;
            if g == 0.0 {
                continue;
            }
            for c in 0..d {
                grad.data[i * d + c] += g * f[j * d + c];
                grad.data[j * d + c] += g * f[i * d + c];
            }
        }
    }
    Ok((loss, grad))
}
