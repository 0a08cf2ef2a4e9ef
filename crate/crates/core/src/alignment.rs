//! Frequency spectrum alignment loss over batch modulus spectra.
//!
//! `dist(a, b)` is the per-entry mean absolute difference. Same-label pairs
//! contribute their distance, different-label pairs contribute the hinge
//! `max(0, xi - dist)`; each side is averaged over unordered pairs.

use crate::error::{Error, Result};

/// Loss value, its two terms, and gradients for every sample's modulus vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FsaOutput {
    pub loss: f64,
    pub l_pos: f64,
    pub l_neg: f64,
    pub grads: Vec<Vec<f64>>,
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn fsa_loss(moduli: &[Vec<f64>], labels: &[u8], xi: f64) -> Result<FsaOutput> {
    if moduli.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if moduli.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: moduli.len(),
            found: labels.len(),
        });
    }
    if !(xi.is_finite() && xi > 0.0) {
        return Err(Error::Config(format!("margin xi must be positive, got {xi}")));
    }
    let dim = moduli[0].len();
    for m in moduli {
        if m.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: m.len(),
            });
        }
        if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidBatch("moduli must be finite and >= 0".into()));
        }
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidBatch("labels must be 0 or 1".into()));
    }

    let b = moduli.len();
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for i in 0..b {
        for j in i + 1..b {
            if labels[i] == labels[j] {
                n_pos += 1;
            } else {
                n_neg += 1;
            }
        }
    }

    let mut grads = vec![vec![0.0; dim]; b];
    let mut pos_terms = Vec::with_capacity(n_pos);
    let mut neg_terms = Vec::with_capacity(n_neg);
    if dim > 0 {
        let inv_dim = 1.0 / dim as f64;
        for i in 0..b {
            for j in i + 1..b {
                let d = mean_abs_diff(&moduli[i], &moduli[j]);
                // d(loss)/d(dist) for this pair
                let coeff = if labels[i] == labels[j] {
                    pos_terms.push(d);
                    1.0 / n_pos as f64
                } else {
                    let gap = xi - d;
                    if gap > 0.0 {
                        neg_terms.push(gap);
                        -1.0 / n_neg as f64
                    } else {
                        0.0
                    }
                };
                if coeff == 0.0 {
                    continue;
                }
                for k in 0..dim {
                    let g = coeff * inv_dim * sign(moduli[i][k] - moduli[j][k]);
                    grads[i][k] += g;
                    grads[j][k] -= g;
                }
            }
        }
    } else {
        neg_terms.resize(n_neg, xi);
    }
    // Summing sorted terms makes the loss bit-identical under any
    // reordering of the batch.
    let pos_sum = sorted_sum(&mut pos_terms);
    let neg_sum = sorted_sum(&mut neg_terms);
    let l_pos = if n_pos == 0 { 0.0 } else { pos_sum / n_pos as f64 };
    let l_neg = if n_neg == 0 { 0.0 } else { neg_sum / n_neg as f64 };
    Ok(FsaOutput {
        loss: l_pos + l_neg,
        l_pos,
        l_neg,
        grads,
    })
}
