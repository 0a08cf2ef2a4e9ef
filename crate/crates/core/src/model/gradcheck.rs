//! Central finite-difference check of [`DetectorModel::objective`].

use super::{AlphaMode, DetectorModel, PreparedSample, BLOCK_NAMES};
use crate::error::Result;
use crate::spectral::GlobalSpectrumStats;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub block: &'static str,
    /// `|g - g_fd| / max(|g|, |g_fd|)`, or 0 when both vanish.
    pub relative: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub blocks: Vec<BlockError>,
    /// Smallest distance of the batch to a non-differentiable point of the
    /// alignment loss; small values make finite differences unreliable.
    pub kink_margin: f64,
}

impl GradCheck {
    pub fn max_relative(&self) -> f64 {
        self.blocks.iter().map(|b| b.relative).fold(0.0, f64::max)
    }
}

fn kink_margin(moduli: &[Vec<f64>], labels: &[u8], xi: f64, fsa: bool) -> f64 {
    let mut margin = f64::INFINITY;
    for m in moduli {
        for &v in m {
            if v > 0.0 {
                margin = margin.min(v);
            }
        }
    }
    if !fsa {
        return margin;
    }
    for i in 0..moduli.len() {
        for j in i + 1..moduli.len() {
            let (a, b) = (&moduli[i], &moduli[j]);
            let dist: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            if labels[i] != labels[j] {
                margin = margin.min((xi - dist).abs());
            }
            for (x, y) in a.iter().zip(b) {
                if *x > 0.0 || *y > 0.0 {
                    margin = margin.min((x - y).abs());
                }
            }
        }
    }
    margin
}

/// Compares analytic gradients to central differences with step `h`. The
/// reconstruction weights of the unperturbed batch are held fixed.
pub fn check_gradients(
    model: &DetectorModel,
    samples: &[&PreparedSample],
    stats: &GlobalSpectrumStats,
    fsa_weight: f64,
    h: f64,
) -> Result<GradCheck> {
    let base = model.forward_batch(samples, stats, AlphaMode::Batch)?;
    let mode = AlphaMode::Fixed(base.alphas);
    let margin = kink_margin(&base.moduli(), &base.labels(), model.config().xi, model.config().fsa);
    let analytic = model.objective(samples, stats, mode, fsa_weight)?.grads;

    let mut probe = model.clone();
    let mut fd = analytic.clone();
    let n = analytic.len();
    for i in 0..n {
        let orig = *probe.params.get_mut(i);
        *probe.params.get_mut(i) = orig + h;
        let up = probe.objective(samples, stats, mode, fsa_weight)?.total;
        *probe.params.get_mut(i) = orig - h;
        let down = probe.objective(samples, stats, mode, fsa_weight)?.total;
        *probe.params.get_mut(i) = orig;
        *fd.get_mut(i) = (up - down) / (2.0 * h);
    }

    let blocks = analytic
        .blocks()
        .iter()
        .zip(fd.blocks())
        .zip(BLOCK_NAMES)
        .map(|((a, f), block)| {
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff: Vec<f64> = a.iter().zip(f.iter()).map(|(x, y)| x - y).collect();
            let scale = norm(a).max(norm(f));
            BlockError {
                block,
                relative: if scale == 0.0 { 0.0 } else { norm(&diff) / scale },
                analytic_norm: norm(a),
            }
        })
        .collect();
    Ok(GradCheck {
        blocks,
        kink_margin: margin,
    })
}
