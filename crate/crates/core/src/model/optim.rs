//! AdamW with decoupled weight decay.

use super::params::{Params, BLOCK_NAMES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub hyper: AdamWConfig,
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

impl AdamW {
    pub fn new(hyper: AdamWConfig, d: usize) -> Self {
        Self {
            hyper,
            step: 0,
            m: Params::zeros(d),
            v: Params::zeros(d),
        }
    }

    /// One update. Parameters are left untouched when any gradient entry is
    /// non-finite.
    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        if let Some(name) = grads
            .blocks()
            .iter()
            .zip(BLOCK_NAMES)
            .find(|(b, _)| b.iter().any(|v| !v.is_finite()))
            .map(|(_, n)| n)
        {
            return Err(Error::Diverged(format!("non-finite gradient in {name}")));
        }
        let h = self.hyper;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        let blocks = params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut());
        for (((p, g), m), v) in blocks {
            for i in 0..p.len() {
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Params {
        let mut p = Params::zeros(1);
        p.head_b[0] = v;
        p
    }

    #[test]
    fn decay_only_step() {
        let mut opt = AdamW::new(AdamWConfig::default(), 1);
        let mut p = one(1.0);
        opt.step(&mut p, &Params::zeros(1)).unwrap();
        assert_eq!(p.head_b[0], 1.0 - 2e-5 * 0.01);
        assert!((p.head_b[0] - 0.9999998).abs() < 1e-15);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_is_lr_sized() {
        let hyper = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(hyper, 1);
        let mut p = one(0.0);
        opt.step(&mut p, &one(1.0)).unwrap();
        let want = -2e-5 * (1.0 / (1.0 + 1e-8));
        assert!((p.head_b[0] - want).abs() < 1e-20, "{}", p.head_b[0]);
    }

    #[test]
    fn deterministic_and_guards_nan() {
        let mut a = AdamW::new(AdamWConfig::default(), 2);
        let mut b = a.clone();
        let mut pa = Params::identity(2);
        let mut pb = pa.clone();
        let mut g = Params::zeros(2);
        g.adapter_w = vec![0.3, -1.2, 0.0, 4.0];
        a.step(&mut pa, &g).unwrap();
        b.step(&mut pb, &g).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(a, b);
        g.head_w[1] = f64::NAN;
        let before = pa.clone();
        assert!(a.step(&mut pa, &g).unwrap_err().is_divergence());
        assert_eq!(pa, before);
    }
}
