//! AdamW with per-tensor step counters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::FreezeMask;
use crate::params::NamedParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adaptive-moment state. Each tensor keeps its own step count so a tensor
/// skipped while frozen resumes with consistent bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: NamedParams,
    pub v: NamedParams,
    pub steps: Vec<u64>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &NamedParams) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: vec![0; params.len()],
        }
    }

    /// One update. Tensors frozen in `frozen` are skipped entirely: no
    /// moment update, no decay, no step count. Returns the number of tensors
    /// updated.
    pub fn step(
        &mut self,
        params: &mut NamedParams,
        grads: &NamedParams,
        lr: f64,
        frozen: Option<&FreezeMask>,
    ) -> Result<usize> {
        params.check_layout(grads)?;
        params.check_layout(&self.m)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let mut updated = 0;
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for ((((name, p), (_, g)), ((_, m), (_, v))), t) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(moments)
            .zip(self.steps.iter_mut())
        {
            if frozen.is_some_and(|f| f.is_frozen(name)) {
                continue;
            }
            *t += 1;
            let bc1 = 1.0 - beta1.powi(*t as i32);
            let bc2 = 1.0 - beta2.powi(*t as i32);
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g.data()[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g.data()[i] * g.data()[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * p[i]);
            }
            updated += 1;
        }
        Ok(updated)
    }
}

/// True when every gradient coordinate is exactly zero.
pub fn is_zero(grads: &NamedParams) -> bool {
    grads.iter().all(|(_, g)| g.data().iter().all(|&x| x == 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::RealArray;

    fn one(v: Vec<f64>) -> NamedParams {
        let mut p = NamedParams::new();
        p.insert("w", RealArray::from_vec(v));
        p
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // t = 1: mhat = g, vhat = g², update = lr·(g/(|g|+eps) + wd·p)
        let mut p = one(vec![1.0, -2.0]);
        let g = one(vec![0.5, -4.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &g, 0.1, None).unwrap();
        let expect = |x: f64, gi: f64| x - 0.1 * (gi / (gi.abs() + 1e-8) + 0.01 * x);
        let d = p.get("w").unwrap().data();
        assert!((d[0] - expect(1.0, 0.5)).abs() < 1e-15);
        assert!((d[1] - expect(-2.0, -4.0)).abs() < 1e-15);
        assert_eq!(opt.steps, [1]);
    }

    #[test]
    fn zero_lr_is_bit_exact_noop() {
        let mut p = one(vec![0.3, -1.7, 2e-300]);
        let orig = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        for _ in 0..5 {
            opt.step(&mut p, &one(vec![1.0, 2.0, 3.0]), 0.0, None).unwrap();
        }
        assert!(p.bit_equal(&orig));
    }

    #[test]
    fn frozen_tensors_are_skipped() {
        let mut p = one(vec![1.0]);
        p.insert("b", RealArray::from_vec(vec![2.0]));
        let orig = p.clone();
        let mut g = one(vec![1.0]);
        g.insert("b", RealArray::from_vec(vec![1.0]));
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let mask = FreezeMask::new(vec![("w".into(), true), ("b".into(), false)]);
        assert_eq!(opt.step(&mut p, &g, 0.1, Some(&mask)).unwrap(), 1);
        assert_eq!(p.get("w"), orig.get("w"));
        assert_ne!(p.get("b"), orig.get("b"));
        assert_eq!(opt.steps, [0, 1]);
        assert_eq!(opt.m.get("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut p = one(vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert!(opt.step(&mut p, &one(vec![f64::NAN]), 0.1, None).is_err());
        assert!(is_zero(&one(vec![0.0, -0.0])));
        assert!(!is_zero(&one(vec![0.0, 1e-300])));
    }
}
