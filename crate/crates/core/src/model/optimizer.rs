//! SGD with classical momentum, plus learning-rate schedules.

use serde::{Deserialize, Serialize};

use super::layers::is_trainable;
use crate::error::Result;
use crate::params::ParameterSet;
use crate::{cast, Scalar};

/// `v ← μ v + g;  p ← p − lr · v`, with one velocity buffer per parameter.
///
/// Buffers are created lazily the first time a gradient for a name is seen,
/// so the same optimizer value works for any parameter-set schema. Statistics
/// buffers (`running_*`) never receive gradients and are therefore never
/// stepped.
#[derive(Debug, Clone)]
pub struct SgdMomentum<F> {
    pub momentum: F,
    velocity: ParameterSet<F>,
}

impl<F: Scalar> SgdMomentum<F> {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum: cast(momentum),
            velocity: ParameterSet::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet<F>, grads: &ParameterSet<F>, lr: F) -> Result<()> {
        for (name, g) in grads.iter() {
            if !is_trainable(name) {
                continue;
            }
            if !self.velocity.contains(name) {
                self.velocity
                    .insert(name, ndarray::ArrayD::zeros(g.raw_dim()))?;
            }
            let v = self.velocity.get_mut(name)?;
            v.zip_mut_with(g, |v, &g| *v = self.momentum * *v + g);
            params
                .get_mut(name)?
                .zip_mut_with(v, |p, &v| *p -= lr * v);
        }
        Ok(())
    }

    /// Drop all velocity buffers (used when a fresh local optimizer would
    /// otherwise be re-allocated every round).
    pub fn reset(&mut self) {
        self.velocity = ParameterSet::new();
    }
}

/// How the base learning rate evolves over communication rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate toward zero across the horizon.
    Cosine,
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, round: u32, total_rounds: u32) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = f64::from(round) / f64::from(total_rounds.max(1));
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn momentum_accumulates_like_the_reference_recursion() {
        let mut p = ParameterSet::<f64>::new();
        p.insert("w", arr1(&[1.0]).into_dyn()).unwrap();
        let mut g = ParameterSet::<f64>::new();
        g.insert("w", arr1(&[0.5]).into_dyn()).unwrap();

        let mut opt = SgdMomentum::new(0.9);
        let lr = 0.1;
        // Reference: v1 = 0.5, v2 = 0.9*0.5 + 0.5 = 0.95
        opt.step(&mut p, &g, lr).unwrap();
        assert!((p.get("w").unwrap()[[0]] - (1.0 - 0.05)).abs() < 1e-15);
        opt.step(&mut p, &g, lr).unwrap();
        assert!((p.get("w").unwrap()[[0]] - (0.95 - 0.095)).abs() < 1e-15);
    }

    #[test]
    fn buffers_are_never_stepped() {
        let mut p = ParameterSet::<f64>::new();
        p.insert("bn.running_mean", arr1(&[2.0]).into_dyn()).unwrap();
        let mut g = ParameterSet::<f64>::new();
        g.insert("bn.running_mean", arr1(&[100.0]).into_dyn()).unwrap();
        let mut opt = SgdMomentum::new(0.9);
        opt.step(&mut p, &g, 1.0).unwrap();
        assert_eq!(p.get("bn.running_mean").unwrap()[[0]], 2.0);
    }

    #[test]
    fn cosine_schedule_hits_endpoints() {
        let s = LrSchedule::Cosine;
        assert!((s.lr_at(0.3, 0, 100) - 0.3).abs() < 1e-15);
        assert!(s.lr_at(0.3, 100, 100).abs() < 1e-15);
        assert!((s.lr_at(0.3, 50, 100) - 0.15).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.lr_at(0.3, 77, 100), 0.3);
    }
}
