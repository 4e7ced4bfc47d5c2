//! Multi-layer perceptron built from [`Linear`] / [`BatchNorm1d`] / ReLU.
//!
//! Both projection heads and predictor networks in this crate are small MLPs
//! that differ only in which layers carry normalization and activation, so
//! the stack is described by a list of [`MlpLayerSpec`]s. An empty spec list
//! is a valid identity network, which test models use to feed raw vectors
//! straight into a head.

use ndarray::Array2;
use rand::Rng;

use super::layers::{relu, relu_backward, BatchNorm1d, BnCache, Linear, LinearCache};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::Scalar;

/// One fully-connected stage: linear map, optional batch norm, optional ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpLayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub batch_norm: bool,
    pub relu: bool,
}

#[derive(Debug, Clone)]
struct MlpLayer {
    linear: Linear,
    bn: Option<BatchNorm1d>,
    relu: bool,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    layers: Vec<MlpLayer>,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    stages: Vec<StageCache<F>>,
}

#[derive(Debug, Clone)]
struct StageCache<F> {
    lin: LinearCache<F>,
    bn: Option<BnCache<F>>,
    mask: Option<Array2<F>>,
}

impl Mlp {
    /// `specs` must chain: each layer's `in_dim` equals the previous
    /// `out_dim`. `identity_dim` is the pass-through width when `specs` is
    /// empty.
    pub fn new(name: impl Into<String>, specs: &[MlpLayerSpec], identity_dim: usize) -> Result<Self> {
        let name = name.into();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, s) in specs.iter().enumerate() {
            if i > 0 && specs[i - 1].out_dim != s.in_dim {
                return Err(Error::InvalidArgument(format!(
                    "mlp `{name}` layer {i}: in_dim {} does not chain from previous out_dim {}",
                    s.in_dim,
                    specs[i - 1].out_dim
                )));
            }
            // A linear layer directly followed by batch norm gets no bias:
            // the normalization would cancel it anyway.
            let linear = Linear::new(format!("{name}.{i}"), s.in_dim, s.out_dim, !s.batch_norm);
            let bn = s
                .batch_norm
                .then(|| BatchNorm1d::new(format!("{name}.{i}.bn"), s.out_dim));
            layers.push(MlpLayer {
                linear,
                bn,
                relu: s.relu,
            });
        }
        let (in_dim, out_dim) = match specs {
            [] => (identity_dim, identity_dim),
            [first, .., last] => (first.in_dim, last.out_dim),
            [only] => (only.in_dim, only.out_dim),
        };
        Ok(Self {
            name,
            layers,
            in_dim,
            out_dim,
        })
    }

    pub fn register<F: Scalar>(&self, ps: &mut ParameterSet<F>, rng: &mut impl Rng) -> Result<()> {
        for layer in &self.layers {
            layer.linear.register(ps, rng)?;
            if let Some(bn) = &layer.bn {
                bn.register(ps)?;
            }
        }
        Ok(())
    }

    pub fn forward_train<F: Scalar>(
        &self,
        ps: &mut ParameterSet<F>,
        x: &Array2<F>,
    ) -> Result<(Array2<F>, MlpCache<F>)> {
        let mut h = x.clone();
        let mut stages = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, lin) = layer.linear.forward(ps, &h)?;
            h = y;
            let bn = match &layer.bn {
                Some(bn) => {
                    let (y, c) = bn.forward_train(ps, &h)?;
                    h = y;
                    Some(c)
                }
                None => None,
            };
            let mask = if layer.relu {
                let (y, m) = relu(&h);
                h = y;
                Some(m)
            } else {
                None
            };
            stages.push(StageCache { lin, bn, mask });
        }
        Ok((h, MlpCache { stages }))
    }

    pub fn forward_eval<F: Scalar>(&self, ps: &ParameterSet<F>, x: &Array2<F>) -> Result<Array2<F>> {
        let mut h = x.clone();
        for layer in &self.layers {
            let (y, _) = layer.linear.forward(ps, &h)?;
            h = y;
            if let Some(bn) = &layer.bn {
                h = bn.forward_eval(ps, &h)?;
            }
            if layer.relu {
                h = relu(&h).0;
            }
        }
        Ok(h)
    }

    /// Returns the gradient w.r.t. the MLP input.
    pub fn backward<F: Scalar>(
        &self,
        ps: &ParameterSet<F>,
        cache: &MlpCache<F>,
        dy: &Array2<F>,
        grads: &mut ParameterSet<F>,
    ) -> Result<Array2<F>> {
        let mut d = dy.clone();
        for (layer, stage) in self.layers.iter().zip(&cache.stages).rev() {
            if let Some(mask) = &stage.mask {
                d = relu_backward(mask, &d);
            }
            if let (Some(bn), Some(c)) = (&layer.bn, &stage.bn) {
                d = bn.backward(ps, c, &d, grads)?;
            }
            d = layer.linear.backward(ps, &stage.lin, &d, grads)?;
        }
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_layer() -> (Mlp, ParameterSet<f64>) {
        let mlp = Mlp::new(
            "m",
            &[
                MlpLayerSpec {
                    in_dim: 3,
                    out_dim: 4,
                    batch_norm: true,
                    relu: true,
                },
                MlpLayerSpec {
                    in_dim: 4,
                    out_dim: 2,
                    batch_norm: false,
                    relu: false,
                },
            ],
            0,
        )
        .unwrap();
        let mut ps = ParameterSet::new();
        mlp.register(&mut ps, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        (mlp, ps)
    }

    #[test]
    fn identity_mlp_passes_through() {
        let mlp = Mlp::new("id", &[], 5).unwrap();
        let mut ps = ParameterSet::<f64>::new();
        mlp.register(&mut ps, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(ps.is_empty());
        let x = arr2(&[[1.0, 2.0, 3.0, 4.0, 5.0]]);
        let (y, cache) = mlp.forward_train(&mut ps, &x).unwrap();
        assert_eq!(y, x);
        let mut grads = ParameterSet::new();
        let dx = mlp.backward(&ps, &cache, &x, &mut grads).unwrap();
        assert_eq!(dx, x);
    }

    #[test]
    fn bad_chaining_is_rejected() {
        let err = Mlp::new(
            "m",
            &[
                MlpLayerSpec {
                    in_dim: 3,
                    out_dim: 4,
                    batch_norm: false,
                    relu: false,
                },
                MlpLayerSpec {
                    in_dim: 5,
                    out_dim: 2,
                    batch_norm: false,
                    relu: false,
                },
            ],
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("chain"));
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        let (mlp, ps) = two_layer();
        let x = arr2(&[
            [0.5, -0.3, 1.2],
            [-1.0, 0.8, 0.1],
            [0.2, 0.2, -0.9],
            [1.4, -0.6, 0.3],
        ]);
        // Probe loss: sum of squares of the output.
        let (y, cache) = mlp.forward_train(&mut ps.clone(), &x).unwrap();
        let dy = y.mapv(|v| 2.0 * v);
        let mut grads = ParameterSet::new();
        mlp.backward(&ps, &cache, &dy, &mut grads).unwrap();

        let h = 1e-5;
        for (name, grad) in grads.iter() {
            for (idx, &g) in grad.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut p = ps.clone();
                    let mut t = p.get(name).unwrap().clone();
                    t.as_slice_mut().unwrap()[idx] += delta;
                    p.set(name, t).unwrap();
                    let (y, _) = mlp.forward_train(&mut p, &x).unwrap();
                    y.mapv(|v| v * v).sum()
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let denom = g.abs().max(num.abs()).max(1e-6);
                assert!(
                    ((g - num) / denom).abs() < 1e-5,
                    "{name}[{idx}]: analytic {g}, numeric {num}"
                );
            }
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_cacheless() {
        let (mlp, mut ps) = two_layer();
        let x = arr2(&[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]);
        // Push some statistics into the buffers first.
        mlp.forward_train(&mut ps, &x).unwrap();
        let before = ps.clone();
        let y1 = mlp.forward_eval(&ps, &x).unwrap();
        let y2 = mlp.forward_eval(&ps, &x).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(before.max_abs_diff(&ps).unwrap(), 0.0);
    }
}
