//! Encoders, heads, and optimization.
//!
//! The trainable unit of this crate is the pair (encoder `f`, predictor `h`):
//! the encoder maps a batch of inputs to embeddings, the predictor maps
//! embeddings to predictions of a sibling branch's embeddings. Both store
//! their weights in a single [`ParameterSet`] under the `encoder.` and
//! `predictor.` prefixes, so federated aggregation and checkpointing treat
//! the whole model as one schema.
//!
//! [`ArchConfig`] is the serializable description of an architecture; it is
//! written into checkpoint manifests so a saved parameter set can be
//! re-instantiated without the originating config file.

pub mod conv_net;
pub mod layers;
pub mod mlp;
pub mod optimizer;

pub use layers::{is_trainable, BUFFER_MARKER};
pub use optimizer::{LrSchedule, SgdMomentum};

use ndarray::{Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::{cast, Scalar};
use conv_net::{ConvBackbone, ConvNetCache};
use layers::Linear;
use mlp::{Mlp, MlpCache, MlpLayerSpec};

/// A batch of model inputs: image tensors for convolutional backbones,
/// plain feature vectors for MLP backbones and test stubs.
#[derive(Debug, Clone)]
pub enum Batch<F> {
    Images(Array4<F>),
    Vectors(Array2<F>),
}

impl<F: Scalar> Batch<F> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Images(x) => x.dim().0,
            Batch::Vectors(x) => x.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flatten images to `(N, C·H·W)`; vectors pass through.
    fn as_vectors(&self) -> Array2<F> {
        match self {
            Batch::Vectors(x) => x.clone(),
            Batch::Images(x) => {
                let (n, c, h, w) = x.dim();
                x.view()
                    .into_shape_with_order((n, c * h * w))
                    .expect("contiguous image batch")
                    .to_owned()
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum BackboneNet {
    Conv(ConvBackbone),
    Mlp(Mlp),
}

#[derive(Debug, Clone)]
pub enum BackboneCache<F> {
    Conv(ConvNetCache<F>),
    Mlp(MlpCache<F>),
}

/// Backbone plus projection head; output is the embedding `z`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub backbone: BackboneNet,
    pub head: Mlp,
    pub output_dim: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<F> {
    backbone: BackboneCache<F>,
    head: MlpCache<F>,
}

impl Encoder {
    pub fn register<F: Scalar>(
        &self,
        ps: &mut ParameterSet<F>,
        rng: &mut impl rand::Rng,
    ) -> Result<()> {
        match &self.backbone {
            BackboneNet::Conv(net) => net.register(ps, rng)?,
            BackboneNet::Mlp(net) => net.register(ps, rng)?,
        }
        self.head.register(ps, rng)
    }

    pub fn forward_train<F: Scalar>(
        &self,
        ps: &mut ParameterSet<F>,
        batch: &Batch<F>,
    ) -> Result<(Array2<F>, EncoderCache<F>)> {
        let (feat, backbone) = match (&self.backbone, batch) {
            (BackboneNet::Conv(net), Batch::Images(x)) => {
                let (f, c) = net.forward_train(ps, x)?;
                (f, BackboneCache::Conv(c))
            }
            (BackboneNet::Conv(_), Batch::Vectors(_)) => {
                return Err(Error::InvalidArgument(
                    "convolutional encoder fed a vector batch".into(),
                ))
            }
            (BackboneNet::Mlp(net), b) => {
                let (f, c) = net.forward_train(ps, &b.as_vectors())?;
                (f, BackboneCache::Mlp(c))
            }
        };
        let (z, head) = self.head.forward_train(ps, &feat)?;
        Ok((z, EncoderCache { backbone, head }))
    }

    pub fn forward_eval<F: Scalar>(&self, ps: &ParameterSet<F>, batch: &Batch<F>) -> Result<Array2<F>> {
        let feat = match (&self.backbone, batch) {
            (BackboneNet::Conv(net), Batch::Images(x)) => net.forward_eval(ps, x)?,
            (BackboneNet::Conv(_), Batch::Vectors(_)) => {
                return Err(Error::InvalidArgument(
                    "convolutional encoder fed a vector batch".into(),
                ))
            }
            (BackboneNet::Mlp(net), b) => net.forward_eval(ps, &b.as_vectors())?,
        };
        self.head.forward_eval(ps, &feat)
    }

    /// Backpropagate `d(loss)/dz` into the gradient set. Input gradients are
    /// discarded — nothing upstream of the encoder is trainable.
    pub fn backward<F: Scalar>(
        &self,
        ps: &ParameterSet<F>,
        cache: &EncoderCache<F>,
        dz: &Array2<F>,
        grads: &mut ParameterSet<F>,
    ) -> Result<()> {
        let dfeat = self.head.backward(ps, &cache.head, dz, grads)?;
        match (&self.backbone, &cache.backbone) {
            (BackboneNet::Conv(net), BackboneCache::Conv(c)) => net.backward(ps, c, &dfeat, grads),
            (BackboneNet::Mlp(net), BackboneCache::Mlp(c)) => {
                net.backward(ps, c, &dfeat, grads).map(|_| ())
            }
            _ => Err(Error::InvalidArgument(
                "encoder cache does not match backbone kind".into(),
            )),
        }
    }
}

// ---------------------------------------------------------------------------
// Predictor
// ---------------------------------------------------------------------------

/// Bottleneck MLP `h` mapping embeddings to predictions of the sibling
/// branch's embedding.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub mlp: Mlp,
    pub dim: usize,
}

impl Predictor {
    pub fn register<F: Scalar>(
        &self,
        ps: &mut ParameterSet<F>,
        rng: &mut impl rand::Rng,
    ) -> Result<()> {
        self.mlp.register(ps, rng)
    }

    pub fn forward_train<F: Scalar>(
        &self,
        ps: &mut ParameterSet<F>,
        z: &Array2<F>,
    ) -> Result<(Array2<F>, MlpCache<F>)> {
        self.mlp.forward_train(ps, z)
    }

    pub fn forward_eval<F: Scalar>(&self, ps: &ParameterSet<F>, z: &Array2<F>) -> Result<Array2<F>> {
        self.mlp.forward_eval(ps, z)
    }

    /// Returns `d(loss)/dz`, the gradient flowing back into the encoder.
    pub fn backward<F: Scalar>(
        &self,
        ps: &ParameterSet<F>,
        cache: &MlpCache<F>,
        dp: &Array2<F>,
        grads: &mut ParameterSet<F>,
    ) -> Result<Array2<F>> {
        self.mlp.backward(ps, cache, dp, grads)
    }
}

// ---------------------------------------------------------------------------
// Linear classifier (probes)
// ---------------------------------------------------------------------------

/// One linear layer over frozen features; the workhorse of every probe
/// protocol.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    pub linear: Linear,
}

impl LinearClassifier {
    pub fn new(in_dim: usize, num_classes: usize) -> Self {
        Self {
            linear: Linear::new("probe", in_dim, num_classes, true),
        }
    }

    pub fn init<F: Scalar>(&self, seed: u64) -> Result<ParameterSet<F>> {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.linear.register(&mut ps, &mut rng)?;
        Ok(ps)
    }

    pub fn logits<F: Scalar>(
        &self,
        ps: &ParameterSet<F>,
        features: &Array2<F>,
    ) -> Result<(Array2<F>, layers::LinearCache<F>)> {
        self.linear.forward(ps, features)
    }

    /// One supervised step's worth of gradients: mean cross-entropy over the
    /// batch. Returns `(loss, correct)`.
    pub fn loss_and_grads<F: Scalar>(
        &self,
        ps: &ParameterSet<F>,
        features: &Array2<F>,
        labels: &[usize],
        grads: &mut ParameterSet<F>,
    ) -> Result<(F, usize)> {
        let (logits, cache) = self.logits(ps, features)?;
        let (loss, dlogits, correct) = softmax_cross_entropy(&logits, labels)?;
        self.linear.backward(ps, &cache, &dlogits, grads)?;
        Ok((loss, correct))
    }
}

/// Mean softmax cross-entropy with gradient and argmax-accuracy count.
/// Ties in the argmax resolve to the lowest class index.
pub fn softmax_cross_entropy<F: Scalar>(
    logits: &Array2<F>,
    labels: &[usize],
) -> Result<(F, Array2<F>, usize)> {
    let n = logits.nrows();
    let c = logits.ncols();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "cross-entropy labels".into(),
            expected: vec![n],
            got: vec![labels.len()],
        });
    }
    if n == 0 {
        return Err(Error::Empty("cross-entropy batch".into()));
    }
    let mut dlogits = Array2::zeros((n, c));
    let mut loss = F::zero();
    let mut correct = 0usize;
    let inv_n = cast::<F>(1.0 / n as f64);
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let y = labels[i];
        if y >= c {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: F = exps.iter().cloned().sum();
        loss += -(exps[y] / sum).ln();
        for j in 0..c {
            let p = exps[j] / sum;
            let target = if j == y { F::one() } else { F::zero() };
            dlogits[[i, j]] = (p - target) * inv_n;
        }
        let argmax = row
            .iter()
            .enumerate()
            .fold((0usize, F::neg_infinity()), |(bi, bv), (j, &v)| {
                if v > bv {
                    (j, v)
                } else {
                    (bi, bv)
                }
            })
            .0;
        if argmax == y {
            correct += 1;
        }
    }
    Ok((loss * inv_n, dlogits, correct))
}

// ---------------------------------------------------------------------------
// Architecture description
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    /// Conv blocks over `(in_channels, image_side, image_side)` inputs.
    Conv {
        in_channels: usize,
        image_side: usize,
        channels: Vec<usize>,
    },
    /// MLP over flat vectors; `hidden` may be empty for an identity backbone.
    Mlp { in_dim: usize, hidden: Vec<usize> },
}

impl BackboneConfig {
    pub fn feature_dim(&self) -> usize {
        match self {
            BackboneConfig::Conv { channels, .. } => *channels.last().unwrap_or(&0),
            BackboneConfig::Mlp { in_dim, hidden } => *hidden.last().unwrap_or(in_dim),
        }
    }
}

/// Complete, serializable description of the encoder/predictor pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub backbone: BackboneConfig,
    /// Width of the embedding `z` (and of predictions `p`).
    pub embed_dim: usize,
    /// Hidden width of the predictor MLP.
    pub predictor_bottleneck: usize,
}

impl ArchConfig {
    /// Instantiate the (stateless) network descriptors.
    pub fn build(&self) -> Result<(Encoder, Predictor)> {
        if self.embed_dim == 0 || self.predictor_bottleneck == 0 {
            return Err(Error::InvalidArgument(
                "embed_dim and predictor_bottleneck must be positive".into(),
            ));
        }
        let backbone = match &self.backbone {
            BackboneConfig::Conv {
                in_channels,
                image_side,
                channels,
            } => BackboneNet::Conv(ConvBackbone::new(
                "encoder.backbone",
                *in_channels,
                *image_side,
                channels,
            )?),
            BackboneConfig::Mlp { in_dim, hidden } => {
                let mut specs = Vec::new();
                let mut prev = *in_dim;
                for &hdim in hidden {
                    specs.push(MlpLayerSpec {
                        in_dim: prev,
                        out_dim: hdim,
                        batch_norm: true,
                        relu: true,
                    });
                    prev = hdim;
                }
                BackboneNet::Mlp(Mlp::new("encoder.backbone", &specs, *in_dim)?)
            }
        };
        let feat = self.backbone.feature_dim();
        // Projection head: hidden stage with activation, output stage
        // normalized but not rectified, so embeddings keep both signs.
        let head = Mlp::new(
            "encoder.head",
            &[
                MlpLayerSpec {
                    in_dim: feat,
                    out_dim: self.embed_dim,
                    batch_norm: true,
                    relu: true,
                },
                MlpLayerSpec {
                    in_dim: self.embed_dim,
                    out_dim: self.embed_dim,
                    batch_norm: true,
                    relu: false,
                },
            ],
            0,
        )?;
        let encoder = Encoder {
            backbone,
            head,
            output_dim: self.embed_dim,
        };
        // Bottleneck predictor: d → d/4-ish → d.
        let pred_mlp = Mlp::new(
            "predictor",
            &[
                MlpLayerSpec {
                    in_dim: self.embed_dim,
                    out_dim: self.predictor_bottleneck,
                    batch_norm: true,
                    relu: true,
                },
                MlpLayerSpec {
                    in_dim: self.predictor_bottleneck,
                    out_dim: self.embed_dim,
                    batch_norm: false,
                    relu: false,
                },
            ],
            0,
        )?;
        let predictor = Predictor {
            mlp: pred_mlp,
            dim: self.embed_dim,
        };
        Ok((encoder, predictor))
    }

    /// Freshly initialized parameters for this architecture. The seed fully
    /// determines every weight, so all processes in a distributed run can
    /// derive the same initial model independently.
    pub fn init_params<F: Scalar>(&self, seed: u64) -> Result<ParameterSet<F>> {
        let (encoder, predictor) = self.build()?;
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        encoder.register(&mut ps, &mut rng)?;
        predictor.register(&mut ps, &mut rng)?;
        Ok(ps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn vector_arch() -> ArchConfig {
        ArchConfig {
            backbone: BackboneConfig::Mlp {
                in_dim: 6,
                hidden: vec![],
            },
            embed_dim: 4,
            predictor_bottleneck: 2,
        }
    }

    #[test]
    fn init_is_seed_deterministic_and_schema_stable() {
        let arch = vector_arch();
        let a: ParameterSet<f64> = arch.init_params(9).unwrap();
        let b: ParameterSet<f64> = arch.init_params(9).unwrap();
        let c: ParameterSet<f64> = arch.init_params(10).unwrap();
        assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
        assert!(a.same_schema(&c));
        assert!(a.max_abs_diff(&c).unwrap() > 0.0);
        assert!(a.names().any(|n| n.starts_with("encoder.head.")));
        assert!(a.names().any(|n| n.starts_with("predictor.")));
    }

    #[test]
    fn encoder_and_predictor_shapes_line_up() {
        let arch = vector_arch();
        let (enc, pred) = arch.build().unwrap();
        let mut ps: ParameterSet<f64> = arch.init_params(3).unwrap();
        let x = Batch::Vectors(arr2(&[
            [0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            [0.6, 0.5, 0.4, 0.3, 0.2, 0.1],
            [1.0, -1.0, 0.5, -0.5, 0.2, -0.2],
        ]));
        let (z, _) = enc.forward_train(&mut ps, &x).unwrap();
        assert_eq!(z.dim(), (3, 4));
        let (p, _) = pred.forward_train(&mut ps, &z).unwrap();
        assert_eq!(p.dim(), (3, 4));
    }

    #[test]
    fn conv_arch_consumes_images_only() {
        let arch = ArchConfig {
            backbone: BackboneConfig::Conv {
                in_channels: 3,
                image_side: 8,
                channels: vec![4, 8],
            },
            embed_dim: 8,
            predictor_bottleneck: 2,
        };
        let (enc, _) = arch.build().unwrap();
        let mut ps: ParameterSet<f32> = arch.init_params(0).unwrap();
        let imgs = Batch::Images(Array4::from_elem((2, 3, 8, 8), 0.5f32));
        let (z, _) = enc.forward_train(&mut ps, &imgs).unwrap();
        assert_eq!(z.dim(), (2, 8));

        let vecs = Batch::Vectors(arr2(&[[0.0f32; 6]]));
        assert!(enc.forward_train(&mut ps, &vecs).is_err());
    }

    #[test]
    fn cross_entropy_matches_hand_computation() {
        // Two classes, logits (0, ln 3): p = (0.25, 0.75).
        let logits = arr2(&[[0.0, 3f64.ln()]]);
        let (loss, dlogits, correct) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!((loss - 0.75f64.ln().abs()).abs() < 1e-12);
        assert!((dlogits[[0, 0]] - 0.25).abs() < 1e-12);
        assert!((dlogits[[0, 1]] + 0.25).abs() < 1e-12);
        assert_eq!(correct, 1);

        assert!(softmax_cross_entropy(&logits, &[2]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn classifier_gradcheck() {
        let clf = LinearClassifier::new(3, 4);
        let ps: ParameterSet<f64> = clf.init(5).unwrap();
        let feats = arr2(&[[0.2, -0.4, 1.0], [0.9, 0.1, -0.3]]);
        let labels = [2usize, 0];

        let mut grads = ParameterSet::new();
        clf.loss_and_grads(&ps, &feats, &labels, &mut grads).unwrap();

        let h = 1e-6;
        for (name, grad) in grads.iter() {
            for (idx, &g) in grad.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut p = ps.clone();
                    let mut t = p.get(name).unwrap().clone();
                    t.as_slice_mut().unwrap()[idx] += delta;
                    p.set(name, t).unwrap();
                    let (logits, _) = clf.logits(&p, &feats).unwrap();
                    let (loss, _, _) = softmax_cross_entropy(&logits, &labels).unwrap();
                    loss
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((g - num).abs() < 1e-7, "{name}[{idx}]: {g} vs {num}");
            }
        }
    }
}
