//! Self-supervised objectives.
//!
//! Two families are implemented over the same encoder/predictor pair:
//!
//! * the negative-cosine siamese objective with a stop-gradient on the target
//!   branch — `L = ½·mean_i [D(p1ᵢ, ẑ2ᵢ) + D(p2ᵢ, ẑ1ᵢ)]` where
//!   `D(p, z) = −cos(p, z)` and hatted targets are treated as constants, and
//! * the NT-Xent contrastive objective over `2n` projected views.
//!
//! Backward passes are compositions of the explicit layer backwards, so the
//! stop-gradient is not a runtime flag but a structural property: target
//! embeddings are simply never backpropagated through. The helpers used to
//! assemble the losses ([`siamese_forward`], [`symmetric_prediction_loss`],
//! [`cross_prediction_penalty`], [`siamese_backward`]) are public because the
//! personalization strategies recombine them with extra gradient terms.

pub mod augment;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::mlp::MlpCache;
use crate::model::{Batch, Encoder, EncoderCache, Predictor};
use crate::params::ParameterSet;
use crate::{cast, Scalar};
pub use augment::AugmentationPolicy;

use augment::augment_batch;

/// Norm floor guarding the cosine against zero vectors.
pub const NORM_EPS: f64 = 1e-12;

/// `D(p, z) = −⟨p, z⟩ / (‖p‖·‖z‖)`, the per-pair siamese distance.
/// Always in `[-1, 1]` (up to the epsilon floor on the norms).
pub fn negative_cosine<F: Scalar>(p: ArrayView1<F>, z: ArrayView1<F>) -> Result<F> {
    if p.len() != z.len() {
        return Err(Error::ShapeMismatch {
            context: "negative_cosine".into(),
            expected: vec![p.len()],
            got: vec![z.len()],
        });
    }
    let eps = cast::<F>(NORM_EPS);
    let pn = p.dot(&p).sqrt().max(eps);
    let zn = z.dot(&z).sqrt().max(eps);
    Ok(-(p.dot(&z)) / (pn * zn))
}

/// Row-wise mean of `D(p_i, t_i)` over a batch, with the gradient w.r.t. `p`
/// only — `t` is a constant (this is where the stop-gradient lives).
///
/// Returns `(mean distance, d/dp scaled by `weight`)`.
fn negcos_rows_vs_const<F: Scalar>(
    p: &Array2<F>,
    t: &Array2<F>,
    weight: F,
) -> Result<(F, Array2<F>)> {
    if p.dim() != t.dim() {
        return Err(Error::ShapeMismatch {
            context: "negcos batch".into(),
            expected: vec![p.nrows(), p.ncols()],
            got: vec![t.nrows(), t.ncols()],
        });
    }
    let n = p.nrows();
    if n == 0 {
        return Err(Error::Empty("negcos batch".into()));
    }
    let eps = cast::<F>(NORM_EPS);
    let inv_n = cast::<F>(1.0 / n as f64);
    let mut dp = Array2::zeros(p.raw_dim());
    let mut total = F::zero();
    for i in 0..n {
        let pi = p.row(i);
        let ti = t.row(i);
        let pn = pi.dot(&pi).sqrt().max(eps);
        let tn = ti.dot(&ti).sqrt().max(eps);
        let cos = pi.dot(&ti) / (pn * tn);
        total += -cos;
        // d(−cos)/dp = (cos·p/‖p‖ − t/‖t‖) / ‖p‖
        let coef = weight * inv_n;
        let mut row = dp.row_mut(i);
        for j in 0..p.ncols() {
            row[j] = coef * (cos * pi[j] / pn - ti[j] / tn) / pn;
        }
    }
    Ok((total * inv_n, dp))
}

/// Everything one forward pass of both branches produces: embeddings,
/// predictions, and the caches needed to backpropagate later.
#[derive(Debug)]
pub struct SiameseForward<F> {
    pub z1: Array2<F>,
    pub z2: Array2<F>,
    pub p1: Array2<F>,
    pub p2: Array2<F>,
    enc1: EncoderCache<F>,
    enc2: EncoderCache<F>,
    pred1: MlpCache<F>,
    pred2: MlpCache<F>,
}

/// Run both augmented views through the encoder and predictor (training
/// mode: batch-norm statistics update as a side effect).
pub fn siamese_forward<F: Scalar>(
    encoder: &Encoder,
    predictor: &Predictor,
    ps: &mut ParameterSet<F>,
    view1: &Batch<F>,
    view2: &Batch<F>,
) -> Result<SiameseForward<F>> {
    let (z1, enc1) = encoder.forward_train(ps, view1)?;
    let (z2, enc2) = encoder.forward_train(ps, view2)?;
    let (p1, pred1) = predictor.forward_train(ps, &z1)?;
    let (p2, pred2) = predictor.forward_train(ps, &z2)?;
    Ok(SiameseForward {
        z1,
        z2,
        p1,
        p2,
        enc1,
        enc2,
        pred1,
        pred2,
    })
}

/// The symmetric stop-gradient objective on an already-run forward pass:
/// `½·mean_i [D(p1ᵢ, z2ᵢ) + D(p2ᵢ, z1ᵢ)]` with `z`s as constants.
///
/// Returns the loss and the gradients w.r.t. `p1` and `p2`.
pub fn symmetric_prediction_loss<F: Scalar>(
    fwd: &SiameseForward<F>,
) -> Result<(F, Array2<F>, Array2<F>)> {
    let half = cast::<F>(0.5);
    let (l1, dp1) = negcos_rows_vs_const(&fwd.p1, &fwd.z2, half)?;
    let (l2, dp2) = negcos_rows_vs_const(&fwd.p2, &fwd.z1, half)?;
    Ok((half * (l1 + l2), dp1, dp2))
}

/// Cross-branch alignment penalty: the mean over the batch of
/// `¼·Σ_{a,b∈{1,2}} D(p_aᵢ, t_bᵢ)` where `t1, t2` are constant target
/// embeddings from another model (typically the global model's branches).
///
/// Returns the penalty and the gradients w.r.t. `p1` and `p2`; the targets,
/// being constants, receive none.
pub fn cross_prediction_penalty<F: Scalar>(
    p1: &Array2<F>,
    p2: &Array2<F>,
    t1: &Array2<F>,
    t2: &Array2<F>,
) -> Result<(F, Array2<F>, Array2<F>)> {
    let quarter = cast::<F>(0.25);
    let (l11, d11) = negcos_rows_vs_const(p1, t1, quarter)?;
    let (l12, d12) = negcos_rows_vs_const(p1, t2, quarter)?;
    let (l21, d21) = negcos_rows_vs_const(p2, t1, quarter)?;
    let (l22, d22) = negcos_rows_vs_const(p2, t2, quarter)?;
    Ok((
        quarter * (l11 + l12 + l21 + l22),
        d11 + &d12,
        d21 + &d22,
    ))
}

/// Push prediction-side gradients back through predictor and encoder for
/// both branches. This is the only path gradients ever take — target
/// embeddings are not differentiated.
pub fn siamese_backward<F: Scalar>(
    encoder: &Encoder,
    predictor: &Predictor,
    ps: &ParameterSet<F>,
    fwd: &SiameseForward<F>,
    dp1: &Array2<F>,
    dp2: &Array2<F>,
    grads: &mut ParameterSet<F>,
) -> Result<()> {
    let dz1 = predictor.backward(ps, &fwd.pred1, dp1, grads)?;
    let dz2 = predictor.backward(ps, &fwd.pred2, dp2, grads)?;
    encoder.backward(ps, &fwd.enc1, &dz1, grads)?;
    encoder.backward(ps, &fwd.enc2, &dz2, grads)?;
    Ok(())
}

/// Siamese stop-gradient loss on a pair of pre-augmented views; accumulates
/// parameter gradients into `grads` when provided.
pub fn simsiam_loss_on_views<F: Scalar>(
    encoder: &Encoder,
    predictor: &Predictor,
    ps: &mut ParameterSet<F>,
    view1: &Batch<F>,
    view2: &Batch<F>,
    grads: Option<&mut ParameterSet<F>>,
) -> Result<F> {
    let fwd = siamese_forward(encoder, predictor, ps, view1, view2)?;
    let (loss, dp1, dp2) = symmetric_prediction_loss(&fwd)?;
    if let Some(grads) = grads {
        siamese_backward(encoder, predictor, ps, &fwd, &dp1, &dp2, grads)?;
    }
    Ok(loss)
}

/// Expand a batch into two stochastic views. Image batches are augmented per
/// `policy`; vector batches (test stubs) pass through unchanged, so the two
/// views coincide.
pub fn make_views<F: Scalar>(
    batch: &Batch<F>,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> Result<(Batch<F>, Batch<F>)> {
    match batch {
        Batch::Images(x) => {
            let v1 = augment_batch(&x.view(), policy, rng)?;
            let v2 = augment_batch(&x.view(), policy, rng)?;
            Ok((Batch::Images(v1), Batch::Images(v2)))
        }
        Batch::Vectors(x) => Ok((Batch::Vectors(x.clone()), Batch::Vectors(x.clone()))),
    }
}

/// Full siamese stop-gradient loss: augment twice, run forward, optionally
/// backpropagate.
pub fn simsiam_loss<F: Scalar>(
    encoder: &Encoder,
    predictor: &Predictor,
    ps: &mut ParameterSet<F>,
    batch: &Batch<F>,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
    grads: Option<&mut ParameterSet<F>>,
) -> Result<F> {
    let (v1, v2) = make_views(batch, policy, rng)?;
    simsiam_loss_on_views(encoder, predictor, ps, &v1, &v2, grads)
}

// ---------------------------------------------------------------------------
// NT-Xent (contrastive alternative)
// ---------------------------------------------------------------------------

/// NT-Xent over stacked view embeddings `[u1; u2]` of shape `(2n, d)`:
/// embeddings are L2-normalized, every row is an anchor whose positive is its
/// sibling view (`i ↔ i+n`), all other rows are negatives, similarities are
/// scaled by `1/temperature`, and the mean cross-entropy over anchors is
/// returned together with its gradient w.r.t. the *unnormalized* embeddings.
pub fn nt_xent<F: Scalar>(embeddings: &Array2<F>, temperature: F) -> Result<(F, Array2<F>)> {
    let m = embeddings.nrows();
    let d = embeddings.ncols();
    if m == 0 || m % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "nt_xent needs an even positive number of rows, got {m}"
        )));
    }
    if temperature <= F::zero() {
        return Err(Error::InvalidArgument(
            "nt_xent temperature must be positive".into(),
        ));
    }
    let n = m / 2;
    let eps = cast::<F>(NORM_EPS);

    // Normalize rows.
    let norms: Array1<F> = embeddings
        .axis_iter(Axis(0))
        .map(|r| r.dot(&r).sqrt().max(eps))
        .collect();
    let mut unit = embeddings.clone();
    for (i, mut row) in unit.axis_iter_mut(Axis(0)).enumerate() {
        let inv = F::one() / norms[i];
        row.mapv_inplace(|v| v * inv);
    }

    let sim = unit.dot(&unit.t());
    let inv_t = F::one() / temperature;
    let inv_m = cast::<F>(1.0 / m as f64);

    // Per-anchor softmax over all columns except the diagonal, and the
    // gradient w.r.t. the similarity matrix.
    let mut loss = F::zero();
    let mut dsim: Array2<F> = Array2::zeros((m, m));
    for i in 0..m {
        let pos = if i < n { i + n } else { i - n };
        let mut maxv = F::neg_infinity();
        for j in 0..m {
            if j != i {
                maxv = maxv.max(sim[[i, j]] * inv_t);
            }
        }
        let mut denom = F::zero();
        for j in 0..m {
            if j != i {
                denom += ((sim[[i, j]] * inv_t) - maxv).exp();
            }
        }
        let pos_logit = sim[[i, pos]] * inv_t;
        loss += -(pos_logit - maxv - denom.ln());
        for j in 0..m {
            if j == i {
                continue;
            }
            let q = ((sim[[i, j]] * inv_t) - maxv).exp() / denom;
            let target = if j == pos { F::one() } else { F::zero() };
            dsim[[i, j]] = (q - target) * inv_m * inv_t;
        }
    }
    loss *= inv_m;

    // sim = Û Ûᵀ, so dL/dÛ = (G + Gᵀ)·Û.
    let dunit = (&dsim + &dsim.t()).dot(&unit);

    // Chain through the normalization: du = (dû − (dû·û)û)/‖u‖.
    let mut demb = Array2::zeros((m, d));
    for i in 0..m {
        let du = dunit.row(i);
        let uh = unit.row(i);
        let proj = du.dot(&uh);
        let inv = F::one() / norms[i];
        let mut row = demb.row_mut(i);
        for j in 0..d {
            row[j] = (du[j] - proj * uh[j]) * inv;
        }
    }
    Ok((loss, demb))
}

/// Contrastive loss on a pair of pre-augmented views: embeddings are the
/// projection applied to the encoder output, `u = g(f(x))`.
pub fn simclr_loss_on_views<F: Scalar>(
    encoder: &Encoder,
    projection: &Predictor,
    ps: &mut ParameterSet<F>,
    view1: &Batch<F>,
    view2: &Batch<F>,
    temperature: F,
    grads: Option<&mut ParameterSet<F>>,
) -> Result<F> {
    let n = view1.len();
    if n != view2.len() {
        return Err(Error::ShapeMismatch {
            context: "simclr views".into(),
            expected: vec![n],
            got: vec![view2.len()],
        });
    }
    let (z1, enc1) = encoder.forward_train(ps, view1)?;
    let (z2, enc2) = encoder.forward_train(ps, view2)?;
    let (u1, proj1) = projection.forward_train(ps, &z1)?;
    let (u2, proj2) = projection.forward_train(ps, &z2)?;

    let d = u1.ncols();
    let mut stacked = Array2::zeros((2 * n, d));
    stacked.slice_mut(s![..n, ..]).assign(&u1);
    stacked.slice_mut(s![n.., ..]).assign(&u2);

    let (loss, demb) = nt_xent(&stacked, temperature)?;

    if let Some(grads) = grads {
        let du1 = demb.slice(s![..n, ..]).to_owned();
        let du2 = demb.slice(s![n.., ..]).to_owned();
        let dz1 = projection.backward(ps, &proj1, &du1, grads)?;
        let dz2 = projection.backward(ps, &proj2, &du2, grads)?;
        encoder.backward(ps, &enc1, &dz1, grads)?;
        encoder.backward(ps, &enc2, &dz2, grads)?;
    }
    Ok(loss)
}

/// Full contrastive loss: augment twice, project, NT-Xent.
pub fn simclr_loss<F: Scalar>(
    encoder: &Encoder,
    projection: &Predictor,
    ps: &mut ParameterSet<F>,
    batch: &Batch<F>,
    temperature: F,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
    grads: Option<&mut ParameterSet<F>>,
) -> Result<F> {
    let (v1, v2) = make_views(batch, policy, rng)?;
    simclr_loss_on_views(encoder, projection, ps, &v1, &v2, temperature, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, BackboneConfig};
    use ndarray::arr2;

    fn stub_arch() -> ArchConfig {
        ArchConfig {
            backbone: BackboneConfig::Mlp {
                in_dim: 5,
                hidden: vec![],
            },
            embed_dim: 4,
            predictor_bottleneck: 2,
        }
    }

    fn stub_views() -> (Batch<f64>, Batch<f64>) {
        (
            Batch::Vectors(arr2(&[
                [0.3, -0.2, 0.9, 0.1, -0.5],
                [1.1, 0.4, -0.3, 0.8, 0.2],
                [-0.6, 0.7, 0.2, -0.9, 1.0],
            ])),
            Batch::Vectors(arr2(&[
                [0.25, -0.15, 0.85, 0.2, -0.4],
                [1.0, 0.5, -0.2, 0.7, 0.3],
                [-0.5, 0.6, 0.3, -1.0, 0.9],
            ])),
        )
    }

    #[test]
    fn negative_cosine_basic_geometry() {
        let a = ndarray::arr1(&[1.0f64, 0.0]);
        let b = ndarray::arr1(&[2.0f64, 0.0]);
        let c = ndarray::arr1(&[0.0f64, 3.0]);
        let d = ndarray::arr1(&[-1.0f64, 0.0]);
        assert!((negative_cosine(a.view(), b.view()).unwrap() + 1.0).abs() < 1e-15);
        assert!(negative_cosine(a.view(), c.view()).unwrap().abs() < 1e-15);
        assert!((negative_cosine(a.view(), d.view()).unwrap() - 1.0).abs() < 1e-15);
        assert!(negative_cosine(a.view(), ndarray::arr1(&[1.0]).view()).is_err());
    }

    #[test]
    fn loss_is_bounded_and_scale_invariant() {
        // D is a mean of cosines, so the symmetric loss lives in [-1, 1],
        // and rescaling targets changes nothing.
        let arch = stub_arch();
        let (enc, pred) = arch.build().unwrap();
        let mut ps: ParameterSet<f64> = arch.init_params(2).unwrap();
        let (v1, v2) = stub_views();
        let fwd = siamese_forward(&enc, &pred, &mut ps, &v1, &v2).unwrap();
        let (loss, _, _) = symmetric_prediction_loss(&fwd).unwrap();
        assert!((-1.0..=1.0).contains(&loss));

        let mut scaled = SiameseForward {
            z1: &fwd.z1 * 3.7,
            z2: &fwd.z2 * 0.2,
            p1: fwd.p1.clone(),
            p2: fwd.p2.clone(),
            enc1: fwd.enc1,
            enc2: fwd.enc2,
            pred1: fwd.pred1,
            pred2: fwd.pred2,
        };
        let (loss2, _, _) = symmetric_prediction_loss(&scaled).unwrap();
        assert!((loss - loss2).abs() < 1e-12);
        scaled.p1 = &scaled.p1 * 11.0;
        let (loss3, _, _) = symmetric_prediction_loss(&scaled).unwrap();
        assert!((loss - loss3).abs() < 1e-12);
    }

    /// Finite differences against the stop-gradient semantics: targets are
    /// frozen at the base parameters, differentiation happens only through
    /// the prediction path.
    #[test]
    fn simsiam_gradients_match_frozen_target_finite_differences() {
        let arch = stub_arch();
        let (enc, pred) = arch.build().unwrap();
        let ps: ParameterSet<f64> = arch.init_params(17).unwrap();
        let (v1, v2) = stub_views();

        let mut grads = ParameterSet::new();
        simsiam_loss_on_views(&enc, &pred, &mut ps.clone(), &v1, &v2, Some(&mut grads)).unwrap();

        // Frozen targets from the base parameters.
        let base_fwd = siamese_forward(&enc, &pred, &mut ps.clone(), &v1, &v2).unwrap();
        let (t1, t2) = (base_fwd.z1.clone(), base_fwd.z2.clone());

        let loss_at = |p: &ParameterSet<f64>| {
            let mut p = p.clone();
            let fwd = siamese_forward(&enc, &pred, &mut p, &v1, &v2).unwrap();
            let (l1, _) = negcos_rows_vs_const(&fwd.p1, &t2, 0.5).unwrap();
            let (l2, _) = negcos_rows_vs_const(&fwd.p2, &t1, 0.5).unwrap();
            0.5 * (l1 + l2)
        };

        let h = 1e-5;
        for (name, grad) in grads.iter() {
            for (idx, &g) in grad.iter().enumerate() {
                let mut plus = ps.clone();
                let mut t = plus.get(name).unwrap().clone();
                t.as_slice_mut().unwrap()[idx] += h;
                plus.set(name, t).unwrap();
                let mut minus = ps.clone();
                let mut t = minus.get(name).unwrap().clone();
                t.as_slice_mut().unwrap()[idx] -= h;
                minus.set(name, t).unwrap();
                let num = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let denom = g.abs().max(num.abs()).max(1e-6);
                assert!(
                    ((g - num) / denom).abs() < 1e-4,
                    "{name}[{idx}]: analytic {g}, numeric {num}"
                );
            }
        }
    }

    #[test]
    fn nt_xent_matches_the_orthogonal_pair_value() {
        // Two positive pairs on orthogonal directions: each anchor sees its
        // positive at similarity 1 and two negatives at 0, so the loss is
        // -ln(e / (e + 2)).
        let e = arr2(&[
            [1.0, 0.0],
            [0.0, 1.0],
            [1.0, 0.0],
            [0.0, 1.0],
        ]);
        let (loss, _) = nt_xent(&e, 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn nt_xent_gradient_matches_finite_differences() {
        let mut e = arr2(&[
            [0.8f64, -0.3, 0.5],
            [-0.2, 0.9, 0.1],
            [0.7, -0.1, 0.6],
            [-0.3, 1.1, 0.0],
        ]);
        let tau = 0.5f64;
        let (_, demb) = nt_xent(&e, tau).unwrap();
        let h = 1e-6;
        for idx in 0..e.len() {
            let orig = e.as_slice().unwrap()[idx];
            e.as_slice_mut().unwrap()[idx] = orig + h;
            let (fp, _) = nt_xent(&e, tau).unwrap();
            e.as_slice_mut().unwrap()[idx] = orig - h;
            let (fm, _) = nt_xent(&e, tau).unwrap();
            e.as_slice_mut().unwrap()[idx] = orig;
            let num = (fp - fm) / (2.0 * h);
            let g = demb.as_slice().unwrap()[idx];
            assert!((g - num).abs() < 1e-7, "demb[{idx}]: {g} vs {num}");
        }
    }

    #[test]
    fn nt_xent_rejects_bad_inputs() {
        let odd = Array2::<f64>::zeros((3, 2));
        assert!(nt_xent(&odd, 1.0).is_err());
        let even = Array2::<f64>::zeros((4, 2));
        assert!(nt_xent(&even, 0.0).is_err());
        assert!(nt_xent(&even, -1.0).is_err());
    }

    #[test]
    fn cross_penalty_only_grads_predictions() {
        let p1 = arr2(&[[0.5f64, 0.2], [0.1, -0.4]]);
        let p2 = arr2(&[[-0.3f64, 0.8], [0.6, 0.6]]);
        let t1 = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let t2 = arr2(&[[0.5, 0.5], [-0.5, 0.5]]);
        let (loss, dp1, dp2) = cross_prediction_penalty(&p1, &p2, &t1, &t2).unwrap();
        assert!((-1.0..=1.0).contains(&loss));
        assert_eq!(dp1.dim(), p1.dim());
        assert_eq!(dp2.dim(), p2.dim());

        // FD check on p1 only — targets are constants by contract.
        let h = 1e-6;
        let mut p1m = p1.clone();
        for idx in 0..p1.len() {
            let orig = p1m.as_slice().unwrap()[idx];
            p1m.as_slice_mut().unwrap()[idx] = orig + h;
            let (fp, _, _) = cross_prediction_penalty(&p1m, &p2, &t1, &t2).unwrap();
            p1m.as_slice_mut().unwrap()[idx] = orig - h;
            let (fm, _, _) = cross_prediction_penalty(&p1m, &p2, &t1, &t2).unwrap();
            p1m.as_slice_mut().unwrap()[idx] = orig;
            let num = (fp - fm) / (2.0 * h);
            let g = dp1.as_slice().unwrap()[idx];
            assert!((g - num).abs() < 1e-8, "dp1[{idx}]: {g} vs {num}");
        }
    }

    #[test]
    fn simclr_loss_runs_and_decreases_with_aligned_views() {
        let arch = stub_arch();
        let (enc, proj) = arch.build().unwrap();
        let mut ps: ParameterSet<f64> = arch.init_params(23).unwrap();
        let (v1, v2) = stub_views();
        let mut grads = ParameterSet::new();
        let loss =
            simclr_loss_on_views(&enc, &proj, &mut ps, &v1, &v2, 0.5, Some(&mut grads)).unwrap();
        assert!(loss.is_finite());
        assert!(grads.all_finite());
        assert!(grads.names().any(|n| n.starts_with("encoder.")));
        assert!(grads.names().any(|n| n.starts_with("predictor.")));
    }
}
