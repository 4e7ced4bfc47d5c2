//! The release gate, one test per claim. Fast numerical checks run on
//! double-precision stubs; the learning-signal checks train a small conv
//! encoder for real and take by far the longest. Run with `--nocapture` to
//! see one summary line per criterion.

use std::sync::OnceLock;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedsiam_core::data::{synthetic_dataset, Dataset, SyntheticSpec, UnlabeledView};
use fedsiam_core::eval::{
    embed_indices, eval_subsets, naive_federated_probe, personalized_linear_probe, KnnConfig,
    ProbeConfig,
};
use fedsiam_core::fed::{
    canonical_log, run_training, weighted_aggregate, ClientSslOpt, ClientUpdate, EvalPlan,
    LocalIters, NoObserver, RoundConfig, TrainOutput,
};
use fedsiam_core::model::mlp::{Mlp, MlpLayerSpec};
use fedsiam_core::model::{
    is_trainable, ArchConfig, BackboneConfig, BackboneNet, Batch, Encoder, LrSchedule, Predictor,
    SgdMomentum,
};
use fedsiam_core::partition::{
    attach_local_tests, dirichlet_partition, partition_stats, ClientShard, PartitionSpec,
};
use fedsiam_core::personalize::{BiLevelSsfl, GlobalSimClr, LaSsfl, MamlSsfl, PerSsfl};
use fedsiam_core::rng::Stream;
use fedsiam_core::runtime::{run_training_distributed, TransportKind};
use fedsiam_core::ssl::{
    cross_prediction_penalty, make_views, negative_cosine, siamese_backward, siamese_forward,
    simclr_loss_on_views, simsiam_loss_on_views, symmetric_prediction_loss, AugmentationPolicy,
};
use fedsiam_core::{ParameterSet, Real};

// ---------------------------------------------------------------------------
// Stubs and harness pieces
// ---------------------------------------------------------------------------

fn layer(in_dim: usize, out_dim: usize, batch_norm: bool, relu: bool) -> MlpLayerSpec {
    MlpLayerSpec {
        in_dim,
        out_dim,
        batch_norm,
        relu,
    }
}

/// A small vector-input siamese model; `batch_norm` toggles normalization in
/// every stage at once.
fn stub_model(
    in_dim: usize,
    feat: usize,
    embed: usize,
    bottleneck: usize,
    batch_norm: bool,
    seed: u64,
) -> (Encoder, Predictor, ParameterSet<f64>) {
    let backbone = Mlp::new("backbone", &[layer(in_dim, feat, batch_norm, true)], 0).unwrap();
    let head = Mlp::new("head", &[layer(feat, embed, batch_norm, false)], 0).unwrap();
    let encoder = Encoder {
        backbone: BackboneNet::Mlp(backbone),
        head,
        output_dim: embed,
    };
    let predictor = Predictor {
        mlp: Mlp::new(
            "predictor",
            &[
                layer(embed, bottleneck, batch_norm, true),
                layer(bottleneck, embed, false, false),
            ],
            0,
        )
        .unwrap(),
        dim: embed,
    };
    let mut ps = ParameterSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    encoder.register(&mut ps, &mut rng).unwrap();
    predictor.register(&mut ps, &mut rng).unwrap();
    (encoder, predictor, ps)
}

fn vec_rows(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn vec_batch(rows: usize, cols: usize, seed: u64) -> Batch<f64> {
    Batch::Vectors(vec_rows(rows, cols, seed))
}

/// The siamese loss against *fixed* targets: ½·(mean D(p1ᵢ, T2ᵢ) + mean
/// D(p2ᵢ, T1ᵢ)). Finite differences must hold the cross-branch targets
/// constant — that constancy is the entire point of the objective — so this
/// is the functional the FD probe differentiates.
fn frozen_pair_loss(p1: &Array2<f64>, p2: &Array2<f64>, t1: &Array2<f64>, t2: &Array2<f64>) -> f64 {
    let n = p1.nrows();
    let mut total = 0.0;
    for i in 0..n {
        total += negative_cosine(p1.row(i), t2.row(i)).unwrap()
            + negative_cosine(p2.row(i), t1.row(i)).unwrap();
    }
    0.5 * total / n as f64
}

/// Central-difference check of `analytic` against `loss` over every
/// trainable scalar. `loss` must be a pure function of the parameters.
fn max_fd_rel_err(
    base: &ParameterSet<f64>,
    analytic: &ParameterSet<f64>,
    loss: &mut dyn FnMut(&ParameterSet<f64>) -> f64,
) -> f64 {
    const STEP: f64 = 1e-5;
    let mut worst = 0.0f64;
    for (name, tensor) in base.iter() {
        if !is_trainable(name) {
            continue;
        }
        let g = analytic.get(name).unwrap();
        for (idx, _) in tensor.indexed_iter() {
            let mut plus = base.clone();
            plus.get_mut(name).unwrap()[&idx] += STEP;
            let mut minus = base.clone();
            minus.get_mut(name).unwrap()[&idx] -= STEP;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
            let a = g[&idx];
            let err = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// 1. Analytic gradients match finite differences
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let (encoder, predictor, ps) = stub_model(12, 10, 8, 4, true, 3);
    let v1 = vec_batch(6, 12, 100);
    let v2 = vec_batch(6, 12, 101);

    // Cross-branch targets frozen at their base-point values.
    let mut work = ps.clone();
    let base_fwd = siamese_forward(&encoder, &predictor, &mut work, &v1, &v2).unwrap();
    let (bz1, bz2) = (base_fwd.z1.clone(), base_fwd.z2.clone());

    // Siamese prediction loss.
    let mut grads = ParameterSet::new();
    let mut work = ps.clone();
    simsiam_loss_on_views(&encoder, &predictor, &mut work, &v1, &v2, Some(&mut grads)).unwrap();
    let err_siam = max_fd_rel_err(&ps, &grads, &mut |p| {
        let mut p = p.clone();
        let fwd = siamese_forward(&encoder, &predictor, &mut p, &v1, &v2).unwrap();
        frozen_pair_loss(&fwd.p1, &fwd.p2, &bz1, &bz2)
    });

    // Contrastive loss with the projection in the predictor slot. No frozen
    // branch here: every path is differentiated, so plain FD applies.
    let mut grads = ParameterSet::new();
    let mut work = ps.clone();
    simclr_loss_on_views(&encoder, &predictor, &mut work, &v1, &v2, 0.5, Some(&mut grads)).unwrap();
    let err_clr = max_fd_rel_err(&ps, &grads, &mut |p| {
        let mut p = p.clone();
        simclr_loss_on_views(&encoder, &predictor, &mut p, &v1, &v2, 0.5, None).unwrap()
    });

    // Prediction-space coupling: siamese loss plus λ times the alignment of
    // this model's predictions with a fixed reference model's embeddings.
    let lambda = 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t1 = Array2::from_shape_fn((6, 8), |_| rng.random_range(-1.0..1.0));
    let t2 = Array2::from_shape_fn((6, 8), |_| rng.random_range(-1.0..1.0));
    let mut work = ps.clone();
    let fwd = siamese_forward(&encoder, &predictor, &mut work, &v1, &v2).unwrap();
    let (_, mut dp1, mut dp2) = symmetric_prediction_loss(&fwd).unwrap();
    let (_, pdp1, pdp2) = cross_prediction_penalty(&fwd.p1, &fwd.p2, &t1, &t2).unwrap();
    dp1.scaled_add(lambda, &pdp1);
    dp2.scaled_add(lambda, &pdp2);
    let mut grads = ParameterSet::new();
    siamese_backward(&encoder, &predictor, &work, &fwd, &dp1, &dp2, &mut grads).unwrap();
    let err_pred_reg = max_fd_rel_err(&ps, &grads, &mut |p| {
        let mut p = p.clone();
        let fwd = siamese_forward(&encoder, &predictor, &mut p, &v1, &v2).unwrap();
        let (pen, _, _) = cross_prediction_penalty(&fwd.p1, &fwd.p2, &t1, &t2).unwrap();
        frozen_pair_loss(&fwd.p1, &fwd.p2, &bz1, &bz2) + lambda * pen
    });

    // Weight-space coupling: siamese loss plus λ‖θ − anchor‖² on trainables.
    let lambda_w = 0.3;
    let mut anchor = ps.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (_, t) in anchor.iter_mut() {
        t.mapv_inplace(|v| v + rng.random_range(-0.05..0.05));
    }
    let mut grads = ParameterSet::new();
    let mut work = ps.clone();
    simsiam_loss_on_views(&encoder, &predictor, &mut work, &v1, &v2, Some(&mut grads)).unwrap();
    for (name, t) in ps.iter() {
        if is_trainable(name) {
            let pull = (t - anchor.get(name).unwrap()).mapv_into(|d| 2.0 * lambda_w * d);
            grads.accumulate(name, pull).unwrap();
        }
    }
    let err_prox = max_fd_rel_err(&ps, &grads, &mut |p| {
        let mut q = p.clone();
        let fwd = siamese_forward(&encoder, &predictor, &mut q, &v1, &v2).unwrap();
        let mut sq = 0.0;
        for (name, t) in p.iter() {
            if is_trainable(name) {
                let a = anchor.get(name).unwrap();
                sq += (t - a).mapv(|d| d * d).sum();
            }
        }
        frozen_pair_loss(&fwd.p1, &fwd.p2, &bz1, &bz2) + lambda_w * sq
    });

    let worst = err_siam.max(err_clr).max(err_pred_reg).max(err_prox);
    assert!(
        worst <= 1e-4,
        "finite-difference mismatch: siamese {err_siam:.2e}, contrastive {err_clr:.2e}, \
         prediction-reg {err_pred_reg:.2e}, weight-reg {err_prox:.2e}"
    );
    println!(
        "criterion 1 PASS: max fd rel err {worst:.2e} ≤ 1e-4 \
         (siamese {err_siam:.2e}, contrastive {err_clr:.2e}, prediction-reg {err_pred_reg:.2e}, \
         weight-reg {err_prox:.2e})"
    );
}

// ---------------------------------------------------------------------------
// 2. The constant branch moves the loss but never the gradient
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_constant_branch_gets_no_gradient() {
    // Part 1: disjoint producing subgraph. Predictions come from
    // online→pred, targets from a separate `target` net in the same
    // parameter set, so "no gradient reached the producer" is checkable by
    // name.
    let online = Mlp::new(
        "online",
        &[layer(10, 8, false, true), layer(8, 6, false, false)],
        0,
    )
    .unwrap();
    let target = Mlp::new(
        "target",
        &[layer(10, 8, false, true), layer(8, 6, false, false)],
        0,
    )
    .unwrap();
    let predictor = Mlp::new("pred", &[layer(6, 6, false, false)], 0).unwrap();
    let mut ps = ParameterSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    online.register(&mut ps, &mut rng).unwrap();
    target.register(&mut ps, &mut rng).unwrap();
    predictor.register(&mut ps, &mut rng).unwrap();

    let x1 = vec_rows(5, 10, 8);
    let x2 = vec_rows(5, 10, 9);

    let loss_and_grads = |ps: &ParameterSet<f64>| -> (f64, ParameterSet<f64>) {
        let mut ps = ps.clone();
        let (h1, oc1) = online.forward_train(&mut ps, &x1).unwrap();
        let (h2, oc2) = online.forward_train(&mut ps, &x2).unwrap();
        let (p1, pc1) = predictor.forward_train(&mut ps, &h1).unwrap();
        let (p2, pc2) = predictor.forward_train(&mut ps, &h2).unwrap();
        // The other branch: computed, used in the loss, never differentiated.
        let (t1, _) = target.forward_train(&mut ps, &x1).unwrap();
        let (t2, _) = target.forward_train(&mut ps, &x2).unwrap();
        let (loss, dp1, dp2) = cross_prediction_penalty(&p1, &p2, &t1, &t2).unwrap();
        let mut grads = ParameterSet::new();
        let dh1 = predictor.backward(&ps, &pc1, &dp1, &mut grads).unwrap();
        let dh2 = predictor.backward(&ps, &pc2, &dp2, &mut grads).unwrap();
        online.backward(&ps, &oc1, &dh1, &mut grads).unwrap();
        online.backward(&ps, &oc2, &dh2, &mut grads).unwrap();
        (loss, grads)
    };

    let (loss, grads) = loss_and_grads(&ps);
    let leaked: Vec<&str> = grads.names().filter(|n| n.starts_with("target")).collect();
    assert!(leaked.is_empty(), "gradient leaked into the constant branch: {leaked:?}");
    assert!(
        grads.names().any(|n| n.starts_with("online"))
            && grads.names().any(|n| n.starts_with("pred")),
        "prediction path must receive gradient"
    );
    let mut perturbed = ps.clone();
    perturbed
        .get_mut("target.0.weight")
        .unwrap()
        .mapv_inplace(|v| v + 0.05);
    let (loss_p, grads_p) = loss_and_grads(&perturbed);
    let value_shift = (loss_p - loss).abs();
    assert!(value_shift > 1e-6, "loss ignored the target branch entirely");
    assert!(grads_p.names().all(|n| !n.starts_with("target")));

    // Part 2: shared trunk, which is the production topology — the same
    // embedding feeds the predictor on one side and serves as the other
    // side's constant. Injecting a perturbation into the constant slot
    // moves the loss but must leave the gradient entering the paired
    // prediction path bitwise untouched.
    let (encoder, pred, ps2) = stub_model(12, 10, 8, 4, true, 30);
    let v1 = vec_batch(6, 12, 200);
    let v2 = vec_batch(6, 12, 201);
    let mut work = ps2.clone();
    let mut fwd = siamese_forward(&encoder, &pred, &mut work, &v1, &v2).unwrap();
    let (l0, dp1_0, dp2_0) = symmetric_prediction_loss(&fwd).unwrap();
    fwd.z1.mapv_inplace(|v| v + 0.05); // the constant paired with p2
    let (l1, dp1_1, dp2_1) = symmetric_prediction_loss(&fwd).unwrap();
    assert!((l1 - l0).abs() > 1e-9, "constant slot did not affect the loss");
    assert_eq!(
        dp1_0, dp1_1,
        "gradient into the p1 path must be bitwise independent of the other branch's constant"
    );
    assert_ne!(dp2_0, dp2_1, "sanity: the term whose own constant moved must respond");

    println!(
        "criterion 2 PASS: producer subgraph got zero gradient entries while moving the loss \
         by {value_shift:.3e}; constant-slot perturbation shifted the loss by {:.3e} with the \
         paired prediction gradient bitwise unchanged",
        (l1 - l0).abs()
    );
}

// ---------------------------------------------------------------------------
// 3. Aggregation equals the hand-computed weighted mean; order/scale invariant
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_aggregation_matches_hand_oracle_and_invariances() {
    let delta = |a: f64, b: f64| {
        let mut d = ParameterSet::<f64>::new();
        d.insert("w", Array1::from(vec![a, b]).into_dyn()).unwrap();
        d
    };
    let base = delta(1.0, 2.0);
    let updates = vec![
        ClientUpdate { client_id: 0, delta: delta(0.4, -0.8), num_samples: 3 },
        ClientUpdate { client_id: 1, delta: delta(-1.2, 0.4), num_samples: 1 },
    ];
    let merged = weighted_aggregate(&base, &updates).unwrap();
    // By hand: w = base + (3·d₀ + 1·d₁)/4 = [1, 2] + [0, −0.5].
    let expect = delta(1.0, 1.5);
    assert!(merged.max_abs_diff(&expect).unwrap() <= 1e-12);

    // Invariances on a bigger random pool.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut rand_set = || {
        let mut d = ParameterSet::<f64>::new();
        d.insert(
            "w",
            Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0)).into_dyn(),
        )
        .unwrap();
        d
    };
    let base = rand_set();
    let deltas: Vec<ParameterSet<f64>> = (0..7).map(|_| rand_set()).collect();
    let mut counts_rng = ChaCha8Rng::seed_from_u64(78);
    let updates: Vec<ClientUpdate<f64>> = deltas
        .into_iter()
        .enumerate()
        .map(|(k, delta)| ClientUpdate {
            client_id: k,
            delta,
            num_samples: counts_rng.random_range(1..500),
        })
        .collect();
    let reference = weighted_aggregate(&base, &updates).unwrap();

    let mut shuffled = updates.clone();
    shuffled.reverse();
    shuffled.swap(1, 4);
    let permuted = weighted_aggregate(&base, &shuffled).unwrap();
    assert_eq!(
        permuted.max_abs_diff(&reference).unwrap(),
        0.0,
        "delivery order must not change the aggregate"
    );

    let scaled: Vec<ClientUpdate<f64>> = updates
        .iter()
        .map(|u| ClientUpdate {
            client_id: u.client_id,
            delta: u.delta.clone(),
            num_samples: u.num_samples * 7,
        })
        .collect();
    let rescaled = weighted_aggregate(&base, &scaled).unwrap();
    assert_eq!(
        rescaled.max_abs_diff(&reference).unwrap(),
        0.0,
        "weights are relative: scaling every sample count is a no-op"
    );

    println!("criterion 3 PASS: hand oracle ≤ 1e-12; permutation and count-scaling exact");
}

// ---------------------------------------------------------------------------
// 4. One full-participation client over 20 rounds = a centralized loop
// ---------------------------------------------------------------------------

/// The reshuffle-sweep batch sampler, written out independently of the
/// training path: shuffle positions, deal them out, reshuffle when spent.
struct SweepSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl SweepSampler {
    fn new(len: usize) -> Self {
        Self { order: (0..len).collect(), cursor: len }
    }

    fn draw(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[test]
fn criterion_04_single_client_federation_equals_centralized_training() {
    let dataset = synthetic_dataset(&SyntheticSpec {
        num_classes: 3,
        num_train: 40,
        num_test: 10,
        side: 4,
        seed: 6,
    })
    .unwrap();
    let shard = ClientShard {
        client_id: 0,
        train_indices: (0..40).collect(),
        test_indices: vec![],
    };
    let arch = ArchConfig {
        backbone: BackboneConfig::Mlp { in_dim: 48, hidden: vec![16] },
        embed_dim: 8,
        predictor_bottleneck: 2,
    };
    let cfg = RoundConfig {
        total_clients: 1,
        clients_per_round: 1,
        rounds: 20,
        local_iters: LocalIters::Fixed(3),
        micro_batch: 8,
        accumulation_steps: 1,
        lr: 0.05,
        schedule: LrSchedule::Constant,
        momentum: 0.9,
        seed: 21,
        eval: EvalPlan { knn_every: 0, ..Default::default() },
    };
    let policy = AugmentationPolicy::default();
    let init = arch.init_params::<f64>(2).unwrap();

    let federated = run_training(
        &LaSsfl,
        &arch,
        init.clone(),
        &dataset,
        std::slice::from_ref(&shard),
        &policy,
        &cfg,
        &mut NoObserver,
    )
    .unwrap();

    // Centralized reference: same objective, same stream derivation — no
    // broadcast, no delta, no aggregation. A fresh optimizer per round
    // mirrors the client starting its local pass from scratch.
    let (encoder, predictor) = arch.build().unwrap();
    let view = UnlabeledView::new(&dataset, &shard.train_indices);
    let mut params = init;
    for round in 0..cfg.rounds {
        let mut batch_rng = Stream::Batches { round, client: 0 }.rng(cfg.seed);
        let mut view_rng = Stream::Views { round, client: 0 }.rng(cfg.seed);
        let mut sampler = SweepSampler::new(view.len());
        let mut opt = SgdMomentum::new(cfg.momentum);
        for _ in 0..3 {
            let pos = sampler.draw(cfg.micro_batch, &mut batch_rng);
            let batch = view.batch::<f64>(&pos).unwrap();
            let (v1, v2) = make_views(&batch, &policy, &mut view_rng).unwrap();
            let mut grads = ParameterSet::new();
            simsiam_loss_on_views(&encoder, &predictor, &mut params, &v1, &v2, Some(&mut grads))
                .unwrap();
            opt.step(&mut params, &grads, cfg.lr).unwrap();
        }
    }

    let diff = federated.global.max_abs_diff(&params).unwrap();
    assert!(diff <= 1e-6, "single-client federation drifted {diff:.3e} from direct training");
    println!("criterion 4 PASS: 20-round single-client drift {diff:.3e} ≤ 1e-6");
}

// ---------------------------------------------------------------------------
// 5. Zero-strength personalization reduces to plain local training
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_personalization_reduces_to_local_training_at_zero_strength() {
    let dataset = synthetic_dataset(&SyntheticSpec {
        num_classes: 3,
        num_train: 36,
        num_test: 9,
        side: 4,
        seed: 13,
    })
    .unwrap();
    let shard = ClientShard {
        client_id: 0,
        train_indices: (0..36).collect(),
        test_indices: vec![],
    };
    let arch = ArchConfig {
        backbone: BackboneConfig::Mlp { in_dim: 48, hidden: vec![12] },
        embed_dim: 8,
        predictor_bottleneck: 2,
    };
    let base_cfg = RoundConfig {
        total_clients: 1,
        clients_per_round: 1,
        rounds: 1,
        local_iters: LocalIters::Fixed(50),
        micro_batch: 6,
        accumulation_steps: 1,
        lr: 0.05,
        schedule: LrSchedule::Constant,
        momentum: 0.9,
        seed: 31,
        eval: EvalPlan { knn_every: 0, ..Default::default() },
    };
    let policy = AugmentationPolicy::default();
    let init = arch.init_params::<f64>(4).unwrap();
    let shards = std::slice::from_ref(&shard);

    let run = |method: &dyn ClientSslOpt<f64>, cfg: &RoundConfig| {
        run_training(method, &arch, init.clone(), &dataset, shards, &policy, cfg, &mut NoObserver)
            .unwrap()
    };

    // Pure local training endpoint after 50 iterations.
    let local = run(&LaSsfl, &base_cfg);

    // With λ = 0 both coupled methods' personal models must walk the same
    // 50-step trajectory.
    for (name, output) in [
        ("prediction-coupled", run(&PerSsfl { lambda: 0.0 }, &base_cfg)),
        ("weight-coupled", run(&BiLevelSsfl { lambda: 0.0 }, &base_cfg)),
    ] {
        let personal = &output.personal[&0].params;
        let diff = personal.max_abs_diff(&local.global).unwrap();
        assert!(diff <= 1e-6, "{name} personal trajectory diverged {diff:.3e} at λ=0");
    }

    // Zero inner steps collapse the meta-update onto the plain local one.
    let one_iter = RoundConfig { local_iters: LocalIters::Fixed(1), ..base_cfg };
    let la = run(&LaSsfl, &one_iter);
    let maml = run(&MamlSsfl { inner_steps: 0 }, &one_iter);
    let diff = maml.global.max_abs_diff(&la.global).unwrap();
    assert!(diff <= 1e-7, "meta-update with no inner steps drifted {diff:.3e}");

    println!("criterion 5 PASS: λ=0 trajectories ≤ 1e-6 over 50 iters; 0-step meta ≤ 1e-7");
}

// ---------------------------------------------------------------------------
// 6. Message-passing runtime reproduces the direct loop byte for byte
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_transport_reproduces_direct_metrics_bytes() {
    let dataset = synthetic_dataset(&SyntheticSpec {
        num_classes: 3,
        num_train: 48,
        num_test: 12,
        side: 4,
        seed: 8,
    })
    .unwrap();
    let arch = ArchConfig {
        backbone: BackboneConfig::Mlp { in_dim: 48, hidden: vec![12] },
        embed_dim: 8,
        predictor_bottleneck: 2,
    };
    let policy = AugmentationPolicy::default();

    for seed in [11u64, 22, 33] {
        let spec = PartitionSpec { alpha: 1.0, num_clients: 3, num_classes: 3, seed };
        let mut shards = dirichlet_partition(dataset.train_labels(), &spec).unwrap();
        attach_local_tests(
            &mut shards,
            dataset.train_labels(),
            dataset.test_labels(),
            dataset.test_offset(),
            3,
            seed,
        )
        .unwrap();
        let cfg = RoundConfig {
            total_clients: 3,
            clients_per_round: 2,
            rounds: 4,
            local_iters: LocalIters::Fixed(2),
            micro_batch: 6,
            accumulation_steps: 2,
            lr: 0.05,
            schedule: LrSchedule::Cosine,
            momentum: 0.9,
            seed,
            eval: EvalPlan {
                knn_every: 2,
                bank_size: 30,
                query_size: 12,
                knn: KnnConfig { k: 5, temperature: 0.1 },
            },
        };
        let method = PerSsfl { lambda: 0.1 };
        let init = arch.init_params::<Real>(seed).unwrap();
        let direct = run_training(
            &method, &arch, init.clone(), &dataset, &shards, &policy, &cfg, &mut NoObserver,
        )
        .unwrap();
        let piped = run_training_distributed(
            &method,
            &arch,
            init,
            &dataset,
            &shards,
            &policy,
            &cfg,
            TransportKind::Loopback,
            &mut NoObserver,
        )
        .unwrap();
        assert_eq!(
            canonical_log(&direct.history).into_bytes(),
            canonical_log(&piped.history).into_bytes(),
            "seed {seed}: transcripts diverged across the transport"
        );
        assert_eq!(direct.global.max_abs_diff(&piped.global).unwrap(), 0.0);
    }
    println!("criterion 6 PASS: direct and message-passing transcripts byte-identical, 3 seeds");
}

// ---------------------------------------------------------------------------
// 7. 8 accumulated micro-steps of 32 = one step of 256
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_gradient_accumulation_equals_one_large_batch() {
    // Batch normalization couples rows inside a batch, so this identity only
    // holds — and is only claimed — on a normalization-free model.
    let (encoder, predictor, ps) = stub_model(20, 16, 8, 4, false, 14);
    let big1 = vec_rows(256, 20, 500);
    let big2 = vec_rows(256, 20, 501);
    let chunk_of = |x: &Array2<f64>, c: usize| -> Batch<f64> {
        Batch::Vectors(x.slice(s![c * 32..(c + 1) * 32, ..]).to_owned())
    };

    let mut accum = ParameterSet::new();
    let mut work = ps.clone();
    for c in 0..8 {
        simsiam_loss_on_views(
            &encoder,
            &predictor,
            &mut work,
            &chunk_of(&big1, c),
            &chunk_of(&big2, c),
            Some(&mut accum),
        )
        .unwrap();
    }
    accum.scale(1.0 / 8.0);

    let mut whole = ParameterSet::new();
    let mut work = ps.clone();
    simsiam_loss_on_views(
        &encoder,
        &predictor,
        &mut work,
        &Batch::Vectors(big1.clone()),
        &Batch::Vectors(big2.clone()),
        Some(&mut whole),
    )
    .unwrap();

    let grad_diff = accum.max_abs_diff(&whole).unwrap();
    assert!(grad_diff <= 1e-6, "accumulated gradient off by {grad_diff:.3e}");

    // And the optimizer lands on the same parameters.
    let mut via_accum = ps.clone();
    SgdMomentum::new(0.9).step(&mut via_accum, &accum, 0.1).unwrap();
    let mut via_whole = ps.clone();
    SgdMomentum::new(0.9).step(&mut via_whole, &whole, 0.1).unwrap();
    let step_diff = via_accum.max_abs_diff(&via_whole).unwrap();
    assert!(step_diff <= 1e-6);

    println!(
        "criterion 7 PASS: 8×32 accumulation vs one 256 batch — grads {grad_diff:.3e}, \
         step {step_diff:.3e}, both ≤ 1e-6"
    );
}

// ---------------------------------------------------------------------------
// 8. Dirichlet concentration controls label skew as advertised
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_partition_skew_tracks_concentration() {
    // 10 balanced classes of 500.
    let labels: Vec<usize> = (0..5000).map(|i| i / 500).collect();
    let mean_top_share = |alpha: f64| -> f64 {
        let mut acc = 0.0;
        for seed in 0..20 {
            let spec = PartitionSpec { alpha, num_clients: 10, num_classes: 10, seed };
            let shards = dirichlet_partition(&labels, &spec).unwrap();
            let stats = partition_stats(&shards, &labels, 10).unwrap();
            acc += stats.mean_top_label_share();
        }
        acc / 20.0
    };

    let skewed = mean_top_share(0.1);
    let middle = mean_top_share(0.5);
    let uniform = mean_top_share(100.0);

    assert!(skewed > 0.4, "α=0.1 should concentrate labels, got top share {skewed:.3}");
    assert!(
        (uniform - 0.1).abs() <= 0.02,
        "α=100 should sit within 0.02 of the uniform share 0.1, got {uniform:.3}"
    );
    assert!(
        skewed > middle && middle > uniform,
        "skew must fall as α rises: {skewed:.3} → {middle:.3} → {uniform:.3}"
    );
    println!(
        "criterion 8 PASS: mean top-label share {skewed:.3} (α=0.1) > {middle:.3} (α=0.5) \
         > {uniform:.3} (α=100), the last within 0.02 of uniform"
    );
}

// ---------------------------------------------------------------------------
// 9 & 10. Desk-scale training runs (shared fixtures)
// ---------------------------------------------------------------------------

struct DeskWorld {
    dataset: Dataset,
    shards: Vec<ClientShard>,
    arch: ArchConfig,
    cfg: RoundConfig,
    policy: AugmentationPolicy,
}

fn desk_world() -> &'static DeskWorld {
    static WORLD: OnceLock<DeskWorld> = OnceLock::new();
    WORLD.get_or_init(|| {
        let dataset = synthetic_dataset(&SyntheticSpec {
            num_classes: 10,
            num_train: 5000,
            num_test: 1000,
            side: 16,
            seed: 7,
        })
        .unwrap();
        let spec = PartitionSpec { alpha: 0.5, num_clients: 8, num_classes: 10, seed: 1 };
        let mut shards = dirichlet_partition(dataset.train_labels(), &spec).unwrap();
        attach_local_tests(
            &mut shards,
            dataset.train_labels(),
            dataset.test_labels(),
            dataset.test_offset(),
            10,
            1,
        )
        .unwrap();
        let arch = ArchConfig {
            backbone: BackboneConfig::Conv {
                in_channels: 3,
                image_side: 16,
                channels: vec![16, 32, 64, 128],
            },
            embed_dim: 128,
            predictor_bottleneck: 32,
        };
        let cfg = RoundConfig {
            total_clients: 8,
            clients_per_round: 8,
            rounds: 30,
            local_iters: LocalIters::Epochs(1),
            micro_batch: 32,
            accumulation_steps: 8, // effective batch 256
            lr: 0.1,
            schedule: LrSchedule::Cosine,
            momentum: 0.9,
            seed: 42,
            eval: EvalPlan {
                knn_every: 5,
                bank_size: 2000,
                query_size: 500,
                knn: KnnConfig { k: 200, temperature: 0.1 },
            },
        };
        DeskWorld { dataset, shards, arch, cfg, policy: AugmentationPolicy::default() }
    })
}

fn desk_run(method: &dyn ClientSslOpt<Real>) -> TrainOutput<Real> {
    let w = desk_world();
    let init = w.arch.init_params::<Real>(w.cfg.seed).unwrap();
    run_training(method, &w.arch, init, &w.dataset, &w.shards, &w.policy, &w.cfg, &mut NoObserver)
        .unwrap()
}

fn desk_siamese() -> &'static TrainOutput<Real> {
    static RUN: OnceLock<TrainOutput<Real>> = OnceLock::new();
    RUN.get_or_init(|| desk_run(&LaSsfl))
}

#[test]
fn criterion_09_desk_scale_run_learns_without_collapse() {
    let w = desk_world();
    let output = desk_siamese();

    // (a) Loss trend: disjoint 5-round window means, strictly decreasing.
    let losses: Vec<f64> = output.history.iter().map(|m| m.mean_train_loss).collect();
    let windows: Vec<f64> = losses
        .chunks(5)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    for pair in windows.windows(2) {
        assert!(pair[1] < pair[0], "smoothed loss failed to decrease: {windows:?}");
    }

    // (b) Representation quality: nearest-neighbour accuracy well clear of
    // the 10% chance floor.
    let knn = output
        .history
        .last()
        .and_then(|m| m.knn_accuracy)
        .expect("final round measures knn");
    assert!(knn >= 0.35, "final knn {knn:.3} below 0.35");

    // (c) No dimensional collapse: per-dimension spread of the normalized
    // embeddings stays at least half the uniform-on-sphere level 1/√d.
    let (encoder, _) = w.arch.build().unwrap();
    let (bank, _) = eval_subsets(&w.dataset, 2000, 500, w.cfg.seed, w.cfg.rounds);
    let mut emb = embed_indices(&encoder, &output.global, &w.dataset, &bank).unwrap();
    for mut row in emb.rows_mut() {
        let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        let inv = (1.0 / norm.max(1e-12)) as Real;
        row.mapv_inplace(|v| v * inv);
    }
    let d = emb.ncols();
    let mean_std = (0..d)
        .map(|j| {
            let col = emb.column(j);
            let n = col.len() as f64;
            let mean = col.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            let var = col.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
            var.sqrt()
        })
        .sum::<f64>()
        / d as f64;
    let floor = 0.5 / (d as f64).sqrt();
    assert!(mean_std >= floor, "embedding spread {mean_std:.4} under collapse floor {floor:.4}");

    let shown: Vec<f64> = windows.iter().map(|v| (v * 1e3).round() / 1e3).collect();
    println!(
        "criterion 9 PASS: loss windows {shown:?} strictly decreasing; knn {knn:.3} ≥ 0.35; \
         per-dim std {mean_std:.4} ≥ {floor:.4}"
    );
}

#[test]
fn criterion_10_shared_probe_never_beats_personalized_probe() {
    let w = desk_world();

    // Desk-scale run with per-client models, probed under both protocols.
    // A shared classifier over embeddings from *different* encoders has no
    // consistent feature space to learn, so it can at best tie.
    let per_run = desk_run(&PerSsfl { lambda: 0.1 });
    let (encoder, _) = w.arch.build().unwrap();
    let owned: Vec<(usize, ParameterSet<Real>)> = w
        .shards
        .iter()
        .map(|s| (s.client_id, per_run.personal[&s.client_id].params.clone()))
        .collect();
    let refs: Vec<(usize, &ParameterSet<Real>)> = owned.iter().map(|(id, p)| (*id, p)).collect();
    let probe_cfg = ProbeConfig { epochs: 20, ..Default::default() };
    let personalized =
        personalized_linear_probe(&encoder, &refs, &w.dataset, &w.shards, &probe_cfg).unwrap();
    let naive = naive_federated_probe(&encoder, &refs, &w.dataset, &w.shards, &probe_cfg).unwrap();
    assert!(
        naive.mean_accuracy <= personalized.mean_accuracy,
        "one classifier across different encoders scored {:.3}, above the per-client {:.3}",
        naive.mean_accuracy,
        personalized.mean_accuracy
    );

    // Constructed worst case: every client shares one encoder up to a
    // per-client orthogonal transform of the embedding (here a sign flip).
    // Per-client classifiers absorb the transform; a shared one faces
    // mutually negated features and must lose accuracy outright.
    let oracle = synthetic_dataset(&SyntheticSpec {
        num_classes: 4,
        num_train: 240,
        num_test: 80,
        side: 4,
        seed: 23,
    })
    .unwrap();
    let enc = Encoder {
        backbone: BackboneNet::Mlp(Mlp::new("backbone", &[], 48).unwrap()),
        head: Mlp::new("head", &[layer(48, 16, false, false)], 0).unwrap(),
        output_dim: 16,
    };
    let mut base = ParameterSet::<Real>::new();
    enc.register(&mut base, &mut ChaCha8Rng::seed_from_u64(40)).unwrap();
    let ospec = PartitionSpec { alpha: 100.0, num_clients: 4, num_classes: 4, seed: 5 };
    let mut oshards = dirichlet_partition(oracle.train_labels(), &ospec).unwrap();
    attach_local_tests(
        &mut oshards,
        oracle.train_labels(),
        oracle.test_labels(),
        oracle.test_offset(),
        4,
        5,
    )
    .unwrap();
    let flipped: Vec<(usize, ParameterSet<Real>)> = oshards
        .iter()
        .map(|s| {
            let mut p = base.clone();
            if s.client_id % 2 == 1 {
                p.scale(-1.0);
            }
            (s.client_id, p)
        })
        .collect();
    let orefs: Vec<(usize, &ParameterSet<Real>)> = flipped.iter().map(|(id, p)| (*id, p)).collect();
    let ocfg = ProbeConfig { batch: 32, ..Default::default() };
    let oracle_personal = personalized_linear_probe(&enc, &orefs, &oracle, &oshards, &ocfg).unwrap();
    let oracle_naive = naive_federated_probe(&enc, &orefs, &oracle, &oshards, &ocfg).unwrap();
    let gap = oracle_personal.mean_accuracy - oracle_naive.mean_accuracy;
    assert!(
        gap >= 0.15,
        "sign-flip oracle gap {gap:.3} too small (personal {:.3}, shared {:.3})",
        oracle_personal.mean_accuracy,
        oracle_naive.mean_accuracy
    );

    // Informative companion, deliberately non-gating: the contrastive
    // baseline under the identical desk setup, compared by final KNN.
    let clr_run = desk_run(&GlobalSimClr { temperature: 0.1 });
    let clr_knn = clr_run.history.last().and_then(|m| m.knn_accuracy).unwrap_or(f64::NAN);
    let siam_knn = desk_siamese()
        .history
        .last()
        .and_then(|m| m.knn_accuracy)
        .unwrap_or(f64::NAN);

    println!(
        "criterion 10 PASS: desk probes shared {:.3} ≤ personalized {:.3}; sign-flip oracle \
         gap {gap:.3} ≥ 0.15 (personal {:.3} vs shared {:.3}); companion (non-gating): siamese \
         knn {siam_knn:.3} vs contrastive knn {clr_knn:.3}",
        naive.mean_accuracy,
        personalized.mean_accuracy,
        oracle_personal.mean_accuracy,
        oracle_naive.mean_accuracy
    );
}
