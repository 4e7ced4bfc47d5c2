//! Synchronous federated training: client sampling, weighted aggregation,
//! and the round loop.
//!
//! The server holds global parameters `Θ`. Each round it samples a client
//! subset, hands every selected client a copy of `Θ` plus a label-free view
//! of its shard, and collects `(delta, num_samples)` updates. The new global
//! model is `Θ + Σ_k (n_k / Σ n) · Δ_k`, with weights normalized over the
//! round's participants.
//!
//! What a client *does* with its local data is decided by a
//! [`ClientSslOpt`] implementation (see the `personalize` module); the loop
//! itself is method-agnostic. Methods that keep per-client state return it
//! through [`LocalOutcome`] and receive it back on their next participation.
//!
//! Determinism: client sampling, batch order, and augmentations are all
//! drawn from counter-derived streams of the run seed, so results do not
//! depend on thread scheduling — clients may run in parallel, but every
//! random choice is fixed by `(seed, round, client)` alone, and aggregation
//! always iterates in ascending client id.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, UnlabeledView};
use crate::error::{Error, Result};
use crate::eval::{eval_subsets, knn_indicator, KnnConfig};
use crate::model::{ArchConfig, Encoder, LrSchedule, Predictor, SgdMomentum};
use crate::params::ParameterSet;
use crate::partition::ClientShard;
use crate::rng::Stream;
use crate::ssl::AugmentationPolicy;
use crate::{cast, Scalar};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// How much local work a client does per round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalIters {
    /// A fixed number of optimizer steps regardless of shard size.
    Fixed(usize),
    /// Enough steps to sweep the shard this many times (rounded up).
    Epochs(usize),
}

impl LocalIters {
    /// Number of optimizer steps for a shard of `num_samples`, given the
    /// effective batch size.
    pub fn steps(&self, num_samples: usize, effective_batch: usize) -> usize {
        match *self {
            LocalIters::Fixed(s) => s,
            LocalIters::Epochs(e) => e * num_samples.div_ceil(effective_batch.max(1)).max(1),
        }
    }
}

/// When and how representation quality is measured during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    /// Run the KNN indicator every this many rounds (0 disables it; the last
    /// round is always measured when enabled).
    pub knn_every: u32,
    /// Rows drawn from the training split as the KNN bank (0 = all).
    pub bank_size: usize,
    /// Rows drawn from the test split as queries (0 = all).
    pub query_size: usize,
    pub knn: KnnConfig,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self {
            knn_every: 0,
            bank_size: 2000,
            query_size: 500,
            knn: KnnConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub total_clients: usize,
    /// Clients sampled per round, without replacement.
    pub clients_per_round: usize,
    pub rounds: u32,
    pub local_iters: LocalIters,
    /// Rows per forward/backward pass.
    pub micro_batch: usize,
    /// Micro-batch gradients averaged into one optimizer step. The effective
    /// batch is `micro_batch · accumulation_steps`.
    pub accumulation_steps: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub seed: u64,
    pub eval: EvalPlan,
}

impl RoundConfig {
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accumulation_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_clients == 0 {
            return Err(Error::InvalidArgument("total_clients must be positive".into()));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.total_clients {
            return Err(Error::InvalidArgument(format!(
                "clients_per_round must be in 1..={}, got {}",
                self.total_clients, self.clients_per_round
            )));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("rounds must be positive".into()));
        }
        if self.micro_batch == 0 || self.accumulation_steps == 0 {
            return Err(Error::InvalidArgument(
                "micro_batch and accumulation_steps must be positive".into(),
            ));
        }
        if let LocalIters::Fixed(0) | LocalIters::Epochs(0) = self.local_iters {
            return Err(Error::InvalidArgument("local_iters must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Updates and aggregation
// ---------------------------------------------------------------------------

/// One client's contribution to a round: a parameter *delta* (new − old) and
/// the shard size used to weight it.
#[derive(Debug, Clone)]
pub struct ClientUpdate<F> {
    pub client_id: usize,
    pub delta: ParameterSet<F>,
    pub num_samples: usize,
}

/// State a personalization method keeps on the client between rounds.
#[derive(Debug, Clone)]
pub struct PersonalState<F> {
    pub params: ParameterSet<F>,
    pub optimizer: SgdMomentum<F>,
}

/// Everything a client hands back after its local work.
#[derive(Debug, Clone)]
pub struct LocalOutcome<F> {
    pub update: ClientUpdate<F>,
    /// Mean self-supervised loss over the client's local steps.
    pub mean_loss: f64,
    /// Updated per-client state, when the method maintains one.
    pub personal: Option<PersonalState<F>>,
}

/// Draw this round's participants without replacement and return them in
/// ascending order. The draw depends only on `(seed, round)`.
pub fn sample_clients(cfg: &RoundConfig, round: u32) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..cfg.total_clients).collect();
    if cfg.clients_per_round < cfg.total_clients {
        let mut rng = Stream::Sampling { round }.rng(cfg.seed);
        for i in 0..cfg.clients_per_round {
            let j = rng.random_range(i..cfg.total_clients);
            ids.swap(i, j);
        }
        ids.truncate(cfg.clients_per_round);
        ids.sort_unstable();
    }
    ids
}

/// Fold client deltas into the base parameters, each weighted by its share
/// of the round's samples. Updates are applied in ascending client id so the
/// floating-point result is independent of arrival order.
pub fn weighted_aggregate<F: Scalar>(
    base: &ParameterSet<F>,
    updates: &[ClientUpdate<F>],
) -> Result<ParameterSet<F>> {
    if updates.is_empty() {
        return Err(Error::Empty("round updates".into()));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_unstable_by_key(|&i| updates[i].client_id);
    for pair in order.windows(2) {
        if updates[pair[0]].client_id == updates[pair[1]].client_id {
            return Err(Error::InvalidArgument(format!(
                "duplicate update from client {}",
                updates[pair[0]].client_id
            )));
        }
    }
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    if updates.iter().any(|u| u.num_samples == 0) || total == 0 {
        return Err(Error::InvalidArgument(
            "every update must carry a positive sample count".into(),
        ));
    }
    let mut result = base.clone();
    for &i in &order {
        let u = &updates[i];
        base.ensure_same_schema(&u.delta).map_err(|e| {
            Error::SchemaMismatch(format!("client {}: {e}", u.client_id))
        })?;
        if !u.delta.all_finite() {
            return Err(Error::NonFinite(format!(
                "delta from client {}",
                u.client_id
            )));
        }
        let w = cast::<F>(u.num_samples as f64 / total as f64);
        result.axpy(w, &u.delta)?;
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Client-side optimization interface
// ---------------------------------------------------------------------------

/// Everything a client sees during one round of local work. Training data
/// arrives as an [`UnlabeledView`], so methods cannot touch labels even by
/// accident.
pub struct ClientCtx<'a> {
    pub client_id: usize,
    pub round: u32,
    /// Learning rate for this round (schedule already applied).
    pub lr: f64,
    pub cfg: &'a RoundConfig,
    pub encoder: &'a Encoder,
    pub predictor: &'a Predictor,
    pub data: UnlabeledView<'a>,
    pub policy: &'a AugmentationPolicy,
}

impl ClientCtx<'_> {
    /// Batch stream for this `(round, client)` pair.
    pub fn batch_rng(&self, seed: u64) -> ChaCha8Rng {
        Stream::Batches {
            round: self.round,
            client: self.client_id as u64,
        }
        .rng(seed)
    }

    /// Augmentation stream for this `(round, client)` pair.
    pub fn view_rng(&self, seed: u64) -> ChaCha8Rng {
        Stream::Views {
            round: self.round,
            client: self.client_id as u64,
        }
        .rng(seed)
    }
}

/// A client-side self-supervised optimizer: given the broadcast global
/// parameters (and any state it kept from earlier rounds), produce an update
/// for the server.
pub trait ClientSslOpt<F: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether round-level KNN should be measured on per-client personal
    /// models (averaged over participants) instead of the global model.
    fn personalized_eval(&self) -> bool {
        false
    }

    fn local_update(
        &self,
        ctx: &ClientCtx<'_>,
        global: &ParameterSet<F>,
        personal: Option<PersonalState<F>>,
    ) -> Result<LocalOutcome<F>>;
}

/// Lay out the round's optimizer steps as index positions into the client's
/// view: `plan[step][accum_slot]` is one micro-batch. Positions cycle
/// through fresh shuffles of the shard so every micro-batch is full-size
/// even when the shard is smaller than the effective batch.
pub fn batch_plan(
    view_len: usize,
    steps: usize,
    micro_batch: usize,
    accumulation_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<Vec<usize>>>> {
    if view_len == 0 {
        return Err(Error::Empty("client shard".into()));
    }
    if steps == 0 || micro_batch == 0 || accumulation_steps == 0 {
        return Err(Error::InvalidArgument(
            "batch plan needs positive steps, micro_batch, accumulation_steps".into(),
        ));
    }
    let mut order: Vec<usize> = (0..view_len).collect();
    let mut cursor = view_len; // force an initial shuffle
    let mut next = |rng: &mut ChaCha8Rng| {
        if cursor == view_len {
            use rand::seq::SliceRandom;
            order.shuffle(rng);
            cursor = 0;
        }
        let p = order[cursor];
        cursor += 1;
        p
    };
    let plan = (0..steps)
        .map(|_| {
            (0..accumulation_steps)
                .map(|_| (0..micro_batch).map(|_| next(rng)).collect())
                .collect()
        })
        .collect();
    Ok(plan)
}

// ---------------------------------------------------------------------------
// Round metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub participants: Vec<usize>,
    /// Sample-weighted mean of the participants' local training losses.
    pub mean_train_loss: f64,
    /// KNN indicator accuracy, when scheduled this round.
    pub knn_accuracy: Option<f64>,
    pub wall_time_s: f64,
}

impl RoundMetrics {
    /// JSON with the wall time zeroed: every field left is a pure function
    /// of (config, seed), so two runs of the same experiment — in-process or
    /// across a transport — must produce byte-identical canonical lines.
    pub fn canonical_json(&self) -> String {
        let mut copy = self.clone();
        copy.wall_time_s = 0.0;
        serde_json::to_string(&copy).expect("round metrics always serialize")
    }
}

/// One line-delimited JSON record per round.
pub fn write_metrics_log(path: &Path, history: &[RoundMetrics]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for m in history {
        serde_json::to_writer(&mut f, m)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_metrics_log(path: &Path) -> Result<Vec<RoundMetrics>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// The timing-free transcript of a run, one canonical line per round.
pub fn canonical_log(history: &[RoundMetrics]) -> String {
    let mut s = String::new();
    for m in history {
        s.push_str(&m.canonical_json());
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// The round loop
// ---------------------------------------------------------------------------

/// Callback invoked after every completed round (checkpointing, progress
/// reporting). Errors abort training.
pub trait RoundObserver<F: Scalar> {
    fn on_round(&mut self, global: &ParameterSet<F>, metrics: &RoundMetrics) -> Result<()>;
}

/// No-op observer for callers that only want the final state.
pub struct NoObserver;

impl<F: Scalar> RoundObserver<F> for NoObserver {
    fn on_round(&mut self, _global: &ParameterSet<F>, _metrics: &RoundMetrics) -> Result<()> {
        Ok(())
    }
}

pub struct TrainOutput<F> {
    pub global: ParameterSet<F>,
    /// Per-client state for methods that maintain one, keyed by client id.
    pub personal: BTreeMap<usize, PersonalState<F>>,
    pub history: Vec<RoundMetrics>,
}

/// Whether the plan schedules a KNN measurement for `round` (the final round
/// is always measured when the indicator is enabled at all).
pub fn knn_due(plan: &EvalPlan, round: u32, total: u32) -> bool {
    plan.knn_every > 0 && ((round + 1) % plan.knn_every == 0 || round + 1 == total)
}

/// A client's own KNN accuracy: bank from the head of its training shard,
/// queries from its local test set. `None` when the shard has no local test
/// samples. Used for round metrics of personalization methods, where the
/// quantity of interest is "how good is *my* model on *my* data".
pub fn client_local_knn<F: Scalar>(
    encoder: &Encoder,
    params: &ParameterSet<F>,
    dataset: &Dataset,
    shard: &ClientShard,
    plan: &EvalPlan,
) -> Result<Option<f64>> {
    if shard.test_indices.is_empty() {
        return Ok(None);
    }
    let bank: Vec<usize> = shard
        .train_indices
        .iter()
        .copied()
        .take(plan.bank_size.max(1))
        .collect();
    knn_indicator(encoder, params, dataset, &bank, &shard.test_indices, &plan.knn).map(Some)
}

/// Run synchronous federated self-supervised training to completion.
///
/// `shards` must contain exactly `cfg.total_clients` entries, sorted by
/// client id, partitioning the dataset's training split. Per-client state is
/// created lazily: the first time a client participates, the method receives
/// `None` and initializes from the broadcast model.
pub fn run_training<F: Scalar>(
    method: &dyn ClientSslOpt<F>,
    arch: &ArchConfig,
    init: ParameterSet<F>,
    dataset: &Dataset,
    shards: &[ClientShard],
    policy: &AugmentationPolicy,
    cfg: &RoundConfig,
    observer: &mut dyn RoundObserver<F>,
) -> Result<TrainOutput<F>> {
    cfg.validate()?;
    policy.validate()?;
    if shards.len() != cfg.total_clients {
        return Err(Error::InvalidArgument(format!(
            "config declares {} clients but {} shards were supplied",
            cfg.total_clients,
            shards.len()
        )));
    }
    for (i, s) in shards.iter().enumerate() {
        if s.client_id != i {
            return Err(Error::InvalidArgument(format!(
                "shards must be sorted by client id: position {i} holds client {}",
                s.client_id
            )));
        }
        if s.train_indices.is_empty() {
            return Err(Error::Empty(format!("client {i} training shard")));
        }
    }
    let (encoder, predictor) = arch.build()?;

    let mut global = init;
    let mut personal: BTreeMap<usize, PersonalState<F>> = BTreeMap::new();
    let mut history = Vec::with_capacity(cfg.rounds as usize);

    for round in 0..cfg.rounds {
        let start = Instant::now();
        let lr = cfg.schedule.lr_at(cfg.lr, round, cfg.rounds);
        let participants = sample_clients(cfg, round);

        let outcomes: Vec<(usize, Result<LocalOutcome<F>>)> = participants
            .par_iter()
            .map(|&client_id| {
                let ctx = ClientCtx {
                    client_id,
                    round,
                    lr,
                    cfg,
                    encoder: &encoder,
                    predictor: &predictor,
                    data: UnlabeledView::new(dataset, &shards[client_id].train_indices),
                    policy,
                };
                let carried = personal.get(&client_id).cloned();
                (client_id, method.local_update(&ctx, &global, carried))
            })
            .collect();

        let mut updates = Vec::with_capacity(outcomes.len());
        let mut loss_weighted = 0.0f64;
        let mut loss_samples = 0usize;
        for (client_id, outcome) in outcomes {
            let outcome = outcome.map_err(|e| e.in_client(round, client_id))?;
            loss_weighted += outcome.mean_loss * outcome.update.num_samples as f64;
            loss_samples += outcome.update.num_samples;
            if let Some(state) = outcome.personal {
                personal.insert(client_id, state);
            }
            updates.push(outcome.update);
        }
        global = weighted_aggregate(&global, &updates)?;

        let knn_accuracy = if knn_due(&cfg.eval, round, cfg.rounds) {
            Some(measure_knn(
                method,
                &encoder,
                &global,
                &personal,
                dataset,
                shards,
                &participants,
                cfg,
                round,
            )?)
        } else {
            None
        };

        let metrics = RoundMetrics {
            round,
            participants,
            mean_train_loss: loss_weighted / loss_samples.max(1) as f64,
            knn_accuracy,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "round {:>4}/{}: loss {:.4}{} ({} clients, {:.1}s)",
            round + 1,
            cfg.rounds,
            metrics.mean_train_loss,
            metrics
                .knn_accuracy
                .map(|a| format!(", knn {:.3}", a))
                .unwrap_or_default(),
            metrics.participants.len(),
            metrics.wall_time_s,
        );
        observer.on_round(&global, &metrics)?;
        history.push(metrics);
    }

    Ok(TrainOutput {
        global,
        personal,
        history,
    })
}

/// Round-level KNN. Global methods embed with the aggregated model over a
/// shared bank/query subset; personalized methods average per-participant
/// accuracies, each measured with that client's personal model on its own
/// local test set.
#[allow(clippy::too_many_arguments)]
fn measure_knn<F: Scalar>(
    method: &dyn ClientSslOpt<F>,
    encoder: &Encoder,
    global: &ParameterSet<F>,
    personal: &BTreeMap<usize, PersonalState<F>>,
    dataset: &Dataset,
    shards: &[ClientShard],
    participants: &[usize],
    cfg: &RoundConfig,
    round: u32,
) -> Result<f64> {
    let plan = &cfg.eval;
    if !method.personalized_eval() {
        let (bank, queries) =
            eval_subsets(dataset, plan.bank_size, plan.query_size, cfg.seed, round);
        return knn_indicator(encoder, global, dataset, &bank, &queries, &plan.knn);
    }
    let mut accs = Vec::with_capacity(participants.len());
    for &client_id in participants {
        let params = personal
            .get(&client_id)
            .map(|s| &s.params)
            .unwrap_or(global);
        if let Some(acc) =
            client_local_knn(encoder, params, dataset, &shards[client_id], plan)?
        {
            accs.push(acc);
        }
    }
    if accs.is_empty() {
        return Err(Error::Empty(
            "personalized knn: no participant has a local test set".into(),
        ));
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn cfg(total: usize, per_round: usize, seed: u64) -> RoundConfig {
        RoundConfig {
            total_clients: total,
            clients_per_round: per_round,
            rounds: 10,
            local_iters: LocalIters::Fixed(2),
            micro_batch: 8,
            accumulation_steps: 1,
            lr: 0.05,
            schedule: LrSchedule::Constant,
            momentum: 0.9,
            seed,
            eval: EvalPlan::default(),
        }
    }

    fn update(client_id: usize, value: f64, n: usize) -> ClientUpdate<f64> {
        let mut delta = ParameterSet::new();
        delta
            .insert("w", arr1(&[value, 2.0 * value]).into_dyn())
            .unwrap();
        ClientUpdate {
            client_id,
            delta,
            num_samples: n,
        }
    }

    #[test]
    fn aggregation_matches_hand_weighted_sum() {
        let mut base = ParameterSet::new();
        base.insert("w", arr1(&[1.0f64, -1.0]).into_dyn()).unwrap();
        // Weights 10/60, 20/60, 30/60 on deltas 0.6, -0.3, 0.1:
        //   0.6/6 - 0.3/3 + 0.1/2 = 0.1 - 0.1 + 0.05 = 0.05
        let updates = vec![update(0, 0.6, 10), update(1, -0.3, 20), update(2, 0.1, 30)];
        let out = weighted_aggregate(&base, &updates).unwrap();
        let w = out.get("w").unwrap();
        assert!((w[0] - 1.05).abs() < 1e-12);
        assert!((w[1] - (-1.0 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn aggregation_is_order_invariant() {
        let mut base = ParameterSet::new();
        base.insert("w", arr1(&[0.25f64, 0.5]).into_dyn()).unwrap();
        let a = vec![update(0, 0.17, 7), update(1, -0.4, 13), update(2, 0.9, 3)];
        let mut b = a.clone();
        b.reverse();
        let out_a = weighted_aggregate(&base, &a).unwrap();
        let out_b = weighted_aggregate(&base, &b).unwrap();
        assert_eq!(out_a.max_abs_diff(&out_b).unwrap(), 0.0);
    }

    #[test]
    fn aggregation_rejects_bad_updates() {
        let mut base = ParameterSet::new();
        base.insert("w", arr1(&[0.0f64, 0.0]).into_dyn()).unwrap();

        assert!(matches!(
            weighted_aggregate::<f64>(&base, &[]).unwrap_err(),
            Error::Empty(_)
        ));
        assert!(weighted_aggregate(&base, &[update(0, 1.0, 0)]).is_err());
        assert!(weighted_aggregate(&base, &[update(0, 1.0, 5), update(0, 1.0, 5)]).is_err());

        let mut odd = ParameterSet::new();
        odd.insert("v", arr1(&[1.0f64, 1.0]).into_dyn()).unwrap();
        let bad = ClientUpdate {
            client_id: 1,
            delta: odd,
            num_samples: 4,
        };
        assert!(matches!(
            weighted_aggregate(&base, &[bad]).unwrap_err(),
            Error::SchemaMismatch(_)
        ));

        let mut nan = ParameterSet::new();
        nan.insert("w", arr1(&[f64::NAN, 0.0]).into_dyn()).unwrap();
        let bad = ClientUpdate {
            client_id: 2,
            delta: nan,
            num_samples: 4,
        };
        assert!(matches!(
            weighted_aggregate(&base, &[bad]).unwrap_err(),
            Error::NonFinite(_)
        ));
    }

    #[test]
    fn scaling_all_weights_changes_nothing() {
        // Multiplying every sample count by a constant must not move the
        // result: only the *shares* matter.
        let mut base = ParameterSet::new();
        base.insert("w", arr1(&[1.0f64, 2.0]).into_dyn()).unwrap();
        let a = vec![update(0, 0.3, 5), update(1, -0.2, 15)];
        let scaled = vec![update(0, 0.3, 500), update(1, -0.2, 1500)];
        let out_a = weighted_aggregate(&base, &a).unwrap();
        let out_b = weighted_aggregate(&base, &scaled).unwrap();
        assert!(out_a.max_abs_diff(&out_b).unwrap() < 1e-15);
    }

    #[test]
    fn sampling_is_deterministic_sorted_and_exhaustive() {
        let c = cfg(20, 5, 99);
        let a = sample_clients(&c, 3);
        let b = sample_clients(&c, 3);
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&id| id < 20));
        assert_ne!(sample_clients(&c, 4), a, "rounds draw different subsets");

        // Full participation short-circuits to everyone.
        let full = cfg(6, 6, 99);
        assert_eq!(sample_clients(&full, 0), (0..6).collect::<Vec<_>>());

        // Over many rounds every client appears at least once.
        let mut seen = vec![false; 20];
        for round in 0..200 {
            for id in sample_clients(&c, round) {
                seen[id] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn batch_plan_covers_the_shard_with_full_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plan = batch_plan(10, 3, 4, 2, &mut rng).unwrap();
        assert_eq!(plan.len(), 3);
        for step in &plan {
            assert_eq!(step.len(), 2);
            for micro in step {
                assert_eq!(micro.len(), 4);
                assert!(micro.iter().all(|&p| p < 10));
            }
        }
        // 24 draws over a shard of 10: each position appears 2 or 3 times,
        // because draws cycle through complete reshuffles.
        let mut counts = vec![0usize; 10];
        for step in &plan {
            for micro in step {
                for &p in micro {
                    counts[p] += 1;
                }
            }
        }
        assert!(counts.iter().all(|&c| (2..=3).contains(&c)), "{counts:?}");

        assert!(batch_plan(0, 1, 1, 1, &mut rng).is_err());
    }

    use rand::SeedableRng;

    #[test]
    fn metrics_round_trip_and_canonicalize() {
        let history = vec![
            RoundMetrics {
                round: 0,
                participants: vec![1, 3],
                mean_train_loss: -0.53125,
                knn_accuracy: None,
                wall_time_s: 1.25,
            },
            RoundMetrics {
                round: 1,
                participants: vec![0, 2],
                mean_train_loss: -0.625,
                knn_accuracy: Some(0.4375),
                wall_time_s: 0.75,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        write_metrics_log(&path, &history).unwrap();
        let back = read_metrics_log(&path).unwrap();
        assert_eq!(back, history);

        // Canonical form is identical for runs that differ only in timing.
        let mut slower = history.clone();
        slower[0].wall_time_s = 99.0;
        assert_eq!(canonical_log(&history), canonical_log(&slower));
        assert!(canonical_log(&history).contains("\"wall_time_s\":0.0"));
    }

    #[test]
    fn training_loop_runs_rounds_and_reports_metrics() {
        use crate::data::{synthetic_dataset, SyntheticSpec};
        use crate::model::{ArchConfig, BackboneConfig};
        use crate::partition::{attach_local_tests, dirichlet_partition, PartitionSpec};
        use crate::personalize::{LaSsfl, PerSsfl};
        use crate::ssl::AugmentationPolicy;

        let dataset = synthetic_dataset(&SyntheticSpec {
            num_classes: 3,
            num_train: 48,
            num_test: 12,
            side: 4,
            seed: 8,
        })
        .unwrap();
        let spec = PartitionSpec {
            alpha: 1.0,
            num_clients: 3,
            num_classes: 3,
            seed: 2,
        };
        let mut shards = dirichlet_partition(dataset.train_labels(), &spec).unwrap();
        attach_local_tests(
            &mut shards,
            dataset.train_labels(),
            dataset.test_labels(),
            dataset.test_offset(),
            3,
            2,
        )
        .unwrap();
        let arch = ArchConfig {
            backbone: BackboneConfig::Mlp {
                in_dim: 48,
                hidden: vec![12],
            },
            embed_dim: 8,
            predictor_bottleneck: 2,
        };
        let cfg = RoundConfig {
            total_clients: 3,
            clients_per_round: 2,
            rounds: 3,
            local_iters: LocalIters::Fixed(2),
            micro_batch: 6,
            accumulation_steps: 1,
            lr: 0.05,
            schedule: LrSchedule::Cosine,
            momentum: 0.9,
            seed: 77,
            eval: EvalPlan {
                knn_every: 2,
                bank_size: 30,
                query_size: 10,
                knn: KnnConfig {
                    k: 5,
                    temperature: 0.1,
                },
            },
        };
        let init = arch.init_params::<f32>(1).unwrap();
        let policy = AugmentationPolicy::identity();

        let out = run_training(
            &LaSsfl,
            &arch,
            init.clone(),
            &dataset,
            &shards,
            &policy,
            &cfg,
            &mut NoObserver,
        )
        .unwrap();
        assert_eq!(out.history.len(), 3);
        assert!(out.personal.is_empty(), "plain method keeps no state");
        for (i, m) in out.history.iter().enumerate() {
            assert_eq!(m.round, i as u32);
            assert_eq!(m.participants.len(), 2);
            assert!(m.mean_train_loss.is_finite());
            // knn_every = 2 plus the always-measured last round.
            assert_eq!(m.knn_accuracy.is_some(), i == 1 || i == 2);
        }
        assert!(out.global.max_abs_diff(&init).unwrap() > 0.0);

        // Same config twice → identical canonical transcripts.
        let again = run_training(
            &LaSsfl,
            &arch,
            init.clone(),
            &dataset,
            &shards,
            &policy,
            &cfg,
            &mut NoObserver,
        )
        .unwrap();
        assert_eq!(canonical_log(&out.history), canonical_log(&again.history));

        // A stateful method accumulates per-participant state and measures
        // personalized KNN.
        let per = run_training(
            &PerSsfl { lambda: 0.1 },
            &arch,
            init,
            &dataset,
            &shards,
            &policy,
            &cfg,
            &mut NoObserver,
        )
        .unwrap();
        assert!(!per.personal.is_empty());
        assert!(per.history[2].knn_accuracy.unwrap().is_finite());
    }

    #[test]
    fn config_validation_catches_nonsense() {
        let good = cfg(4, 2, 1);
        assert!(good.validate().is_ok());
        for bad in [
            RoundConfig { total_clients: 0, ..good },
            RoundConfig { clients_per_round: 5, ..good },
            RoundConfig { clients_per_round: 0, ..good },
            RoundConfig { rounds: 0, ..good },
            RoundConfig { micro_batch: 0, ..good },
            RoundConfig { lr: -1.0, ..good },
            RoundConfig { momentum: 1.0, ..good },
            RoundConfig { local_iters: LocalIters::Fixed(0), ..good },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
