//! Label-side evaluation of frozen encoders.
//!
//! Everything here runs *outside* the self-supervised training path: labels
//! enter only through these functions, and every protocol treats the encoder
//! parameters as read-only. Two families are provided:
//!
//! - a cheap KNN indicator (cosine-weighted vote in embedding space) used to
//!   track representation quality between rounds, and
//! - linear probes: a federated probe on one shared encoder, a personalized
//!   probe per client encoder, and a "naive" probe that shares one classifier
//!   across per-client encoders — the control that shows why mixing encoders
//!   under a single linear head is unfair.

use std::cmp::Ordering;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Encoder, LinearClassifier, LrSchedule, SgdMomentum};
use crate::params::ParameterSet;
use crate::partition::ClientShard;
use crate::rng::{derive_seed, Stream};
use crate::ssl::NORM_EPS;
use crate::{cast, Scalar};

/// Batch size used when pushing a dataset through a frozen encoder.
pub const EMBED_CHUNK: usize = 256;

// ---------------------------------------------------------------------------
// KNN indicator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    /// Neighbours consulted per query (clamped to the bank size).
    pub k: usize,
    /// Softmax temperature for the cosine-similarity vote weights.
    pub temperature: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 200,
            temperature: 0.1,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("knn k must be positive".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "knn temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Run the frozen encoder over `indices` in fixed-size chunks and return the
/// stacked embeddings, one row per index.
pub fn embed_indices<F: Scalar>(
    encoder: &Encoder,
    ps: &ParameterSet<F>,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Array2<F>> {
    if indices.is_empty() {
        return Err(Error::Empty("embedding index list".into()));
    }
    let mut out = Array2::zeros((indices.len(), encoder.output_dim));
    let mut row = 0;
    for chunk in indices.chunks(EMBED_CHUNK) {
        let z = encoder.forward_eval(ps, &dataset.batch::<F>(chunk)?)?;
        out.slice_mut(ndarray::s![row..row + chunk.len(), ..])
            .assign(&z);
        row += chunk.len();
    }
    Ok(out)
}

fn normalize_rows<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt() + cast::<F>(NORM_EPS);
        row.mapv_inplace(|v| v / norm);
    }
    out
}

/// Classify each query by a cosine-weighted vote among its `k` nearest bank
/// rows. Neighbour ties break toward the lower bank index and class-score
/// ties toward the lower class, so results are order-deterministic.
pub fn knn_classify<F: Scalar>(
    bank: &Array2<F>,
    bank_labels: &[usize],
    queries: &Array2<F>,
    num_classes: usize,
    cfg: &KnnConfig,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    if bank.nrows() == 0 {
        return Err(Error::Empty("knn bank".into()));
    }
    if bank_labels.len() != bank.nrows() {
        return Err(Error::ShapeMismatch {
            context: "knn bank labels".into(),
            expected: vec![bank.nrows()],
            got: vec![bank_labels.len()],
        });
    }
    if queries.ncols() != bank.ncols() {
        return Err(Error::ShapeMismatch {
            context: "knn query width".into(),
            expected: vec![bank.ncols()],
            got: vec![queries.ncols()],
        });
    }
    if let Some(&bad) = bank_labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "bank label {bad} out of range for {num_classes} classes"
        )));
    }
    let k = cfg.k.min(bank.nrows());
    if k < cfg.k {
        log::warn!(
            "knn bank has only {} rows; clamping k from {} to {k}",
            bank.nrows(),
            cfg.k
        );
    }

    let bank_unit = normalize_rows(bank);
    let query_unit = normalize_rows(queries);
    let sims = query_unit.dot(&bank_unit.t());

    let inv_temp = 1.0 / cfg.temperature;
    let mut predictions = Vec::with_capacity(queries.nrows());
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(bank.nrows());
    for sim_row in sims.axis_iter(Axis(0)) {
        ranked.clear();
        ranked.extend(
            sim_row
                .iter()
                .enumerate()
                .map(|(j, &s)| (s.to_f64().unwrap_or(f64::NEG_INFINITY), j)),
        );
        ranked.sort_unstable_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        let mut scores = vec![0.0f64; num_classes];
        for &(sim, j) in ranked.iter().take(k) {
            scores[bank_labels[j]] += (sim * inv_temp).exp();
        }
        let best = scores
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (c, &v)| {
                if v > bv {
                    (c, v)
                } else {
                    (bi, bv)
                }
            })
            .0;
        predictions.push(best);
    }
    Ok(predictions)
}

/// Embed bank and query samples with a frozen encoder and return the fraction
/// of queries whose KNN vote matches their true label.
pub fn knn_indicator<F: Scalar>(
    encoder: &Encoder,
    ps: &ParameterSet<F>,
    dataset: &Dataset,
    bank_indices: &[usize],
    query_indices: &[usize],
    cfg: &KnnConfig,
) -> Result<f64> {
    if query_indices.is_empty() {
        return Err(Error::Empty("knn query set".into()));
    }
    let bank = embed_indices(encoder, ps, dataset, bank_indices)?;
    let queries = embed_indices(encoder, ps, dataset, query_indices)?;
    let bank_labels: Vec<usize> = bank_indices.iter().map(|&i| dataset.label(i)).collect();
    let predicted = knn_classify(&bank, &bank_labels, &queries, dataset.num_classes, cfg)?;
    let mut correct = 0usize;
    for (&idx, &pred) in query_indices.iter().zip(&predicted) {
        if pred == dataset.label(idx) {
            correct += 1;
        }
    }
    Ok(correct as f64 / query_indices.len() as f64)
}

/// Pick the round's evaluation subsets: a bank drawn from the training split
/// and queries drawn from the test split. A size of zero (or one exceeding
/// the split) means "use the whole split". Both lists come back sorted so the
/// embedding order is stable.
pub fn eval_subsets(
    dataset: &Dataset,
    bank_size: usize,
    query_size: usize,
    seed: u64,
    round: u32,
) -> (Vec<usize>, Vec<usize>) {
    let pick = |n: usize, offset: usize, want: usize, lane: u64| -> Vec<usize> {
        let mut all: Vec<usize> = (offset..offset + n).collect();
        if want == 0 || want >= n {
            return all;
        }
        let mut rng = Stream::Eval { round, lane }.rng(seed);
        for i in 0..want {
            let j = rng.random_range(i..n);
            all.swap(i, j);
        }
        let mut subset = all[..want].to_vec();
        subset.sort_unstable();
        subset
    };
    let bank = pick(dataset.num_train, 0, bank_size, 0);
    let queries = pick(
        dataset.num_test(),
        dataset.test_offset(),
        query_size,
        1,
    );
    (bank, queries)
}

// ---------------------------------------------------------------------------
// Linear probes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeProtocol {
    /// One classifier trained federated on top of one shared encoder.
    FederatedLinear,
    /// One classifier per client, each on top of that client's encoder.
    PersonalizedLinear,
    /// One shared classifier trained across *different* per-client encoders.
    NaiveFederatedLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAccuracy {
    pub client_id: usize,
    pub accuracy: f64,
    pub num_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub protocol: ProbeProtocol,
    pub per_client: Vec<ClientAccuracy>,
    /// Unweighted mean over clients, so small shards count as much as large
    /// ones — the quantity personalization is judged on.
    pub mean_accuracy: f64,
}

impl ProbeResult {
    fn from_parts(protocol: ProbeProtocol, per_client: Vec<ClientAccuracy>) -> Self {
        let mean_accuracy = if per_client.is_empty() {
            0.0
        } else {
            per_client.iter().map(|c| c.accuracy).sum::<f64>() / per_client.len() as f64
        };
        Self {
            protocol,
            per_client,
            mean_accuracy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 0.3,
            momentum: 0.9,
            batch: 256,
            schedule: LrSchedule::Cosine,
            seed: 13,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument(
                "probe epochs and batch must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "probe lr must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

fn gather_rows<F: Scalar>(features: &Array2<F>, idxs: &[usize]) -> Array2<F> {
    features.select(Axis(0), idxs)
}

fn probe_epoch<F: Scalar>(
    clf: &LinearClassifier,
    ps: &mut ParameterSet<F>,
    opt: &mut SgdMomentum<F>,
    features: &Array2<F>,
    labels: &[usize],
    batch: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut order: Vec<usize> = (0..features.nrows()).collect();
    order.shuffle(rng);
    for chunk in order.chunks(batch) {
        let feats = gather_rows(features, chunk);
        let labs: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let mut grads = ParameterSet::new();
        clf.loss_and_grads(ps, &feats, &labs, &mut grads)?;
        opt.step(ps, &grads, cast(lr))?;
    }
    Ok(())
}

fn probe_accuracy<F: Scalar>(
    clf: &LinearClassifier,
    ps: &ParameterSet<F>,
    features: &Array2<F>,
    labels: &[usize],
) -> Result<f64> {
    let (logits, _) = clf.logits(ps, features)?;
    let mut correct = 0usize;
    for (row, &y) in logits.axis_iter(Axis(0)).zip(labels) {
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
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Train one classifier on a single feature table. Used by the personalized
/// protocol and exposed for direct reuse.
pub fn train_probe<F: Scalar>(
    features: &Array2<F>,
    labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<(LinearClassifier, ParameterSet<F>)> {
    cfg.validate()?;
    if features.nrows() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "probe labels".into(),
            expected: vec![features.nrows()],
            got: vec![labels.len()],
        });
    }
    let clf = LinearClassifier::new(features.ncols(), num_classes);
    let mut ps = clf.init::<F>(cfg.seed)?;
    let mut opt = SgdMomentum::new(cfg.momentum);
    let mut rng = ChaCha8Rng::from_seed(derive_seed(&[cfg.seed, 0x70726f62]));
    for epoch in 0..cfg.epochs {
        let lr = cfg
            .schedule
            .lr_at(cfg.lr, epoch as u32, cfg.epochs as u32);
        probe_epoch(&clf, &mut ps, &mut opt, features, labels, cfg.batch, lr, &mut rng)?;
    }
    Ok((clf, ps))
}

fn shard_labels(dataset: &Dataset, indices: &[usize]) -> Vec<usize> {
    indices.iter().map(|&i| dataset.label(i)).collect()
}

fn check_shards(shards: &[ClientShard]) -> Result<()> {
    if shards.is_empty() {
        return Err(Error::Empty("client shards".into()));
    }
    for s in shards {
        if s.test_indices.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "client {} has no local test samples; attach local test sets before probing",
                s.client_id
            )));
        }
    }
    Ok(())
}

/// Federated linear probe: freeze the shared encoder, then train one linear
/// classifier with synchronous weighted averaging — every round each client
/// runs one epoch over its own features and the deltas are combined in
/// proportion to shard size. Reported accuracy is per client on its local
/// test set.
pub fn federated_linear_probe<F: Scalar>(
    encoder: &Encoder,
    encoder_params: &ParameterSet<F>,
    dataset: &Dataset,
    shards: &[ClientShard],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    check_shards(shards)?;
    let train_feats: Vec<(Array2<F>, Vec<usize>)> = shards
        .iter()
        .map(|s| {
            Ok((
                embed_indices(encoder, encoder_params, dataset, &s.train_indices)?,
                shard_labels(dataset, &s.train_indices),
            ))
        })
        .collect::<Result<_>>()?;

    let clf = LinearClassifier::new(encoder.output_dim, dataset.num_classes);
    let mut ps = clf.init::<F>(cfg.seed)?;
    let total: f64 = shards.iter().map(|s| s.train_indices.len() as f64).sum();
    for round in 0..cfg.epochs {
        let lr = cfg
            .schedule
            .lr_at(cfg.lr, round as u32, cfg.epochs as u32);
        let mut aggregate = ps.zeros_like();
        for (shard, (feats, labels)) in shards.iter().zip(&train_feats) {
            let mut local = ps.clone();
            let mut opt = SgdMomentum::new(cfg.momentum);
            let mut rng = ChaCha8Rng::from_seed(derive_seed(&[
                cfg.seed,
                0x666c70,
                round as u64,
                shard.client_id as u64,
            ]));
            probe_epoch(&clf, &mut local, &mut opt, feats, labels, cfg.batch, lr, &mut rng)?;
            let delta = local.sub(&ps)?;
            aggregate.axpy(cast::<F>(shard.train_indices.len() as f64 / total), &delta)?;
        }
        ps.axpy(F::one(), &aggregate)?;
    }

    let mut per_client = Vec::with_capacity(shards.len());
    for shard in shards {
        let feats = embed_indices(encoder, encoder_params, dataset, &shard.test_indices)?;
        let labels = shard_labels(dataset, &shard.test_indices);
        per_client.push(ClientAccuracy {
            client_id: shard.client_id,
            accuracy: probe_accuracy(&clf, &ps, &feats, &labels)?,
            num_test: shard.test_indices.len(),
        });
    }
    Ok(ProbeResult::from_parts(
        ProbeProtocol::FederatedLinear,
        per_client,
    ))
}

/// Personalized linear probe: for each client, freeze *that client's*
/// encoder, train a fresh classifier on the full training split embedded
/// under it, and test on the client's local test set. `client_params` must
/// supply parameters for every shard, sorted by client id.
pub fn personalized_linear_probe<F: Scalar>(
    encoder: &Encoder,
    client_params: &[(usize, &ParameterSet<F>)],
    dataset: &Dataset,
    shards: &[ClientShard],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    check_shards(shards)?;
    let all_train: Vec<usize> = (0..dataset.num_train).collect();
    let train_labels = shard_labels(dataset, &all_train);
    let mut per_client = Vec::with_capacity(shards.len());
    for shard in shards {
        let params = lookup_client(client_params, shard.client_id)?;
        let train_feats = embed_indices(encoder, params, dataset, &all_train)?;
        let (clf, clf_ps) = train_probe(&train_feats, &train_labels, dataset.num_classes, cfg)?;
        let test_feats = embed_indices(encoder, params, dataset, &shard.test_indices)?;
        let test_labels = shard_labels(dataset, &shard.test_indices);
        per_client.push(ClientAccuracy {
            client_id: shard.client_id,
            accuracy: probe_accuracy(&clf, &clf_ps, &test_feats, &test_labels)?,
            num_test: shard.test_indices.len(),
        });
    }
    Ok(ProbeResult::from_parts(
        ProbeProtocol::PersonalizedLinear,
        per_client,
    ))
}

/// Naive federated probe: clients keep their own (different) encoders but
/// train a *single* shared classifier by weighted averaging. The classifier
/// must serve incompatible feature spaces at once, which is exactly why this
/// baseline underperforms per-client classifiers.
pub fn naive_federated_probe<F: Scalar>(
    encoder: &Encoder,
    client_params: &[(usize, &ParameterSet<F>)],
    dataset: &Dataset,
    shards: &[ClientShard],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    check_shards(shards)?;
    let mut train_feats = Vec::with_capacity(shards.len());
    for shard in shards {
        let params = lookup_client(client_params, shard.client_id)?;
        train_feats.push((
            embed_indices(encoder, params, dataset, &shard.train_indices)?,
            shard_labels(dataset, &shard.train_indices),
        ));
    }

    let clf = LinearClassifier::new(encoder.output_dim, dataset.num_classes);
    let mut ps = clf.init::<F>(cfg.seed)?;
    let total: f64 = shards.iter().map(|s| s.train_indices.len() as f64).sum();
    for round in 0..cfg.epochs {
        let lr = cfg
            .schedule
            .lr_at(cfg.lr, round as u32, cfg.epochs as u32);
        let mut aggregate = ps.zeros_like();
        for (shard, (feats, labels)) in shards.iter().zip(&train_feats) {
            let mut local = ps.clone();
            let mut opt = SgdMomentum::new(cfg.momentum);
            let mut rng = ChaCha8Rng::from_seed(derive_seed(&[
                cfg.seed,
                0x6e6c70,
                round as u64,
                shard.client_id as u64,
            ]));
            probe_epoch(&clf, &mut local, &mut opt, feats, labels, cfg.batch, lr, &mut rng)?;
            let delta = local.sub(&ps)?;
            aggregate.axpy(cast::<F>(shard.train_indices.len() as f64 / total), &delta)?;
        }
        ps.axpy(F::one(), &aggregate)?;
    }

    let mut per_client = Vec::with_capacity(shards.len());
    for shard in shards {
        let params = lookup_client(client_params, shard.client_id)?;
        let feats = embed_indices(encoder, params, dataset, &shard.test_indices)?;
        let labels = shard_labels(dataset, &shard.test_indices);
        per_client.push(ClientAccuracy {
            client_id: shard.client_id,
            accuracy: probe_accuracy(&clf, &ps, &feats, &labels)?,
            num_test: shard.test_indices.len(),
        });
    }
    Ok(ProbeResult::from_parts(
        ProbeProtocol::NaiveFederatedLinear,
        per_client,
    ))
}

fn lookup_client<'a, F: Scalar>(
    client_params: &[(usize, &'a ParameterSet<F>)],
    client_id: usize,
) -> Result<&'a ParameterSet<F>> {
    client_params
        .iter()
        .find(|(id, _)| *id == client_id)
        .map(|(_, p)| *p)
        .ok_or_else(|| Error::MissingParam(format!("no parameters supplied for client {client_id}")))
}
