//! Splitting a dataset across clients.
//!
//! Two schemes are supported:
//!
//! * **Dirichlet label skew** — for each class, a proportion vector over
//!   clients is drawn from `Dir(α)` and the class's samples are dealt out
//!   accordingly. Small `α` concentrates each class on few clients
//!   (pathological non-IID); large `α` approaches a uniform IID split.
//! * **Natural ownership** — an external `(sample_id, owner_id)` table
//!   defines the split, as in datasets where each photographer or device is
//!   a client. Owners below a minimum sample count are dropped and a
//!   fraction of each owner's samples is held out as their local test set.
//!
//! Dirichlet shards initially carry train indices only; synthetic per-client
//! test sets are attached afterwards by sampling the global test pool with
//! each client's own label proportions, so local evaluation sees the same
//! skew as local training.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Parameters of a Dirichlet label-skew split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub alpha: f64,
    pub num_clients: usize,
    pub num_classes: usize,
    pub seed: u64,
}

/// One client's slice of the global index space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl ClientShard {
    pub fn num_train(&self) -> usize {
        self.train_indices.len()
    }
}

/// How a partition file was produced; stored alongside the shards so a run
/// can be audited or reproduced from the file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum PartitionMeta {
    Dirichlet(PartitionSpec),
    Natural {
        min_samples: usize,
        test_fraction: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub spec: PartitionMeta,
    pub shards: Vec<ClientShard>,
}

impl PartitionFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One `Dir(α)` draw over `k` cells via normalized Gamma(α, 1) variates.
fn dirichlet_draw(alpha: f64, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        // For very small alpha every variate can underflow to zero; redraw.
        if sum.is_finite() && sum > 0.0 {
            return draws.into_iter().map(|g| g / sum).collect();
        }
    }
}

/// Largest-remainder rounding of `total · weights` into integer counts that
/// sum to `total` exactly. Ties go to the lower index.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(weights.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(weights.len());
    let mut assigned = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        let target = w * total as f64;
        let base = target.floor() as usize;
        counts.push(base);
        assigned += base;
        remainders.push((i, target - base as f64));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    for &(i, _) in remainders.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

const MAX_REDRAWS: u64 = 10;

/// Dirichlet label-skew split of `labels` (the training labels, in global
/// index order) into `spec.num_clients` shards. Shards come back with train
/// indices only; see [`attach_local_tests`].
pub fn dirichlet_partition(labels: &[usize], spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    if !(spec.alpha.is_finite() && spec.alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dirichlet alpha must be positive and finite, got {}",
            spec.alpha
        )));
    }
    if spec.num_clients == 0 {
        return Err(Error::InvalidArgument("num_clients must be positive".into()));
    }
    if labels.is_empty() {
        return Err(Error::Empty("labels for partitioning".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            spec.num_classes
        )));
    }

    // Indices per class, in stable order.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); spec.num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    for attempt in 0..MAX_REDRAWS {
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); spec.num_clients];
        for (class, class_indices) in by_class.iter().enumerate() {
            if class_indices.is_empty() {
                continue;
            }
            let mut rng = Stream::Partition {
                class: class as u64,
                attempt,
            }
            .rng(spec.seed);
            let weights = dirichlet_draw(spec.alpha, spec.num_clients, &mut rng);
            let counts = apportion(class_indices.len(), &weights);
            let mut shuffled = class_indices.clone();
            shuffled.shuffle(&mut rng);
            let mut cursor = 0;
            for (client, &count) in counts.iter().enumerate() {
                shards[client].extend_from_slice(&shuffled[cursor..cursor + count]);
                cursor += count;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            return Ok(shards
                .into_iter()
                .enumerate()
                .map(|(client_id, mut train_indices)| {
                    train_indices.sort_unstable();
                    ClientShard {
                        client_id,
                        train_indices,
                        test_indices: Vec::new(),
                    }
                })
                .collect());
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not produce non-empty shards after {MAX_REDRAWS} draws \
         (alpha = {}, clients = {}, samples = {}); the split is too skewed \
         for this population",
        spec.alpha,
        spec.num_clients,
        labels.len()
    )))
}

/// Give each shard a local test set drawn from the global test pool with the
/// shard's own label proportions. `test_labels` are the pool's labels and
/// `test_offset` is the global index of the pool's first sample; local test
/// sizes scale with the client's share of training data.
pub fn attach_local_tests(
    shards: &mut [ClientShard],
    train_labels: &[usize],
    test_labels: &[usize],
    test_offset: usize,
    num_classes: usize,
    seed: u64,
) -> Result<()> {
    if test_labels.is_empty() {
        return Err(Error::Empty("global test pool".into()));
    }
    let mut pool_by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in test_labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "test label {l} out of range for {num_classes} classes"
            )));
        }
        pool_by_class[l].push(test_offset + i);
    }
    let total_train: usize = shards.iter().map(ClientShard::num_train).sum();

    for shard in shards.iter_mut() {
        let mut class_counts = vec![0usize; num_classes];
        for &idx in &shard.train_indices {
            let l = *train_labels.get(idx).ok_or_else(|| {
                Error::InvalidArgument(format!("train index {idx} out of label range"))
            })?;
            class_counts[l] += 1;
        }
        let n_train = shard.num_train().max(1);
        let local_test_total = ((test_labels.len() as f64) * (n_train as f64)
            / (total_train.max(1) as f64))
            .round()
            .max(1.0) as usize;
        let proportions: Vec<f64> = class_counts
            .iter()
            .map(|&c| c as f64 / n_train as f64)
            .collect();
        let mut targets = apportion(local_test_total, &proportions);

        let mut rng = Stream::LocalTest {
            client: shard.client_id as u64,
        }
        .rng(seed);
        let mut picked = Vec::with_capacity(local_test_total);
        for (class, target) in targets.iter_mut().enumerate() {
            let pool = &pool_by_class[class];
            let take = (*target).min(pool.len());
            if take == 0 {
                continue;
            }
            // Partial Fisher-Yates over a copy of the pool.
            let mut copy = pool.clone();
            for i in 0..take {
                let j = rng.random_range(i..copy.len());
                copy.swap(i, j);
            }
            picked.extend_from_slice(&copy[..take]);
        }
        picked.sort_unstable();
        shard.test_indices = picked;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Natural (ownership-table) partitions
// ---------------------------------------------------------------------------

/// Parse a delimited `(sample_id, owner_id)` table. Accepts comma, tab, or
/// whitespace delimiters, skips blank and `#`-comment lines, and tolerates a
/// single header line.
pub fn parse_ownership_table(text: &str) -> Result<Vec<(usize, String)>> {
    let mut rows = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split([',', '\t', ' ', ';']).filter(|f| !f.is_empty());
        let first = fields.next().ok_or_else(|| Error::Decode {
            offset: lineno,
            reason: format!("line {}: no fields", lineno + 1),
        })?;
        let second = fields.next();
        match (first.parse::<usize>(), second) {
            (Ok(sample), Some(owner)) => rows.push((sample, owner.to_string())),
            (Err(_), _) if rows.is_empty() && lineno == 0 => continue, // header
            _ => {
                return Err(Error::Decode {
                    offset: lineno,
                    reason: format!(
                        "line {}: expected `sample_id owner_id`, got `{line}`",
                        lineno + 1
                    ),
                })
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Empty("ownership table".into()));
    }
    Ok(rows)
}

/// Build shards from an ownership table: owners become clients (in sorted
/// owner order), owners with fewer than `min_samples` samples are dropped,
/// and `test_fraction` of each remaining owner's samples is held out as
/// their local test set.
pub fn natural_partition(
    mapping: &[(usize, String)],
    min_samples: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction {test_fraction} must be in [0, 1)"
        )));
    }
    let mut by_owner: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (sample, owner) in mapping {
        by_owner.entry(owner.as_str()).or_default().push(*sample);
    }
    let mut shards = Vec::new();
    let mut client_id = 0usize;
    for (_, mut samples) in by_owner {
        if samples.len() < min_samples {
            continue;
        }
        samples.sort_unstable();
        samples.dedup();
        if samples.len() < min_samples {
            continue;
        }
        let mut rng = Stream::LocalTest {
            client: client_id as u64,
        }
        .rng(seed);
        samples.shuffle(&mut rng);
        let n_test = ((samples.len() as f64 * test_fraction).round() as usize)
            .min(samples.len().saturating_sub(1));
        let mut test_indices: Vec<usize> = samples[..n_test].to_vec();
        let mut train_indices: Vec<usize> = samples[n_test..].to_vec();
        test_indices.sort_unstable();
        train_indices.sort_unstable();
        shards.push(ClientShard {
            client_id,
            train_indices,
            test_indices,
        });
        client_id += 1;
    }
    if shards.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no owner kept at least {min_samples} samples"
        )));
    }
    Ok(shards)
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// Train-split label histogram per client, plus the summary quantities the
/// skew diagnostics are built on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionStats {
    /// `counts[client][class]`.
    pub counts: Vec<Vec<usize>>,
    pub client_sizes: Vec<usize>,
    pub num_classes: usize,
}

impl PartitionStats {
    /// Mean over clients of the share their most frequent label holds.
    /// Approaches 1 under extreme skew, `1/num_classes` under IID.
    pub fn mean_top_label_share(&self) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for (row, &size) in self.counts.iter().zip(&self.client_sizes) {
            if size == 0 {
                continue;
            }
            let top = row.iter().copied().max().unwrap_or(0);
            acc += top as f64 / size as f64;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            acc / n as f64
        }
    }

    /// Largest relative deviation of any client's size from the uniform
    /// share.
    pub fn max_size_deviation(&self) -> f64 {
        let total: usize = self.client_sizes.iter().sum();
        if total == 0 || self.client_sizes.is_empty() {
            return 0.0;
        }
        let uniform = total as f64 / self.client_sizes.len() as f64;
        self.client_sizes
            .iter()
            .map(|&s| (s as f64 - uniform).abs() / uniform)
            .fold(0.0, f64::max)
    }
}

pub fn partition_stats(
    shards: &[ClientShard],
    train_labels: &[usize],
    num_classes: usize,
) -> Result<PartitionStats> {
    let mut counts = Vec::with_capacity(shards.len());
    let mut client_sizes = Vec::with_capacity(shards.len());
    for shard in shards {
        let mut row = vec![0usize; num_classes];
        for &idx in &shard.train_indices {
            let l = *train_labels.get(idx).ok_or_else(|| {
                Error::InvalidArgument(format!("train index {idx} out of label range"))
            })?;
            if l >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "label {l} out of range for {num_classes} classes"
                )));
            }
            row[l] += 1;
        }
        client_sizes.push(shard.num_train());
        counts.push(row);
    }
    Ok(PartitionStats {
        counts,
        client_sizes,
        num_classes,
    })
}

impl fmt::Display for PartitionStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "client    size  ")?;
        for c in 0..self.num_classes {
            write!(f, "{c:>6}")?;
        }
        writeln!(f, "  top-share")?;
        for (i, (row, &size)) in self.counts.iter().zip(&self.client_sizes).enumerate() {
            write!(f, "{i:>6}  {size:>6}  ")?;
            for &c in row {
                write!(f, "{c:>6}")?;
            }
            let top = row.iter().copied().max().unwrap_or(0);
            let share = if size > 0 { top as f64 / size as f64 } else { 0.0 };
            writeln!(f, "  {share:>9.3}")?;
        }
        writeln!(f, "mean top-label share: {:.4}", self.mean_top_label_share())
    }
}
