//! The experiment configuration: one flat TOML file, every key overridable
//! from the command line. Parsing is strict — misspelled keys and
//! out-of-range values are rejected before any data is touched.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedsiam_core::data::SyntheticSpec;
use fedsiam_core::eval::{KnnConfig, ProbeConfig};
use fedsiam_core::fed::{EvalPlan, LocalIters, RoundConfig};
use fedsiam_core::model::{ArchConfig, BackboneConfig, LrSchedule};
use fedsiam_core::runtime::TransportKind;

use crate::CliError;

/// Closed set of training algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// One shared model, no per-client state.
    Global,
    /// Shared training; clients adapt a copy locally at evaluation time.
    La,
    /// Meta-learned initialization; clients take inner steps before use.
    Maml,
    /// Persistent personal model pulled toward the shared one in weight space.
    Bilevel,
    /// Persistent personal model regularized in prediction space.
    Per,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "global" => Ok(Method::Global),
            "la" => Ok(Method::La),
            "maml" => Ok(Method::Maml),
            "bilevel" => Ok(Method::Bilevel),
            "per" => Ok(Method::Per),
            other => Err(CliError::Config(format!(
                "method: unknown value `{other}` (expected global, la, maml, bilevel, or per)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SslKind {
    SimSiam,
    SimClr,
}

impl SslKind {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "simsiam" => Ok(SslKind::SimSiam),
            "simclr" => Ok(SslKind::SimClr),
            other => Err(CliError::Config(format!(
                "ssl: unknown value `{other}` (expected simsiam or simclr)"
            ))),
        }
    }
}

/// Everything a run needs, as plain keys. `Default` is a small desk-scale
/// experiment that finishes in minutes on one core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // -- data -------------------------------------------------------------
    /// `synthetic` or `cifar10`.
    pub dataset: String,
    /// Directory with the CIFAR-10 binary batches (ignored for synthetic).
    pub data_dir: PathBuf,
    pub num_classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub image_side: usize,
    pub data_seed: u64,

    // -- partition ----------------------------------------------------------
    /// Dirichlet concentration; small α → skewed client label mixes.
    pub alpha: f64,
    pub num_clients: usize,
    pub partition_seed: u64,
    /// When set, ingest this `sample_id owner_id` table instead of sampling
    /// a Dirichlet split.
    pub mapping_path: String,
    /// Owners with fewer samples than this are dropped (mapping mode).
    pub min_samples: usize,
    /// Fraction of each owner's samples held out locally (mapping mode).
    pub test_fraction: f64,

    // -- algorithm ----------------------------------------------------------
    pub method: String,
    pub ssl: String,
    /// Personalization strength for `bilevel` and `per`.
    pub lambda: f64,
    /// Inner adaptation steps for `maml`.
    pub inner_steps: usize,
    /// Softmax temperature for `simclr`.
    pub temperature: f64,

    // -- optimization ---------------------------------------------------------
    pub rounds: u32,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    /// Micro-batch size per optimizer step; the effective batch is
    /// `batch × accumulation`.
    pub batch: usize,
    pub accumulation: usize,
    pub lr: f64,
    pub momentum: f64,
    /// `constant` or `cosine`.
    pub schedule: String,
    pub seed: u64,
    /// Standard augmentation recipe on; off means identity views.
    pub augment: bool,

    // -- model ------------------------------------------------------------
    /// Conv channel widths; empty list selects a flat MLP backbone.
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    pub predictor_bottleneck: usize,

    // -- evaluation ---------------------------------------------------------
    /// Measure KNN accuracy every this many rounds (0 = final round only).
    pub knn_every: u32,
    pub bank_size: usize,
    pub query_size: usize,
    pub knn_k: usize,
    pub knn_temperature: f64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_batch: usize,
    /// Local fine-tuning steps when `la` (and `maml`) personalize at
    /// evaluation time.
    pub adapt_steps: usize,

    // -- execution ----------------------------------------------------------
    /// `in_process`, `loopback`, or `tcp`.
    pub transport: String,
    /// Run artifacts land here; relative paths resolve under
    /// `$FEDSIAM_OUT_ROOT` when that variable is set.
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "synthetic".into(),
            data_dir: PathBuf::new(),
            num_classes: 10,
            train_samples: 5000,
            test_samples: 1000,
            image_side: 16,
            data_seed: 7,

            alpha: 0.5,
            num_clients: 8,
            partition_seed: 1,
            mapping_path: String::new(),
            min_samples: 100,
            test_fraction: 0.3,

            method: "global".into(),
            ssl: "simsiam".into(),
            lambda: 0.1,
            inner_steps: 1,
            temperature: 0.1,

            rounds: 30,
            clients_per_round: 8,
            local_epochs: 1,
            batch: 32,
            accumulation: 8,
            lr: 0.03,
            momentum: 0.9,
            schedule: "cosine".into(),
            seed: 1,
            augment: true,

            channels: vec![16, 32, 64, 128],
            embed_dim: 128,
            predictor_bottleneck: 32,

            knn_every: 5,
            bank_size: 2000,
            query_size: 500,
            knn_k: 200,
            knn_temperature: 0.1,
            probe_epochs: 40,
            probe_lr: 0.3,
            probe_batch: 256,
            adapt_steps: 10,

            transport: "in_process".into(),
            out_dir: PathBuf::from("runs/exp"),
        }
    }
}

/// Transport selection including the single-process fast path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    InProcess,
    Distributed(TransportKind),
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn method(&self) -> Result<Method, CliError> {
        Method::parse(&self.method)
    }

    pub fn ssl(&self) -> Result<SslKind, CliError> {
        SslKind::parse(&self.ssl)
    }

    pub fn schedule(&self) -> Result<LrSchedule, CliError> {
        match self.schedule.as_str() {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(CliError::Config(format!(
                "schedule: unknown value `{other}` (expected constant or cosine)"
            ))),
        }
    }

    pub fn execution(&self) -> Result<Execution, CliError> {
        match self.transport.as_str() {
            "in_process" => Ok(Execution::InProcess),
            "loopback" => Ok(Execution::Distributed(TransportKind::Loopback)),
            "tcp" => Ok(Execution::Distributed(TransportKind::Tcp)),
            other => Err(CliError::Config(format!(
                "transport: unknown value `{other}` (expected in_process, loopback, or tcp)"
            ))),
        }
    }

    /// Reject bad values before any data is loaded. Every message names the
    /// offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        let method = self.method()?;
        let ssl = self.ssl()?;
        self.schedule()?;
        self.execution()?;
        if ssl == SslKind::SimClr && method != Method::Global {
            return Err(CliError::Config(
                "ssl: simclr runs only with method = \"global\"; the personalized \
                 algorithms are siamese-prediction methods"
                    .into(),
            ));
        }
        if !matches!(self.dataset.as_str(), "synthetic" | "cifar10") {
            return Err(CliError::Config(format!(
                "dataset: unknown value `{}` (expected synthetic or cifar10)",
                self.dataset
            )));
        }
        let positive = [
            ("num_classes", self.num_classes),
            ("num_clients", self.num_clients),
            ("clients_per_round", self.clients_per_round),
            ("local_epochs", self.local_epochs),
            ("batch", self.batch),
            ("accumulation", self.accumulation),
            ("embed_dim", self.embed_dim),
            ("predictor_bottleneck", self.predictor_bottleneck),
            ("probe_epochs", self.probe_epochs),
            ("probe_batch", self.probe_batch),
            ("knn_k", self.knn_k),
            ("bank_size", self.bank_size),
            ("query_size", self.query_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(CliError::Config(format!("{key}: must be ≥ 1")));
            }
        }
        if self.rounds == 0 {
            return Err(CliError::Config("rounds: must be ≥ 1".into()));
        }
        if self.clients_per_round > self.num_clients {
            return Err(CliError::Config(format!(
                "clients_per_round: {} exceeds num_clients {}",
                self.clients_per_round, self.num_clients
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(CliError::Config(format!(
                "alpha: must be > 0, got {}",
                self.alpha
            )));
        }
        for (key, v) in [
            ("lr", self.lr),
            ("probe_lr", self.probe_lr),
            ("temperature", self.temperature),
            ("knn_temperature", self.knn_temperature),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(CliError::Config(format!("{key}: must be > 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CliError::Config(format!(
                "momentum: must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(CliError::Config(format!(
                "lambda: must be ≥ 0, got {}",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(CliError::Config(format!(
                "test_fraction: must be in [0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.dataset == "synthetic" && (self.train_samples == 0 || self.image_side == 0) {
            return Err(CliError::Config(
                "train_samples/image_side: must be ≥ 1 for the synthetic dataset".into(),
            ));
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.num_classes,
            num_train: self.train_samples,
            num_test: self.test_samples,
            side: self.image_side,
            seed: self.data_seed,
        }
    }

    /// The network implied by the data shape: conv blocks when `channels`
    /// is non-empty, otherwise a linear stack over flattened pixels.
    pub fn arch(&self, in_channels: usize, image_side: usize) -> ArchConfig {
        let backbone = if self.channels.is_empty() {
            BackboneConfig::Mlp {
                in_dim: in_channels * image_side * image_side,
                hidden: vec![],
            }
        } else {
            BackboneConfig::Conv {
                in_channels,
                image_side,
                channels: self.channels.clone(),
            }
        };
        ArchConfig {
            backbone,
            embed_dim: self.embed_dim,
            predictor_bottleneck: self.predictor_bottleneck,
        }
    }

    pub fn round_config(&self) -> Result<RoundConfig, CliError> {
        Ok(RoundConfig {
            total_clients: self.num_clients,
            clients_per_round: self.clients_per_round,
            rounds: self.rounds,
            local_iters: LocalIters::Epochs(self.local_epochs),
            micro_batch: self.batch,
            accumulation_steps: self.accumulation,
            lr: self.lr,
            schedule: self.schedule()?,
            momentum: self.momentum,
            seed: self.seed,
            eval: EvalPlan {
                knn_every: self.knn_every,
                bank_size: self.bank_size,
                query_size: self.query_size,
                knn: KnnConfig {
                    k: self.knn_k,
                    temperature: self.knn_temperature,
                },
            },
        })
    }

    pub fn probe_config(&self) -> Result<ProbeConfig, CliError> {
        Ok(ProbeConfig {
            epochs: self.probe_epochs,
            lr: self.probe_lr,
            momentum: self.momentum,
            batch: self.probe_batch,
            schedule: self.schedule()?,
            seed: self.seed,
        })
    }

    /// Where artifacts go: relative paths are anchored at
    /// `$FEDSIAM_OUT_ROOT` when set, so batch jobs can redirect every run
    /// without touching configs.
    pub fn resolved_out_dir(&self) -> PathBuf {
        if self.out_dir.is_absolute() {
            return self.out_dir.clone();
        }
        match std::env::var_os("FEDSIAM_OUT_ROOT") {
            Some(root) => PathBuf::from(root).join(&self.out_dir),
            None => self.out_dir.clone(),
        }
    }
}

/// Build the effective config: file values (if any), then `key=value`
/// overrides in order. Overrides are parsed as TOML so numbers, booleans,
/// and arrays all work; bare words fall back to strings, letting users
/// write `method=per` instead of `method="per"`.
pub fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for item in overrides {
        let (key, value) = item.split_once('=').ok_or_else(|| {
            CliError::Config(format!("override `{item}` is not of the form key=value"))
        })?;
        let parsed = parse_toml_value(value);
        table.insert(key.trim().to_string(), parsed);
    }
    let cfg: ExperimentConfig = table
        .try_into()
        .map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_toml_value(raw: &str) -> toml::Value {
    let doc = format!("v = {}", raw.trim());
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    }
}
