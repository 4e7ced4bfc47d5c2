//! The end-to-end pipeline behind `train`, plus the pieces `partition` and
//! `evaluate` reuse. A run directory is self-contained: the config copy,
//! the partition, the metrics log, checkpoints, probe results, and plots
//! are everything needed to audit or extend the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedsiam_core::checkpoint::{load_checkpoint, save_checkpoint};
use fedsiam_core::data::{load_cifar10, synthetic_dataset, Dataset, UnlabeledView};
use fedsiam_core::eval::{
    federated_linear_probe, naive_federated_probe, personalized_linear_probe, ProbeProtocol,
    ProbeResult,
};
use fedsiam_core::fed::{
    canonical_log, read_metrics_log, run_training, ClientSslOpt, RoundMetrics, RoundObserver,
    TrainOutput,
};
use fedsiam_core::model::ArchConfig;
use fedsiam_core::partition::{
    attach_local_tests, dirichlet_partition, natural_partition, parse_ownership_table,
    partition_stats, ClientShard, PartitionFile, PartitionMeta, PartitionSpec, PartitionStats,
};
use fedsiam_core::personalize::{adapt_locally, BiLevelSsfl, GlobalSimClr, LaSsfl, MamlSsfl, PerSsfl};
use fedsiam_core::runtime::run_training_distributed;
use fedsiam_core::ssl::AugmentationPolicy;
use fedsiam_core::{ParameterSet, Real};

use crate::config::{Execution, ExperimentConfig, Method, SslKind};
use crate::plot::emit_plots;
use crate::CliError;

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    match cfg.dataset.as_str() {
        "synthetic" => Ok(synthetic_dataset(&cfg.synthetic_spec())?),
        "cifar10" => {
            if cfg.data_dir.as_os_str().is_empty() {
                return Err(CliError::Runtime(
                    "dataset cifar10 needs data_dir pointing at the binary batches".into(),
                ));
            }
            Ok(load_cifar10(&cfg.data_dir)?)
        }
        other => Err(CliError::Config(format!("dataset: unknown value `{other}`"))),
    }
}

/// Split the dataset into client shards: a Dirichlet draw by default, or an
/// ownership table when `mapping_path` is set.
pub fn build_partition(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<PartitionFile, CliError> {
    if !cfg.mapping_path.is_empty() {
        let text = std::fs::read_to_string(&cfg.mapping_path).map_err(|e| {
            CliError::Runtime(format!("cannot read mapping {}: {e}", cfg.mapping_path))
        })?;
        let mapping = parse_ownership_table(&text)?;
        let shards = natural_partition(&mapping, cfg.min_samples, cfg.test_fraction, cfg.partition_seed)?;
        return Ok(PartitionFile {
            spec: PartitionMeta::Natural {
                min_samples: cfg.min_samples,
                test_fraction: cfg.test_fraction,
                seed: cfg.partition_seed,
            },
            shards,
        });
    }
    let spec = PartitionSpec {
        alpha: cfg.alpha,
        num_clients: cfg.num_clients,
        num_classes: dataset.num_classes,
        seed: cfg.partition_seed,
    };
    let mut shards = dirichlet_partition(dataset.train_labels(), &spec)?;
    attach_local_tests(
        &mut shards,
        dataset.train_labels(),
        dataset.test_labels(),
        dataset.test_offset(),
        dataset.num_classes,
        cfg.partition_seed,
    )?;
    Ok(PartitionFile {
        spec: PartitionMeta::Dirichlet(spec),
        shards,
    })
}

pub fn build_method(cfg: &ExperimentConfig) -> Result<Box<dyn ClientSslOpt<Real>>, CliError> {
    Ok(match (cfg.method()?, cfg.ssl()?) {
        (Method::Global, SslKind::SimClr) => Box::new(GlobalSimClr {
            temperature: cfg.temperature,
        }),
        (Method::Global, SslKind::SimSiam) | (Method::La, SslKind::SimSiam) => Box::new(LaSsfl),
        (Method::Maml, SslKind::SimSiam) => Box::new(MamlSsfl {
            inner_steps: cfg.inner_steps,
        }),
        (Method::Bilevel, SslKind::SimSiam) => Box::new(BiLevelSsfl { lambda: cfg.lambda }),
        (Method::Per, SslKind::SimSiam) => Box::new(PerSsfl { lambda: cfg.lambda }),
        // validate() already rejects simclr with personalized methods.
        (m, SslKind::SimClr) => {
            return Err(CliError::Config(format!(
                "ssl: simclr does not support method {m:?}"
            )))
        }
    })
}

pub fn augmentation(cfg: &ExperimentConfig) -> AugmentationPolicy {
    if cfg.augment {
        AugmentationPolicy::default()
    } else {
        AugmentationPolicy::identity()
    }
}

/// Human-readable per-client label histogram plus the two scalar skew
/// measures.
pub fn partition_report(stats: &PartitionStats, shards: &[ClientShard]) -> String {
    let mut out = String::new();
    writeln!(out, "{:>6} {:>7} {:>6}  per-class train counts", "client", "train", "test").unwrap();
    for (shard, row) in shards.iter().zip(&stats.counts) {
        writeln!(
            out,
            "{:>6} {:>7} {:>6}  {:?}",
            shard.client_id,
            shard.train_indices.len(),
            shard.test_indices.len(),
            row
        )
        .unwrap();
    }
    writeln!(out, "mean top-label share: {:.3}", stats.mean_top_label_share()).unwrap();
    writeln!(out, "max size deviation:   {:.3}", stats.max_size_deviation()).unwrap();
    out
}

/// One run's headline numbers, written as `summary.json` and consumed by
/// the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub ssl: String,
    pub lr: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
    pub rounds: u32,
    pub final_loss: f64,
    pub final_knn: Option<f64>,
    /// Probe protocol → mean accuracy over clients.
    pub probes: BTreeMap<String, f64>,
}

impl Summary {
    /// The accuracy a sweep ranks cells by: the probe matching the method's
    /// evaluation protocol, falling back to the final KNN indicator.
    pub fn score(&self) -> f64 {
        self.probes
            .get("personalized")
            .or_else(|| self.probes.get("federated"))
            .copied()
            .or(self.final_knn)
            .unwrap_or(f64::NEG_INFINITY)
    }
}

fn protocol_key(p: &ProbeProtocol) -> &'static str {
    match p {
        ProbeProtocol::FederatedLinear => "federated",
        ProbeProtocol::PersonalizedLinear => "personalized",
        ProbeProtocol::NaiveFederatedLinear => "naive",
    }
}

struct Progress;

impl RoundObserver<Real> for Progress {
    fn on_round(
        &mut self,
        _global: &ParameterSet<Real>,
        m: &RoundMetrics,
    ) -> fedsiam_core::Result<()> {
        match m.knn_accuracy {
            Some(k) => log::info!(
                "round {:>4}  loss {:+.4}  knn {:.3}  ({:.1}s)",
                m.round,
                m.mean_train_loss,
                k,
                m.wall_time_s
            ),
            None => log::info!(
                "round {:>4}  loss {:+.4}  ({:.1}s)",
                m.round,
                m.mean_train_loss,
                m.wall_time_s
            ),
        }
        Ok(())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", path.display())))
}

/// Run the whole pipeline into `cfg.resolved_out_dir()` and return the run
/// directory with its summary. Reruns with the same config overwrite the
/// same artifacts with byte-identical metrics.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(PathBuf, Summary), CliError> {
    cfg.validate()?;
    let out = cfg.resolved_out_dir();
    create_dir(&out)?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;

    let dataset = load_dataset(cfg)?;
    let partition = build_partition(cfg, &dataset)?;
    partition.save(&out.join("partition.json"))?;
    let stats = partition_stats(&partition.shards, dataset.train_labels(), dataset.num_classes)?;
    write_file(
        &out.join("partition_stats.json"),
        &serde_json::to_string_pretty(&serde_json::json!({
            "counts": stats.counts,
            "client_sizes": stats.client_sizes,
            "mean_top_label_share": stats.mean_top_label_share(),
            "max_size_deviation": stats.max_size_deviation(),
        }))
        .unwrap(),
    )?;

    let arch = cfg.arch(dataset.channels, dataset.side);
    let init = arch.init_params::<Real>(cfg.seed)?;
    let round_cfg = cfg.round_config()?;
    let method = build_method(cfg)?;
    let policy = augmentation(cfg);
    log::info!(
        "training method={} ssl={} on {} ({} clients, {} rounds)",
        cfg.method,
        cfg.ssl,
        cfg.dataset,
        cfg.num_clients,
        cfg.rounds
    );

    let output: TrainOutput<Real> = match cfg.execution()? {
        Execution::InProcess => run_training(
            method.as_ref(),
            &arch,
            init,
            &dataset,
            &partition.shards,
            &policy,
            &round_cfg,
            &mut Progress,
        )?,
        Execution::Distributed(kind) => run_training_distributed(
            method.as_ref(),
            &arch,
            init,
            &dataset,
            &partition.shards,
            &policy,
            &round_cfg,
            kind,
            &mut Progress,
        )?,
    };

    // The metrics log is the canonical, timing-free transcript so reruns
    // are byte-identical; wall times go in a sidecar.
    write_file(&out.join("metrics.jsonl"), &canonical_log(&output.history))?;
    let mut timing = String::from("round,wall_time_s\n");
    for m in &output.history {
        writeln!(timing, "{},{:.3}", m.round, m.wall_time_s).unwrap();
    }
    write_file(&out.join("timing.csv"), &timing)?;

    save_checkpoint(&out.join("checkpoint.ckpt"), &output.global, &arch)?;
    if !output.personal.is_empty() {
        let pdir = out.join("personal");
        create_dir(&pdir)?;
        for (client_id, state) in &output.personal {
            save_checkpoint(
                &pdir.join(format!("client_{client_id:04}.ckpt")),
                &state.params,
                &arch,
            )?;
        }
    }

    let personal: BTreeMap<usize, ParameterSet<Real>> = output
        .personal
        .iter()
        .map(|(id, s)| (*id, s.params.clone()))
        .collect();
    let probes = run_probes(cfg, &dataset, &partition.shards, &arch, &output.global, &personal)?;
    write_probe_log(&out.join("probes.jsonl"), &probes)?;

    emit_plots(&out.join("plots"), &output.history)?;

    let last = output
        .history
        .last()
        .ok_or_else(|| CliError::Runtime("training produced no rounds".into()))?;
    let summary = Summary {
        method: cfg.method.clone(),
        ssl: cfg.ssl.clone(),
        lr: cfg.lr,
        lambda: cfg.lambda,
        alpha: cfg.alpha,
        seed: cfg.seed,
        rounds: cfg.rounds,
        final_loss: last.mean_train_loss,
        final_knn: output.history.iter().rev().find_map(|m| m.knn_accuracy),
        probes: probes
            .iter()
            .map(|p| (protocol_key(&p.protocol).to_string(), p.mean_accuracy))
            .collect(),
    };
    write_file(
        &out.join("summary.json"),
        &serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    Ok((out, summary))
}

/// The probes each method is judged by: the shared model gets the federated
/// probe; personalized methods additionally get per-client probes on their
/// personal models and the shared-classifier control.
pub fn run_probes(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    shards: &[ClientShard],
    arch: &ArchConfig,
    global: &ParameterSet<Real>,
    personal: &BTreeMap<usize, ParameterSet<Real>>,
) -> Result<Vec<ProbeResult>, CliError> {
    let (encoder, predictor) = arch.build()?;
    let probe_cfg = cfg.probe_config()?;
    let mut results = vec![federated_linear_probe(
        &encoder, global, dataset, shards, &probe_cfg,
    )?];

    let per_client: Option<Vec<(usize, ParameterSet<Real>)>> = match cfg.method()? {
        Method::Global => None,
        // Evaluation-time adaptation: each client fine-tunes a copy of the
        // shared weights on its own unlabeled data before probing.
        Method::La | Method::Maml => {
            let maml = cfg.method()? == Method::Maml;
            let steps = if maml { cfg.inner_steps } else { cfg.adapt_steps };
            let momentum = if maml { 0.0 } else { cfg.momentum };
            let policy = augmentation(cfg);
            let mut adapted = Vec::with_capacity(shards.len());
            for shard in shards {
                let view = UnlabeledView::new(dataset, &shard.train_indices);
                let params = adapt_locally(
                    &encoder,
                    &predictor,
                    global,
                    &view,
                    &policy,
                    steps,
                    cfg.batch,
                    cfg.lr,
                    momentum,
                    cfg.seed,
                    shard.client_id as u64,
                )?;
                adapted.push((shard.client_id, params));
            }
            Some(adapted)
        }
        // Persistent personal models; clients the sampler never picked keep
        // the shared weights.
        Method::Bilevel | Method::Per => Some(
            shards
                .iter()
                .map(|s| {
                    let p = personal.get(&s.client_id).unwrap_or(global).clone();
                    (s.client_id, p)
                })
                .collect(),
        ),
    };

    if let Some(adapted) = per_client {
        let refs: Vec<(usize, &ParameterSet<Real>)> =
            adapted.iter().map(|(id, p)| (*id, p)).collect();
        results.push(personalized_linear_probe(
            &encoder, &refs, dataset, shards, &probe_cfg,
        )?);
        results.push(naive_federated_probe(
            &encoder, &refs, dataset, shards, &probe_cfg,
        )?);
    }
    Ok(results)
}

pub fn write_probe_log(path: &Path, probes: &[ProbeResult]) -> Result<(), CliError> {
    let mut text = String::new();
    for p in probes {
        text.push_str(&serde_json::to_string(p).unwrap());
        text.push('\n');
    }
    write_file(path, &text)
}

pub fn probe_table(probes: &[ProbeResult]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<14} {:>8} {:>8}", "protocol", "mean", "clients").unwrap();
    for p in probes {
        writeln!(
            out,
            "{:<14} {:>8.4} {:>8}",
            protocol_key(&p.protocol),
            p.mean_accuracy,
            p.per_client.len()
        )
        .unwrap();
    }
    out
}

/// Re-run evaluation against a finished run directory: reload its config,
/// partition, and checkpoints, then rewrite `probes.jsonl`.
pub fn evaluate_run(run_dir: &Path, overrides: &[String]) -> Result<Vec<ProbeResult>, CliError> {
    let config_path = run_dir.join("config.toml");
    if !config_path.exists() {
        return Err(CliError::Config(format!(
            "{} has no config.toml — not a run directory",
            run_dir.display()
        )));
    }
    let cfg = crate::config::load_config(Some(&config_path), overrides)?;
    let dataset = load_dataset(&cfg)?;

    let partition_path = run_dir.join("partition.json");
    let partition = if partition_path.exists() {
        PartitionFile::load(&partition_path)?
    } else {
        build_partition(&cfg, &dataset)?
    };

    let (global, manifest) = load_checkpoint::<Real>(&run_dir.join("checkpoint.ckpt"))?;
    let mut personal = BTreeMap::new();
    let pdir = run_dir.join("personal");
    if pdir.is_dir() {
        let entries = std::fs::read_dir(&pdir)
            .map_err(|e| CliError::Runtime(format!("read {}: {e}", pdir.display())))?;
        for entry in entries {
            let path = entry
                .map_err(|e| CliError::Runtime(format!("read {}: {e}", pdir.display())))?
                .path();
            let name = path.file_name().unwrap_or_default().to_string_lossy();
            if let Some(id) = name
                .strip_prefix("client_")
                .and_then(|s| s.strip_suffix(".ckpt"))
                .and_then(|s| s.parse::<usize>().ok())
            {
                let (params, _) = load_checkpoint::<Real>(&path)?;
                personal.insert(id, params);
            }
        }
    }

    // The manifest's architecture is authoritative for the saved weights.
    let probes = run_probes(&cfg, &dataset, &partition.shards, &manifest.arch, &global, &personal)?;
    write_probe_log(&run_dir.join("probes.jsonl"), &probes)?;
    Ok(probes)
}

/// Rebuild the CSV/SVG curves from a run's metrics log.
pub fn replot_run(run_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let history = read_metrics_log(&run_dir.join("metrics.jsonl"))?;
    if history.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} has an empty metrics log",
            run_dir.display()
        )));
    }
    emit_plots(&run_dir.join("plots"), &history)
}
