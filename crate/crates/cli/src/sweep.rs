//! Grid sweeps: the cartesian product of `--grid key=v1,v2` axes, one run
//! per cell in its own subdirectory, summarized into a table with the best
//! cell per method. Cells share the base config — in particular the
//! partition seed — so comparisons see the same client split.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::load_config;
use crate::experiment::{run_experiment, Summary};
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Axis order follows the command line; the last axis varies fastest.
    pub axes: Vec<(String, Vec<String>)>,
}

impl GridSpec {
    pub fn parse(specs: &[String]) -> Result<Self, CliError> {
        if specs.is_empty() {
            return Err(CliError::Config(
                "sweep needs at least one --grid key=v1,v2 axis".into(),
            ));
        }
        let mut axes = Vec::with_capacity(specs.len());
        for spec in specs {
            let (key, values) = spec.split_once('=').ok_or_else(|| {
                CliError::Config(format!("grid axis `{spec}` is not of the form key=v1,v2"))
            })?;
            let values: Vec<String> = values
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            if values.is_empty() {
                return Err(CliError::Config(format!("grid axis `{key}` has no values")));
            }
            axes.push((key.trim().to_string(), values));
        }
        Ok(Self { axes })
    }

    /// All assignments, row-major over the axes.
    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut cells: Vec<Vec<(String, String)>> = vec![vec![]];
        for (key, values) in &self.axes {
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for cell in &cells {
                for v in values {
                    let mut c = cell.clone();
                    c.push((key.clone(), v.clone()));
                    next.push(c);
                }
            }
            cells = next;
        }
        cells
    }
}

/// Directory-safe name for one assignment, e.g. `lr=0.3,lambda=0.1` →
/// `lr_0.3__lambda_0.1`.
pub fn cell_name(assignment: &[(String, String)]) -> String {
    assignment
        .iter()
        .map(|(k, v)| format!("{k}_{}", v.replace(['/', ' '], "-")))
        .collect::<Vec<_>>()
        .join("__")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Highest-scoring row for each method present, scanning logged means.
    pub fn best_per_method(&self) -> Vec<&SweepRow> {
        let mut methods: Vec<&str> = self.rows.iter().map(|r| r.summary.method.as_str()).collect();
        methods.sort_unstable();
        methods.dedup();
        methods
            .into_iter()
            .filter_map(|m| {
                self.rows
                    .iter()
                    .filter(|r| r.summary.method == m)
                    .max_by(|a, b| a.summary.score().total_cmp(&b.summary.score()))
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<40} {:<8} {:>8} {:>8} {:>9} {:>9}",
            "cell", "method", "lr", "lambda", "score", "loss"
        )
        .unwrap();
        for row in &self.rows {
            writeln!(
                out,
                "{:<40} {:<8} {:>8} {:>8} {:>9.4} {:>9.4}",
                row.cell,
                row.summary.method,
                row.summary.lr,
                row.summary.lambda,
                row.summary.score(),
                row.summary.final_loss
            )
            .unwrap();
        }
        for best in self.best_per_method() {
            writeln!(
                out,
                "best[{}]: {} (score {:.4})",
                best.summary.method,
                best.cell,
                best.summary.score()
            )
            .unwrap();
        }
        out
    }
}

/// Run every cell of the grid. Each cell's config is the base config plus
/// its assignment, and its artifacts land in `<out>/cells/<name>`. With
/// `parallel > 1`, that many cells run at once, each isolated in its own
/// directory.
pub fn run_sweep(
    config: Option<&Path>,
    overrides: &[String],
    grid: &GridSpec,
    parallel: usize,
) -> Result<(PathBuf, SweepTable), CliError> {
    let base = load_config(config, overrides)?;
    let sweep_root = base.resolved_out_dir();
    let cells = grid.cells();
    log::info!("sweep: {} cells over {} axes", cells.len(), grid.axes.len());

    // Each cell gets the full override chain again so validation sees the
    // final values, plus its own out_dir.
    let mut jobs = Vec::with_capacity(cells.len());
    for cell in &cells {
        let name = cell_name(cell);
        let mut cell_overrides: Vec<String> = overrides.to_vec();
        for (k, v) in cell {
            cell_overrides.push(format!("{k}={v}"));
        }
        let out_dir = sweep_root.join("cells").join(&name);
        cell_overrides.push(format!("out_dir={:?}", out_dir.to_string_lossy()));
        let cfg = load_config(config, &cell_overrides)?;
        jobs.push((name, cfg));
    }

    let workers = parallel.max(1).min(jobs.len());
    let mut results: Vec<Option<Result<Summary, CliError>>> = Vec::new();
    results.resize_with(jobs.len(), || None);
    if workers <= 1 {
        for (slot, (name, cfg)) in results.iter_mut().zip(&jobs) {
            log::info!("cell {name}");
            *slot = Some(run_experiment(cfg).map(|(_, s)| s));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<Summary, CliError>>>> =
            (0..jobs.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    let (name, cfg) = &jobs[i];
                    log::info!("cell {name}");
                    let r = run_experiment(cfg).map(|(_, s)| s);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        for (slot, cell) in slots.into_iter().zip(results.iter_mut()) {
            *cell = slot.into_inner().unwrap();
        }
    }

    let mut rows = Vec::with_capacity(jobs.len());
    for ((name, _), result) in jobs.into_iter().zip(results) {
        let summary = result.expect("every cell ran").map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("cell {name}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("cell {name}: {m}")),
        })?;
        rows.push(SweepRow { cell: name, summary });
    }
    let table = SweepTable { rows };

    std::fs::create_dir_all(&sweep_root)
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", sweep_root.display())))?;
    std::fs::write(
        sweep_root.join("sweep_summary.json"),
        serde_json::to_string_pretty(&table).unwrap(),
    )
    .map_err(|e| CliError::Runtime(format!("write sweep summary: {e}")))?;
    std::fs::write(sweep_root.join("sweep_summary.txt"), table.render())
        .map_err(|e| CliError::Runtime(format!("write sweep summary: {e}")))?;
    Ok((sweep_root, table))
}
