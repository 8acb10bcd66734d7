//! Batch execution: fan scenarios out across a worker pool and fold the
//! results into an order-independent aggregate.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use stabmpc::sim::run_scenario;

use crate::config::{self, ConfigFile};
use crate::output;
use crate::Overrides;

/// One line of the aggregate. Timing is deliberately excluded so the
/// aggregate is identical at any parallelism level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub scenario_id: String,
    pub config_hash: String,
    pub seed: u64,
    /// Success verdict; false when the run failed its thresholds, diverged,
    /// or could not be configured at all.
    pub success: bool,
    /// Populated for runs that produced a trace.
    pub height_error_mean: Option<f64>,
    pub height_error_std: Option<f64>,
    pub max_eta_norm: Option<f64>,
    pub max_contact_deviation: Option<f64>,
    pub unconverged_ticks: Option<usize>,
    /// Set when the scenario could not be parsed or executed.
    pub error: Option<String>,
}

/// Aggregate over a batch, in the metric-rows-by-scenario layout of the
/// randomized-trial tables: one row per scenario, sorted by id, plus the
/// success-rate and tracking-error summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub schema: u32,
    pub rows: Vec<BatchRow>,
    pub n_runs: usize,
    pub n_success: usize,
    pub success_rate: f64,
    /// Mean of the per-run CoM-height tracking error means, successful runs
    /// only; `null` when nothing succeeded.
    pub mean_height_error: Option<f64>,
}

pub fn aggregate(mut rows: Vec<BatchRow>) -> Aggregate {
    rows.sort_by(|a, b| a.scenario_id.cmp(&b.scenario_id).then(a.seed.cmp(&b.seed)));
    let n_runs = rows.len();
    let n_success = rows.iter().filter(|r| r.success).count();
    let succ_means: Vec<f64> = rows
        .iter()
        .filter(|r| r.success)
        .filter_map(|r| r.height_error_mean)
        .collect();
    Aggregate {
        schema: 1,
        rows,
        n_runs,
        n_success,
        success_rate: if n_runs == 0 { 1.0 } else { n_success as f64 / n_runs as f64 },
        mean_height_error: if succ_means.is_empty() {
            None
        } else {
            Some(succ_means.iter().sum::<f64>() / succ_means.len() as f64)
        },
    }
}

pub fn aggregate_csv(agg: &Aggregate) -> String {
    let mut out = String::from(
        "scenario_id,seed,success,height_error_mean,height_error_std,max_eta_norm,max_contact_deviation,unconverged_ticks,error\n",
    );
    let opt = |v: &Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
    for r in &agg.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.scenario_id,
            r.seed,
            r.success,
            opt(&r.height_error_mean),
            opt(&r.height_error_std),
            opt(&r.max_eta_norm),
            opt(&r.max_contact_deviation),
            r.unconverged_ticks.map(|x| x.to_string()).unwrap_or_default(),
            r.error.as_deref().unwrap_or_default(),
        ));
    }
    out
}

/// Expand batch arguments: directories contribute their `*.toml` files in
/// lexicographic order, plain paths contribute themselves.
pub fn expand_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading directory {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "toml"))
                .collect();
            entries.sort();
            files.extend(entries);
        } else if p.exists() {
            files.push(p.clone());
        } else {
            bail!("no such file or directory: {}", p.display());
        }
    }
    Ok(files)
}

/// Run one already-parsed scenario to a row + emitted artifacts.
pub fn run_one(
    out_dir: &Path,
    id: &str,
    file: &ConfigFile,
) -> (BatchRow, Option<output::RunManifest>) {
    let hash = config::config_hash(file);
    let mut row = BatchRow {
        scenario_id: id.to_string(),
        config_hash: hash.clone(),
        seed: file.scenario.seed,
        success: false,
        height_error_mean: None,
        height_error_std: None,
        max_eta_norm: None,
        max_contact_deviation: None,
        unconverged_ticks: None,
        error: None,
    };
    let scenario = match config::to_scenario(file) {
        Ok(s) => s,
        Err(e) => {
            row.error = Some(e.to_string());
            return (row, None);
        }
    };
    let started = Instant::now();
    match run_scenario(&scenario) {
        Ok(result) => {
            row.success = result.metrics.success;
            row.height_error_mean = Some(result.metrics.height_error_mean);
            row.height_error_std = Some(result.metrics.height_error_std);
            row.max_eta_norm = Some(result.metrics.max_eta_norm);
            row.max_contact_deviation = Some(result.metrics.max_contact_deviation);
            row.unconverged_ticks = Some(result.metrics.unconverged_ticks);
            let wall_ms = started.elapsed().as_secs_f64() * 1e3;
            match output::emit_outputs(
                &out_dir.join(id),
                id,
                file,
                &hash,
                &result,
                wall_ms,
            ) {
                Ok(manifest) => (row, Some(manifest)),
                Err(e) => {
                    row.error = Some(format!("emitting outputs: {e:#}"));
                    row.success = false;
                    (row, None)
                }
            }
        }
        Err(e) => {
            row.error = Some(e.to_string());
            (row, None)
        }
    }
}

/// Execute a batch of scenario files. Individual failures are recorded in
/// the aggregate and never abort the batch.
pub fn run_batch(
    files: &[PathBuf],
    out_dir: &Path,
    overrides: &Overrides,
    parallel: usize,
) -> Result<Aggregate> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .context("building worker pool")?;
    let rows: Vec<BatchRow> = pool.install(|| {
        files
            .par_iter()
            .map(|path| match config::load(path) {
                Ok((mut file, _)) => {
                    overrides.apply(&mut file);
                    let id = config::scenario_id(&file, Some(path));
                    run_one(out_dir, &id, &file).0
                }
                Err(e) => BatchRow {
                    scenario_id: config::scenario_id_from_path(path),
                    config_hash: String::new(),
                    seed: 0,
                    success: false,
                    height_error_mean: None,
                    height_error_std: None,
                    max_eta_norm: None,
                    max_contact_deviation: None,
                    unconverged_ticks: None,
                    error: Some(e.to_string()),
                },
            })
            .collect()
    });
    let agg = aggregate(rows);
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    std::fs::write(
        out_dir.join("aggregate.json"),
        serde_json::to_string_pretty(&agg).context("aggregate.json")? + "\n",
    )?;
    std::fs::write(out_dir.join("aggregate.csv"), aggregate_csv(&agg))?;
    Ok(agg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, seed: u64, success: bool, mean: f64) -> BatchRow {
        BatchRow {
            scenario_id: id.into(),
            config_hash: "sha256:x".into(),
            seed,
            success,
            height_error_mean: Some(mean),
            height_error_std: Some(0.0),
            max_eta_norm: Some(0.1),
            max_contact_deviation: Some(0.0),
            unconverged_ticks: Some(0),
            error: None,
        }
    }

    #[test]
    fn aggregate_is_order_independent() {
        let a = aggregate(vec![row("b", 1, true, 0.02), row("a", 2, false, 0.3)]);
        let b = aggregate(vec![row("a", 2, false, 0.3), row("b", 1, true, 0.02)]);
        assert_eq!(a, b);
        assert_eq!(a.n_runs, 2);
        assert_eq!(a.n_success, 1);
        assert_eq!(a.success_rate, 0.5);
        // Only the successful run's tracking error enters the mean.
        assert_eq!(a.mean_height_error, Some(0.02));
    }

    #[test]
    fn empty_batch_aggregates_cleanly() {
        let a = aggregate(vec![]);
        assert_eq!(a.n_runs, 0);
        assert_eq!(a.success_rate, 1.0);
        assert_eq!(a.mean_height_error, None);
    }
}
