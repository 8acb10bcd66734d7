//! Per-run artifacts: trace.csv, summary.json, plots.gp, manifest.json, and
//! the materialized configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use stabmpc::nlp::sqp::NlpOptions;
use stabmpc::sim::{Metrics, SimResult, TickStatus, TraceRow};

use crate::config::ConfigFile;

/// Fixed trace.csv schema. Columns are never reordered within a schema
/// revision; downstream plot scripts address them by number.
pub fn csv_header() -> String {
    let mut cols: Vec<String> = vec!["t".into()];
    for axis in ["x", "y", "z"] {
        cols.push(format!("p_com_{axis}"));
    }
    for axis in ["x", "y", "z"] {
        cols.push(format!("p_ref_{axis}"));
    }
    for name in ["h_lin_x", "h_lin_y", "h_lin_z", "h_ang_x", "h_ang_y", "h_ang_z"] {
        cols.push(name.into());
    }
    for vec in ["z1", "z2", "eta", "theta_hat", "nu"] {
        for axis in ["x", "y", "z"] {
            cols.push(format!("{vec}_{axis}"));
        }
    }
    for foot in ["l", "r"] {
        for corner in 0..4 {
            for axis in ["x", "y", "z"] {
                cols.push(format!("f_{foot}{corner}_{axis}"));
            }
        }
    }
    for tail in ["stab_residual", "eta_norm", "solve_iters", "solve_ms", "status"] {
        cols.push(tail.into());
    }
    cols.join(",")
}

fn status_label(s: TickStatus) -> &'static str {
    match s {
        TickStatus::Converged => "converged",
        TickStatus::Unconverged => "unconverged",
        TickStatus::Failed => "failed",
        TickStatus::Diverged => "diverged",
        TickStatus::Terminal => "terminal",
    }
}

fn push_row(out: &mut String, row: &TraceRow) {
    let mut fields: Vec<String> = Vec::with_capacity(58);
    let num = |v: f64| {
        if v == 0.0 {
            "0".to_string()
        } else {
            format!("{v:.9e}")
        }
    };
    fields.push(num(row.t));
    for a in 0..3 {
        fields.push(num(row.state.p_com[a]));
    }
    for a in 0..3 {
        fields.push(num(row.p_ref[a]));
    }
    for a in 0..6 {
        fields.push(num(row.state.h[a]));
    }
    for v in [&row.transformed.z1, &row.transformed.z2, &row.transformed.eta, &row.theta_hat, &row.nu]
    {
        for a in 0..3 {
            fields.push(num(v[a]));
        }
    }
    for f in &row.forces {
        for a in 0..3 {
            fields.push(num(f[a]));
        }
    }
    fields.push(num(row.stab_residual));
    fields.push(num(row.eta_norm));
    fields.push(row.solve_iters.to_string());
    fields.push(format!("{:.3}", row.solve_ms));
    fields.push(status_label(row.status).to_string());
    let _ = writeln!(out, "{}", fields.join(","));
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::with_capacity(trace.len() * 600 + 600);
    let _ = writeln!(out, "{}", csv_header());
    for row in trace {
        push_row(&mut out, row);
    }
    out
}

/// summary.json contents. Deserializes back to an identical value, so the
/// file round-trips without loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub success: bool,
    pub metrics: Metrics,
    pub solver: NlpOptions,
    pub ticks: usize,
}

impl Summary {
    pub fn new(id: &str, config_hash: &str, result: &SimResult) -> Self {
        Self {
            scenario_id: id.to_string(),
            config_hash: config_hash.to_string(),
            seed: result.seed,
            success: result.metrics.success,
            metrics: result.metrics.clone(),
            solver: result.solver,
            ticks: result.trace.len(),
        }
    }
}

/// Run provenance: what executed, from which configuration, producing which
/// files. The hash is stable across platforms for identical configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario_id: String,
    pub config_hash: String,
    pub code_version: String,
    /// Effective configuration with every default filled in.
    pub config: ConfigFile,
    pub outputs: Vec<String>,
    pub wall_ms: f64,
}

/// Gnuplot script reproducing the standard panels: CoM tracking, ‖η‖ with
/// its bound, the correction term ν, and the stability residual.
pub fn plot_script(id: &str, eta_bound: f64) -> String {
    // Column numbers follow csv_header(): t=1, p_com=2..4, p_ref=5..7,
    // nu=27..29, eta_norm=54, stab_residual=53.
    format!(
        r#"# Generated alongside trace.csv; run `gnuplot plots.gp`.
set datafile separator ','
set terminal pngcairo size 1400,900
set output 'panels.png'
set multiplot layout 2,2 title 'scenario: {id}'

set title 'CoM tracking'
set xlabel 't [s]'
set ylabel '[m]'
plot 'trace.csv' using 1:2 with lines title 'x', \
     'trace.csv' using 1:5 with lines dashtype 2 title 'x ref', \
     'trace.csv' using 1:4 with lines title 'z', \
     'trace.csv' using 1:7 with lines dashtype 2 title 'z ref'

set title 'angular momentum norm'
set ylabel '[m^2/s]'
plot 'trace.csv' using 1:54 with lines title '||eta||', \
     {eta_bound} with lines dashtype 3 title 'bound'

set title 'correction term'
set ylabel '[m/s^2]'
plot 'trace.csv' using 1:27 with lines title 'nu_x', \
     'trace.csv' using 1:28 with lines title 'nu_y', \
     'trace.csv' using 1:29 with lines title 'nu_z'

set title 'stability residual'
set ylabel '[1/s]'
plot 'trace.csv' using 1:53 with lines title 'residual', \
     0 with lines dashtype 3 title '0'

unset multiplot
"#
    )
}

/// Write the full artifact set for one run; returns the manifest.
pub fn emit_outputs(
    dir: &Path,
    id: &str,
    config: &ConfigFile,
    config_hash: &str,
    result: &SimResult,
    wall_ms: f64,
) -> Result<RunManifest> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let write = |name: &str, text: String| -> Result<PathBuf> {
        let path = dir.join(name);
        fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    };

    let summary = Summary::new(id, config_hash, result);
    let mut outputs = Vec::new();
    outputs.push(write("trace.csv", trace_csv(&result.trace))?);
    outputs.push(write(
        "summary.json",
        serde_json::to_string_pretty(&summary).context("summary.json")? + "\n",
    )?);
    outputs.push(write("plots.gp", plot_script(id, config.mpc.eta_bound))?);
    outputs.push(write(
        "config.toml",
        toml::to_string_pretty(config).context("config.toml")?,
    )?);

    let manifest = RunManifest {
        scenario_id: id.to_string(),
        config_hash: config_hash.to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        wall_ms,
    };
    let path = dir.join("manifest.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).context("manifest.json")? + "\n",
    )
    .with_context(|| format!("writing {}", path.display()))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_has_the_documented_width() {
        let header = csv_header();
        let cols: Vec<&str> = header.split(',').collect();
        // 1 + 3 + 3 + 6 + 5·3 + 24 + 5
        assert_eq!(cols.len(), 58);
        assert_eq!(cols[0], "t");
        assert_eq!(cols[13], "z1_x");
        assert_eq!(cols[26], "nu_x");
        assert_eq!(cols[28], "nu_z");
        assert_eq!(cols[29], "f_l0_x");
        assert_eq!(cols[52], "stab_residual");
        assert_eq!(cols[53], "eta_norm");
        assert_eq!(cols[57], "status");
    }

    #[test]
    fn plot_script_addresses_the_right_columns() {
        let script = plot_script("demo", 0.3);
        // gnuplot columns are 1-based: eta_norm is index 53 → column 54.
        assert!(script.contains("using 1:54"));
        assert!(script.contains("using 1:27"));
        assert!(script.contains("using 1:53"));
    }
}
