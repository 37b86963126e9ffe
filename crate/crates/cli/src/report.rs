use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use metagent_core::controller::History;
use metagent_core::fsutil::write_atomic;
use metagent_core::neural_adjoint::ErrorSummary;
use metagent_core::surrogate::{load_bundle, BUNDLE_FORMAT_VERSION};

pub const HISTORY_FILE: &str = "history.json";
pub const DESIGNS_FILE: &str = "designs.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const DISTRIBUTION_FILE: &str = "mse_distribution.csv";

fn num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:?}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// `round,k,metric,action`, one row per history event.
pub fn write_trajectory(path: &Path, history: &History) -> Result<()> {
    let mut out = String::from("round,k,metric,action\n");
    for e in history.events() {
        writeln!(out, "{},{},{},{}", e.round, e.k, num(e.metric), e.action.as_str())?;
    }
    write_atomic(path, out.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetEval {
    pub index: usize,
    /// Surrogate error on the target's own geometry, when it is known.
    pub forward_mse: Option<f64>,
    /// Surrogate loss of the best inverse-design candidate.
    pub surrogate_loss: f64,
    /// Re-simulation error of the best re-simulated candidate.
    pub resim_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Distribution {
    pub n_targets: usize,
    pub forward: Option<ErrorSummary>,
    pub surrogate: Option<ErrorSummary>,
    pub resim: Option<ErrorSummary>,
    /// Re-simulation was unavailable for at least one target.
    pub degraded: bool,
}

impl Distribution {
    pub fn of(rows: &[TargetEval]) -> Self {
        let forward: Vec<f64> = rows.iter().filter_map(|r| r.forward_mse).collect();
        let surrogate: Vec<f64> = rows.iter().map(|r| r.surrogate_loss).collect();
        let resim: Vec<f64> = rows.iter().filter_map(|r| r.resim_mse).collect();
        Self {
            n_targets: rows.len(),
            forward: ErrorSummary::of(&forward),
            surrogate: ErrorSummary::of(&surrogate),
            resim: ErrorSummary::of(&resim),
            degraded: resim.len() < rows.len(),
        }
    }
}

/// One row per target followed by a `summary` row. The summary row holds the
/// means in the per-target columns and fills the median/p95 columns, which
/// are empty on target rows.
pub fn write_distribution(path: &Path, rows: &[TargetEval]) -> Result<Distribution> {
    let dist = Distribution::of(rows);
    let mut out = String::from(
        "target,forward_mse,surrogate_loss,resim_mse,forward_median,forward_p95,resim_median,resim_p95\n",
    );
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},,,,",
            r.index,
            opt(r.forward_mse),
            num(r.surrogate_loss),
            opt(r.resim_mse)
        )?;
    }
    let mean = |s: Option<ErrorSummary>| opt(s.map(|s| s.mean));
    writeln!(
        out,
        "summary,{},{},{},{},{},{},{}",
        mean(dist.forward),
        mean(dist.surrogate),
        mean(dist.resim),
        opt(dist.forward.map(|s| s.median)),
        opt(dist.forward.map(|s| s.p95)),
        opt(dist.resim.map(|s| s.median)),
        opt(dist.resim.map(|s| s.p95)),
    )?;
    write_atomic(path, out.as_bytes())?;
    Ok(dist)
}

#[derive(Debug, Clone, Serialize)]
pub struct Seeds {
    pub oracle: u64,
    pub recipe: u64,
    pub inverse_design: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub bundle_format_version: u32,
    pub command: String,
    pub seeds: Seeds,
    /// Artifact name to path relative to the output directory.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, seeds: Seeds, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            bundle_format_version: BUNDLE_FORMAT_VERSION,
            command: command.into(),
            seeds,
            artifacts: BTreeMap::new(),
            config,
        }
    }

    pub fn add(&mut self, name: &str, relative: impl Into<PathBuf>) {
        self.artifacts.insert(name.into(), relative.into());
    }
}

/// Every listed artifact must exist; bundles and histories must also load.
pub fn validate_artifacts(out_dir: &Path, manifest: &Manifest) -> Result<()> {
    for (name, rel) in &manifest.artifacts {
        let path = out_dir.join(rel);
        if !path.exists() {
            bail!("artifact `{name}` missing at {}", path.display());
        }
        match name.as_str() {
            "forward_model" => {
                load_bundle(&path).with_context(|| format!("artifact `{name}` does not load"))?;
            }
            "history" => {
                History::load(&path).with_context(|| format!("artifact `{name}` does not parse"))?;
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_file_has_summary_row() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<TargetEval> = (0..5)
            .map(|i| TargetEval {
                index: i,
                forward_mse: Some(i as f64),
                surrogate_loss: 0.5,
                resim_mse: Some(10.0 * i as f64),
            })
            .collect();
        let path = dir.path().join("d.csv");
        let dist = write_distribution(&path, &rows).unwrap();
        assert_eq!(dist.resim.unwrap().median, 20.0);
        assert!(!dist.degraded);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[6], "summary,2.0,0.5,20.0,2.0,3.8,20.0,38.0");
    }

    #[test]
    fn missing_resim_marks_degraded() {
        let rows = [TargetEval {
            index: 0,
            forward_mse: None,
            surrogate_loss: 1.0,
            resim_mse: None,
        }];
        let d = Distribution::of(&rows);
        assert!(d.degraded && d.resim.is_none() && d.forward.is_none());
    }
}
