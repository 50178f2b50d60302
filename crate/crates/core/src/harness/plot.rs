//! Column files for external plotting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::run::RunResult;
use crate::error::{domain, Result};

/// Writes `<dir>/<experiment>_<metric>.dat`. One run gives `k value`
/// columns; several give `k mean std`, aligned on the shared row prefix.
/// Header lines start with `#`.
pub fn emit_plotdata(runs: &[RunResult], experiment: &str, metric: &str, log_scale: bool, dir: &Path) -> Result<PathBuf> {
    let text = plotdata(runs, experiment, metric, log_scale)?;
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{experiment}_{metric}.dat"));
    std::fs::write(&path, text)?;
    Ok(path)
}

pub fn plotdata(runs: &[RunResult], experiment: &str, metric: &str, log_scale: bool) -> Result<String> {
    if runs.is_empty() {
        return domain("no runs to plot");
    }
    let len = runs.iter().map(|r| r.rows.len()).min().unwrap_or(0);
    let mut s = String::new();
    let _ = writeln!(s, "# experiment={experiment} metric={metric} runs={} log_scale={log_scale}", runs.len());
    if runs.len() == 1 {
        let _ = writeln!(s, "# k value");
        for r in &runs[0].rows {
            if let Some(v) = r.field(metric) {
                let _ = writeln!(s, "{} {v:e}", r.k);
            }
        }
        return Ok(s);
    }
    let _ = writeln!(s, "# k mean std");
    for idx in 0..len {
        let vals: Vec<f64> = runs.iter().filter_map(|r| r.rows[idx].field(metric)).collect();
        if vals.len() != runs.len() {
            continue;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        let _ = writeln!(s, "{} {m:e} {sd:e}", runs[0].rows[idx].k);
    }
    Ok(s)
}
