//! Parameter grids run in parallel.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::config::SweepSpec;
use super::run::{run_experiment, RunSummary};
use crate::error::Result;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub values: Vec<f64>,
    /// One entry per repeat; a failed run carries its error message.
    pub runs: Vec<std::result::Result<RunSummary, String>>,
}

fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    Some((m, var.sqrt()))
}

impl CellResult {
    pub fn converged(&self) -> usize {
        self.runs.iter().filter(|r| matches!(r, Ok(s) if !s.exceeded())).count()
    }

    /// Mean and std of iterations-to-threshold over the converged repeats.
    pub fn iterations(&self) -> Option<(f64, f64)> {
        let v: Vec<f64> = self.runs.iter().filter_map(|r| r.as_ref().ok()?.iterations_to_threshold.map(|k| k as f64)).collect();
        mean_std(&v)
    }

    pub fn rel_err(&self) -> Option<(f64, f64)> {
        let v: Vec<f64> = self.runs.iter().filter_map(|r| r.as_ref().ok()?.final_rel_err).collect();
        mean_std(&v)
    }

    pub fn all_converged(&self) -> bool {
        self.converged() == self.runs.len()
    }
}

/// Seed of repeat `r`; shared by every cell so cells differ only in their
/// axis values.
pub fn repeat_seed(base: u64, repeat: u64) -> u64 {
    seed::mix(&[base, repeat])
}

pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<CellResult>> {
    spec.validate()?;
    let cells = spec.cells();
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| (0..spec.repeats).map(move |r| (c, r))).collect();
    let outcomes: Vec<_> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let mut cfg = spec.cell_config(&cells[c])?;
            cfg.seed = repeat_seed(spec.base.seed, r);
            cfg.output = None;
            Ok(run_experiment(&cfg).map(|res| res.summary).map_err(|e| e.to_string()))
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<CellResult> = cells.into_iter().map(|values| CellResult { values, runs: Vec::new() }).collect();
    for ((c, _), o) in jobs.into_iter().zip(outcomes) {
        out[c].runs.push(o);
    }
    Ok(out)
}

/// Aligned CSV: axis values, converged count, iteration and error statistics.
pub fn sweep_table(spec: &SweepSpec, cells: &[CellResult]) -> String {
    let mut header: Vec<String> = spec.axes.iter().map(|a| a.param.label().to_string()).collect();
    header.extend(["converged", "iters_mean", "iters_std", "rel_err_mean", "rel_err_std", "outcome"].map(String::from));
    let mut rows = vec![header];
    for c in cells {
        let mut r: Vec<String> = c.values.iter().map(|v| format!("{v}")).collect();
        r.push(format!("{}/{}", c.converged(), c.runs.len()));
        match c.iterations() {
            Some((m, s)) => r.extend([format!("{m:.1}"), format!("{s:.1}")]),
            None => r.extend(["".into(), "".into()]),
        }
        match c.rel_err() {
            Some((m, s)) => r.extend([format!("{m:.3e}"), format!("{s:.3e}")]),
            None => r.extend(["".into(), "".into()]),
        }
        let failed = c.runs.iter().filter(|r| r.is_err()).count();
        r.push(if failed > 0 {
            format!("error({failed})")
        } else if c.all_converged() {
            "ok".into()
        } else {
            ">max".into()
        });
        rows.push(r);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0)).collect();
    let mut s = String::new();
    for r in rows {
        let cells: Vec<String> = r.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}")).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPEC: &str = r#"
repeats = 2
[[axes]]
param = "lambda"
values = [2.0, 4.0]

[base]
name = "s"
seed = 9
iterations = 60
algorithm = "fab"
lambda = 1.0
[base.problem]
kind = "quadratic"
n = 3
dx = 2
dy = 2
seed = 0
[base.steps]
eta_x = 0.05
eta_y = 0.05
eta_z = 0.05
[base.stopping]
enabled = false
"#;

    #[test]
    fn removing_an_axis_value_leaves_other_cells_unchanged() {
        let full = SweepSpec::from_toml(SPEC).unwrap();
        let mut cut = full.clone();
        cut.axes[0].values = vec![4.0];
        let a = run_sweep(&full).unwrap();
        let b = run_sweep(&cut).unwrap();
        let strip = |c: &CellResult| -> Vec<Option<f64>> { c.runs.iter().map(|r| r.as_ref().unwrap().final_rel_err).collect() };
        assert_eq!(strip(&a[1]), strip(&b[0]));
        let t = sweep_table(&full, &a);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().next().unwrap().contains("lambda"));
    }

    #[test]
    fn statistics() {
        assert_eq!(mean_std(&[1.0, 3.0]), Some((2.0, 1.0)));
        assert_eq!(mean_std(&[]), None);
    }
}
