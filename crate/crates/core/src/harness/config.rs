//! TOML experiment and sweep configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algorithms::{theory_rule, Algorithm, StepSizes};
use crate::digraph::{PhaseSpec, TopologySchedule};
use crate::error::{config, FabError, Result};
use crate::mixing::WeightScheme;
use crate::problems::classification::ClassificationSpec;
use crate::problems::quadratic::QuadraticSpec;
use crate::problems::rl::RlSpec;
use crate::problems::single::NonconvexSpec;
use crate::seed::NoiseKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    Quadratic(QuadraticSpec),
    Rl(RlSpec),
    RlSingle(RlSpec),
    Hypercleaning(ClassificationSpec),
    Hpo(ClassificationSpec),
    Bump(NonconvexSpec),
    Cosine(NonconvexSpec),
    QuadraticSingle { n: usize, dim: usize, #[serde(default)] seed: u64 },
}

impl ProblemConfig {
    pub fn n(&self) -> usize {
        match self {
            ProblemConfig::Quadratic(s) => s.n,
            ProblemConfig::Rl(s) | ProblemConfig::RlSingle(s) => s.n,
            ProblemConfig::Hypercleaning(s) | ProblemConfig::Hpo(s) => s.n,
            ProblemConfig::Bump(s) | ProblemConfig::Cosine(s) => s.n,
            ProblemConfig::QuadraticSingle { n, .. } => *n,
        }
    }

    pub fn is_single_level(&self) -> bool {
        matches!(
            self,
            ProblemConfig::RlSingle(_) | ProblemConfig::Bump(_) | ProblemConfig::Cosine(_) | ProblemConfig::QuadraticSingle { .. }
        )
    }

    fn set_n(&mut self, n: usize) {
        match self {
            ProblemConfig::Quadratic(s) => s.n = n,
            ProblemConfig::Rl(s) | ProblemConfig::RlSingle(s) => s.n = n,
            ProblemConfig::Hypercleaning(s) | ProblemConfig::Hpo(s) => s.n = n,
            ProblemConfig::Bump(s) | ProblemConfig::Cosine(s) => s.n = n,
            ProblemConfig::QuadraticSingle { n: m, .. } => *m = n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    /// Defaults to the period-30 ER / ring / reversed-ring cycle.
    #[serde(default)]
    pub phases: Option<Vec<PhaseSpec>>,
    #[serde(default = "d_nu")]
    pub nu: f64,
    #[serde(default)]
    pub regenerate: bool,
    #[serde(default)]
    pub scheme: WeightScheme,
    /// Defaults to the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub a_min_target: Option<f64>,
    #[serde(default)]
    pub b_min_target: Option<f64>,
}

fn d_nu() -> f64 {
    0.3
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self { phases: None, nu: d_nu(), regenerate: false, scheme: WeightScheme::Uniform, seed: None, a_min_target: None, b_min_target: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoppingConfig {
    #[serde(default = "d_true")]
    pub enabled: bool,
    #[serde(default = "d_rel")]
    pub rel_err: f64,
    #[serde(default = "d_every")]
    pub check_every: u64,
}

fn d_true() -> bool {
    true
}
fn d_rel() -> f64 {
    1e-2
}
fn d_every() -> u64 {
    20
}

impl Default for StoppingConfig {
    fn default() -> Self {
        Self { enabled: true, rel_err: d_rel(), check_every: d_every() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default = "d_every")]
    pub every: u64,
    #[serde(default)]
    pub lyapunov: bool,
    #[serde(default = "d_weights")]
    pub lyapunov_weights: [f64; 4],
}

fn d_weights() -> [f64; 4] {
    [1.0; 4]
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { every: d_every(), lyapunov: false, lyapunov_weights: d_weights() }
    }
}

/// Per-agent starting points for every block, drawn uniformly from `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub low: f64,
    pub high: f64,
}

/// `eta = eta0 K^{-1/3}`, `lambda = lambda0 K^{1/3}` for `K = iterations`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub eta0: f64,
    pub lambda0: f64,
}

/// IDX files replacing the synthetic classification data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub iterations: u64,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Noise standard deviation.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub noise_kind: NoiseKind,
    /// Local lower-level descent steps on `y` and `z` before the first iteration.
    #[serde(default)]
    pub warm_start: u64,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub topology: TopologyConfig,
    pub steps: StepSizes,
    #[serde(default)]
    pub scaling: Option<ScalingConfig>,
    #[serde(default)]
    pub stopping: StoppingConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub init: Option<InitConfig>,
    #[serde(default)]
    pub data: Option<DataPaths>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_value(parse_table(text)?)
    }

    fn from_value(v: toml::Table) -> Result<Self> {
        let cfg: Self = v.try_into().map_err(|e: toml::de::Error| FabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies `key.path=value` overrides before validating.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut t = parse_table(&read(path)?)?;
        apply_overrides(&mut t, overrides)?;
        Self::from_value(t)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn n(&self) -> usize {
        self.problem.n()
    }

    pub fn set_n(&mut self, n: usize) {
        self.problem.set_n(n);
    }

    /// Step sizes and penalty after the optional horizon scaling.
    pub fn effective_steps(&self) -> (StepSizes, Option<f64>) {
        match self.scaling {
            Some(s) => {
                let (eta, lambda) = theory_rule(self.iterations, s.eta0, s.lambda0);
                let st = StepSizes { eta_x: eta, eta_y: eta, eta_z: eta, ..self.steps };
                (st, Some(lambda))
            }
            None => (self.steps, self.lambda),
        }
    }

    pub fn schedule(&self) -> Result<TopologySchedule> {
        let seed = self.topology.seed.unwrap_or(self.seed);
        let n = self.n();
        match &self.topology.phases {
            Some(p) => TopologySchedule::new(n, p.clone(), seed, self.topology.regenerate),
            None => TopologySchedule::periodic30(n, self.topology.nu, seed, self.topology.regenerate),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return config("iterations must be at least 1");
        }
        if self.metrics.every == 0 || self.stopping.check_every == 0 {
            return config("metric and stopping cadences must be at least 1");
        }
        if !(self.stopping.rel_err > 0.0) {
            return config("stopping threshold must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return config("noise level must be nonnegative");
        }
        if self.noise_kind == NoiseKind::Observation && !matches!(self.problem, ProblemConfig::Rl(_)) {
            return config("observation noise is defined for the bilevel policy-evaluation problem only");
        }
        if self.n() == 0 {
            return config("problem needs at least one agent");
        }
        let (steps, lambda) = self.effective_steps();
        steps.validate()?;
        if self.algorithm.uses_penalty() {
            match lambda {
                Some(l) if l > 0.0 && l.is_finite() => {}
                _ => return config(format!("{:?} needs a positive lambda", self.algorithm)),
            }
        }
        if self.algorithm.is_single_level() && !self.problem.is_single_level() {
            return config(format!("{:?} runs on single-level problems only", self.algorithm));
        }
        if let Some(i) = self.init {
            if !(i.low <= i.high) || !i.low.is_finite() || !i.high.is_finite() {
                return config("init bounds must satisfy low <= high");
            }
        }
        if self.data.is_some() && !matches!(self.problem, ProblemConfig::Hypercleaning(_) | ProblemConfig::Hpo(_)) {
            return config("data files apply to classification problems only");
        }
        if self.n() >= 2 && self.algorithm != Algorithm::CentralizedF2sa {
            let s = self.schedule()?;
            self.topology.scheme.validate()?;
            if matches!(self.topology.scheme, WeightScheme::Alternating { .. }) && !s.is_ring_only() {
                return config("alternating weights need a ring-only schedule");
            }
        }
        Ok(())
    }
}

/// Cartesian grid over named axes, each cell repeated with independent seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub axes: Vec<Axis>,
    #[serde(default = "d_repeats")]
    pub repeats: u64,
}

fn d_repeats() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisKind {
    Lambda,
    EtaX,
    EtaY,
    EtaZ,
    /// Sets `eta_y` and `eta_z` together.
    EtaYz,
    N,
    Nu,
    Eps,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub param: AxisKind,
    pub values: Vec<f64>,
}

impl AxisKind {
    pub fn label(self) -> &'static str {
        match self {
            AxisKind::Lambda => "lambda",
            AxisKind::EtaX => "eta_x",
            AxisKind::EtaY => "eta_y",
            AxisKind::EtaZ => "eta_z",
            AxisKind::EtaYz => "eta_yz",
            AxisKind::N => "n",
            AxisKind::Nu => "nu",
            AxisKind::Eps => "eps",
            AxisKind::Noise => "noise",
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig, v: f64) -> Result<()> {
        match self {
            AxisKind::Lambda => cfg.lambda = Some(v),
            AxisKind::EtaX => cfg.steps.eta_x = v,
            AxisKind::EtaY => cfg.steps.eta_y = v,
            AxisKind::EtaZ => cfg.steps.eta_z = v,
            AxisKind::EtaYz => {
                cfg.steps.eta_y = v;
                cfg.steps.eta_z = v;
            }
            AxisKind::N => {
                if v < 1.0 || v.fract() != 0.0 {
                    return config(format!("agent count {v} is not a positive integer"));
                }
                cfg.set_n(v as usize);
            }
            AxisKind::Nu => {
                cfg.topology.nu = v;
                if let Some(ph) = cfg.topology.phases.as_mut() {
                    ph.iter_mut().for_each(|p| p.nu = v);
                }
            }
            AxisKind::Eps => match &mut cfg.topology.scheme {
                WeightScheme::Alternating { eps } => *eps = v,
                _ => return config("eps axis needs the alternating weight scheme"),
            },
            AxisKind::Noise => cfg.noise = v,
        }
        Ok(())
    }
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| FabError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() || self.axes.iter().any(|a| a.values.is_empty()) {
            return config("sweep needs at least one non-empty axis");
        }
        if self.repeats == 0 {
            return config("sweep needs at least one repeat");
        }
        self.base.validate()?;
        for cell in self.cells() {
            self.cell_config(&cell)?.validate()?;
        }
        Ok(())
    }

    /// Axis values for every cell, last axis varying fastest.
    pub fn cells(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new()];
        for a in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    a.values.iter().map(move |&v| {
                        let mut c = prefix.clone();
                        c.push(v);
                        c
                    })
                })
                .collect();
        }
        out
    }

    pub fn cell_config(&self, values: &[f64]) -> Result<ExperimentConfig> {
        let mut cfg = self.base.clone();
        for (a, &v) in self.axes.iter().zip(values) {
            a.param.apply(&mut cfg, v)?;
        }
        Ok(cfg)
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| FabError::Config(format!("{}: {e}", path.display())))
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| FabError::Config(e.to_string()))
}

/// Applies `a.b.c=value` overrides; the value is parsed as a TOML literal,
/// falling back to a plain string.
pub fn apply_overrides(t: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| FabError::Config(format!("override `{o}` lacks `=`")))?;
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut cur = &mut *t;
        for p in &parts[..parts.len() - 1] {
            cur = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| FabError::Config(format!("override `{key}` passes through a non-table")))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const QUAD: &str = r#"
name = "quad"
seed = 3
iterations = 200
algorithm = "fab"
lambda = 5.0

[problem]
kind = "quadratic"
n = 4
dx = 2
dy = 3
seed = 1

[steps]
eta_x = 0.05
eta_y = 0.05
eta_z = 0.05
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml(QUAD).unwrap();
        assert_eq!(c.n(), 4);
        assert_eq!(c.stopping.check_every, 20);
        assert_eq!(c.topology.nu, 0.3);
        assert_eq!(c.schedule().unwrap().period(), 30);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_configs() {
        for (key, val) in [
            ("iterations", "0"),
            ("lambda", "-1.0"),
            ("algorithm", "\"pushpull\""),
            ("metrics.every", "0"),
            ("stopping.rel_err", "0.0"),
            ("topology.nu", "1.5"),
            ("steps.eta_x", "0.0"),
            ("bogus", "1"),
        ] {
            let mut t: toml::Table = QUAD.parse().unwrap();
            apply_overrides(&mut t, &[format!("{key}={val}")]).unwrap();
            assert!(matches!(ExperimentConfig::from_value(t), Err(FabError::Config(_))), "{key}");
        }
    }

    #[test]
    fn overrides_patch_nested_keys() {
        let mut t: toml::Table = QUAD.parse().unwrap();
        apply_overrides(&mut t, &["problem.n=6".into(), "name=other".into(), "topology.regenerate=true".into()]).unwrap();
        let c = ExperimentConfig::from_value(t).unwrap();
        assert_eq!(c.n(), 6);
        assert_eq!(c.name, "other");
        assert!(c.topology.regenerate);
        assert!(apply_overrides(&mut QUAD.parse().unwrap(), &["noequals".into()]).is_err());
    }

    #[test]
    fn scaling_overrides_steps() {
        let mut c = ExperimentConfig::from_toml(QUAD).unwrap();
        c.iterations = 1000;
        c.scaling = Some(ScalingConfig { eta0: 1.0, lambda0: 2.0 });
        let (s, l) = c.effective_steps();
        assert!((s.eta_x - 0.1).abs() < 1e-12);
        assert!((l.unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn sweep_cells_in_order() {
        let text = format!(
            "repeats = 2\n[[axes]]\nparam = \"lambda\"\nvalues = [1.0, 2.0]\n[[axes]]\nparam = \"eta_yz\"\nvalues = [0.1, 0.2, 0.3]\n[base]\n{}",
            QUAD.replace("[problem]", "[base.problem]").replace("[steps]", "[base.steps]")
        );
        let s = SweepSpec::from_toml(&text).unwrap();
        let cells = s.cells();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[1], vec![1.0, 0.2]);
        let c = s.cell_config(&cells[5]).unwrap();
        assert_eq!((c.lambda, c.steps.eta_y, c.steps.eta_z), (Some(2.0), 0.3, 0.3));
    }
}
