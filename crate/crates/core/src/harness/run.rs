//! Single experiment execution.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;

use super::config::{ExperimentConfig, ProblemConfig};
use crate::algorithms::{
    centralized_f2sa_iteration, fab_iteration, push_sgd_iteration, pushpull_single_iteration, pushpull_soba_iteration,
    pushsum_fab_iteration, static_fab_iteration, Algorithm, CentralState, Oracle, StepSizes, SwarmState,
};
use crate::diagnostics::{lyapunov_value, metrics_for, rel_err, AvgDynInput, LyapunovWeights, MetricsRow, ProblemView, CSV_HEADER};
use crate::digraph::{Digraph, TopologySchedule};
use crate::error::{FabError, Result};
use crate::mixing::{mixing_at, MixingPair, WeightScheme, WeightVectors};
use crate::problems::classification::{build_hpo_problem, build_hypercleaning_problem, ClassData};
use crate::problems::idx::{load_images, load_labels};
use crate::problems::quadratic::build_quadratic_problem;
use crate::problems::rl::build_rl_problem;
use crate::problems::single::{mean_grad, BumpSingle, CosineSingle, Lifted, QuadraticSingle, SingleLevelProblem};
use crate::problems::{hypergradient, BilevelProblem};
use crate::seed::{self, NoiseSpec};
use crate::stack::{norm_sq, Stack};

/// A built problem: bilevel always, single-level when the problem has one.
#[derive(Clone)]
pub struct Instance {
    pub bilevel: Arc<dyn BilevelProblem>,
    pub single: Option<Arc<dyn SingleLevelProblem>>,
}

impl Instance {
    fn from_single(s: Arc<dyn SingleLevelProblem>) -> Self {
        Self { bilevel: Arc::new(Lifted::new(s.clone(), 1, 1.0)), single: Some(s) }
    }

    fn view(&self) -> ProblemView<'_> {
        match &self.single {
            Some(s) => ProblemView::Single(s.as_ref()),
            None => ProblemView::Bilevel(self.bilevel.as_ref()),
        }
    }
}

fn class_data(cfg: &ExperimentConfig, classes: usize) -> Result<Option<(ClassData, ClassData)>> {
    let Some(d) = &cfg.data else { return Ok(None) };
    let train = ClassData::new(load_images(&d.train_images)?, load_labels(&d.train_labels)?, classes)?;
    let test = ClassData::new(load_images(&d.test_images)?, load_labels(&d.test_labels)?, classes)?;
    Ok(Some((train, test)))
}

pub fn build_instance(cfg: &ExperimentConfig) -> Result<Instance> {
    Ok(match &cfg.problem {
        ProblemConfig::Quadratic(s) => Instance { bilevel: Arc::new(build_quadratic_problem(s)?), single: None },
        ProblemConfig::Rl(s) => Instance { bilevel: Arc::new(build_rl_problem(s)?), single: None },
        ProblemConfig::RlSingle(s) => Instance::from_single(Arc::new(build_rl_problem(s)?.single_level())),
        ProblemConfig::Hypercleaning(s) => {
            let real = class_data(cfg, s.classes)?;
            let p = build_hypercleaning_problem(s, real.as_ref().map(|(a, b)| (a, b)))?;
            Instance { bilevel: Arc::new(p), single: None }
        }
        ProblemConfig::Hpo(s) => {
            let real = class_data(cfg, s.classes)?;
            let p = build_hpo_problem(s, real.as_ref().map(|(a, b)| (a, b)))?;
            Instance { bilevel: Arc::new(p), single: None }
        }
        ProblemConfig::Bump(s) => Instance::from_single(Arc::new(BumpSingle::build(s)?)),
        ProblemConfig::Cosine(s) => Instance::from_single(Arc::new(CosineSingle::build(s)?)),
        ProblemConfig::QuadraticSingle { n, dim, seed } => Instance::from_single(Arc::new(QuadraticSingle::build(*n, *dim, *seed)?)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub iteration: u64,
    pub agent: usize,
    pub variable: &'static str,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSummary {
    pub name: String,
    pub iterations_run: u64,
    /// First checked iteration with `rel_err` below the threshold.
    pub iterations_to_threshold: Option<u64>,
    pub divergence: Option<Divergence>,
    pub final_rel_err: Option<f64>,
    pub final_grad_norm_sq: Option<f64>,
    /// Minima over the recorded rows.
    pub min_grad_norm_sq: Option<f64>,
    pub min_consensus: [f64; 3],
    pub final_consensus: [f64; 3],
    pub wall_time_s: f64,
    /// Bytes held by iterates, trackers and stored weight vectors; counted, not measured.
    pub peak_memory_bytes: usize,
    pub comm_cost_floats: u64,
    pub extras: Vec<(String, f64)>,
}

impl RunSummary {
    /// Budget exhausted or diverged without reaching the threshold.
    pub fn exceeded(&self) -> bool {
        self.iterations_to_threshold.is_none()
    }

    pub fn render(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6e}"));
        let mut s = String::new();
        let _ = writeln!(s, "name {}", self.name);
        let _ = writeln!(s, "iterations_run {}", self.iterations_run);
        let _ = writeln!(
            s,
            "iterations_to_threshold {}",
            match (self.iterations_to_threshold, self.final_rel_err) {
                (Some(k), _) => k.to_string(),
                (None, Some(_)) => ">max".to_string(),
                (None, None) => "-".to_string(),
            }
        );
        if let Some(d) = &self.divergence {
            let _ = writeln!(s, "divergence iteration={} agent={} variable={}", d.iteration, d.agent, d.variable);
        }
        let _ = writeln!(s, "final_rel_err {}", opt(self.final_rel_err));
        let _ = writeln!(s, "final_grad_norm_sq {}", opt(self.final_grad_norm_sq));
        let _ = writeln!(s, "min_grad_norm_sq {}", opt(self.min_grad_norm_sq));
        let _ = writeln!(s, "min_consensus {:.6e} {:.6e} {:.6e}", self.min_consensus[0], self.min_consensus[1], self.min_consensus[2]);
        let _ = writeln!(
            s,
            "final_consensus {:.6e} {:.6e} {:.6e}",
            self.final_consensus[0], self.final_consensus[1], self.final_consensus[2]
        );
        let _ = writeln!(s, "wall_time_s {:.3}", self.wall_time_s);
        let _ = writeln!(s, "peak_memory_bytes {}", self.peak_memory_bytes);
        let _ = writeln!(s, "comm_cost_floats {}", self.comm_cost_floats);
        for (k, v) in &self.extras {
            let _ = writeln!(s, "{k} {v:.6e}");
        }
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunResult {
    pub rows: Vec<MetricsRow>,
    /// `(k, Phi)` at the recorded iterations when requested.
    pub lyapunov: Vec<(u64, f64)>,
    pub summary: RunSummary,
}

impl RunResult {
    pub fn csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    /// Writes `metrics.csv`, `summary.txt` and, when present, `lyapunov.csv`.
    pub fn write_to(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.csv())?;
        std::fs::write(dir.join("summary.txt"), self.summary.render())?;
        if !self.lyapunov.is_empty() {
            let mut s = String::from("k,phi\n");
            for (k, v) in &self.lyapunov {
                let _ = writeln!(s, "{k},{v:e}");
            }
            std::fs::write(dir.join("lyapunov.csv"), s)?;
        }
        Ok(())
    }
}

/// Source of per-iteration graphs and mixing pairs.
struct Network {
    schedule: Option<TopologySchedule>,
    scheme: WeightScheme,
    n: usize,
}

impl Network {
    fn at(&self, k: u64) -> Result<(Option<Digraph>, MixingPair)> {
        match &self.schedule {
            Some(s) => {
                let (g, m) = mixing_at(s, self.scheme, k)?;
                Ok((Some(g), m))
            }
            None => Ok((None, MixingPair::identity(self.n))),
        }
    }
}

/// `alpha_0, ..., alpha_K` with `alpha_K` uniform and `alpha_k = (A^k)^T alpha_{k+1}`,
/// regenerating each `A^k` instead of storing the matrices.
fn backward_alpha_stream(net: &Network, horizon: u64) -> Result<Vec<Vec<f64>>> {
    let n = net.n;
    let mut out = vec![vec![1.0 / n as f64; n]; horizon as usize + 1];
    for k in (0..horizon).rev() {
        let (_, m) = net.at(k)?;
        let next = &out[k as usize + 1];
        out[k as usize] = (0..n).map(|j| (0..n).map(|i| next[i] * m.a[(i, j)]).sum()).collect();
    }
    Ok(out)
}

fn initial_stacks(cfg: &ExperimentConfig, p: &dyn BilevelProblem, oracle: Oracle, steps: &StepSizes) -> Result<[Stack; 3]> {
    let n = oracle.n();
    let (dx, dy) = oracle.dims();
    let mut x = Stack::zeros(n, dx);
    let mut y = Stack::zeros(n, dy);
    let mut z = Stack::zeros(n, dy);
    if let Some(init) = cfg.init {
        for i in 0..n {
            let mut rng = seed::rng_from(&[cfg.seed, 0x494E_4954, i as u64]);
            for s in [&mut x, &mut y, &mut z] {
                s.row_mut(i).iter_mut().for_each(|v| *v = rng.random_range(init.low..=init.high));
            }
        }
    }
    if cfg.warm_start > 0 && dy > 0 && !matches!(oracle, Oracle::Soba { .. }) {
        let eta = steps.at(0, None);
        for i in 0..n {
            for _ in 0..cfg.warm_start {
                for (s, e) in [(&mut y, eta.y), (&mut z, eta.z)] {
                    let g = p.grad_g_y(i, x.row(i), s.row(i));
                    crate::stack::axpy(s.row_mut(i), -e, &g);
                }
            }
        }
    }
    Ok([x, y, z])
}

fn edge_count(g: &Option<Digraph>) -> u64 {
    g.as_ref().map_or(0, |g| g.edge_count() as u64)
}

fn divergence_of(e: FabError) -> Result<Divergence> {
    match e {
        FabError::Divergence { iteration, agent, variable } => Ok(Divergence { iteration, agent, variable }),
        other => Err(other),
    }
}

struct Recorder<'a> {
    inst: &'a Instance,
    x_star: Option<Vec<f64>>,
    rows: Vec<MetricsRow>,
    lyapunov: Vec<(u64, f64)>,
    started: Instant,
}

impl Recorder<'_> {
    fn push(&mut self, mut row: MetricsRow, comm: u64) {
        row.wall_time_s = self.started.elapsed().as_secs_f64();
        row.comm_cost_floats = comm;
        self.rows.push(row);
    }

    fn central_row(&self, cs: &CentralState) -> Result<MetricsRow> {
        let mut row = MetricsRow { k: cs.k, ..Default::default() };
        match self.inst.view() {
            ProblemView::Single(s) => row.grad_norm_sq_single = Some(norm_sq(&mean_grad(s, &cs.x))),
            ProblemView::Bilevel(p) => {
                row.hypergrad_norm_sq = match hypergradient(p, &cs.x) {
                    Ok(g) => Some(norm_sq(&g)),
                    Err(FabError::Unsupported(_)) => None,
                    Err(e) => return Err(e),
                }
            }
        }
        row.rel_err = self.x_star.as_deref().map(|xs| rel_err(&cs.x, xs));
        Ok(row)
    }
}

/// Runs `cfg` to its budget or stopping threshold. Numerical divergence is
/// reported in the summary rather than as an error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let inst = build_instance(cfg)?;
    run_on(cfg, &inst)
}

/// As [`run_experiment`] with a prebuilt problem.
pub fn run_on(cfg: &ExperimentConfig, inst: &Instance) -> Result<RunResult> {
    let started = Instant::now();
    let p = inst.bilevel.as_ref();
    let n = p.n();
    let (steps, lambda) = cfg.effective_steps();
    let noise = NoiseSpec::new(cfg.seed, cfg.noise).map(|ns| ns.with_kind(cfg.noise_kind));
    let alg = cfg.algorithm;
    let net = Network {
        schedule: if n >= 2 && alg != Algorithm::CentralizedF2sa { Some(cfg.schedule()?) } else { None },
        scheme: cfg.topology.scheme,
        n,
    };
    let mut rec = Recorder { inst, x_star: p.optimal_x(), rows: Vec::new(), lyapunov: Vec::new(), started };
    let mut summary = RunSummary { name: cfg.name.clone(), ..Default::default() };
    let stop_on = |row_err: Option<f64>| cfg.stopping.enabled && row_err.is_some_and(|e| e < cfg.stopping.rel_err);
    let record_at = |k: u64| k.is_multiple_of(cfg.metrics.every) || k.is_multiple_of(cfg.stopping.check_every) || k == cfg.iterations;

    if alg == Algorithm::CentralizedF2sa {
        let lambda = lambda.expect("validated");
        let mut cs = CentralState::zeros(p.dx(), p.dy());
        rec.push(rec.central_row(&cs)?, 0);
        while cs.k < cfg.iterations {
            match centralized_f2sa_iteration(&cs, p, &steps, lambda, noise.as_ref()) {
                Ok(next) => cs = next,
                Err(e) => {
                    summary.divergence = Some(divergence_of(e)?);
                    break;
                }
            }
            if record_at(cs.k) {
                let row = rec.central_row(&cs)?;
                let hit = cs.k.is_multiple_of(cfg.stopping.check_every) && stop_on(row.rel_err);
                rec.push(row, 0);
                if hit {
                    summary.iterations_to_threshold = Some(cs.k);
                    break;
                }
            }
        }
        summary.iterations_run = cs.k;
        summary.extras = p.extra_metrics(&cs.x, &cs.y);
        summary.peak_memory_bytes = 8 * 3 * (p.dx() + 2 * p.dy());
        return Ok(finish(rec, summary));
    }

    let oracle = match alg {
        Algorithm::Pushpull | Algorithm::PushSgd => Oracle::Single { p: inst.single.as_deref().expect("validated") },
        Algorithm::PushpullSoba => Oracle::Soba { p },
        _ => Oracle::Penalty { p, lambda: lambda.expect("validated") },
    };
    let [x0, y0, z0] = initial_stacks(cfg, p, oracle, &steps)?;
    let mut st = SwarmState::new(oracle, x0, y0, z0, alg.uses_push_sum(), noise.as_ref())?;

    let alphas = if alg.is_push_pull() && n >= 2 { Some(backward_alpha_stream(&net, cfg.iterations)?) } else { None };
    let uniform = vec![1.0 / n as f64; n];
    let alpha_at = |k: u64| alphas.as_ref().map_or(uniform.as_slice(), |a| a[k as usize].as_slice());
    let alpha_floor = alphas
        .as_ref()
        .map_or(1.0 / n as f64, |a| a.iter().flatten().copied().fold(f64::INFINITY, f64::min))
        .max(f64::MIN_POSITIVE);
    let mut beta = uniform.clone();
    let lyap_w = {
        let [c1, c2, c3, c4] = cfg.metrics.lyapunov_weights;
        LyapunovWeights { c1, c2, c3, c4 }
    };
    let want_lyapunov = cfg.metrics.lyapunov && alg == Algorithm::Fab;

    let frozen = if alg == Algorithm::StaticFab { Some(net.at(0)?.1) } else { None };
    let per_edge = alg.floats_per_edge(p.dx(), p.dy()) as u64;
    let state_floats = n * 3 * (2 * p.dx().max(1) + 4 * p.dy()) + 2 * n * n;
    summary.peak_memory_bytes = 8 * (2 * state_floats + alphas.as_ref().map_or(0, |a| a.len() * n));

    rec.push(metrics_for(&st, inst.view(), alpha_at(0), &beta, rec.x_star.as_deref(), None)?, 0);
    if want_lyapunov {
        if let Ok(v) = lyapunov_value(&st, p, alpha_at(0), &beta, lambda.unwrap_or(1.0), alpha_floor, lyap_w) {
            rec.lyapunov.push((0, v));
        }
    }

    while st.k < cfg.iterations {
        let k = st.k;
        let (g, mix) = net.at(k)?;
        let comm = edge_count(&g) * per_edge;
        summary.comm_cost_floats += comm;
        let lam = lambda.unwrap_or(1.0);
        let next = match alg {
            Algorithm::Fab => fab_iteration(&st, p, &mix, &steps, lam, noise.as_ref()),
            Algorithm::Pushpull => {
                pushpull_single_iteration(&st, inst.single.as_deref().expect("validated"), &mix, &steps, noise.as_ref())
            }
            Algorithm::PushpullSoba => pushpull_soba_iteration(&st, p, &mix, &steps, noise.as_ref()),
            Algorithm::StaticFab => match &g {
                Some(g) => static_fab_iteration(&st, p, frozen.as_ref().expect("set"), g, &steps, lam, noise.as_ref()),
                None => fab_iteration(&st, p, &mix, &steps, lam, noise.as_ref()),
            },
            Algorithm::PushsumFab => pushsum_fab_iteration(&st, p, &mix.b, &steps, lam, noise.as_ref()),
            Algorithm::PushSgd => push_sgd_iteration(&st, inst.single.as_deref().expect("validated"), &mix.b, &steps, noise.as_ref()),
            Algorithm::CentralizedF2sa => unreachable!("handled above"),
        };
        let next = match next {
            Ok(s) => s,
            Err(e) => {
                summary.divergence = Some(divergence_of(e)?);
                break;
            }
        };
        if alg != Algorithm::StaticFab {
            beta = WeightVectors { alpha: uniform.clone(), beta }.advance(&mix)?.beta;
        }
        let k1 = next.k;
        if record_at(k1) {
            let prev = alphas.as_ref().map(|_| AvgDynInput { prev: &st, alpha_prev: alpha_at(k), eta: steps.at(k, oracle.lambda()) });
            let row = metrics_for(&next, inst.view(), alpha_at(k1), &beta, rec.x_star.as_deref(), prev)?;
            let hit = k1 % cfg.stopping.check_every == 0 && stop_on(row.rel_err);
            rec.push(row, comm);
            if want_lyapunov {
                if let Ok(v) = lyapunov_value(&next, p, alpha_at(k1), &beta, lam, alpha_floor, lyap_w) {
                    rec.lyapunov.push((k1, v));
                }
            }
            st = next;
            if hit {
                summary.iterations_to_threshold = Some(k1);
                break;
            }
        } else {
            st = next;
        }
    }
    summary.iterations_run = st.k;
    let est = st.estimates();
    summary.extras = p.extra_metrics(&est[0].mean(), &est[1].mean());
    Ok(finish(rec, summary))
}

fn finish(rec: Recorder, mut summary: RunSummary) -> RunResult {
    summary.wall_time_s = rec.started.elapsed().as_secs_f64();
    let grad = |r: &MetricsRow| r.hypergrad_norm_sq.or(r.grad_norm_sq_single);
    if let Some(last) = rec.rows.last() {
        summary.final_rel_err = last.rel_err;
        summary.final_grad_norm_sq = grad(last);
        summary.final_consensus = last.consensus;
    }
    summary.min_grad_norm_sq = rec.rows.iter().filter_map(grad).reduce(f64::min);
    summary.min_consensus = [0, 1, 2].map(|b| rec.rows.iter().map(|r| r.consensus[b]).fold(f64::INFINITY, f64::min));
    RunResult { rows: rec.rows, lyapunov: rec.lyapunov, summary }
}

/// Per-iteration mixing matrices of `cfg`'s schedule (for inspection).
pub fn mixing_matrices(cfg: &ExperimentConfig, k: u64) -> Result<(Digraph, DMatrix<f64>, DMatrix<f64>)> {
    let s = cfg.schedule()?;
    let (g, m) = mixing_at(&s, cfg.topology.scheme, k)?;
    Ok((g, m.a, m.b))
}
