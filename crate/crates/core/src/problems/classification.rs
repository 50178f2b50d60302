//! Label-corrupted multinomial logistic regression: data hyper-cleaning
//! (x = per-sample weight logits) and regularization tuning (x = tau).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::BilevelProblem;
use crate::error::{config, Result};
use crate::seed;
use crate::stack::{axpy, norm_sq};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSpec {
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_spa")]
    pub samples_per_agent: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default)]
    pub corruption_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Ridge weight of the hyper-cleaning lower level.
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_test")]
    pub test_samples: usize,
    /// Scale of the class means relative to unit within-class noise.
    #[serde(default = "d_sep")]
    pub separation: f64,
}

fn d_n() -> usize {
    10
}
fn d_spa() -> usize {
    50
}
fn d_dim() -> usize {
    5
}
fn d_classes() -> usize {
    3
}
fn d_tau() -> f64 {
    0.01
}
fn d_test() -> usize {
    500
}
fn d_sep() -> f64 {
    1.5
}

impl Default for ClassificationSpec {
    fn default() -> Self {
        Self {
            n: d_n(),
            samples_per_agent: d_spa(),
            dim: d_dim(),
            classes: d_classes(),
            corruption_rate: 0.0,
            seed: 0,
            tau: d_tau(),
            test_samples: d_test(),
            separation: d_sep(),
        }
    }
}

/// Feature rows (bias column appended) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassData {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl ClassData {
    pub fn new(mut features: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.len() != labels.len() || labels.iter().any(|&l| l >= classes) {
            return config("labels do not match features or class count");
        }
        features.iter_mut().for_each(|f| f.push(1.0));
        Ok(Self { features, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn width(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: idx.iter().map(|&k| self.features[k].clone()).collect(),
            labels: idx.iter().map(|&k| self.labels[k]).collect(),
            classes: self.classes,
        }
    }

    /// Fraction of rows whose arg-max logit matches the label.
    pub fn accuracy(&self, w: &[f64]) -> f64 {
        let hits = self
            .features
            .iter()
            .zip(&self.labels)
            .filter(|(a, &l)| {
                let z = logits(w, a, self.classes);
                let best = z.iter().enumerate().fold((0, f64::MIN), |b, (c, &v)| if v > b.1 { (c, v) } else { b });
                best.0 == l
            })
            .count();
        hits as f64 / self.len().max(1) as f64
    }
}

fn logits(w: &[f64], a: &[f64], classes: usize) -> Vec<f64> {
    let p = a.len();
    (0..classes).map(|c| crate::stack::dot(&w[c * p..(c + 1) * p], a)).collect()
}

/// Cross-entropy of one sample and its gradient with respect to `w`.
fn ce(w: &[f64], a: &[f64], label: usize, classes: usize, want_grad: bool) -> (f64, Vec<f64>) {
    let z = logits(w, a, classes);
    let zmax = z.iter().copied().fold(f64::MIN, f64::max);
    let ez: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
    let tot: f64 = ez.iter().sum();
    let loss = tot.ln() + zmax - z[label];
    if !want_grad {
        return (loss, Vec::new());
    }
    let p = a.len();
    let mut g = vec![0.0; classes * p];
    for c in 0..classes {
        let coef = ez[c] / tot - if c == label { 1.0 } else { 0.0 };
        axpy(&mut g[c * p..(c + 1) * p], coef, a);
    }
    (loss, g)
}

/// Mean cross-entropy over `data` with per-row weights.
fn weighted_ce(w: &[f64], data: &ClassData, weights: Option<&[f64]>) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut g = vec![0.0; w.len()];
    for (k, (a, &l)) in data.features.iter().zip(&data.labels).enumerate() {
        let s = weights.map_or(1.0, |ws| ws[k]);
        let (lk, gk) = ce(w, a, l, data.classes, true);
        loss += s * lk;
        axpy(&mut g, s, &gk);
    }
    let m = data.len() as f64;
    g.iter_mut().for_each(|v| *v /= m);
    (loss / m, g)
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

#[derive(Debug, Clone)]
struct AgentData {
    train: ClassData,
    val: ClassData,
}

fn validate(spec: &ClassificationSpec) -> Result<()> {
    if spec.classes < 2 {
        return config("need at least two classes");
    }
    if !(0.0..1.0).contains(&spec.corruption_rate) {
        return config(format!("corruption rate {} outside [0, 1)", spec.corruption_rate));
    }
    if spec.n == 0 || spec.dim == 0 {
        return config("need at least one agent and one feature");
    }
    if spec.samples_per_agent < 10 || spec.samples_per_agent < spec.classes {
        return config("too few samples per agent for a 9:1 split covering every class");
    }
    Ok(())
}

fn synthetic(spec: &ClassificationSpec, count: usize, means: &[Vec<f64>], rng: &mut impl Rng) -> Result<ClassData> {
    let mut feats = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for k in 0..count {
        let l = k % spec.classes;
        feats.push(means[l].iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect());
        labels.push(l);
    }
    ClassData::new(feats, labels, spec.classes)
}

/// Splits per-agent samples 9:1 into train/validation and flips a
/// `corruption_rate` fraction of train labels to a uniformly drawn other class.
fn partition(spec: &ClassificationSpec, pool: &ClassData, rng: &mut impl Rng) -> Vec<AgentData> {
    let m = spec.samples_per_agent;
    let m_val = (m / 10).max(1);
    (0..spec.n)
        .map(|i| {
            let idx: Vec<usize> = (i * m..(i + 1) * m).map(|k| k % pool.len()).collect();
            let mut train = pool.subset(&idx[..m - m_val]);
            let val = pool.subset(&idx[m - m_val..]);
            for l in train.labels.iter_mut() {
                if rng.random::<f64>() < spec.corruption_rate {
                    let shift = rng.random_range(1..spec.classes);
                    *l = (*l + shift) % spec.classes;
                }
            }
            AgentData { train, val }
        })
        .collect()
}

fn make_data(spec: &ClassificationSpec, real: Option<(&ClassData, &ClassData)>) -> Result<(Vec<AgentData>, ClassData)> {
    validate(spec)?;
    let mut rng = seed::rng_from(&[spec.seed, 0x4843]);
    let (pool, test) = match real {
        Some((train, test)) => {
            if train.classes != spec.classes || train.len() < spec.n * spec.samples_per_agent {
                return config("real dataset does not match class count or is too small");
            }
            (train.clone(), test.clone())
        }
        None => {
            let means: Vec<Vec<f64>> = (0..spec.classes)
                .map(|_| (0..spec.dim).map(|_| spec.separation * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            let pool = synthetic(spec, spec.n * spec.samples_per_agent, &means, &mut rng)?;
            let test = synthetic(spec, spec.test_samples, &means, &mut rng)?;
            (pool, test)
        }
    };
    let agents = partition(spec, &pool, &mut rng);
    Ok((agents, test))
}

/// Lower level `g_i = (1/m) sum_j sigma(psi_j) ce_j(w) + tau/2 ||w||^2`,
/// upper level `f_i` = clean validation cross-entropy.
#[derive(Debug, Clone)]
pub struct HypercleaningProblem {
    agents: Vec<AgentData>,
    test: ClassData,
    tau: f64,
    m_train: usize,
    width: usize,
    classes: usize,
}

pub fn build_hypercleaning_problem(
    spec: &ClassificationSpec,
    real: Option<(&ClassData, &ClassData)>,
) -> Result<HypercleaningProblem> {
    if !(spec.tau > 0.0) {
        return config("hyper-cleaning needs a positive ridge weight");
    }
    let (agents, test) = make_data(spec, real)?;
    let m_train = agents[0].train.len();
    let width = agents[0].train.width();
    Ok(HypercleaningProblem { agents, test, tau: spec.tau, m_train, width, classes: spec.classes })
}

impl HypercleaningProblem {
    fn block<'a>(&self, i: usize, x: &'a [f64]) -> &'a [f64] {
        &x[i * self.m_train..(i + 1) * self.m_train]
    }

    pub fn test_accuracy(&self, w: &[f64]) -> f64 {
        self.test.accuracy(w)
    }
}

impl BilevelProblem for HypercleaningProblem {
    fn name(&self) -> &str {
        "hypercleaning"
    }
    fn n(&self) -> usize {
        self.agents.len()
    }
    fn dx(&self) -> usize {
        self.agents.len() * self.m_train
    }
    fn dy(&self) -> usize {
        self.classes * self.width
    }

    fn f(&self, i: usize, _x: &[f64], y: &[f64]) -> f64 {
        weighted_ce(y, &self.agents[i].val, None).0
    }

    fn g(&self, i: usize, x: &[f64], y: &[f64]) -> f64 {
        let s: Vec<f64> = self.block(i, x).iter().map(|&t| sigmoid(t)).collect();
        weighted_ce(y, &self.agents[i].train, Some(&s)).0 + 0.5 * self.tau * norm_sq(y)
    }

    fn grad_f_x(&self, _i: usize, x: &[f64], _y: &[f64]) -> Vec<f64> {
        vec![0.0; x.len()]
    }

    fn grad_f_y(&self, i: usize, _x: &[f64], y: &[f64]) -> Vec<f64> {
        weighted_ce(y, &self.agents[i].val, None).1
    }

    /// Nonzero only on agent `i`'s own weights: `sigma'(psi_j) ce_j / m`.
    fn grad_g_x(&self, i: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        let tr = &self.agents[i].train;
        let m = tr.len() as f64;
        for (k, (a, &l)) in tr.features.iter().zip(&tr.labels).enumerate() {
            let psi = x[i * self.m_train + k];
            let s = sigmoid(psi);
            out[i * self.m_train + k] = s * (1.0 - s) * ce(y, a, l, self.classes, false).0 / m;
        }
        out
    }

    fn grad_g_y(&self, i: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        let s: Vec<f64> = self.block(i, x).iter().map(|&t| sigmoid(t)).collect();
        let mut g = weighted_ce(y, &self.agents[i].train, Some(&s)).1;
        axpy(&mut g, self.tau, y);
        g
    }

    fn extra_metrics(&self, _x: &[f64], y: &[f64]) -> Vec<(String, f64)> {
        let val = (0..self.n()).map(|i| weighted_ce(y, &self.agents[i].val, None).0).sum::<f64>() / self.n() as f64;
        vec![("test_accuracy".into(), self.test_accuracy(y)), ("validation_loss".into(), val)]
    }
}

/// Lower level `g_i = ce_train(w) + tau ||w||^2` with scalar `x = tau`,
/// upper level `f_i` = clean validation cross-entropy.
#[derive(Debug, Clone)]
pub struct HpoProblem {
    agents: Vec<AgentData>,
    test: ClassData,
    width: usize,
    classes: usize,
}

pub fn build_hpo_problem(spec: &ClassificationSpec, real: Option<(&ClassData, &ClassData)>) -> Result<HpoProblem> {
    let (agents, test) = make_data(spec, real)?;
    let width = agents[0].train.width();
    Ok(HpoProblem { agents, test, width, classes: spec.classes })
}

impl HpoProblem {
    pub fn test_accuracy(&self, w: &[f64]) -> f64 {
        self.test.accuracy(w)
    }
}

impl BilevelProblem for HpoProblem {
    fn name(&self) -> &str {
        "hpo"
    }
    fn n(&self) -> usize {
        self.agents.len()
    }
    fn dx(&self) -> usize {
        1
    }
    fn dy(&self) -> usize {
        self.classes * self.width
    }

    fn f(&self, i: usize, _x: &[f64], y: &[f64]) -> f64 {
        weighted_ce(y, &self.agents[i].val, None).0
    }

    fn g(&self, i: usize, x: &[f64], y: &[f64]) -> f64 {
        weighted_ce(y, &self.agents[i].train, None).0 + x[0] * norm_sq(y)
    }

    fn grad_f_x(&self, _i: usize, _x: &[f64], _y: &[f64]) -> Vec<f64> {
        vec![0.0]
    }

    fn grad_f_y(&self, i: usize, _x: &[f64], y: &[f64]) -> Vec<f64> {
        weighted_ce(y, &self.agents[i].val, None).1
    }

    fn grad_g_x(&self, _i: usize, _x: &[f64], y: &[f64]) -> Vec<f64> {
        vec![norm_sq(y)]
    }

    fn grad_g_y(&self, i: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut g = weighted_ce(y, &self.agents[i].train, None).1;
        axpy(&mut g, 2.0 * x[0], y);
        g
    }

    fn extra_metrics(&self, _x: &[f64], y: &[f64]) -> Vec<(String, f64)> {
        let val = (0..self.n()).map(|i| weighted_ce(y, &self.agents[i].val, None).0).sum::<f64>() / self.n() as f64;
        vec![("test_accuracy".into(), self.test_accuracy(y)), ("validation_loss".into(), val)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::fd::{grad, rel_err};

    fn probe(rng: &mut impl Rng, d: usize, s: f64) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-s..s)).collect()
    }

    fn small() -> ClassificationSpec {
        ClassificationSpec { n: 3, samples_per_agent: 20, dim: 3, classes: 3, corruption_rate: 0.3, ..Default::default() }
    }

    #[test]
    fn validation_errors() {
        assert!(build_hpo_problem(&ClassificationSpec { classes: 1, ..small() }, None).is_err());
        assert!(build_hpo_problem(&ClassificationSpec { corruption_rate: 1.0, ..small() }, None).is_err());
        assert!(build_hpo_problem(&ClassificationSpec { samples_per_agent: 5, ..small() }, None).is_err());
    }

    #[test]
    fn zero_weights_give_half_weighted_logistic_loss() {
        let spec = ClassificationSpec { corruption_rate: 0.0, ..small() };
        let p = build_hypercleaning_problem(&spec, None).unwrap();
        let mut rng = seed::rng_from(&[5]);
        let y = probe(&mut rng, p.dy(), 1.0);
        let x = vec![0.0; p.dx()];
        let want = 0.5 * weighted_ce(&y, &p.agents[0].train, None).0 + 0.5 * spec.tau * norm_sq(&y);
        assert!((p.g(0, &x, &y) - want).abs() < 1e-14);
    }

    #[test]
    fn weight_gradient_sign_and_locality() {
        let p = build_hypercleaning_problem(&small(), None).unwrap();
        let mut rng = seed::rng_from(&[6]);
        let (x, y) = (probe(&mut rng, p.dx(), 2.0), probe(&mut rng, p.dy(), 1.0));
        let g = p.grad_g_x(1, &x, &y);
        let m = p.m_train;
        assert!(g.iter().all(|&v| v >= 0.0));
        assert!(g[..m].iter().chain(&g[2 * m..]).all(|&v| v == 0.0));
        assert!(p.grad_f_x(1, &x, &y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let hc = build_hypercleaning_problem(&small(), None).unwrap();
        let hpo = build_hpo_problem(&small(), None).unwrap();
        let mut rng = seed::rng_from(&[7]);
        let probs: [&dyn BilevelProblem; 2] = [&hc, &hpo];
        for p in probs {
            for _ in 0..20 {
                let x = probe(&mut rng, p.dx(), 1.0).iter().map(|v| v.abs()).collect::<Vec<_>>();
                let y = probe(&mut rng, p.dy(), 1.0);
                let i = rng.random_range(0..p.n());
                assert!(rel_err(&p.grad_f_y(i, &x, &y), &grad(|a| p.f(i, &x, a), &y, 1e-6)) < 1e-5);
                assert!(rel_err(&p.grad_g_y(i, &x, &y), &grad(|a| p.g(i, &x, a), &y, 1e-6)) < 1e-5);
                assert!(rel_err(&p.grad_g_x(i, &x, &y), &grad(|a| p.g(i, a, &y), &x, 1e-6)) < 1e-5);
            }
        }
    }

    #[test]
    fn hpo_tau_gradient_vanishes_at_zero_weights() {
        let p = build_hpo_problem(&small(), None).unwrap();
        assert_eq!(p.grad_g_x(0, &[3.0], &vec![0.0; p.dy()]), vec![0.0]);
    }

    /// Plain gradient descent on the averaged lower level.
    fn lower_descent(p: &HpoProblem, tau: f64, steps: usize) -> Vec<f64> {
        let mut y = vec![0.0; p.dy()];
        for _ in 0..steps {
            let mut g = vec![0.0; p.dy()];
            for i in 0..p.n() {
                axpy(&mut g, 1.0 / p.n() as f64, &p.grad_g_y(i, &[tau], &y));
            }
            let eta = 0.5 / (1.0 + 2.0 * tau);
            axpy(&mut y, -eta, &g);
        }
        y
    }

    #[test]
    fn larger_tau_shrinks_lower_solution() {
        let p = build_hpo_problem(&small(), None).unwrap();
        let norms: Vec<f64> = [0.1, 1.0, 10.0].iter().map(|&t| norm_sq(&lower_descent(&p, t, 1000)).sqrt()).collect();
        assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
    }

    #[test]
    fn zero_tau_is_unregularized_training() {
        let p = build_hpo_problem(&small(), None).unwrap();
        let mut rng = seed::rng_from(&[9]);
        let y = probe(&mut rng, p.dy(), 1.0);
        assert_eq!(p.grad_g_y(0, &[0.0], &y), weighted_ce(&y, &p.agents[0].train, None).1);
    }

    #[test]
    fn real_data_path() {
        let feats: Vec<Vec<f64>> = (0..80).map(|k| vec![(k % 2) as f64, 1.0 - (k % 2) as f64]).collect();
        let labels: Vec<usize> = (0..80).map(|k| k % 2).collect();
        let train = ClassData::new(feats.clone(), labels.clone(), 2).unwrap();
        let test = ClassData::new(feats, labels, 2).unwrap();
        let spec = ClassificationSpec { n: 2, samples_per_agent: 40, dim: 2, classes: 2, ..Default::default() };
        let p = build_hypercleaning_problem(&spec, Some((&train, &test))).unwrap();
        assert_eq!(p.dy(), 2 * 3);
        let w = [-5.0, 5.0, 0.0, 5.0, -5.0, 0.0];
        assert_eq!(p.test_accuracy(&w), 1.0);
    }
}
