//! Fast invariant checks behind `fab selftest`.

use rand::Rng;

use crate::algorithms::{centralized_f2sa_iteration, fab_iteration, CentralState, Oracle, StepSizes, SwarmState};
use crate::diagnostics::{avg_dyn_residual, AvgDynInput};
use crate::digraph::TopologySchedule;
use crate::error::Result;
use crate::mixing::{backward_alpha, mixing_at, validate_pair, MixingPair, WeightScheme, WeightVectors};
use crate::problems::quadratic::{build_quadratic_problem, QuadraticSpec};
use crate::problems::{hypergradient, hyper_objective, BilevelProblem};
use crate::seed;

fn mixing_valid() -> Result<bool> {
    let s = TopologySchedule::periodic30(10, 0.3, 1, true)?;
    for k in 0..1000 {
        let (g, m) = mixing_at(&s, WeightScheme::Uniform, k)?;
        if !validate_pair(&m, &g)?.passed() {
            return Ok(false);
        }
    }
    Ok(true)
}

fn weight_bounds() -> Result<bool> {
    let n = 5;
    let s = TopologySchedule::periodic30(n, 0.3, 2, true)?;
    let mut wv = WeightVectors::uniform(n);
    for k in 0..300 {
        let (_, m) = mixing_at(&s, WeightScheme::Uniform, k)?;
        let floor_a = m.a_min.powi(n as i32) / n as f64;
        let floor_b = m.b_min.powi(n as i32) / n as f64;
        wv = wv.advance(&m)?;
        if wv.alpha.iter().any(|&a| a < floor_a) || wv.beta.iter().any(|&b| b < floor_b) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn fab_run_invariants() -> Result<bool> {
    let p = build_quadratic_problem(&QuadraticSpec::new(6, 3, 4, 5))?;
    let s = TopologySchedule::periodic30(6, 0.3, 3, true)?;
    let steps = StepSizes::uniform(0.05).normalized();
    let lambda = 4.0;
    let horizon = 300;
    let mats: Vec<MixingPair> = (0..horizon).map(|k| mixing_at(&s, WeightScheme::Uniform, k).map(|x| x.1)).collect::<Result<_>>()?;
    let alphas = backward_alpha(&mats.iter().map(|m| m.a.clone()).collect::<Vec<_>>());
    let mut st = SwarmState::zeros(Oracle::Penalty { p: &p, lambda }, false, None)?;
    for k in 0..horizon as usize {
        let next = fab_iteration(&st, &p, &mats[k], &steps, lambda, None)?;
        if next.tracking_gap().iter().any(|&g| g > 1e-8) {
            return Ok(false);
        }
        let inp = AvgDynInput { prev: &st, alpha_prev: &alphas[k], eta: steps.at(k as u64, Some(lambda)) };
        if avg_dyn_residual(&next, &alphas[k + 1], &inp) > 1e-9 {
            return Ok(false);
        }
        st = next;
    }
    Ok(true)
}

fn single_agent_reduction() -> Result<bool> {
    let p = build_quadratic_problem(&QuadraticSpec::new(1, 3, 3, 7))?;
    let steps = StepSizes::new(0.02, 0.05, 0.05);
    let lambda = 3.0;
    let mix = MixingPair::identity(1);
    let mut st = SwarmState::zeros(Oracle::Penalty { p: &p, lambda }, false, None)?;
    let mut cs = CentralState::zeros(3, 3);
    for _ in 0..300 {
        st = fab_iteration(&st, &p, &mix, &steps, lambda, None)?;
        cs = centralized_f2sa_iteration(&cs, &p, &steps, lambda, None)?;
        if st.x.row(0) != cs.x.as_slice() || st.y.row(0) != cs.y.as_slice() || st.z.row(0) != cs.z.as_slice() {
            return Ok(false);
        }
    }
    Ok(true)
}

fn hypergradient_fd() -> Result<bool> {
    let p = build_quadratic_problem(&QuadraticSpec::new(4, 3, 4, 11))?;
    let mut rng = seed::rng_from(&[12]);
    for _ in 0..5 {
        let x: Vec<f64> = (0..p.dx()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = hypergradient(&p, &x)?;
        for j in 0..p.dx() {
            let h = 1e-5;
            let mut a = x.clone();
            let mut b = x.clone();
            a[j] += h;
            b[j] -= h;
            let fd = (hyper_objective(&p, &a)? - hyper_objective(&p, &b)?) / (2.0 * h);
            if (fd - g[j]).abs() > 1e-4 * (1.0 + g[j].abs()) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Runs every check, reporting one `PASS`/`FAIL` line each.
pub fn run(mut report: impl FnMut(String)) -> bool {
    let checks: [(&str, fn() -> Result<bool>); 5] = [
        ("mixing validity", mixing_valid),
        ("weight vector bounds", weight_bounds),
        ("tracking conservation and averaged dynamics", fab_run_invariants),
        ("single-agent reduction", single_agent_reduction),
        ("hypergradient finite differences", hypergradient_fd),
    ];
    let mut all = true;
    for (name, f) in checks {
        let ok = matches!(f(), Ok(true));
        all &= ok;
        report(format!("{} {name}", if ok { "PASS" } else { "FAIL" }));
    }
    all
}
