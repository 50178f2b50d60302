//! Consensus, tracking and stationarity measures, plus the Lyapunov value.

use std::fmt::Write as _;

use crate::algorithms::{Eta, SwarmState};
use crate::error::{domain, FabError, Result};
use crate::problems::single::{mean_grad, SingleLevelProblem};
use crate::problems::{hypergradient, penalty_lower_solution, penalty_value, BilevelProblem};
use crate::stack::{dist_sq, norm_sq, Stack};

/// `D = sum_i w_i ||xi_i - xi_hat||^2` with `xi_hat = sum_i w_i xi_i`.
pub fn dispersion(points: &Stack, weights: &[f64]) -> Result<f64> {
    if points.n() != weights.len() {
        return domain("weights and points differ in length");
    }
    let hat = points.weighted_mean(weights);
    Ok(points.rows().zip(weights).map(|(r, &w)| w * dist_sq(r, &hat)).sum::<f64>() + 0.0)
}

/// `(1/n) sum_i ||xi_i - mean||^2`
pub fn consensus_error(points: &Stack) -> f64 {
    let n = points.n();
    dispersion(points, &vec![1.0 / n as f64; n]).expect("lengths agree")
}

/// `S = sum_j beta_j ||t_j / beta_j - sum_l t_l||^2`
pub fn tracking_dispersion(t: &Stack, beta: &[f64]) -> Result<f64> {
    if t.n() != beta.len() {
        return domain("beta and trackers differ in length");
    }
    if beta.iter().any(|&b| !(b > 0.0)) {
        return domain("tracking dispersion needs strictly positive beta");
    }
    let total = t.sum();
    Ok(t.rows()
        .zip(beta)
        .map(|(r, &b)| {
            let scaled: Vec<f64> = r.iter().map(|v| v / b).collect();
            b * dist_sq(&scaled, &total)
        })
        .sum::<f64>()
        + 0.0)
}

#[derive(Clone, Copy)]
pub enum ProblemView<'a> {
    Bilevel(&'a dyn BilevelProblem),
    Single(&'a dyn SingleLevelProblem),
}

/// Previous state and weights needed for the weighted-average dynamics check.
pub struct AvgDynInput<'a> {
    pub prev: &'a SwarmState,
    /// `alpha_k` paired with `prev`; the current state pairs with `alpha_{k+1}`.
    pub alpha_prev: &'a [f64],
    pub eta: Eta,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRow {
    pub k: u64,
    pub hypergrad_norm_sq: Option<f64>,
    pub grad_norm_sq_single: Option<f64>,
    pub consensus: [f64; 3],
    pub d: [f64; 3],
    pub s: [f64; 3],
    pub v_d: f64,
    pub v_s: f64,
    pub rel_err: Option<f64>,
    pub avg_dyn_residual: Option<f64>,
    pub wall_time_s: f64,
    pub comm_cost_floats: u64,
}

pub const CSV_HEADER: &str = "k,hypergrad_norm_sq,grad_norm_sq_single,consensus_x,consensus_y,consensus_z,\
D_x,D_y,D_z,S_x,S_y,S_z,V_D,V_S,rel_err,avg_dyn_residual,wall_time_s,comm_cost_floats";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let mut s = format!("{},{},{}", self.k, opt(self.hypergrad_norm_sq), opt(self.grad_norm_sq_single));
        for v in self.consensus.iter().chain(&self.d).chain(&self.s) {
            let _ = write!(s, ",{v:e}");
        }
        let _ = write!(
            s,
            ",{:e},{:e},{},{},{:.6},{}",
            self.v_d,
            self.v_s,
            opt(self.rel_err),
            opt(self.avg_dyn_residual),
            self.wall_time_s,
            self.comm_cost_floats
        );
        s
    }

    /// Named numeric value for plotting; `None` when absent or unknown.
    pub fn field(&self, name: &str) -> Option<f64> {
        Some(match name {
            "k" => self.k as f64,
            "hypergrad_norm_sq" => return self.hypergrad_norm_sq,
            "grad_norm_sq_single" => return self.grad_norm_sq_single,
            "consensus_x" => self.consensus[0],
            "consensus_y" => self.consensus[1],
            "consensus_z" => self.consensus[2],
            "D_x" => self.d[0],
            "D_y" => self.d[1],
            "D_z" => self.d[2],
            "S_x" => self.s[0],
            "S_y" => self.s[1],
            "S_z" => self.s[2],
            "V_D" => self.v_d,
            "V_S" => self.v_s,
            "rel_err" => return self.rel_err,
            "avg_dyn_residual" => return self.avg_dyn_residual,
            "wall_time_s" => self.wall_time_s,
            "comm_cost_floats" => self.comm_cost_floats as f64,
            _ => return None,
        })
    }
}

pub fn rel_err(x: &[f64], x_star: &[f64]) -> f64 {
    (dist_sq(x, x_star) / norm_sq(x_star)).sqrt()
}

/// Fills every metric the problem supports at state `st`; `alpha` and `beta`
/// are the weight vectors paired with this iteration.
pub fn metrics_for(
    st: &SwarmState,
    view: ProblemView,
    alpha: &[f64],
    beta: &[f64],
    x_star: Option<&[f64]>,
    prev: Option<AvgDynInput>,
) -> Result<MetricsRow> {
    let pts = st.estimates();
    let xbar = pts[0].mean();
    let mut row = MetricsRow { k: st.k, ..Default::default() };
    for b in 0..3 {
        row.consensus[b] = consensus_error(&pts[b]);
        row.d[b] = dispersion(&pts[b], alpha)?;
    }
    let ts = [&st.tx, &st.ty, &st.tz];
    for b in 0..3 {
        row.s[b] = tracking_dispersion(ts[b], beta)?;
    }
    row.v_d = row.d.iter().sum();
    row.v_s = row.s.iter().sum();
    match view {
        ProblemView::Bilevel(p) => {
            row.hypergrad_norm_sq = match hypergradient(p, &xbar) {
                Ok(g) => Some(norm_sq(&g)),
                Err(FabError::Unsupported(_)) => None,
                Err(e) => return Err(e),
            };
        }
        ProblemView::Single(p) => row.grad_norm_sq_single = Some(norm_sq(&mean_grad(p, &xbar))),
    }
    row.rel_err = x_star.map(|xs| rel_err(&xbar, xs));
    row.avg_dyn_residual = prev.map(|inp| avg_dyn_residual(st, alpha, &inp));
    Ok(row)
}

/// `max_xi || xi_hat^{k+1} - (xi_hat^k - eta_xi sum_i alpha_{k+1,i} t_i^k) ||`
pub fn avg_dyn_residual(st: &SwarmState, alpha: &[f64], inp: &AvgDynInput) -> f64 {
    let cur = [&st.x, &st.y, &st.z];
    let old = [&inp.prev.x, &inp.prev.y, &inp.prev.z];
    let trk = [&inp.prev.tx, &inp.prev.ty, &inp.prev.tz];
    let etas = [inp.eta.x, inp.eta.y, inp.eta.z];
    (0..3)
        .map(|b| {
            let lhs = cur[b].weighted_mean(alpha);
            let mut rhs = old[b].weighted_mean(inp.alpha_prev);
            crate::stack::axpy(&mut rhs, -etas[b], &trk[b].weighted_mean(alpha));
            dist_sq(&lhs, &rhs).sqrt()
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovWeights {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

impl Default for LyapunovWeights {
    fn default() -> Self {
        Self { c1: 1.0, c2: 1.0, c3: 1.0, c4: 1.0 }
    }
}

/// `Phi = L*_lambda(x_hat) + c1 ||z_hat - y*(x_hat)||^2 + c2 ||y_hat - y*_lambda(x_hat)||^2
///        + c3 (n / alpha_floor) V_D + c4 V_S`
#[allow(clippy::too_many_arguments)]
pub fn lyapunov_value(
    st: &SwarmState,
    p: &dyn BilevelProblem,
    alpha: &[f64],
    beta: &[f64],
    lambda: f64,
    alpha_floor: f64,
    w: LyapunovWeights,
) -> Result<f64> {
    if [w.c1, w.c2, w.c3, w.c4].iter().any(|&c| !(c >= 0.0)) {
        return domain("Lyapunov weights must be nonnegative");
    }
    if !(alpha_floor > 0.0) {
        return domain("alpha floor must be positive");
    }
    let pts = st.estimates();
    let xh = pts[0].weighted_mean(alpha);
    let yh = pts[1].weighted_mean(alpha);
    let zh = pts[2].weighted_mean(alpha);
    let y_star = p.lower_solution(&xh)?;
    let y_lam = penalty_lower_solution(p, &xh, lambda, &y_star)?;
    let l_star = penalty_value(p, &xh, &y_lam, &y_star, lambda);
    let mut v_d = 0.0;
    let mut v_s = 0.0;
    for (pt, t) in pts.iter().zip([&st.tx, &st.ty, &st.tz]) {
        v_d += dispersion(pt, alpha)?;
        v_s += tracking_dispersion(t, beta)?;
    }
    Ok(l_star
        + w.c1 * dist_sq(&zh, &y_star)
        + w.c2 * dist_sq(&yh, &y_lam)
        + w.c3 * (st.n() as f64 / alpha_floor) * v_d
        + w.c4 * v_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{fab_iteration, Oracle, StepSizes};
    use crate::digraph::TopologySchedule;
    use crate::mixing::{mixing_at, WeightScheme};
    use crate::problems::quadratic::{build_quadratic_problem, QuadraticSpec};
    use crate::problems::{lower_value, upper_value};
    use proptest::prelude::*;

    #[test]
    fn dispersion_examples() {
        let equal = Stack::broadcast(4, &[1.0, 2.0]);
        assert_eq!(dispersion(&equal, &[0.25; 4]).unwrap(), 0.0);
        let s = Stack::from_rows(&[vec![0.0], vec![2.0]]);
        assert_eq!(dispersion(&s, &[0.5, 0.5]).unwrap(), 1.0);
        assert!(dispersion(&s, &[1.0]).is_err());
    }

    #[test]
    fn tracking_examples() {
        let beta = [0.2, 0.3, 0.5];
        let t = Stack::from_rows(&[vec![0.2, -0.4], vec![0.3, -0.6], vec![0.5, -1.0]]);
        assert!(tracking_dispersion(&t, &beta).unwrap() < 1e-30);
        let one = Stack::from_rows(&[vec![3.0, 4.0]]);
        assert_eq!(tracking_dispersion(&one, &[1.0]).unwrap(), 0.0);
        assert!(tracking_dispersion(&t, &[0.5, 0.5, 0.0]).is_err());
    }

    fn brute_dispersion(s: &Stack, w: &[f64]) -> f64 {
        let n = s.n();
        let mut hat = vec![0.0; s.dim()];
        for i in 0..n {
            for c in 0..s.dim() {
                hat[c] += w[i] * s.row(i)[c];
            }
        }
        let mut tot = 0.0;
        for i in 0..n {
            for c in 0..s.dim() {
                tot += w[i] * (s.row(i)[c] - hat[c]).powi(2);
            }
        }
        tot
    }

    fn brute_tracking(t: &Stack, b: &[f64]) -> f64 {
        let mut sum = vec![0.0; t.dim()];
        for i in 0..t.n() {
            for c in 0..t.dim() {
                sum[c] += t.row(i)[c];
            }
        }
        let mut tot = 0.0;
        for j in 0..t.n() {
            for c in 0..t.dim() {
                tot += b[j] * (t.row(j)[c] / b[j] - sum[c]).powi(2);
            }
        }
        tot
    }

    proptest! {
        #[test]
        fn matches_brute_force(vals in prop::collection::vec(-5.0f64..5.0, 12), raw in prop::collection::vec(0.01f64..1.0, 4)) {
            let s = Stack::from_rows(&vals.chunks(3).map(<[f64]>::to_vec).collect::<Vec<_>>());
            let tot: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|v| v / tot).collect();
            prop_assert!((dispersion(&s, &w).unwrap() - brute_dispersion(&s, &w)).abs() < 1e-12);
            prop_assert!((tracking_dispersion(&s, &w).unwrap() - brute_tracking(&s, &w)).abs() < 1e-12 * (1.0 + brute_tracking(&s, &w)));
            let u = vec![0.25; 4];
            let mean = s.mean();
            let direct: f64 = s.rows().map(|r| dist_sq(r, &mean)).sum::<f64>() / 4.0;
            prop_assert!((dispersion(&s, &u).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn consensus_start_and_one_step() {
        let p = build_quadratic_problem(&QuadraticSpec::new(5, 2, 3, 0)).unwrap();
        let o = Oracle::Penalty { p: &p, lambda: 2.0 };
        let st = crate::algorithms::SwarmState::zeros(o, false, None).unwrap();
        let u = vec![0.2; 5];
        let row = metrics_for(&st, ProblemView::Bilevel(&p), &u, &u, p.optimal_x().as_deref(), None).unwrap();
        assert_eq!(row.consensus[0], 0.0);
        assert_eq!(row.v_d, 0.0);
        let s = TopologySchedule::periodic30(5, 0.3, 0, true).unwrap();
        let (_, mix) = mixing_at(&s, WeightScheme::Uniform, 0).unwrap();
        let st1 = fab_iteration(&st, &p, &mix, &StepSizes::uniform(0.05), 2.0, None).unwrap();
        let row1 = metrics_for(&st1, ProblemView::Bilevel(&p), &u, &u, None, None).unwrap();
        assert!(row1.v_d > 0.0);
        assert_eq!(row1.v_d, row1.d.iter().sum::<f64>());
        assert!(row1.hypergrad_norm_sq.unwrap() >= 0.0);
    }

    #[test]
    fn csv_line_has_header_width() {
        let row = MetricsRow { k: 3, rel_err: Some(0.5), ..Default::default() };
        let cols = CSV_HEADER.split(',').count();
        assert_eq!(row.csv_line().split(',').count(), cols);
        assert_eq!(row.field("rel_err"), Some(0.5));
        assert_eq!(row.field("hypergrad_norm_sq"), None);
    }

    #[test]
    fn lyapunov_reduces_to_penalty_value_at_consensus_optimum() {
        let p = build_quadratic_problem(&QuadraticSpec::new(4, 2, 3, 1)).unwrap();
        let lambda = 5.0;
        let x = vec![0.3, -0.2];
        let ys = p.lower_solution(&x).unwrap();
        let yl = penalty_lower_solution(&p, &x, lambda, &ys).unwrap();
        let o = Oracle::Penalty { p: &p, lambda };
        let st = crate::algorithms::SwarmState::new(
            o,
            Stack::broadcast(4, &x),
            Stack::broadcast(4, &yl),
            Stack::broadcast(4, &ys),
            false,
            None,
        )
        .unwrap();
        let a = vec![0.25; 4];
        let w = LyapunovWeights { c1: 1.0, c2: 1.0, c3: 1.0, c4: 0.0 };
        let phi = lyapunov_value(&st, &p, &a, &a, lambda, 0.01, w).unwrap();
        let direct = upper_value(&p, &x, &yl) + lambda * (lower_value(&p, &x, &yl) - lower_value(&p, &x, &ys));
        assert!((phi - direct).abs() < 1e-10 * (1.0 + direct.abs()));

        // Doubling lambda changes the leading term exactly as the direct formula does.
        let l2 = 2.0 * lambda;
        let yl2 = penalty_lower_solution(&p, &x, l2, &ys).unwrap();
        let st2 = crate::algorithms::SwarmState::new(
            Oracle::Penalty { p: &p, lambda: l2 },
            Stack::broadcast(4, &x),
            Stack::broadcast(4, &yl2),
            Stack::broadcast(4, &ys),
            false,
            None,
        )
        .unwrap();
        let phi2 = lyapunov_value(&st2, &p, &a, &a, l2, 0.01, w).unwrap();
        let direct2 = penalty_value(&p, &x, &yl2, &ys, l2);
        assert!((phi2 - direct2).abs() < 1e-10 * (1.0 + direct2.abs()));
        assert!(phi2 >= phi - 1e-12);
    }
}
