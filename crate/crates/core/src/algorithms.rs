//! One-iteration state transitions of the gradient-tracking family.
//!
//! Every step is a pure map on [`SwarmState`]: pulls read the iteration-`k`
//! snapshot, gradients are taken at the new points, and pushes combine the
//! iteration-`k` trackers with the gradient change.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digraph::Digraph;
use crate::error::{config, FabError, Result};
use crate::mixing::MixingPair;
use crate::problems::single::SingleLevelProblem;
use crate::problems::{local_penalty_gradients, soba_directions, BilevelProblem, Directions};
use crate::seed::NoiseSpec;
use crate::stack::{dist_sq, Stack};

const PAR_THRESHOLD: usize = 32;
const MIN_WEIGHT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fab,
    Pushpull,
    PushsumFab,
    PushpullSoba,
    StaticFab,
    PushSgd,
    CentralizedF2sa,
}

impl Algorithm {
    pub fn is_single_level(self) -> bool {
        matches!(self, Algorithm::Pushpull | Algorithm::PushSgd)
    }

    pub fn uses_push_sum(self) -> bool {
        matches!(self, Algorithm::PushsumFab | Algorithm::PushSgd)
    }

    pub fn uses_penalty(self) -> bool {
        matches!(self, Algorithm::Fab | Algorithm::PushsumFab | Algorithm::StaticFab | Algorithm::CentralizedF2sa)
    }

    /// Row-stochastic pull with column-stochastic tracking.
    pub fn is_push_pull(self) -> bool {
        matches!(self, Algorithm::Fab | Algorithm::Pushpull | Algorithm::PushpullSoba)
    }

    /// Scalars one agent sends along one edge per iteration.
    pub fn floats_per_edge(self, dx: usize, dy: usize) -> usize {
        match self {
            Algorithm::Fab | Algorithm::StaticFab | Algorithm::PushpullSoba => 2 * (dx + 2 * dy),
            Algorithm::PushsumFab => 2 * (dx + 2 * dy) + 1,
            Algorithm::Pushpull => 2 * dx,
            Algorithm::PushSgd => dx + 1,
            Algorithm::CentralizedF2sa => 0,
        }
    }
}

/// Step sizes `eta_0 / (1 + decay k)`, optionally divided by the penalty
/// parameter so the penalized objective is descended at unit scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    pub eta_x: f64,
    pub eta_y: f64,
    pub eta_z: f64,
    #[serde(default)]
    pub decay: f64,
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eta {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl StepSizes {
    pub fn uniform(eta: f64) -> Self {
        Self { eta_x: eta, eta_y: eta, eta_z: eta, decay: 0.0, normalize: false }
    }

    pub fn new(eta_x: f64, eta_y: f64, eta_z: f64) -> Self {
        Self { eta_x, eta_y, eta_z, decay: 0.0, normalize: false }
    }

    pub fn with_decay(self, decay: f64) -> Self {
        Self { decay, ..self }
    }

    pub fn normalized(self) -> Self {
        Self { normalize: true, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.eta_x, self.eta_y, self.eta_z].iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return config("step sizes must be positive and finite");
        }
        if !(self.decay >= 0.0) {
            return config("decay must be nonnegative");
        }
        Ok(())
    }

    /// Step sizes at iteration `k`; `lambda` is used only when normalizing.
    pub fn at(&self, k: u64, lambda: Option<f64>) -> Eta {
        let mut s = 1.0 / (1.0 + self.decay * k as f64);
        if let (true, Some(l)) = (self.normalize, lambda) {
            s /= l;
        }
        Eta { x: self.eta_x * s, y: self.eta_y * s, z: self.eta_z * s }
    }
}

/// Horizon-dependent parameters `eta = eta0 K^{-1/3}`, `lambda = lambda0 K^{1/3}`.
pub fn theory_rule(horizon: u64, eta0: f64, lambda0: f64) -> (f64, f64) {
    let c = (horizon.max(1) as f64).cbrt();
    (eta0 / c, lambda0 * c)
}

/// Source of local directions for the three variable blocks.
#[derive(Clone, Copy)]
pub enum Oracle<'a> {
    Penalty { p: &'a dyn BilevelProblem, lambda: f64 },
    Soba { p: &'a dyn BilevelProblem },
    Single { p: &'a dyn SingleLevelProblem },
}

impl<'a> Oracle<'a> {
    pub fn n(&self) -> usize {
        match self {
            Oracle::Penalty { p, .. } | Oracle::Soba { p } => p.n(),
            Oracle::Single { p } => p.n(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Oracle::Penalty { p, .. } | Oracle::Soba { p } => (p.dx(), p.dy()),
            Oracle::Single { p } => (p.dim(), 0),
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            Oracle::Penalty { lambda, .. } => Some(*lambda),
            _ => None,
        }
    }

    pub fn eval(&self, i: usize, x: &[f64], y: &[f64], z: &[f64], noise: Option<(&NoiseSpec, u64)>) -> Result<Directions> {
        match *self {
            Oracle::Penalty { p, lambda } => local_penalty_gradients(p, i, x, y, z, lambda, noise),
            Oracle::Soba { p } => soba_directions(p, i, x, y, z, noise),
            Oracle::Single { p } => {
                if x.len() != p.dim() {
                    return Err(FabError::Domain("x has the wrong dimension".into()));
                }
                let mut dx = p.grad(i, x);
                if let Some((ns, k)) = noise {
                    ns.perturb(&mut dx, i, k, 0);
                }
                Ok(Directions { dx, dy: Vec::new(), dz: Vec::new() })
            }
        }
    }

    /// Directions for every agent at the given stacks.
    fn eval_all(&self, x: &Stack, y: &Stack, z: &Stack, noise: Option<&NoiseSpec>, iter: u64) -> Result<[Stack; 3]> {
        let n = x.n();
        let one = |i: usize| self.eval(i, x.row(i), y.row(i), z.row(i), noise.map(|ns| (ns, iter)));
        let dirs: Vec<Directions> = if n >= PAR_THRESHOLD {
            (0..n).into_par_iter().map(one).collect::<Result<_>>()?
        } else {
            (0..n).map(one).collect::<Result<_>>()?
        };
        let (mut dx, mut dy, mut dz) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for d in dirs {
            dx.push(d.dx);
            dy.push(d.dy);
            dz.push(d.dz);
        }
        Ok([stack_of(dx, x.dim()), stack_of(dy, y.dim()), stack_of(dz, z.dim())])
    }
}

fn stack_of(rows: Vec<Vec<f64>>, d: usize) -> Stack {
    if d == 0 {
        Stack::zeros(rows.len(), 0)
    } else {
        Stack::from_rows(&rows)
    }
}

/// Per-agent variables, trackers and cached directions. For the second-order
/// method the `z` block holds the auxiliary vector `v`; for single-level
/// methods `y` and `z` have zero width.
#[derive(Debug, Clone, PartialEq)]
pub struct SwarmState {
    pub k: u64,
    pub x: Stack,
    pub y: Stack,
    pub z: Stack,
    pub tx: Stack,
    pub ty: Stack,
    pub tz: Stack,
    pub dx: Stack,
    pub dy: Stack,
    pub dz: Stack,
    /// Push-sum weights.
    pub w: Option<Vec<f64>>,
}

impl SwarmState {
    /// Evaluates `d^0` at the initial points and sets `t^0 = d^0`.
    pub fn new(oracle: Oracle, x: Stack, y: Stack, z: Stack, push_sum: bool, noise: Option<&NoiseSpec>) -> Result<Self> {
        let (dxd, dyd) = oracle.dims();
        let n = oracle.n();
        if x.n() != n || y.n() != n || z.n() != n || x.dim() != dxd || y.dim() != dyd || z.dim() != dyd {
            return Err(FabError::Domain("initial stacks do not match the problem".into()));
        }
        let [dx, dy, dz] = oracle.eval_all(&x, &y, &z, noise, 0)?;
        Ok(Self {
            k: 0,
            tx: dx.clone(),
            ty: dy.clone(),
            tz: dz.clone(),
            dx,
            dy,
            dz,
            x,
            y,
            z,
            w: push_sum.then(|| vec![1.0; n]),
        })
    }

    /// All-zero start.
    pub fn zeros(oracle: Oracle, push_sum: bool, noise: Option<&NoiseSpec>) -> Result<Self> {
        let (dx, dy) = oracle.dims();
        let n = oracle.n();
        Self::new(oracle, Stack::zeros(n, dx), Stack::zeros(n, dy), Stack::zeros(n, dy), push_sum, noise)
    }

    pub fn n(&self) -> usize {
        self.x.n()
    }

    /// Agents' current estimates: de-biased by the push-sum weights when present.
    pub fn estimates(&self) -> [Stack; 3] {
        match &self.w {
            Some(w) => [self.x.scaled_rows(w), self.y.scaled_rows(w), self.z.scaled_rows(w)],
            None => [self.x.clone(), self.y.clone(), self.z.clone()],
        }
    }

    /// `||sum_i t_i - sum_i d_i||` for each block.
    pub fn tracking_gap(&self) -> [f64; 3] {
        let gap = |t: &Stack, d: &Stack| dist_sq(&t.sum(), &d.sum()).sqrt();
        [gap(&self.tx, &self.dx), gap(&self.ty, &self.dy), gap(&self.tz, &self.dz)]
    }

    fn check_finite(&self) -> Result<()> {
        let blocks: [(&Stack, &'static str); 6] =
            [(&self.x, "x"), (&self.y, "y"), (&self.z, "z"), (&self.tx, "t_x"), (&self.ty, "t_y"), (&self.tz, "t_z")];
        for (s, name) in blocks {
            if let Some(agent) = s.first_non_finite() {
                return Err(FabError::Divergence { iteration: self.k, agent, variable: name });
            }
        }
        if let Some(w) = &self.w {
            if let Some(agent) = w.iter().position(|&v| !(v >= MIN_WEIGHT) || !v.is_finite()) {
                return Err(FabError::Divergence { iteration: self.k, agent, variable: "w" });
            }
        }
        Ok(())
    }
}

/// `out_i = sum_j a_ij s_j - eta t_i`
fn pull(a: &DMatrix<f64>, s: &Stack, t: &Stack, eta: f64) -> Stack {
    let mut out = s.mixed(a);
    for i in 0..s.n() {
        for (o, &ti) in out.row_mut(i).iter_mut().zip(t.row(i)) {
            *o -= eta * ti;
        }
    }
    out
}

/// `out_i = d_new_i + (sum_j b_ij t_j - d_old_i)`; the bracket vanishes
/// exactly when `b` is the identity and `t = d_old`.
fn push(b: &DMatrix<f64>, t: &Stack, d_new: &Stack, d_old: &Stack) -> Stack {
    let mut out = t.mixed(b);
    for i in 0..t.n() {
        for ((o, &dn), &dold) in out.row_mut(i).iter_mut().zip(d_new.row(i)).zip(d_old.row(i)) {
            *o = dn + (*o - dold);
        }
    }
    out
}

/// `out_i = sum_j b_ij (s_j - eta t_j)`
fn push_sum_mix(b: &DMatrix<f64>, s: &Stack, t: &Stack, eta: f64) -> Stack {
    let mut u = s.clone();
    for i in 0..s.n() {
        for (o, &ti) in u.row_mut(i).iter_mut().zip(t.row(i)) {
            *o -= eta * ti;
        }
    }
    u.mixed(b)
}

fn mix_weights(b: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
    let n = w.len();
    (0..n)
        .map(|i| (0..n).filter(|&j| b[(i, j)] != 0.0).fold(-0.0, |acc, j| acc + b[(i, j)] * w[j]))
        .collect()
}

/// Pull with `a`, evaluate at the new points, push with `b`.
pub fn tracking_step(
    st: &SwarmState,
    oracle: Oracle,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    eta: Eta,
    noise: Option<&NoiseSpec>,
) -> Result<SwarmState> {
    check_square(a, st.n())?;
    check_square(b, st.n())?;
    let x = pull(a, &st.x, &st.tx, eta.x);
    let y = pull(a, &st.y, &st.ty, eta.y);
    let z = pull(a, &st.z, &st.tz, eta.z);
    let next_k = st.k + 1;
    let [dx, dy, dz] = oracle.eval_all(&x, &y, &z, noise, next_k)?;
    let out = SwarmState {
        k: next_k,
        tx: push(b, &st.tx, &dx, &st.dx),
        ty: push(b, &st.ty, &dy, &st.dy),
        tz: push(b, &st.tz, &dz, &st.dz),
        x,
        y,
        z,
        dx,
        dy,
        dz,
        w: None,
    };
    out.check_finite()?;
    Ok(out)
}

fn check_square(m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(FabError::Domain(format!("mixing matrix is {:?}, expected {n}x{n}", m.shape())));
    }
    Ok(())
}

/// FAB on the penalty objective with mixing pair `mix`.
pub fn fab_iteration(
    st: &SwarmState,
    p: &dyn BilevelProblem,
    mix: &MixingPair,
    steps: &StepSizes,
    lambda: f64,
    noise: Option<&NoiseSpec>,
) -> Result<SwarmState> {
    let eta = steps.at(st.k, Some(lambda));
    tracking_step(st, Oracle::Penalty { p, lambda }, &mix.a, &mix.b, eta, noise)
}

/// Push-Pull on a single-level problem.
pub fn pushpull_single_iteration(
    st: &SwarmState,
    p: &dyn SingleLevelProblem,
    mix: &MixingPair,
    steps: &StepSizes,
    noise: Option<&NoiseSpec>,
) -> Result<SwarmState> {
    tracking_step(st, Oracle::Single { p }, &mix.a, &mix.b, steps.at(st.k, None), noise)
}

/// Second-order Push-Pull with the auxiliary vector stored in `z`.
pub fn pushpull_soba_iteration(
    st: &SwarmState,
    p: &dyn BilevelProblem,
    mix: &MixingPair,
    steps: &StepSizes,
    noise: Option<&NoiseSpec>,
) -> Result<SwarmState> {
    tracking_step(st, Oracle::Soba { p }, &mix.a, &mix.b, steps.at(st.k, None), noise)
}

/// FAB with the mixing weights frozen at the initial topology. Entries for
/// edges absent from the current graph `g` are dropped without renormalizing.
pub fn static_fab_iteration(
    st: &SwarmState,
    p: &dyn BilevelProblem,
    frozen: &MixingPair,
    g: &Digraph,
    steps: &StepSizes,
    lambda: f64,
    noise: Option<&NoiseSpec>,
) -> Result<SwarmState> {
    let masked = frozen.masked_by(g);
    fab_iteration(st, p, &masked, steps, lambda, noise)
}

/// Push-sum variant: `xi <- B (xi - eta t)`, `w <- B w`, directions at `xi / w`.
pub fn pushsum_step(st: &SwarmState, oracle: Oracle, b: &DMatrix<f64>, eta: Eta, noise: Option<&NoiseSpec>) -> Result<SwarmState> {
    check_square(b, st.n())?;
    let w_old = st.w.as_ref().ok_or_else(|| FabError::Domain("push-sum state has no weights".into()))?;
    let x = push_sum_mix(b, &st.x, &st.tx, eta.x);
    let y = push_sum_mix(b, &st.y, &st.ty, eta.y);
    let z = push_sum_mix(b, &st.z, &st.tz, eta.z);
    let w = mix_weights(b, w_old);
    let next_k = st.k + 1;
    if let Some(agent) = w.iter().position(|&v| !(v >= MIN_WEIGHT)) {
        return Err(FabError::Divergence { iteration: next_k, agent, variable: "w" });
    }
    let [dx, dy, dz] = oracle.eval_all(&x.scaled_rows(&w), &y.scaled_rows(&w), &z.scaled_rows(&w), noise, next_k)?;
    let out = SwarmState {
        k: next_k,
        tx: push(b, &st.tx, &dx, &st.dx),
        ty: push(b, &st.ty, &dy, &st.dy),
        tz: push(b, &st.tz, &dz, &st.dz),
        x,
        y,
        z,
        dx,
        dy,
        dz,
        w: Some(w),
    };
    out.check_finite()?;
    Ok(out)
}

pub fn pushsum_fab_iteration(
    st: &SwarmState,
    p: &dyn BilevelProblem,
    b: &DMatrix<f64>,
    steps: &StepSizes,
    lambda: f64,
    noise: Option<&NoiseSpec>,
) -> Result<SwarmState> {
    pushsum_step(st, Oracle::Penalty { p, lambda }, b, steps.at(st.k, Some(lambda)), noise)
}

/// Subgradient-push: `x_i <- sum_j b_ij (x_j - eta grad f_j(x_j / w_j))`,
/// `w <- B w`, with no gradient tracking (`t` mirrors `d`).
pub fn push_sgd_iteration(
    st: &SwarmState,
    p: &dyn SingleLevelProblem,
    b: &DMatrix<f64>,
    steps: &StepSizes,
    noise: Option<&NoiseSpec>,
) -> Result<SwarmState> {
    check_square(b, st.n())?;
    let w_old = st.w.as_ref().ok_or_else(|| FabError::Domain("push-sum state has no weights".into()))?;
    let eta = steps.at(st.k, None);
    let x = push_sum_mix(b, &st.x, &st.dx, eta.x);
    let w = mix_weights(b, w_old);
    let next_k = st.k + 1;
    if let Some(agent) = w.iter().position(|&v| !(v >= MIN_WEIGHT)) {
        return Err(FabError::Divergence { iteration: next_k, agent, variable: "w" });
    }
    let oracle = Oracle::Single { p };
    let empty = Stack::zeros(st.n(), 0);
    let [dx, _, _] = oracle.eval_all(&x.scaled_rows(&w), &empty, &empty, noise, next_k)?;
    let out = SwarmState {
        k: next_k,
        tx: dx.clone(),
        ty: empty.clone(),
        tz: empty.clone(),
        x,
        y: empty.clone(),
        z: empty.clone(),
        dx,
        dy: empty.clone(),
        dz: empty,
        w: Some(w),
    };
    out.check_finite()?;
    Ok(out)
}

/// Single-machine penalty method on the agent-averaged objective.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralState {
    pub k: u64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

impl CentralState {
    pub fn zeros(dx: usize, dy: usize) -> Self {
        Self { k: 0, x: vec![0.0; dx], y: vec![0.0; dy], z: vec![0.0; dy] }
    }
}

/// `(x, y, z) <- (x, y, z) - eta * (1/n) sum_i d_i(x, y, z)` with the
/// directions of [`local_penalty_gradients`].
pub fn centralized_f2sa_iteration(
    st: &CentralState,
    p: &dyn BilevelProblem,
    steps: &StepSizes,
    lambda: f64,
    noise: Option<&NoiseSpec>,
) -> Result<CentralState> {
    let n = p.n();
    let mut acc = Directions { dx: vec![-0.0; p.dx()], dy: vec![-0.0; p.dy()], dz: vec![-0.0; p.dy()] };
    for i in 0..n {
        let d = local_penalty_gradients(p, i, &st.x, &st.y, &st.z, lambda, noise.map(|ns| (ns, st.k)))?;
        for (a, b) in [(&mut acc.dx, &d.dx), (&mut acc.dy, &d.dy), (&mut acc.dz, &d.dz)] {
            a.iter_mut().zip(b).for_each(|(s, v)| *s += v);
        }
    }
    let eta = steps.at(st.k, Some(lambda));
    let step = |v: &[f64], d: &[f64], e: f64| -> Vec<f64> { v.iter().zip(d).map(|(a, b)| a - e * (b / n as f64)).collect() };
    let out = CentralState {
        k: st.k + 1,
        x: step(&st.x, &acc.dx, eta.x),
        y: step(&st.y, &acc.dy, eta.y),
        z: step(&st.z, &acc.dz, eta.z),
    };
    for (v, name) in [(&out.x, "x"), (&out.y, "y"), (&out.z, "z")] {
        if v.iter().any(|a| !a.is_finite()) {
            return Err(FabError::Divergence { iteration: out.k, agent: 0, variable: name });
        }
    }
    Ok(out)
}
