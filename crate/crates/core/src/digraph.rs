//! Directed communication graphs and periodic time-varying schedules.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, FabError, Result};
use crate::seed;

const MAX_ATTEMPTS: u64 = 1000;

/// Directed graph on `n` nodes. An edge `(j, i)` means `j` sends to `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Digraph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
    ins: Vec<Vec<usize>>,
    outs: Vec<Vec<usize>>,
}

impl Digraph {
    /// Builds a graph, dropping self-loops and duplicates.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (j, i) in edges {
            if j >= n || i >= n {
                return domain(format!("edge ({j}, {i}) out of range for n = {n}"));
            }
            if j != i {
                set.insert((j, i));
            }
        }
        let mut ins = vec![Vec::new(); n];
        let mut outs = vec![Vec::new(); n];
        for &(j, i) in &set {
            outs[j].push(i);
            ins[i].push(j);
        }
        for v in ins.iter_mut() {
            v.sort_unstable();
        }
        Ok(Self { n, edges: set, ins, outs })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    pub fn in_neighbors(&self, i: usize) -> &[usize] {
        &self.ins[i]
    }

    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.outs[i]
    }

    pub fn directed_ring(n: usize) -> Self {
        Self::new(n, (0..n).map(|j| (j, (j + 1) % n))).expect("ring edges are in range")
    }

    pub fn reversed_ring(n: usize) -> Self {
        Self::new(n, (0..n).map(|j| ((j + 1) % n, j))).expect("ring edges are in range")
    }

    pub fn complete(n: usize) -> Self {
        Self::new(n, (0..n).flat_map(|j| (0..n).map(move |i| (j, i)))).expect("in range")
    }

    /// Whether the edge set is exactly a directed cycle through all nodes
    /// in either orientation.
    pub fn is_ring(&self) -> bool {
        self.n >= 2
            && (self.edges == Self::directed_ring(self.n).edges
                || self.edges == Self::reversed_ring(self.n).edges)
    }

    /// `n <count>` header followed by one `j i` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("n {}\n", self.n);
        for (j, i) in self.edges() {
            let _ = writeln!(s, "{j} {i}");
        }
        s
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| FabError::Config("empty edge list".into()))?;
        let n = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["n", c] => c.parse::<usize>().map_err(|e| FabError::Config(format!("bad node count: {e}")))?,
            _ => return config(format!("expected header `n <count>`, got `{header}`")),
        };
        let mut edges = Vec::new();
        for l in lines {
            let parts: Vec<_> = l.split_whitespace().collect();
            let [j, i] = parts.as_slice() else {
                return config(format!("bad edge line `{l}`"));
            };
            let parse = |s: &str| s.parse::<usize>().map_err(|e| FabError::Config(format!("bad edge line `{l}`: {e}")));
            edges.push((parse(j)?, parse(i)?));
        }
        Self::new(n, edges).map_err(|e| FabError::Config(e.to_string()))
    }

    fn bfs(&self, src: usize, forward: bool) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        dist[src] = Some(0);
        let mut q = VecDeque::from([src]);
        while let Some(u) = q.pop_front() {
            let d = dist[u].unwrap();
            let next = if forward { &self.outs[u] } else { &self.ins[u] };
            for &v in next {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    q.push_back(v);
                }
            }
        }
        dist
    }
}

/// Forward and transpose reachability from node 0.
pub fn is_strongly_connected(g: &Digraph) -> bool {
    if g.n == 0 {
        return false;
    }
    g.bfs(0, true).iter().all(Option::is_some) && g.bfs(0, false).iter().all(Option::is_some)
}

/// Longest shortest directed path over distinct ordered pairs.
pub fn diameter(g: &Digraph) -> Result<usize> {
    if !is_strongly_connected(g) {
        return domain("diameter requires a strongly connected graph");
    }
    Ok((0..g.n)
        .flat_map(|s| g.bfs(s, true))
        .map(|d| d.unwrap())
        .max()
        .unwrap_or(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    AugmentedEr,
    DirectedRing,
    ReversedRing,
    /// Fixed augmented ER graph drawn once from the schedule seed.
    Static,
    FullyConnected,
    AlternatingRing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub kind: PhaseKind,
    #[serde(default = "default_nu")]
    pub nu: f64,
    pub length: u64,
}

fn default_nu() -> f64 {
    0.3
}

impl PhaseSpec {
    pub fn new(kind: PhaseKind, nu: f64, length: u64) -> Self {
        Self { kind, nu, length }
    }

    fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return config("phase length must be positive");
        }
        if matches!(self.kind, PhaseKind::AugmentedEr | PhaseKind::Static) && !(self.nu > 0.0 && self.nu <= 1.0) {
            return config(format!("edge probability {} outside (0, 1]", self.nu));
        }
        Ok(())
    }
}

/// Base cycle plus independent extra edges with probability `nu`.
fn augmented_er<R: Rng>(n: usize, nu: f64, rng: &mut R) -> Digraph {
    let mut edges: Vec<_> = (0..n).map(|j| (j, (j + 1) % n)).collect();
    for j in 0..n {
        for i in 0..n {
            if i != j && i != (j + 1) % n && rng.random::<f64>() < nu {
                edges.push((j, i));
            }
        }
    }
    Digraph::new(n, edges).expect("in range")
}

pub fn phase_graph<R: Rng>(n: usize, spec: &PhaseSpec, rng: &mut R) -> Result<Digraph> {
    if n < 2 {
        return config(format!("topology needs at least 2 agents, got {n}"));
    }
    spec.validate()?;
    Ok(match spec.kind {
        PhaseKind::AugmentedEr | PhaseKind::Static => augmented_er(n, spec.nu, rng),
        PhaseKind::DirectedRing | PhaseKind::AlternatingRing => Digraph::directed_ring(n),
        PhaseKind::ReversedRing => Digraph::reversed_ring(n),
        PhaseKind::FullyConnected => Digraph::complete(n),
    })
}

/// Periodic sequence of phases; `graph_at` is a pure function of `(self, k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySchedule {
    pub n: usize,
    pub phases: Vec<PhaseSpec>,
    pub seed: u64,
    #[serde(default)]
    pub regenerate_er_each_step: bool,
}

impl TopologySchedule {
    pub fn new(n: usize, phases: Vec<PhaseSpec>, seed: u64, regenerate_er_each_step: bool) -> Result<Self> {
        let s = Self { n, phases, seed, regenerate_er_each_step };
        s.validate()?;
        Ok(s)
    }

    /// Augmented ER, directed ring, reversed ring; ten iterations each.
    pub fn periodic30(n: usize, nu: f64, seed: u64, regenerate: bool) -> Result<Self> {
        Self::new(
            n,
            vec![
                PhaseSpec::new(PhaseKind::AugmentedEr, nu, 10),
                PhaseSpec::new(PhaseKind::DirectedRing, nu, 10),
                PhaseSpec::new(PhaseKind::ReversedRing, nu, 10),
            ],
            seed,
            regenerate,
        )
    }

    pub fn single(n: usize, kind: PhaseKind, nu: f64, seed: u64, regenerate: bool) -> Result<Self> {
        Self::new(n, vec![PhaseSpec::new(kind, nu, 1)], seed, regenerate)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return config(format!("topology needs at least 2 agents, got {}", self.n));
        }
        if self.phases.is_empty() {
            return config("schedule has no phases");
        }
        self.phases.iter().try_for_each(PhaseSpec::validate)
    }

    pub fn period(&self) -> u64 {
        self.phases.iter().map(|p| p.length).sum()
    }

    pub fn phase_index(&self, k: u64) -> usize {
        let mut r = k % self.period();
        for (idx, p) in self.phases.iter().enumerate() {
            if r < p.length {
                return idx;
            }
            r -= p.length;
        }
        unreachable!("k mod period lies inside some phase")
    }

    pub fn phase_at(&self, k: u64) -> &PhaseSpec {
        &self.phases[self.phase_index(k)]
    }

    /// Graph for iteration `k`. Random phases draw from the sub-seed
    /// `mix(seed, k)` when regenerating, otherwise `mix(seed, phase)`;
    /// rejected draws bump an attempt counter folded into the seed.
    pub fn graph_at(&self, k: u64) -> Result<Digraph> {
        let idx = self.phase_index(k);
        let spec = &self.phases[idx];
        let key = match spec.kind {
            PhaseKind::AugmentedEr if self.regenerate_er_each_step => k,
            PhaseKind::AugmentedEr => idx as u64,
            PhaseKind::Static => u64::MAX - idx as u64,
            _ => return phase_graph(self.n, spec, &mut seed::rng_from(&[self.seed])),
        };
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = seed::rng_from(&[self.seed, key, attempt]);
            let g = phase_graph(self.n, spec, &mut rng)?;
            if is_strongly_connected(&g) {
                return Ok(g);
            }
        }
        config(format!("no strongly connected graph after {MAX_ATTEMPTS} attempts at k = {k}"))
    }

    /// Whether every phase is a ring, as the alternating weight scheme requires.
    pub fn is_ring_only(&self) -> bool {
        self.phases.iter().all(|p| {
            matches!(p.kind, PhaseKind::DirectedRing | PhaseKind::ReversedRing | PhaseKind::AlternatingRing)
        })
    }

    /// Whether `graph_at` returns the same graph for every `k`.
    pub fn is_static(&self) -> bool {
        self.phases.len() == 1 && !(self.phases[0].kind == PhaseKind::AugmentedEr && self.regenerate_er_each_step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(g: &Digraph) -> Vec<(usize, usize)> {
        g.edges().collect()
    }

    #[test]
    fn rings() {
        assert_eq!(set(&Digraph::directed_ring(3)), vec![(0, 1), (1, 2), (2, 0)]);
        assert_eq!(set(&Digraph::reversed_ring(3)), vec![(0, 2), (1, 0), (2, 1)]);
        assert!(Digraph::directed_ring(3).is_ring());
        assert!(!Digraph::complete(3).is_ring());
    }

    #[test]
    fn self_loops_dropped_and_range_checked() {
        let g = Digraph::new(3, [(0, 0), (0, 1), (0, 1)]).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert!(Digraph::new(3, [(0, 3)]).is_err());
    }

    #[test]
    fn er_phase_is_connected_superset_of_cycle() {
        let mut rng = seed::rng_from(&[7]);
        let g = phase_graph(10, &PhaseSpec::new(PhaseKind::AugmentedEr, 0.3, 1), &mut rng).unwrap();
        assert!(is_strongly_connected(&g));
        assert!(g.edge_count() >= 10);
        for j in 0..10 {
            assert!(g.has_edge(j, (j + 1) % 10));
        }
    }

    #[test]
    fn phase_graph_rejects_bad_input() {
        let mut rng = seed::rng_from(&[0]);
        assert!(phase_graph(1, &PhaseSpec::new(PhaseKind::DirectedRing, 0.3, 1), &mut rng).is_err());
        assert!(phase_graph(4, &PhaseSpec::new(PhaseKind::AugmentedEr, 0.0, 1), &mut rng).is_err());
        assert!(phase_graph(4, &PhaseSpec::new(PhaseKind::AugmentedEr, 1.5, 1), &mut rng).is_err());
    }

    #[test]
    fn schedule_phase_lookup() {
        let s = TopologySchedule::periodic30(5, 0.3, 1, false).unwrap();
        assert_eq!(s.period(), 30);
        assert_eq!(s.phase_index(45), 1);
        assert_eq!(s.graph_at(45).unwrap(), Digraph::directed_ring(5));
        assert_eq!(s.phase_index(35), 0);
        assert_eq!(s.phase_index(29), 2);
        assert_eq!(s.graph_at(0).unwrap(), s.graph_at(30).unwrap());
    }

    #[test]
    fn regeneration_changes_graphs() {
        let s = TopologySchedule::periodic30(10, 0.3, 1, true).unwrap();
        let g0 = s.graph_at(0).unwrap();
        let g1 = s.graph_at(1).unwrap();
        assert_ne!(g0, g1);
        assert!(is_strongly_connected(&g0) && is_strongly_connected(&g1));
        assert_eq!(g1, s.graph_at(1).unwrap());
    }

    #[test]
    fn connectivity_examples() {
        assert!(is_strongly_connected(&Digraph::directed_ring(4)));
        assert!(!is_strongly_connected(&Digraph::new(3, [(0, 1), (0, 2)]).unwrap()));
    }

    #[test]
    fn diameter_examples() {
        assert_eq!(diameter(&Digraph::directed_ring(5)).unwrap(), 4);
        assert_eq!(diameter(&Digraph::complete(5)).unwrap(), 1);
        assert!(diameter(&Digraph::new(3, [(0, 1)]).unwrap()).is_err());
    }

    /// All-pairs shortest paths by Floyd-Warshall.
    fn floyd_diameter(g: &Digraph) -> usize {
        let n = g.n();
        let inf = usize::MAX / 4;
        let mut d = vec![vec![inf; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            row[i] = 0;
        }
        for (j, i) in g.edges() {
            d[j][i] = 1;
        }
        for m in 0..n {
            for a in 0..n {
                for b in 0..n {
                    d[a][b] = d[a][b].min(d[a][m] + d[m][b]);
                }
            }
        }
        d.iter().flatten().copied().max().unwrap()
    }

    #[test]
    fn er_diameter_matches_floyd() {
        let mut rng = seed::rng_from(&[3]);
        let g = phase_graph(10, &PhaseSpec::new(PhaseKind::AugmentedEr, 0.5, 1), &mut rng).unwrap();
        assert_eq!(diameter(&g).unwrap(), floyd_diameter(&g));
    }

    #[test]
    fn edge_list_round_trip() {
        let g = Digraph::directed_ring(4);
        let text = g.to_edge_list();
        assert!(text.starts_with("n 4\n0 1\n"));
        assert_eq!(Digraph::from_edge_list(&text).unwrap(), g);
        assert!(Digraph::from_edge_list("4\n0 1").is_err());
    }

    #[test]
    fn ring_diameter_all_sizes() {
        for n in 2..=64 {
            assert_eq!(diameter(&Digraph::directed_ring(n)).unwrap(), n - 1);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn er_always_strongly_connected(s in any::<u64>(), nu in 0.01f64..1.0, n in 2usize..16) {
            let mut rng = seed::rng_from(&[s]);
            let g = phase_graph(n, &PhaseSpec::new(PhaseKind::AugmentedEr, nu, 1), &mut rng).unwrap();
            prop_assert!(is_strongly_connected(&g));
            prop_assert_eq!(diameter(&g).unwrap(), floyd_diameter(&g));
        }

        #[test]
        fn graph_at_is_pure(s in any::<u64>(), k in 0u64..10_000) {
            let sch = TopologySchedule::periodic30(6, 0.3, s, true).unwrap();
            prop_assert_eq!(sch.graph_at(k).unwrap(), sch.graph_at(k).unwrap());
        }
    }
}
