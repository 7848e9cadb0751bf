//! Exact s-t max-flow / min-cut on sparse graphs with terminal capacities.
//!
//! Nodes carry a source capacity and a sink capacity (terminal links);
//! edges between nodes are stored as pairs of opposite arcs. Two solvers sit
//! behind [`Graph::solve_with`]: the dual search-tree augmenting-path method
//! ([`Algorithm::BoykovKolmogorov`], default, fast on grids) and plain BFS
//! augmentation ([`Algorithm::EdmondsKarp`]) used for differential testing.

mod bfs;
mod bk;
pub mod dimacs;

use crate::scalar::Capacity;
use crate::{Error, Result};
use std::ops::Range;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Source,
    Sink,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Algorithm {
    #[default]
    BoykovKolmogorov,
    EdmondsKarp,
}

/// Result of a solve: residual capacities and the cut.
#[derive(Clone, Debug)]
pub(crate) struct Residual<T> {
    pub flow: T,
    pub arcs: Vec<T>,
    pub source: Vec<T>,
    pub sink: Vec<T>,
    pub side: Vec<Segment>,
}

/// Directed flow network. Arc `2e` and `2e + 1` are the two directions of
/// edge `e`.
#[derive(Clone, Debug)]
pub struct Graph<T> {
    head: Vec<NodeId>,
    cap: Vec<T>,
    adj: Vec<Vec<usize>>,
    source_cap: Vec<T>,
    sink_cap: Vec<T>,
    solution: Option<Residual<T>>,
}

impl<T: Capacity> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Capacity> Graph<T> {
    pub fn new() -> Self {
        Self::with_capacity(0, 0)
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        Self {
            head: Vec::with_capacity(2 * edges),
            cap: Vec::with_capacity(2 * edges),
            adj: Vec::with_capacity(nodes),
            source_cap: Vec::with_capacity(nodes),
            sink_cap: Vec::with_capacity(nodes),
            solution: None,
        }
    }

    /// Appends `n` nodes and returns their contiguous id range.
    pub fn add_nodes(&mut self, n: usize) -> Range<NodeId> {
        let start = self.adj.len();
        self.adj.resize_with(start + n, Vec::new);
        self.source_cap.resize(start + n, T::zero());
        self.sink_cap.resize(start + n, T::zero());
        self.solution = None;
        start..start + n
    }

    pub fn add_node(&mut self) -> NodeId {
        self.add_nodes(1).start
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn edge_count(&self) -> usize {
        self.head.len() / 2
    }

    fn check_node(&self, u: NodeId) -> Result<()> {
        if u < self.node_count() {
            Ok(())
        } else {
            Err(Error::Graph(format!(
                "node {u} out of range ({} nodes)",
                self.node_count()
            )))
        }
    }

    fn check_cap(c: T) -> Result<()> {
        if c.is_valid_capacity() {
            Ok(())
        } else {
            Err(Error::Graph(format!("invalid capacity {c}")))
        }
    }

    /// Adds the edge pair `u -> v` (capacity `cap_uv`) and `v -> u`
    /// (capacity `cap_vu`). Parallel edges are allowed.
    pub fn add_edge(&mut self, u: NodeId, v: NodeId, cap_uv: T, cap_vu: T) -> Result<()> {
        self.check_node(u)?;
        self.check_node(v)?;
        if u == v {
            return Err(Error::Graph(format!("self-loop on node {u}")));
        }
        Self::check_cap(cap_uv)?;
        Self::check_cap(cap_vu)?;
        let a = self.head.len();
        self.head.push(v);
        self.cap.push(cap_uv);
        self.head.push(u);
        self.cap.push(cap_vu);
        self.adj[u].push(a);
        self.adj[v].push(a + 1);
        self.solution = None;
        Ok(())
    }

    /// Adds to the terminal links of `u`. Calls are additive.
    pub fn add_terminal_weights(&mut self, u: NodeId, source: T, sink: T) -> Result<()> {
        self.check_node(u)?;
        Self::check_cap(source)?;
        Self::check_cap(sink)?;
        self.source_cap[u] += source;
        self.sink_cap[u] += sink;
        self.solution = None;
        Ok(())
    }

    pub fn terminal_weights(&self, u: NodeId) -> (T, T) {
        (self.source_cap[u], self.sink_cap[u])
    }

    /// Iterates `(from, to, capacity)` over every arc, including zero-capacity
    /// reverse arcs.
    pub fn arcs(&self) -> impl Iterator<Item = (NodeId, NodeId, T)> + '_ {
        (0..self.head.len()).map(|a| (self.head[a ^ 1], self.head[a], self.cap[a]))
    }

    /// Sum of every finite capacity in the graph (arcs and terminal links).
    pub fn total_capacity(&self) -> T {
        let mut total = T::zero();
        for &c in self.cap.iter().chain(&self.source_cap).chain(&self.sink_cap) {
            total += c;
        }
        total
    }

    /// Solves with the default algorithm and returns the max-flow value.
    pub fn solve(&mut self) -> Result<T> {
        self.solve_with(Algorithm::default())
    }

    pub fn solve_with(&mut self, algorithm: Algorithm) -> Result<T> {
        if self.node_count() == 0 {
            return Err(Error::Graph("solve called on an empty graph".into()));
        }
        let residual = match algorithm {
            Algorithm::BoykovKolmogorov => {
                bk::solve(&self.head, &self.cap, &self.adj, &self.source_cap, &self.sink_cap)
            }
            Algorithm::EdmondsKarp => {
                bfs::solve(&self.head, &self.cap, &self.adj, &self.source_cap, &self.sink_cap)
            }
        };
        let flow = residual.flow;
        self.solution = Some(residual);
        Ok(flow)
    }

    fn solution(&self) -> Result<&Residual<T>> {
        self.solution
            .as_ref()
            .ok_or_else(|| Error::Graph("graph has not been solved".into()))
    }

    pub fn is_solved(&self) -> bool {
        self.solution.is_some()
    }

    pub fn min_cut_side(&self, u: NodeId) -> Result<Segment> {
        self.check_node(u)?;
        Ok(self.solution()?.side[u])
    }

    /// Cut side of every node after a solve.
    pub fn cut(&self) -> Result<&[Segment]> {
        Ok(&self.solution()?.side)
    }

    /// Capacity of the cut induced by `sides` (source-side set vs the rest).
    pub fn cut_capacity(&self, sides: &[Segment]) -> T {
        let mut total = T::zero();
        for u in 0..self.node_count() {
            match sides[u] {
                Segment::Source => total += self.sink_cap[u],
                Segment::Sink => total += self.source_cap[u],
            }
        }
        for a in 0..self.head.len() {
            let (from, to) = (self.head[a ^ 1], self.head[a]);
            if sides[from] == Segment::Source && sides[to] == Segment::Sink {
                total += self.cap[a];
            }
        }
        total
    }

    /// Net flow on arc `a` (capacity minus residual), clamped at zero.
    pub fn arc_flow(&self, a: usize) -> Result<T> {
        let sol = self.solution()?;
        let used = self.cap[a] - sol.arcs[a].min_cap(self.cap[a]);
        Ok(if used > T::zero() { used } else { T::zero() })
    }

    /// Checks capacity constraints, flow conservation and saturation of the
    /// reported cut, up to the saturation tolerance of `T` plus `slack`.
    pub fn check_invariants(&self, slack: T) -> Result<()> {
        let sol = self.solution()?;
        let tol = T::saturation_tolerance() + slack;
        let n = self.node_count();
        // balance[u] = inflow - outflow
        let mut inflow = vec![T::zero(); n];
        let mut outflow = vec![T::zero(); n];
        for e in 0..self.edge_count() {
            let (a, b) = (2 * e, 2 * e + 1);
            for arc in [a, b] {
                if sol.arcs[arc] + tol < T::zero() {
                    return Err(Error::Graph(format!("negative residual on arc {arc}")));
                }
            }
            // net flow along arc a = cap[a] - res[a] = res[b] - cap[b]
            let from = self.head[b];
            let to = self.head[a];
            let fwd = self.cap[a] - sol.arcs[a].min_cap(self.cap[a]);
            let bwd = self.cap[b] - sol.arcs[b].min_cap(self.cap[b]);
            outflow[from] += fwd;
            inflow[to] += fwd;
            outflow[to] += bwd;
            inflow[from] += bwd;
        }
        for u in 0..n {
            let from_source = self.source_cap[u] - sol.source[u];
            let to_sink = self.sink_cap[u] - sol.sink[u];
            if sol.source[u] + tol < T::zero() || sol.sink[u] + tol < T::zero() {
                return Err(Error::Graph(format!("terminal link of node {u} over capacity")));
            }
            let lhs = inflow[u] + from_source;
            let rhs = outflow[u] + to_sink;
            let diff = if lhs > rhs { lhs - rhs } else { rhs - lhs };
            if diff > tol {
                return Err(Error::Graph(format!("flow not conserved at node {u}")));
            }
        }
        // every arc crossing the cut forward must be saturated
        for a in 0..self.head.len() {
            let (from, to) = (self.head[a ^ 1], self.head[a]);
            if sol.side[from] == Segment::Source && sol.side[to] == Segment::Sink && sol.arcs[a] > tol
            {
                return Err(Error::Graph(format!("unsaturated arc {a} crosses the cut")));
            }
        }
        for u in 0..n {
            match sol.side[u] {
                Segment::Sink if sol.source[u] > tol => {
                    return Err(Error::Graph(format!("unsaturated source link at {u}")));
                }
                Segment::Source if sol.sink[u] > tol => {
                    return Err(Error::Graph(format!("unsaturated sink link at {u}")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

trait CapExt: Capacity {
    fn min_cap(self, other: Self) -> Self {
        if self < other {
            self
        } else {
            other
        }
    }
}

impl<T: Capacity> CapExt for T {}

/// Exhaustive min-cut over all `2^n` source/sink partitions. Test oracle for
/// graphs with at most ~20 nodes.
pub fn brute_force_min_cut<T: Capacity>(graph: &Graph<T>) -> (T, Vec<Segment>) {
    let n = graph.node_count();
    assert!(n <= 24, "brute force limited to 24 nodes");
    let mut best: Option<(T, Vec<Segment>)> = None;
    let mut sides = vec![Segment::Sink; n];
    for mask in 0u64..(1u64 << n) {
        for (u, s) in sides.iter_mut().enumerate() {
            *s = if mask >> u & 1 == 1 {
                Segment::Source
            } else {
                Segment::Sink
            };
        }
        let c = graph.cut_capacity(&sides);
        if best.as_ref().map_or(true, |(b, _)| c < *b) {
            best = Some((c, sides.clone()));
        }
    }
    best.expect("at least one partition")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_ids_are_contiguous() {
        let mut g = Graph::<f64>::new();
        assert_eq!(g.add_nodes(1), 0..1);
        let mut g = Graph::<f64>::new();
        assert_eq!(g.add_nodes(3), 0..3);
        assert_eq!(g.add_nodes(2), 3..5);
        assert_eq!(g.add_node(), 5);
    }

    #[test]
    fn large_allocation() {
        let mut g = Graph::<f64>::with_capacity(1_000_000, 0);
        let ids = g.add_nodes(1_000_000);
        assert_eq!(ids.len(), 1_000_000);
        assert_eq!(g.node_count(), 1_000_000);
    }

    #[test]
    fn edge_errors() {
        let mut g = Graph::<f64>::new();
        g.add_nodes(2);
        assert!(g.add_edge(0, 1, 1.0, 0.0).is_ok());
        assert!(g.add_edge(0, 0, 1.0, 1.0).is_err());
        assert!(g.add_edge(0, 2, 1.0, 1.0).is_err());
        assert!(g.add_edge(0, 1, -1.0, 0.0).is_err());
        assert!(g.add_edge(0, 1, f64::NAN, 0.0).is_err());
        assert!(g.add_terminal_weights(0, -2.0, 0.0).is_err());
    }

    #[test]
    fn empty_graph_is_an_error() {
        let mut g = Graph::<f64>::new();
        assert!(g.solve().is_err());
        let mut g = Graph::<f64>::new();
        g.add_node();
        assert!(g.min_cut_side(0).is_err());
    }

    #[test]
    fn single_node_terminal_min() {
        for alg in [Algorithm::BoykovKolmogorov, Algorithm::EdmondsKarp] {
            let mut g = Graph::<f64>::new();
            g.add_node();
            g.add_terminal_weights(0, 3.0, 1.0).unwrap();
            assert_eq!(g.solve_with(alg).unwrap(), 1.0);
            assert_eq!(g.min_cut_side(0).unwrap(), Segment::Source);
            g.check_invariants(0.0).unwrap();
        }
    }

    #[test]
    fn diamond_matches_brute_force() {
        // s -> a, s -> b (2 each), a -> t, b -> t (2 each), bridge a -> b (1)
        let mut g = Graph::<f64>::new();
        g.add_nodes(2);
        g.add_terminal_weights(0, 2.0, 2.0).unwrap();
        g.add_terminal_weights(1, 2.0, 2.0).unwrap();
        g.add_edge(0, 1, 1.0, 0.0).unwrap();
        let (bf, _) = brute_force_min_cut(&g);
        assert_eq!(g.solve().unwrap(), bf);
        assert_eq!(bf, 4.0);

        let mut g = Graph::<i64>::new();
        g.add_nodes(2);
        g.add_terminal_weights(0, 3, 1).unwrap();
        g.add_terminal_weights(1, 0, 3).unwrap();
        g.add_edge(0, 1, 1, 0).unwrap();
        let (bf, _) = brute_force_min_cut(&g);
        assert_eq!(g.solve().unwrap(), bf);
        assert_eq!(bf, 2);
    }

    #[test]
    fn parallel_edges_are_additive() {
        let build = |split: bool| {
            let mut g = Graph::<f64>::new();
            g.add_nodes(3);
            g.add_terminal_weights(0, 10.0, 0.0).unwrap();
            g.add_terminal_weights(2, 0.0, 10.0).unwrap();
            if split {
                g.add_edge(0, 1, 1.5, 0.0).unwrap();
                g.add_edge(0, 1, 2.0, 0.5).unwrap();
            } else {
                g.add_edge(0, 1, 3.5, 0.5).unwrap();
            }
            g.add_edge(1, 2, 9.0, 0.0).unwrap();
            g
        };
        let mut a = build(true);
        let mut b = build(false);
        assert_eq!(a.solve().unwrap(), b.solve().unwrap());
        assert_eq!(a.solve().unwrap(), 3.5);
    }

    #[test]
    fn resolving_is_idempotent() {
        let mut g = Graph::<f64>::new();
        g.add_nodes(3);
        g.add_terminal_weights(0, 5.0, 0.0).unwrap();
        g.add_terminal_weights(2, 0.0, 4.0).unwrap();
        g.add_edge(0, 1, 3.0, 1.0).unwrap();
        g.add_edge(1, 2, 2.0, 2.0).unwrap();
        g.add_edge(0, 2, 1.0, 0.0).unwrap();
        let copy = g.clone();
        let v1 = g.solve().unwrap();
        let v2 = g.solve().unwrap();
        let v3 = copy.clone().solve().unwrap();
        assert_eq!(v1, v2);
        assert_eq!(v1, v3);
        assert_eq!(v1, 3.0);
    }
}
