//! Dual search-tree augmenting paths (Boykov-Kolmogorov).
//!
//! Two trees grow from the terminals; a path is found when they touch.
//! After augmentation, nodes whose parent link saturated become orphans and
//! are re-adopted (or freed) instead of rebuilding the trees from scratch.

use super::{Residual, Segment};
use crate::scalar::Capacity;
use std::collections::VecDeque;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tree {
    Free,
    Source,
    Sink,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Parent {
    None,
    Terminal,
    Orphan,
    /// Arc from this node towards its parent.
    Arc(usize),
}

struct Solver<'a, T> {
    head: &'a [usize],
    adj: &'a [Vec<usize>],
    res: Vec<T>,
    src: Vec<T>,
    snk: Vec<T>,
    tree: Vec<Tree>,
    parent: Vec<Parent>,
    ts: Vec<u64>,
    dist: Vec<u64>,
    time: u64,
    active: VecDeque<usize>,
    is_active: Vec<bool>,
    orphans: VecDeque<usize>,
    flow: T,
    tol: T,
}

pub(crate) fn solve<T: Capacity>(
    head: &[usize],
    cap: &[T],
    adj: &[Vec<usize>],
    source_cap: &[T],
    sink_cap: &[T],
) -> Residual<T> {
    let n = adj.len();
    let mut s = Solver {
        head,
        adj,
        res: cap.to_vec(),
        src: source_cap.to_vec(),
        snk: sink_cap.to_vec(),
        tree: vec![Tree::Free; n],
        parent: vec![Parent::None; n],
        ts: vec![0; n],
        dist: vec![0; n],
        time: 0,
        active: VecDeque::new(),
        is_active: vec![false; n],
        orphans: VecDeque::new(),
        flow: T::zero(),
        tol: T::saturation_tolerance(),
    };
    s.init();
    s.run();
    let side = s
        .tree
        .iter()
        .map(|&t| if t == Tree::Source { Segment::Source } else { Segment::Sink })
        .collect();
    Residual {
        flow: s.flow,
        arcs: s.res,
        source: s.src,
        sink: s.snk,
        side,
    }
}

impl<T: Capacity> Solver<'_, T> {
    #[inline]
    fn tail(&self, a: usize) -> usize {
        self.head[a ^ 1]
    }

    fn init(&mut self) {
        for u in 0..self.adj.len() {
            let m = if self.src[u] < self.snk[u] { self.src[u] } else { self.snk[u] };
            self.flow += m;
            self.src[u] -= m;
            self.snk[u] -= m;
            if self.src[u] > self.tol {
                self.tree[u] = Tree::Source;
                self.parent[u] = Parent::Terminal;
                self.dist[u] = 1;
                self.activate(u);
            } else if self.snk[u] > self.tol {
                self.tree[u] = Tree::Sink;
                self.parent[u] = Parent::Terminal;
                self.dist[u] = 1;
                self.activate(u);
            }
        }
    }

    fn activate(&mut self, u: usize) {
        if !self.is_active[u] {
            self.is_active[u] = true;
            self.active.push_back(u);
        }
    }

    fn next_active(&mut self) -> Option<usize> {
        while let Some(u) = self.active.pop_front() {
            self.is_active[u] = false;
            if self.tree[u] != Tree::Free {
                return Some(u);
            }
        }
        None
    }

    fn run(&mut self) {
        while let Some(p) = self.next_active() {
            let Some(bridge) = self.grow(p) else {
                continue;
            };
            // p may still have paths to offer; revisit it first.
            self.is_active[p] = true;
            self.active.push_front(p);
            self.time += 1;
            self.augment(bridge);
            self.adopt();
        }
    }

    /// Expands the tree containing `p`; returns a source-to-sink bridging arc
    /// when the trees meet.
    fn grow(&mut self, p: usize) -> Option<usize> {
        let tree_p = self.tree[p];
        for i in 0..self.adj[p].len() {
            let a = self.adj[p][i];
            let q = self.head[a];
            let residual = if tree_p == Tree::Source { self.res[a] } else { self.res[a ^ 1] };
            if residual <= self.tol {
                continue;
            }
            match self.tree[q] {
                Tree::Free => {
                    self.tree[q] = tree_p;
                    self.parent[q] = Parent::Arc(a ^ 1);
                    self.ts[q] = self.ts[p];
                    self.dist[q] = self.dist[p] + 1;
                    self.activate(q);
                }
                t if t == tree_p => {}
                _ => {
                    return Some(if tree_p == Tree::Source { a } else { a ^ 1 });
                }
            }
        }
        None
    }

    fn augment(&mut self, bridge: usize) {
        let mut bottleneck = self.res[bridge];
        let mut x = self.tail(bridge);
        loop {
            match self.parent[x] {
                Parent::Terminal => {
                    bottleneck = min(bottleneck, self.src[x]);
                    break;
                }
                Parent::Arc(pa) => {
                    bottleneck = min(bottleneck, self.res[pa ^ 1]);
                    x = self.head[pa];
                }
                _ => unreachable!("source path broken"),
            }
        }
        let mut y = self.head[bridge];
        loop {
            match self.parent[y] {
                Parent::Terminal => {
                    bottleneck = min(bottleneck, self.snk[y]);
                    break;
                }
                Parent::Arc(pa) => {
                    bottleneck = min(bottleneck, self.res[pa]);
                    y = self.head[pa];
                }
                _ => unreachable!("sink path broken"),
            }
        }

        self.res[bridge] -= bottleneck;
        self.res[bridge ^ 1] += bottleneck;

        let mut x = self.tail(bridge);
        loop {
            match self.parent[x] {
                Parent::Terminal => {
                    self.src[x] -= bottleneck;
                    if self.src[x] <= self.tol {
                        self.make_orphan(x);
                    }
                    break;
                }
                Parent::Arc(pa) => {
                    self.res[pa] += bottleneck;
                    self.res[pa ^ 1] -= bottleneck;
                    let next = self.head[pa];
                    if self.res[pa ^ 1] <= self.tol {
                        self.make_orphan(x);
                    }
                    x = next;
                }
                _ => unreachable!(),
            }
        }
        let mut y = self.head[bridge];
        loop {
            match self.parent[y] {
                Parent::Terminal => {
                    self.snk[y] -= bottleneck;
                    if self.snk[y] <= self.tol {
                        self.make_orphan(y);
                    }
                    break;
                }
                Parent::Arc(pa) => {
                    self.res[pa] -= bottleneck;
                    self.res[pa ^ 1] += bottleneck;
                    let next = self.head[pa];
                    if self.res[pa] <= self.tol {
                        self.make_orphan(y);
                    }
                    y = next;
                }
                _ => unreachable!(),
            }
        }
        self.flow += bottleneck;
    }

    fn make_orphan(&mut self, u: usize) {
        self.parent[u] = Parent::Orphan;
        self.orphans.push_back(u);
    }

    /// Length of the valid path from `j` to its terminal, or `None` when the
    /// path runs into an orphan.
    fn origin_distance(&mut self, mut j: usize) -> Option<u64> {
        let mut d = 0;
        loop {
            if self.ts[j] == self.time {
                return Some(d + self.dist[j]);
            }
            d += 1;
            match self.parent[j] {
                Parent::Terminal => {
                    self.ts[j] = self.time;
                    self.dist[j] = 1;
                    return Some(d);
                }
                Parent::Arc(pa) => j = self.head[pa],
                Parent::Orphan | Parent::None => return None,
            }
        }
    }

    fn adopt(&mut self) {
        while let Some(o) = self.orphans.pop_front() {
            let tree_o = self.tree[o];
            let mut best: Option<(usize, u64)> = None;
            for i in 0..self.adj[o].len() {
                let a = self.adj[o][i];
                let q = self.head[a];
                if self.tree[q] != tree_o || self.parent[q] == Parent::None {
                    continue;
                }
                let residual = if tree_o == Tree::Source { self.res[a ^ 1] } else { self.res[a] };
                if residual <= self.tol {
                    continue;
                }
                let Some(d) = self.origin_distance(q) else {
                    continue;
                };
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((a, d));
                }
                let mut j = q;
                let mut dd = d;
                while self.ts[j] != self.time {
                    self.ts[j] = self.time;
                    self.dist[j] = dd;
                    dd -= 1;
                    match self.parent[j] {
                        Parent::Arc(pa) => j = self.head[pa],
                        _ => break,
                    }
                }
            }
            if let Some((a, d)) = best {
                self.parent[o] = Parent::Arc(a);
                self.ts[o] = self.time;
                self.dist[o] = d + 1;
                continue;
            }
            // No valid parent: free the node, wake neighbours that could
            // regrow into it and orphan its children.
            self.tree[o] = Tree::Free;
            self.parent[o] = Parent::None;
            for i in 0..self.adj[o].len() {
                let a = self.adj[o][i];
                let q = self.head[a];
                if self.tree[q] != tree_o || self.parent[q] == Parent::None {
                    continue;
                }
                let residual = if tree_o == Tree::Source { self.res[a ^ 1] } else { self.res[a] };
                if residual > self.tol {
                    self.activate(q);
                }
                if let Parent::Arc(pa) = self.parent[q] {
                    if self.head[pa] == o {
                        self.make_orphan(q);
                    }
                }
            }
        }
    }
}

#[inline]
fn min<T: PartialOrd>(a: T, b: T) -> T {
    if b < a {
        b
    } else {
        a
    }
}
