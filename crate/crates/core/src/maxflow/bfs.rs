//! Shortest-augmenting-path max-flow (Edmonds-Karp). Slow but simple; kept
//! as a reference implementation behind the same interface.

use super::{Residual, Segment};
use crate::scalar::Capacity;
use std::collections::VecDeque;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Via {
    Unseen,
    Source,
    Arc(usize),
}

pub(crate) fn solve<T: Capacity>(
    head: &[usize],
    cap: &[T],
    adj: &[Vec<usize>],
    source_cap: &[T],
    sink_cap: &[T],
) -> Residual<T> {
    let n = adj.len();
    let tol = T::saturation_tolerance();
    let mut res = cap.to_vec();
    let mut src = source_cap.to_vec();
    let mut snk = sink_cap.to_vec();
    let mut flow = T::zero();

    for u in 0..n {
        let m = if src[u] < snk[u] { src[u] } else { snk[u] };
        flow += m;
        src[u] -= m;
        snk[u] -= m;
    }

    let mut via = vec![Via::Unseen; n];
    let mut queue = VecDeque::new();
    loop {
        via.iter_mut().for_each(|v| *v = Via::Unseen);
        queue.clear();
        for u in 0..n {
            if src[u] > tol {
                via[u] = Via::Source;
                queue.push_back(u);
            }
        }
        let mut end = None;
        while let Some(u) = queue.pop_front() {
            if snk[u] > tol {
                end = Some(u);
                break;
            }
            for &a in &adj[u] {
                let v = head[a];
                if via[v] == Via::Unseen && res[a] > tol {
                    via[v] = Via::Arc(a);
                    queue.push_back(v);
                }
            }
        }
        let Some(end) = end else {
            break;
        };
        let mut bottleneck = snk[end];
        let mut v = end;
        while let Via::Arc(a) = via[v] {
            if res[a] < bottleneck {
                bottleneck = res[a];
            }
            v = head[a ^ 1];
        }
        if src[v] < bottleneck {
            bottleneck = src[v];
        }
        snk[end] -= bottleneck;
        let mut v = end;
        while let Via::Arc(a) = via[v] {
            res[a] -= bottleneck;
            res[a ^ 1] += bottleneck;
            v = head[a ^ 1];
        }
        src[v] -= bottleneck;
        flow += bottleneck;
    }

    let side = via
        .iter()
        .map(|v| if *v == Via::Unseen { Segment::Sink } else { Segment::Source })
        .collect();
    Residual {
        flow,
        arcs: res,
        source: src,
        sink: snk,
        side,
    }
}
