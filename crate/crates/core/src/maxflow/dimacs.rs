//! DIMACS max-flow text format, for debugging and exchanging instances with
//! external solvers. Node `1` is the source, node `2` the sink, and graph
//! node `i` is written as `i + 3`.

use super::Graph;
use crate::{Error, Result};
use std::fmt::Write as _;

pub fn write(graph: &Graph<f64>) -> String {
    let n = graph.node_count();
    let mut arcs = Vec::new();
    for u in 0..n {
        let (s, t) = graph.terminal_weights(u);
        if s > 0.0 {
            arcs.push((1, u + 3, s));
        }
        if t > 0.0 {
            arcs.push((u + 3, 2, t));
        }
    }
    for (from, to, cap) in graph.arcs() {
        if cap > 0.0 {
            arcs.push((from + 3, to + 3, cap));
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "c rtr flow graph");
    let _ = writeln!(out, "p max {} {}", n + 2, arcs.len());
    let _ = writeln!(out, "n 1 s");
    let _ = writeln!(out, "n 2 t");
    for (u, v, c) in arcs {
        let _ = writeln!(out, "a {u} {v} {c:e}");
    }
    out
}

pub fn parse(text: &str) -> Result<Graph<f64>> {
    let mut graph = Graph::new();
    let mut source = None;
    let mut sink = None;
    let mut declared = None;
    let err = |line: usize, msg: &str| Error::Parse(format!("dimacs line {}: {msg}", line + 1));
    let mut pending = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            None | Some("c") => {}
            Some("p") => {
                if it.next() != Some("max") {
                    return Err(err(ln, "expected 'p max'"));
                }
                let n: usize = it
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err(ln, "bad node count"))?;
                declared = Some(n);
            }
            Some("n") => {
                let id: usize = it
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err(ln, "bad node id"))?;
                match it.next() {
                    Some("s") => source = Some(id),
                    Some("t") => sink = Some(id),
                    _ => return Err(err(ln, "expected 's' or 't'")),
                }
            }
            Some("a") => {
                let u: usize = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| err(ln, "bad tail"))?;
                let v: usize = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| err(ln, "bad head"))?;
                let c: f64 = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| err(ln, "bad capacity"))?;
                pending.push((ln, u, v, c));
            }
            Some(other) => return Err(err(ln, &format!("unknown record '{other}'"))),
        }
    }
    let n = declared.ok_or_else(|| Error::Parse("dimacs: missing problem line".into()))?;
    let (s, t) = match (source, sink) {
        (Some(s), Some(t)) if s != t => (s, t),
        _ => return Err(Error::Parse("dimacs: missing or duplicate terminals".into())),
    };
    // map the remaining ids onto contiguous graph nodes
    let mut map = vec![usize::MAX; n + 1];
    for id in 1..=n {
        if id != s && id != t {
            map[id] = graph.add_node();
        }
    }
    for (ln, u, v, c) in pending {
        if u == 0 || v == 0 || u > n || v > n {
            return Err(err(ln, "node id out of range"));
        }
        match (u == s, v == t, u == t, v == s) {
            (true, true, _, _) => return Err(err(ln, "direct source-sink arc")),
            (true, false, _, _) => graph.add_terminal_weights(map[v], c, 0.0)?,
            (false, true, _, _) => graph.add_terminal_weights(map[u], 0.0, c)?,
            (_, _, true, _) | (_, _, _, true) => {} // arcs into s or out of t never carry flow
            _ => graph.add_edge(map[u], map[v], c, 0.0)?,
        }
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_flow() {
        let mut g = Graph::<f64>::new();
        g.add_nodes(3);
        g.add_terminal_weights(0, 4.0, 0.0).unwrap();
        g.add_terminal_weights(1, 1.0, 0.5).unwrap();
        g.add_terminal_weights(2, 0.0, 3.0).unwrap();
        g.add_edge(0, 1, 2.0, 1.0).unwrap();
        g.add_edge(1, 2, 2.5, 0.0).unwrap();
        g.add_edge(0, 2, 0.75, 0.0).unwrap();
        let text = write(&g);
        let mut back = parse(&text).unwrap();
        assert_eq!(g.solve().unwrap(), back.solve().unwrap());
    }

    #[test]
    fn malformed_input() {
        assert!(parse("a 1 2 3").is_err());
        assert!(parse("p max 3 1\nn 1 s\nn 2 t\na 1 x 2").is_err());
        assert!(parse("p min 3 1").is_err());
    }
}
