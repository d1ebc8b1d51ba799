//! Deterministic shortest-path routing matrices for synthetic networks.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use ndarray::Array2;

use super::tensor::RoutingMatrix;
use crate::error::{Error, Result};

/// Undirected weighted graph; every edge carries one directed link each way.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    node_count: usize,
    edges: Vec<(usize, usize, f64)>,
}

impl NetworkGraph {
    pub fn new(node_count: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::validation("graph needs at least one node"));
        }
        for &(u, v, w) in &edges {
            if u >= node_count || v >= node_count || u == v {
                return Err(Error::validation(format!("invalid edge ({u}, {v}) for {node_count} nodes")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::validation(format!("edge ({u}, {v}) has invalid weight {w}")));
            }
        }
        Ok(Self { node_count, edges })
    }

    pub fn unit(node_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        Self::new(node_count, edges.iter().map(|&(u, v)| (u, v, 1.0)).collect())
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// `(u, v, weight)` in input order.
    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// Directed links in index order: edge `k` gives link `2k` (u→v) and `2k+1` (v→u).
    pub fn directed_links(&self) -> Vec<(usize, usize)> {
        self.edges.iter().flat_map(|&(u, v, _)| [(u, v), (v, u)]).collect()
    }

    /// Reads an edge list: one `u,v[,weight]` per line, `#` comments allowed.
    /// The node count is one more than the largest index seen.
    pub fn read_edge_list(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut edges = Vec::new();
        let mut max_node = 0;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: msg.to_string(),
            };
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() < 2 || parts.len() > 3 {
                return Err(bad("expected u,v[,weight]"));
            }
            let u: usize = parts[0].parse().map_err(|_| bad("bad node index"))?;
            let v: usize = parts[1].parse().map_err(|_| bad("bad node index"))?;
            let w: f64 = match parts.get(2) {
                Some(s) => s.parse().map_err(|_| bad("bad weight"))?,
                None => 1.0,
            };
            max_node = max_node.max(u).max(v);
            edges.push((u, v, w));
        }
        Self::new(max_node + 1, edges)
    }
}

/// All ordered origin–destination pairs, origin-major; `include_self` keeps `o == d`.
pub fn od_pairs(node_count: usize, include_self: bool) -> Vec<(usize, usize)> {
    (0..node_count)
        .flat_map(|o| (0..node_count).map(move |d| (o, d)))
        .filter(|(o, d)| include_self || o != d)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoutingOptions {
    /// Append one ingress and one egress link per node (after the inner links,
    /// ingress of node `n` at `L + 2n`, egress at `L + 2n + 1`). Every flow,
    /// including a self-flow, then crosses at least two links.
    pub access_links: bool,
}

#[derive(PartialEq)]
struct Frontier {
    dist: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const TIE_EPS: f64 = 1e-9;

fn distances_from(source: usize, adj: &[Vec<(usize, f64)>]) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Frontier { dist: 0.0, node: source });
    while let Some(Frontier { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &(next, w) in &adj[node] {
            let nd = d + w;
            if nd < dist[next] {
                dist[next] = nd;
                heap.push(Frontier { dist: nd, node: next });
            }
        }
    }
    dist
}

/// `a[i][j] = 1` iff link `i` lies on the shortest path of flow `j`.
///
/// Among equal-cost paths, the walk back from the destination always steps to
/// the lowest-indexed admissible predecessor.
pub fn shortest_path_routing(
    graph: &NetworkGraph,
    flows: &[(usize, usize)],
    options: RoutingOptions,
) -> Result<RoutingMatrix> {
    let n = graph.node_count();
    let links = graph.directed_links();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut link_index = std::collections::BTreeMap::new();
    for (k, &(u, v, w)) in graph.edges.iter().enumerate() {
        adj[u].push((v, w));
        adj[v].push((u, w));
        // Parallel edges: the first one listed carries the traffic.
        link_index.entry((u, v)).or_insert((2 * k, w));
        link_index.entry((v, u)).or_insert((2 * k + 1, w));
    }
    let inner = links.len();
    let total_links = inner + if options.access_links { 2 * n } else { 0 };
    if total_links == 0 {
        return Err(Error::validation("graph has no links"));
    }

    let mut entries = Array2::zeros((total_links, flows.len()));
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; n];
    for (j, &(o, d)) in flows.iter().enumerate() {
        if o >= n || d >= n {
            return Err(Error::validation(format!("flow ({o}, {d}) references a missing node")));
        }
        if options.access_links {
            entries[[inner + 2 * o, j]] = 1.0;
            entries[[inner + 2 * d + 1, j]] = 1.0;
        }
        if o == d {
            if !options.access_links {
                return Err(Error::validation(format!(
                    "self-flow ({o}, {o}) crosses no link; enable access links or drop self-flows"
                )));
            }
            continue;
        }
        let dist = cache[o].get_or_insert_with(|| distances_from(o, &adj));
        if !dist[d].is_finite() {
            return Err(Error::validation(format!("graph is disconnected: no path from {o} to {d}")));
        }
        let mut v = d;
        while v != o {
            let pred = adj[v]
                .iter()
                .filter(|&&(p, _)| {
                    let (_, w) = link_index[&(p, v)];
                    (dist[p] + w - dist[v]).abs() <= TIE_EPS * (1.0 + dist[v].abs())
                })
                .map(|&(p, _)| p)
                .min()
                .expect("a finite distance always has a predecessor");
            let (link, _) = link_index[&(pred, v)];
            entries[[link, j]] = 1.0;
            v = pred;
        }
    }
    RoutingMatrix::new(entries)
}
