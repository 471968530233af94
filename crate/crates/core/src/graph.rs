//! Flow graphs of compartmental matrices: outflow connectivity, traps and the
//! layer decomposition behind canonicalization.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{exact_sum, CompartmentalMatrix};
use crate::DEFAULT_STRICT_TOL;

/// Directed graph with an edge `i -> j` whenever `F[j][i] > tol`, and vertex
/// `i` marked as outflow whenever column `i` sums to less than `-tol`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowGraph {
    pub n: usize,
    /// Outgoing adjacency lists, each sorted ascending.
    #[serde(with = "crate::one_based::nested")]
    pub successors: Vec<Vec<usize>>,
    pub outflow: Vec<bool>,
}

impl FlowGraph {
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.successors[i].binary_search(&j).is_ok()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.successors
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().map(move |&j| (i, j)))
            .collect()
    }

    pub fn outflow_vertices(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.outflow[i]).collect()
    }

    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let mut pred = vec![Vec::new(); self.n];
        for (i, succ) in self.successors.iter().enumerate() {
            for &j in succ {
                pred[j].push(i);
            }
        }
        pred
    }

    /// Breadth-first distance from every vertex to the outflow set, following
    /// edges forward. `None` means no path exists.
    pub fn distance_to_outflow(&self) -> Vec<Option<usize>> {
        let pred = self.predecessors();
        let mut dist = vec![None; self.n];
        let mut queue = VecDeque::new();
        for v in self.outflow_vertices() {
            dist[v] = Some(0);
            queue.push_back(v);
        }
        while let Some(v) = queue.pop_front() {
            let d = dist[v].unwrap_or(0);
            for &u in &pred[v] {
                if dist[u].is_none() {
                    dist[u] = Some(d + 1);
                    queue.push_back(u);
                }
            }
        }
        dist
    }

    /// True when `k` is nonempty, no edge leaves it and none of its vertices is
    /// an outflow vertex.
    pub fn is_trap(&self, k: &[usize]) -> bool {
        if k.is_empty() || k.iter().any(|&v| v >= self.n) {
            return false;
        }
        let mut inside = vec![false; self.n];
        for &v in k {
            inside[v] = true;
        }
        k.iter()
            .all(|&v| !self.outflow[v] && self.successors[v].iter().all(|&w| inside[w]))
    }

    /// Graphviz rendering; outflow vertices are double circles. Labels are 1-based.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph flow {\n  rankdir=LR;\n");
        for v in 0..self.n {
            let shape = if self.outflow[v] { "doublecircle" } else { "circle" };
            let _ = writeln!(s, "  {} [shape={shape}];", v + 1);
        }
        for (i, j) in self.edges() {
            let _ = writeln!(s, "  {} -> {};", i + 1, j + 1);
        }
        s.push_str("}\n");
        s
    }
}

pub fn build_graph(f: &CompartmentalMatrix, strict_tol: f64) -> FlowGraph {
    let n = f.n();
    let successors = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && f.get(j, i) > strict_tol).collect())
        .collect();
    let outflow = f.column_sums().iter().map(|&s| s < -strict_tol).collect();
    FlowGraph { n, successors, outflow }
}

/// Result of the outflow-connectivity check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapReport {
    pub is_outflow_connected: bool,
    /// Largest trap: every vertex without a path to an outflow vertex.
    #[serde(with = "crate::one_based::opt_vec")]
    pub trap: Option<Vec<usize>>,
}

pub fn check_outflow_connected(g: &FlowGraph) -> TrapReport {
    let dist = g.distance_to_outflow();
    let trap: Vec<usize> = (0..g.n).filter(|&v| dist[v].is_none()).collect();
    if trap.is_empty() {
        TrapReport {
            is_outflow_connected: true,
            trap: None,
        }
    } else {
        debug_assert!(g.is_trap(&trap));
        TrapReport {
            is_outflow_connected: false,
            trap: Some(trap),
        }
    }
}

/// Strongly connected components (iterative Tarjan), each sorted ascending,
/// listed in order of their smallest vertex.
pub fn strongly_connected_components(g: &FlowGraph) -> Vec<Vec<usize>> {
    let n = g.n;
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut comps = Vec::new();
    let mut counter = 0;
    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        let mut call: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = counter;
        low[root] = counter;
        counter += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut next)) = call.last_mut() {
            if let Some(&w) = g.successors[v].get(*next) {
                *next += 1;
                if index[w] == usize::MAX {
                    index[w] = counter;
                    low[w] = counter;
                    counter += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some(&(parent, _)) = call.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    while let Some(w) = stack.pop() {
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comp.sort_unstable();
                    comps.push(comp);
                }
            }
        }
    }
    comps.sort_by_key(|c| c[0]);
    comps
}

/// Inclusion-minimal traps: closed strongly connected components without an
/// outflow vertex. Every trap contains at least one of them.
pub fn minimal_traps(g: &FlowGraph) -> Vec<Vec<usize>> {
    strongly_connected_components(g)
        .into_iter()
        .filter(|c| g.is_trap(c))
        .collect()
}

/// Layers `K_1, ..., K_L`: `K_1` holds the outflow vertices and `K_m` the
/// remaining vertices with an edge into `K_{m-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDecomposition {
    #[serde(with = "crate::one_based::nested")]
    pub layers: Vec<Vec<usize>>,
}

impl LayerDecomposition {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

pub fn layer_decomposition(g: &FlowGraph) -> Result<LayerDecomposition> {
    let report = check_outflow_connected(g);
    if !report.is_outflow_connected {
        return Err(Error::NotOutflowConnected(report));
    }
    // K_m is exactly the set of vertices at BFS distance m - 1 from the outflow set.
    let dist = g.distance_to_outflow();
    let depth = dist.iter().flatten().copied().max().unwrap_or(0);
    let mut layers = vec![Vec::new(); depth + 1];
    for (v, d) in dist.iter().enumerate() {
        if let Some(d) = d {
            layers[*d].push(v);
        }
    }
    Ok(LayerDecomposition { layers })
}

/// `sum_{j in K} (F x)_j`, which is nonnegative for a trap `K` and `x >= 0`.
pub fn trap_mass_flux(f: &CompartmentalMatrix, k: &[usize], x: &[f64]) -> Result<f64> {
    let n = f.n();
    if x.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x.len() });
    }
    if x.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidParameter("state must be nonnegative".into()));
    }
    let g = build_graph(f, DEFAULT_STRICT_TOL);
    if !g.is_trap(k) {
        let one_based: Vec<usize> = k.iter().map(|i| i + 1).collect();
        return Err(Error::NotATrap(format!("{one_based:?}")));
    }
    let mut inside = vec![false; n];
    for &v in k {
        inside[v] = true;
    }
    // Inside a trap the diagonal mass cancels against the in-trap flows and
    // the column sums vanish, leaving only inflow from outside the trap.
    let flux = exact_sum(
        k.iter()
            .flat_map(|&j| (0..n).filter(|&i| !inside[i]).map(move |i| f.get(j, i) * x[i])),
    );
    Ok(flux)
}
