//! Sparse graph structure, self-loop degrees, and the normalized
//! propagation kernel.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Undirected graph over dense node indices `0..num_nodes`.
///
/// Self-loops are never stored as edges; every node implicitly carries one
/// through `degree_hat`, so `degree_hat[i] = |N(i)| + 1` is the row sum of
/// `A + I` and is at least 1 even for isolated nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    neighbors: Vec<Vec<usize>>,
    degree_hat: Vec<usize>,
    num_edges: usize,
}

impl Graph {
    /// Builds a graph from an edge list. Pairs may appear in either
    /// orientation or duplicated; they are merged. Self-pairs are dropped
    /// (the self-loop is implicit).
    pub fn from_edge_list(edge_list: &[(usize, usize)], num_nodes: usize) -> Result<Graph> {
        if num_nodes == 0 {
            return Err(Error::input("graph must have at least one node"));
        }
        let mut neighbors = vec![Vec::new(); num_nodes];
        let mut dropped_self = 0usize;
        for &(a, b) in edge_list {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::input(format!(
                    "edge ({a}, {b}) references a node outside 0..{num_nodes}"
                )));
            }
            if a == b {
                dropped_self += 1;
                continue;
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        let mut merged = 0usize;
        for list in &mut neighbors {
            list.sort_unstable();
            let before = list.len();
            list.dedup();
            merged += before - list.len();
        }
        if dropped_self > 0 || merged > 0 {
            log::debug!(
                "graph construction merged {} duplicate/reversed entries and dropped {} self-pairs",
                merged,
                dropped_self
            );
        }
        let degree_hat: Vec<usize> = neighbors.iter().map(|n| n.len() + 1).collect();
        let num_edges = neighbors.iter().map(Vec::len).sum::<usize>() / 2;
        Ok(Graph {
            num_nodes,
            neighbors,
            degree_hat,
            num_edges,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of undirected edges after dedup/symmetrization.
    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    /// Sorted neighbor list of node `i`, excluding `i` itself.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Self-loop degree `|N(i)| + 1`.
    pub fn degree_hat(&self, i: usize) -> usize {
        self.degree_hat[i]
    }

    /// All undirected edges as `(i, j)` with `i < j`, in sorted order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges);
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Row-compressed sparse propagation kernel `K = D^{-1/2} (A + I) D^{-1/2}`.
///
/// Entry `k[i][j] = 1 / sqrt(degree_hat[i] * degree_hat[j])` for
/// `j in N(i) or j == i`, zero elsewhere. The sparsity pattern equals that
/// of `A + I`; the matrix is exactly symmetric by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationKernel {
    num_nodes: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl PropagationKernel {
    pub fn from_graph(g: &Graph) -> PropagationKernel {
        let n = g.num_nodes();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            let di = g.degree_hat(i) as f64;
            // Merge the implicit diagonal into the sorted neighbor run.
            let mut placed_diag = false;
            for &j in g.neighbors(i) {
                if !placed_diag && j > i {
                    col_idx.push(i);
                    values.push(1.0 / di);
                    placed_diag = true;
                }
                let dj = g.degree_hat(j) as f64;
                col_idx.push(j);
                values.push(1.0 / (di * dj).sqrt());
            }
            if !placed_diag {
                col_idx.push(i);
                values.push(1.0 / di);
            }
            row_ptr.push(col_idx.len());
        }
        PropagationKernel {
            num_nodes: n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Kernel entry `k[i][j]` (zero off the sparsity pattern).
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        match self.col_idx[lo..hi].binary_search(&j) {
            Ok(pos) => self.values[lo + pos],
            Err(_) => 0.0,
        }
    }

    /// Dense copy, for small-graph cross-checks.
    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.num_nodes;
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[[i, self.col_idx[idx]]] = self.values[idx];
            }
        }
        out
    }

    /// Sparse-dense product `K * X`. Row `i` of the result is the kernel-
    /// weighted sum of the rows of `X` over `N(i) + {i}`.
    pub fn propagate(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.num_nodes {
            return Err(Error::input(format!(
                "propagate: matrix has {} rows but kernel expects {}",
                x.nrows(),
                self.num_nodes
            )));
        }
        let d = x.ncols();
        let mut out = Array2::<f64>::zeros((self.num_nodes, d));
        for i in 0..self.num_nodes {
            let mut row = out.row_mut(i);
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                let k = self.values[idx];
                let src = x.row(self.col_idx[idx]);
                for (o, &v) in row.iter_mut().zip(src.iter()) {
                    *o += k * v;
                }
            }
        }
        Ok(out)
    }
}
