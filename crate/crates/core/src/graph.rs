//! Immutable CSR graphs with optional self-loops and symmetric normalization.
//!
//! Edges are stored destination-major (incoming CSR), sorted by destination
//! then source, so per-node aggregation is one contiguous scan. All arrays
//! sit behind `Arc` and the structure is freely shareable across threads.

use std::sync::Arc;

use crate::error::CoreError;
use crate::tensor::tape::SparseAdj;

#[derive(Debug, Clone)]
pub struct Graph {
    n: usize,
    /// Incoming-edge segment boundaries per destination node, length n+1.
    offsets: Arc<Vec<usize>>,
    /// Source endpoint of each edge, ordered by (dst, src).
    srcs: Arc<Vec<usize>>,
    /// Destination endpoint of each edge (expanded segment ids, same order).
    dsts: Arc<Vec<usize>>,
    /// Per-edge 1/sqrt(deg(src) * deg(dst)) using post-self-loop in-degrees.
    norm: Arc<Vec<f64>>,
    has_self_loops: bool,
}

impl Graph {
    /// Builds a graph from an edge list. Endpoints must be `< n`. Duplicate
    /// edges collapse to one. With `symmetric`, each edge is stored in both
    /// directions; with `add_self_loops`, every node gets a (v, v) edge.
    pub fn build(
        edges: &[(usize, usize)],
        n: usize,
        add_self_loops: bool,
        symmetric: bool,
    ) -> Result<Graph, CoreError> {
        for &(s, d) in edges {
            if s >= n || d >= n {
                return Err(CoreError::Index(format!(
                    "edge ({s}, {d}) out of range for {n} nodes"
                )));
            }
        }
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(
            edges.len() * if symmetric { 2 } else { 1 } + if add_self_loops { n } else { 0 },
        );
        for &(s, d) in edges {
            pairs.push((d, s));
            if symmetric {
                pairs.push((s, d));
            }
        }
        if add_self_loops {
            for v in 0..n {
                pairs.push((v, v));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();

        let m = pairs.len();
        let mut offsets = vec![0usize; n + 1];
        let mut srcs = Vec::with_capacity(m);
        let mut dsts = Vec::with_capacity(m);
        for &(d, s) in &pairs {
            offsets[d + 1] += 1;
            srcs.push(s);
            dsts.push(d);
        }
        for v in 0..n {
            offsets[v + 1] += offsets[v];
        }

        // In-degrees after self-loop insertion feed the GCN-style weights.
        let mut deg = vec![0usize; n];
        for &(d, _) in &pairs {
            deg[d] += 1;
        }
        let norm = pairs
            .iter()
            .map(|&(d, s)| {
                let prod = (deg[s] * deg[d]) as f64;
                if prod > 0.0 { 1.0 / prod.sqrt() } else { 0.0 }
            })
            .collect();

        Ok(Graph {
            n,
            offsets: Arc::new(offsets),
            srcs: Arc::new(srcs),
            dsts: Arc::new(dsts),
            norm: Arc::new(norm),
            has_self_loops: add_self_loops,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    /// Directed edge count as stored (includes self-loops if added).
    pub fn n_edges(&self) -> usize {
        self.srcs.len()
    }

    /// Directed edge count excluding self-loops.
    pub fn n_edges_without_self_loops(&self) -> usize {
        self.srcs
            .iter()
            .zip(self.dsts.iter())
            .filter(|(s, d)| s != d)
            .count()
    }

    pub fn has_self_loops(&self) -> bool {
        self.has_self_loops
    }

    /// Sources of the incoming edges of `v`, ascending.
    pub fn in_neighbors(&self, v: usize) -> &[usize] {
        &self.srcs[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn edge_srcs(&self) -> Arc<Vec<usize>> {
        Arc::clone(&self.srcs)
    }

    pub fn edge_dsts(&self) -> Arc<Vec<usize>> {
        Arc::clone(&self.dsts)
    }

    pub fn norm_coeffs(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.norm)
    }

    /// Symmetric-normalized adjacency view for the tape.
    pub fn normalized_adj(&self) -> SparseAdj {
        SparseAdj {
            offsets: Arc::clone(&self.offsets),
            srcs: Arc::clone(&self.srcs),
            weights: Arc::clone(&self.norm),
        }
    }

    /// Plain edge list (src, dst) in storage order, self-loops included.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        self.srcs.iter().cloned().zip(self.dsts.iter().cloned()).collect()
    }

    /// Relabels nodes: node v becomes perm[v]. The result is semantically
    /// identical to the original.
    pub fn permute(&self, perm: &[usize]) -> Result<Graph, CoreError> {
        check_permutation(perm, self.n)?;
        let edges: Vec<(usize, usize)> = self
            .srcs
            .iter()
            .zip(self.dsts.iter())
            .filter(|(s, d)| s != d) // self-loops re-added by build
            .map(|(&s, &d)| (perm[s], perm[d]))
            .collect();
        // Stored edges already contain both directions, so rebuild without
        // re-symmetrizing.
        Graph::build(&edges, self.n, self.has_self_loops, false)
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<(), CoreError> {
    if perm.len() != n {
        return Err(CoreError::Contract(format!(
            "permutation length {} for {n} nodes",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(CoreError::Contract("not a permutation".into()));
        }
        seen[p] = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge_symmetric_with_self_loops() {
        let g = Graph::build(&[(0, 1)], 2, true, true).unwrap();
        assert_eq!(g.in_neighbors(0), &[0, 1]);
        assert_eq!(g.in_neighbors(1), &[0, 1]);
        assert_eq!(g.n_edges(), 4);
    }

    #[test]
    fn triangle_norm_coeffs_are_one_third() {
        let g = Graph::build(&[(0, 1), (1, 2), (2, 0)], 3, true, true).unwrap();
        // Every node has in-degree 3 (two neighbors + self-loop).
        for &w in g.norm_coeffs().iter() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicate_edges_collapse() {
        let g = Graph::build(&[(0, 1), (0, 1), (1, 0)], 2, false, true).unwrap();
        assert_eq!(g.n_edges(), 2);
    }

    #[test]
    fn out_of_range_endpoint_is_error() {
        assert!(matches!(
            Graph::build(&[(0, 5)], 3, false, false),
            Err(CoreError::Index(_))
        ));
    }

    #[test]
    fn rebuild_from_edge_list_is_identical() {
        let g = Graph::build(&[(0, 1), (2, 1), (3, 0)], 4, true, true).unwrap();
        let edges: Vec<(usize, usize)> = g
            .edge_list()
            .into_iter()
            .filter(|(s, d)| s != d)
            .collect();
        let g2 = Graph::build(&edges, 4, true, false).unwrap();
        assert_eq!(g.offsets, g2.offsets);
        assert_eq!(g.srcs, g2.srcs);
        assert_eq!(g.norm, g2.norm);
    }

    #[test]
    fn identity_permutation_is_noop() {
        let g = Graph::build(&[(0, 1), (2, 1)], 3, true, true).unwrap();
        let p = g.permute(&[0, 1, 2]).unwrap();
        assert_eq!(g.srcs, p.srcs);
        assert_eq!(g.offsets, p.offsets);
    }
}
