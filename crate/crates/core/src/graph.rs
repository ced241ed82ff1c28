//! Graphs, k-hop neighborhoods, and block-sparsity patterns encoding
//! information constraints.

use crate::blocklin::BlockMatrix;
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("adjacency matrix must be square, row {row} has length {len}, expected {expected}")]
    NotSquare {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("adjacency entries must be 0 or 1, found {value} at ({row},{col})")]
    NotBinary { row: usize, col: usize, value: u8 },
    #[error("adjacency diagonal must be 1 at node {0}")]
    MissingSelfLoop(usize),
    #[error("node index {index} out of range for {nodes} nodes")]
    IndexOutOfRange { index: usize, nodes: usize },
    #[error("block list length {got} does not match node count {expected}")]
    BlockListLength { got: usize, expected: usize },
    #[error("matrix block structure {got:?} does not match pattern {expected:?}")]
    BlockStructure {
        got: (Vec<usize>, Vec<usize>),
        expected: (Vec<usize>, Vec<usize>),
    },
}

/// Undirected or directed graph as a binary adjacency matrix with unit
/// diagonal. Nodes are indexed from 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    m: usize,
    adj: Vec<u8>,
}

impl Graph {
    pub fn new(rows: Vec<Vec<u8>>) -> Result<Self, GraphError> {
        let m = rows.len();
        let mut adj = Vec::with_capacity(m * m);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(GraphError::NotSquare {
                    row: i,
                    len: row.len(),
                    expected: m,
                });
            }
            for (j, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(GraphError::NotBinary {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
                adj.push(v);
            }
        }
        for i in 0..m {
            if adj[i * m + i] != 1 {
                return Err(GraphError::MissingSelfLoop(i));
            }
        }
        Ok(Graph { m, adj })
    }

    /// Cycle graph: node i talks to i-1 and i+1 (mod m), plus itself.
    pub fn ring(m: usize) -> Self {
        let mut adj = vec![0u8; m * m];
        for i in 0..m {
            adj[i * m + i] = 1;
            adj[i * m + (i + 1) % m] = 1;
            adj[i * m + (i + m - 1) % m] = 1;
        }
        Graph { m, adj }
    }

    pub fn complete(m: usize) -> Self {
        Graph {
            m,
            adj: vec![1u8; m * m],
        }
    }

    /// Only self-loops; no coupling between nodes.
    pub fn disconnected(m: usize) -> Self {
        let mut adj = vec![0u8; m * m];
        for i in 0..m {
            adj[i * m + i] = 1;
        }
        Graph { m, adj }
    }

    pub fn node_count(&self) -> usize {
        self.m
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.m + j] != 0
    }

    pub fn adjacency_rows(&self) -> Vec<Vec<u8>> {
        (0..self.m)
            .map(|i| self.adj[i * self.m..(i + 1) * self.m].to_vec())
            .collect()
    }

    pub fn is_symmetric(&self) -> bool {
        for i in 0..self.m {
            for j in i + 1..self.m {
                if self.adj[i * self.m + j] != self.adj[j * self.m + i] {
                    return false;
                }
            }
        }
        true
    }

    /// Boolean k-th power of the adjacency matrix; the zeroth power is the
    /// identity.
    pub fn bool_power(&self, k: usize) -> Vec<u8> {
        let m = self.m;
        let mut acc = vec![0u8; m * m];
        for i in 0..m {
            acc[i * m + i] = 1;
        }
        for _ in 0..k {
            let mut next = vec![0u8; m * m];
            for i in 0..m {
                for l in 0..m {
                    if acc[i * m + l] == 0 {
                        continue;
                    }
                    for j in 0..m {
                        if self.adj[l * m + j] != 0 {
                            next[i * m + j] = 1;
                        }
                    }
                }
            }
            acc = next;
        }
        acc
    }

    /// Nodes reachable from `i` in exactly k adjacency applications; with
    /// the unit diagonal this is every node within graph distance k. For
    /// k = 0 this is {i}.
    pub fn k_hop_neighbors(&self, i: usize, k: usize) -> Result<BTreeSet<usize>, GraphError> {
        if i >= self.m {
            return Err(GraphError::IndexOutOfRange {
                index: i,
                nodes: self.m,
            });
        }
        let p = self.bool_power(k);
        Ok((0..self.m).filter(|&j| p[i * self.m + j] != 0).collect())
    }
}

/// Binary block-sparsity pattern: block (i, j) of a conforming matrix must
/// be zero wherever the mask is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPattern {
    row_blocks: Vec<usize>,
    col_blocks: Vec<usize>,
    mask: Vec<u8>,
}

impl BlockPattern {
    pub fn new(
        row_blocks: Vec<usize>,
        col_blocks: Vec<usize>,
        mask: Vec<u8>,
    ) -> Result<Self, GraphError> {
        assert_eq!(mask.len(), row_blocks.len() * col_blocks.len());
        assert!(row_blocks.iter().all(|&b| b > 0) && col_blocks.iter().all(|&b| b > 0));
        Ok(BlockPattern {
            row_blocks,
            col_blocks,
            mask,
        })
    }

    pub fn all_ones(row_blocks: Vec<usize>, col_blocks: Vec<usize>) -> Self {
        let mask = vec![1u8; row_blocks.len() * col_blocks.len()];
        BlockPattern {
            row_blocks,
            col_blocks,
            mask,
        }
    }

    pub fn all_zeros(row_blocks: Vec<usize>, col_blocks: Vec<usize>) -> Self {
        let mask = vec![0u8; row_blocks.len() * col_blocks.len()];
        BlockPattern {
            row_blocks,
            col_blocks,
            mask,
        }
    }

    /// Block-diagonal pattern.
    pub fn identity(row_blocks: Vec<usize>, col_blocks: Vec<usize>) -> Self {
        let (mr, mc) = (row_blocks.len(), col_blocks.len());
        let mut mask = vec![0u8; mr * mc];
        for i in 0..mr.min(mc) {
            mask[i * mc + i] = 1;
        }
        BlockPattern {
            row_blocks,
            col_blocks,
            mask,
        }
    }

    /// Pattern from the boolean k-th power of a graph adjacency:
    /// mask(i,j) = 1 iff (adjacency^k)(i,j) != 0.
    pub fn from_power(
        g: &Graph,
        k: usize,
        row_blocks: Vec<usize>,
        col_blocks: Vec<usize>,
    ) -> Result<Self, GraphError> {
        let m = g.node_count();
        if row_blocks.len() != m {
            return Err(GraphError::BlockListLength {
                got: row_blocks.len(),
                expected: m,
            });
        }
        if col_blocks.len() != m {
            return Err(GraphError::BlockListLength {
                got: col_blocks.len(),
                expected: m,
            });
        }
        Ok(BlockPattern {
            row_blocks,
            col_blocks,
            mask: g.bool_power(k),
        })
    }

    pub fn row_blocks(&self) -> &[usize] {
        &self.row_blocks
    }

    pub fn col_blocks(&self) -> &[usize] {
        &self.col_blocks
    }

    pub fn is_set(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.col_blocks.len() + j] != 0
    }

    pub fn mask_rows(&self) -> Vec<Vec<u8>> {
        let mc = self.col_blocks.len();
        (0..self.row_blocks.len())
            .map(|i| self.mask[i * mc..(i + 1) * mc].to_vec())
            .collect()
    }

    pub fn is_symmetric_structure(&self) -> bool {
        let (mr, mc) = (self.row_blocks.len(), self.col_blocks.len());
        if mr != mc {
            return false;
        }
        for i in 0..mr {
            for j in i + 1..mc {
                if self.mask[i * mc + j] != self.mask[j * mc + i] {
                    return false;
                }
            }
        }
        true
    }

    /// Keeps only blocks strictly below the diagonal; used for storing the
    /// free generator of a skew matrix without double counting.
    pub fn strictly_lower(&self) -> BlockPattern {
        let mc = self.col_blocks.len();
        let mut mask = self.mask.clone();
        for i in 0..self.row_blocks.len() {
            for j in 0..mc {
                if j >= i {
                    mask[i * mc + j] = 0;
                }
            }
        }
        BlockPattern {
            row_blocks: self.row_blocks.clone(),
            col_blocks: self.col_blocks.clone(),
            mask,
        }
    }

    /// Number of scalar entries living in nonzero blocks.
    pub fn scalar_count(&self) -> usize {
        let mc = self.col_blocks.len();
        let mut total = 0;
        for i in 0..self.row_blocks.len() {
            for j in 0..mc {
                if self.mask[i * mc + j] != 0 {
                    total += self.row_blocks[i] * self.col_blocks[j];
                }
            }
        }
        total
    }

    /// True for scalar position (r, c) iff its block is set.
    pub fn scalar_mask(&self) -> Vec<bool> {
        let rows: usize = self.row_blocks.iter().sum();
        let cols: usize = self.col_blocks.iter().sum();
        let mut out = vec![false; rows * cols];
        let mut r0 = 0;
        for (i, &br) in self.row_blocks.iter().enumerate() {
            let mut c0 = 0;
            for (j, &bc) in self.col_blocks.iter().enumerate() {
                if self.is_set(i, j) {
                    for r in 0..br {
                        for c in 0..bc {
                            out[(r0 + r) * cols + (c0 + c)] = true;
                        }
                    }
                }
                c0 += bc;
            }
            r0 += br;
        }
        out
    }
}

/// True iff every block of `w` at a zero position of `p` is exactly zero.
pub fn conforms(w: &BlockMatrix, p: &BlockPattern) -> Result<bool, GraphError> {
    if w.row_blocks() != p.row_blocks() || w.col_blocks() != p.col_blocks() {
        return Err(GraphError::BlockStructure {
            got: (w.row_blocks().to_vec(), w.col_blocks().to_vec()),
            expected: (p.row_blocks().to_vec(), p.col_blocks().to_vec()),
        });
    }
    for i in 0..p.row_blocks.len() {
        for j in 0..p.col_blocks.len() {
            if !p.is_set(i, j) && w.block(i, j).iter().any(|&v| v != 0.0) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ring_one_hop_wraps() {
        // 12-node ring, node 0: neighbors are 11, 0, 1.
        let g = Graph::ring(12);
        let n = g.k_hop_neighbors(0, 1).unwrap();
        assert_eq!(n, [11, 0, 1].into_iter().collect());
    }

    #[test]
    fn zero_hops_is_self() {
        let g = Graph::ring(7);
        for i in 0..7 {
            assert_eq!(g.k_hop_neighbors(i, 0).unwrap(), [i].into_iter().collect());
        }
    }

    #[test]
    fn ring_two_hops_matches_power_oracle() {
        let g = Graph::ring(12);
        let n = g.k_hop_neighbors(0, 2).unwrap();
        assert_eq!(n, [10, 11, 0, 1, 2].into_iter().collect());
        // independent oracle: repeated boolean squaring of the raw adjacency
        let rows = g.adjacency_rows();
        let mut reach: BTreeSet<usize> = [0].into_iter().collect();
        for _ in 0..2 {
            let mut next = BTreeSet::new();
            for &i in &reach {
                for (j, &v) in rows[i].iter().enumerate() {
                    if v != 0 {
                        next.insert(j);
                    }
                }
            }
            reach = next;
        }
        assert_eq!(n, reach);
    }

    #[test]
    fn index_out_of_range_rejected() {
        let g = Graph::ring(5);
        assert!(g.k_hop_neighbors(5, 1).is_err());
    }

    #[test]
    fn new_rejects_missing_self_loop() {
        let rows = vec![vec![0, 1], vec![1, 1]];
        assert!(matches!(
            Graph::new(rows),
            Err(GraphError::MissingSelfLoop(0))
        ));
    }

    #[test]
    fn pattern_ring_is_tridiagonal_with_corners() {
        let g = Graph::ring(12);
        let p = BlockPattern::from_power(&g, 1, vec![4; 12], vec![4; 12]).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let d = (i as i64 - j as i64).rem_euclid(12);
                let expect = d == 0 || d == 1 || d == 11;
                assert_eq!(p.is_set(i, j), expect, "({i},{j})");
            }
        }
    }

    #[test]
    fn pattern_complete_all_ones() {
        let g = Graph::complete(5);
        let p = BlockPattern::from_power(&g, 3, vec![1; 5], vec![1; 5]).unwrap();
        assert_eq!(p, BlockPattern::all_ones(vec![1; 5], vec![1; 5]));
    }

    #[test]
    fn pattern_ring_power_six_saturates() {
        let g = Graph::ring(12);
        let p = BlockPattern::from_power(&g, 6, vec![1; 12], vec![1; 12]).unwrap();
        assert_eq!(p, BlockPattern::all_ones(vec![1; 12], vec![1; 12]));
        // one power less must not saturate: opposite node is 6 hops away
        let p5 = BlockPattern::from_power(&g, 5, vec![1; 12], vec![1; 12]).unwrap();
        assert!(!p5.is_set(0, 6));
    }

    #[test]
    fn pattern_rejects_wrong_block_list() {
        let g = Graph::ring(4);
        assert!(BlockPattern::from_power(&g, 1, vec![2; 3], vec![2; 4]).is_err());
    }

    #[test]
    fn conforms_zero_and_blockdiag() {
        use crate::blocklin::BlockMatrix;
        let p = BlockPattern::identity(vec![2, 2], vec![2, 2]);
        let z = BlockMatrix::zeros(vec![2, 2], vec![2, 2]);
        assert!(conforms(&z, &p).unwrap());
        let mut d = BlockMatrix::zeros(vec![2, 2], vec![2, 2]);
        d.set_block(0, 0, &[1.0, 2.0, 3.0, 4.0]);
        d.set_block(1, 1, &[5.0, 6.0, 7.0, 8.0]);
        assert!(conforms(&d, &p).unwrap());
        d.set_block(0, 1, &[0.0, 0.0, 0.0, 1e-300]);
        assert!(!conforms(&d, &p).unwrap());
    }

    #[test]
    fn conforms_rejects_structure_mismatch() {
        use crate::blocklin::BlockMatrix;
        let p = BlockPattern::all_ones(vec![2, 2], vec![2, 2]);
        let w = BlockMatrix::zeros(vec![4], vec![4]);
        assert!(conforms(&w, &p).is_err());
    }

    #[test]
    fn strictly_lower_drops_diag_and_upper() {
        let g = Graph::ring(4);
        let p = BlockPattern::from_power(&g, 1, vec![2; 4], vec![2; 4]).unwrap();
        let low = p.strictly_lower();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(low.is_set(i, j), p.is_set(i, j) && i > j);
            }
        }
        // ring of 4: pairs (1,0), (2,1), (3,2), (3,0) -> 4 blocks of 2x2
        assert_eq!(low.scalar_count(), 16);
    }

    proptest! {
        #[test]
        fn prop_khop_monotone(m in 3usize..12, k in 0usize..4, i_raw in 0usize..12) {
            let g = Graph::ring(m);
            let i = i_raw % m;
            let a = g.k_hop_neighbors(i, k).unwrap();
            let b = g.k_hop_neighbors(i, k + 1).unwrap();
            prop_assert!(a.is_subset(&b));
        }

        #[test]
        fn prop_symmetric_power_symmetric_mask(m in 3usize..10, k in 1usize..4) {
            let g = Graph::ring(m);
            prop_assert!(g.is_symmetric());
            let p = BlockPattern::from_power(&g, k, vec![2; 10][..m].to_vec(), vec![2; 10][..m].to_vec()).unwrap();
            prop_assert!(p.is_symmetric_structure());
        }
    }
}
