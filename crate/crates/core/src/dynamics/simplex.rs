//! Enumeration of integer count vectors with a fixed total: the lattice
//! `E_k(X)` of empirical distributions of `k` samples over `|X|` states.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// All count vectors of length `dims` summing to `denom`, in canonical
/// (lexicographically ascending) order, with an index for O(1) lookups.
#[derive(Debug, Clone)]
pub struct CountSimplex {
    denom: u32,
    dims: usize,
    nodes: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
}

/// Number of count vectors: `C(denom + dims - 1, dims - 1)`.
pub fn count_nodes(denom: u32, dims: usize) -> u128 {
    let n = denom as u128 + dims as u128 - 1;
    let k = dims as u128 - 1;
    let mut out = 1u128;
    for i in 0..k {
        out = out * (n - i) / (i + 1);
    }
    out
}

impl CountSimplex {
    /// Enumerates the lattice, refusing to build more than `cap` nodes.
    pub fn enumerate(denom: u32, dims: usize, cap: usize) -> Result<Self> {
        assert!(dims > 0, "state space must be non-empty");
        if count_nodes(denom, dims) > cap as u128 {
            return Err(Error::SupportCapExceeded { cap });
        }
        let mut nodes = Vec::new();
        let mut current = vec![0u32; dims];
        fill(&mut nodes, &mut current, 0, denom);
        let index = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Self {
            denom,
            dims,
            nodes,
            index,
        })
    }

    pub fn denom(&self) -> u32 {
        self.denom
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &[u32] {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[Vec<u32>] {
        &self.nodes
    }

    pub fn index_of(&self, counts: &[u32]) -> Option<usize> {
        self.index.get(counts).copied()
    }

    /// Probability vector of node `i`.
    pub fn probs(&self, i: usize) -> Vec<f64> {
        self.nodes[i]
            .iter()
            .map(|&c| c as f64 / self.denom as f64)
            .collect()
    }
}

fn fill(nodes: &mut Vec<Vec<u32>>, current: &mut [u32], pos: usize, remaining: u32) {
    if pos == current.len() - 1 {
        current[pos] = remaining;
        nodes.push(current.to_vec());
        return;
    }
    for c in 0..=remaining {
        current[pos] = c;
        fill(nodes, current, pos + 1, remaining - c);
    }
    current[pos] = 0;
}
