use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};

/// Largest supported tree depth.
pub const MAX_DEPTH: usize = 20;

/// Complete binary tree laid out in heap order.
///
/// Node `n` has children `2n + 1` and `2n + 2`. The first `2^depth - 1` slots
/// are split nodes and the last `2^depth` slots are leaves, so leaf `l` lives
/// at node `split_count + l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeTopology {
    depth: usize,
}

impl TreeTopology {
    pub fn new(depth: usize) -> Result<Self> {
        if depth == 0 || depth > MAX_DEPTH {
            return Err(DrfError::Config(format!(
                "tree depth must be in 1..={MAX_DEPTH}, got {depth}"
            )));
        }
        Ok(Self { depth })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn split_count(&self) -> usize {
        (1 << self.depth) - 1
    }

    pub fn leaf_count(&self) -> usize {
        1 << self.depth
    }

    pub fn node_count(&self) -> usize {
        (1 << (self.depth + 1)) - 1
    }

    #[inline]
    pub fn left_child(n: usize) -> usize {
        2 * n + 1
    }

    #[inline]
    pub fn right_child(n: usize) -> usize {
        2 * n + 2
    }

    pub fn is_leaf_node(&self, node: usize) -> bool {
        node >= self.split_count()
    }

    /// Heap slot of leaf `leaf`.
    pub fn leaf_node(&self, leaf: usize) -> usize {
        self.split_count() + leaf
    }

    /// Level of a node, the root being level 0.
    pub fn level(node: usize) -> usize {
        (usize::BITS - 1 - (node + 1).leading_zeros()) as usize
    }

    /// Indices of the leaves below `node` (a single leaf for a leaf node).
    pub fn leaf_range(&self, node: usize) -> Range<usize> {
        let level = Self::level(node);
        let width = 1 << (self.depth - level);
        let pos = node + 1 - (1 << level);
        pos * width..(pos + 1) * width
    }
}

/// Maps each split node of a tree to one output unit of the backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexFunction {
    unit_of_node: Vec<usize>,
}

impl IndexFunction {
    pub fn new(unit_of_node: Vec<usize>, output_units: usize) -> Result<Self> {
        if let Some(&bad) = unit_of_node.iter().find(|&&u| u >= output_units) {
            return Err(DrfError::Config(format!(
                "index function refers to unit {bad}, backbone has {output_units} outputs"
            )));
        }
        Ok(Self { unit_of_node })
    }

    /// Random assignment: a random subset of distinct units when there are
    /// enough of them, otherwise uniform draws with repetition.
    pub fn random<R: Rng + ?Sized>(topology: &TreeTopology, output_units: usize, rng: &mut R) -> Self {
        let splits = topology.split_count();
        let unit_of_node = if splits <= output_units {
            let mut units: Vec<usize> = (0..output_units).collect();
            units.shuffle(rng);
            units.truncate(splits);
            units
        } else {
            (0..splits).map(|_| rng.random_range(0..output_units)).collect()
        };
        Self { unit_of_node }
    }

    pub fn units(&self) -> &[usize] {
        &self.unit_of_node
    }

    #[inline]
    pub fn unit(&self, node: usize) -> usize {
        self.unit_of_node[node]
    }

    pub fn len(&self) -> usize {
        self.unit_of_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_of_node.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counts_follow_depth() {
        let t = TreeTopology::new(6).unwrap();
        assert_eq!(t.split_count(), 63);
        assert_eq!(t.leaf_count(), 64);
        assert_eq!(t.split_count() + 1, t.leaf_count());
        assert!(TreeTopology::new(0).is_err());
    }

    #[test]
    fn child_leaf_ranges_partition_parent() {
        for depth in 1..=6 {
            let t = TreeTopology::new(depth).unwrap();
            assert_eq!(t.leaf_range(0), 0..t.leaf_count());
            for n in 0..t.split_count() {
                let parent = t.leaf_range(n);
                let l = t.leaf_range(TreeTopology::left_child(n));
                let r = t.leaf_range(TreeTopology::right_child(n));
                assert_eq!(l.start, parent.start);
                assert_eq!(l.end, r.start);
                assert_eq!(r.end, parent.end);
                assert_eq!(l.len(), r.len());
            }
            for leaf in 0..t.leaf_count() {
                assert_eq!(t.leaf_range(t.leaf_node(leaf)), leaf..leaf + 1);
            }
        }
    }

    #[test]
    fn random_index_function_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = TreeTopology::new(3).unwrap();
        let phi = IndexFunction::random(&t, 16, &mut rng);
        assert_eq!(phi.len(), 7);
        let mut sorted = phi.units().to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 7);

        let phi = IndexFunction::random(&t, 4, &mut rng);
        assert!(phi.units().iter().all(|&u| u < 4));
        assert!(IndexFunction::new(vec![0, 5], 4).is_err());
    }
}
