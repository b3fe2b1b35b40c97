use std::collections::BTreeMap;

use serde::Serialize;

use super::{BranchTarget, ClassId, DecisionTree, TreeNode};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TreeStats {
    /// Internal plus leaf nodes.
    pub node_count: usize,
    pub internal_count: usize,
    pub leaf_count: usize,
    /// Number of levels on the deepest root-to-leaf path, counting the root
    /// level and the leaf level. Equals the longest question path plus one.
    pub max_depth: usize,
    /// Fan-out of internal nodes mapped to how many nodes have it.
    pub branching_histogram: BTreeMap<usize, usize>,
    /// Questions asked on the way to each class's (first) leaf.
    pub path_lengths: BTreeMap<ClassId, usize>,
}

pub fn tree_stats(tree: &DecisionTree) -> TreeStats {
    let mut stats = TreeStats {
        node_count: 0,
        internal_count: 0,
        leaf_count: 0,
        max_depth: 0,
        branching_histogram: BTreeMap::new(),
        path_lengths: BTreeMap::new(),
    };
    walk(&tree.root, &mut stats);
    stats.node_count = stats.internal_count + stats.leaf_count;
    stats
}

fn walk(node: &TreeNode, stats: &mut TreeStats) {
    stats.internal_count += 1;
    *stats.branching_histogram.entry(node.branches.len()).or_insert(0) += 1;
    for branch in &node.branches {
        match &branch.target {
            BranchTarget::Node(child) => walk(child, stats),
            BranchTarget::Leaf(id) => {
                stats.leaf_count += 1;
                let questions = node.depth + 1;
                stats.max_depth = stats.max_depth.max(questions + 1);
                stats.path_lengths.entry(*id).or_insert(questions);
            }
        }
    }
}
