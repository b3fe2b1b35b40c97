use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::backends::{ErrorModel, MisrouteRule};
use crate::tree::{fmt_path, tree_stats, BranchTarget, ClassId, DecisionTree, TreeNode};

/// Per-node probability of a correct answer, with every node answering
/// independently.
///
/// Lookup order for a node: `per_node` (keyed by the node's answer path
/// joined with `/`, the root being the empty string), then `per_depth`,
/// then `default`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationModel {
    #[serde(default)]
    pub per_node: BTreeMap<String, f64>,
    #[serde(default)]
    pub per_depth: BTreeMap<usize, f64>,
    #[serde(default)]
    pub default: Option<f64>,
    #[serde(default)]
    pub misroute: MisrouteRule,
}

impl PropagationModel {
    pub fn uniform(p: f64) -> Self {
        Self {
            default: Some(p),
            ..Self::default()
        }
    }

    pub fn per_depth(per_depth: BTreeMap<usize, f64>, default: Option<f64>) -> Self {
        Self {
            per_depth,
            default,
            ..Self::default()
        }
    }

    pub fn accuracy(&self, path: &[String], depth: usize) -> Option<f64> {
        self.per_node
            .get(&path.join("/"))
            .or_else(|| self.per_depth.get(&depth))
            .copied()
            .or(self.default)
    }
}

impl From<&ErrorModel> for PropagationModel {
    fn from(model: &ErrorModel) -> Self {
        Self {
            per_node: BTreeMap::new(),
            per_depth: model.per_depth_accuracy.clone(),
            default: Some(model.default_accuracy),
            misroute: model.misroute_rule,
        }
    }
}

/// Nodes are keyed by address; the table borrows the tree, so addresses
/// are stable for its lifetime.
fn node_id(node: &TreeNode) -> usize {
    node as *const TreeNode as usize
}

/// Accuracy of every node, resolved once.
struct NodeTable<'t> {
    accuracy: HashMap<usize, f64>,
    reachable: HashMap<usize, Vec<ClassId>>,
    misroute: MisrouteRule,
    _tree: std::marker::PhantomData<&'t DecisionTree>,
}

impl<'t> NodeTable<'t> {
    fn build(tree: &'t DecisionTree, model: &PropagationModel) -> Result<Self, AnalysisError> {
        let mut accuracy = HashMap::new();
        let mut reachable = HashMap::new();
        let mut missing = None;
        let mut invalid = None;
        tree.for_each_node(|node, path| {
            match model.accuracy(path, node.depth) {
                Some(p) if (0.0..=1.0).contains(&p) => {
                    accuracy.insert(node_id(node), p);
                }
                Some(p) => {
                    invalid.get_or_insert((fmt_path(path), p));
                }
                None => {
                    missing.get_or_insert(fmt_path(path));
                }
            }
            reachable.insert(node_id(node), node.reachable_classes());
        });
        if let Some(path) = missing {
            return Err(AnalysisError::Model(format!("no accuracy assigned to the node at {path}")));
        }
        if let Some((path, p)) = invalid {
            return Err(AnalysisError::Model(format!("accuracy {p} at {path} is outside [0, 1]")));
        }
        Ok(Self {
            accuracy,
            reachable,
            misroute: model.misroute,
            _tree: std::marker::PhantomData,
        })
    }

    fn p(&self, node: &TreeNode) -> f64 {
        self.accuracy[&node_id(node)]
    }

    /// Branch index leading towards `class_id`, as the simulator picks it.
    fn truth_branch(&self, node: &TreeNode, class_id: ClassId) -> Option<usize> {
        node.branches.iter().position(|b| match &b.target {
            BranchTarget::Leaf(id) => *id == class_id,
            BranchTarget::Node(child) => self.reachable[&node_id(child)].contains(&class_id),
        })
    }

    /// Probability of taking each branch of `node` when the true class is
    /// `class_id`.
    fn branch_probabilities(&self, node: &TreeNode, class_id: ClassId) -> Vec<f64> {
        let n = node.branches.len();
        let mut probs = vec![0.0; n];
        let Some(t) = self.truth_branch(node, class_id) else {
            return vec![1.0 / n as f64; n];
        };
        if n == 1 {
            probs[0] = 1.0;
            return probs;
        }
        let p = self.p(node);
        probs[t] = p;
        match self.misroute {
            MisrouteRule::UniformOther => {
                for (i, slot) in probs.iter_mut().enumerate() {
                    if i != t {
                        *slot = (1.0 - p) / (n - 1) as f64;
                    }
                }
            }
            MisrouteRule::AdjacentAnswer => {
                if t == 0 {
                    probs[1] = 1.0 - p;
                } else if t == n - 1 {
                    probs[n - 2] = 1.0 - p;
                } else {
                    probs[t - 1] = (1.0 - p) / 2.0;
                    probs[t + 1] = (1.0 - p) / 2.0;
                }
            }
        }
        probs
    }

    /// Probability of ending at a leaf labelled `class_id` starting from `node`.
    fn reach(&self, node: &TreeNode, class_id: ClassId) -> f64 {
        let probs = self.branch_probabilities(node, class_id);
        node.branches
            .iter()
            .zip(probs)
            .filter(|(_, q)| *q > 0.0)
            .map(|(b, q)| {
                q * match &b.target {
                    BranchTarget::Leaf(id) => f64::from(u8::from(*id == class_id)),
                    BranchTarget::Node(child) => self.reach(child, class_id),
                }
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationResult {
    pub per_class: BTreeMap<ClassId, f64>,
    /// Mean over classes with equal weight.
    pub overall: f64,
}

impl PropagationResult {
    /// Mean weighted by class frequency; classes missing from `weights`
    /// get weight 0.
    pub fn overall_weighted(&self, weights: &BTreeMap<ClassId, f64>) -> f64 {
        let total: f64 = self.per_class.keys().map(|c| weights.get(c).copied().unwrap_or(0.0)).sum();
        if total == 0.0 {
            return 0.0;
        }
        self.per_class
            .iter()
            .map(|(c, a)| a * weights.get(c).copied().unwrap_or(0.0))
            .sum::<f64>()
            / total
    }
}

/// Expected accuracy of each class under independent node errors.
///
/// With one leaf per class this is the product of node accuracies along
/// the class's path, since a wrong answer can never lead back to the
/// class. When some class labels several leaves the probability of
/// reaching any of them is summed over every branch sequence instead.
pub fn analytic_leaf_accuracy(tree: &DecisionTree, model: &PropagationModel) -> Result<PropagationResult, AnalysisError> {
    let table = NodeTable::build(tree, model)?;
    let stats = tree_stats(tree);
    let bijective = stats.leaf_count == stats.path_lengths.len();
    let mut per_class = BTreeMap::new();
    for class_id in tree.classes.ids() {
        let value = if !stats.path_lengths.contains_key(&class_id) {
            0.0
        } else if bijective {
            let path = tree.path_for_class(class_id).map_err(|e| AnalysisError::Tree(e.to_string()))?;
            let answers = path.answers();
            let mut product = 1.0;
            let mut node = &tree.root;
            for answer in &answers {
                if node.branches.len() > 1 {
                    product *= table.p(node);
                }
                match &node.branch(answer).expect("path answers are branches").target {
                    BranchTarget::Node(child) => node = child,
                    BranchTarget::Leaf(_) => break,
                }
            }
            product
        } else {
            table.reach(&tree.root, class_id)
        };
        per_class.insert(class_id, value);
    }
    let overall = per_class.values().sum::<f64>() / per_class.len().max(1) as f64;
    Ok(PropagationResult { per_class, overall })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub trials: u64,
    pub successes: u64,
    pub estimate: f64,
    /// Binomial standard error `sqrt(p (1 - p) / n)`.
    pub stderr: f64,
    /// (trials, successes) per class.
    pub per_class: BTreeMap<ClassId, (u64, u64)>,
}

impl MonteCarloEstimate {
    pub fn class_estimate(&self, class_id: ClassId) -> Option<f64> {
        self.per_class.get(&class_id).map(|(n, k)| *k as f64 / (*n).max(1) as f64)
    }
}

/// Simulated traversals; trial `i` starts from class `classes[i % k]` and
/// draws from its own RNG seeded by `(seed, i)`, so the result does not
/// depend on how trials are split across threads.
pub fn monte_carlo_leaf_accuracy(
    tree: &DecisionTree,
    model: &PropagationModel,
    trials: u64,
    seed: u64,
) -> Result<MonteCarloEstimate, AnalysisError> {
    if trials == 0 {
        return Err(AnalysisError::Model("trials must be at least 1".into()));
    }
    let table = NodeTable::build(tree, model)?;
    let classes: Vec<ClassId> = tree.classes.ids().collect();
    let k = classes.len() as u64;
    let per_class: BTreeMap<ClassId, (u64, u64)> = (0..trials)
        .into_par_iter()
        .fold(BTreeMap::new, |mut acc: BTreeMap<ClassId, (u64, u64)>, i| {
            let class_id = classes[(i % k) as usize];
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, i));
            let hit = traverse(&table, &tree.root, class_id, &mut rng);
            let slot = acc.entry(class_id).or_insert((0, 0));
            slot.0 += 1;
            slot.1 += u64::from(hit);
            acc
        })
        .reduce(BTreeMap::new, |mut a, b| {
            for (c, (n, s)) in b {
                let slot = a.entry(c).or_insert((0, 0));
                slot.0 += n;
                slot.1 += s;
            }
            a
        });
    let successes: u64 = per_class.values().map(|(_, s)| s).sum();
    let estimate = successes as f64 / trials as f64;
    Ok(MonteCarloEstimate {
        trials,
        successes,
        estimate,
        stderr: (estimate * (1.0 - estimate) / trials as f64).sqrt(),
        per_class,
    })
}

fn traverse(table: &NodeTable<'_>, root: &TreeNode, class_id: ClassId, rng: &mut ChaCha8Rng) -> bool {
    let mut node = root;
    loop {
        let idx = match table.truth_branch(node, class_id) {
            Some(t) => crate::backends::draw_branch(table.p(node), table.misroute, node.branches.len(), t, rng),
            None => rng.random_range(0..node.branches.len()),
        };
        match &node.branches[idx].target {
            BranchTarget::Leaf(id) => return *id == class_id,
            BranchTarget::Node(child) => node = child,
        }
    }
}

fn trial_seed(seed: u64, trial: u64) -> u64 {
    crate::backends::splitmix64(crate::backends::splitmix64(seed) ^ trial)
}
