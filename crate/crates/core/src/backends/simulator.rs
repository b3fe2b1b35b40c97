use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Backend, BackendError, ChatRequest, ChatResponse, Purpose};
use crate::tree::{fmt_path, BranchTarget, ClassId, DecisionTree, Resolved, TreeNode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error("probability {value} for {what} is outside [0, 1]")]
    InvalidProbability { what: String, value: f64 },
    #[error("answer {answer:?} is not a branch of {question:?}")]
    TruthNotAnswer { question: String, answer: String },
    #[error("no question node at {0}")]
    UnknownNode(String),
    #[error("image {0:?} has no ground-truth class")]
    UnknownImage(String),
    #[error("node requests need a tree")]
    NoTree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisrouteRule {
    /// A wrong answer is drawn uniformly from the other branches.
    #[default]
    UniformOther,
    /// A wrong answer is a neighbouring branch in branch order.
    AdjacentAnswer,
}

/// Probability of answering a question correctly, by node depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorModel {
    #[serde(default)]
    pub per_depth_accuracy: BTreeMap<usize, f64>,
    pub default_accuracy: f64,
    #[serde(default)]
    pub misroute_rule: MisrouteRule,
}

impl ErrorModel {
    pub fn uniform(p: f64) -> Self {
        Self {
            per_depth_accuracy: BTreeMap::new(),
            default_accuracy: p,
            misroute_rule: MisrouteRule::UniformOther,
        }
    }

    pub fn accuracy_at(&self, depth: usize) -> f64 {
        self.per_depth_accuracy.get(&depth).copied().unwrap_or(self.default_accuracy)
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let check = |what: String, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(SimulationError::InvalidProbability { what, value })
            }
        };
        check("default".into(), self.default_accuracy)?;
        for (depth, p) in &self.per_depth_accuracy {
            check(format!("depth {depth}"), *p)?;
        }
        Ok(())
    }
}

/// Draws an answer at `node`: the truth with the depth's accuracy,
/// otherwise a wrong branch picked by the misroute rule.
pub fn simulate_answer<R: Rng + ?Sized>(
    model: &ErrorModel,
    node: &TreeNode,
    truth_answer: &str,
    rng: &mut R,
) -> Result<String, SimulationError> {
    let truth = node
        .branches
        .iter()
        .position(|b| b.answer == truth_answer)
        .ok_or_else(|| SimulationError::TruthNotAnswer {
            question: node.question.clone(),
            answer: truth_answer.to_string(),
        })?;
    let idx = draw_branch(model.accuracy_at(node.depth), model.misroute_rule, node.branches.len(), truth, rng);
    Ok(node.branches[idx].answer.clone())
}

pub(crate) fn draw_branch<R: Rng + ?Sized>(p: f64, rule: MisrouteRule, n: usize, truth: usize, rng: &mut R) -> usize {
    if n < 2 || rng.random::<f64>() < p {
        return truth;
    }
    match rule {
        MisrouteRule::UniformOther => {
            let k = rng.random_range(0..n - 1);
            if k >= truth {
                k + 1
            } else {
                k
            }
        }
        MisrouteRule::AdjacentAnswer => {
            if truth == 0 {
                1
            } else if truth == n - 1 || rng.random::<bool>() {
                truth - 1
            } else {
                truth + 1
            }
        }
    }
}

/// Index of the branch whose subtree holds a leaf for `class_id`.
pub(crate) fn truth_branch(node: &TreeNode, class_id: ClassId) -> Option<usize> {
    node.branches.iter().position(|b| match &b.target {
        BranchTarget::Leaf(id) => *id == class_id,
        BranchTarget::Node(child) => child.reachable_classes().contains(&class_id),
    })
}

/// Seeded stand-in for a model. Each request gets its own RNG derived from
/// the global seed and the request's cache key, so answers do not depend on
/// scheduling.
pub struct Simulator {
    id: String,
    model: ErrorModel,
    seed: u64,
    tree: Option<DecisionTree>,
    truth: HashMap<String, ClassId>,
    class_ids: Vec<ClassId>,
}

impl Simulator {
    pub fn new(id: impl Into<String>, model: ErrorModel, seed: u64) -> Result<Self, SimulationError> {
        model.validate()?;
        Ok(Self {
            id: id.into(),
            model,
            seed,
            tree: None,
            truth: HashMap::new(),
            class_ids: Vec::new(),
        })
    }

    pub fn with_tree(mut self, tree: DecisionTree) -> Self {
        if self.class_ids.is_empty() {
            self.class_ids = tree.classes.ids().collect();
        }
        self.tree = Some(tree);
        self
    }

    /// Ground truth per image reference, plus the class ids zero-shot
    /// answers are drawn from.
    pub fn with_truth(mut self, truth: HashMap<String, ClassId>, class_ids: Vec<ClassId>) -> Self {
        self.truth = truth;
        self.class_ids = class_ids;
        self
    }

    fn image_truth(&self, request: &ChatRequest) -> Result<ClassId, SimulationError> {
        let image = request.image_ref().unwrap_or_default();
        self.truth
            .get(image)
            .copied()
            .ok_or_else(|| SimulationError::UnknownImage(image.to_string()))
    }

    fn answer(&self, request: &ChatRequest, rng: &mut ChaCha8Rng) -> Result<String, SimulationError> {
        let (path, class_id) = match &request.purpose {
            Purpose::Caption => return Ok("A simulated photograph.".to_string()),
            Purpose::ZeroShot => {
                let truth = self.image_truth(request)?;
                let pos = self.class_ids.iter().position(|c| *c == truth).unwrap_or(0);
                let idx = draw_branch(
                    self.model.default_accuracy,
                    MisrouteRule::UniformOther,
                    self.class_ids.len(),
                    pos,
                    rng,
                );
                return Ok(self.class_ids.get(idx).copied().unwrap_or(truth).to_string());
            }
            Purpose::Node { path } => (path, self.image_truth(request)?),
            Purpose::Verify { class_id, path } => (path, *class_id),
        };
        let tree = self.tree.as_ref().ok_or(SimulationError::NoTree)?;
        let node = match tree.resolve(path) {
            Some(Resolved::Node(node)) => node,
            _ => return Err(SimulationError::UnknownNode(fmt_path(path))),
        };
        match truth_branch(node, class_id) {
            Some(idx) => simulate_answer(&self.model, node, &node.branches[idx].answer, rng),
            // Already off the true path: any answer is as good as another.
            None => Ok(node.branches[rng.random_range(0..node.branches.len())].answer.clone()),
        }
    }
}

impl Backend for Simulator {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let key = self.key(request);
        let mut seed_bytes = [0u8; 8];
        seed_bytes.copy_from_slice(&key.0[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ u64::from_le_bytes(seed_bytes)));
        let text = self
            .answer(request, &mut rng)
            .map_err(|source| BackendError::Simulation { key, source })?;
        Ok(ChatResponse {
            text,
            latency_ms: 0,
            backend_id: self.id.clone(),
            cached: false,
        })
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
