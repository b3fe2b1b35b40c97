//! Decision trees of natural-language questions.
//!
//! Internal nodes carry a question and an ordered list of answer branches;
//! each branch leads either to another question or to a leaf naming one
//! class. Trees are immutable once built and can be shared freely across
//! worker threads.

mod parse;
mod render;
mod stats;
mod validate;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::parse_tree;
pub use render::{render_tree, RenderFormat};
pub use stats::{tree_stats, TreeStats};
pub use validate::{validate_tree, IssueCode, Severity, ValidationIssue};

/// Identifier of a class inside a class set.
pub type ClassId = u32;

/// Sequence of answers taken from the root to reach a node.
pub type NodePath = Vec<String>;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("leaf at {} names unknown class id {id}", fmt_path(.path))]
    UnknownClassId { path: NodePath, id: ClassId },
    #[error("node at {} has no answer branches", fmt_path(.path))]
    EmptyBranchSet { path: NodePath },
    #[error("class set: {0}")]
    ClassSet(String),
    #[error("class id {0} is not reachable at any leaf")]
    UnknownClass(ClassId),
}

/// Renders a node path as `root/answer/answer` for messages.
pub fn fmt_path(path: &[String]) -> String {
    if path.is_empty() {
        "root".to_string()
    } else {
        format!("root/{}", path.join("/"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub id: ClassId,
    pub name: String,
}

impl ClassLabel {
    pub fn new(id: ClassId, name: impl Into<String>) -> Self {
        Self {
            id,
            name: name.into(),
        }
    }
}

/// Ordered set of class labels with unique ids and unique names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ClassSet {
    labels: Vec<ClassLabel>,
}

impl ClassSet {
    /// Builds a class set, sorting labels by id.
    pub fn new(mut labels: Vec<ClassLabel>) -> Result<Self, TreeError> {
        labels.sort_by_key(|l| l.id);
        let mut names = HashSet::new();
        for pair in labels.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(TreeError::ClassSet(format!("duplicate class id {}", pair[0].id)));
            }
        }
        for label in &labels {
            if label.name.trim().is_empty() {
                return Err(TreeError::ClassSet(format!("class {} has an empty name", label.id)));
            }
            if !names.insert(label.name.as_str()) {
                return Err(TreeError::ClassSet(format!("duplicate class name {:?}", label.name)));
            }
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassLabel> {
        self.labels.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.labels.iter().map(|l| l.id)
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassLabel> {
        self.labels
            .binary_search_by_key(&id, |l| l.id)
            .ok()
            .map(|i| &self.labels[i])
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.get(id).is_some()
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        self.get(id).map(|l| l.name.as_str())
    }

    pub fn by_name(&self, name: &str) -> Option<&ClassLabel> {
        self.labels.iter().find(|l| l.name == name)
    }

    pub fn as_slice(&self) -> &[ClassLabel] {
        &self.labels
    }
}

impl<'de> Deserialize<'de> for ClassSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let labels = Vec::<ClassLabel>::deserialize(deserializer)?;
        ClassSet::new(labels).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BranchTarget {
    Node(Box<TreeNode>),
    Leaf(ClassId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub answer: String,
    pub target: BranchTarget,
}

impl Branch {
    pub fn node(answer: impl Into<String>, node: TreeNode) -> Self {
        Self {
            answer: answer.into(),
            target: BranchTarget::Node(Box::new(node)),
        }
    }

    pub fn leaf(answer: impl Into<String>, class_id: ClassId) -> Self {
        Self {
            answer: answer.into(),
            target: BranchTarget::Leaf(class_id),
        }
    }
}

/// A question node. `depth` is the node's level, with the root at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub question: String,
    pub branches: Vec<Branch>,
    pub depth: usize,
}

impl TreeNode {
    /// Creates a node; depths are assigned when the node is placed in a tree.
    pub fn new(question: impl Into<String>, branches: Vec<Branch>) -> Self {
        Self {
            question: question.into(),
            branches,
            depth: 0,
        }
    }

    /// Answer labels in branch order.
    pub fn answers(&self) -> Vec<&str> {
        self.branches.iter().map(|b| b.answer.as_str()).collect()
    }

    pub fn branch(&self, answer: &str) -> Option<&Branch> {
        self.branches.iter().find(|b| b.answer == answer)
    }

    /// Class ids of every leaf below this node, in branch order, deduplicated.
    pub fn reachable_classes(&self) -> Vec<ClassId> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        self.collect_leaves(&mut |id| {
            if seen.insert(id) {
                out.push(id);
            }
        });
        out
    }

    fn collect_leaves(&self, f: &mut dyn FnMut(ClassId)) {
        for branch in &self.branches {
            match &branch.target {
                BranchTarget::Leaf(id) => f(*id),
                BranchTarget::Node(child) => child.collect_leaves(f),
            }
        }
    }

    fn assign_depths(&mut self, depth: usize) {
        self.depth = depth;
        for branch in &mut self.branches {
            if let BranchTarget::Node(child) = &mut branch.target {
                child.assign_depths(depth + 1);
            }
        }
    }
}

/// Outcome of following a sequence of answers from the root.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Resolved<'a> {
    Node(&'a TreeNode),
    Leaf(ClassId),
}

/// Question/answer steps leading to a class's leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPath {
    pub class_id: ClassId,
    pub steps: Vec<(String, String)>,
    /// Set when the class labels more than one leaf; `steps` then leads to
    /// the first such leaf in branch order.
    pub duplicated: bool,
}

impl ClassPath {
    pub fn answers(&self) -> Vec<String> {
        self.steps.iter().map(|(_, a)| a.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub name: String,
    pub classes: ClassSet,
    pub root: TreeNode,
}

impl DecisionTree {
    /// Assembles a tree and assigns node depths. Structural problems are
    /// reported by [`validate_tree`], not here.
    pub fn new(name: impl Into<String>, classes: ClassSet, mut root: TreeNode) -> Self {
        root.assign_depths(0);
        Self {
            name: name.into(),
            classes,
            root,
        }
    }

    /// Follows `answers` from the root.
    pub fn resolve(&self, answers: &[String]) -> Option<Resolved<'_>> {
        let mut node = &self.root;
        for (i, answer) in answers.iter().enumerate() {
            match &node.branch(answer)?.target {
                BranchTarget::Node(child) => node = child,
                BranchTarget::Leaf(id) => {
                    return (i + 1 == answers.len()).then_some(Resolved::Leaf(*id));
                }
            }
        }
        Some(Resolved::Node(node))
    }

    /// Visits every internal node in depth-first, branch order, with its path.
    pub fn for_each_node<'a>(&'a self, mut f: impl FnMut(&'a TreeNode, &[String])) {
        fn walk<'a>(node: &'a TreeNode, path: &mut Vec<String>, f: &mut dyn FnMut(&'a TreeNode, &[String])) {
            f(node, path);
            for branch in &node.branches {
                if let BranchTarget::Node(child) = &branch.target {
                    path.push(branch.answer.clone());
                    walk(child, path, f);
                    path.pop();
                }
            }
        }
        walk(&self.root, &mut Vec::new(), &mut f);
    }

    /// Every leaf as (path of answers, class id), depth-first in branch order.
    pub fn leaves(&self) -> Vec<(NodePath, ClassId)> {
        fn walk(node: &TreeNode, path: &mut NodePath, out: &mut Vec<(NodePath, ClassId)>) {
            for branch in &node.branches {
                path.push(branch.answer.clone());
                match &branch.target {
                    BranchTarget::Leaf(id) => out.push((path.clone(), *id)),
                    BranchTarget::Node(child) => walk(child, path, out),
                }
                path.pop();
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut Vec::new(), &mut out);
        out
    }

    /// Question/answer steps leading from the root to the leaf for `class_id`.
    pub fn path_for_class(&self, class_id: ClassId) -> Result<ClassPath, TreeError> {
        let leaves = self.leaves();
        let mut matching = leaves.iter().filter(|(_, id)| *id == class_id);
        let (answers, _) = matching.next().ok_or(TreeError::UnknownClass(class_id))?;
        let duplicated = matching.next().is_some();
        let mut steps = Vec::with_capacity(answers.len());
        let mut node = &self.root;
        for answer in answers {
            steps.push((node.question.clone(), answer.clone()));
            if let Some(BranchTarget::Node(child)) = node.branch(answer).map(|b| &b.target) {
                node = child;
            }
        }
        Ok(ClassPath {
            class_id,
            steps,
            duplicated,
        })
    }

    /// Paths for every class that appears at a leaf, keyed by class id.
    pub fn class_paths(&self) -> BTreeMap<ClassId, ClassPath> {
        self.classes
            .ids()
            .filter_map(|id| self.path_for_class(id).ok().map(|p| (id, p)))
            .collect()
    }

    /// A complete binary tree with `depth` levels of yes/no questions and
    /// `2^depth` classes, one per leaf.
    pub fn balanced_binary(depth: u32) -> Self {
        fn build(level: u32, depth: u32, prefix: u32, counter: &mut u32) -> TreeNode {
            let question = format!("Is bit {} of the pattern under prefix {prefix:b} set?", level);
            let mut branches = Vec::with_capacity(2);
            for (answer, bit) in [("no", 0u32), ("yes", 1u32)] {
                if level + 1 == depth {
                    branches.push(Branch::leaf(answer, *counter));
                    *counter += 1;
                } else {
                    let child = build(level + 1, depth, (prefix << 1) | bit, counter);
                    branches.push(Branch::node(answer, child));
                }
            }
            TreeNode::new(question, branches)
        }
        assert!(depth >= 1, "a binary tree needs at least one question level");
        let mut counter = 0;
        let root = build(0, depth, 1, &mut counter);
        let classes = ClassSet::new(
            (0..counter)
                .map(|i| ClassLabel::new(i, format!("class-{i:0width$b}", width = depth as usize)))
                .collect(),
        )
        .expect("generated names are unique");
        DecisionTree::new(format!("binary-depth-{depth}"), classes, root)
    }
}

impl fmt::Display for DecisionTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_tree(self, RenderFormat::Listing))
    }
}

/// Normalizes question text for repetition checks: lowercase, single spaces.
pub(crate) fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}
