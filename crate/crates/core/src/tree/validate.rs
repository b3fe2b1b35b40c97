use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{fmt_path, normalize_text, BranchTarget, ClassId, DecisionTree, NodePath, TreeNode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IssueCode {
    DuplicateQuestionOnPath,
    MissingClass,
    DuplicateLeafClass,
    EmptyBranchSet,
    DuplicateAnswer,
    UnknownClassId,
    SingleChildNode,
    /// Empty question or answer text.
    EmptyLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub code: IssueCode,
    pub severity: Severity,
    /// Answers from the root to the offending node or leaf.
    pub path: NodePath,
    pub detail: String,
}

impl std::fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{tag}: {:?} at {}: {}", self.code, fmt_path(&self.path), self.detail)
    }
}

/// Checks every structural rule and returns the violations found, in
/// depth-first order followed by missing classes.
///
/// With `allow_duplicate_leaf_classes` set, classes appearing at several
/// leaves are reported as warnings instead of errors.
pub fn validate_tree(tree: &DecisionTree, allow_duplicate_leaf_classes: bool) -> Vec<ValidationIssue> {
    let mut checker = Checker {
        tree,
        allow_duplicates: allow_duplicate_leaf_classes,
        issues: Vec::new(),
        leaf_counts: BTreeMap::new(),
        ancestors: Vec::new(),
        path: Vec::new(),
    };
    checker.node(&tree.root);
    for label in tree.classes.iter() {
        if !checker.leaf_counts.contains_key(&label.id) {
            checker.issues.push(ValidationIssue {
                code: IssueCode::MissingClass,
                severity: Severity::Error,
                path: Vec::new(),
                detail: format!("class {} ({}) has no leaf", label.id, label.name),
            });
        }
    }
    checker.issues
}

struct Checker<'a> {
    tree: &'a DecisionTree,
    allow_duplicates: bool,
    issues: Vec<ValidationIssue>,
    leaf_counts: BTreeMap<ClassId, usize>,
    ancestors: Vec<String>,
    path: NodePath,
}

impl Checker<'_> {
    fn push(&mut self, code: IssueCode, detail: String) {
        self.issues.push(ValidationIssue {
            code,
            severity: Severity::Error,
            path: self.path.clone(),
            detail,
        });
    }

    fn node(&mut self, node: &TreeNode) {
        let question = normalize_text(&node.question);
        if question.is_empty() {
            self.push(IssueCode::EmptyLabel, "question text is empty".into());
        } else if self.ancestors.contains(&question) {
            self.push(
                IssueCode::DuplicateQuestionOnPath,
                format!("question {:?} already asked on this path", node.question),
            );
        }
        match node.branches.len() {
            0 => self.push(IssueCode::EmptyBranchSet, "node has no answer branches".into()),
            1 => self.push(IssueCode::SingleChildNode, "node has a single answer branch".into()),
            _ => {}
        }
        let mut seen = HashSet::new();
        for branch in &node.branches {
            let answer = normalize_text(&branch.answer);
            if answer.is_empty() {
                self.push(IssueCode::EmptyLabel, "answer text is empty".into());
            } else if !seen.insert(answer) {
                self.push(
                    IssueCode::DuplicateAnswer,
                    format!("answer {:?} appears more than once", branch.answer),
                );
            }
        }

        self.ancestors.push(question);
        for branch in &node.branches {
            self.path.push(branch.answer.clone());
            match &branch.target {
                BranchTarget::Node(child) => self.node(child),
                BranchTarget::Leaf(id) => self.leaf(*id),
            }
            self.path.pop();
        }
        self.ancestors.pop();
    }

    fn leaf(&mut self, id: ClassId) {
        if !self.tree.classes.contains(id) {
            self.push(IssueCode::UnknownClassId, format!("class id {id} is not in the class set"));
            return;
        }
        let count = self.leaf_counts.entry(id).or_insert(0);
        *count += 1;
        if *count > 1 {
            let severity = if self.allow_duplicates {
                Severity::Warning
            } else {
                Severity::Error
            };
            let name = self.tree.classes.name(id).unwrap_or_default().to_string();
            self.issues.push(ValidationIssue {
                code: IssueCode::DuplicateLeafClass,
                severity,
                path: self.path.clone(),
                detail: format!("class {id} ({name}) already labels another leaf"),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::testing::two_leaf_tree;
    use crate::tree::{Branch, ClassLabel, ClassSet};

    fn codes(issues: &[ValidationIssue]) -> Vec<IssueCode> {
        issues.iter().map(|i| i.code).collect()
    }

    #[test]
    fn clean_tree_has_no_issues() {
        assert!(validate_tree(&two_leaf_tree(), false).is_empty());
        assert!(validate_tree(&DecisionTree::balanced_binary(4), false).is_empty());
    }

    #[test]
    fn repeated_question_on_path() {
        let classes = ClassSet::new((0..4).map(|i| ClassLabel::new(i, format!("c{i}"))).collect()).unwrap();
        let deep = TreeNode::new(
            "does it contain   NUMBERS?",
            vec![Branch::leaf("yes", 0), Branch::leaf("no", 1)],
        );
        let mid = TreeNode::new("Is it red?", vec![Branch::node("yes", deep), Branch::leaf("no", 2)]);
        let root = TreeNode::new("Does it contain numbers?", vec![Branch::node("yes", mid), Branch::leaf("no", 3)]);
        let tree = DecisionTree::new("t", classes, root);
        let issues = validate_tree(&tree, false);
        assert_eq!(codes(&issues), vec![IssueCode::DuplicateQuestionOnPath]);
        assert_eq!(issues[0].path, vec!["yes".to_string(), "yes".to_string()]);
    }

    #[test]
    fn same_question_on_sibling_paths_is_fine() {
        let classes = ClassSet::new((0..4).map(|i| ClassLabel::new(i, format!("c{i}"))).collect()).unwrap();
        let a = TreeNode::new("Is it red?", vec![Branch::leaf("yes", 0), Branch::leaf("no", 1)]);
        let b = TreeNode::new("Is it red?", vec![Branch::leaf("yes", 2), Branch::leaf("no", 3)]);
        let root = TreeNode::new("Is it round?", vec![Branch::node("yes", a), Branch::node("no", b)]);
        assert!(validate_tree(&DecisionTree::new("t", classes, root), false).is_empty());
    }

    #[test]
    fn missing_class() {
        let mut tree = two_leaf_tree();
        tree.classes = ClassSet::new(vec![
            ClassLabel::new(0, "cat"),
            ClassLabel::new(1, "dog"),
            ClassLabel::new(2, "fish"),
        ])
        .unwrap();
        assert_eq!(codes(&validate_tree(&tree, false)), vec![IssueCode::MissingClass]);
    }

    #[test]
    fn duplicate_leaf_class_severity_follows_flag() {
        let mut tree = two_leaf_tree();
        tree.root.branches[1].target = BranchTarget::Leaf(0);
        tree.classes = ClassSet::new(vec![ClassLabel::new(0, "cat")]).unwrap();
        let strict = validate_tree(&tree, false);
        assert_eq!(codes(&strict), vec![IssueCode::DuplicateLeafClass]);
        assert_eq!(strict[0].severity, Severity::Error);
        let lenient = validate_tree(&tree, true);
        assert_eq!(lenient[0].severity, Severity::Warning);
    }

    #[test]
    fn branch_level_defects() {
        let mut tree = two_leaf_tree();
        tree.root.branches[1].answer = "YES".into();
        assert_eq!(codes(&validate_tree(&tree, false)), vec![IssueCode::DuplicateAnswer]);

        let mut tree = two_leaf_tree();
        tree.root.branches[1].target = BranchTarget::Leaf(42);
        assert_eq!(
            codes(&validate_tree(&tree, false)),
            vec![IssueCode::UnknownClassId, IssueCode::MissingClass]
        );

        let mut tree = two_leaf_tree();
        tree.root.branches.clear();
        assert_eq!(
            codes(&validate_tree(&tree, false)),
            vec![IssueCode::EmptyBranchSet, IssueCode::MissingClass, IssueCode::MissingClass]
        );
    }
}
