use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};

use super::{Branch, BranchTarget, ClassId, ClassSet, DecisionTree, NodePath, TreeError, TreeNode};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTree {
    name: String,
    classes: ClassSet,
    root: RawNode,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    question: String,
    branches: RawBranches,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLeaf {
    class_id: ClassId,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawTarget {
    Leaf(RawLeaf),
    Node(RawNode),
}

/// Branch map kept as an ordered list so that order and duplicate answers
/// survive parsing.
struct RawBranches(Vec<(String, RawTarget)>);

impl<'de> Deserialize<'de> for RawBranches {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct BranchVisitor;

        impl<'de> Visitor<'de> for BranchVisitor {
            type Value = RawBranches;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping answers to nodes or leaves")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut entries = Vec::with_capacity(map.size_hint().unwrap_or(2));
                while let Some((answer, target)) = map.next_entry::<String, RawTarget>()? {
                    entries.push((answer, target));
                }
                Ok(RawBranches(entries))
            }
        }

        deserializer.deserialize_map(BranchVisitor)
    }
}

/// Parses a canonical tree document.
///
/// Branch order is preserved. Leaves naming a class outside the document's
/// class set and nodes without branches are rejected; the remaining
/// structural rules are checked by [`super::validate_tree`].
pub fn parse_tree(document: &str) -> Result<DecisionTree, TreeError> {
    let raw: RawTree = serde_json::from_str(document).map_err(|e| TreeError::Syntax {
        line: e.line(),
        column: e.column(),
        message: strip_position(&e.to_string()),
    })?;
    let mut path = NodePath::new();
    let root = convert(raw.root, &raw.classes, &mut path)?;
    Ok(DecisionTree::new(raw.name, raw.classes, root))
}

fn convert(raw: RawNode, classes: &ClassSet, path: &mut NodePath) -> Result<TreeNode, TreeError> {
    if raw.branches.0.is_empty() {
        return Err(TreeError::EmptyBranchSet { path: path.clone() });
    }
    let mut branches = Vec::with_capacity(raw.branches.0.len());
    for (answer, target) in raw.branches.0 {
        path.push(answer.clone());
        let target = match target {
            RawTarget::Leaf(leaf) => {
                if !classes.contains(leaf.class_id) {
                    return Err(TreeError::UnknownClassId {
                        path: path.clone(),
                        id: leaf.class_id,
                    });
                }
                BranchTarget::Leaf(leaf.class_id)
            }
            RawTarget::Node(node) => BranchTarget::Node(Box::new(convert(node, classes, path)?)),
        };
        path.pop();
        branches.push(Branch { answer, target });
    }
    Ok(TreeNode::new(raw.question, branches))
}

// serde_json appends " at line X column Y"; the position is reported separately.
fn strip_position(message: &str) -> String {
    match message.rfind(" at line ") {
        Some(idx) => message[..idx].to_string(),
        None => message.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_LEAF: &str = r#"{
        "name": "pets",
        "classes": [{"id": 0, "name": "cat"}, {"id": 1, "name": "dog"}],
        "root": {"question": "Is it a cat?", "branches": {"yes": {"class_id": 0}, "no": {"class_id": 1}}}
    }"#;

    #[test]
    fn parses_smallest_tree() {
        let tree = parse_tree(TWO_LEAF).unwrap();
        assert_eq!(tree.root.answers(), vec!["yes", "no"]);
        assert_eq!(tree.classes.len(), 2);
    }

    #[test]
    fn unknown_class_id_is_rejected() {
        let doc = TWO_LEAF.replace(r#""no": {"class_id": 1}"#, r#""no": {"class_id": 99}"#);
        assert_eq!(
            parse_tree(&doc),
            Err(TreeError::UnknownClassId {
                path: vec!["no".into()],
                id: 99
            })
        );
    }

    #[test]
    fn empty_branch_set_is_rejected() {
        let doc = r#"{"name": "x", "classes": [{"id": 0, "name": "a"}],
            "root": {"question": "q", "branches": {}}}"#;
        assert_eq!(parse_tree(doc), Err(TreeError::EmptyBranchSet { path: vec![] }));
    }

    #[test]
    fn syntax_error_has_position() {
        let doc = "{\n  \"name\": \"x\",\n  \"classes\": [,]\n}";
        match parse_tree(doc) {
            Err(TreeError::Syntax { line, column, .. }) => {
                assert_eq!(line, 3);
                assert!(column > 0);
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_answers_survive_parsing() {
        let doc = r#"{"name": "x", "classes": [{"id": 0, "name": "a"}, {"id": 1, "name": "b"}],
            "root": {"question": "q", "branches": {"yes": {"class_id": 0}, "yes": {"class_id": 1}}}}"#;
        let tree = parse_tree(doc).unwrap();
        assert_eq!(tree.root.answers(), vec!["yes", "yes"]);
    }

    #[test]
    fn depths_are_assigned() {
        let doc = r#"{"name": "x", "classes": [{"id": 0, "name": "a"}, {"id": 1, "name": "b"}, {"id": 2, "name": "c"}],
            "root": {"question": "q0", "branches": {
                "l": {"question": "q1", "branches": {"a": {"class_id": 0}, "b": {"class_id": 1}}},
                "r": {"class_id": 2}}}}"#;
        let tree = parse_tree(doc).unwrap();
        match &tree.root.branches[0].target {
            BranchTarget::Node(child) => assert_eq!(child.depth, 1),
            _ => panic!("expected node"),
        }
    }
}
