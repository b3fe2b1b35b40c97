use std::fmt::Write as _;

use serde::ser::{SerializeMap, SerializeStruct};
use serde::{Serialize, Serializer};

use super::{BranchTarget, ClassSet, DecisionTree, TreeNode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderFormat {
    /// Machine-readable document accepted by [`super::parse_tree`].
    Canonical,
    /// Indented `[L{depth}] Q:` listing for human review.
    Listing,
}

pub fn render_tree(tree: &DecisionTree, format: RenderFormat) -> String {
    match format {
        RenderFormat::Canonical => {
            let mut out = serde_json::to_string_pretty(&CanonicalTree(tree))
                .expect("tree documents always serialize");
            out.push('\n');
            out
        }
        RenderFormat::Listing => {
            let mut out = String::new();
            listing(&tree.root, &tree.classes, &mut out);
            out
        }
    }
}

struct CanonicalTree<'a>(&'a DecisionTree);
struct CanonicalNode<'a>(&'a TreeNode);
struct CanonicalBranches<'a>(&'a TreeNode);
struct CanonicalLeaf(u32);

impl Serialize for CanonicalTree<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("DecisionTree", 3)?;
        s.serialize_field("name", &self.0.name)?;
        s.serialize_field("classes", &self.0.classes)?;
        s.serialize_field("root", &CanonicalNode(&self.0.root))?;
        s.end()
    }
}

impl Serialize for CanonicalNode<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("TreeNode", 2)?;
        s.serialize_field("question", &self.0.question)?;
        s.serialize_field("branches", &CanonicalBranches(self.0))?;
        s.end()
    }
}

impl Serialize for CanonicalBranches<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.branches.len()))?;
        for branch in &self.0.branches {
            match &branch.target {
                BranchTarget::Node(child) => map.serialize_entry(&branch.answer, &CanonicalNode(child))?,
                BranchTarget::Leaf(id) => map.serialize_entry(&branch.answer, &CanonicalLeaf(*id))?,
            }
        }
        map.end()
    }
}

impl Serialize for CanonicalLeaf {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("Leaf", 1)?;
        s.serialize_field("class_id", &self.0)?;
        s.end()
    }
}

fn listing(node: &TreeNode, classes: &ClassSet, out: &mut String) {
    let indent = " ".repeat(node.depth * 4);
    let _ = writeln!(out, "{indent}[L{}] Q: {}", node.depth, node.question);
    for branch in &node.branches {
        match &branch.target {
            BranchTarget::Leaf(id) => {
                let name = classes.name(*id).unwrap_or("?");
                let _ = writeln!(
                    out,
                    "{indent}  -> {}: [L{}] Leaf Node: {name} (ID: {id})",
                    branch.answer,
                    node.depth + 1
                );
            }
            BranchTarget::Node(child) => {
                let _ = writeln!(out, "{indent}  -> {}:", branch.answer);
                listing(child, classes, out);
            }
        }
    }
}
