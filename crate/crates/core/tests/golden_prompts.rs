//! Rendered prompts compared byte-for-byte against files in `golden/`.
//! Set `UPDATE_GOLDEN=1` to rewrite them after an intentional change.

mod support;

use std::path::PathBuf;

use treeprobe_core::prompting::{
    build_node_prompt, build_tree_generation_prompt, build_verification_prompt, build_zero_shot_prompt,
    DescriptionContext, NodeContext, DEFAULT_PROMPT_BUDGET,
};
use treeprobe_core::tree::{DecisionTree, Resolved, TreeNode};
use treeprobe_core::PromptVariant;

use support::{descriptions, sample, tree};

fn check(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "{name} differs from its golden file");
}

fn node_at<'t>(tree: &'t DecisionTree, answers: &[&str]) -> &'t TreeNode {
    let answers: Vec<String> = answers.iter().map(|s| s.to_string()).collect();
    match tree.resolve(&answers) {
        Some(Resolved::Node(node)) => node,
        other => panic!("{answers:?} resolves to {other:?}"),
    }
}

#[test]
fn zero_shot_baseline_cifar10() {
    let m = sample("cifar10");
    let p = build_zero_shot_prompt(&PromptVariant::baseline(), &m.classes, &m.task_noun, None, DEFAULT_PROMPT_BUDGET).unwrap();
    assert!(!p.truncated);
    check("zero_shot_baseline_cifar10.txt", &p.text);
}

#[test]
fn zero_shot_descriptions_gtsrb() {
    let m = sample("gtsrb");
    let d = descriptions("gtsrb", &m);
    let context = DescriptionContext {
        descriptions: &d,
        caption: "A round sign with a red rim and the number 70 in the centre.",
    };
    let p = build_zero_shot_prompt(&PromptVariant::baseline(), &m.classes, &m.task_noun, Some(context), DEFAULT_PROMPT_BUDGET)
        .unwrap();
    assert!(!p.truncated);
    assert_eq!(p.text.lines().filter(|l| l.contains(": ") && l.contains(" - ")).count(), 43);
    check("zero_shot_descriptions_gtsrb.txt", &p.text);
}

#[test]
fn node_with_history_at_depth_three() {
    let t = tree("gtsrb");
    let path = ["circle", "red-white", "yes"];
    let history: Vec<(String, String)> = path
        .iter()
        .enumerate()
        .map(|(i, a)| (node_at(&t, &path[..i]).question.clone(), a.to_string()))
        .collect();
    let node = node_at(&t, &path);
    assert_eq!(node.depth, 3);
    let ctx = NodeContext {
        history: &history,
        ..NodeContext::default()
    };
    check("node_history_gtsrb_depth3.txt", &build_node_prompt(node, &ctx).unwrap().text);
}

#[test]
fn node_with_descriptions_cifar10() {
    let t = tree("cifar10");
    let m = sample("cifar10");
    let d = descriptions("cifar10", &m);
    let ctx = NodeContext {
        descriptions: Some((
            &t.classes,
            DescriptionContext {
                descriptions: &d,
                caption: "A brown animal standing in a field.",
            },
        )),
        ..NodeContext::default()
    };
    let node = &t.root.branches[1];
    let node = match &node.target {
        treeprobe_core::BranchTarget::Node(n) => n,
        _ => &t.root,
    };
    check("node_descriptions_cifar10.txt", &build_node_prompt(node, &ctx).unwrap().text);
}

#[test]
fn verification_prompt_gtsrb() {
    let t = tree("gtsrb");
    let history = vec![("What's the sign's primary shape?".to_string(), "circle".to_string())];
    let node = node_at(&t, &["circle"]);
    let p = build_verification_prompt("20 kph speed limit", node, &history).unwrap();
    check("verification_gtsrb.txt", &p.text);
}

#[test]
fn tree_generation_gtsrb_fits_budget() {
    let m = sample("gtsrb");
    let p = build_tree_generation_prompt(&m.classes, "Prefer questions about shape and colour near the root.").unwrap();
    assert!(p.text.len() < DEFAULT_PROMPT_BUDGET, "{} bytes", p.text.len());
    check("tree_generation_gtsrb.txt", &p.text);
}
