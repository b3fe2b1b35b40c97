//! Builders for every prompt sent to a backend.
//!
//! All builders are pure. Augmentation blocks (history, class descriptions,
//! captions) are placed before the base text so the model reads the context
//! before the question it has to answer.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::ClassDescriptionSet;
use crate::tree::{ClassId, ClassSet, TreeNode};

pub const TASK_NOUN: &str = "{task_noun}";
pub const CLASS_LIST: &str = "{class_ids_and_names}";

/// Default ceiling on prompt length, in characters.
pub const DEFAULT_PROMPT_BUDGET: usize = 8_000;

pub const BASELINE_TEMPLATE: &str = "Please classify the {task_noun} in the given image. It should be only one of these classes: {class_ids_and_names}. Respond with only the class ID.";

const CAPTION_INSTRUCTION: &str = "Describe the salient visual content of this image in at most three sentences. \
Mention shapes, colours, symbols, any visible text and the main subject.";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("variant {variant_id}: placeholder {placeholder} must appear exactly once, found {count}")]
    Placeholder {
        variant_id: String,
        placeholder: &'static str,
        count: usize,
    },
    #[error("duplicate variant id {0}")]
    DuplicateVariant(String),
    #[error("{0}: no prompt variants")]
    NoVariants(PathBuf),
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("class set is empty")]
    NoClasses,
    #[error("descriptions missing for class ids {0:?}")]
    DescriptionsIncomplete(Vec<ClassId>),
    #[error("node {0:?} has no answer branches")]
    NoAnswers(String),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
}

/// The five ways of asking a model to classify an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ZeroShot,
    ZeroShotDesc,
    Tree,
    TreeHistory,
    TreeDesc,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::ZeroShot,
        Strategy::ZeroShotDesc,
        Strategy::Tree,
        Strategy::TreeHistory,
        Strategy::TreeDesc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::ZeroShot => "zero_shot",
            Strategy::ZeroShotDesc => "zero_shot_desc",
            Strategy::Tree => "tree",
            Strategy::TreeHistory => "tree_history",
            Strategy::TreeDesc => "tree_desc",
        }
    }

    pub fn is_tree(self) -> bool {
        matches!(self, Strategy::Tree | Strategy::TreeHistory | Strategy::TreeDesc)
    }

    /// Strategies that need class descriptions and an image caption.
    pub fn uses_descriptions(self) -> bool {
        matches!(self, Strategy::ZeroShotDesc | Strategy::TreeDesc)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| PromptError::UnknownStrategy(s.to_string()))
    }
}

/// A zero-shot template with `{task_noun}` and `{class_ids_and_names}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptVariant {
    pub variant_id: String,
    pub template: String,
}

impl PromptVariant {
    pub fn new(variant_id: impl Into<String>, template: impl Into<String>) -> Result<Self, PromptError> {
        let variant = Self {
            variant_id: variant_id.into(),
            template: template.into(),
        };
        for placeholder in [TASK_NOUN, CLASS_LIST] {
            let count = variant.template.matches(placeholder).count();
            if count != 1 {
                return Err(PromptError::Placeholder {
                    variant_id: variant.variant_id,
                    placeholder,
                    count,
                });
            }
        }
        Ok(variant)
    }

    pub fn baseline() -> Self {
        Self::new("v00-baseline", BASELINE_TEMPLATE).expect("baseline template is well-formed")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    /// Image references sent with the text; zero or one entry.
    pub attachments: Vec<String>,
    /// Set when augmentation context was cut to fit the length budget.
    #[serde(default)]
    pub truncated: bool,
}

impl RenderedPrompt {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            attachments: Vec::new(),
            truncated: false,
        }
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.attachments = vec![image_ref.into()];
        self
    }

    pub fn image(&self) -> Option<&str> {
        self.attachments.first().map(String::as_str)
    }
}

/// Class descriptions plus the model's own caption of the image.
#[derive(Debug, Clone, Copy)]
pub struct DescriptionContext<'a> {
    pub descriptions: &'a ClassDescriptionSet,
    pub caption: &'a str,
}

/// Optional augmentation for a node prompt.
#[derive(Debug, Clone, Copy)]
pub struct NodeContext<'a> {
    /// Prior (question, answer) steps in traversal order.
    pub history: &'a [(String, String)],
    pub descriptions: Option<(&'a ClassSet, DescriptionContext<'a>)>,
    pub budget: usize,
}

impl Default for NodeContext<'_> {
    fn default() -> Self {
        Self {
            history: &[],
            descriptions: None,
            budget: DEFAULT_PROMPT_BUDGET,
        }
    }
}

/// `0: airplane, 1: automobile, ...` in class-id order.
pub fn class_ids_and_names(classes: &ClassSet) -> String {
    classes
        .iter()
        .map(|c| format!("{}: {}", c.id, c.name))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn build_zero_shot_prompt(
    variant: &PromptVariant,
    classes: &ClassSet,
    task_noun: &str,
    context: Option<DescriptionContext<'_>>,
    budget: usize,
) -> Result<RenderedPrompt, PromptError> {
    if classes.is_empty() {
        return Err(PromptError::NoClasses);
    }
    let template = variant.template.replace(TASK_NOUN, task_noun);
    let Some(context) = context else {
        let text = template.replace(CLASS_LIST, &class_ids_and_names(classes));
        return Ok(RenderedPrompt::text(text));
    };

    let missing: Vec<ClassId> = classes.ids().filter(|id| context.descriptions.get(*id).is_none()).collect();
    if !missing.is_empty() {
        return Err(PromptError::DescriptionsIncomplete(missing));
    }
    let lines: Vec<String> = classes
        .iter()
        .map(|c| described_line(c.id, &c.name, context.descriptions.get(c.id).unwrap_or_default()))
        .collect();
    let (before, after) = template.split_once(CLASS_LIST).expect("placeholder checked at construction");
    let after = after.trim_start_matches(['.', ' ']);
    let caption = format!("Image description: {}\n\n", context.caption.trim());
    let text = format!("{}\n{}\n{}", before.trim_end(), lines.join("\n"), after);
    Ok(fit_to_budget(caption, text, budget))
}

/// Renders `{question} Choose one of these answers: ['a', 'b'].`, preceded
/// by any history and description blocks in `context`.
pub fn build_node_prompt(node: &TreeNode, context: &NodeContext<'_>) -> Result<RenderedPrompt, PromptError> {
    if node.branches.is_empty() {
        return Err(PromptError::NoAnswers(node.question.clone()));
    }
    let base = node_base_text(&node.question, &node.answers());
    let mut prefix = String::new();
    if let Some((classes, desc)) = context.descriptions {
        prefix.push_str(&description_block(node, classes, desc));
    }
    prefix.push_str(&history_block(context.history));
    Ok(fit_to_budget(prefix, base, context.budget))
}

/// The knowledge-verification prompt: the model is told the true class and
/// sees its own earlier answers along the path.
pub fn build_verification_prompt(
    class_name: &str,
    node: &TreeNode,
    history: &[(String, String)],
) -> Result<RenderedPrompt, PromptError> {
    if node.branches.is_empty() {
        return Err(PromptError::NoAnswers(node.question.clone()));
    }
    let text = format!(
        "The image shows the class \"{class_name}\".\n\n{}{}",
        history_block(history),
        node_base_text(&node.question, &node.answers())
    );
    Ok(RenderedPrompt::text(text))
}

pub fn build_caption_prompt() -> RenderedPrompt {
    RenderedPrompt::text(CAPTION_INSTRUCTION)
}

/// Request for a model to draft a question tree over `classes`.
pub fn build_tree_generation_prompt(classes: &ClassSet, constraints_note: &str) -> Result<RenderedPrompt, PromptError> {
    if classes.is_empty() {
        return Err(PromptError::NoClasses);
    }
    let mut text = String::from(
        "Design a decision tree of natural-language questions that identifies which of the following classes an image shows.\n\nClasses:\n",
    );
    for class in classes.iter() {
        text.push_str(&format!("{}: {}\n", class.id, class.name));
    }
    text.push_str(
        "\nConstraints:\n\
         1. No question may be repeated along a single root-to-leaf path.\n\
         2. Each leaf names exactly one class, and every class appears at a leaf.\n\
         3. Every question has at least two distinct, non-empty answers.\n",
    );
    let note = constraints_note.trim();
    if !note.is_empty() {
        text.push_str(&format!("4. {note}\n"));
    }
    text.push_str(
        "\nReply with only a JSON document of this shape, keeping answers in the order they should be asked:\n\
         {\"name\": \"...\", \"classes\": [{\"id\": 0, \"name\": \"...\"}], \
         \"root\": {\"question\": \"...\", \"branches\": {\"<answer>\": {\"question\": \"...\", \"branches\": {}}, \
         \"<answer>\": {\"class_id\": 0}}}}\n",
    );
    Ok(RenderedPrompt::text(text))
}

pub fn load_prompt_variants(path: &Path) -> Result<Vec<PromptVariant>, PromptError> {
    let text = fs::read_to_string(path).map_err(|e| PromptError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_prompt_variants(&text, path)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VariantLine {
    variant_id: String,
    template: String,
}

pub fn parse_prompt_variants(text: &str, origin: &Path) -> Result<Vec<PromptVariant>, PromptError> {
    let mut variants = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: VariantLine = serde_json::from_str(line).map_err(|e| PromptError::Schema {
            path: origin.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let variant = PromptVariant::new(raw.variant_id, raw.template)?;
        if !ids.insert(variant.variant_id.clone()) {
            return Err(PromptError::DuplicateVariant(variant.variant_id));
        }
        variants.push(variant);
    }
    if variants.is_empty() {
        return Err(PromptError::NoVariants(origin.to_path_buf()));
    }
    Ok(variants)
}

/// Python-style list literal, e.g. `['yes', 'no']`.
pub fn answer_list(answers: &[&str]) -> String {
    let quoted: Vec<String> = answers.iter().map(|a| py_repr(a)).collect();
    format!("[{}]", quoted.join(", "))
}

fn node_base_text(question: &str, answers: &[&str]) -> String {
    format!("{question} Choose one of these answers: {}.", answer_list(answers))
}

fn py_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

fn history_block(history: &[(String, String)]) -> String {
    if history.is_empty() {
        return String::new();
    }
    let mut block = String::from("Previous decisions:\n");
    for (question, answer) in history {
        block.push_str(&format!("Q: {question} → A: {answer}\n"));
    }
    block.push('\n');
    block
}

fn described_line(id: ClassId, name: &str, description: &str) -> String {
    let description = description.trim().trim_end_matches('.');
    format!("{id}: {name} - {description}")
}

/// Descriptions of the classes still reachable below `node`, then the caption.
fn description_block(node: &TreeNode, classes: &ClassSet, context: DescriptionContext<'_>) -> String {
    let mut reachable = node.reachable_classes();
    reachable.sort_unstable();
    let lines: Vec<String> = reachable
        .into_iter()
        .filter_map(|id| {
            let description = context.descriptions.get(id)?;
            Some(described_line(id, classes.name(id).unwrap_or("?"), description))
        })
        .collect();
    let mut block = String::new();
    if !lines.is_empty() {
        block.push_str("Class descriptions:\n");
        block.push_str(&lines.join("\n"));
        block.push_str("\n\n");
    }
    let caption = context.caption.trim();
    if !caption.is_empty() {
        block.push_str(&format!("Image caption: {caption}\n\n"));
    }
    block
}

/// Joins `prefix` and `base`, dropping whole trailing lines of the prefix
/// when the result would exceed `budget` characters. The base is never cut.
fn fit_to_budget(prefix: String, base: String, budget: usize) -> RenderedPrompt {
    let total = prefix.chars().count() + base.chars().count();
    if total <= budget {
        return RenderedPrompt::text(prefix + &base);
    }
    if prefix.is_empty() {
        tracing::warn!(budget, length = total, "prompt exceeds length budget and has no context to drop");
        return RenderedPrompt::text(base);
    }
    let room = budget.saturating_sub(base.chars().count());
    let mut kept = String::new();
    let mut used = 0;
    for line in prefix.split_inclusive('\n') {
        let n = line.chars().count();
        if used + n > room {
            break;
        }
        kept.push_str(line);
        used += n;
    }
    let mut text = kept;
    if !text.is_empty() && !text.ends_with("\n\n") {
        text.push('\n');
    }
    text.push_str(&base);
    tracing::warn!(budget, original = total, kept = text.chars().count(), "prompt context truncated to fit budget");
    RenderedPrompt {
        text,
        attachments: Vec::new(),
        truncated: true,
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::tree::testing::two_leaf_tree;
    use crate::tree::ClassLabel;

    fn cifar_classes() -> ClassSet {
        let names = [
            "airplane",
            "automobile",
            "bird",
            "cat",
            "deer",
            "dog",
            "frog",
            "horse",
            "ship",
            "truck",
        ];
        ClassSet::new(names.iter().enumerate().map(|(i, n)| ClassLabel::new(i as u32, *n)).collect()).unwrap()
    }

    #[test]
    fn baseline_zero_shot() {
        let prompt =
            build_zero_shot_prompt(&PromptVariant::baseline(), &cifar_classes(), "object", None, DEFAULT_PROMPT_BUDGET)
                .unwrap();
        assert!(prompt
            .text
            .starts_with("Please classify the object in the given image. It should be only one of these classes:"));
        assert!(prompt.text.contains("0: airplane, 1: automobile, 2: bird"));
        assert!(prompt.text.ends_with("Respond with only the class ID."));
    }

    #[test]
    fn one_class_zero_shot() {
        let classes = ClassSet::new(vec![ClassLabel::new(0, "stop")]).unwrap();
        let prompt =
            build_zero_shot_prompt(&PromptVariant::baseline(), &classes, "sign", None, DEFAULT_PROMPT_BUDGET).unwrap();
        assert!(prompt.text.contains("classes: 0: stop. Respond"));
    }

    #[test]
    fn zero_shot_desc_requires_full_coverage() {
        let descriptions = ClassDescriptionSet::new(BTreeMap::from([(0, "a plane".to_string())]));
        let ctx = DescriptionContext {
            descriptions: &descriptions,
            caption: "sky",
        };
        let err = build_zero_shot_prompt(&PromptVariant::baseline(), &cifar_classes(), "object", Some(ctx), 8000)
            .unwrap_err();
        assert_eq!(err, PromptError::DescriptionsIncomplete((1..10).collect()));
    }

    #[test]
    fn node_prompt_template() {
        let node = TreeNode::new(
            "What's the sign's primary shape?",
            ["triangle", "circle", "diamond", "inverted-triangle", "octagon"]
                .iter()
                .enumerate()
                .map(|(i, a)| crate::tree::Branch::leaf(*a, i as u32))
                .collect(),
        );
        let prompt = build_node_prompt(&node, &NodeContext::default()).unwrap();
        assert_eq!(
            prompt.text,
            "What's the sign's primary shape? Choose one of these answers: ['triangle', 'circle', 'diamond', 'inverted-triangle', 'octagon']."
        );
    }

    #[test]
    fn python_quoting() {
        assert_eq!(answer_list(&["it's", "a\"b"]), r#"["it's", 'a"b']"#);
        assert_eq!(answer_list(&["it's \"x\""]), r#"['it\'s "x"']"#);
    }

    #[test]
    fn empty_augmentations_reduce_to_plain() {
        let tree = two_leaf_tree();
        let plain = build_node_prompt(&tree.root, &NodeContext::default()).unwrap();
        let descriptions = ClassDescriptionSet::default();
        let ctx = NodeContext {
            history: &[],
            descriptions: Some((
                &tree.classes,
                DescriptionContext {
                    descriptions: &descriptions,
                    caption: "",
                },
            )),
            budget: DEFAULT_PROMPT_BUDGET,
        };
        assert_eq!(build_node_prompt(&tree.root, &ctx).unwrap(), plain);
    }

    #[test]
    fn history_precedes_question() {
        let tree = two_leaf_tree();
        let history = vec![("Is it alive?".to_string(), "yes".to_string())];
        let ctx = NodeContext {
            history: &history,
            ..NodeContext::default()
        };
        let text = build_node_prompt(&tree.root, &ctx).unwrap().text;
        assert!(text.starts_with("Previous decisions:\nQ: Is it alive? → A: yes\n\nIs it a cat?"));
    }

    #[test]
    fn budget_cuts_context_not_question() {
        let tree = two_leaf_tree();
        let history: Vec<(String, String)> = (0..50).map(|i| (format!("question {i}?"), "yes".to_string())).collect();
        let ctx = NodeContext {
            history: &history,
            budget: 200,
            ..NodeContext::default()
        };
        let prompt = build_node_prompt(&tree.root, &ctx).unwrap();
        assert!(prompt.truncated);
        assert!(prompt.text.chars().count() <= 200);
        assert!(prompt.text.ends_with("Is it a cat? Choose one of these answers: ['yes', 'no']."));
    }

    #[test]
    fn caption_prompt_is_fixed() {
        let a = build_caption_prompt();
        assert_eq!(a, build_caption_prompt());
        assert!(!a.text.contains('{'));
    }

    #[test]
    fn variant_placeholders() {
        let err = PromptVariant::new("v9", "Classify the {task_noun}.").unwrap_err();
        assert!(matches!(err, PromptError::Placeholder { ref variant_id, placeholder: CLASS_LIST, count: 0 } if variant_id == "v9"));
        assert!(PromptVariant::new("v9", "{task_noun} {task_noun} {class_ids_and_names}").is_err());
        let text = r#"{"variant_id":"a","template":"{task_noun}: {class_ids_and_names}"}"#;
        assert_eq!(parse_prompt_variants(text, Path::new("v")).unwrap().len(), 1);
        let dup = format!("{text}\n{text}");
        assert_eq!(
            parse_prompt_variants(&dup, Path::new("v")).unwrap_err(),
            PromptError::DuplicateVariant("a".into())
        );
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
    }

    #[test]
    fn tree_generation_names_classes() {
        let prompt = build_tree_generation_prompt(&cifar_classes(), "").unwrap();
        for c in cifar_classes().iter() {
            assert!(prompt.text.contains(&format!("{}: {}\n", c.id, c.name)));
        }
        assert!(prompt.text.contains("No question may be repeated along a single root-to-leaf path"));
        assert!(prompt.text.contains("Each leaf names exactly one class"));
    }
}
