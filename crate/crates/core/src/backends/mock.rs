use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, ChatRequest, ChatResponse};
use crate::datasets::DatasetManifest;
use crate::prompting::answer_list;
use crate::tree::DecisionTree;

/// Answers `response` when every condition holds. Unset conditions match
/// anything.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    /// Request purpose: `caption`, `zero_shot`, `node` or `verify`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    /// Substrings that must all occur in the prompt text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt_contains: Vec<String>,
    pub response: String,
}

impl MockRule {
    pub fn reply(response: impl Into<String>) -> Self {
        Self {
            image_ref: None,
            kind: None,
            prompt_contains: Vec::new(),
            response: response.into(),
        }
    }

    pub fn for_image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }

    pub fn for_kind(mut self, kind: &str) -> Self {
        self.kind = Some(kind.to_string());
        self
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.prompt_contains.push(needle.into());
        self
    }

    fn matches(&self, request: &ChatRequest) -> bool {
        if let Some(kind) = &self.kind {
            if kind != request.purpose.kind() {
                return false;
            }
        }
        self.prompt_contains.iter().all(|n| request.prompt.text.contains(n.as_str()))
    }
}

/// Ordered rule list; the first matching rule answers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    /// Reply used when no rule matches; without one, unmatched requests fail.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_response: Option<String>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Script that answers every request truthfully for the images in
    /// `manifest`: the true class id for zero-shot prompts, the branch on the
    /// true class's path for node prompts, and a neutral caption.
    pub fn perfect(manifest: &DatasetManifest, tree: Option<&DecisionTree>) -> Self {
        let mut rules = Vec::new();
        let paths = tree.map(|t| t.class_paths()).unwrap_or_default();
        for record in &manifest.records {
            let image = &record.image_ref;
            rules.push(
                MockRule::reply(format!("A photo of a single {}.", manifest.task_noun))
                    .for_image(image)
                    .for_kind("caption"),
            );
            rules.push(MockRule::reply(record.class_id.to_string()).for_image(image).for_kind("zero_shot"));
            if let (Some(tree), Some(path)) = (tree, paths.get(&record.class_id)) {
                for (depth, (question, answer)) in path.steps.iter().enumerate() {
                    let node = match tree.resolve(&path.answers()[..depth]) {
                        Some(crate::tree::Resolved::Node(n)) => n,
                        _ => continue,
                    };
                    rules.push(
                        MockRule::reply(answer.clone())
                            .for_image(image)
                            .for_kind("node")
                            .containing(node_marker(question, &node.answers())),
                    );
                }
            }
        }
        Self {
            rules,
            default_response: None,
        }
    }

    /// Script that passes knowledge verification on every class of `tree`.
    pub fn perfect_verification(tree: &DecisionTree) -> Self {
        let mut rules = Vec::new();
        for (class_id, path) in tree.class_paths() {
            let name = tree.classes.name(class_id).unwrap_or_default();
            let answers = path.answers();
            for (depth, (question, answer)) in path.steps.iter().enumerate() {
                if let Some(crate::tree::Resolved::Node(node)) = tree.resolve(&answers[..depth]) {
                    rules.push(
                        MockRule::reply(answer.clone())
                            .for_kind("verify")
                            .containing(format!("The image shows the class \"{name}\"."))
                            .containing(node_marker(question, &node.answers())),
                    );
                }
            }
        }
        Self {
            rules,
            default_response: None,
        }
    }
}

fn node_marker(question: &str, answers: &[&str]) -> String {
    format!("{question} Choose one of these answers: {}.", answer_list(answers))
}

/// Deterministic backend driven by a [`MockScript`].
pub struct ScriptedMock {
    id: String,
    script: MockScript,
    by_image: HashMap<String, Vec<usize>>,
    global: Vec<usize>,
    calls: AtomicUsize,
}

impl ScriptedMock {
    pub fn new(id: impl Into<String>, script: MockScript) -> Self {
        let mut by_image: HashMap<String, Vec<usize>> = HashMap::new();
        let mut global = Vec::new();
        for (i, rule) in script.rules.iter().enumerate() {
            match &rule.image_ref {
                Some(image) => by_image.entry(image.clone()).or_default().push(i),
                None => global.push(i),
            }
        }
        Self {
            id: id.into(),
            script,
            by_image,
            global,
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of requests answered so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn find(&self, request: &ChatRequest) -> Option<&MockRule> {
        let specific: &[usize] = request
            .image_ref()
            .and_then(|img| self.by_image.get(img))
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        // Walk both candidate lists in script order.
        let (mut i, mut j) = (0, 0);
        while i < specific.len() || j < self.global.len() {
            let take_specific = j >= self.global.len() || (i < specific.len() && specific[i] < self.global[j]);
            let idx = if take_specific {
                i += 1;
                specific[i - 1]
            } else {
                j += 1;
                self.global[j - 1]
            };
            let rule = &self.script.rules[idx];
            if rule.matches(request) {
                return Some(rule);
            }
        }
        None
    }
}

impl Backend for ScriptedMock {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let text = match self.find(request) {
            Some(rule) => rule.response.clone(),
            None => self.script.default_response.clone().ok_or_else(|| BackendError::Script {
                key: self.key(request),
                detail: format!(
                    "no mock rule matches {} request for image {:?}",
                    request.purpose.kind(),
                    request.image_ref()
                ),
            })?,
        };
        Ok(ChatResponse {
            text,
            latency_ms: 0,
            backend_id: self.id.clone(),
            cached: false,
        })
    }
}
