//! Classification runs: single-shot zero-shot calls and root-to-leaf tree
//! traversal, answer extraction, and line-delimited transcripts.

mod batch;
mod extract;
mod transcript;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use thiserror::Error;

use crate::backends::{Backend, ChatRequest, Purpose};
use crate::datasets::{ClassDescriptionSet, DatasetManifest, ImageRecord};
use crate::prompting::{
    build_caption_prompt, build_node_prompt, build_zero_shot_prompt, answer_list, DescriptionContext, NodeContext,
    PromptVariant, RenderedPrompt, Strategy, DEFAULT_PROMPT_BUDGET,
};
use crate::tree::{BranchTarget, ClassId, DecisionTree};

pub use batch::{run_batch, BatchSummary, RunConfig};
pub use extract::{extract_answer, extract_class_id, ExtractError};
pub(crate) use transcript::{NO_BRANCH_DETAIL, NO_CLASS_DETAIL};
pub use transcript::{
    parse_transcript, prompt_digest, read_transcript, write_transcript, CellKey, Failure, FailureKind, Step,
    TranscriptRecord, TREE_VARIANT,
};

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("transcript {path}: {message}")]
    Transcript { path: String, message: String },
}

/// Settings shared by every classification in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineSettings {
    pub model_id: String,
    pub prompt_budget: usize,
    /// Ask a node once more when its reply names no answer.
    pub reask_on_nomatch: bool,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            model_id: "model".to_string(),
            prompt_budget: DEFAULT_PROMPT_BUDGET,
            reask_on_nomatch: false,
        }
    }
}

type CaptionSlot = Arc<OnceLock<Result<String, String>>>;

/// Runs classifications of one dataset against one backend.
///
/// Captions for the description strategies are requested once per image
/// (temperature 0, run 0) and shared by every strategy, temperature and
/// run.
pub struct Engine<'a> {
    backend: &'a dyn Backend,
    manifest: &'a DatasetManifest,
    tree: Option<&'a DecisionTree>,
    descriptions: Option<&'a ClassDescriptionSet>,
    settings: EngineSettings,
    class_ids: Vec<ClassId>,
    captions: Mutex<HashMap<String, CaptionSlot>>,
}

impl<'a> Engine<'a> {
    pub fn new(backend: &'a dyn Backend, manifest: &'a DatasetManifest, settings: EngineSettings) -> Self {
        Self {
            backend,
            manifest,
            tree: None,
            descriptions: None,
            class_ids: manifest.classes.ids().collect(),
            settings,
            captions: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_tree(mut self, tree: &'a DecisionTree) -> Self {
        self.tree = Some(tree);
        self
    }

    pub fn with_descriptions(mut self, descriptions: &'a ClassDescriptionSet) -> Self {
        self.descriptions = Some(descriptions);
        self
    }

    /// Checks that every strategy has what it needs before any call is made.
    pub fn check(&self, strategies: &[Strategy]) -> Result<(), EngineError> {
        for strategy in strategies {
            if strategy.is_tree() {
                let tree = self
                    .tree
                    .ok_or_else(|| EngineError::Config(format!("strategy {strategy} needs a tree")))?;
                if let Some(missing) = self.manifest.classes.ids().find(|id| !tree.classes.contains(*id)) {
                    return Err(EngineError::Config(format!(
                        "manifest class {missing} is not in tree {:?}",
                        tree.name
                    )));
                }
            }
            if strategy.uses_descriptions() {
                let descriptions = self
                    .descriptions
                    .ok_or_else(|| EngineError::Config(format!("strategy {strategy} needs class descriptions")))?;
                if !descriptions.covers(&self.manifest.classes) {
                    return Err(EngineError::Config(format!(
                        "strategy {strategy} needs a description for every class"
                    )));
                }
            }
        }
        Ok(())
    }

    fn caption(&self, image_ref: &str) -> Result<String, String> {
        let slot = {
            let mut map = self.captions.lock().expect("caption map");
            Arc::clone(map.entry(image_ref.to_string()).or_default())
        };
        slot.get_or_init(|| {
            let request = ChatRequest::new(
                build_caption_prompt().with_image(image_ref),
                &self.settings.model_id,
                0.0,
                0,
                Purpose::Caption,
            );
            self.backend
                .send(&request)
                .map(|r| r.text.trim().to_string())
                .map_err(|e| e.to_string())
        })
        .clone()
    }

    fn blank_record(&self, image: &ImageRecord, strategy: Strategy, variant_id: &str, temperature: f64, run_index: u32) -> TranscriptRecord {
        TranscriptRecord {
            image_ref: image.image_ref.clone(),
            truth_class_id: image.class_id,
            strategy,
            variant_id: variant_id.to_string(),
            temperature,
            run_index,
            caption: None,
            steps: Vec::new(),
            predicted_class_id: None,
            failure: None,
        }
    }

    /// One zero-shot classification (plus a caption request for the
    /// description strategy).
    pub fn classify_zero_shot(
        &self,
        image: &ImageRecord,
        strategy: Strategy,
        variant: &PromptVariant,
        temperature: f64,
        run_index: u32,
    ) -> TranscriptRecord {
        let mut record = self.blank_record(image, strategy, &variant.variant_id, temperature, run_index);
        if strategy.is_tree() {
            record.failure = Some(prompt_failure(None, format!("{strategy} is not a zero-shot strategy")));
            return record;
        }
        let context = match self.description_context(&mut record, strategy) {
            Ok(c) => c,
            Err(()) => return record,
        };
        let built = build_zero_shot_prompt(
            variant,
            &self.manifest.classes,
            &self.manifest.task_noun,
            context.as_ref().map(|(d, c)| DescriptionContext {
                descriptions: d,
                caption: c,
            }),
            self.settings.prompt_budget,
        );
        let prompt = match built {
            Ok(p) => p.with_image(&image.image_ref),
            Err(e) => {
                record.failure = Some(prompt_failure(Some(0), e.to_string()));
                return record;
            }
        };
        let request = ChatRequest::new(prompt, &self.settings.model_id, temperature, run_index, Purpose::ZeroShot);
        let response = match self.backend.send(&request) {
            Ok(r) => r,
            Err(e) => {
                record.failure = Some(backend_failure(Some(0), e.to_string()));
                return record;
            }
        };
        let mut step = Step {
            depth: 0,
            question: None,
            prompt_digest: prompt_digest(&request.prompt.text),
            raw_response: response.text,
            extracted: None,
            chosen_branch: None,
            reasked: false,
        };
        match extract_class_id(&step.raw_response, &self.class_ids) {
            Ok(id) => {
                step.extracted = Some(id.to_string());
                record.predicted_class_id = Some(id);
            }
            Err(_) => {
                record.failure = Some(Failure {
                    kind: FailureKind::NoMatch,
                    depth: Some(0),
                    detail: transcript::NO_CLASS_DETAIL.into(),
                })
            }
        }
        record.steps.push(step);
        record
    }

    /// Walks the tree from the root, one backend call per node, until a
    /// leaf is reached or a reply cannot be mapped to a branch.
    pub fn classify_tree(&self, image: &ImageRecord, strategy: Strategy, temperature: f64, run_index: u32) -> TranscriptRecord {
        let mut record = self.blank_record(image, strategy, TREE_VARIANT, temperature, run_index);
        let Some(tree) = self.tree else {
            record.failure = Some(prompt_failure(None, "no tree configured".into()));
            return record;
        };
        if !strategy.is_tree() {
            record.failure = Some(prompt_failure(None, format!("{strategy} is not a tree strategy")));
            return record;
        }
        let context = match self.description_context(&mut record, strategy) {
            Ok(c) => c,
            Err(()) => return record,
        };
        let mut node = &tree.root;
        let mut path: Vec<String> = Vec::new();
        let mut history: Vec<(String, String)> = Vec::new();
        loop {
            let ctx = NodeContext {
                history: if strategy == Strategy::TreeHistory { &history } else { &[] },
                descriptions: context.as_ref().map(|(d, c)| {
                    (
                        &tree.classes,
                        DescriptionContext {
                            descriptions: d,
                            caption: c.as_str(),
                        },
                    )
                }),
                budget: self.settings.prompt_budget,
            };
            let prompt = match build_node_prompt(node, &ctx) {
                Ok(p) => p.with_image(&image.image_ref),
                Err(e) => {
                    record.failure = Some(prompt_failure(Some(node.depth), e.to_string()));
                    return record;
                }
            };
            let purpose = Purpose::Node { path: path.clone() };
            let answers = node.answers();
            let step = match self.ask(prompt, &answers, temperature, run_index, purpose, node.depth, &node.question) {
                Ok(step) => step,
                Err(failure) => {
                    record.failure = Some(failure);
                    return record;
                }
            };
            let chosen = step.chosen_branch.clone();
            record.steps.push(step);
            let Some(answer) = chosen else {
                record.failure = Some(Failure {
                    kind: FailureKind::NoMatch,
                    depth: Some(node.depth),
                    detail: transcript::NO_BRANCH_DETAIL.into(),
                });
                return record;
            };
            let branch = node.branch(&answer).expect("extracted answer is a branch label");
            history.push((node.question.clone(), answer.clone()));
            path.push(answer);
            match &branch.target {
                BranchTarget::Leaf(id) => {
                    record.predicted_class_id = Some(*id);
                    return record;
                }
                BranchTarget::Node(child) => node = child,
            }
        }
    }

    /// Sends one node prompt and maps the reply onto `answers`. Returns the
    /// step with `chosen_branch` unset when nothing matched.
    #[allow(clippy::too_many_arguments)]
    fn ask(
        &self,
        prompt: RenderedPrompt,
        answers: &[&str],
        temperature: f64,
        run_index: u32,
        purpose: Purpose,
        depth: usize,
        question: &str,
    ) -> Result<Step, Failure> {
        let mut request = ChatRequest::new(prompt, &self.settings.model_id, temperature, run_index, purpose);
        let mut response = self
            .backend
            .send(&request)
            .map_err(|e| backend_failure(Some(depth), e.to_string()))?;
        let mut reasked = false;
        if extract_answer(&response.text, answers).is_err() && self.settings.reask_on_nomatch {
            request.prompt.text = format!(
                "{}\nReply with exactly one of {}.",
                request.prompt.text,
                answer_list(answers)
            );
            response = self
                .backend
                .send(&request)
                .map_err(|e| backend_failure(Some(depth), e.to_string()))?;
            reasked = true;
        }
        let extracted = extract_answer(&response.text, answers).ok().map(str::to_string);
        Ok(Step {
            depth,
            question: Some(question.to_string()),
            prompt_digest: prompt_digest(&request.prompt.text),
            raw_response: response.text,
            chosen_branch: extracted.clone(),
            extracted,
            reasked,
        })
    }

    /// Descriptions and caption for the description strategies. On caption
    /// failure the record's failure is set and `Err(())` returned.
    #[allow(clippy::result_unit_err)]
    fn description_context(
        &self,
        record: &mut TranscriptRecord,
        strategy: Strategy,
    ) -> Result<Option<(&'a ClassDescriptionSet, String)>, ()> {
        if !strategy.uses_descriptions() {
            return Ok(None);
        }
        let Some(descriptions) = self.descriptions else {
            record.failure = Some(prompt_failure(None, format!("{strategy} needs class descriptions")));
            return Err(());
        };
        match self.caption(&record.image_ref) {
            Ok(caption) => {
                record.caption = Some(caption.clone());
                Ok(Some((descriptions, caption)))
            }
            Err(detail) => {
                record.failure = Some(backend_failure(None, format!("caption: {detail}")));
                Err(())
            }
        }
    }
}

fn backend_failure(depth: Option<usize>, detail: String) -> Failure {
    Failure {
        kind: FailureKind::Backend,
        depth,
        detail,
    }
}

fn prompt_failure(depth: Option<usize>, detail: String) -> Failure {
    Failure {
        kind: FailureKind::Prompt,
        depth,
        detail,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{MockRule, MockScript, ScriptedMock};
    use crate::datasets::ImageRecord;
    use crate::tree::testing::two_leaf_tree;

    fn manifest() -> DatasetManifest {
        let tree = two_leaf_tree();
        DatasetManifest::new(
            "pets",
            "animal",
            tree.classes.clone(),
            vec![ImageRecord::new("cat.png", 0), ImageRecord::new("dog.png", 1)],
        )
    }

    #[test]
    fn banana_is_a_nomatch() {
        let m = manifest();
        let mock = ScriptedMock::new(
            "mock",
            MockScript {
                rules: vec![MockRule::reply("banana")],
                default_response: None,
            },
        );
        let engine = Engine::new(&mock, &m, EngineSettings::default());
        let record = engine.classify_zero_shot(&m.records[0], Strategy::ZeroShot, &PromptVariant::baseline(), 0.0, 0);
        assert_eq!(record.failure.unwrap().kind, FailureKind::NoMatch);
        assert!(record.predicted_class_id.is_none());
        assert_eq!(record.steps[0].raw_response, "banana");
    }

    #[test]
    fn reask_recovers_from_nomatch() {
        let m = manifest();
        let tree = two_leaf_tree();
        let mock = ScriptedMock::new(
            "mock",
            MockScript {
                rules: vec![MockRule::reply("no").containing("Reply with exactly one of")],
                default_response: Some("hmm".into()),
            },
        );
        let strict = Engine::new(&mock, &m, EngineSettings::default()).with_tree(&tree);
        let record = strict.classify_tree(&m.records[1], Strategy::Tree, 0.0, 0);
        assert_eq!(record.failure.unwrap().depth, Some(0));

        let settings = EngineSettings {
            reask_on_nomatch: true,
            ..EngineSettings::default()
        };
        let lenient = Engine::new(&mock, &m, settings).with_tree(&tree);
        let record = lenient.classify_tree(&m.records[1], Strategy::Tree, 0.0, 0);
        assert!(record.correct());
        assert!(record.steps[0].reasked);
    }

    #[test]
    fn caption_requested_once_per_image() {
        let m = manifest();
        let tree = two_leaf_tree();
        let descriptions = ClassDescriptionSet::new([(0, "feline".to_string()), (1, "canine".to_string())].into());
        let mock = ScriptedMock::new("mock", MockScript::perfect(&m, Some(&tree)));
        let engine = Engine::new(&mock, &m, EngineSettings::default())
            .with_tree(&tree)
            .with_descriptions(&descriptions);
        for run in 0..3 {
            let a = engine.classify_tree(&m.records[0], Strategy::TreeDesc, 0.7, run);
            assert!(a.correct());
            let b = engine.classify_zero_shot(&m.records[0], Strategy::ZeroShotDesc, &PromptVariant::baseline(), 0.7, run);
            assert!(b.correct());
            assert_eq!(a.caption, b.caption);
        }
        // one caption + 3 tree calls + 3 zero-shot calls
        assert_eq!(mock.calls(), 7);
    }

    #[test]
    fn missing_tree_is_config_error() {
        let m = manifest();
        let mock = ScriptedMock::new("mock", MockScript::default());
        let engine = Engine::new(&mock, &m, EngineSettings::default());
        assert!(engine.check(&[Strategy::ZeroShot]).is_ok());
        assert!(engine.check(&[Strategy::TreeHistory]).is_err());
        assert!(engine.check(&[Strategy::ZeroShotDesc]).is_err());
    }
}
