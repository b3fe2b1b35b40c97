use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::backends::{Backend, ChatRequest, Purpose};
use crate::engine::extract_answer;
use crate::prompting::build_verification_prompt;
use crate::tree::{ClassId, DecisionTree, Resolved, TreeNode};

/// Placeholder written into the history when a reply named no answer.
const NO_ANSWER: &str = "(no answer)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationStep {
    pub question: String,
    pub truth_answer: String,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted: Option<String>,
}

impl VerificationStep {
    pub fn correct(&self) -> bool {
        self.extracted.as_deref() == Some(self.truth_answer.as_str())
    }
}

/// Result of probing one class's path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVerification {
    pub class_id: ClassId,
    pub class_name: String,
    pub questions_total: usize,
    pub questions_correct: usize,
    pub accuracy: f64,
    pub steps: Vec<VerificationStep>,
    /// Backend error that cut the probe short; unanswered questions count
    /// as wrong.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ClassVerification {
    fn finish(mut self) -> Self {
        self.questions_correct = self.steps.iter().filter(|s| s.correct()).count();
        self.accuracy = if self.questions_total == 0 {
            0.0
        } else {
            self.questions_correct as f64 / self.questions_total as f64
        };
        self
    }

    pub fn is_perfect(&self) -> bool {
        self.questions_total > 0 && self.questions_correct == self.questions_total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub per_class: BTreeMap<ClassId, ClassVerification>,
    /// Unweighted mean of the per-class accuracies.
    pub overall_mean: f64,
    pub perfect_class_count: usize,
    pub class_count: usize,
}

impl VerificationReport {
    pub fn from_classes(classes: impl IntoIterator<Item = ClassVerification>) -> Self {
        let per_class: BTreeMap<ClassId, ClassVerification> = classes.into_iter().map(|c| (c.class_id, c)).collect();
        let class_count = per_class.len();
        let overall_mean = if class_count == 0 {
            0.0
        } else {
            per_class.values().map(|c| c.accuracy).sum::<f64>() / class_count as f64
        };
        Self {
            perfect_class_count: per_class.values().filter(|c| c.is_perfect()).count(),
            per_class,
            overall_mean,
            class_count,
        }
    }

    pub fn summary_line(&self) -> String {
        format!(
            "overall_mean={}% perfect={}/{}",
            super::percent(self.overall_mean),
            self.perfect_class_count,
            self.class_count
        )
    }
}

fn path_nodes(tree: &DecisionTree, class_id: ClassId) -> Result<Vec<(&TreeNode, String)>, AnalysisError> {
    let path = tree.path_for_class(class_id).map_err(|e| AnalysisError::Tree(e.to_string()))?;
    let answers = path.answers();
    let mut nodes = Vec::with_capacity(answers.len());
    for (depth, answer) in answers.iter().enumerate() {
        match tree.resolve(&answers[..depth]) {
            Some(Resolved::Node(node)) => nodes.push((node, answer.clone())),
            _ => return Err(AnalysisError::Tree(format!("path for class {class_id} does not resolve"))),
        }
    }
    Ok(nodes)
}

/// Asks every question on `class_id`'s path, telling the model the true
/// class and showing its own earlier answers.
pub fn verify_knowledge(
    tree: &DecisionTree,
    class_id: ClassId,
    backend: &dyn Backend,
    model_id: &str,
) -> Result<ClassVerification, AnalysisError> {
    let name = tree
        .classes
        .name(class_id)
        .ok_or_else(|| AnalysisError::Tree(format!("unknown class id {class_id}")))?
        .to_string();
    let nodes = path_nodes(tree, class_id)?;
    let mut record = ClassVerification {
        class_id,
        class_name: name.clone(),
        questions_total: nodes.len(),
        questions_correct: 0,
        accuracy: 0.0,
        steps: Vec::new(),
        error: None,
    };
    let mut history: Vec<(String, String)> = Vec::new();
    let mut path: Vec<String> = Vec::new();
    for (node, truth) in nodes {
        let prompt = build_verification_prompt(&name, node, &history).map_err(|e| AnalysisError::Tree(e.to_string()))?;
        let request = ChatRequest::new(prompt, model_id, 0.0, 0, Purpose::Verify { class_id, path: path.clone() });
        let response = match backend.send(&request) {
            Ok(r) => r,
            Err(e) => {
                record.error = Some(e.to_string());
                break;
            }
        };
        let answers = node.answers();
        let extracted = extract_answer(&response.text, &answers).ok().map(str::to_string);
        history.push((node.question.clone(), extracted.clone().unwrap_or_else(|| NO_ANSWER.to_string())));
        record.steps.push(VerificationStep {
            question: node.question.clone(),
            truth_answer: truth.clone(),
            raw_response: response.text,
            extracted,
        });
        path.push(truth);
    }
    Ok(record.finish())
}

/// Recomputes a verification record from its raw responses, checking the
/// recorded questions against `tree`.
pub fn replay_verification(tree: &DecisionTree, recorded: &ClassVerification) -> Result<ClassVerification, AnalysisError> {
    let nodes = path_nodes(tree, recorded.class_id)?;
    if recorded.steps.len() > nodes.len() {
        return Err(AnalysisError::Mismatch(format!(
            "class {} has {} recorded steps but a path of {}",
            recorded.class_id,
            recorded.steps.len(),
            nodes.len()
        )));
    }
    let mut steps = Vec::with_capacity(recorded.steps.len());
    for (step, (node, truth)) in recorded.steps.iter().zip(&nodes) {
        if step.question != node.question {
            return Err(AnalysisError::Mismatch(format!(
                "class {}: recorded question {:?} is not on the path",
                recorded.class_id, step.question
            )));
        }
        let answers = node.answers();
        steps.push(VerificationStep {
            question: step.question.clone(),
            truth_answer: truth.clone(),
            raw_response: step.raw_response.clone(),
            extracted: extract_answer(&step.raw_response, &answers).ok().map(str::to_string),
        });
    }
    Ok(ClassVerification {
        class_id: recorded.class_id,
        class_name: tree.classes.name(recorded.class_id).unwrap_or_default().to_string(),
        questions_total: nodes.len(),
        questions_correct: 0,
        accuracy: 0.0,
        steps,
        error: recorded.error.clone(),
    }
    .finish())
}
