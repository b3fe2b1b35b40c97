//! Accuracy metrics, strategy comparison, knowledge verification and the
//! error-propagation model, all computed from transcripts.

mod compare;
mod metrics;
mod propagation;
mod report;
mod verify;

use thiserror::Error;

use crate::engine::{
    extract_answer, extract_class_id, Failure, FailureKind, TranscriptRecord, NO_BRANCH_DETAIL, NO_CLASS_DETAIL,
};
use crate::tree::{BranchTarget, ClassId, DecisionTree};

pub use compare::{compare_strategies, Comparison, ComparisonRow, Winner};
pub use metrics::{compute_metrics, first_divergence, ClassAccuracy, ConfusionPair, EvaluationReport};
pub use propagation::{analytic_leaf_accuracy, monte_carlo_leaf_accuracy, MonteCarloEstimate, PropagationModel, PropagationResult};
pub use report::{
    class_csv, comparison_csv, depth_csv, emit_report_data, verification_csv, ReportFormat, CLASS_CSV_HEADER,
};
pub use verify::{replay_verification, verify_knowledge, ClassVerification, VerificationReport, VerificationStep};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("tree: {0}")]
    Tree(String),
    #[error("model: {0}")]
    Model(String),
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
}

/// A fraction as a percentage with two decimals, e.g. `0.982 -> "98.20"`.
pub fn percent(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

/// Re-derives extracted answers, branches, predictions and failures from
/// the raw responses stored in `record`, ignoring the recorded outcome.
/// Records that failed on a backend error are returned unchanged.
pub fn replay_record(
    record: &TranscriptRecord,
    tree: Option<&DecisionTree>,
    class_ids: &[ClassId],
) -> Result<TranscriptRecord, AnalysisError> {
    if record.failure.as_ref().is_some_and(|f| f.kind != FailureKind::NoMatch) {
        return Ok(record.clone());
    }
    let mut out = record.clone();
    out.predicted_class_id = None;
    out.failure = None;
    if !record.strategy.is_tree() {
        let step = out
            .steps
            .first_mut()
            .ok_or_else(|| AnalysisError::Mismatch(format!("zero-shot record for {} has no step", record.image_ref)))?;
        match extract_class_id(&step.raw_response, class_ids) {
            Ok(id) => {
                step.extracted = Some(id.to_string());
                out.predicted_class_id = Some(id);
            }
            Err(_) => {
                step.extracted = None;
                out.failure = Some(nomatch(0, NO_CLASS_DETAIL));
            }
        }
        return Ok(out);
    }

    let tree = tree.ok_or_else(|| AnalysisError::Tree("tree records need a tree to replay".into()))?;
    let mut node = &tree.root;
    let n_steps = out.steps.len();
    for (i, step) in out.steps.iter_mut().enumerate() {
        if step.question.as_deref() != Some(node.question.as_str()) || step.depth != node.depth {
            return Err(AnalysisError::Mismatch(format!(
                "{}: step {i} asks {:?} but the tree asks {:?}",
                record.image_ref, step.question, node.question
            )));
        }
        let answers = node.answers();
        let extracted = extract_answer(&step.raw_response, &answers).ok().map(str::to_string);
        step.extracted = extracted.clone();
        step.chosen_branch = extracted.clone();
        let Some(answer) = extracted else {
            out.failure = Some(nomatch(node.depth, NO_BRANCH_DETAIL));
            if i + 1 != n_steps {
                return Err(AnalysisError::Mismatch(format!("{}: steps continue after a miss", record.image_ref)));
            }
            return Ok(out);
        };
        match &node.branch(&answer).expect("extracted from branch labels").target {
            BranchTarget::Leaf(id) => {
                if i + 1 != n_steps {
                    return Err(AnalysisError::Mismatch(format!("{}: steps continue past a leaf", record.image_ref)));
                }
                out.predicted_class_id = Some(*id);
                return Ok(out);
            }
            BranchTarget::Node(child) => node = child,
        }
    }
    Err(AnalysisError::Mismatch(format!("{}: trace ends before a leaf", record.image_ref)))
}

fn nomatch(depth: usize, detail: &str) -> Failure {
    Failure {
        kind: FailureKind::NoMatch,
        depth: Some(depth),
        detail: detail.into(),
    }
}
