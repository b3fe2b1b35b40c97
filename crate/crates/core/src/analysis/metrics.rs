use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::datasets::DatasetManifest;
use crate::engine::{FailureKind, TranscriptRecord};
use crate::prompting::Strategy;
use crate::tree::{ClassId, ClassSet, DecisionTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_id: ClassId,
    pub class_name: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionPair {
    pub truth: ClassId,
    pub predicted: ClassId,
    pub count: usize,
}

/// Metrics for one (strategy, variant, temperature) group, pooled over
/// run indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub strategy: Strategy,
    pub variant_id: String,
    pub temperature: f64,
    pub runs: Vec<u32>,
    /// Classified records in the group (images times runs).
    pub n_images: usize,
    pub n_correct: usize,
    /// Headline figure: unweighted mean of per-class accuracies over the
    /// classes present in the group.
    pub mean_accuracy: f64,
    /// Correct records divided by all records.
    pub image_accuracy: f64,
    pub per_class: BTreeMap<ClassId, ClassAccuracy>,
    /// Depth of the first step that left the true class's path, for
    /// incorrect tree records.
    pub per_depth_first_error: BTreeMap<usize, usize>,
    pub nomatch_count: usize,
    pub backend_failure_count: usize,
    /// Misclassifications by (truth, predicted), most frequent first.
    pub confusion_pairs: Vec<ConfusionPair>,
}

impl EvaluationReport {
    pub fn label(&self) -> String {
        format!("{}/{}/t={}", self.strategy, self.variant_id, self.temperature)
    }
}

#[derive(Debug, Clone, PartialEq, PartialOrd)]
struct GroupKey {
    strategy: Strategy,
    variant_id: String,
    temperature: f64,
}

/// Splits records into (strategy, variant, temperature) groups and
/// computes one report per group, ordered by strategy, variant and
/// temperature.
pub fn compute_metrics(
    records: &[TranscriptRecord],
    manifest: &DatasetManifest,
    tree: Option<&DecisionTree>,
) -> Result<Vec<EvaluationReport>, AnalysisError> {
    let truth = manifest.truth_index();
    for record in records {
        match truth.get(&record.image_ref) {
            None => return Err(AnalysisError::Mismatch(format!("image {:?} is not in the manifest", record.image_ref))),
            Some(&c) if c != record.truth_class_id => {
                return Err(AnalysisError::Mismatch(format!(
                    "image {:?} has class {c} in the manifest but {} in the transcript",
                    record.image_ref, record.truth_class_id
                )))
            }
            _ => {}
        }
    }
    let mut groups: Vec<(GroupKey, Vec<&TranscriptRecord>)> = Vec::new();
    for record in records {
        let key = GroupKey {
            strategy: record.strategy,
            variant_id: record.variant_id.clone(),
            temperature: record.temperature,
        };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(record),
            None => groups.push((key, vec![record])),
        }
    }
    groups.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let truth_paths: HashMap<ClassId, Vec<String>> = tree
        .map(|t| t.class_paths().into_iter().map(|(c, p)| (c, p.answers())).collect())
        .unwrap_or_default();
    Ok(groups
        .into_iter()
        .map(|(key, members)| group_report(key, &members, &manifest.classes, &truth_paths))
        .collect())
}

fn group_report(
    key: GroupKey,
    records: &[&TranscriptRecord],
    classes: &ClassSet,
    truth_paths: &HashMap<ClassId, Vec<String>>,
) -> EvaluationReport {
    let mut per_class: BTreeMap<ClassId, ClassAccuracy> = BTreeMap::new();
    let mut first_error: BTreeMap<usize, usize> = BTreeMap::new();
    let mut confusion: BTreeMap<(ClassId, ClassId), usize> = BTreeMap::new();
    let mut runs: Vec<u32> = Vec::new();
    let (mut n_correct, mut nomatch, mut backend) = (0, 0, 0);

    for record in records {
        if !runs.contains(&record.run_index) {
            runs.push(record.run_index);
        }
        let entry = per_class.entry(record.truth_class_id).or_insert_with(|| ClassAccuracy {
            class_id: record.truth_class_id,
            class_name: classes.name(record.truth_class_id).unwrap_or_default().to_string(),
            n: 0,
            correct: 0,
            accuracy: 0.0,
        });
        entry.n += 1;
        if record.correct() {
            entry.correct += 1;
            n_correct += 1;
            continue;
        }
        match record.failure.as_ref().map(|f| f.kind) {
            Some(FailureKind::NoMatch) => nomatch += 1,
            Some(FailureKind::Backend) => backend += 1,
            _ => {}
        }
        if let Some(predicted) = record.predicted_class_id {
            *confusion.entry((record.truth_class_id, predicted)).or_insert(0) += 1;
        }
        if record.strategy.is_tree() {
            if let Some(depth) = first_divergence(record, truth_paths.get(&record.truth_class_id)) {
                *first_error.entry(depth).or_insert(0) += 1;
            }
        }
    }
    for c in per_class.values_mut() {
        c.accuracy = c.correct as f64 / c.n as f64;
    }
    runs.sort_unstable();
    let mut confusion_pairs: Vec<ConfusionPair> = confusion
        .into_iter()
        .map(|((truth, predicted), count)| ConfusionPair { truth, predicted, count })
        .collect();
    confusion_pairs.sort_by(|a, b| b.count.cmp(&a.count).then(a.truth.cmp(&b.truth)).then(a.predicted.cmp(&b.predicted)));
    let n = records.len();
    let mean_accuracy = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().map(|c| c.accuracy).sum::<f64>() / per_class.len() as f64
    };
    EvaluationReport {
        strategy: key.strategy,
        variant_id: key.variant_id,
        temperature: key.temperature,
        runs,
        n_images: n,
        n_correct,
        mean_accuracy,
        image_accuracy: if n == 0 { 0.0 } else { n_correct as f64 / n as f64 },
        per_class,
        per_depth_first_error: first_error,
        nomatch_count: nomatch,
        backend_failure_count: backend,
        confusion_pairs,
    }
}

/// Depth of the first step whose chosen branch differs from the true path.
/// A step with no usable answer counts as leaving the path; backend
/// failures do not.
pub fn first_divergence(record: &TranscriptRecord, truth_path: Option<&Vec<String>>) -> Option<usize> {
    let truth_path = truth_path?;
    for (i, step) in record.steps.iter().enumerate() {
        match (&step.chosen_branch, truth_path.get(i)) {
            (Some(chosen), Some(truth)) if chosen == truth => continue,
            (None, _) if record.failure.as_ref().is_some_and(|f| f.kind == FailureKind::Backend) => return None,
            _ => return Some(step.depth),
        }
    }
    None
}
