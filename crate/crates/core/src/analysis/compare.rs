use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{AnalysisError, EvaluationReport};
use crate::tree::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    A,
    B,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub class_id: ClassId,
    pub class_name: String,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    pub delta: f64,
    pub winner: Winner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label_a: String,
    pub label_b: String,
    pub rows: Vec<ComparisonRow>,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_a - mean_b`.
    pub mean_gap: f64,
}

/// Per-class head-to-head of two reports over the same classes. Winners
/// are decided on exact fractions, so equal accuracies with different
/// denominators still tie.
pub fn compare_strategies(a: &EvaluationReport, b: &EvaluationReport) -> Result<Comparison, AnalysisError> {
    let ids_a: Vec<ClassId> = a.per_class.keys().copied().collect();
    let ids_b: Vec<ClassId> = b.per_class.keys().copied().collect();
    if ids_a != ids_b {
        let only_a: Vec<_> = ids_a.iter().filter(|c| !ids_b.contains(c)).collect();
        let only_b: Vec<_> = ids_b.iter().filter(|c| !ids_a.contains(c)).collect();
        return Err(AnalysisError::Mismatch(format!(
            "class sets differ: only in a {only_a:?}, only in b {only_b:?}"
        )));
    }
    let mut rows = Vec::with_capacity(ids_a.len());
    let (mut wins_a, mut wins_b, mut ties) = (0, 0, 0);
    for (ca, cb) in a.per_class.values().zip(b.per_class.values()) {
        let ord = (ca.correct as u128 * cb.n as u128).cmp(&(cb.correct as u128 * ca.n as u128));
        let winner = match ord {
            Ordering::Greater => {
                wins_a += 1;
                Winner::A
            }
            Ordering::Less => {
                wins_b += 1;
                Winner::B
            }
            Ordering::Equal => {
                ties += 1;
                Winner::Tie
            }
        };
        rows.push(ComparisonRow {
            class_id: ca.class_id,
            class_name: ca.class_name.clone(),
            accuracy_a: ca.accuracy,
            accuracy_b: cb.accuracy,
            delta: ca.accuracy - cb.accuracy,
            winner,
        });
    }
    Ok(Comparison {
        label_a: a.label(),
        label_b: b.label(),
        rows,
        wins_a,
        wins_b,
        ties,
        mean_a: a.mean_accuracy,
        mean_b: b.mean_accuracy,
        mean_gap: a.mean_accuracy - b.mean_accuracy,
    })
}
