use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::prompting::Strategy;
use crate::tree::ClassId;

/// Variant id recorded for tree strategies, which have no prompt variants.
pub const TREE_VARIANT: &str = "tree";

pub(crate) const NO_BRANCH_DETAIL: &str = "response names none of the node's answers";
pub(crate) const NO_CLASS_DETAIL: &str = "response names no valid class id";

/// One backend exchange within a classification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    /// Node depth for tree strategies; 0 for the single zero-shot call.
    pub depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    /// SHA-256 of the rendered prompt text.
    pub prompt_digest: String,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_branch: Option<String>,
    /// Set when the first response had no candidate and the node was asked
    /// a second time; `raw_response` then holds the second reply.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub reasked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    NoMatch,
    Backend,
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub kind: FailureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    pub detail: String,
}

/// Everything recorded about classifying one image once. Field order is
/// the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub image_ref: String,
    pub truth_class_id: ClassId,
    pub strategy: Strategy,
    pub variant_id: String,
    pub temperature: f64,
    pub run_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    pub steps: Vec<Step>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_class_id: Option<ClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
}

impl TranscriptRecord {
    pub fn correct(&self) -> bool {
        self.predicted_class_id == Some(self.truth_class_id)
    }

    pub fn cell(&self) -> CellKey {
        CellKey {
            image_ref: self.image_ref.clone(),
            strategy: self.strategy,
            variant_id: self.variant_id.clone(),
            temperature_bits: normalized_bits(self.temperature),
            run_index: self.run_index,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("transcript record serializes")
    }

    /// Answers chosen at each step, in order.
    pub fn chosen_path(&self) -> Vec<String> {
        self.steps.iter().filter_map(|s| s.chosen_branch.clone()).collect()
    }
}

/// Identity of one cell of the evaluation matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub image_ref: String,
    pub strategy: Strategy,
    pub variant_id: String,
    pub temperature_bits: u64,
    pub run_index: u32,
}

pub(crate) fn normalized_bits(t: f64) -> u64 {
    if t == 0.0 {
        0.0f64.to_bits()
    } else {
        t.to_bits()
    }
}

pub fn prompt_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Parses transcript text. Lines that fail to parse are reported by line
/// number in the second element instead of aborting.
pub fn parse_transcript(text: &str) -> (Vec<TranscriptRecord>, Vec<(usize, String)>) {
    let mut records = Vec::new();
    let mut bad = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => records.push(r),
            Err(e) => bad.push((idx + 1, e.to_string())),
        }
    }
    (records, bad)
}

/// Reads a transcript file, failing on any unparseable line.
pub fn read_transcript(path: &Path) -> io::Result<Vec<TranscriptRecord>> {
    let text = fs::read_to_string(path)?;
    let (records, bad) = parse_transcript(&text);
    if let Some((line, message)) = bad.first() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{}:{line}: {message}", path.display()),
        ));
    }
    Ok(records)
}

/// Writes records one per line via a temporary file and rename.
pub fn write_transcript(path: &Path, records: &[TranscriptRecord]) -> io::Result<()> {
    let mut body = String::new();
    for record in records {
        body.push_str(&record.to_line());
        body.push('\n');
    }
    let tmp = path.with_extension("jsonl.tmp");
    fs::write(&tmp, body)?;
    fs::rename(&tmp, path)
}
