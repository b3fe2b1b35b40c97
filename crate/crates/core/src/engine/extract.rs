use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use regex::Regex;
use thiserror::Error;

use crate::tree::ClassId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtractError {
    #[error("no candidate answer found in response")]
    NoMatch,
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn candidate_pattern(candidate: &str) -> String {
    let body = candidate
        .split_whitespace()
        .map(regex::escape)
        .collect::<Vec<_>>()
        .join(r"\s+");
    let mut pattern = String::from("(?i)");
    if candidate.trim_start().starts_with(is_word) {
        pattern.push_str(r"\b");
    }
    pattern.push_str(&body);
    if candidate.trim_end().ends_with(is_word) {
        pattern.push_str(r"\b");
    }
    pattern
}

fn matcher(candidate: &str) -> Arc<Regex> {
    static CACHE: OnceLock<RwLock<HashMap<String, Arc<Regex>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(re) = cache.read().expect("matcher cache").get(candidate) {
        return Arc::clone(re);
    }
    let re = Arc::new(Regex::new(&candidate_pattern(candidate)).expect("escaped candidate compiles"));
    cache
        .write()
        .expect("matcher cache")
        .entry(candidate.to_string())
        .or_insert(re)
        .clone()
}

/// Returns the candidate whose first occurrence starts earliest in `text`.
///
/// Matching ignores case, treats runs of whitespace in a candidate as
/// flexible, and requires word boundaries at candidate edges that are word
/// characters. When several candidates start at the same position the
/// longest wins, then the earliest in `candidates`.
pub fn extract_answer<'c, S: AsRef<str>>(text: &str, candidates: &'c [S]) -> Result<&'c str, ExtractError> {
    let mut best: Option<(usize, usize, &'c str)> = None;
    for candidate in candidates {
        let candidate = candidate.as_ref();
        if candidate.trim().is_empty() {
            continue;
        }
        let Some(m) = matcher(candidate).find(text) else {
            continue;
        };
        let better = match best {
            None => true,
            Some((start, len, _)) => m.start() < start || (m.start() == start && m.len() > len),
        };
        if better {
            best = Some((m.start(), m.len(), candidate));
        }
    }
    best.map(|(_, _, c)| c).ok_or(ExtractError::NoMatch)
}

/// First maximal run of ASCII digits in `text` whose value is a valid id.
pub fn extract_class_id(text: &str, valid_ids: &[ClassId]) -> Result<ClassId, ExtractError> {
    static DIGITS: OnceLock<Regex> = OnceLock::new();
    let digits = DIGITS.get_or_init(|| Regex::new(r"[0-9]+").expect("digit pattern"));
    digits
        .find_iter(text)
        .filter_map(|m| m.as_str().parse::<ClassId>().ok())
        .find(|id| valid_ids.contains(id))
        .ok_or(ExtractError::NoMatch)
}
