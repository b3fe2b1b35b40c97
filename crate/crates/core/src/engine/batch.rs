use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::Serialize;

use super::transcript::{normalized_bits, parse_transcript, write_transcript, CellKey, FailureKind, TranscriptRecord, TREE_VARIANT};
use super::{Engine, EngineError};
use crate::datasets::ImageRecord;
use crate::prompting::{PromptVariant, Strategy};

/// The evaluation matrix: every image is classified under every strategy,
/// zero-shot variant, temperature and run index.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub strategies: Vec<Strategy>,
    /// Templates for the zero-shot strategies; ignored by tree strategies.
    pub variants: Vec<PromptVariant>,
    pub temperatures: Vec<f64>,
    pub runs: u32,
    pub parallelism: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BatchSummary {
    pub total_cells: usize,
    pub executed: usize,
    /// Cells already present in the transcript and not re-run.
    pub skipped: usize,
    pub correct: usize,
    pub nomatch: usize,
    pub backend_failures: usize,
}

struct Cell<'a> {
    image: &'a ImageRecord,
    strategy: Strategy,
    variant: Option<&'a PromptVariant>,
    temperature: f64,
    run_index: u32,
}

impl Cell<'_> {
    fn key(&self) -> CellKey {
        CellKey {
            image_ref: self.image.image_ref.clone(),
            strategy: self.strategy,
            variant_id: self.variant.map_or(TREE_VARIANT, |v| v.variant_id.as_str()).to_string(),
            temperature_bits: normalized_bits(self.temperature),
            run_index: self.run_index,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let err = |m: &str| Err(EngineError::Config(m.to_string()));
        if self.strategies.is_empty() {
            return err("no strategies selected");
        }
        if self.temperatures.is_empty() {
            return err("no temperatures selected");
        }
        if self.runs == 0 {
            return err("runs must be at least 1");
        }
        if self.parallelism == 0 {
            return err("parallelism must be at least 1");
        }
        if self.strategies.iter().any(|s| !s.is_tree()) && self.variants.is_empty() {
            return err("zero-shot strategies need at least one prompt variant");
        }
        if let Some(t) = self.temperatures.iter().find(|t| !(0.0..=2.0).contains(*t)) {
            return Err(EngineError::Config(format!("temperature {t} outside [0, 2]")));
        }
        Ok(())
    }

    fn cells<'a>(&'a self, images: &'a [ImageRecord]) -> Vec<Cell<'a>> {
        let mut cells = Vec::new();
        for image in images {
            for &strategy in &self.strategies {
                let variants: Vec<Option<&PromptVariant>> = if strategy.is_tree() {
                    vec![None]
                } else {
                    self.variants.iter().map(Some).collect()
                };
                for variant in variants {
                    for &temperature in &self.temperatures {
                        for run_index in 0..self.runs {
                            cells.push(Cell {
                                image,
                                strategy,
                                variant,
                                temperature,
                                run_index,
                            });
                        }
                    }
                }
            }
        }
        cells
    }
}

/// Runs every cell of `config` not already recorded in `transcript_path`.
///
/// New records are appended as they finish, so an interrupted batch loses
/// at most the cells in flight. Cells whose earlier record failed on a
/// backend error are retried. On completion the file is rewritten with
/// one line per cell in matrix order, which makes its bytes independent of
/// scheduling.
pub fn run_batch(engine: &Engine<'_>, config: &RunConfig, transcript_path: &Path) -> Result<BatchSummary, EngineError> {
    config.validate()?;
    engine.check(&config.strategies)?;
    let io_err = |e: std::io::Error| EngineError::Transcript {
        path: transcript_path.display().to_string(),
        message: e.to_string(),
    };

    let cells = config.cells(&engine.manifest.records);
    let mut existing: HashMap<CellKey, TranscriptRecord> = HashMap::new();
    if transcript_path.exists() {
        let text = fs::read_to_string(transcript_path).map_err(io_err)?;
        let (records, bad) = parse_transcript(&text);
        for (line, message) in &bad {
            tracing::warn!(line, %message, "ignoring unreadable transcript line");
        }
        for record in records {
            if record.failure.as_ref().is_some_and(|f| f.kind == FailureKind::Backend) {
                continue;
            }
            existing.insert(record.cell(), record);
        }
    } else if let Some(parent) = transcript_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }

    let mut results: Vec<Option<TranscriptRecord>> = cells.iter().map(|c| existing.remove(&c.key())).collect();
    let skipped = results.iter().filter(|r| r.is_some()).count();
    if !existing.is_empty() {
        tracing::warn!(count = existing.len(), "dropping transcript records outside the current run matrix");
    }
    let pending: Vec<usize> = (0..cells.len()).filter(|&i| results[i].is_none()).collect();

    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(transcript_path)
        .map_err(io_err)?;
    let sink = Mutex::new(file);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| EngineError::Config(format!("thread pool: {e}")))?;
    let fresh: Vec<(usize, TranscriptRecord)> = pool.install(|| {
        pending
            .par_iter()
            .map(|&i| {
                let cell = &cells[i];
                let record = match cell.variant {
                    Some(variant) => {
                        engine.classify_zero_shot(cell.image, cell.strategy, variant, cell.temperature, cell.run_index)
                    }
                    None => engine.classify_tree(cell.image, cell.strategy, cell.temperature, cell.run_index),
                };
                let mut line = record.to_line();
                line.push('\n');
                if let Err(e) = sink.lock().expect("transcript sink").write_all(line.as_bytes()) {
                    tracing::warn!(error = %e, "failed to append transcript line");
                }
                (i, record)
            })
            .collect()
    });
    drop(sink);
    let executed = fresh.len();
    for (i, record) in fresh {
        results[i] = Some(record);
    }

    let records: Vec<TranscriptRecord> = results.into_iter().map(|r| r.expect("every cell filled")).collect();
    write_transcript(transcript_path, &records).map_err(io_err)?;

    let mut summary = BatchSummary {
        total_cells: records.len(),
        executed,
        skipped,
        ..BatchSummary::default()
    };
    for record in &records {
        if record.correct() {
            summary.correct += 1;
        }
        match record.failure.as_ref().map(|f| f.kind) {
            Some(FailureKind::NoMatch) => summary.nomatch += 1,
            Some(FailureKind::Backend) => summary.backend_failures += 1,
            _ => {}
        }
    }
    tracing::info!(
        total = summary.total_cells,
        executed = summary.executed,
        skipped = summary.skipped,
        "batch finished"
    );
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{MockScript, ScriptedMock};
    use crate::datasets::DatasetManifest;
    use crate::engine::EngineSettings;
    use crate::tree::testing::two_leaf_tree;

    fn manifest(n: usize) -> DatasetManifest {
        let tree = two_leaf_tree();
        let records = (0..n).map(|i| ImageRecord::new(format!("img{i:02}.png"), (i % 2) as u32)).collect();
        DatasetManifest::new("pets", "animal", tree.classes.clone(), records)
    }

    #[test]
    fn cardinality() {
        let m = manifest(10);
        let mock = ScriptedMock::new("mock", MockScript::perfect(&m, None));
        let engine = Engine::new(&mock, &m, EngineSettings::default());
        let config = RunConfig {
            strategies: vec![Strategy::ZeroShot],
            variants: vec![PromptVariant::baseline()],
            temperatures: vec![0.7],
            runs: 3,
            parallelism: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let summary = run_batch(&engine, &config, &path).unwrap();
        assert_eq!(summary.total_cells, 30);
        assert_eq!(summary.correct, 30);
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 30);

        let again = run_batch(&engine, &config, &path).unwrap();
        assert_eq!((again.executed, again.skipped), (0, 30));
        assert_eq!(mock.calls(), 30);
    }

    #[test]
    fn config_errors_abort_before_calls() {
        let m = manifest(2);
        let mock = ScriptedMock::new("mock", MockScript::default());
        let engine = Engine::new(&mock, &m, EngineSettings::default());
        let config = RunConfig {
            strategies: vec![Strategy::Tree],
            variants: vec![],
            temperatures: vec![0.0],
            runs: 1,
            parallelism: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(run_batch(&engine, &config, &dir.path().join("t.jsonl")).is_err());
        assert_eq!(mock.calls(), 0);
    }
}
