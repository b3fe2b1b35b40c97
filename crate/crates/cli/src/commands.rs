use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Subcommand, ValueEnum};

use treeprobe_core::analysis::{
    analytic_leaf_accuracy, class_csv, compare_strategies, comparison_csv, compute_metrics, depth_csv,
    monte_carlo_leaf_accuracy, percent, replay_record, replay_verification, verification_csv, verify_knowledge,
    ClassVerification,
};
use treeprobe_core::datasets::{load_descriptions, load_manifest, sample_balanced, sample_one_per_sequence, ManifestHeader};
use treeprobe_core::engine::{read_transcript, run_batch, write_transcript, BatchSummary};
use treeprobe_core::prompting::load_prompt_variants;
use treeprobe_core::{
    parse_tree, render_tree, tree_stats, validate_tree, ClassId, DatasetManifest, DecisionTree, Engine, EngineSettings,
    EvaluationReport, ImageRecord, PromptVariant, PropagationModel, RenderFormat, RunConfig, Severity, Strategy,
    TranscriptRecord, VerificationReport,
};

use crate::backend::{self, BackendArgs, ErrorModelArgs, Workload};
use crate::config::Settings;

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a tree document against the structural rules.
    Validate(ValidateArgs),
    /// Print tree statistics.
    Stats(StatsArgs),
    /// Draw a sample from a dataset manifest.
    Sample(SampleArgs),
    /// Classify a dataset under the selected strategies and write a transcript.
    Run(RunArgs),
    /// Probe whether the model answers each class's path correctly when told the class.
    Verify(VerifyArgs),
    /// Analytic and Monte Carlo leaf accuracy under an error model.
    Simulate(SimulateArgs),
    /// Per-class head-to-head of two reports or transcripts.
    Compare(CompareArgs),
    /// Re-derive every outcome in a transcript from its raw responses.
    Replay(ReplayArgs),
    /// Write report data for a transcript.
    Emit(EmitArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    tree: PathBuf,
    /// Class list (manifest header or classes file) the tree must cover exactly.
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Report classes at several leaves as warnings instead of errors.
    #[arg(long)]
    allow_duplicates: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    tree: PathBuf,
    /// Also print the indented question listing.
    #[arg(long)]
    listing: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Draw this many images per class instead of one per sequence.
    #[arg(long)]
    per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset manifest (JSONL with a header line).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Question tree document.
    #[arg(long)]
    tree: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Class descriptions (JSONL), needed by the description strategies.
    #[arg(long)]
    descriptions: Option<PathBuf>,
    /// Zero-shot prompt variants (JSONL); defaults to the baseline template.
    #[arg(long)]
    variants: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "tree")]
    strategies: Vec<Strategy>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    temperatures: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    runs: u32,
    /// Ask a node once more when the reply names none of its answers.
    #[arg(long)]
    reask: bool,
    /// Classify this many synthetic images, spread evenly over the tree's
    /// classes, instead of a manifest.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Also write the per-group reports as a JSON array.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    tree: PathBuf,
    /// Only these class ids.
    #[arg(long, value_delimiter = ',')]
    class: Vec<ClassId>,
    /// Recompute a recorded verification (JSONL) instead of querying a backend.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    tree: PathBuf,
    #[command(flatten)]
    model: ErrorModelArgs,
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    /// Uniform accuracies to tabulate side by side; replaces the error model.
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Report JSON or transcript JSONL.
    a: PathBuf,
    b: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    transcript: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmitFormat {
    Json,
    Csv,
    DepthCsv,
}

#[derive(Debug, Args)]
pub struct EmitArgs {
    transcript: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "json")]
    format: EmitFormat,
    /// Keep only groups of this strategy.
    #[arg(long)]
    strategy: Option<Strategy>,
}

pub fn dispatch(command: Command, settings: &Settings, out: Option<&Path>) -> anyhow::Result<u8> {
    match command {
        Command::Validate(a) => validate(a, out),
        Command::Stats(a) => stats(a, out),
        Command::Sample(a) => sample(a, settings, out),
        Command::Run(a) => run(a, settings, out),
        Command::Verify(a) => verify(a, settings, out),
        Command::Simulate(a) => simulate(a, settings, out),
        Command::Compare(a) => compare(a, out),
        Command::Replay(a) => replay(a, out),
        Command::Emit(a) => emit(a, out),
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_tree(path: &Path) -> anyhow::Result<DecisionTree> {
    parse_tree(&read(path)?).with_context(|| format!("{}", path.display()))
}

/// Writes `text` to `out`, or to stdout without one.
fn emit_text(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("cannot write {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

impl DataArgs {
    fn tree(&self) -> anyhow::Result<Option<DecisionTree>> {
        self.tree.as_deref().map(load_tree).transpose()
    }

    fn manifest(&self) -> anyhow::Result<DatasetManifest> {
        let path = self.manifest.as_deref().context("--manifest is required")?;
        load_manifest(path).map_err(|e| anyhow::anyhow!("{e}"))
    }
}

fn validate(args: ValidateArgs, out: Option<&Path>) -> anyhow::Result<u8> {
    let text = read(&args.tree)?;
    let tree = match parse_tree(&text) {
        Ok(t) => t,
        Err(e) => {
            println!("error: {}: {e}", args.tree.display());
            return Ok(1);
        }
    };
    let stats = tree_stats(&tree);
    println!("nodes={} depth={} leaves={}", stats.node_count, stats.max_depth, stats.leaf_count);
    let issues = validate_tree(&tree, args.allow_duplicates);
    for issue in &issues {
        println!("{issue}");
    }
    let mut failed = issues.iter().any(|i| i.severity == Severity::Error);
    if let Some(path) = &args.classes {
        let header = read_class_header(path)?;
        if header.classes != tree.classes {
            println!("error: class set differs from {}", path.display());
            failed = true;
        }
    }
    if let Some(path) = out {
        let doc = serde_json::json!({"stats": stats, "issues": issues});
        emit_text(Some(path), &format!("{}\n", serde_json::to_string_pretty(&doc)?))?;
    }
    Ok(u8::from(failed))
}

/// Accepts a classes file (one JSON document) or a manifest (header line first).
fn read_class_header(path: &Path) -> anyhow::Result<ManifestHeader> {
    let text = read(path)?;
    serde_json::from_str(&text)
        .or_else(|_| serde_json::from_str(text.lines().next().unwrap_or_default()))
        .with_context(|| format!("{} has no class list", path.display()))
}

fn stats(args: StatsArgs, out: Option<&Path>) -> anyhow::Result<u8> {
    let tree = load_tree(&args.tree)?;
    let stats = tree_stats(&tree);
    let mut text = format!(
        "nodes={} internal={} leaves={} depth={}\n",
        stats.node_count, stats.internal_count, stats.leaf_count, stats.max_depth
    );
    for (fanout, count) in &stats.branching_histogram {
        let _ = writeln!(text, "branching {fanout}: {count} nodes");
    }
    for (class_id, len) in &stats.path_lengths {
        let _ = writeln!(text, "class {class_id} ({}): {len} questions", tree.classes.name(*class_id).unwrap_or("?"));
    }
    if args.listing {
        text.push('\n');
        text.push_str(&render_tree(&tree, RenderFormat::Listing));
    }
    print!("{text}");
    if let Some(path) = out {
        emit_text(Some(path), &format!("{}\n", serde_json::to_string_pretty(&stats)?))?;
    }
    Ok(0)
}

fn sample(args: SampleArgs, settings: &Settings, out: Option<&Path>) -> anyhow::Result<u8> {
    let manifest = load_manifest(&args.manifest).map_err(|e| anyhow::anyhow!("{e}"))?;
    let picked = match args.per_class {
        Some(n) => sample_balanced(&manifest, n, settings.seed),
        None => sample_one_per_sequence(&manifest, settings.seed),
    }
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    match out {
        Some(path) => {
            picked.write(path).map_err(|e| anyhow::anyhow!("{e}"))?;
            println!("records={}", picked.records.len());
        }
        None => print!("{}", picked.to_jsonl()),
    }
    Ok(0)
}

fn synthetic_manifest(tree: &DecisionTree, n: usize) -> DatasetManifest {
    let ids: Vec<ClassId> = tree.classes.ids().collect();
    let records = (0..n)
        .map(|i| ImageRecord::new(format!("synthetic/{i:07}.png"), ids[i % ids.len()]))
        .collect();
    DatasetManifest::new("synthetic", "object", tree.classes.clone(), records)
}

fn report_lines(reports: &[EvaluationReport]) -> String {
    let mut text = String::new();
    for r in reports {
        let _ = writeln!(
            text,
            "{} mean_accuracy={:.4} image_accuracy={:.4} n={} correct={} nomatch={} backend_failures={}",
            r.label(),
            r.mean_accuracy,
            r.image_accuracy,
            r.n_images,
            r.n_correct,
            r.nomatch_count,
            r.backend_failure_count
        );
    }
    text
}

fn run(args: RunArgs, settings: &Settings, out: Option<&Path>) -> anyhow::Result<u8> {
    let transcript = out.context("run needs --out for the transcript")?;
    let tree = args.data.tree()?;
    let manifest = match args.synthetic {
        Some(n) => synthetic_manifest(tree.as_ref().context("--synthetic needs --tree")?, n),
        None => args.data.manifest()?,
    };
    let descriptions = args
        .descriptions
        .as_deref()
        .map(|p| load_descriptions(p, &manifest.classes))
        .transpose()
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let variants = match &args.variants {
        Some(p) => load_prompt_variants(p).map_err(|e| anyhow::anyhow!("{e}"))?,
        None => vec![PromptVariant::baseline()],
    };
    let config = RunConfig {
        strategies: args.strategies.clone(),
        variants,
        temperatures: args.temperatures.clone(),
        runs: args.runs,
        parallelism: settings.parallelism,
    };
    config.validate().map_err(|e| anyhow::anyhow!("{e}"))?;

    let backend = backend::build(
        &args.backend,
        settings,
        Workload::Classify {
            manifest: &manifest,
            tree: tree.as_ref(),
        },
    )?;
    let mut engine_settings = EngineSettings {
        model_id: args.backend.model_id.clone().unwrap_or_else(|| settings.model.clone()),
        reask_on_nomatch: args.reask,
        ..EngineSettings::default()
    };
    if let Some(budget) = settings.prompt_budget {
        engine_settings.prompt_budget = budget;
    }
    let mut engine = Engine::new(backend.as_ref(), &manifest, engine_settings);
    if let Some(t) = &tree {
        engine = engine.with_tree(t);
    }
    if let Some(d) = &descriptions {
        engine = engine.with_descriptions(d);
    }
    engine.check(&config.strategies).map_err(|e| anyhow::anyhow!("{e}"))?;

    let summary: BatchSummary = run_batch(&engine, &config, transcript).map_err(|e| anyhow::anyhow!("{e}"))?;
    println!(
        "cells={} executed={} skipped={} correct={} nomatch={} backend_failures={}",
        summary.total_cells, summary.executed, summary.skipped, summary.correct, summary.nomatch, summary.backend_failures
    );
    let records = read_transcript(transcript)?;
    let reports = compute_metrics(&records, &manifest, tree.as_ref()).map_err(|e| anyhow::anyhow!("{e}"))?;
    print!("{}", report_lines(&reports));
    if let Some(path) = &args.report {
        emit_text(Some(path), &format!("{}\n", serde_json::to_string_pretty(&reports)?))?;
    }
    Ok(u8::from(summary.backend_failures > 0))
}

fn verify(args: VerifyArgs, settings: &Settings, out: Option<&Path>) -> anyhow::Result<u8> {
    let tree = load_tree(&args.tree)?;
    if let Some(bad) = args.class.iter().find(|c| !tree.classes.contains(**c)) {
        bail!("class {bad} is not in tree {:?}", tree.name);
    }
    let wanted = |c: ClassId| args.class.is_empty() || args.class.contains(&c);
    let classes: Vec<ClassVerification> = match &args.replay {
        Some(path) => {
            let mut out = Vec::new();
            for (idx, line) in read(path)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let recorded: ClassVerification =
                    serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), idx + 1))?;
                if wanted(recorded.class_id) {
                    out.push(replay_verification(&tree, &recorded).map_err(|e| anyhow::anyhow!("{e}"))?);
                }
            }
            out
        }
        None => {
            let backend = backend::build(&args.backend, settings, Workload::Verify { tree: &tree })?;
            let model = args.backend.model_id.clone().unwrap_or_else(|| settings.model.clone());
            tree.classes
                .ids()
                .filter(|c| wanted(*c))
                .map(|c| verify_knowledge(&tree, c, backend.as_ref(), &model).map_err(|e| anyhow::anyhow!("{e}")))
                .collect::<anyhow::Result<_>>()?
        }
    };
    if let Some(path) = out {
        let mut body = String::new();
        for c in &classes {
            body.push_str(&serde_json::to_string(c)?);
            body.push('\n');
        }
        emit_text(Some(path), &body)?;
    }
    let report = VerificationReport::from_classes(classes);
    print!("{}", verification_csv(&report));
    println!("{}", report.summary_line());
    let errors = report.per_class.values().filter(|c| c.error.is_some()).count();
    Ok(u8::from(errors > 0))
}

fn simulate(args: SimulateArgs, settings: &Settings, out: Option<&Path>) -> anyhow::Result<u8> {
    let tree = load_tree(&args.tree)?;
    let stats = tree_stats(&tree);
    let mut text = String::new();
    if args.sweep.is_empty() {
        let model = PropagationModel::from(&args.model.error_model()?);
        let analytic = analytic_leaf_accuracy(&tree, &model).map_err(|e| anyhow::anyhow!("{e}"))?;
        let mc = monte_carlo_leaf_accuracy(&tree, &model, args.trials, settings.seed).map_err(|e| anyhow::anyhow!("{e}"))?;
        text.push_str("class_id,class_name,questions,analytic,monte_carlo\n");
        for (c, a) in &analytic.per_class {
            let _ = writeln!(
                text,
                "{c},{},{},{a:.6},{:.6}",
                csv_field(tree.classes.name(*c).unwrap_or_default()),
                stats.path_lengths.get(c).copied().unwrap_or(0),
                mc.class_estimate(*c).unwrap_or(0.0)
            );
        }
        let _ = writeln!(text, "overall,,,{:.6},{:.6}", analytic.overall, mc.estimate);
        let _ = writeln!(text, "# trials={} seed={} stderr={:.6}", mc.trials, settings.seed, mc.stderr);
    } else {
        let mut columns = Vec::new();
        for &p in &args.sweep {
            let model = PropagationModel::uniform(p);
            let analytic = analytic_leaf_accuracy(&tree, &model).map_err(|e| anyhow::anyhow!("{e}"))?;
            let mc = monte_carlo_leaf_accuracy(&tree, &model, args.trials, settings.seed).map_err(|e| anyhow::anyhow!("{e}"))?;
            columns.push((p, analytic, mc));
        }
        text.push_str("class_id,class_name");
        for (p, _, _) in &columns {
            let _ = write!(text, ",p={p}");
        }
        text.push('\n');
        for c in tree.classes.ids() {
            let _ = write!(text, "{c},{}", csv_field(tree.classes.name(c).unwrap_or_default()));
            for (_, a, _) in &columns {
                let _ = write!(text, ",{:.6}", a.per_class[&c]);
            }
            text.push('\n');
        }
        text.push_str("overall_analytic,");
        for (_, a, _) in &columns {
            let _ = write!(text, ",{:.6}", a.overall);
        }
        text.push_str("\noverall_monte_carlo,");
        for (_, _, mc) in &columns {
            let _ = write!(text, ",{:.6}", mc.estimate);
        }
        text.push('\n');
        let _ = writeln!(text, "# trials={} seed={}", args.trials, settings.seed);
    }
    emit_text(out, &text)?;
    Ok(0)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// A report from a JSON file, or computed from a transcript.
fn load_report(path: &Path, data: &DataArgs) -> anyhow::Result<EvaluationReport> {
    let text = read(path)?;
    if let Ok(report) = serde_json::from_str::<EvaluationReport>(&text) {
        return Ok(report);
    }
    if let Ok(mut reports) = serde_json::from_str::<Vec<EvaluationReport>>(&text) {
        if reports.len() == 1 {
            return Ok(reports.remove(0));
        }
        bail!("{} holds {} reports; compare needs exactly one", path.display(), reports.len());
    }
    let records = read_transcript(path)?;
    let mut reports = compute_metrics(&records, &data.manifest()?, data.tree()?.as_ref()).map_err(|e| anyhow::anyhow!("{e}"))?;
    if reports.len() != 1 {
        let labels: Vec<String> = reports.iter().map(|r| r.label()).collect();
        bail!("{} holds several groups ({}); compare needs exactly one", path.display(), labels.join(", "));
    }
    Ok(reports.remove(0))
}

fn compare(args: CompareArgs, out: Option<&Path>) -> anyhow::Result<u8> {
    let a = load_report(&args.a, &args.data)?;
    let b = load_report(&args.b, &args.data)?;
    let cmp = match compare_strategies(&a, &b) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(1);
        }
    };
    emit_text(out, &comparison_csv(&cmp))?;
    println!(
        "a={} b={} wins_a={} wins_b={} ties={} mean_a={} mean_b={} gap={}",
        cmp.label_a,
        cmp.label_b,
        cmp.wins_a,
        cmp.wins_b,
        cmp.ties,
        percent(cmp.mean_a),
        percent(cmp.mean_b),
        percent(cmp.mean_gap)
    );
    Ok(0)
}

fn replayed(path: &Path, data: &DataArgs) -> anyhow::Result<(Vec<TranscriptRecord>, usize, DatasetManifest, Option<DecisionTree>)> {
    let manifest = data.manifest()?;
    let tree = data.tree()?;
    let ids: Vec<ClassId> = manifest.classes.ids().collect();
    let records = read_transcript(path)?;
    let mut changed = 0;
    let mut out = Vec::with_capacity(records.len());
    for r in &records {
        let again = replay_record(r, tree.as_ref(), &ids).map_err(|e| anyhow::anyhow!("{e}"))?;
        changed += usize::from(&again != r);
        out.push(again);
    }
    Ok((out, changed, manifest, tree))
}

fn replay(args: ReplayArgs, out: Option<&Path>) -> anyhow::Result<u8> {
    let (records, changed, manifest, tree) = match replayed(&args.transcript, &args.data) {
        Ok(x) => x,
        Err(e) if e.to_string().starts_with("mismatch") => {
            eprintln!("error: {e}");
            return Ok(1);
        }
        Err(e) => return Err(e),
    };
    let reports = compute_metrics(&records, &manifest, tree.as_ref()).map_err(|e| anyhow::anyhow!("{e}"))?;
    println!("records={} changed_on_replay={changed}", records.len());
    print!("{}", report_lines(&reports));
    if let Some(path) = out {
        write_transcript(path, &records).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(0)
}

fn emit(args: EmitArgs, out: Option<&Path>) -> anyhow::Result<u8> {
    let (records, _, manifest, tree) = replayed(&args.transcript, &args.data)?;
    let mut reports = compute_metrics(&records, &manifest, tree.as_ref()).map_err(|e| anyhow::anyhow!("{e}"))?;
    if let Some(s) = args.strategy {
        reports.retain(|r| r.strategy == s);
    }
    let text = match args.format {
        EmitFormat::Json if reports.len() == 1 => format!("{}\n", serde_json::to_string_pretty(&reports[0])?),
        EmitFormat::Json => format!("{}\n", serde_json::to_string_pretty(&reports)?),
        EmitFormat::Csv | EmitFormat::DepthCsv => {
            if reports.len() != 1 {
                let labels: Vec<String> = reports.iter().map(|r| r.label()).collect();
                bail!("CSV output needs exactly one group, found [{}]; narrow with --strategy", labels.join(", "));
            }
            if args.format == EmitFormat::Csv {
                class_csv(&reports[0])
            } else {
                depth_csv(&reports[0])
            }
        }
    };
    emit_text(out, &text)?;
    Ok(0)
}
