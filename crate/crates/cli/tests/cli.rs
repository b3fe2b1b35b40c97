use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn asset(rel: &str) -> String {
    root().join("assets").join(rel).to_string_lossy().into_owned()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn treeprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treeprobe"))
        .args(args)
        .env_remove("TREEPROBE_CONFIG")
        .env_remove("TREEPROBE_SEED")
        .env_remove("TREEPROBE_CACHE_DIR")
        .env_remove("TREEPROBE_PARALLELISM")
        .output()
        .expect("spawn treeprobe")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Pulls `key=value` out of a line of `key=value` pairs.
fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {line:?}"))
}

#[test]
fn validate_exit_codes() {
    let ok = treeprobe(&["validate", &asset("trees/gtsrb.json"), "--classes", &asset("datasets/gtsrb_classes.json")]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("nodes=65 depth=16 leaves=43"));

    let bad = treeprobe(&["validate", &fixture("duplicate_question.json")]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("DuplicateQuestionOnPath"));

    let missing = treeprobe(&["validate", "/definitely/not/here.json"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn validate_rejects_wrong_class_list() {
    let o = treeprobe(&["validate", &asset("trees/cifar10.json"), "--classes", &asset("datasets/gtsrb_classes.json")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn perfect_mock_scores_one_and_resume_skips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.jsonl");
    let cache = dir.path().join("cache");
    let args = [
        "run",
        "--manifest",
        &asset("datasets/cifar10_sample.jsonl"),
        "--tree",
        &asset("trees/cifar10.json"),
        "--descriptions",
        &asset("descriptions/cifar10.jsonl"),
        "--strategies",
        "tree,zero_shot,tree_desc",
        "--perfect",
        "--out",
        out.to_str().unwrap(),
        "--cache-dir",
        cache.to_str().unwrap(),
    ];
    let first = treeprobe(&args);
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let text = stdout(&first);
    let groups: Vec<&str> = text.lines().filter(|l| l.contains("mean_accuracy=")).collect();
    assert_eq!(groups.len(), 3);
    for g in groups {
        assert_eq!(field(g, "mean_accuracy"), "1.0000", "{g}");
    }
    let bytes = std::fs::read(&out).unwrap();

    let second = treeprobe(&args);
    assert_eq!(second.status.code(), Some(0));
    let head = stdout(&second).lines().next().unwrap().to_string();
    assert_eq!(field(&head, "executed"), "0");
    assert_eq!(field(&head, "skipped"), "3000");
    assert_eq!(std::fs::read(&out).unwrap(), bytes);
}

#[test]
fn simulator_matches_cubed_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim.jsonl");
    let o = treeprobe(&[
        "run",
        "--synthetic",
        "40000",
        "--tree",
        &asset("trees/binary_depth3.json"),
        "--backend",
        "simulator",
        "--accuracy",
        "0.9",
        "--seed",
        "5",
        "--parallelism",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.contains("mean_accuracy=")).unwrap();
    let acc: f64 = field(line, "mean_accuracy").parse().unwrap();
    assert!((acc - 0.729).abs() < 0.01, "{acc}");
}

#[test]
fn run_without_backend_input_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.jsonl");
    let o = treeprobe(&[
        "run",
        "--manifest",
        &asset("datasets/cifar10_sample.jsonl"),
        "--strategies",
        "zero_shot",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = treeprobe(&["run", "--manifest", &asset("datasets/cifar10_sample.jsonl"), "--strategies", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_perfect_and_replay() {
    let perfect = treeprobe(&["verify", "--tree", &asset("trees/gtsrb.json"), "--perfect"]);
    assert_eq!(perfect.status.code(), Some(0));
    assert!(stdout(&perfect).contains("overall_mean=100.00% perfect=43/43"));

    let replay = treeprobe(&[
        "verify",
        "--tree",
        &asset("trees/gtsrb.json"),
        "--replay",
        &asset("replay/gtsrb_verification.jsonl"),
    ]);
    assert_eq!(replay.status.code(), Some(0));
    assert!(stdout(&replay).contains("overall_mean=98.20% perfect=39/43"), "{}", stdout(&replay));

    let unknown = treeprobe(&["verify", "--tree", &asset("trees/gtsrb.json"), "--perfect", "--class", "99"]);
    assert_eq!(unknown.status.code(), Some(2));
}

fn overall(table: &str, row: &str) -> Vec<f64> {
    let line = table.lines().find(|l| l.starts_with(row)).unwrap();
    line.split(',').skip(2).map(|v| v.parse().unwrap()).collect()
}

#[test]
fn simulate_is_deterministic_and_monotone() {
    let args = [
        "simulate",
        "--tree",
        &asset("trees/gtsrb.json"),
        "--sweep",
        "0.5,0.8,0.9,0.95",
        "--trials",
        "20000",
        "--seed",
        "3",
    ];
    let a = treeprobe(&args);
    let b = treeprobe(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let table = stdout(&a);
    for row in ["overall_analytic", "overall_monte_carlo"] {
        let values = overall(&table, row);
        assert_eq!(values.len(), 4);
        assert!(values.windows(2).all(|w| w[0] <= w[1]), "{row}: {values:?}");
    }
    let analytic = overall(&table, "overall_analytic");
    let mc = overall(&table, "overall_monte_carlo");
    for (a, m) in analytic.iter().zip(&mc) {
        assert!((a - m).abs() < 0.02, "{a} vs {m}");
    }
}

#[test]
fn simulate_single_model_matches_cube() {
    let o = treeprobe(&["simulate", "--tree", &asset("trees/binary_depth3.json"), "--accuracy", "0.9", "--trials", "1000"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("overall,,,0.729000,"), "{}", stdout(&o));
    let missing = treeprobe(&["simulate", "--tree", &asset("trees/binary_depth3.json")]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn compare_recorded_gtsrb_runs() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("cmp.csv");
    let o = treeprobe(&[
        "compare",
        &asset("replay/gtsrb_gpt4o_tree_t0.jsonl"),
        &asset("replay/gtsrb_gpt4o_zero_shot_t0.jsonl"),
        "--manifest",
        &asset("datasets/gtsrb_sample.jsonl"),
        "--tree",
        &asset("trees/gtsrb.json"),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    assert_eq!(field(&line, "wins_a"), "11");
    assert_eq!(field(&line, "mean_a"), "52.05");
    assert_eq!(field(&line, "mean_b"), "65.78");
    let rows = std::fs::read_to_string(&csv).unwrap().lines().count();
    assert!(rows >= 44, "{rows}");
}

#[test]
fn compare_mismatched_class_sets_fails() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let emit = |transcript: &str, manifest: &str, tree: &str, out: &Path| {
        let o = treeprobe(&[
            "emit",
            &asset(transcript),
            "--manifest",
            &asset(manifest),
            "--tree",
            &asset(tree),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    };
    emit("replay/gtsrb_gpt4o_tree_t0.jsonl", "datasets/gtsrb_sample.jsonl", "trees/gtsrb.json", &a);
    emit("replay/cifar10_gpt4o_tree_t0.jsonl", "datasets/cifar10_sample.jsonl", "trees/cifar10.json", &b);
    let o = treeprobe(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn replay_round_trips_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("again.jsonl");
    let src = asset("replay/cifar10_gpt4o_tree_t0.jsonl");
    let o = treeprobe(&[
        "replay",
        &src,
        "--manifest",
        &asset("datasets/cifar10_sample.jsonl"),
        "--tree",
        &asset("trees/cifar10.json"),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("changed_on_replay=0"));
    assert!(text.contains("mean_accuracy=0.7540"), "{text}");
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&src).unwrap());
}

#[test]
fn emit_depth_csv() {
    let o = treeprobe(&[
        "emit",
        &asset("replay/cifar10_gpt4o_tree_t0.jsonl"),
        "--manifest",
        &asset("datasets/cifar10_sample.jsonl"),
        "--tree",
        &asset("trees/cifar10.json"),
        "--format",
        "depth-csv",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("depth,first_errors\n"));
    let errors: u64 = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<u64>().unwrap()).sum();
    // 754 of 1000 correct; every other image diverged somewhere.
    assert_eq!(errors, 246);
}

#[test]
fn sample_is_seeded() {
    let m = asset("datasets/gtsrb_sample.jsonl");
    let a = treeprobe(&["sample", "--manifest", &m, "--per-class", "2", "--seed", "4"]);
    let b = treeprobe(&["sample", "--manifest", &m, "--per-class", "2", "--seed", "4"]);
    let c = treeprobe(&["sample", "--manifest", &m, "--per-class", "2", "--seed", "5"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    // header plus 2 per class
    assert_eq!(stdout(&a).lines().count(), 1 + 86);
}

#[test]
fn config_file_and_env_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 4\n").unwrap();
    let m = asset("datasets/gtsrb_sample.jsonl");
    let base = || {
        let mut c = Command::new(env!("CARGO_BIN_EXE_treeprobe"));
        c.args(["sample", "--manifest", &m, "--per-class", "2"]);
        c.env_remove("TREEPROBE_CONFIG").env_remove("TREEPROBE_SEED");
        c
    };
    let flag = treeprobe(&["sample", "--manifest", &m, "--per-class", "2", "--seed", "4"]);
    let from_file = base().arg("--config").arg(&cfg).env("TREEPROBE_SEED", "5").output().unwrap();
    let from_env_path = base().env("TREEPROBE_CONFIG", &cfg).output().unwrap();
    let from_env_seed = base().env("TREEPROBE_SEED", "4").output().unwrap();
    let overridden = base().args(["--config", cfg.to_str().unwrap(), "--seed", "5"]).output().unwrap();
    assert_eq!(from_file.stdout, flag.stdout);
    assert_eq!(from_env_path.stdout, flag.stdout);
    assert_eq!(from_env_seed.stdout, flag.stdout);
    assert_ne!(overridden.stdout, flag.stdout);

    std::fs::write(&cfg, "api_key = \"nope\"\n").unwrap();
    let bad = base().arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
