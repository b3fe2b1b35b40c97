//! Regenerates the sample manifests and replay fixtures under `assets/`.
//!
//! Every transcript is produced by the real engine talking to a planning
//! backend: each image is assigned an outcome up front (correct, wrong at a
//! given node, or an unparseable reply) and the backend phrases replies to
//! match. Per-class correct counts are fitted to reference aggregates
//! before any request is made.
//!
//! Run with `cargo run -p treeprobe-core --example build_fixtures`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use treeprobe_core::analysis::{
    compare_strategies, compute_metrics, percent, verify_knowledge, ClassVerification, VerificationReport,
};
use treeprobe_core::backends::{Backend, BackendError, ChatRequest, ChatResponse, Purpose};
use treeprobe_core::datasets::{sample_balanced, sample_one_per_sequence, DatasetManifest, ImageRecord, ManifestHeader};
use treeprobe_core::engine::{read_transcript, run_batch, Engine, EngineSettings, RunConfig};
use treeprobe_core::prompting::{PromptVariant, Strategy};
use treeprobe_core::tree::{parse_tree, ClassId, DecisionTree, Resolved};

/// Training-track counts per GTSRB class divided by 30, used only as
/// relative weights for the synthetic sequence set.
const GTSRB_TRACK_WEIGHTS: [u32; 43] = [
    7, 74, 75, 47, 66, 62, 14, 48, 47, 49, 67, 44, 70, 72, 26, 21, 14, 37, 40, 7, 12, 11, 13, 17, 9, 50, 20, 8, 18, 9,
    15, 26, 8, 23, 14, 40, 13, 7, 69, 10, 12, 8, 8,
];
const GTSRB_SEQUENCES: u32 = 901;
const FRAMES_PER_SEQUENCE: u32 = 30;

/// Classes where the tree beats zero-shot in the GPT-4o fixture.
const TREE_WINS: [ClassId; 11] = [12, 13, 14, 17, 18, 22, 25, 33, 35, 38, 40];

/// (class, depths answered wrongly) in the verification fixture.
const VERIFY_MISSES: [(ClassId, &[usize]); 4] = [(11, &[9]), (21, &[4]), (23, &[3, 4, 6]), (29, &[11])];

const CIFAR_TREE_CORRECT: [usize; 10] = [85, 88, 62, 58, 66, 64, 79, 80, 86, 86];

fn assets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets")
}

fn load_tree(name: &str) -> DecisionTree {
    parse_tree(&fs::read_to_string(assets().join(format!("trees/{name}.json"))).unwrap()).unwrap()
}

fn load_header(name: &str) -> ManifestHeader {
    serde_json::from_str(&fs::read_to_string(assets().join(format!("datasets/{name}_classes.json"))).unwrap()).unwrap()
}

/// Largest-remainder apportionment of `total` by `weights`.
fn apportion(weights: &[u32], total: u32) -> Vec<u32> {
    let sum: u32 = weights.iter().sum();
    let mut out: Vec<u32> = weights.iter().map(|w| w * total / sum).collect();
    let mut rema: Vec<(u32, usize)> = weights.iter().enumerate().map(|(i, w)| (w * total % sum, i)).collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - out.iter().sum::<u32>();
    for &(_, i) in rema.iter().take(short as usize) {
        out[i] += 1;
    }
    out
}

fn gtsrb_sample() -> DatasetManifest {
    let header = load_header("gtsrb");
    let tracks = apportion(&GTSRB_TRACK_WEIGHTS, GTSRB_SEQUENCES);
    let mut records = Vec::new();
    for (class_id, &n) in tracks.iter().enumerate() {
        for track in 0..n {
            for frame in 0..FRAMES_PER_SEQUENCE {
                records.push(
                    ImageRecord::new(
                        format!("GTSRB/Final_Test/{class_id:05}/{track:05}_{frame:05}.ppm"),
                        class_id as ClassId,
                    )
                    .with_sequence(format!("{class_id:05}/{track:05}")),
                );
            }
        }
    }
    let full = DatasetManifest::new(header.name, header.task_noun.unwrap(), header.classes, records);
    sample_one_per_sequence(&full, 901).unwrap()
}

fn cifar_sample() -> DatasetManifest {
    let header = load_header("cifar10");
    let mut records = Vec::new();
    for class_id in header.classes.ids() {
        for i in 0..1000 {
            records.push(ImageRecord::new(format!("cifar10/test/{class_id}/{i:04}.png"), class_id));
        }
    }
    let full = DatasetManifest::new(header.name, header.task_noun.unwrap(), header.classes, records);
    sample_balanced(&full, 100, 10).unwrap()
}

/// Greedy search over single and paired unit moves until
/// `sum(k[c] / n[c])` is within `tol` of `target`.
fn fit(n: &[usize], mut k: Vec<usize>, bounds: &[(usize, usize)], target: f64, tol: f64) -> Vec<usize> {
    let value = |k: &[usize]| k.iter().zip(n).map(|(k, n)| *k as f64 / *n as f64).sum::<f64>();
    for _ in 0..10_000 {
        let current = (value(&k) - target).abs();
        if current <= tol {
            return k;
        }
        let mut best: Option<(f64, Vec<(usize, i64)>)> = None;
        let mut consider = |moves: Vec<(usize, i64)>, k: &[usize]| {
            let mut next = k.to_vec();
            for &(c, d) in &moves {
                let v = next[c] as i64 + d;
                if v < bounds[c].0 as i64 || v > bounds[c].1 as i64 {
                    return;
                }
                next[c] = v as usize;
            }
            let err = (value(&next) - target).abs();
            if best.as_ref().is_none_or(|(e, _)| err < *e) {
                best = Some((err, moves));
            }
        };
        for a in 0..n.len() {
            for d in [-1, 1] {
                consider(vec![(a, d)], &k);
            }
            for b in 0..n.len() {
                if a != b {
                    consider(vec![(a, 1), (b, -1)], &k);
                }
            }
        }
        let (err, moves) = best.expect("some move is legal");
        assert!(err < current, "fit stuck at {current}");
        for (c, d) in moves {
            k[c] = (k[c] as i64 + d) as usize;
        }
    }
    panic!("fit did not converge");
}

#[derive(Debug, Clone, Copy)]
enum TreePlan {
    Correct,
    WrongAt(usize),
    NoMatchAt(usize),
}

#[derive(Debug, Clone, Copy)]
enum ZeroShotPlan {
    Correct,
    Wrong(ClassId),
    NoMatch,
}

fn rng_for(parts: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    let d = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(d[..8].try_into().unwrap()))
}

fn phrase(answer: &str, candidates: &[&str], rng: &mut ChaCha8Rng) -> String {
    let mut cap = answer.to_string();
    if let Some(first) = cap.get_mut(..1) {
        first.make_ascii_uppercase();
    }
    let options = [
        answer.to_string(),
        format!("{cap}."),
        format!("The answer is {answer}."),
        format!("Answer: {answer}"),
        format!("'{answer}'"),
    ];
    let text = options[rng.random_range(0..options.len())].clone();
    match treeprobe_core::engine::extract_answer(&text, candidates) {
        Ok(found) if found == answer => text,
        _ => answer.to_string(),
    }
}

const UNSURE: [&str; 3] = [
    "I can't make that out clearly in this image.",
    "The image is too blurry to tell.",
    "Unclear from the picture.",
];

fn unsure(candidates: &[&str], rng: &mut ChaCha8Rng) -> String {
    let text = UNSURE[rng.random_range(0..UNSURE.len())];
    assert!(treeprobe_core::engine::extract_answer(text, candidates).is_err());
    text.to_string()
}

struct PlanBackend {
    tree: Option<DecisionTree>,
    truth: HashMap<String, ClassId>,
    tree_plans: HashMap<String, TreePlan>,
    zero_shot_plans: HashMap<String, ZeroShotPlan>,
    verify_misses: HashMap<ClassId, Vec<usize>>,
}

impl PlanBackend {
    fn node_reply(&self, tree: &DecisionTree, truth: ClassId, plan: TreePlan, path: &[String], seed: &str) -> String {
        let Some(Resolved::Node(node)) = tree.resolve(path) else {
            panic!("planned path does not resolve");
        };
        let answers = node.answers();
        let truth_path = tree.path_for_class(truth).unwrap().answers();
        let depth = path.len();
        let mut rng = rng_for(&[seed, &path.join("/")]);
        let wrong = |rng: &mut ChaCha8Rng| {
            let right = truth_path[depth].as_str();
            let others: Vec<&str> = answers.iter().copied().filter(|a| *a != right).collect();
            others[rng.random_range(0..others.len())].to_string()
        };
        if depth >= truth_path.len() || path != &truth_path[..depth] {
            let pick = answers[rng.random_range(0..answers.len())];
            return phrase(pick, &answers, &mut rng);
        }
        match plan {
            TreePlan::WrongAt(d) if d == depth => {
                let w = wrong(&mut rng);
                phrase(&w, &answers, &mut rng)
            }
            TreePlan::NoMatchAt(d) if d == depth => unsure(&answers, &mut rng),
            _ => phrase(&truth_path[depth], &answers, &mut rng),
        }
    }
}

impl Backend for PlanBackend {
    fn id(&self) -> &str {
        "plan"
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let image = request.image_ref().unwrap_or_default().to_string();
        let text = match &request.purpose {
            Purpose::Caption => "A photograph.".to_string(),
            Purpose::ZeroShot => {
                let mut rng = rng_for(&[&image, "zero-shot"]);
                match self.zero_shot_plans[&image] {
                    ZeroShotPlan::Correct => {
                        let id = self.truth[&image];
                        [format!("{id}"), format!("Class ID: {id}"), format!("{id}.")][rng.random_range(0..3)].clone()
                    }
                    ZeroShotPlan::Wrong(id) => [format!("{id}"), format!("Class ID: {id}")][rng.random_range(0..2)].clone(),
                    ZeroShotPlan::NoMatch => unsure(&[], &mut rng),
                }
            }
            Purpose::Node { path } => {
                let tree = self.tree.as_ref().unwrap();
                self.node_reply(tree, self.truth[&image], self.tree_plans[&image], path, &image)
            }
            Purpose::Verify { class_id, path } => {
                let tree = self.tree.as_ref().unwrap();
                let depth = path.len();
                let plan = match self.verify_misses.get(class_id) {
                    Some(depths) if depths.contains(&depth) => TreePlan::WrongAt(depth),
                    _ => TreePlan::Correct,
                };
                self.node_reply(tree, *class_id, plan, path, &format!("verify-{class_id}"))
            }
        };
        Ok(ChatResponse {
            text,
            latency_ms: 0,
            backend_id: "plan".into(),
            cached: false,
        })
    }
}

/// Records of each class in manifest order.
fn by_class(manifest: &DatasetManifest) -> BTreeMap<ClassId, Vec<&ImageRecord>> {
    let mut out: BTreeMap<ClassId, Vec<&ImageRecord>> = BTreeMap::new();
    for r in &manifest.records {
        out.entry(r.class_id).or_default().push(r);
    }
    out
}

fn tree_plans(manifest: &DatasetManifest, tree: &DecisionTree, correct: &[usize], rng: &mut ChaCha8Rng) -> HashMap<String, TreePlan> {
    let mut plans = HashMap::new();
    for (class_id, mut records) in by_class(manifest) {
        records.shuffle(rng);
        let len = tree.path_for_class(class_id).unwrap().steps.len();
        for (i, r) in records.iter().enumerate() {
            let plan = if i < correct[class_id as usize] {
                TreePlan::Correct
            } else {
                // Early nodes take most of the blame: weight 1 / (depth + 1).
                let weights: Vec<f64> = (0..len).map(|d| 1.0 / (d + 1) as f64).collect();
                let mut x = rng.random::<f64>() * weights.iter().sum::<f64>();
                let mut depth = 0;
                for (d, w) in weights.iter().enumerate() {
                    if x < *w {
                        depth = d;
                        break;
                    }
                    x -= w;
                }
                if rng.random::<f64>() < 0.06 {
                    TreePlan::NoMatchAt(depth)
                } else {
                    TreePlan::WrongAt(depth)
                }
            };
            plans.insert(r.image_ref.clone(), plan);
        }
    }
    plans
}

fn zero_shot_plans(manifest: &DatasetManifest, correct: &[usize], rng: &mut ChaCha8Rng) -> HashMap<String, ZeroShotPlan> {
    let ids: Vec<ClassId> = manifest.classes.ids().collect();
    let mut plans = HashMap::new();
    for (class_id, mut records) in by_class(manifest) {
        records.shuffle(rng);
        for (i, r) in records.iter().enumerate() {
            let plan = if i < correct[class_id as usize] {
                ZeroShotPlan::Correct
            } else if rng.random::<f64>() < 0.04 {
                ZeroShotPlan::NoMatch
            } else {
                let others: Vec<ClassId> = ids.iter().copied().filter(|c| *c != class_id).collect();
                ZeroShotPlan::Wrong(others[rng.random_range(0..others.len())])
            };
            plans.insert(r.image_ref.clone(), plan);
        }
    }
    plans
}

fn counts(manifest: &DatasetManifest) -> Vec<usize> {
    manifest.class_histogram().values().copied().collect()
}

fn initial(n: &[usize], mean: f64, spread: f64, bounds: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Vec<usize> {
    n.iter()
        .zip(bounds)
        .map(|(n, (lo, hi))| {
            let p = (mean + spread * (rng.random::<f64>() * 2.0 - 1.0)).clamp(0.0, 1.0);
            ((p * *n as f64).round() as usize).clamp(*lo, *hi)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn write_run(
    manifest: &DatasetManifest,
    tree: &DecisionTree,
    tree_correct: &[usize],
    zero_shot_correct: Option<&[usize]>,
    model: &str,
    seed: u64,
    tree_out: &Path,
    zero_shot_out: Option<&Path>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backend = PlanBackend {
        tree: Some(tree.clone()),
        truth: manifest.truth_index(),
        tree_plans: tree_plans(manifest, tree, tree_correct, &mut rng),
        zero_shot_plans: zero_shot_correct.map(|c| zero_shot_plans(manifest, c, &mut rng)).unwrap_or_default(),
        verify_misses: HashMap::new(),
    };
    let settings = EngineSettings {
        model_id: model.into(),
        ..EngineSettings::default()
    };
    let engine = Engine::new(&backend, manifest, settings).with_tree(tree);
    let mut config = RunConfig {
        strategies: vec![Strategy::Tree],
        variants: vec![PromptVariant::baseline()],
        temperatures: vec![0.0],
        runs: 1,
        parallelism: 8,
    };
    let _ = fs::remove_file(tree_out);
    run_batch(&engine, &config, tree_out).unwrap();
    if let Some(out) = zero_shot_out {
        config.strategies = vec![Strategy::ZeroShot];
        let _ = fs::remove_file(out);
        run_batch(&engine, &config, out).unwrap();
    }
}

fn report_mean(path: &Path, manifest: &DatasetManifest, tree: &DecisionTree) -> treeprobe_core::analysis::EvaluationReport {
    let records = read_transcript(path).unwrap();
    compute_metrics(&records, manifest, Some(tree)).unwrap().remove(0)
}

fn main() {
    let root = assets();
    fs::create_dir_all(root.join("replay")).unwrap();
    let gtsrb_tree = load_tree("gtsrb");
    let cifar_tree = load_tree("cifar10");

    let gtsrb = gtsrb_sample();
    assert_eq!(gtsrb.records.len(), 901);
    gtsrb.write(&root.join("datasets/gtsrb_sample.jsonl")).unwrap();
    let cifar = cifar_sample();
    cifar.write(&root.join("datasets/cifar10_sample.jsonl")).unwrap();

    let n = counts(&gtsrb);
    let k = n.len();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let tol = 0.4e-4 * k as f64;

    // GPT-4o: zero-shot first, then the tree constrained by the win set.
    let zs_bounds: Vec<(usize, usize)> = (0..k)
        .map(|c| (0, if TREE_WINS.contains(&(c as ClassId)) { n[c] - 1 } else { n[c] }))
        .collect();
    let zs0 = initial(&n, 0.66, 0.3, &zs_bounds, &mut rng);
    let zs = fit(&n, zs0, &zs_bounds, 0.6578 * k as f64, tol);
    let tree_bounds: Vec<(usize, usize)> = (0..k)
        .map(|c| if TREE_WINS.contains(&(c as ClassId)) { (zs[c] + 1, n[c]) } else { (0, zs[c]) })
        .collect();
    let t0 = initial(&n, 0.52, 0.3, &tree_bounds, &mut rng);
    let tr = fit(&n, t0, &tree_bounds, 0.5205 * k as f64, tol);
    let replay = root.join("replay");
    write_run(
        &gtsrb,
        &gtsrb_tree,
        &tr,
        Some(&zs),
        "gpt-4o",
        1,
        &replay.join("gtsrb_gpt4o_tree_t0.jsonl"),
        Some(&replay.join("gtsrb_gpt4o_zero_shot_t0.jsonl")),
    );

    // Qwen: no per-class constraint.
    let free: Vec<(usize, usize)> = n.iter().map(|n| (0, *n)).collect();
    let q_zs0 = initial(&n, 0.40, 0.3, &free, &mut rng);
    let q_zs = fit(&n, q_zs0, &free, 0.4018 * k as f64, tol);
    let q_t0 = initial(&n, 0.32, 0.3, &free, &mut rng);
    let q_tr = fit(&n, q_t0, &free, 0.3218 * k as f64, tol);
    write_run(
        &gtsrb,
        &gtsrb_tree,
        &q_tr,
        Some(&q_zs),
        "qwen-vl-max",
        2,
        &replay.join("gtsrb_qwen_tree_t0.jsonl"),
        Some(&replay.join("gtsrb_qwen_zero_shot_t0.jsonl")),
    );

    write_run(
        &cifar,
        &cifar_tree,
        &CIFAR_TREE_CORRECT,
        None,
        "gpt-4o",
        3,
        &replay.join("cifar10_gpt4o_tree_t0.jsonl"),
        None,
    );

    // Knowledge verification over every GTSRB class.
    let backend = PlanBackend {
        tree: Some(gtsrb_tree.clone()),
        truth: HashMap::new(),
        tree_plans: HashMap::new(),
        zero_shot_plans: HashMap::new(),
        verify_misses: VERIFY_MISSES.iter().map(|(c, d)| (*c, d.to_vec())).collect(),
    };
    let classes: Vec<ClassVerification> = gtsrb_tree
        .classes
        .ids()
        .map(|c| verify_knowledge(&gtsrb_tree, c, &backend, "gpt-4o").unwrap())
        .collect();
    let mut body = String::new();
    for c in &classes {
        body.push_str(&serde_json::to_string(c).unwrap());
        body.push('\n');
    }
    fs::write(replay.join("gtsrb_verification.jsonl"), body).unwrap();
    let report = VerificationReport::from_classes(classes);
    println!("verification {}", report.summary_line());

    let t = report_mean(&replay.join("gtsrb_gpt4o_tree_t0.jsonl"), &gtsrb, &gtsrb_tree);
    let z = report_mean(&replay.join("gtsrb_gpt4o_zero_shot_t0.jsonl"), &gtsrb, &gtsrb_tree);
    let cmp = compare_strategies(&t, &z).unwrap();
    println!(
        "gpt-4o tree={} zero_shot={} tree_wins={}",
        percent(t.mean_accuracy),
        percent(z.mean_accuracy),
        cmp.wins_a
    );
    let qt = report_mean(&replay.join("gtsrb_qwen_tree_t0.jsonl"), &gtsrb, &gtsrb_tree);
    let qz = report_mean(&replay.join("gtsrb_qwen_zero_shot_t0.jsonl"), &gtsrb, &gtsrb_tree);
    println!("qwen tree={} zero_shot={}", percent(qt.mean_accuracy), percent(qz.mean_accuracy));
    let c = report_mean(&replay.join("cifar10_gpt4o_tree_t0.jsonl"), &cifar, &cifar_tree);
    println!("cifar tree={} images={}", percent(c.mean_accuracy), c.n_correct);
}
