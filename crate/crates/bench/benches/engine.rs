use std::hint::black_box;
use std::path::PathBuf;

use criterion::{criterion_group, criterion_main, Criterion};

use treeprobe_core::analysis::monte_carlo_leaf_accuracy;
use treeprobe_core::backends::{MockScript, ScriptedMock};
use treeprobe_core::datasets::load_manifest;
use treeprobe_core::engine::{extract_answer, extract_class_id};
use treeprobe_core::{parse_tree, DecisionTree, Engine, EngineSettings, PropagationModel, Strategy};

fn asset(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets").join(rel)
}

fn tree(name: &str) -> DecisionTree {
    parse_tree(&std::fs::read_to_string(asset(&format!("trees/{name}.json"))).unwrap()).unwrap()
}

fn extraction(c: &mut Criterion) {
    let candidates = ["yes", "no", "red border", "blue circle", "triangle pointing down"];
    let reply = "Looking at the sign, the shape is round and the rim is painted. \
                 Overall I would say it has a red border rather than a blue circle.";
    c.bench_function("extract_answer", |b| b.iter(|| extract_answer(black_box(reply), &candidates)));

    let ids: Vec<u32> = (0..43).collect();
    let reply = "The image shows a speed limit sign, so the answer is Class ID: 7 (100 km/h).";
    c.bench_function("extract_class_id", |b| b.iter(|| extract_class_id(black_box(reply), &ids)));
}

fn traversal(c: &mut Criterion) {
    let tree = tree("gtsrb");
    let manifest = load_manifest(&asset("datasets/gtsrb_sample.jsonl")).unwrap();
    let backend = ScriptedMock::new("mock", MockScript::perfect(&manifest, Some(&tree)));
    let engine = Engine::new(&backend, &manifest, EngineSettings::default()).with_tree(&tree);
    let images = &manifest.records[..64];
    c.bench_function("classify_tree_gtsrb_64", |b| {
        b.iter(|| {
            for image in images {
                black_box(engine.classify_tree(image, Strategy::Tree, 0.0, 0));
            }
        })
    });
}

fn monte_carlo(c: &mut Criterion) {
    let tree = tree("gtsrb");
    let model = PropagationModel::uniform(0.9);
    c.bench_function("monte_carlo_gtsrb_1e5", |b| {
        b.iter(|| monte_carlo_leaf_accuracy(&tree, &model, black_box(100_000), 7).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = extraction, traversal, monte_carlo
}
criterion_main!(benches);
