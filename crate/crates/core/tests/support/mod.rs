//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};
use treeprobe_core::datasets::ManifestHeader;
use treeprobe_core::tree::{parse_tree, BranchTarget, ClassId, DecisionTree, TreeNode};
use treeprobe_core::{ClassDescriptionSet, DatasetManifest};

pub fn asset(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets").join(rel)
}

pub fn tree(name: &str) -> DecisionTree {
    parse_tree(&std::fs::read_to_string(asset(&format!("trees/{name}.json"))).unwrap()).unwrap()
}

pub fn header(name: &str) -> ManifestHeader {
    serde_json::from_str(&std::fs::read_to_string(asset(&format!("datasets/{name}_classes.json"))).unwrap()).unwrap()
}

pub fn sample(name: &str) -> DatasetManifest {
    treeprobe_core::datasets::load_manifest(&asset(&format!("datasets/{name}_sample.jsonl"))).unwrap()
}

pub fn descriptions(name: &str, manifest: &DatasetManifest) -> ClassDescriptionSet {
    treeprobe_core::datasets::load_descriptions(&asset(&format!("descriptions/{name}.jsonl")), &manifest.classes).unwrap()
}

/// Brute-force leaf probabilities: walks every branch sequence with
/// "p for the branch towards the truth, the rest split evenly" and sums
/// the mass landing on leaves labelled with the true class.
pub fn enumerate_leaf_accuracy(tree: &DecisionTree, p_at: &dyn Fn(usize) -> f64) -> BTreeMap<ClassId, f64> {
    fn contains(node: &TreeNode, class_id: ClassId) -> bool {
        node.branches.iter().any(|b| match &b.target {
            BranchTarget::Leaf(id) => *id == class_id,
            BranchTarget::Node(child) => contains(child, class_id),
        })
    }
    fn walk(node: &TreeNode, class_id: ClassId, mass: f64, p_at: &dyn Fn(usize) -> f64, out: &mut f64) {
        let n = node.branches.len();
        let on_path: Vec<bool> = node
            .branches
            .iter()
            .map(|b| match &b.target {
                BranchTarget::Leaf(id) => *id == class_id,
                BranchTarget::Node(child) => contains(child, class_id),
            })
            .collect();
        let has_truth = on_path.iter().any(|x| *x);
        for (i, branch) in node.branches.iter().enumerate() {
            let q = if !has_truth {
                1.0 / n as f64
            } else if n == 1 {
                1.0
            } else if on_path[i] {
                p_at(node.depth)
            } else {
                (1.0 - p_at(node.depth)) / (n - 1) as f64
            };
            match &branch.target {
                BranchTarget::Leaf(id) => {
                    if *id == class_id {
                        *out += mass * q;
                    }
                }
                BranchTarget::Node(child) => walk(child, class_id, mass * q, p_at, out),
            }
        }
    }
    tree.classes
        .ids()
        .map(|c| {
            let mut total = 0.0;
            walk(&tree.root, c, 1.0, p_at, &mut total);
            (c, total)
        })
        .collect()
}

/// Minimal chat-completions endpoint on 127.0.0.1.
///
/// Node prompts get the first offered answer, everything else gets
/// "Class ID: 3". The first `fail_first` requests are answered with HTTP
/// 429 to exercise retries.
pub struct StubServer {
    pub url: String,
    /// Successful completions served.
    pub served: Arc<AtomicUsize>,
    /// Request bodies answered with 200, with how often each was answered.
    pub bodies: Arc<Mutex<HashMap<String, usize>>>,
    /// Authorization header values seen.
    pub auth: Arc<Mutex<Vec<String>>>,
}

impl StubServer {
    pub fn start(fail_first: usize) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let served = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(HashMap::new()));
        let auth = Arc::new(Mutex::new(Vec::new()));
        let failures = Arc::new(AtomicUsize::new(fail_first));
        let (s, b, a) = (served.clone(), bodies.clone(), auth.clone());
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let (s, b, a, f) = (s.clone(), b.clone(), a.clone(), failures.clone());
                thread::spawn(move || serve(stream, &s, &b, &a, &f));
            }
        });
        Self { url, served, bodies, auth }
    }

    pub fn duplicate_bodies(&self) -> usize {
        self.bodies.lock().unwrap().values().filter(|n| **n > 1).count()
    }
}

fn serve(
    stream: TcpStream,
    served: &AtomicUsize,
    bodies: &Mutex<HashMap<String, usize>>,
    auth: &Mutex<Vec<String>>,
    failures: &AtomicUsize,
) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let mut length = 0usize;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((name, value)) = line.split_once(':') {
                match name.trim().to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap_or(0),
                    "authorization" => auth.lock().unwrap().push(value.trim().to_string()),
                    _ => {}
                }
            }
        }
        let mut body = vec![0u8; length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let body = String::from_utf8_lossy(&body).into_owned();
        let (status, reply) = if !request_line.starts_with("POST ") {
            (404, json!({"error": "not found"}))
        } else if failures
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
        {
            (429, json!({"error": {"message": "slow down"}}))
        } else {
            match completion(&body) {
                Some(text) => {
                    served.fetch_add(1, Ordering::SeqCst);
                    *bodies.lock().unwrap().entry(body.clone()).or_insert(0) += 1;
                    (200, json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}))
                }
                None => (400, json!({"error": {"message": "bad request shape"}})),
            }
        };
        let payload = reply.to_string();
        let reason = match status {
            200 => "OK",
            400 => "Bad Request",
            404 => "Not Found",
            _ => "Too Many Requests",
        };
        let head = format!(
            "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            payload.len()
        );
        if writer.write_all(head.as_bytes()).and_then(|_| writer.write_all(payload.as_bytes())).is_err() {
            return;
        }
    }
}

/// Checks the request shape and picks a reply.
fn completion(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    v.get("model")?.as_str()?;
    v.get("temperature")?.as_f64()?;
    let content = v.get("messages")?.get(0)?.get("content")?.as_array()?;
    let text = content.iter().find(|c| c["type"] == "text")?.get("text")?.as_str()?;
    let image = content.iter().find(|c| c["type"] == "image_url")?;
    if !image["image_url"]["url"].as_str()?.starts_with("data:image/") {
        return None;
    }
    const MARK: &str = "Choose one of these answers: ['";
    Some(match text.rfind(MARK) {
        Some(at) => {
            let rest = &text[at + MARK.len()..];
            rest[..rest.find('\'')?].to_string()
        }
        None => "Class ID: 3".to_string(),
    })
}
