use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};

use treeprobe_core::backends::{
    CachedBackend, LiveBackend, LiveConfig, MisrouteRule, MockScript, ResponseCache, ScriptedMock, Simulator,
};
use treeprobe_core::{Backend, DatasetManifest, DecisionTree, ErrorModel};

use crate::config::Settings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// Rule-driven scripted replies.
    Mock,
    /// Seeded answers drawn from an error model.
    Simulator,
    /// Chat-completions HTTP endpoint.
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Misroute {
    Uniform,
    Adjacent,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendKind,
    /// Mock rules (JSON). Rules from the file are tried before --perfect rules.
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    /// Mock answers every request truthfully.
    #[arg(long)]
    pub perfect: bool,
    #[command(flatten)]
    pub model: ErrorModelArgs,
    /// Chat-completions URL for the live backend.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model id sent to the backend.
    #[arg(long)]
    pub model_id: Option<String>,
    /// Name of the environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
}

/// Node accuracy for the simulator and the propagation model.
#[derive(Debug, Clone, Args)]
pub struct ErrorModelArgs {
    /// Accuracy at every node without a per-depth value.
    #[arg(long)]
    pub accuracy: Option<f64>,
    /// Per-depth accuracies, e.g. `0=0.95,1=0.9`.
    #[arg(long, value_parser = parse_per_depth)]
    pub per_depth: Option<BTreeMap<usize, f64>>,
    /// Error model as JSON; overrides --accuracy and --per-depth.
    #[arg(long)]
    pub error_model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "uniform")]
    pub misroute: Misroute,
}

fn parse_per_depth(s: &str) -> Result<BTreeMap<usize, f64>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|pair| {
            let (d, p) = pair.split_once('=').ok_or_else(|| format!("{pair:?} is not depth=accuracy"))?;
            let d = d.trim().parse::<usize>().map_err(|e| format!("{d:?}: {e}"))?;
            let p = p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))?;
            Ok((d, p))
        })
        .collect()
}

impl ErrorModelArgs {
    pub fn error_model(&self) -> anyhow::Result<ErrorModel> {
        let model = match &self.error_model {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => {
                if self.accuracy.is_none() && self.per_depth.is_none() {
                    bail!("give --accuracy, --per-depth or --error-model");
                }
                ErrorModel {
                    per_depth_accuracy: self.per_depth.clone().unwrap_or_default(),
                    default_accuracy: self.accuracy.unwrap_or(1.0),
                    misroute_rule: match self.misroute {
                        Misroute::Uniform => MisrouteRule::UniformOther,
                        Misroute::Adjacent => MisrouteRule::AdjacentAnswer,
                    },
                }
            }
        };
        model.validate().map_err(|e| anyhow::anyhow!("error model: {e}"))?;
        Ok(model)
    }
}

/// What the backend will be asked about; decides which perfect script to build.
pub enum Workload<'a> {
    Classify {
        manifest: &'a DatasetManifest,
        tree: Option<&'a DecisionTree>,
    },
    Verify {
        tree: &'a DecisionTree,
    },
}

pub fn build(args: &BackendArgs, settings: &Settings, work: Workload<'_>) -> anyhow::Result<Arc<dyn Backend>> {
    let inner: Arc<dyn Backend> = match args.backend {
        BackendKind::Mock => {
            let mut script = match &args.mock_script {
                Some(path) => MockScript::load(path).map_err(anyhow::Error::msg)?,
                None => MockScript::default(),
            };
            if args.perfect {
                let perfect = match work {
                    Workload::Classify { manifest, tree } => MockScript::perfect(manifest, tree),
                    Workload::Verify { tree } => MockScript::perfect_verification(tree),
                };
                script.rules.extend(perfect.rules);
            } else if args.mock_script.is_none() {
                bail!("the mock backend needs --mock-script or --perfect");
            }
            Arc::new(ScriptedMock::new("mock", script))
        }
        BackendKind::Simulator => {
            let model = args.model.error_model()?;
            let sim = Simulator::new("simulator", model, settings.seed).map_err(|e| anyhow::anyhow!("{e}"))?;
            let sim = match work {
                Workload::Classify { manifest, tree } => {
                    let sim = sim.with_truth(manifest.truth_index(), manifest.classes.ids().collect());
                    match tree {
                        Some(t) => sim.with_tree(t.clone()),
                        None => sim,
                    }
                }
                Workload::Verify { tree } => sim.with_tree(tree.clone()),
            };
            Arc::new(sim)
        }
        BackendKind::Live => {
            let endpoint = args
                .endpoint
                .clone()
                .or_else(|| settings.endpoint.clone())
                .context("the live backend needs --endpoint or an endpoint in the config")?;
            let mut config = LiveConfig::new(endpoint);
            if let Some(name) = args.api_key_env.clone().or_else(|| settings.api_key_env.clone()) {
                config.api_key_env = name;
            }
            if let Some(ms) = settings.timeout_ms {
                config.timeout_ms = ms;
            }
            if let Some(ms) = settings.min_interval_ms {
                config.min_interval_ms = ms;
            }
            Arc::new(LiveBackend::new(config))
        }
    };
    match &settings.cache_dir {
        Some(dir) => {
            let cache = ResponseCache::open(dir).map_err(|e| anyhow::anyhow!("cache {}: {e}", dir.display()))?;
            Ok(Arc::new(CachedBackend::new(inner, cache)))
        }
        None => Ok(inner),
    }
}
