//! Hierarchical (decision-tree) and zero-shot image classification with
//! chat-vision model backends.
//!
//! The crate is organised around the flow of an evaluation run:
//!
//! - [`tree`]: question trees, their canonical document format and checks
//! - [`datasets`]: image manifests, class descriptions and sampling
//! - [`prompting`]: every prompt sent to a backend
//! - [`backends`]: live HTTP, scripted and simulated responders plus caching
//! - [`engine`]: answer extraction, tree traversal and batch transcripts
//! - [`analysis`]: metrics, knowledge verification and error propagation

pub mod analysis;
pub mod backends;
pub mod datasets;
pub mod engine;
pub mod prompting;
pub mod tree;

pub use tree::{
    parse_tree, render_tree, tree_stats, validate_tree, Branch, BranchTarget, ClassId, ClassLabel,
    ClassPath, ClassSet, DecisionTree, IssueCode, NodePath, RenderFormat, Severity, TreeError,
    TreeNode, TreeStats, ValidationIssue,
};
pub use analysis::{AnalysisError, Comparison, EvaluationReport, PropagationModel, VerificationReport};
pub use backends::{Backend, BackendError, ChatRequest, ChatResponse, ErrorModel, Purpose};
pub use datasets::{ClassDescriptionSet, DatasetError, DatasetManifest, ImageRecord};
pub use engine::{Engine, EngineError, EngineSettings, RunConfig, TranscriptRecord};
pub use prompting::{PromptVariant, RenderedPrompt, Strategy};
