//! Experiment configuration: JSON documents binding a model, policies, an
//! algorithm and an ensemble plan, plus the content hash stamped into every
//! output.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EtdError, Result};
use crate::mdp::{builtin, MdpModel, ModelDocument, PolicyPair};
use crate::stats::ExperimentPlan;

/// Model reference: a named builtin or a fully inlined document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Builtin { builtin: String },
    Inline(Box<ModelDocument>),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<(MdpModel, PolicyPair)> {
        match self {
            ModelSpec::Builtin { builtin: name } => builtin(name),
            ModelSpec::Inline(doc) => doc.as_ref().clone().into_parts(),
        }
    }
}

/// State weighting used when assembling the key matrix and vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisWeighting {
    /// Emphasis weights induced by interest and the follow-on trace.
    #[default]
    Emphasis,
    /// Plain behavior-policy stationary weights (the TD fixed point).
    Behavior,
}

/// Optional deterministic-flow integration emitted by `analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeSpec {
    pub horizon: f64,
    pub dt: f64,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub plan: Option<ExperimentPlan>,
    #[serde(default)]
    pub weighting: AnalysisWeighting,
    #[serde(default)]
    pub ode: Option<OdeSpec>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(&mut de)
            .map_err(|e| EtdError::Config(format!("at key \"{}\": {}", e.path(), e.inner())))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical serialization; identical configs hash
    /// identically regardless of input formatting.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_vec(self)?;
        let digest = Sha256::digest(&canonical);
        Ok(hex::encode(digest))
    }

    pub fn require_plan(&self) -> Result<&ExperimentPlan> {
        self.plan
            .as_ref()
            .ok_or_else(|| EtdError::Config("this command requires a \"plan\" section".into()))
    }
}
