use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use metagent_core::agents::{AgentMode, LlmConfig};
use metagent_core::controller::{BudgetPolicy, Recipe, TestStrategy};
use metagent_core::neural_adjoint::NAConfig;
use metagent_core::oracle::OracleConfig;
use metagent_core::surrogate::TrainOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSettings {
    pub planner: AgentMode,
    pub controller: AgentMode,
    pub proposer: AgentMode,
    /// Replay replies from a mock script instead of calling an endpoint.
    pub mock_script: Option<PathBuf>,
    pub client: LlmConfig,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            planner: AgentMode::Deterministic,
            controller: AgentMode::Deterministic,
            proposer: AgentMode::Deterministic,
            mock_script: None,
            client: LlmConfig::default(),
        }
    }
}

impl LlmSettings {
    pub fn any_llm(&self) -> bool {
        [self.planner, self.controller, self.proposer].contains(&AgentMode::Llm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSettings {
    pub patience: usize,
    pub min_delta: f64,
    pub plateau_patience: usize,
    pub pooled_output_std: bool,
    pub max_steps: usize,
    pub test_strategy: TestStrategy,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            patience: t.patience,
            min_delta: t.min_delta,
            plateau_patience: t.plateau_patience,
            pooled_output_std: t.pooled_output_std,
            max_steps: t.max_steps,
            test_strategy: TestStrategy::default(),
        }
    }
}

impl TrainingSettings {
    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            patience: self.patience,
            min_delta: self.min_delta,
            plateau_patience: self.plateau_patience,
            pooled_output_std: self.pooled_output_std,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    /// Held-out targets used for the error distribution.
    pub n_targets: usize,
    /// Candidates re-simulated per target.
    pub top_m: usize,
    /// Optional labelled file to draw held-out targets from. Without it,
    /// synthetic oracles sample fresh geometries and file-backed pools use
    /// their validation rows.
    pub test_set: Option<PathBuf>,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            n_targets: 100,
            top_m: 1,
            test_set: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Overrides the oracle, recipe and inverse-design seeds when set.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub k0: usize,
    /// Size the fixed pool is expected to have; a smaller file is an error.
    pub declared_pool_size: Option<usize>,
    pub oracle: OracleConfig,
    pub budgets: BudgetPolicy,
    pub recipe: Recipe,
    pub training: TrainingSettings,
    pub na: NAConfig,
    pub llm: LlmSettings,
    pub evaluation: EvaluationSettings,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: PathBuf::from("out"),
            k0: 550,
            declared_pool_size: None,
            oracle: OracleConfig::default(),
            budgets: BudgetPolicy::default(),
            recipe: Recipe::default(),
            training: TrainingSettings::default(),
            na: NAConfig::default(),
            llm: LlmSettings::default(),
            evaluation: EvaluationSettings::default(),
        }
    }
}

impl EngineConfig {
    /// Reads a JSON config (or the defaults when `path` is `None`) and applies
    /// `key.path=value` overrides. Values parse as JSON when they can and are
    /// taken as strings otherwise.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => serde_json::to_value(Self::default())?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: Self = serde_json::from_value(value).context("invalid engine config")?;
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.oracle.seed = s;
            self.recipe.seed = s;
            self.na.seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.oracle.validate()?;
        self.budgets.validate()?;
        self.na.validate()?;
        if self.k0 < 11 {
            bail!("k0 must be at least 11, got {}", self.k0);
        }
        if self.k0 > self.budgets.data_budget {
            bail!("k0 = {} exceeds budgets.data_budget = {}", self.k0, self.budgets.data_budget);
        }
        if self.evaluation.top_m == 0 {
            bail!("evaluation.top_m must be at least 1");
        }
        Ok(())
    }
}

fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override `{assignment}` is not key=value"))?;
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            _ => bail!("override `{key}`: `{}` is not an object", parts[..i].join(".")),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), new);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    bail!("empty override key")
}
