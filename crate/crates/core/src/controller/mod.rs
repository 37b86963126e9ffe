//! The forward-modelling loop: decide, grow data, propose or retrain, log.

mod decide;
mod forward_train;
mod history;
mod propose;

pub use decide::{decide, decide_deterministic};
pub use forward_train::{forward_train, ForwardTrainConfig, ForwardTrainOutcome, TestStrategy};
pub use history::{History, HistoryEvent, INITIALIZATION_REASON};
pub use propose::{ladder, propose_model_spec, signature_of_model_id, Recipe};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Generate,
    Test,
    Done,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Generate => "generate",
            Action::Test => "test",
            Action::Done => "done",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerDecision {
    pub action: Action,
    pub k_next: usize,
    pub reason: String,
    /// Set when an LLM decision was replaced by the deterministic rules.
    #[serde(default)]
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetPolicy {
    pub max_rounds: usize,
    pub data_budget: usize,
    pub target_metric: f64,
    /// A test round counts as saturated when its relative improvement per
    /// added sample falls below this fraction of the previous rate.
    pub saturation_ratio: f64,
}

impl Default for BudgetPolicy {
    fn default() -> Self {
        Self {
            max_rounds: 50,
            data_budget: 50_000,
            target_metric: 2e-3,
            saturation_ratio: 0.1,
        }
    }
}

impl BudgetPolicy {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.max_rounds == 0 {
            bad.push("max_rounds must be positive".to_string());
        }
        if self.data_budget == 0 {
            bad.push("data_budget must be positive".to_string());
        }
        if !(self.target_metric >= 0.0) {
            bad.push(format!("target_metric must be non-negative, got {}", self.target_metric));
        }
        if !(self.saturation_ratio > 0.0 && self.saturation_ratio < 1.0) {
            bad.push(format!(
                "saturation_ratio must lie in (0, 1), got {}",
                self.saturation_ratio
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(bad))
        }
    }
}
