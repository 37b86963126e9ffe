use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agents::{AgentMode, LlmClient, ResponseSchema, TaskSpec};
use crate::error::{Error, Result};
use crate::surrogate::{Family, LossKind, ModelSpec};

use super::history::History;
use super::Action;

/// Optimizer settings applied to every proposed architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Recipe {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Recipe {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 64,
            seed: 0,
        }
    }
}

const ARCHITECTURES: [(Family, usize, usize, usize); 4] = [
    (Family::PlainMlp, 256, 2, 0),
    (Family::ResidualMlp, 256, 4, 0),
    (Family::SeResidualMlp, 256, 4, 16),
    (Family::ResidualMlp, 512, 6, 0),
];

/// The deterministic search order: four architectures, each paired with
/// both losses, alternating which loss comes first.
pub fn ladder(input_dim: usize, output_dim: usize, recipe: &Recipe) -> Vec<ModelSpec> {
    let n = ARCHITECTURES.len();
    (0..2 * n)
        .map(|p| {
            let (family, hidden, blocks, se) = ARCHITECTURES[p % n];
            let loss = if (p + p / n) % 2 == 0 {
                LossKind::Mse
            } else {
                LossKind::SmoothL1
            };
            let mut spec = ModelSpec::new(family, input_dim, output_dim, hidden, blocks)
                .with_loss(loss)
                .with_training(recipe.learning_rate, recipe.epochs, recipe.batch_size);
            if se > 0 {
                spec = spec.with_se_reduction(se);
            }
            spec
        })
        .collect()
}

/// Model ids look like `m03-r07@plain-mlp:256x2:mse`; the part after `@`
/// is the architecture signature.
pub fn signature_of_model_id(id: &str) -> Option<&str> {
    id.split_once('@').map(|(_, sig)| sig)
}

fn tried_signatures(history: &History) -> HashSet<String> {
    history
        .events()
        .iter()
        .filter(|e| e.action == Action::Generate)
        .filter_map(|e| e.model_id.as_deref().and_then(signature_of_model_id))
        .map(String::from)
        .collect()
}

fn generation_seed(recipe: &Recipe, history: &History) -> u64 {
    let generated = history
        .events()
        .iter()
        .filter(|e| e.action == Action::Generate)
        .count() as u64;
    recipe.seed.wrapping_add(generated)
}

fn propose_ladder(task: &TaskSpec, history: &History, recipe: &Recipe) -> Result<ModelSpec> {
    let tried = tried_signatures(history);
    ladder(task.input_dim, task.output_dim, recipe)
        .into_iter()
        .find(|s| !tried.contains(&s.signature()))
        .map(|s| s.with_seed(generation_seed(recipe, history)))
        .ok_or(Error::ExplorationExhausted)
}

const PROPOSER_SYSTEM: &str = "You design neural surrogate models. Given the task description \
and the history of models already trained, propose the next architecture to try. Prefer \
architectures not yet in the history. Reply with a JSON object only.";

fn proposal_schema() -> ResponseSchema {
    ResponseSchema::new(
        "model proposal",
        json!({
            "type": "object",
            "required": ["family", "hidden_dim", "n_blocks", "loss"],
            "properties": {
                "family": {"enum": ["plain-mlp", "residual-mlp", "se-residual-mlp"]},
                "hidden_dim": {"type": "integer", "minimum": 1, "maximum": 4096},
                "n_blocks": {"type": "integer", "minimum": 1, "maximum": 32},
                "loss": {"enum": ["mse", "smooth-l1"]},
                "se_reduction": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "epochs": {"type": "integer", "minimum": 1, "maximum": 5000},
                "batch_size": {"type": "integer", "minimum": 1, "maximum": 65536}
            }
        }),
    )
    .expect("static schema compiles")
}

fn spec_from_reply(v: &Value, task: &TaskSpec, recipe: &Recipe) -> std::result::Result<ModelSpec, String> {
    let family: Family = serde_json::from_value(v["family"].clone()).map_err(|e| e.to_string())?;
    let loss: LossKind = serde_json::from_value(v["loss"].clone()).map_err(|e| e.to_string())?;
    let int = |key: &str, default: usize| v[key].as_u64().map_or(default, |n| n as usize);
    let mut spec = ModelSpec::new(
        family,
        task.input_dim,
        task.output_dim,
        int("hidden_dim", 0),
        int("n_blocks", 0),
    )
    .with_loss(loss)
    .with_training(
        v["learning_rate"].as_f64().unwrap_or(recipe.learning_rate),
        int("epochs", recipe.epochs),
        int("batch_size", recipe.batch_size),
    );
    if family == Family::SeResidualMlp {
        spec = spec.with_se_reduction(int("se_reduction", 16));
    }
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn propose_llm(client: &LlmClient, task: &TaskSpec, history: &History, recipe: &Recipe) -> Result<ModelSpec> {
    let prompt = format!(
        "{}\n\nModels and results so far:\n{}",
        task.aide_task_description,
        history.to_json()?
    );
    let check = |v: &Value| spec_from_reply(v, task, recipe).map(|_| ());
    let reply = client.structured(PROPOSER_SYSTEM, &prompt, &proposal_schema(), &check)?;
    let spec = spec_from_reply(&reply, task, recipe).map_err(Error::Domain)?;
    Ok(spec.with_seed(generation_seed(recipe, history)))
}

/// Next architecture to train. LLM proposals that keep failing validation
/// fall back to the ladder.
pub fn propose_model_spec(
    task: &TaskSpec,
    history: &History,
    mode: AgentMode,
    client: Option<&LlmClient>,
    recipe: &Recipe,
) -> Result<ModelSpec> {
    let (AgentMode::Llm, Some(client)) = (mode, client) else {
        return propose_ladder(task, history, recipe);
    };
    match propose_llm(client, task, history, recipe) {
        Err(e @ (Error::Transport { .. } | Error::Schema { .. } | Error::LlmConfig(_))) => {
            log::warn!("proposer LLM unavailable ({e}); using the architecture ladder");
            propose_ladder(task, history, recipe)
        }
        other => other,
    }
}
