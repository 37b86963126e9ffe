//! Intake: turn a user query plus answers into a validated [`TaskSpec`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::domain::{DEFAULT_GEOMETRY_DIM, DEFAULT_SPECTRUM_LEN};
use crate::error::{Error, Result};
use crate::surrogate::load_bundle;

use super::llm::{LlmClient, ResponseSchema};
use super::AgentMode;

/// Answers to intake questions, keyed by [`TaskSpec`] field name.
pub type Answers = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMode {
    TargetMse,
    FixedDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Plan {
    ForwardOnly,
    InverseOnly,
    Both,
}

impl Plan {
    pub fn trains_forward(self) -> bool {
        matches!(self, Plan::ForwardOnly | Plan::Both)
    }

    pub fn runs_inverse(self) -> bool {
        matches!(self, Plan::InverseOnly | Plan::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub target_metric: f64,
    pub target_spectrum_path: Option<PathBuf>,
    pub dataset_path: Option<PathBuf>,
    /// Existing forward model to reuse for inverse-only plans.
    pub bundle_path: Option<PathBuf>,
    pub mode: TaskMode,
    pub plan: Plan,
    pub aide_task_description: String,
}

impl TaskSpec {
    /// Checks the structural invariants, listing every missing field.
    pub fn validate(&self) -> Result<()> {
        let mut missing = Vec::new();
        if self.plan.runs_inverse() && self.target_spectrum_path.is_none() {
            missing.push("target_spectrum_path".to_string());
        }
        if self.plan == Plan::InverseOnly && self.bundle_path.is_none() {
            missing.push("bundle_path".to_string());
        }
        if self.mode == TaskMode::FixedDataset && self.dataset_path.is_none() {
            missing.push("dataset_path".to_string());
        }
        if !missing.is_empty() {
            return Err(Error::MissingInput(missing));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Domain("task dimensions must be positive".into()));
        }
        if !(self.target_metric >= 0.0) {
            return Err(Error::Domain(format!(
                "target metric must be non-negative, got {}",
                self.target_metric
            )));
        }
        Ok(())
    }
}

/// The model-search brief handed to the proposer.
pub fn aide_task_description(
    input_dim: usize,
    output_dim: usize,
    target_metric: f64,
    mode: TaskMode,
) -> String {
    let data = match mode {
        TaskMode::TargetMse => "The dataset grows between rounds as the controller requests more samples.",
        TaskMode::FixedDataset => "The dataset is fixed; no new samples can be generated.",
    };
    format!(
        "Train a forward surrogate that maps a {input_dim}-dimensional geometry vector to a \
         {output_dim}-point spectrum.\n\
         Evaluation metric: mean squared error on the validation split (every 11th pair), \
         target {target_metric:e}.\n\
         {data}\n\
         Possible solutions: plain MLP, residual MLP, residual MLP with squeeze-and-excitation \
         gating; ReLU activations; MSE or smooth-L1 loss; Adam optimizer."
    )
}

fn metric_patterns() -> &'static [Regex; 2] {
    static RE: OnceLock<[Regex; 2]> = OnceLock::new();
    RE.get_or_init(|| {
        [
            // 2\times10^{-3}, 2 x 10^-3, 2×10^(−3)
            Regex::new(r"(\d+(?:\.\d+)?)\s*(?:\\times|×|x|\*)\s*10\s*\^\s*[{(]?\s*([-+−]?\d+)\s*[})]?")
                .unwrap(),
            Regex::new(r"\d+(?:\.\d+)?[eE][-+]?\d+|\b0\.\d+").unwrap(),
        ]
    })
}

/// Pulls a metric target such as `2\times10^{-3}` or `2e-3` out of free text.
/// Text after the first mention of "MSE" is preferred.
pub fn extract_target_metric(query: &str) -> Option<f64> {
    let tail = query
        .to_ascii_lowercase()
        .find("mse")
        .map_or(query, |i| &query[i..]);
    [tail, query].into_iter().find_map(scan_metric)
}

fn scan_metric(text: &str) -> Option<f64> {
    let [sci, plain] = metric_patterns();
    let a = sci.captures(text).and_then(|c| {
        let mantissa: f64 = c[1].parse().ok()?;
        let exp: i32 = c[2].replace('−', "-").parse().ok()?;
        Some((c.get(0)?.start(), mantissa * 10f64.powi(exp)))
    });
    let b = plain
        .find(text)
        .and_then(|m| Some((m.start(), m.as_str().parse::<f64>().ok()?)));
    match (a, b) {
        (Some(x), Some(y)) => Some(if x.0 <= y.0 { x.1 } else { y.1 }),
        (x, y) => x.or(y).map(|v| v.1),
    }
}

fn bundle_is_valid(path: &Path, input_dim: usize, output_dim: usize) -> bool {
    load_bundle(path)
        .map(|b| b.is_trained() && b.input_dim() == input_dim && b.output_dim() == output_dim)
        .unwrap_or(false)
}

/// Plan selection when the user did not choose one: an existing target and
/// a loadable bundle mean inverse design only; no target means forward
/// modelling only; anything else does both.
pub fn fallback_plan(
    target: Option<&Path>,
    bundle: Option<&Path>,
    input_dim: usize,
    output_dim: usize,
) -> Plan {
    match (target, bundle) {
        (None, _) => Plan::ForwardOnly,
        (Some(_), Some(b)) if bundle_is_valid(b, input_dim, output_dim) => Plan::InverseOnly,
        _ => Plan::Both,
    }
}

fn parse_answer<T: std::str::FromStr>(answers: &Answers, key: &str) -> Result<Option<T>> {
    answers
        .get(key)
        .map(|raw| {
            raw.trim()
                .parse::<T>()
                .map_err(|_| Error::Domain(format!("answer for {key} is not valid: {raw:?}")))
        })
        .transpose()
}

fn parse_enum<T: for<'de> Deserialize<'de>>(raw: &str, key: &str) -> Result<T> {
    serde_json::from_value(Value::String(raw.trim().to_string()))
        .map_err(|_| Error::Domain(format!("answer for {key} is not valid: {raw:?}")))
}

fn plan_deterministic(query: &str, answers: &Answers) -> Result<TaskSpec> {
    let input_dim = parse_answer(answers, "input_dim")?.unwrap_or(DEFAULT_GEOMETRY_DIM);
    let output_dim = parse_answer(answers, "output_dim")?.unwrap_or(DEFAULT_SPECTRUM_LEN);
    let path = |key: &str| answers.get(key).map(PathBuf::from);
    let target_spectrum_path = path("target_spectrum_path");
    let dataset_path = path("dataset_path");
    let bundle_path = path("bundle_path");

    let mode = match answers.get("mode") {
        Some(raw) => parse_enum(raw, "mode")?,
        None if dataset_path.is_some() => TaskMode::FixedDataset,
        None => TaskMode::TargetMse,
    };
    let target_metric = match parse_answer::<f64>(answers, "target_metric")? {
        Some(m) => m,
        None => match extract_target_metric(query) {
            Some(m) => m,
            // With a fixed pool the loop runs until the ladder or patience
            // runs out, so no explicit target is needed.
            None if mode == TaskMode::FixedDataset => 0.0,
            None => return Err(Error::MissingInput(vec!["target_metric".into()])),
        },
    };
    let plan = match answers.get("plan") {
        Some(raw) => parse_enum(raw, "plan")?,
        None => fallback_plan(
            target_spectrum_path.as_deref(),
            bundle_path.as_deref(),
            input_dim,
            output_dim,
        ),
    };
    let spec = TaskSpec {
        input_dim,
        output_dim,
        target_metric,
        target_spectrum_path,
        dataset_path,
        bundle_path,
        mode,
        plan,
        aide_task_description: aide_task_description(input_dim, output_dim, target_metric, mode),
    };
    spec.validate()?;
    Ok(spec)
}

const PLANNER_SYSTEM: &str = "You are the planner of a metamaterial design workflow. \
Given the user's request and any answers already collected, fill in the task fields. \
Choose plan forward-only to only train a surrogate, inverse-only to reuse an existing \
surrogate for inverse design, or both. Choose mode target-mse when new data may be \
simulated until a metric target is met, fixed-dataset when only a given dataset may be used. \
List in `missing` every field you still need from the user (for example \
target_spectrum_path when inverse design is requested). Reply with a JSON object only.";

fn planner_schema() -> ResponseSchema {
    let path = json!({"type": ["string", "null"]});
    ResponseSchema::new(
        "task plan",
        json!({
            "type": "object",
            "required": ["plan", "mode", "target_metric", "missing"],
            "properties": {
                "plan": {"enum": ["forward-only", "inverse-only", "both"]},
                "mode": {"enum": ["target-mse", "fixed-dataset"]},
                "target_metric": {"type": ["number", "null"], "minimum": 0},
                "target_spectrum_path": path,
                "dataset_path": path,
                "bundle_path": path,
                "missing": {"type": "array", "items": {"type": "string"}}
            }
        }),
    )
    .expect("static schema compiles")
}

const INTAKE_ROUNDS: usize = 3;

fn plan_llm(client: &LlmClient, query: &str, answers: &Answers) -> Result<TaskSpec> {
    let schema = planner_schema();
    let mut prompt = format!(
        "User request:\n{query}\n\nAnswers collected so far:\n{}",
        serde_json::to_string_pretty(answers)?
    );
    for _ in 0..INTAKE_ROUNDS {
        let reply = client.structured(PLANNER_SYSTEM, &prompt, &schema, &|_| Ok(()))?;
        let missing: Vec<String> = reply["missing"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
            .unwrap_or_default();
        let unanswered: Vec<String> = missing
            .iter()
            .filter(|f| !answers.contains_key(f.as_str()))
            .cloned()
            .collect();
        if !unanswered.is_empty() {
            return Err(Error::MissingInput(unanswered));
        }
        if !missing.is_empty() {
            let supplied: Answers = missing
                .iter()
                .map(|f| (f.clone(), answers[f.as_str()].clone()))
                .collect();
            prompt = format!(
                "The user answered:\n{}\nUpdate the task fields.",
                serde_json::to_string_pretty(&supplied)?
            );
            continue;
        }

        // User answers win over anything the model restated.
        let mut merged = answers.clone();
        for key in ["plan", "mode", "target_spectrum_path", "dataset_path", "bundle_path"] {
            if let Some(v) = reply[key].as_str() {
                merged.entry(key.to_string()).or_insert_with(|| v.to_string());
            }
        }
        if let Some(m) = reply["target_metric"].as_f64() {
            merged
                .entry("target_metric".into())
                .or_insert_with(|| m.to_string());
        }
        return plan_deterministic(query, &merged);
    }
    Err(Error::MissingInput(vec![
        "intake did not converge; answer the planner's questions explicitly".into(),
    ]))
}

/// Builds the task. In LLM mode transport and schema failures fall back to
/// the deterministic rules; missing answers are reported either way.
pub fn plan_task(
    user_query: &str,
    answers: &Answers,
    mode: AgentMode,
    client: Option<&LlmClient>,
) -> Result<TaskSpec> {
    match (mode, client) {
        (AgentMode::Llm, Some(client)) => match plan_llm(client, user_query, answers) {
            Err(e @ (Error::Transport { .. } | Error::Schema { .. } | Error::LlmConfig(_))) => {
                log::warn!("planner LLM unavailable ({e}); using deterministic intake");
                plan_deterministic(user_query, answers)
            }
            other => other,
        },
        (AgentMode::Llm, None) => {
            log::warn!("planner in LLM mode without a client; using deterministic intake");
            plan_deterministic(user_query, answers)
        }
        (AgentMode::Deterministic, _) => plan_deterministic(user_query, answers),
    }
}
