use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::agents::{AgentMode, LlmClient, TaskMode, TaskSpec};
use crate::domain::Dataset;
use crate::error::{Error, Result};
use crate::oracle::Oracle;
use crate::surrogate::{fine_tune, train_with, ModelBundle, ModelSpec, Provenance, TrainOptions};

use super::decide::decide;
use super::history::{History, HistoryEvent, INITIALIZATION_REASON};
use super::propose::{propose_model_spec, Recipe};
use super::{Action, BudgetPolicy};

/// What a `test` round does with the current model once the dataset grew.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestStrategy {
    /// Score the existing weights on the grown validation split.
    Evaluate,
    /// Train the current architecture from scratch on the grown dataset.
    #[default]
    Retrain,
    /// Continue training the current weights on the grown dataset.
    WarmStart,
}

#[derive(Debug, Clone)]
pub struct ForwardTrainConfig {
    pub k0: usize,
    pub policy: BudgetPolicy,
    pub controller_mode: AgentMode,
    pub proposer_mode: AgentMode,
    pub recipe: Recipe,
    pub train: TrainOptions,
    pub test_strategy: TestStrategy,
    pub history_path: Option<PathBuf>,
    pub zero_timestamps: bool,
}

impl Default for ForwardTrainConfig {
    fn default() -> Self {
        Self {
            k0: 550,
            policy: BudgetPolicy::default(),
            controller_mode: AgentMode::Deterministic,
            proposer_mode: AgentMode::Deterministic,
            recipe: Recipe::default(),
            train: TrainOptions::default(),
            test_strategy: TestStrategy::default(),
            history_path: None,
            zero_timestamps: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrainOutcome {
    /// Lowest validation metric seen over the whole run.
    pub bundle: ModelBundle,
    pub history: History,
    pub best_model_id: String,
    pub latest_model_id: Option<String>,
    pub final_k: usize,
}

struct Trained {
    bundle: Option<ModelBundle>,
    metric: f64,
    id: String,
}

fn model_id(generation: usize, round: usize, spec: &ModelSpec) -> String {
    format!("m{generation:02}-r{round:02}@{}", spec.signature())
}

fn finish(result: Result<ModelBundle>, id: String, round: usize, k: usize) -> Result<Trained> {
    match result {
        Ok(mut b) => {
            b.provenance = Some(Provenance {
                round,
                dataset_size: k,
                model_id: Some(id.clone()),
            });
            Ok(Trained {
                metric: b.metric.unwrap_or(f64::INFINITY),
                bundle: Some(b),
                id,
            })
        }
        Err(Error::Divergence { epoch }) => {
            log::warn!("{id} diverged at epoch {epoch}");
            Ok(Trained {
                bundle: None,
                metric: f64::INFINITY,
                id,
            })
        }
        Err(e) => Err(e),
    }
}

/// Runs the generate/test/done loop and returns the best model found.
/// The history file, when configured, is rewritten after every round, so
/// it stays intact when an error ends the run early.
pub fn forward_train(
    task: &TaskSpec,
    cfg: &ForwardTrainConfig,
    oracle: &Oracle,
    client: Option<&LlmClient>,
) -> Result<ForwardTrainOutcome> {
    cfg.policy.validate()?;
    let fixed = task.mode == TaskMode::FixedDataset;
    let empty = oracle.empty_dataset();
    let initial_k = match (fixed, oracle.pool_size()) {
        (true, Some(n)) => n,
        _ => cfg.k0,
    };
    if initial_k < 11 {
        return Err(Error::InvalidSpec(vec![format!(
            "initial dataset size must be at least 11, got {initial_k}"
        )]));
    }
    if !fixed && initial_k > cfg.policy.data_budget {
        return Err(Error::InvalidSpec(vec![format!(
            "k0 = {initial_k} exceeds the data budget of {}",
            cfg.policy.data_budget
        )]));
    }
    let policy = BudgetPolicy {
        data_budget: if fixed { initial_k } else { cfg.policy.data_budget },
        ..cfg.policy.clone()
    };

    let mut history = match &cfg.history_path {
        Some(p) => History::persisted(p),
        None => History::new(),
    }
    .with_zeroed_timestamps(cfg.zero_timestamps);
    let mut data: Dataset = oracle.grow_dataset(&empty, initial_k)?;
    let mut generation = 0;

    let propose = |history: &History| {
        propose_model_spec(task, history, cfg.proposer_mode, client, &cfg.recipe)
    };
    let spec = propose(&history)?;
    let first = finish(train_with(&spec, &data, cfg.train), model_id(0, 0, &spec), 0, data.len())?;
    history.append(HistoryEvent {
        round: 0,
        k: data.len(),
        metric: first.metric,
        reason: INITIALIZATION_REASON.into(),
        action: Action::Generate,
        model_id: Some(first.id.clone()),
        timestamp: history.now(),
    })?;
    let mut latest_id = first.bundle.as_ref().map(|_| first.id.clone());
    let mut best: Option<(ModelBundle, String)> = first.bundle.clone().map(|b| (b, first.id.clone()));
    let mut current: Option<(ModelBundle, f64)> = first.bundle.map(|b| (b, first.metric));

    for round in 1..=policy.max_rounds {
        let decision = decide(&history, &policy, cfg.controller_mode, client)?;
        let k = data.len();
        log::info!(
            "round {round}: {} k={} ({})",
            decision.action.as_str(),
            decision.k_next,
            decision.reason
        );
        let best_metric = best.as_ref().map_or(f64::INFINITY, |(b, _)| b.metric.unwrap_or(f64::INFINITY));
        let done_event = |reason: String, history: &History| HistoryEvent {
            round,
            k,
            metric: best_metric,
            reason,
            action: Action::Done,
            model_id: best.as_ref().map(|(_, id)| id.clone()),
            timestamp: history.now(),
        };

        let trained = match decision.action {
            Action::Done => {
                let event = done_event(decision.reason, &history);
                history.append(event)?;
                break;
            }
            Action::Test if !fixed && k >= policy.data_budget && decision.k_next <= k => {
                let event = done_event(
                    format!("data budget of {} samples exhausted; {}", policy.data_budget, decision.reason),
                    &history,
                );
                history.append(event)?;
                break;
            }
            Action::Generate => {
                if decision.k_next > k {
                    data = oracle.grow_dataset(&data, decision.k_next)?;
                }
                let spec = match propose(&history) {
                    Ok(s) => s,
                    Err(Error::ExplorationExhausted) => {
                        let event = done_event(
                            "exploration exhausted: every architecture in the ladder has been tried".into(),
                            &history,
                        );
                        history.append(event)?;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                generation += 1;
                let id = model_id(generation, round, &spec);
                let t = finish(train_with(&spec, &data, cfg.train), id, round, data.len())?;
                if let Some(b) = &t.bundle {
                    let incumbent = current.as_ref().map_or(f64::INFINITY, |c| c.1);
                    if t.metric < incumbent {
                        current = Some((b.clone(), t.metric));
                    }
                }
                t
            }
            Action::Test => {
                if decision.k_next > k {
                    data = oracle.grow_dataset(&data, decision.k_next)?;
                }
                match &current {
                    None => Trained {
                        bundle: None,
                        metric: f64::INFINITY,
                        id: format!("none-r{round:02}"),
                    },
                    Some((bundle, _)) => {
                        let spec = bundle.spec().clone();
                        let gen = bundle
                            .model_id()
                            .and_then(|id| id.get(1..3))
                            .and_then(|g| g.parse().ok())
                            .unwrap_or(generation);
                        let id = model_id(gen, round, &spec);
                        let result = if data.len() == k {
                            // Nothing new to learn from; score what we have.
                            bundle.evaluate(&data).map(|m| {
                                let mut b = bundle.clone();
                                b.metric = Some(m);
                                b
                            })
                        } else {
                            match cfg.test_strategy {
                                TestStrategy::Evaluate => bundle.evaluate(&data).map(|m| {
                                    let mut b = bundle.clone();
                                    b.metric = Some(m);
                                    b
                                }),
                                TestStrategy::Retrain => train_with(&spec, &data, cfg.train),
                                TestStrategy::WarmStart => fine_tune(bundle, &data, cfg.train),
                            }
                        };
                        let t = finish(result, id, round, data.len())?;
                        current = t.bundle.clone().map(|b| (b, t.metric));
                        t
                    }
                }
            }
        };

        if trained.bundle.is_some() {
            latest_id = Some(trained.id.clone());
        }
        if let Some(b) = &trained.bundle {
            if trained.metric < best_metric {
                best = Some((b.clone(), trained.id.clone()));
            }
        }
        history.append(HistoryEvent {
            round,
            k: data.len(),
            metric: trained.metric,
            reason: decision.reason,
            action: decision.action,
            model_id: Some(trained.id),
            timestamp: history.now(),
        })?;
    }

    let (bundle, best_model_id) =
        best.ok_or_else(|| Error::Numeric("every trained model diverged".into()))?;
    Ok(ForwardTrainOutcome {
        bundle,
        history,
        best_model_id,
        latest_model_id: latest_id,
        final_k: data.len(),
    })
}
