use serde_json::json;

use crate::agents::{AgentMode, LlmClient, ResponseSchema};
use crate::error::{Error, Result};

use super::history::{History, HistoryEvent};
use super::{Action, BudgetPolicy, ControllerDecision};

const GROWTH_FACTOR: f64 = 1.5;

fn grown(k: usize, budget: usize) -> usize {
    ((k as f64 * GROWTH_FACTOR).ceil() as usize).min(budget).max(k)
}

/// Relative metric improvement per added sample between two events, if
/// the dataset grew between them.
fn rate(from: &HistoryEvent, to: &HistoryEvent) -> Option<f64> {
    if to.k <= from.k || !from.metric.is_finite() || !to.metric.is_finite() || from.metric <= 0.0 {
        return None;
    }
    Some((from.metric - to.metric) / from.metric / (to.k - from.k) as f64)
}

/// True when the newest test added data without a worthwhile improvement.
fn saturated(scored: &[&HistoryEvent], ratio: f64) -> bool {
    let [.., q, p, c] = scored else {
        return match scored {
            [p, c] => c.action == Action::Test && rate(p, c).is_some_and(|r| r <= 0.0),
            _ => false,
        };
    };
    if c.action != Action::Test {
        return false;
    }
    match (rate(p, c), rate(q, p)) {
        (Some(latest), _) if latest <= 0.0 => true,
        (Some(latest), Some(earlier)) if earlier > 0.0 => latest < ratio * earlier,
        _ => false,
    }
}

/// True when nothing since the second-to-last generate beat the best metric
/// recorded before it.
fn stagnated(scored: &[&HistoryEvent]) -> bool {
    let generates: Vec<usize> = scored
        .iter()
        .enumerate()
        .filter(|(_, e)| e.action == Action::Generate)
        .map(|(i, _)| i)
        .collect();
    let [.., ia, _] = generates[..] else {
        return false;
    };
    if ia == 0 {
        return false;
    }
    let before = scored[..ia].iter().map(|e| e.metric).fold(f64::INFINITY, f64::min);
    scored[ia..].iter().all(|e| !(e.metric < before))
}

/// Rule-based controller.
pub fn decide_deterministic(history: &History, policy: &BudgetPolicy) -> Result<ControllerDecision> {
    let last = history
        .last()
        .ok_or_else(|| Error::Contract("decide needs the initialization event".into()))?;
    let k = last.k;
    let scored: Vec<&HistoryEvent> = history
        .events()
        .iter()
        .filter(|e| e.action != Action::Done)
        .collect();
    let latest = scored.last().map_or(f64::INFINITY, |e| e.metric);
    let decision = |action, k_next, reason: String| ControllerDecision {
        action,
        k_next,
        reason,
        degraded: false,
    };

    if latest <= policy.target_metric {
        return Ok(decision(
            Action::Done,
            k,
            format!(
                "target reached: validation MSE {latest:.4e} <= target {:.4e}",
                policy.target_metric
            ),
        ));
    }
    if stagnated(&scored) {
        return Ok(decision(
            Action::Done,
            k,
            "stagnation: the last two generated models did not improve the best metric".into(),
        ));
    }
    if !latest.is_finite() {
        return Ok(decision(
            Action::Generate,
            k,
            "the latest model diverged; generate a new model".into(),
        ));
    }
    if k >= policy.data_budget {
        return Ok(decision(
            Action::Generate,
            k,
            format!(
                "data budget of {} samples reached with MSE {latest:.4e} above target; generate a new model",
                policy.data_budget
            ),
        ));
    }
    if saturated(&scored, policy.saturation_ratio) {
        return Ok(decision(
            Action::Generate,
            k,
            format!(
                "MSE {latest:.4e} barely moved with more data; diminishing returns suggest saturation; regenerate code"
            ),
        ));
    }
    let k_next = grown(k, policy.data_budget);
    Ok(decision(
        Action::Test,
        k_next,
        format!(
            "MSE {latest:.4e} is above target {:.4e} and still improving; test with {k_next} samples",
            policy.target_metric
        ),
    ))
}

const CONTROLLER_SYSTEM: &str = "You are the controller of a surrogate-model training loop. \
Each round you read the history log and choose one action: `generate` trains a new model \
architecture, `test` retrains the current model on a larger dataset of size k_next, `done` \
stops. Stop once the latest metric meets the target. Grow the dataset only while added data \
still pays off; regenerate the model when returns diminish. k_next may never be smaller than \
the current dataset size nor larger than the data budget. Reply with a JSON object only.";

fn decision_schema() -> ResponseSchema {
    ResponseSchema::new(
        "controller decision",
        json!({
            "type": "object",
            "required": ["action", "k_next", "reason"],
            "properties": {
                "action": {"enum": ["generate", "test", "done"]},
                "k_next": {"type": "integer", "minimum": 0},
                "reason": {"type": "string", "minLength": 1}
            }
        }),
    )
    .expect("static schema compiles")
}

fn decide_llm(client: &LlmClient, history: &History, policy: &BudgetPolicy) -> Result<ControllerDecision> {
    let k = history.current_k();
    let prompt = format!(
        "Target metric (validation MSE): {:e}\nData budget: {} samples\nMax rounds: {}\n\
         Current dataset size: {k}\nHistory:\n{}",
        policy.target_metric,
        policy.data_budget,
        policy.max_rounds,
        history.to_json()?
    );
    let reply = client.structured(CONTROLLER_SYSTEM, &prompt, &decision_schema(), &|_| Ok(()))?;
    let action: Action = serde_json::from_value(reply["action"].clone())?;
    let asked = reply["k_next"].as_u64().unwrap_or(0) as usize;
    let mut reason = reply["reason"].as_str().unwrap_or_default().to_string();
    let k_next = match action {
        Action::Done => k,
        _ => asked.clamp(k, policy.data_budget.max(k)),
    };
    if action != Action::Done && k_next != asked {
        reason.push_str(&format!(" [k_next clamped from {asked} to {k_next}]"));
    }
    Ok(ControllerDecision {
        action,
        k_next,
        reason,
        degraded: false,
    })
}

/// Chooses the next action. LLM failures fall back to the rules and mark
/// the decision degraded.
pub fn decide(
    history: &History,
    policy: &BudgetPolicy,
    mode: AgentMode,
    client: Option<&LlmClient>,
) -> Result<ControllerDecision> {
    if history.is_empty() {
        return Err(Error::Contract("decide needs the initialization event".into()));
    }
    let (AgentMode::Llm, Some(client)) = (mode, client) else {
        return decide_deterministic(history, policy);
    };
    match decide_llm(client, history, policy) {
        Ok(d) => Ok(d),
        Err(e @ (Error::Transport { .. } | Error::Schema { .. } | Error::LlmConfig(_))) => {
            log::warn!("controller LLM unavailable ({e}); degraded to deterministic rules");
            let mut d = decide_deterministic(history, policy)?;
            d.reason = format!("degraded mode ({e}): {}", d.reason);
            d.degraded = true;
            Ok(d)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::MockTransport;
    use crate::controller::INITIALIZATION_REASON;
    use chrono::{DateTime, Utc};

    fn history(steps: &[(usize, f64, Action)]) -> History {
        let mut h = History::new();
        for (round, &(k, metric, action)) in steps.iter().enumerate() {
            h.append(HistoryEvent {
                round,
                k,
                metric,
                reason: if round == 0 { INITIALIZATION_REASON.into() } else { "r".into() },
                action,
                model_id: None,
                timestamp: DateTime::<Utc>::UNIX_EPOCH,
            })
            .unwrap();
        }
        h
    }

    fn policy() -> BudgetPolicy {
        BudgetPolicy::default()
    }

    #[test]
    fn target_met_at_init_is_done() {
        let d = decide_deterministic(&history(&[(550, 1e-3, Action::Generate)]), &policy()).unwrap();
        assert_eq!(d.action, Action::Done);
        assert!(d.reason.contains("target reached"));
        assert_eq!(d.k_next, 550);
    }

    #[test]
    fn steep_improvement_tests_with_half_again() {
        let h = history(&[
            (444, 4e-2, Action::Generate),
            (666, 3e-2, Action::Test),
            (1000, 2e-2, Action::Test),
        ]);
        let d = decide_deterministic(&h, &policy()).unwrap();
        assert_eq!(d.action, Action::Test);
        assert_eq!(d.k_next, 1500);
    }

    #[test]
    fn growth_is_capped_by_budget() {
        let h = history(&[(40_000, 1e-2, Action::Generate)]);
        let d = decide_deterministic(&h, &policy()).unwrap();
        assert_eq!((d.action, d.k_next), (Action::Test, 50_000));
        let odd = history(&[(3, 1.0, Action::Generate)]);
        assert_eq!(decide_deterministic(&odd, &policy()).unwrap().k_next, 5);
    }

    #[test]
    fn flat_metrics_trigger_regeneration() {
        let h = history(&[(1000, 1e-2, Action::Generate), (1500, 1e-2, Action::Test)]);
        let d = decide_deterministic(&h, &policy()).unwrap();
        assert_eq!((d.action, d.k_next), (Action::Generate, 1500));
        assert!(d.reason.contains("diminishing returns suggest saturation; regenerate code"));
    }

    #[test]
    fn slowing_below_ratio_is_saturation() {
        // earlier rate: 0.5/1000; latest: 0.02/1000, below 10% of it
        let h = history(&[
            (1000, 2e-2, Action::Generate),
            (2000, 1e-2, Action::Test),
            (3000, 9.8e-3, Action::Test),
        ]);
        assert_eq!(decide_deterministic(&h, &policy()).unwrap().action, Action::Generate);
        let h = history(&[
            (1000, 2e-2, Action::Generate),
            (2000, 1e-2, Action::Test),
            (3000, 9e-3, Action::Test),
        ]);
        assert_eq!(decide_deterministic(&h, &policy()).unwrap().action, Action::Test);
    }

    #[test]
    fn at_budget_above_target_generates() {
        let h = history(&[(1000, 2e-2, Action::Generate), (50_000, 1e-2, Action::Test)]);
        let d = decide_deterministic(&h, &policy()).unwrap();
        assert_eq!((d.action, d.k_next), (Action::Generate, 50_000));
    }

    #[test]
    fn two_failed_generates_stop() {
        let h = history(&[
            (1000, 1e-2, Action::Generate),
            (1500, 5e-3, Action::Test),
            (1500, 6e-3, Action::Generate),
            (1500, 7e-3, Action::Generate),
        ]);
        let d = decide_deterministic(&h, &policy()).unwrap();
        assert_eq!(d.action, Action::Done);
        assert!(d.reason.contains("stagnation"));

        let h = history(&[
            (1000, 1e-2, Action::Generate),
            (1500, 5e-3, Action::Test),
            (1500, 6e-3, Action::Generate),
            (1500, 4e-3, Action::Generate),
        ]);
        assert_ne!(decide_deterministic(&h, &policy()).unwrap().action, Action::Done);
    }

    #[test]
    fn divergence_regenerates() {
        let h = history(&[(550, f64::INFINITY, Action::Generate)]);
        assert_eq!(decide_deterministic(&h, &policy()).unwrap().action, Action::Generate);
    }

    #[test]
    fn empty_history_is_a_contract_violation() {
        assert!(matches!(
            decide(&History::new(), &policy(), AgentMode::Deterministic, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn llm_k_next_is_clamped() {
        let h = history(&[(1000, 1e-2, Action::Generate)]);
        let client = LlmClient::mock(MockTransport::scripted([
            r#"{"action":"test","k_next":900000,"reason":"more data"}"#,
            r#"{"action":"test","k_next":10,"reason":"less data"}"#,
        ]));
        let d = decide(&h, &policy(), AgentMode::Llm, Some(&client)).unwrap();
        assert_eq!(d.k_next, 50_000);
        assert!(d.reason.contains("clamped from 900000 to 50000"));
        let d = decide(&h, &policy(), AgentMode::Llm, Some(&client)).unwrap();
        assert_eq!(d.k_next, 1000);
    }

    #[test]
    fn malformed_llm_reply_degrades() {
        let h = history(&[(1000, 1e-2, Action::Generate)]);
        let client = LlmClient::mock(MockTransport::responder(|_, _| Ok(r#"{"action":"maybe"}"#.into())));
        let d = decide(&h, &policy(), AgentMode::Llm, Some(&client)).unwrap();
        assert!(d.degraded);
        assert_eq!((d.action, d.k_next), (Action::Test, 1500));
        assert!(d.reason.starts_with("degraded mode"));
    }
}
