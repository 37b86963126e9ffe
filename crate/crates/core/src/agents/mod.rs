//! LLM-facing orchestration: planning, input verification, bundle export,
//! the chat client and conversation memory.

pub mod export;
pub mod llm;
pub mod memory;
pub mod planner;
pub mod verify;

pub use export::{code_modify, FORWARD_MODEL_NAME};
pub use llm::{
    extract_json, http_attempts, llm_chat, ChatRequest, ChatTransport, HttpTransport, LlmClient, LlmConfig,
    MockScript, MockTransport, ResponseSchema, TransportFailure, WireMessage, ENV_API_KEY, ENV_BASE_URL, ENV_MODEL,
};
pub use memory::{ChatMessage, MemoryStore, Role, Transcript};
pub use planner::{aide_task_description, plan_task, Answers, Plan, TaskMode, TaskSpec};
pub use verify::{file_check, verify_inputs, FileStatus, ProblemKind, VerificationProblem};

/// Which implementation backs an agent decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentMode {
    Llm,
    #[default]
    Deterministic,
}
