//! Environment side of the agent loop: tasks, tools, context management
//! and episode execution.

mod episode;
mod history;
mod tasks;
mod tools;

pub use episode::{
    request_seed, run_episode, AgentPolicy, CompletionError, EpisodeIds, RandomPolicy, ScriptedPolicy, SnapshotPolicy,
    SECONDS_PER_TOKEN, STOP_SET,
};
pub use history::{sliding_window, transition, CmPolicy, History, HistorySegment, Role, SUMMARY_LEN};
pub use tasks::{
    builtin_tasks, oracle_actions, Catalog, Difficulty, Domain, TaskKind, TaskSpec, Verdict, TASKS_PER_CELL,
};
pub use tools::{
    calc, CalcTool, EchoTool, LatencyModel, RunTestsTool, SearchTool, StepToolResult, Tool, ToolEnvironment,
};

use crate::policy::PolicyError;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("task {task_id}: {reason}")]
    InvalidTask { task_id: String, reason: String },
    #[error("unknown task id {0}")]
    UnknownTask(String),
    #[error("completion request rejected: {0}")]
    Rejected(String),
    #[error("policy returned an empty completion")]
    EmptyAction,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("catalog io: {0}")]
    Io(#[from] std::io::Error),
    #[error("catalog json: {0}")]
    Json(#[from] serde_json::Error),
}
