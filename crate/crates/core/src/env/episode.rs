//! The agent loop: policy call, tool execution, context transition.

use rand::Rng;

use super::history::{transition, CmPolicy, History};
use super::tasks::TaskSpec;
use super::tools::ToolEnvironment;
use super::EnvError;
use crate::policy::{sample_action, Completion, PolicyError, PolicyParams};
use crate::seed;
use crate::trajectory::{StepRecord, TerminalOutcome, Trajectory};
use crate::vocab::{parse_action, SegmentKind, Token, END};

/// Virtual seconds per generated token.
pub const SECONDS_PER_TOKEN: f64 = 0.01;

/// Tokens that end a completion.
pub const STOP_SET: [Token; 1] = [END];

#[derive(Debug, thiserror::Error)]
pub enum CompletionError {
    /// The context leaves no room under the cap; the episode is truncated.
    #[error("context of length {len} reaches cap {cap}")]
    ContextCap { len: usize, cap: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("request rejected: {0}")]
    Rejected(String),
}

/// The generation interface. The harness reaches the model only through
/// this trait; tasks and tools never see parameters.
pub trait AgentPolicy {
    fn complete(&mut self, context: &[Token], max_tokens: usize) -> Result<Completion, CompletionError>;
}

/// Seed of the `n`-th request of an agent stream.
pub fn request_seed(global_seed: u64, agent_id: u64, n: u64) -> u64 {
    seed::derive(&[global_seed, agent_id, n])
}

fn map_policy_err(e: PolicyError) -> CompletionError {
    match e {
        PolicyError::ContextCap { len, cap } => CompletionError::ContextCap { len, cap },
        e => CompletionError::Policy(e),
    }
}

/// Samples directly from a parameter snapshot, with the same per-request
/// seed derivation the gateway uses.
pub struct SnapshotPolicy<'a> {
    pub params: &'a PolicyParams,
    pub global_seed: u64,
    pub agent_id: u64,
    pub requests: u64,
}

impl<'a> SnapshotPolicy<'a> {
    pub fn new(params: &'a PolicyParams, global_seed: u64, agent_id: u64) -> Self {
        Self { params, global_seed, agent_id, requests: 0 }
    }
}

impl AgentPolicy for SnapshotPolicy<'_> {
    fn complete(&mut self, context: &[Token], max_tokens: usize) -> Result<Completion, CompletionError> {
        let s = request_seed(self.global_seed, self.agent_id, self.requests);
        self.requests += 1;
        sample_action(self.params, context, max_tokens, &STOP_SET, s).map_err(map_policy_err)
    }
}

/// Emits uniformly random tokens until `END` or the token limit.
pub struct RandomPolicy {
    pub vocab: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(vocab: usize, seed_value: u64) -> Self {
        Self { vocab, rng: seed::rng(seed_value) }
    }
}

impl AgentPolicy for RandomPolicy {
    fn complete(&mut self, _context: &[Token], max_tokens: usize) -> Result<Completion, CompletionError> {
        let mut out = Completion { tokens: Vec::new(), logprobs: Vec::new() };
        let lp = -(self.vocab as f64).ln();
        while out.tokens.len() < max_tokens.max(1) {
            let t = Token(self.rng.random_range(0..self.vocab as u32));
            out.tokens.push(t);
            out.logprobs.push(lp);
            if STOP_SET.contains(&t) {
                break;
            }
        }
        Ok(out)
    }
}

/// Replays a fixed list of actions, truncated to the token limit.
pub struct ScriptedPolicy {
    pub actions: Vec<Vec<Token>>,
    next: usize,
}

impl ScriptedPolicy {
    pub fn new(actions: Vec<Vec<Token>>) -> Self {
        Self { actions, next: 0 }
    }
}

impl AgentPolicy for ScriptedPolicy {
    fn complete(&mut self, _context: &[Token], max_tokens: usize) -> Result<Completion, CompletionError> {
        let mut tokens = self.actions.get(self.next).cloned().unwrap_or_else(|| vec![END]);
        self.next += 1;
        tokens.truncate(max_tokens.max(1));
        let logprobs = vec![0.0; tokens.len()];
        Ok(Completion { tokens, logprobs })
    }
}

/// Identity of an episode within its rollout group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeIds {
    pub group_id: u64,
    pub group_index: usize,
}

/// Runs one episode. `seed_value` drives tool latencies; policy randomness
/// comes from `policy`'s own stream.
pub fn run_episode(
    task: &TaskSpec,
    env: &ToolEnvironment,
    cm: &CmPolicy,
    policy: &mut dyn AgentPolicy,
    ids: EpisodeIds,
    seed_value: u64,
) -> Result<Trajectory, EnvError> {
    if task.max_steps == 0 {
        return Err(EnvError::InvalidTask {
            task_id: task.task_id.clone(),
            reason: "max_steps must be at least 1".into(),
        });
    }
    let mut rng = seed::rng(seed::derive(&[seed_value, 0x746f_6f6c]));
    let mut traj = Trajectory::new(task.task_id.clone(), ids.group_id, ids.group_index);
    let mut history = History::from_prompt(&task.initial_prompt);
    let cap = task.context_cap;
    for _ in 0..task.max_steps {
        let state = history.tokens();
        if state.len() >= cap {
            let v = task.verify(&traj);
            traj.finish(TerminalOutcome::Truncated, v.score);
            return Ok(traj);
        }
        let limit = task.max_action_tokens.min(cap - state.len());
        let completion = match policy.complete(&state, limit) {
            Ok(c) => c,
            Err(CompletionError::ContextCap { .. }) => {
                let v = task.verify(&traj);
                traj.finish(TerminalOutcome::Truncated, v.score);
                return Ok(traj);
            }
            Err(CompletionError::Policy(e)) => return Err(e.into()),
            Err(CompletionError::Rejected(m)) => return Err(EnvError::Rejected(m)),
        };
        if completion.tokens.is_empty() {
            return Err(EnvError::EmptyAction);
        }
        let action = parse_action(&completion.tokens);
        let tools = env.execute(&action, &mut rng);
        let duration = SECONDS_PER_TOKEN * completion.tokens.len() as f64 + tools.tool_time;
        let answered = action.iter().any(|s| s.kind == SegmentKind::FinalAnswer);
        traj.push_step(StepRecord {
            state_tokens: state,
            action: action.clone(),
            observation_tokens: tools.observation.clone(),
            virtual_duration: duration,
            behavior_logprobs: completion.logprobs,
        });
        if answered {
            let v = task.verify(&traj);
            let outcome = if v.success { TerminalOutcome::Success } else { TerminalOutcome::Failure };
            traj.finish(outcome, v.score);
            return Ok(traj);
        }
        history = transition(cm, &history, &action, &tools.observation);
    }
    let v = task.verify(&traj);
    let outcome = if v.success { TerminalOutcome::Success } else { TerminalOutcome::Failure };
    traj.finish(outcome, v.score);
    Ok(traj)
}
