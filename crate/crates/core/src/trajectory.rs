//! Episode data model shared by every stage of the pipeline.
//!
//! A [`Trajectory`] is the ordered list of policy calls made during one
//! episode. Each [`StepRecord`] keeps the exact context the policy saw, the
//! completion it produced (split into segments), the environment response,
//! and how much virtual time the step consumed.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};
use crate::vocab::{concat_segments, ActionSegment, Token};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrajectoryError {
    #[error("group incomplete: trajectory {group_index} of task {task_id} is not terminal")]
    GroupIncomplete { task_id: String, group_index: usize },
    #[error("invalid trajectory: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TerminalOutcome {
    Success,
    Failure,
    /// Ended because the context cap left no room for another completion.
    Truncated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state_tokens: Vec<Token>,
    pub action: Vec<ActionSegment>,
    pub observation_tokens: Vec<Token>,
    pub virtual_duration: f64,
    /// Per-token log-probabilities of the action under the behavior policy,
    /// recorded at generation time.
    #[serde(default)]
    pub behavior_logprobs: Vec<f64>,
}

impl StepRecord {
    pub fn action_tokens(&self) -> Vec<Token> {
        concat_segments(&self.action)
    }

    pub fn action_len(&self) -> usize {
        self.action.iter().map(|s| s.tokens.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    /// Submission sequence number of the rollout group this belongs to.
    #[serde(default)]
    pub group_id: u64,
    pub group_index: usize,
    pub steps: Vec<StepRecord>,
    #[serde(default)]
    pub step_rewards: Vec<f64>,
    pub total_virtual_time: f64,
    /// `None` while the episode is still running.
    pub terminal_outcome: Option<TerminalOutcome>,
    /// Verifier performance score in `[0, 1]`.
    #[serde(default)]
    pub score: f64,
}

impl Trajectory {
    pub fn new(task_id: impl Into<String>, group_id: u64, group_index: usize) -> Self {
        Self {
            task_id: task_id.into(),
            group_id,
            group_index,
            steps: Vec::new(),
            step_rewards: Vec::new(),
            total_virtual_time: 0.0,
            terminal_outcome: None,
            score: 0.0,
        }
    }

    /// Appends a step, keeping `total_virtual_time` equal to the running sum
    /// of step durations.
    pub fn push_step(&mut self, step: StepRecord) {
        self.total_virtual_time += step.virtual_duration;
        self.steps.push(step);
    }

    pub fn finish(&mut self, outcome: TerminalOutcome, score: f64) {
        self.terminal_outcome = Some(outcome);
        self.score = score;
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal_outcome.is_some()
    }

    pub fn validate(&self, context_cap: usize) -> Result<(), TrajectoryError> {
        let sum: f64 = self.steps.iter().map(|s| s.virtual_duration).sum();
        if sum != self.total_virtual_time {
            return Err(TrajectoryError::Invalid(format!(
                "total_virtual_time {} != sum of durations {}",
                self.total_virtual_time, sum
            )));
        }
        if !self.step_rewards.is_empty() && self.step_rewards.len() != self.steps.len() {
            return Err(TrajectoryError::Invalid("step_rewards not aligned with steps".into()));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.state_tokens.len() > context_cap {
                return Err(TrajectoryError::Invalid(format!("step {i}: state exceeds context cap")));
            }
            if s.action_len() == 0 || s.action.iter().any(|seg| seg.tokens.is_empty()) {
                return Err(TrajectoryError::Invalid(format!("step {i}: empty action")));
            }
            if s.virtual_duration < 0.0 {
                return Err(TrajectoryError::Invalid(format!("step {i}: negative duration")));
            }
        }
        Ok(())
    }
}

/// Number of policy-generated tokens in the trajectory. Observations and
/// prompts are environment tokens and are excluded.
pub fn token_length(t: &Trajectory) -> usize {
    t.steps.iter().map(StepRecord::action_len).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task_id: String,
    pub group_id: u64,
    pub trajectories: Vec<Trajectory>,
}

impl RolloutGroup {
    /// Checks the shared-task and index invariants.
    pub fn new(
        task_id: impl Into<String>,
        group_id: u64,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self, TrajectoryError> {
        let task_id = task_id.into();
        if trajectories.is_empty() {
            return Err(TrajectoryError::Invalid("empty rollout group".into()));
        }
        for (i, t) in trajectories.iter().enumerate() {
            if t.task_id != task_id {
                return Err(TrajectoryError::Invalid(format!("trajectory {i} belongs to task {}", t.task_id)));
            }
            if t.group_index != i {
                return Err(TrajectoryError::Invalid(format!("group_index {} at position {i}", t.group_index)));
            }
        }
        Ok(Self { task_id, group_id, trajectories })
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }
}

/// One `(state, action)` training pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionSample {
    pub task_id: String,
    pub group_id: u64,
    pub group_index: usize,
    pub step_index: usize,
    pub state_tokens: Vec<Token>,
    pub action_tokens: Vec<Token>,
    pub behavior_logprobs: Vec<f64>,
}

impl CompletionSample {
    /// `state ⊕ action`.
    pub fn full_sequence(&self) -> Vec<Token> {
        let mut v = self.state_tokens.clone();
        v.extend_from_slice(&self.action_tokens);
        v
    }
}

/// Flattens a terminal group into samples, trajectory-major then
/// step-major.
pub fn flatten_to_samples(group: &RolloutGroup) -> Result<Vec<CompletionSample>, TrajectoryError> {
    if let Some(t) = group.trajectories.iter().find(|t| !t.is_terminal()) {
        return Err(TrajectoryError::GroupIncomplete { task_id: t.task_id.clone(), group_index: t.group_index });
    }
    Ok(group
        .trajectories
        .iter()
        .flat_map(|t| {
            t.steps.iter().enumerate().map(move |(i, s)| CompletionSample {
                task_id: t.task_id.clone(),
                group_id: t.group_id,
                group_index: t.group_index,
                step_index: i,
                state_tokens: s.state_tokens.clone(),
                action_tokens: s.action_tokens(),
                behavior_logprobs: s.behavior_logprobs.clone(),
            })
        })
        .collect())
}

pub fn write_trajectories<W: Write>(w: &mut W, ts: &[Trajectory]) -> Result<(), JsonlError> {
    jsonl::write_all(w, ts)
}

pub fn read_trajectories<R: BufRead>(r: R) -> Result<Vec<Trajectory>, JsonlError> {
    jsonl::read_all(r)
}
