//! Composite rewards, reward-to-go advantages and the clipped
//! importance-sampling policy gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::{grad_weighted_log_prob, token_log_probs, Gradient, PolicyError, PolicyParams};
use crate::prefix::{merged_action_log_probs, FlopLedger, PrefixError};
use crate::trajectory::{flatten_to_samples, CompletionSample, RolloutGroup, StepRecord, TrajectoryError};
use crate::vocab::diagnose;

#[derive(Debug, thiserror::Error)]
pub enum RlError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("completion time must be positive, got {completion} against baseline {baseline}")]
    NonPositiveTime { completion: f64, baseline: f64 },
    #[error("trajectory {group_index} of task {task_id} is not terminal")]
    NotTerminal { task_id: String, group_index: usize },
    #[error("sample {index} of group {group_id}: {found} behavior log-probs for {expected} action tokens")]
    MissingBehavior { group_id: u64, index: usize, found: usize, expected: usize },
    #[error("group {group_id}: {samples} samples but {advantages} advantages")]
    Misaligned { group_id: u64, samples: usize, advantages: usize },
    #[error("update rejected: {count} non-finite gradient entries, first at index {first}")]
    NonFiniteGradient { count: usize, first: usize },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Prefix(#[from] PrefixError),
}

/// Per-step process reward table. Each entry fires at most once per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProcessTable {
    pub malformed_call: f64,
    /// Reserved tokens outside grammar positions.
    pub reserved_misuse: f64,
    /// Reasoning plus at least one well-formed call in the same action.
    pub structure_bonus: f64,
}

impl Default for ProcessTable {
    fn default() -> Self {
        Self { malformed_call: -0.2, reserved_misuse: -0.1, structure_bonus: 0.05 }
    }
}

/// `h(x) = clamp(intercept − slope·x, 0, 1)` with `x = T / T_baseline`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeedShaping {
    pub intercept: f64,
    pub slope: f64,
}

impl Default for SpeedShaping {
    fn default() -> Self {
        Self { intercept: 2.0, slope: 1.0 }
    }
}

impl SpeedShaping {
    pub fn h(&self, x: f64) -> f64 {
        (self.intercept - self.slope * x).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Process reward weight.
    pub alpha: f64,
    /// Speed reward weight.
    pub beta: f64,
    pub gamma: f64,
    pub speed: SpeedShaping,
    pub process: ProcessTable,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 0.1, gamma: 1.0, speed: SpeedShaping::default(), process: ProcessTable::default() }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(RlError::Config(format!("alpha {} and beta {} must be nonnegative", self.alpha, self.beta)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(RlError::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.speed.slope >= 0.0) {
            return Err(RlError::Config("speed shaping must be non-increasing".into()));
        }
        Ok(())
    }
}

pub fn process_reward(step: &StepRecord, table: &ProcessTable) -> f64 {
    let d = diagnose(&step.action);
    let mut r = 0.0;
    if d.malformed_calls > 0 {
        r += table.malformed_call;
    }
    if d.misused_reserved > 0 {
        r += table.reserved_misuse;
    }
    if d.reasoning_segments > 0 && d.well_formed_calls > 0 {
        r += table.structure_bonus;
    }
    r
}

pub fn speed_reward(completion: f64, baseline: f64, shaping: &SpeedShaping) -> Result<f64, RlError> {
    if !(completion > 0.0 && baseline > 0.0) {
        return Err(RlError::NonPositiveTime { completion, baseline });
    }
    Ok(shaping.h(completion / baseline))
}

/// `G_t = r_t + γ·G_{t+1}`.
pub fn reward_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[t] = acc;
    }
    out
}

fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    Some(if xs.len() % 2 == 1 { xs[m] } else { 0.5 * (xs[m - 1] + xs[m]) })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTable {
    /// `Â[i][t] = reward_to_go[i][t] − baseline[i]`.
    pub advantages: Vec<Vec<f64>>,
    pub baselines: Vec<f64>,
    pub reward_to_go: Vec<Vec<f64>>,
    /// Undiscounted per-trajectory return `Σ_t r_t`.
    pub returns: Vec<f64>,
    /// Median completion time the speed reward was measured against.
    pub time_baseline: Option<f64>,
}

/// Fills `step_rewards` on every trajectory and computes advantages.
///
/// Speed and performance rewards land on the terminal step only. The
/// baseline of trajectory `i` is the mean undiscounted return of the other
/// trajectories in the group (0 when the group has one member). A
/// trajectory with no steps receives no reward.
pub fn compose_rewards(group: &mut RolloutGroup, cfg: &RewardConfig) -> Result<AdvantageTable, RlError> {
    cfg.validate()?;
    if let Some(t) = group.trajectories.iter().find(|t| !t.is_terminal()) {
        return Err(RlError::NotTerminal { task_id: t.task_id.clone(), group_index: t.group_index });
    }
    let mut times: Vec<f64> =
        group.trajectories.iter().filter(|t| !t.steps.is_empty()).map(|t| t.total_virtual_time).collect();
    let t_base = median(&mut times);
    let mut table = AdvantageTable { time_baseline: t_base, ..Default::default() };
    for traj in &mut group.trajectories {
        let n = traj.steps.len();
        let mut rewards: Vec<f64> = traj.steps.iter().map(|s| cfg.alpha * process_reward(s, &cfg.process)).collect();
        if let Some(last) = rewards.last_mut() {
            let speed = speed_reward(traj.total_virtual_time, t_base.unwrap_or(0.0), &cfg.speed)?;
            *last += cfg.beta * speed + traj.score;
        }
        debug_assert_eq!(rewards.len(), n);
        table.returns.push(rewards.iter().sum());
        table.reward_to_go.push(reward_to_go(&rewards, cfg.gamma));
        traj.step_rewards = rewards;
    }
    let g = group.trajectories.len();
    let total: f64 = table.returns.iter().sum();
    table.baselines = table.returns.iter().map(|&r| if g > 1 { (total - r) / (g - 1) as f64 } else { 0.0 }).collect();
    table.advantages =
        table.reward_to_go.iter().zip(&table.baselines).map(|(rtg, &b)| rtg.iter().map(|&x| x - b).collect()).collect();
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CispoConfig {
    /// Upper clip margin: ratios are capped at `1 + eps_high`.
    pub eps_high: f64,
    pub learning_rate: f64,
    /// Trajectories per rollout group.
    pub group_size: usize,
}

impl Default for CispoConfig {
    fn default() -> Self {
        Self { eps_high: 0.2, learning_rate: 0.05, group_size: 8 }
    }
}

impl CispoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(self.eps_high > 0.0) {
            return Err(RlError::Config(format!("eps_high {} must be positive", self.eps_high)));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(RlError::Config(format!("learning rate {}", self.learning_rate)));
        }
        if self.group_size == 0 {
            return Err(RlError::Config("group size must be positive".into()));
        }
        Ok(())
    }
}

/// `clip(ratio, 0, 1 + eps_high)`.
pub fn clip_ratio(ratio: f64, eps_high: f64) -> f64 {
    ratio.clamp(0.0, 1.0 + eps_high)
}

/// One rollout group's training samples with one advantage per sample
/// (the advantage of the step it came from).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub group_id: u64,
    pub samples: Vec<CompletionSample>,
    pub advantages: Vec<f64>,
}

impl GroupBatch {
    /// White-box batch: samples from the recorded steps.
    pub fn from_group(group: &RolloutGroup, table: &AdvantageTable) -> Result<Self, RlError> {
        let samples = flatten_to_samples(group)?;
        let advantages: Vec<f64> = table.advantages.iter().flatten().copied().collect();
        Self::new(group.group_id, samples, advantages)
    }

    pub fn new(group_id: u64, samples: Vec<CompletionSample>, advantages: Vec<f64>) -> Result<Self, RlError> {
        if samples.len() != advantages.len() {
            return Err(RlError::Misaligned { group_id, samples: samples.len(), advantages: advantages.len() });
        }
        Ok(Self { group_id, samples, advantages })
    }

    pub fn tokens(&self) -> usize {
        self.samples.iter().map(|s| s.action_tokens.len()).sum()
    }
}

/// How current-policy log-probabilities are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogProbPath {
    #[default]
    Independent,
    /// Through the group's prefix tree.
    Merged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CispoOutput {
    pub objective: f64,
    pub gradient: Gradient,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_advantage: f64,
    pub tokens: usize,
    pub samples: usize,
    /// Mean squared distance of per-group gradients from their mean.
    pub group_grad_variance: f64,
    pub ledgers: Vec<FlopLedger>,
}

fn check_behavior(b: &GroupBatch) -> Result<(), RlError> {
    for (i, s) in b.samples.iter().enumerate() {
        if s.behavior_logprobs.len() != s.action_tokens.len() || s.behavior_logprobs.iter().any(|x| !x.is_finite()) {
            return Err(RlError::MissingBehavior {
                group_id: b.group_id,
                index: i,
                found: s.behavior_logprobs.len(),
                expected: s.action_tokens.len(),
            });
        }
    }
    Ok(())
}

/// Current log-probs of every sample's action tokens.
pub fn current_log_probs(
    params: &PolicyParams,
    batch: &GroupBatch,
    path: LogProbPath,
) -> Result<(Vec<Vec<f64>>, Option<FlopLedger>), RlError> {
    match path {
        LogProbPath::Merged if !batch.samples.is_empty() => {
            let (lps, ledger) = merged_action_log_probs(params, &batch.samples, batch.group_id)?;
            Ok((lps, Some(ledger)))
        }
        _ => {
            let lps = batch
                .samples
                .par_iter()
                .map(|s| token_log_probs(params, &s.state_tokens, &s.action_tokens))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((lps, None))
        }
    }
}

/// The clipped IS objective and its gradient with the clipped ratio held
/// constant.
///
/// Within a group, token contributions `r̂·Â·log π` are summed and divided
/// by the group's total action tokens; groups are then averaged. Groups
/// without action tokens are skipped.
pub fn cispo_loss_and_grad(
    params: &PolicyParams,
    batches: &[GroupBatch],
    cfg: &CispoConfig,
    path: LogProbPath,
) -> Result<CispoOutput, RlError> {
    cfg.validate()?;
    batches.iter().try_for_each(check_behavior)?;
    let active: Vec<&GroupBatch> = batches.iter().filter(|b| b.tokens() > 0).collect();
    let n_groups = active.len();
    let mut out = CispoOutput {
        objective: 0.0,
        gradient: params.zeros_like(),
        mean_ratio: 0.0,
        clip_fraction: 0.0,
        mean_advantage: 0.0,
        tokens: 0,
        samples: batches.iter().map(|b| b.samples.len()).sum(),
        group_grad_variance: 0.0,
        ledgers: Vec::new(),
    };
    let adv_count: usize = out.samples;
    if adv_count > 0 {
        out.mean_advantage = batches.iter().flat_map(|b| &b.advantages).sum::<f64>() / adv_count as f64;
    }
    if n_groups == 0 {
        return Ok(out);
    }
    let cap = 1.0 + cfg.eps_high;
    let mut group_grads = Vec::with_capacity(n_groups);
    let (mut ratio_sum, mut clipped) = (0.0, 0usize);
    for b in active {
        let (lps, ledger) = current_log_probs(params, b, path)?;
        out.ledgers.extend(ledger);
        let n = b.tokens() as f64;
        let mut weights = Vec::with_capacity(b.samples.len());
        let mut objective = 0.0;
        for ((s, lp), &adv) in b.samples.iter().zip(&lps).zip(&b.advantages) {
            let w: Vec<f64> = lp
                .iter()
                .zip(&s.behavior_logprobs)
                .map(|(&cur, &old)| {
                    let ratio = (cur - old).exp();
                    ratio_sum += ratio;
                    clipped += (ratio > cap) as usize;
                    clip_ratio(ratio, cfg.eps_high) * adv
                })
                .collect();
            for (wi, &l) in w.iter().zip(lp) {
                objective += wi * l;
            }
            weights.push(w);
        }
        let parts = b
            .samples
            .par_iter()
            .zip(weights.par_iter())
            .filter(|(s, _)| !s.action_tokens.is_empty())
            .map(|(s, w)| grad_weighted_log_prob(params, &s.state_tokens, &s.action_tokens, w).map(|(_, g)| g))
            .collect::<Result<Vec<_>, _>>()?;
        let mut g = params.zeros_like();
        for part in &parts {
            g.axpy(1.0 / n, part);
        }
        out.objective += objective / n / n_groups as f64;
        out.tokens += b.tokens();
        group_grads.push(g);
    }
    for g in &group_grads {
        out.gradient.axpy(1.0 / n_groups as f64, g);
    }
    out.group_grad_variance = group_grads
        .iter()
        .map(|g| g.data.iter().zip(&out.gradient.data).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
        .sum::<f64>()
        / n_groups as f64;
    out.mean_ratio = ratio_sum / out.tokens as f64;
    out.clip_fraction = clipped as f64 / out.tokens as f64;
    Ok(out)
}

/// `θ' = θ + lr·∇J` on a fresh snapshot.
pub fn apply_update(params: &PolicyParams, gradient: &Gradient, learning_rate: f64) -> Result<PolicyParams, RlError> {
    if gradient.config != params.config {
        return Err(RlError::Config("gradient shape does not match parameters".into()));
    }
    let bad: Vec<usize> = gradient.data.iter().enumerate().filter(|(_, x)| !x.is_finite()).map(|(i, _)| i).collect();
    if let Some(&first) = bad.first() {
        return Err(RlError::NonFiniteGradient { count: bad.len(), first });
    }
    if !learning_rate.is_finite() {
        return Err(RlError::Config(format!("learning rate {learning_rate}")));
    }
    let mut next = params.clone();
    next.axpy(learning_rate, gradient);
    Ok(next)
}

/// One JSONL record per parameter update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub step: u64,
    pub objective: f64,
    pub grad_norm: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_advantage: f64,
    pub mean_return: f64,
    pub tokens_consumed: usize,
    pub samples: usize,
    pub group_grad_variance: f64,
}

impl UpdateMetrics {
    pub fn new(step: u64, out: &CispoOutput, mean_return: f64) -> Self {
        Self {
            step,
            objective: out.objective,
            grad_norm: out.gradient.l2_norm(),
            mean_ratio: out.mean_ratio,
            clip_fraction: out.clip_fraction,
            mean_advantage: out.mean_advantage,
            mean_return,
            tokens_consumed: out.tokens,
            samples: out.samples,
            group_grad_variance: out.group_grad_variance,
        }
    }
}
