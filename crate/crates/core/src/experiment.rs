//! End-to-end training runs: configuration, the rollout/update loop,
//! evaluation, metrics streams and the yield report.
//!
//! A run proceeds in rounds. Each round samples `queue_size` tasks, rolls
//! out a group of `group_size` episodes per task against the parameter
//! snapshot taken at the start of the round, and submits the groups to a
//! windowed-FIFO queue. A simulated trainer fetches groups as the window
//! allows; every `groups_per_update` fetched groups become one policy
//! update. All times are virtual and every random stream is derived from
//! the configuration, so a run is a pure function of its config.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::{
    oracle_actions, run_episode, Catalog, CmPolicy, EnvError, EpisodeIds, ScriptedPolicy, SnapshotPolicy, TaskSpec,
};
use crate::gateway::{
    reconstruct_blackbox, AgentRegistration, DataPool, DataPoolEntry, Gateway, GatewayError, PoolError, Source,
};
use crate::jsonl::{self, JsonlError};
use crate::policy::{grad_log_prob, InitConfig, ModelConfig, PolicyError, PolicyParams};
use crate::prefix::FlopLedger;
use crate::rl::{
    apply_update, cispo_loss_and_grad, compose_rewards, AdvantageTable, CispoConfig, GroupBatch, LogProbPath,
    RewardConfig, RlError, UpdateMetrics,
};
use crate::scheduler::{
    displacement_metric, sample_tasks, simulate_trainer, window_for, FetchEvent, MixSchedule, SchedulerError,
};
use crate::seed;
use crate::trajectory::{
    flatten_to_samples, token_length, CompletionSample, RolloutGroup, StepRecord, Trajectory, TrajectoryError,
};
use crate::vocab::{parse_action, ActionSegment, SegmentKind, Token, END};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FETCH_EVENTS_FILE: &str = "fetch_events.jsonl";
pub const FLOP_LEDGER_FILE: &str = "flop_ledger.jsonl";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

const TASK_STREAM: u64 = 0x7461_736b;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("update step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

impl ExperimentError {
    fn at(step: u64) -> impl FnOnce(ExperimentError) -> ExperimentError {
        move |e| match e {
            e @ ExperimentError::AtStep { .. } => e,
            e => ExperimentError::AtStep { step, source: Box::new(e) },
        }
    }

    /// Process exit code: 2 config, 3 io, 4 malformed data, 5 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::AtStep { source, .. } => source.exit_code(),
            ExperimentError::Config(_) => 2,
            ExperimentError::Env(EnvError::InvalidTask { .. } | EnvError::UnknownTask(_)) => 2,
            ExperimentError::Rl(RlError::Config(_)) | ExperimentError::Scheduler(SchedulerError::Mix(_)) => 2,
            ExperimentError::Policy(PolicyError::Config(_)) => 2,
            ExperimentError::Io(_)
            | ExperimentError::Env(EnvError::Io(_))
            | ExperimentError::Policy(PolicyError::Io(_)) => 3,
            ExperimentError::Json(_) | ExperimentError::Jsonl(_) | ExperimentError::Env(EnvError::Json(_)) => 4,
            ExperimentError::Policy(PolicyError::Checkpoint(_)) => 4,
            _ => 5,
        }
    }
}

/// Where tasks come from: a catalog file or the seeded builtin catalog,
/// optionally restricted to a list of ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct CatalogRef {
    pub path: Option<PathBuf>,
    pub builtin_seed: u64,
    pub tasks: Option<Vec<String>>,
}

impl CatalogRef {
    pub fn load(&self) -> Result<Catalog, EnvError> {
        let full = match &self.path {
            Some(p) => Catalog::load(p)?,
            None => Catalog::builtin(self.builtin_seed),
        };
        match &self.tasks {
            Some(ids) => full.restrict(ids),
            None => Ok(full),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntegrationMode {
    /// The harness hands recorded trajectories to the trainer.
    #[default]
    WhiteBox,
    /// The trainer sees only the gateway's request log plus the
    /// environment's per-step timings and final verdict.
    BlackBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Evaluate after every `every` updates (0: only at start and end).
    pub every: u64,
    pub episodes_per_task: usize,
    /// Seed of the held-out evaluation streams.
    pub seed: u64,
    /// Evaluation tasks; defaults to every task in the training catalog.
    pub tasks: Option<Vec<String>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { every: 20, episodes_per_task: 32, seed: 0x5eed_e7a1, tasks: None }
    }
}

/// Supervised warm start on scripted demonstrations before any RL update,
/// standing in for a pretrained base policy. Every training task
/// contributes its scripted solution and, when that solution issues several
/// tool calls in one step, a variant issuing them one per step; both are
/// weighted equally so the warm-started policy has no preference between
/// them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmStart {
    /// Full-batch gradient ascent steps on the demonstration log-likelihood
    /// (0 disables).
    pub steps: u64,
    pub learning_rate: f64,
}

impl Default for WarmStart {
    fn default() -> Self {
        Self { steps: 0, learning_rate: 1.0 }
    }
}

/// Splits every multi-call action into one action per call.
pub fn one_call_per_step(actions: &[Vec<Token>]) -> Vec<Vec<Token>> {
    let mut out = Vec::new();
    for a in actions {
        let segs = parse_action(a);
        let calls: Vec<&ActionSegment> = segs.iter().filter(|s| s.kind == SegmentKind::ToolCall).collect();
        if calls.len() < 2 {
            out.push(a.clone());
            continue;
        }
        for c in calls {
            let mut t: Vec<Token> = c.tokens.iter().copied().filter(|&x| x != END).collect();
            t.push(END);
            out.push(t);
        }
    }
    out
}

fn demonstrations(tasks: &[TaskSpec], cm: &CmPolicy) -> Result<Vec<CompletionSample>, ExperimentError> {
    let mut out = Vec::new();
    for task in tasks {
        let oracle = oracle_actions(task);
        let split = one_call_per_step(&oracle);
        let mut variants = vec![oracle.clone()];
        if split != oracle {
            variants.push(split);
        }
        let trajectories = variants
            .into_iter()
            .enumerate()
            .map(|(i, script)| {
                let mut policy = ScriptedPolicy::new(script);
                run_episode(task, &task.environment(), cm, &mut policy, EpisodeIds { group_id: 0, group_index: i }, 0)
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.extend(flatten_to_samples(&RolloutGroup::new(task.task_id.clone(), 0, trajectories)?)?);
    }
    Ok(out)
}

/// Maximizes the mean per-token log-likelihood of the demonstrations.
fn warm_start(
    params: PolicyParams,
    tasks: &[TaskSpec],
    cm: &CmPolicy,
    ws: &WarmStart,
) -> Result<PolicyParams, ExperimentError> {
    if ws.steps == 0 {
        return Ok(params);
    }
    let demos = demonstrations(tasks, cm)?;
    let tokens: usize = demos.iter().map(|d| d.action_tokens.len()).sum();
    let mut params = params;
    for _ in 0..ws.steps {
        let grads = demos
            .par_iter()
            .map(|d| grad_log_prob(&params, &d.state_tokens, &d.action_tokens))
            .collect::<Result<Vec<_>, _>>()?;
        let mut total = params.zeros_like();
        for g in &grads {
            total.axpy(1.0 / tokens as f64, g);
        }
        params = apply_update(&params, &total, ws.learning_rate)?;
    }
    Ok(params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub catalog: CatalogRef,
    pub mix: MixSchedule,
    /// Scheduler window as a fraction of `queue_size`.
    pub window_fraction: f64,
    /// Rollout groups submitted per round.
    pub queue_size: usize,
    pub groups_per_update: usize,
    pub reward: RewardConfig,
    pub cispo: CispoConfig,
    pub cm: CmPolicy,
    pub mode: IntegrationMode,
    /// Number of parameter updates.
    pub updates: u64,
    pub workers: usize,
    pub prefix_merge: bool,
    pub model: ModelConfig,
    pub init: InitConfig,
    pub eval: EvalConfig,
    /// Virtual seconds the trainer spends per fetched group.
    pub trainer_cost_per_group: f64,
    pub spill_trajectories: bool,
    pub warm_start: WarmStart,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            catalog: CatalogRef::default(),
            mix: MixSchedule::default(),
            window_fraction: 0.3,
            queue_size: 8,
            groups_per_update: 1,
            reward: RewardConfig::default(),
            cispo: CispoConfig::default(),
            cm: CmPolicy::PersistAll,
            mode: IntegrationMode::WhiteBox,
            updates: 100,
            workers: 1,
            prefix_merge: true,
            model: ModelConfig::default(),
            init: InitConfig::default(),
            eval: EvalConfig::default(),
            trainer_cost_per_group: 0.5,
            spill_trajectories: true,
            warm_start: WarmStart::default(),
        }
    }
}

/// Every key path of `input` must exist in `resolved`.
fn unknown_keys(input: &Value, resolved: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(a), Value::Object(b)) = (input, resolved) {
        for (k, v) in a {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match b.get(k) {
                Some(r) => unknown_keys(v, r, &path, out),
                None => out.push(path),
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses a JSON config, rejecting keys the config does not have.
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let input: Value = serde_json::from_str(text)?;
        Self::from_value(input)
    }

    pub fn from_value(input: Value) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_value(input.clone()).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&input, &serde_json::to_value(&cfg)?, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(ExperimentError::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.into()));
        if self.queue_size == 0 {
            return bad("queue_size must be positive");
        }
        if self.groups_per_update == 0 {
            return bad("groups_per_update must be positive");
        }
        if self.workers == 0 {
            return bad("workers must be positive");
        }
        if !(self.window_fraction >= 0.0 && self.window_fraction <= 1.0) {
            return bad("window_fraction must lie in [0, 1]");
        }
        if !(self.trainer_cost_per_group >= 0.0 && self.trainer_cost_per_group.is_finite()) {
            return bad("trainer_cost_per_group must be a nonnegative number");
        }
        if !(self.warm_start.learning_rate.is_finite() && self.warm_start.learning_rate >= 0.0) {
            return bad("warm_start.learning_rate must be a nonnegative number");
        }
        if self.eval.episodes_per_task == 0 {
            return bad("eval.episodes_per_task must be positive");
        }
        self.model.validate()?;
        self.reward.validate()?;
        self.cispo.validate()?;
        self.mix.validate()?;
        Ok(())
    }

    pub fn window(&self) -> usize {
        window_for(self.window_fraction, self.queue_size)
    }

    /// Sets a dotted key (`cispo.learning_rate`) to a JSON value. The key
    /// must already exist in the resolved config.
    pub fn with_key(&self, key: &str, value: Value) -> Result<Self, ExperimentError> {
        let mut v = serde_json::to_value(self)?;
        let mut at = &mut v;
        for part in key.split('.') {
            at = at
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| ExperimentError::Config(format!("unknown key {key}")))?;
        }
        *at = value;
        Self::from_value(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub start_vtime: f64,
    pub end_vtime: f64,
    pub idle_time: f64,
    pub busy_time: f64,
    pub window: usize,
    pub displacement: f64,
    pub groups: usize,
    pub tokens_generated: usize,
    pub mean_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    #[serde(flatten)]
    pub metrics: UpdateMetrics,
    pub round: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Updates applied before this evaluation.
    pub step: u64,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_score: f64,
    pub mean_completion_time: f64,
    pub mean_steps: f64,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Config(Box<ExperimentConfig>),
    Round(RoundRecord),
    Update(UpdateRecord),
    Eval(EvalRecord),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub params: PolicyParams,
    pub records: Vec<Record>,
    pub fetch_events: Vec<FetchEvent>,
    pub ledgers: Vec<FlopLedger>,
}

impl RunResult {
    pub fn evals(&self) -> Vec<&EvalRecord> {
        self.records.iter().filter_map(|r| if let Record::Eval(e) = r { Some(e) } else { None }).collect()
    }

    pub fn updates(&self) -> Vec<&UpdateRecord> {
        self.records.iter().filter_map(|r| if let Record::Update(u) = r { Some(u) } else { None }).collect()
    }
}

struct Streams {
    metrics: BufWriter<File>,
    fetch: BufWriter<File>,
    ledger: BufWriter<File>,
    trajectories: Option<BufWriter<File>>,
}

impl Streams {
    fn create(dir: &Path, spill: bool) -> Result<Self, ExperimentError> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<File>, ExperimentError> {
            Ok(BufWriter::new(File::create(dir.join(name))?))
        };
        Ok(Self {
            metrics: open(METRICS_FILE)?,
            fetch: open(FETCH_EVENTS_FILE)?,
            ledger: open(FLOP_LEDGER_FILE)?,
            trajectories: if spill { Some(open(TRAJECTORIES_FILE)?) } else { None },
        })
    }

    fn flush(&mut self) -> Result<(), ExperimentError> {
        self.metrics.flush()?;
        self.fetch.flush()?;
        self.ledger.flush()?;
        if let Some(t) = &mut self.trajectories {
            t.flush()?;
        }
        Ok(())
    }
}

/// Identity of episode `index` of group `group_id`; also its latency seed
/// and the agent id its completions are seeded with.
pub fn agent_id(global_seed: u64, task_id: &str, group_id: u64, index: usize) -> u64 {
    seed::derive(&[global_seed, seed::hash_str(task_id), group_id, index as u64])
}

/// Rebuilds a trajectory from what a black-box agent exposes: its gateway
/// log for states, actions and behavior log-probs, and the environment's
/// step timings and verdict.
fn blackbox_trajectory(harness: &Trajectory, gateway: &Gateway, agent: u64) -> Result<Trajectory, ExperimentError> {
    let mut t = Trajectory::new(harness.task_id.clone(), harness.group_id, harness.group_index);
    let samples = match gateway.take_log(agent) {
        Some(log) if !log.entries.is_empty() => reconstruct_blackbox(&log)?,
        _ => Vec::new(),
    };
    if samples.len() != harness.steps.len() {
        return Err(ExperimentError::Config(format!(
            "agent {agent}: {} logged requests for {} environment steps",
            samples.len(),
            harness.steps.len()
        )));
    }
    for (s, env_step) in samples.into_iter().zip(&harness.steps) {
        t.push_step(StepRecord {
            state_tokens: s.state_tokens,
            action: parse_action(&s.action_tokens),
            observation_tokens: Vec::new(),
            virtual_duration: env_step.virtual_duration,
            behavior_logprobs: s.behavior_logprobs,
        });
    }
    t.total_virtual_time = harness.total_virtual_time;
    t.finish(harness.terminal_outcome.expect("harness returns terminal trajectories"), harness.score);
    Ok(t)
}

/// Rolls out `group_size` episodes for each task in parallel and returns
/// the groups in task order.
fn generate(
    cfg: &ExperimentConfig,
    snapshot: &PolicyParams,
    tasks: &[TaskSpec],
    first_group_id: u64,
) -> Result<Vec<RolloutGroup>, ExperimentError> {
    let g = cfg.cispo.group_size;
    let gateway = Gateway::new(cfg.seed);
    let jobs: Vec<(usize, usize)> = (0..tasks.len()).flat_map(|k| (0..g).map(move |i| (k, i))).collect();
    let trajectories = jobs
        .par_iter()
        .map(|&(k, i)| -> Result<Trajectory, ExperimentError> {
            let task = &tasks[k];
            let group_id = first_group_id + k as u64;
            let agent = agent_id(cfg.seed, &task.task_id, group_id, i);
            let ids = EpisodeIds { group_id, group_index: i };
            let env = task.environment();
            match cfg.mode {
                IntegrationMode::WhiteBox => {
                    let mut policy = SnapshotPolicy::new(snapshot, cfg.seed, agent);
                    Ok(run_episode(task, &env, &cfg.cm, &mut policy, ids, agent)?)
                }
                IntegrationMode::BlackBox => {
                    gateway.register(
                        agent,
                        AgentRegistration { task_id: task.task_id.clone(), group_id, group_index: i, cm: Some(cfg.cm) },
                    );
                    let mut client = gateway.client(agent, snapshot, Some(cfg.cm));
                    let harness = run_episode(task, &env, &cfg.cm, &mut client, ids, agent)?;
                    blackbox_trajectory(&harness, &gateway, agent)
                }
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut it = trajectories.into_iter();
    tasks
        .iter()
        .enumerate()
        .map(|(k, task)| {
            Ok(RolloutGroup::new(task.task_id.clone(), first_group_id + k as u64, it.by_ref().take(g).collect())?)
        })
        .collect()
}

/// Success rate, mean score and mean completion time on held-out seeds.
pub fn evaluate(
    params: &PolicyParams,
    tasks: &[TaskSpec],
    cm: &CmPolicy,
    eval: &EvalConfig,
    step: u64,
) -> Result<EvalRecord, ExperimentError> {
    let jobs: Vec<(usize, usize)> =
        (0..tasks.len()).flat_map(|k| (0..eval.episodes_per_task).map(move |e| (k, e))).collect();
    let results = jobs
        .par_iter()
        .map(|&(k, e)| {
            let task = &tasks[k];
            let agent = seed::derive(&[eval.seed, seed::hash_str(&task.task_id), e as u64]);
            let mut policy = SnapshotPolicy::new(params, eval.seed, agent);
            let t = run_episode(
                task,
                &task.environment(),
                cm,
                &mut policy,
                EpisodeIds { group_id: 0, group_index: e },
                agent,
            )?;
            Ok((
                t.terminal_outcome == Some(crate::trajectory::TerminalOutcome::Success),
                t.score,
                t.total_virtual_time,
                t.steps.len(),
            ))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let n = results.len().max(1) as f64;
    Ok(EvalRecord {
        step,
        episodes: results.len(),
        success_rate: results.iter().filter(|r| r.0).count() as f64 / n,
        mean_score: results.iter().map(|r| r.1).sum::<f64>() / n,
        mean_completion_time: results.iter().map(|r| r.2).sum::<f64>() / n,
        mean_steps: results.iter().map(|r| r.3 as f64).sum::<f64>() / n,
    })
}

struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    params: PolicyParams,
    step: u64,
    records: Vec<Record>,
    fetch_events: Vec<FetchEvent>,
    ledgers: Vec<FlopLedger>,
    streams: Option<Streams>,
    eval_tasks: Vec<TaskSpec>,
}

impl Trainer<'_> {
    fn emit(&mut self, r: Record) -> Result<(), ExperimentError> {
        if let Some(s) = &mut self.streams {
            jsonl::write_line(&mut s.metrics, &r)?;
        }
        self.records.push(r);
        Ok(())
    }

    fn eval(&mut self) -> Result<(), ExperimentError> {
        let r = evaluate(&self.params, &self.eval_tasks, &self.cfg.cm, &self.cfg.eval, self.step)?;
        self.emit(Record::Eval(r))
    }

    fn update(
        &mut self,
        groups: Vec<RolloutGroup>,
        round: u64,
        observer: &mut (dyn FnMut(u64, &[GroupBatch]) + Send),
    ) -> Result<(), ExperimentError> {
        let mut batches = Vec::with_capacity(groups.len());
        let mut returns = Vec::new();
        for mut g in groups {
            let table: AdvantageTable = compose_rewards(&mut g, &self.cfg.reward)?;
            returns.extend(table.returns.iter().copied());
            batches.push(GroupBatch::from_group(&g, &table)?);
        }
        observer(self.step, &batches);
        let path = if self.cfg.prefix_merge { LogProbPath::Merged } else { LogProbPath::Independent };
        let out = cispo_loss_and_grad(&self.params, &batches, &self.cfg.cispo, path)?;
        self.params = apply_update(&self.params, &out.gradient, self.cfg.cispo.learning_rate)?;
        self.step += 1;
        let mean_return = if returns.is_empty() { 0.0 } else { returns.iter().sum::<f64>() / returns.len() as f64 };
        let metrics = UpdateMetrics::new(self.step, &out, mean_return);
        if let Some(s) = &mut self.streams {
            jsonl::write_all(&mut s.ledger, &out.ledgers)?;
        }
        self.ledgers.extend(out.ledgers);
        self.emit(Record::Update(UpdateRecord { metrics, round }))?;
        if self.cfg.eval.every > 0 && self.step.is_multiple_of(self.cfg.eval.every) && self.step < self.cfg.updates {
            self.eval()?;
        }
        Ok(())
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunResult, ExperimentError> {
    run_experiment_with(cfg, out, &mut |_, _| {})
}

/// Runs the training loop. `observer` sees every training batch right
/// before its update, together with the number of updates applied so far.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    observer: &mut (dyn FnMut(u64, &[GroupBatch]) + Send),
) -> Result<RunResult, ExperimentError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    pool.install(|| run_inner(cfg, out, observer))
}

fn run_inner(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    observer: &mut (dyn FnMut(u64, &[GroupBatch]) + Send),
) -> Result<RunResult, ExperimentError> {
    let catalog = cfg.catalog.load()?;
    catalog.validate()?;
    let eval_tasks = match &cfg.eval.tasks {
        Some(ids) => catalog.restrict(ids)?.tasks,
        None => catalog.tasks.clone(),
    };
    let streams = out.map(|d| Streams::create(d, cfg.spill_trajectories)).transpose()?;
    let params = PolicyParams::init(cfg.model, cfg.init, cfg.seed)?;
    let params = warm_start(params, &catalog.tasks, &cfg.cm, &cfg.warm_start)?;
    let mut tr = Trainer {
        cfg,
        params,
        step: 0,
        records: Vec::new(),
        fetch_events: Vec::new(),
        ledgers: Vec::new(),
        streams,
        eval_tasks,
    };
    tr.emit(Record::Config(Box::new(cfg.clone())))?;
    tr.eval()?;

    let n = cfg.queue_size;
    let g = cfg.cispo.group_size;
    let window = cfg.window();
    let mut clock = 0.0f64;
    let mut pending: VecDeque<RolloutGroup> = VecDeque::new();
    let mut round = 0u64;
    while tr.step < cfg.updates {
        let step = tr.step;
        let snapshot = tr.params.clone();
        let tasks = sample_tasks(&cfg.mix, &catalog, n, step, seed::derive(&[cfg.seed, TASK_STREAM, round]))
            .map_err(ExperimentError::from)
            .map_err(ExperimentError::at(step))?;
        let groups = generate(cfg, &snapshot, &tasks, round * n as u64).map_err(ExperimentError::at(step))?;

        // Rollouts of a round start together; a group completes with its
        // slowest episode.
        let completion: Vec<f64> = groups
            .iter()
            .map(|gr| clock + gr.trajectories.iter().map(|t| t.total_virtual_time).fold(0.0, f64::max))
            .collect();
        let data = DataPool::new();
        let mut ids = Vec::with_capacity(n);
        for (gr, &done) in groups.iter().zip(&completion) {
            let source = match cfg.mode {
                IntegrationMode::WhiteBox => Source::WhiteBox,
                IntegrationMode::BlackBox => Source::BlackBox,
            };
            ids.push(
                gr.trajectories
                    .iter()
                    .map(|t| data.put(DataPoolEntry { trajectory: t.clone(), enqueue_virtual_time: done, source }))
                    .collect::<Vec<_>>(),
            );
        }
        let tokens_generated: usize = groups.iter().flat_map(|gr| &gr.trajectories).map(token_length).sum();
        let score_sum: f64 = groups.iter().flat_map(|gr| &gr.trajectories).map(|t| t.score).sum();

        let timeline = simulate_trainer(&completion, &vec![step; n], window, cfg.trainer_cost_per_group, clock)?;
        let offset = round as usize * n;
        let events: Vec<FetchEvent> = timeline
            .events
            .iter()
            .map(|e| FetchEvent { index: e.index + offset, window_head: e.window_head + offset, ..e.clone() })
            .collect();
        if let Some(s) = &mut tr.streams {
            jsonl::write_all(&mut s.fetch, &events)?;
        }
        tr.fetch_events.extend(events);

        {
            let mut consumer = data.consumer()?;
            for &k in &timeline.fetch_order {
                data.release(&ids[k])?;
                let trajs: Vec<Trajectory> = consumer.take(g).into_iter().map(|e| e.trajectory.clone()).collect();
                pending.push_back(RolloutGroup::new(tasks[k].task_id.clone(), groups[k].group_id, trajs)?);
                while pending.len() >= cfg.groups_per_update && tr.step < cfg.updates {
                    let batch: Vec<RolloutGroup> = pending.drain(..cfg.groups_per_update).collect();
                    let at = tr.step;
                    tr.update(batch, round, observer).map_err(ExperimentError::at(at))?;
                }
            }
        }
        if let Some(s) = &mut tr.streams {
            if let Some(w) = &mut s.trajectories {
                data.spill(w)?;
            }
        }
        let displacement = displacement_metric(&timeline.fetch_order, &(0..n).collect::<Vec<_>>())?;
        tr.emit(Record::Round(RoundRecord {
            round,
            start_vtime: clock,
            end_vtime: timeline.end_time,
            idle_time: timeline.idle_time,
            busy_time: timeline.busy_time,
            window,
            displacement,
            groups: n,
            tokens_generated,
            mean_score: score_sum / (n * g) as f64,
        }))?;
        clock = timeline.end_time;
        round += 1;
    }
    if tr.step > 0 {
        tr.eval()?;
    }
    if let Some(d) = out {
        tr.params.save(&d.join(CHECKPOINT_FILE))?;
    }
    if let Some(s) = &mut tr.streams {
        s.flush()?;
    }
    Ok(RunResult { params: tr.params, records: tr.records, fetch_events: tr.fetch_events, ledgers: tr.ledgers })
}

pub fn read_metrics(path: &Path) -> Result<Vec<Record>, ExperimentError> {
    Ok(jsonl::read_all(BufReader::new(File::open(path)?))?)
}

/// System-level summary of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YieldReport {
    /// Action tokens generated per virtual second.
    pub throughput: f64,
    /// Mean-return improvement (last update minus first) per consumed sample.
    pub sample_efficiency: f64,
    #[serde(rename = "yield")]
    pub yield_: f64,
    /// Mean over updates of the spread of per-group gradients.
    pub gradient_variance: f64,
    pub idle_fraction: f64,
    pub displacement: f64,
    pub updates: usize,
    pub samples_consumed: usize,
    pub tokens_generated: usize,
    pub virtual_time: f64,
    pub final_success_rate: Option<f64>,
    pub final_mean_completion_time: Option<f64>,
}

pub fn yield_report(records: &[Record]) -> YieldReport {
    let mut rounds = Vec::new();
    let mut updates = Vec::new();
    let mut last_eval = None;
    for r in records {
        match r {
            Record::Round(x) => rounds.push(x),
            Record::Update(u) => updates.push(&u.metrics),
            Record::Eval(e) => last_eval = Some(e),
            Record::Config(_) => {}
        }
    }
    let tokens: usize = rounds.iter().map(|r| r.tokens_generated).sum();
    let vtime: f64 = rounds.iter().map(|r| r.end_vtime - r.start_vtime).sum();
    let idle: f64 = rounds.iter().map(|r| r.idle_time).sum();
    let throughput = if vtime > 0.0 { tokens as f64 / vtime } else { 0.0 };
    let samples: usize = updates.iter().map(|u| u.samples).sum();
    let sample_efficiency = match (updates.first(), updates.last()) {
        (Some(a), Some(b)) if samples > 0 => (b.mean_return - a.mean_return) / samples as f64,
        _ => 0.0,
    };
    let mean = |xs: &mut dyn Iterator<Item = f64>, n: usize| if n == 0 { 0.0 } else { xs.sum::<f64>() / n as f64 };
    YieldReport {
        throughput,
        sample_efficiency,
        yield_: throughput * sample_efficiency,
        gradient_variance: mean(&mut updates.iter().map(|u| u.group_grad_variance), updates.len()),
        idle_fraction: if vtime > 0.0 { idle / vtime } else { 0.0 },
        displacement: mean(&mut rounds.iter().map(|r| r.displacement), rounds.len()),
        updates: updates.len(),
        samples_consumed: samples,
        tokens_generated: tokens,
        virtual_time: vtime,
        final_success_rate: last_eval.map(|e| e.success_rate),
        final_mean_completion_time: last_eval.map(|e| e.mean_completion_time),
    }
}

/// Rewards and advantages recomputed from stored trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub group_id: u64,
    pub task_id: String,
    pub returns: Vec<f64>,
    pub baselines: Vec<f64>,
    pub advantages: Vec<Vec<f64>>,
}

/// Regroups a trajectory spill by group id and recomputes rewards.
pub fn replay(path: &Path, reward: &RewardConfig) -> Result<Vec<ReplayRecord>, ExperimentError> {
    let entries: Vec<DataPoolEntry> = jsonl::read_all(BufReader::new(File::open(path)?))?;
    let mut by_group: std::collections::BTreeMap<u64, Vec<Trajectory>> = std::collections::BTreeMap::new();
    for e in entries {
        by_group.entry(e.trajectory.group_id).or_default().push(e.trajectory);
    }
    by_group
        .into_iter()
        .map(|(gid, mut ts)| {
            ts.sort_by_key(|t| t.group_index);
            let task_id = ts[0].task_id.clone();
            let mut group = RolloutGroup::new(task_id.clone(), gid, ts)?;
            let table = compose_rewards(&mut group, reward)?;
            Ok(ReplayRecord {
                group_id: gid,
                task_id,
                returns: table.returns,
                baselines: table.baselines,
                advantages: table.advantages,
            })
        })
        .collect()
}

/// One sweep point: the value used and the resulting report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub key: String,
    pub value: Value,
    pub report: YieldReport,
    pub evals: Vec<EvalRecord>,
}

/// Runs `base` once per value of `key`, each into its own subdirectory of
/// `out` when given.
pub fn sweep(
    base: &ExperimentConfig,
    key: &str,
    values: &[Value],
    out: Option<&Path>,
) -> Result<Vec<SweepRow>, ExperimentError> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let cfg = base.with_key(key, v.clone())?;
            let dir = out.map(|d| d.join(format!("{i:02}")));
            let res = run_experiment(&cfg, dir.as_deref())?;
            Ok(SweepRow {
                key: key.to_string(),
                value: v.clone(),
                report: yield_report(&res.records),
                evals: res.evals().into_iter().cloned().collect(),
            })
        })
        .collect()
}
