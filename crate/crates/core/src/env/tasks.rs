//! Task specifications, closed-form verifiers, and the builtin catalog.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tools::{calc, CalcTool, EchoTool, LatencyModel, RunTestsTool, SearchTool, Tool, ToolEnvironment};
use super::EnvError;
use crate::seed;
use crate::trajectory::Trajectory;
use crate::vocab::{
    as_value, diagnose, value, ActionSegment, SegmentKind, Token, ANSWER, CALL_CLOSE, CALL_OPEN, END, PASS, TOOL_CALC,
    TOOL_ECHO, TOOL_RUN_TESTS, TOOL_SEARCH, VALUE_COUNT,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    Reasoning,
    Coding,
    Agent,
    General,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Reasoning, Domain::Coding, Domain::Agent, Domain::General];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Lognormal location of tool latency for this tier.
    pub fn latency_mu(self) -> f64 {
        [0.0, 0.5, 1.0][self.index()]
    }

    pub fn name(self) -> &'static str {
        ["easy", "medium", "hard"][self.index()]
    }
}

/// Task family and its parameters. All values are in `[0, 48)` and map to
/// value tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum TaskKind {
    /// `x_{j+1} = calc(x_j, operands[j])`; answer `x_k`.
    CalcChain { start: u32, operands: Vec<u32> },
    /// Rules `lhs[i] -> given[i]`; some right-hand sides are wrong. The
    /// answer is the corrected list of right-hand sides.
    RuleRepair { lhs: Vec<u32>, given: Vec<u32>, expected: Vec<u32> },
    /// Follow `table` from `start` for `hops` lookups.
    MultiHop {
        start: u32,
        hops: usize,
        #[serde(with = "pairs")]
        table: BTreeMap<u32, u32>,
    },
    /// Independent lookups of every key; answer lists the values in order.
    FanOut {
        keys: Vec<u32>,
        #[serde(with = "pairs")]
        table: BTreeMap<u32, u32>,
    },
    /// Repeat the payload exactly, terminated by `END`, with no stray
    /// reserved tokens.
    Echo { payload: Vec<u32> },
}

/// Lookup tables serialize as `[[key, value], ...]`; integer map keys do
/// not survive serde's internally tagged enums.
mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<u32, u32>, s: S) -> Result<S::Ok, S::Error> {
        m.iter().map(|(&k, &v)| [k, v]).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u32, u32>, D::Error> {
        Ok(Vec::<[u32; 2]>::deserialize(d)?.into_iter().map(|[k, v]| (k, v)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub domain: Domain,
    pub difficulty: Difficulty,
    pub initial_prompt: Vec<Token>,
    pub kind: TaskKind,
    pub latency: LatencyModel,
    pub max_steps: usize,
    pub max_action_tokens: usize,
    pub context_cap: usize,
}

/// Verifier output: a binary verdict plus a performance score in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub success: bool,
    pub score: f64,
}

const W_ANSWERED: f64 = 0.2;
const W_PROGRESS: f64 = 0.3;
const W_QUALITY: f64 = 0.3;

fn circular_closeness(a: u32, b: u32) -> f64 {
    let d = a.abs_diff(b);
    let d = d.min(VALUE_COUNT - d);
    1.0 - d as f64 / (VALUE_COUNT / 2) as f64
}

/// Fraction of expected positions matched, halved on a length mismatch.
fn sequence_quality(payload: &[Option<u32>], expected: &[u32]) -> f64 {
    let hits = expected.iter().zip(payload).filter(|(e, p)| **p == Some(**e)).count();
    let q = hits as f64 / expected.len() as f64;
    if payload.len() == expected.len() {
        q
    } else {
        0.5 * q
    }
}

impl TaskKind {
    pub fn tools(&self) -> Vec<Box<dyn Tool>> {
        match self {
            TaskKind::CalcChain { .. } => vec![Box::new(CalcTool)],
            TaskKind::RuleRepair { expected, .. } => vec![Box::new(RunTestsTool { expected: expected.clone() })],
            TaskKind::MultiHop { table, .. } | TaskKind::FanOut { table, .. } => {
                vec![Box::new(SearchTool { table: table.clone() })]
            }
            TaskKind::Echo { .. } => vec![Box::new(EchoTool)],
        }
    }

    /// The correct answer payload.
    pub fn answer(&self) -> Vec<u32> {
        match self {
            TaskKind::CalcChain { start, operands } => vec![operands.iter().fold(*start, |x, &a| calc(x, a))],
            TaskKind::RuleRepair { expected, .. } => expected.clone(),
            TaskKind::MultiHop { start, hops, table } => {
                let mut k = *start;
                for _ in 0..*hops {
                    k = table[&k];
                }
                vec![k]
            }
            TaskKind::FanOut { keys, table } => keys.iter().map(|k| table[k]).collect(),
            TaskKind::Echo { payload } => payload.clone(),
        }
    }

    /// Progress in `[0, 1]` from the well-formed calls made, in order.
    fn progress(&self, calls: &[(Token, Vec<Option<u32>>)]) -> f64 {
        match self {
            TaskKind::CalcChain { start, operands } => {
                let mut x = *start;
                let mut p = 0;
                for (tool, args) in calls {
                    if p < operands.len() && *tool == TOOL_CALC && args[..] == [Some(x), Some(operands[p])] {
                        x = calc(x, operands[p]);
                        p += 1;
                    }
                }
                p as f64 / operands.len() as f64
            }
            TaskKind::RuleRepair { expected, .. } => calls
                .iter()
                .filter(|(t, args)| *t == TOOL_RUN_TESTS && args.len() == expected.len())
                .map(|(_, args)| args.iter().zip(expected).take_while(|(a, e)| **a == Some(**e)).count())
                .max()
                .map_or(0.0, |n| n as f64 / expected.len() as f64),
            TaskKind::MultiHop { start, hops, table } => {
                let mut k = *start;
                let mut p = 0;
                for (tool, args) in calls {
                    if p < *hops && *tool == TOOL_SEARCH && args[..] == [Some(k)] {
                        k = table[&k];
                        p += 1;
                    }
                }
                p as f64 / *hops as f64
            }
            TaskKind::FanOut { keys, .. } => {
                let found = keys
                    .iter()
                    .filter(|k| calls.iter().any(|(t, a)| *t == TOOL_SEARCH && a[..] == [Some(**k)]))
                    .count();
                found as f64 / keys.len() as f64
            }
            TaskKind::Echo { payload } => {
                let want: Vec<Option<u32>> = payload.iter().map(|&v| Some(v)).collect();
                calls.iter().any(|(t, a)| *t == TOOL_ECHO && *a == want) as u8 as f64
            }
        }
    }

    fn quality(&self, payload: &[Option<u32>]) -> f64 {
        let expected = self.answer();
        match self {
            TaskKind::CalcChain { .. } => match payload.first() {
                Some(Some(v)) => {
                    let c = circular_closeness(*v, expected[0]);
                    if payload.len() == 1 {
                        c
                    } else {
                        0.5 * c
                    }
                }
                _ => 0.0,
            },
            _ => sequence_quality(payload, &expected),
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidTask { task_id: self.task_id.clone(), reason: m.to_string() });
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if self.max_action_tokens == 0 {
            return bad("max_action_tokens must be at least 1");
        }
        if !self.latency.is_valid() {
            return bad("latency parameters must be finite with sigma >= 0");
        }
        if self.context_cap <= self.initial_prompt.len() + 1 {
            return bad("context cap leaves no room for generation");
        }
        let in_range = |v: &u32| *v < VALUE_COUNT;
        let ok = match &self.kind {
            TaskKind::CalcChain { start, operands } => {
                in_range(start) && !operands.is_empty() && operands.iter().all(in_range)
            }
            TaskKind::RuleRepair { lhs, given, expected } => {
                !expected.is_empty()
                    && lhs.len() == expected.len()
                    && given.len() == expected.len()
                    && lhs.iter().chain(given).chain(expected).all(in_range)
            }
            TaskKind::MultiHop { start, hops, table } => {
                let mut k = *start;
                let mut ok = *hops >= 1 && table.iter().all(|(a, b)| in_range(a) && in_range(b));
                for _ in 0..*hops {
                    match table.get(&k) {
                        Some(&n) if ok => k = n,
                        _ => ok = false,
                    }
                }
                ok
            }
            TaskKind::FanOut { keys, table } => {
                !keys.is_empty() && keys.iter().all(|k| table.contains_key(k)) && table.values().all(in_range)
            }
            TaskKind::Echo { payload } => !payload.is_empty() && payload.iter().all(in_range),
        };
        if !ok {
            return bad("family parameters out of range or inconsistent");
        }
        Ok(())
    }

    pub fn environment(&self) -> ToolEnvironment {
        ToolEnvironment::new(self.kind.tools(), self.latency)
    }

    /// Deterministic closed-form verdict on a trajectory's actions.
    pub fn verify(&self, traj: &Trajectory) -> Verdict {
        let mut calls = Vec::new();
        let mut answer: Option<(&ActionSegment, usize)> = None;
        for (si, step) in traj.steps.iter().enumerate() {
            for seg in &step.action {
                if let Some(c) = seg.parse_call() {
                    calls.push((c.tool, c.args.iter().map(|&t| as_value(t)).collect::<Vec<_>>()));
                }
                if seg.kind == SegmentKind::FinalAnswer {
                    answer = Some((seg, si));
                }
            }
        }
        let progress = self.kind.progress(&calls);
        let Some((seg, si)) = answer else {
            return Verdict { success: false, score: W_PROGRESS * progress };
        };
        let payload: Vec<Option<u32>> = seg.answer_payload().unwrap_or(&[]).iter().map(|&t| as_value(t)).collect();
        let expected: Vec<Option<u32>> = self.kind.answer().into_iter().map(Some).collect();
        let mut success = payload == expected;
        if let TaskKind::Echo { .. } = self.kind {
            let clean = diagnose(&traj.steps[si].action).misused_reserved == 0;
            success &= clean && seg.tokens.last() == Some(&END);
        }
        if success {
            return Verdict { success, score: 1.0 };
        }
        let score = W_ANSWERED + W_PROGRESS * progress + W_QUALITY * self.kind.quality(&payload);
        Verdict { success, score }
    }
}

fn call(tool: Token, args: &[u32]) -> Vec<Token> {
    let mut t = vec![CALL_OPEN, tool];
    t.extend(args.iter().map(|&v| value(v)));
    t.extend([CALL_CLOSE, END]);
    t
}

fn answer_action(payload: &[u32]) -> Vec<Token> {
    let mut t = vec![ANSWER];
    t.extend(payload.iter().map(|&v| value(v)));
    t.push(END);
    t
}

/// A hand-solved action sequence that succeeds on `task`.
pub fn oracle_actions(task: &TaskSpec) -> Vec<Vec<Token>> {
    let answer = task.kind.answer();
    let mut out = Vec::new();
    match &task.kind {
        TaskKind::CalcChain { start, operands } => {
            let mut x = *start;
            for &a in operands {
                out.push(call(TOOL_CALC, &[x, a]));
                x = calc(x, a);
            }
        }
        TaskKind::RuleRepair { given, expected, .. } => {
            let tool = RunTestsTool { expected: expected.clone() };
            let mut current = given.clone();
            loop {
                out.push(call(TOOL_RUN_TESTS, &current));
                let obs = tool.execute(&current.iter().map(|&v| value(v)).collect::<Vec<_>>());
                if obs == [PASS] {
                    break;
                }
                let i = as_value(obs[1]).unwrap() as usize;
                current[i] = as_value(obs[2]).unwrap();
            }
        }
        TaskKind::MultiHop { start, hops, table } => {
            let mut k = *start;
            for _ in 0..*hops {
                out.push(call(TOOL_SEARCH, &[k]));
                k = table[&k];
            }
        }
        TaskKind::FanOut { keys, .. } => {
            out.push(keys.iter().flat_map(|&k| call(TOOL_SEARCH, &[k])).filter(|&t| t != END).chain([END]).collect());
        }
        TaskKind::Echo { payload } => out.push(call(TOOL_ECHO, payload)),
    }
    out.push(answer_action(&answer));
    out
}

/// Number of builtin tasks per (family, tier).
pub const TASKS_PER_CELL: usize = 4;

const MODEL_CONTEXT: usize = 128;

fn distinct_values<R: Rng>(rng: &mut R, n: usize) -> Vec<u32> {
    let mut all: Vec<u32> = (0..VALUE_COUNT).collect();
    all.shuffle(rng);
    all.truncate(n);
    all
}

fn finish(task_id: String, domain: Domain, difficulty: Difficulty, prompt: Vec<u32>, kind: TaskKind) -> TaskSpec {
    let mut spec = TaskSpec {
        task_id,
        domain,
        difficulty,
        initial_prompt: prompt.iter().map(|&v| value(v)).collect(),
        kind,
        latency: LatencyModel { mu: difficulty.latency_mu(), sigma: 1.0 },
        max_steps: 1,
        max_action_tokens: 1,
        context_cap: MODEL_CONTEXT,
    };
    let oracle = oracle_actions(&spec);
    spec.max_steps = oracle.len() + 2;
    spec.max_action_tokens = oracle.iter().map(Vec::len).max().unwrap_or(1) + 2;
    spec
}

/// The builtin catalog: five families over four domains, three tiers each,
/// [`TASKS_PER_CELL`] tasks per tier. Task ids are `family-tier-n`.
pub fn builtin_tasks(seed_value: u64) -> Vec<TaskSpec> {
    let mut out = Vec::new();
    for tier in Difficulty::ALL {
        let t = tier.index();
        for n in 0..TASKS_PER_CELL {
            let mut rng = seed::rng(seed::derive(&[seed_value, t as u64, n as u64]));
            let id = |family: &str| format!("{family}-{}-{n}", tier.name());

            let k = [1, 2, 4][t];
            let start = rng.random_range(0..VALUE_COUNT);
            let operands: Vec<u32> = (0..k).map(|_| rng.random_range(0..VALUE_COUNT)).collect();
            let mut prompt = vec![start];
            prompt.extend(&operands);
            out.push(finish(id("calc"), Domain::Reasoning, tier, prompt, TaskKind::CalcChain { start, operands }));

            let bugs = t + 1;
            let lhs = distinct_values(&mut rng, 3);
            let expected: Vec<u32> = (0..3).map(|_| rng.random_range(0..VALUE_COUNT)).collect();
            let mut given = expected.clone();
            let mut idx = [0, 1, 2];
            idx.shuffle(&mut rng);
            for &i in &idx[..bugs] {
                given[i] = (expected[i] + rng.random_range(1..VALUE_COUNT)) % VALUE_COUNT;
            }
            let prompt = lhs.iter().zip(&given).flat_map(|(&l, &r)| [l, r]).collect();
            out.push(finish(id("repair"), Domain::Coding, tier, prompt, TaskKind::RuleRepair { lhs, given, expected }));

            let hops = t + 1;
            let keys = distinct_values(&mut rng, hops + 1 + 6);
            let mut table = BTreeMap::new();
            for w in keys[..=hops].windows(2) {
                table.insert(w[0], w[1]);
            }
            for &d in &keys[hops + 1..] {
                table.insert(d, rng.random_range(0..VALUE_COUNT));
            }
            let start = keys[0];
            out.push(finish(
                id("hop"),
                Domain::Agent,
                tier,
                vec![start, hops as u32],
                TaskKind::MultiHop { start, hops, table },
            ));

            let width = t + 2;
            let keys = distinct_values(&mut rng, width + 4);
            let table: BTreeMap<u32, u32> = keys.iter().map(|&k| (k, rng.random_range(0..VALUE_COUNT))).collect();
            let asked = keys[..width].to_vec();
            out.push(finish(id("fanout"), Domain::Agent, tier, asked.clone(), TaskKind::FanOut { keys: asked, table }));

            let payload: Vec<u32> = (0..t + 1).map(|_| rng.random_range(0..VALUE_COUNT)).collect();
            out.push(finish(id("echo"), Domain::General, tier, payload.clone(), TaskKind::Echo { payload }));
        }
    }
    out
}

/// A task catalog as loaded from a JSON file `{"tasks": [...]}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub tasks: Vec<TaskSpec>,
}

impl Catalog {
    pub fn builtin(seed_value: u64) -> Self {
        Self { tasks: builtin_tasks(seed_value) }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !seen.insert(&t.task_id) {
                return Err(EnvError::InvalidTask { task_id: t.task_id.clone(), reason: "duplicate task id".into() });
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path)?;
        let c: Catalog = serde_json::from_str(&text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn get(&self, task_id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    /// Tasks in one (domain, tier) cell, in catalog order.
    pub fn cell(&self, domain: Domain, tier: Difficulty) -> Vec<&TaskSpec> {
        self.tasks.iter().filter(|t| t.domain == domain && t.difficulty == tier).collect()
    }

    /// Keeps only the listed task ids.
    pub fn restrict(&self, ids: &[String]) -> Result<Self, EnvError> {
        let tasks = ids
            .iter()
            .map(|id| self.get(id).cloned().ok_or_else(|| EnvError::UnknownTask(id.clone())))
            .collect::<Result<_, _>>()?;
        Ok(Self { tasks })
    }
}
