//! Completion gateway and trajectory data pool.
//!
//! The gateway sits between agents and the policy: it serves completion
//! requests from a parameter snapshot and records, per agent, exactly what
//! was asked and answered. That log alone is enough to rebuild training
//! samples for agents whose internals are opaque.
//!
//! The data pool stores finished trajectories. Any number of producers may
//! [`DataPool::put`] concurrently; entries become visible to the single
//! consumer only after the scheduler releases them.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::env::{request_seed, AgentPolicy, CmPolicy, CompletionError, STOP_SET};
use crate::jsonl::{self, JsonlError};
use crate::policy::{sample_action, Completion, PolicyError, PolicyParams};
use crate::trajectory::{CompletionSample, Trajectory};
use crate::vocab::Token;

pub type AgentId = u64;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("context of length {len} reaches cap {cap}")]
    ContextCap { len: usize, cap: usize },
    #[error("agent {0} has no logged requests")]
    EmptyLog(AgentId),
    #[error("agent {agent_id} reused request id {request_id}")]
    DuplicateRequest { agent_id: AgentId, request_id: u64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// What an agent tells the gateway about itself. White-box agents also
/// register their context-management policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentRegistration {
    pub task_id: String,
    pub group_id: u64,
    pub group_index: usize,
    pub cm: Option<CmPolicy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    /// Per-agent sequence number chosen by the agent.
    pub request_id: u64,
    pub agent_id: AgentId,
    /// Exactly what the policy conditions on.
    pub context_tokens: Vec<Token>,
    pub max_tokens: usize,
    pub metadata: Option<CmPolicy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub request: CompletionRequest,
    pub response: Vec<Token>,
    pub logprobs: Vec<f64>,
}

/// One agent's registration and request log, ordered by request id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentLog {
    pub agent_id: AgentId,
    pub registration: Option<AgentRegistration>,
    pub entries: Vec<LogEntry>,
}

pub struct Gateway {
    pub global_seed: u64,
    agents: Mutex<BTreeMap<AgentId, AgentLog>>,
}

impl Gateway {
    pub fn new(global_seed: u64) -> Self {
        Self { global_seed, agents: Mutex::new(BTreeMap::new()) }
    }

    pub fn register(&self, agent_id: AgentId, registration: AgentRegistration) {
        let mut agents = self.agents.lock().unwrap();
        let log = agents.entry(agent_id).or_insert_with(|| AgentLog { agent_id, ..Default::default() });
        log.registration = Some(registration);
    }

    /// Serves one request. The sampling seed depends only on
    /// `(global_seed, agent_id, request_id)`, so responses do not depend on
    /// the order in which concurrent requests arrive.
    pub fn route(&self, request: CompletionRequest, params: &PolicyParams) -> Result<Completion, GatewayError> {
        let cap = params.config.context_cap;
        if request.context_tokens.len() >= cap {
            return Err(GatewayError::ContextCap { len: request.context_tokens.len(), cap });
        }
        let s = request_seed(self.global_seed, request.agent_id, request.request_id);
        let out = sample_action(params, &request.context_tokens, request.max_tokens, &STOP_SET, s)?;
        let mut agents = self.agents.lock().unwrap();
        let log = agents
            .entry(request.agent_id)
            .or_insert_with(|| AgentLog { agent_id: request.agent_id, ..Default::default() });
        let pos = log.entries.partition_point(|e| e.request.request_id < request.request_id);
        if log.entries.get(pos).is_some_and(|e| e.request.request_id == request.request_id) {
            return Err(GatewayError::DuplicateRequest { agent_id: request.agent_id, request_id: request.request_id });
        }
        log.entries.insert(pos, LogEntry { request, response: out.tokens.clone(), logprobs: out.logprobs.clone() });
        Ok(out)
    }

    pub fn log(&self, agent_id: AgentId) -> Option<AgentLog> {
        self.agents.lock().unwrap().get(&agent_id).cloned()
    }

    /// Removes and returns an agent's log.
    pub fn take_log(&self, agent_id: AgentId) -> Option<AgentLog> {
        self.agents.lock().unwrap().remove(&agent_id)
    }

    pub fn agent_ids(&self) -> Vec<AgentId> {
        self.agents.lock().unwrap().keys().copied().collect()
    }

    /// An [`AgentPolicy`] that issues sequential requests for one agent.
    pub fn client<'a>(
        &'a self,
        agent_id: AgentId,
        params: &'a PolicyParams,
        metadata: Option<CmPolicy>,
    ) -> GatewayClient<'a> {
        GatewayClient { gateway: self, params, agent_id, metadata, next_request: 0 }
    }
}

pub struct GatewayClient<'a> {
    gateway: &'a Gateway,
    params: &'a PolicyParams,
    agent_id: AgentId,
    metadata: Option<CmPolicy>,
    next_request: u64,
}

impl AgentPolicy for GatewayClient<'_> {
    fn complete(&mut self, context: &[Token], max_tokens: usize) -> Result<Completion, CompletionError> {
        let request = CompletionRequest {
            request_id: self.next_request,
            agent_id: self.agent_id,
            context_tokens: context.to_vec(),
            max_tokens,
            metadata: self.metadata,
        };
        self.next_request += 1;
        match self.gateway.route(request, self.params) {
            Ok(c) => Ok(c),
            Err(GatewayError::ContextCap { len, cap }) => Err(CompletionError::ContextCap { len, cap }),
            Err(GatewayError::Policy(e)) => Err(CompletionError::Policy(e)),
            Err(e) => Err(CompletionError::Rejected(e.to_string())),
        }
    }
}

/// One training sample per logged request: the state is the context the
/// agent sent and the action is the response it got.
pub fn reconstruct_blackbox(log: &AgentLog) -> Result<Vec<CompletionSample>, GatewayError> {
    if log.entries.is_empty() {
        return Err(GatewayError::EmptyLog(log.agent_id));
    }
    let (task_id, group_id, group_index) = match &log.registration {
        Some(r) => (r.task_id.clone(), r.group_id, r.group_index),
        None => (format!("agent-{}", log.agent_id), 0, 0),
    };
    Ok(log
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| CompletionSample {
            task_id: task_id.clone(),
            group_id,
            group_index,
            step_index: i,
            state_tokens: e.request.context_tokens.clone(),
            action_tokens: e.response.clone(),
            behavior_logprobs: e.logprobs.clone(),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    WhiteBox,
    BlackBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPoolEntry {
    #[serde(flatten)]
    pub trajectory: Trajectory,
    pub enqueue_virtual_time: f64,
    pub source: Source,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PoolError {
    #[error("the data pool already has a consumer")]
    ConsumerClaimed,
    #[error("unknown pool entry {0}")]
    UnknownEntry(usize),
}

pub type EntryId = usize;

struct Slot {
    entry: Arc<DataPoolEntry>,
    released: bool,
    consumed: bool,
}

#[derive(Default)]
struct PoolState {
    slots: Vec<Slot>,
    release_order: VecDeque<EntryId>,
}

/// In-memory trajectory store with at-most-once consumption.
#[derive(Default)]
pub struct DataPool {
    state: Mutex<PoolState>,
    claimed: AtomicBool,
}

impl DataPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores an entry; never waits on the consumer.
    pub fn put(&self, entry: DataPoolEntry) -> EntryId {
        let mut s = self.state.lock().unwrap();
        s.slots.push(Slot { entry: Arc::new(entry), released: false, consumed: false });
        s.slots.len() - 1
    }

    /// Makes entries visible to the consumer, in the given order.
    pub fn release(&self, ids: &[EntryId]) -> Result<(), PoolError> {
        let mut s = self.state.lock().unwrap();
        if let Some(&bad) = ids.iter().find(|&&id| id >= s.slots.len()) {
            return Err(PoolError::UnknownEntry(bad));
        }
        for &id in ids {
            if !s.slots[id].released {
                s.slots[id].released = true;
                s.release_order.push_back(id);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Claims the single consumer handle. A second claim while the first
    /// handle is alive is an error.
    pub fn consumer(&self) -> Result<PoolConsumer<'_>, PoolError> {
        if self.claimed.swap(true, Ordering::AcqRel) {
            return Err(PoolError::ConsumerClaimed);
        }
        Ok(PoolConsumer { pool: self })
    }

    /// Writes every stored entry as one JSON line, in insertion order.
    pub fn spill<W: Write>(&self, w: &mut W) -> Result<(), JsonlError> {
        let s = self.state.lock().unwrap();
        for slot in &s.slots {
            jsonl::write_line(w, slot.entry.as_ref())?;
        }
        Ok(())
    }
}

pub struct PoolConsumer<'a> {
    pool: &'a DataPool,
}

impl PoolConsumer<'_> {
    /// Up to `n` released, not yet consumed entries in release order.
    pub fn take(&mut self, n: usize) -> Vec<Arc<DataPoolEntry>> {
        let mut s = self.pool.state.lock().unwrap();
        let mut out = Vec::new();
        while out.len() < n {
            let Some(id) = s.release_order.pop_front() else { break };
            let slot = &mut s.slots[id];
            if !slot.consumed {
                slot.consumed = true;
                out.push(Arc::clone(&slot.entry));
            }
        }
        out
    }
}

impl Drop for PoolConsumer<'_> {
    fn drop(&mut self) {
        self.pool.claimed.store(false, Ordering::Release);
    }
}
