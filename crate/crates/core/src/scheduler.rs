//! Windowed-FIFO release of finished rollout groups and the mixed-domain
//! task sampler that feeds the generation queue.
//!
//! Entries are submitted in order `0..N`. Only completed entries inside the
//! window `[head, head + W - 1]` may be fetched, and the head advances only
//! past a contiguous run of fetched entries. `W = 1` is strict FIFO; `W = N`
//! releases anything as soon as it completes.

use std::sync::Mutex;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Catalog, Difficulty, Domain, TaskSpec};
use crate::seed;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SchedulerError {
    #[error("window {window} outside [1, {len}]")]
    Window { window: usize, len: usize },
    #[error("queue index {0} out of range")]
    Index(usize),
    #[error("entry {index} is {status:?}, cannot move to {to:?}")]
    Transition { index: usize, status: EntryStatus, to: EntryStatus },
    #[error("orders differ: {0}")]
    OrderMismatch(String),
    #[error("invalid mix: {0}")]
    Mix(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryStatus {
    Pending,
    Running,
    Completed,
    Fetched,
}

#[derive(Clone, Debug, PartialEq)]
struct QueueEntry {
    status: EntryStatus,
    submit_step: u64,
    complete_vtime: f64,
}

/// One released entry, as written to the fetch-event stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FetchEvent {
    pub index: usize,
    pub submit_step: u64,
    pub complete_vtime: f64,
    pub fetch_vtime: f64,
    pub window_head: usize,
}

/// Window size for a fraction of the queue length, rounded up and at least 1.
pub fn window_for(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(1, n.max(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationQueue {
    entries: Vec<QueueEntry>,
    head: usize,
    window: usize,
}

impl GenerationQueue {
    /// A queue of `submit_steps.len()` pending entries.
    pub fn new(submit_steps: &[u64], window: usize) -> Result<Self, SchedulerError> {
        let len = submit_steps.len();
        if window == 0 || window > len {
            return Err(SchedulerError::Window { window, len });
        }
        let entries = submit_steps
            .iter()
            .map(|&submit_step| QueueEntry { status: EntryStatus::Pending, submit_step, complete_vtime: f64::NAN })
            .collect();
        Ok(Self { entries, head: 0, window })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn status(&self, index: usize) -> Option<EntryStatus> {
        self.entries.get(index).map(|e| e.status)
    }

    pub fn is_drained(&self) -> bool {
        self.head == self.entries.len()
    }

    fn entry_mut(&mut self, index: usize) -> Result<&mut QueueEntry, SchedulerError> {
        self.entries.get_mut(index).ok_or(SchedulerError::Index(index))
    }

    pub fn mark_running(&mut self, index: usize) -> Result<(), SchedulerError> {
        let e = self.entry_mut(index)?;
        if e.status != EntryStatus::Pending {
            return Err(SchedulerError::Transition { index, status: e.status, to: EntryStatus::Running });
        }
        e.status = EntryStatus::Running;
        Ok(())
    }

    /// Pending or Running to Completed at virtual time `vtime`.
    pub fn mark_completed(&mut self, index: usize, vtime: f64) -> Result<(), SchedulerError> {
        let e = self.entry_mut(index)?;
        if !matches!(e.status, EntryStatus::Pending | EntryStatus::Running) {
            return Err(SchedulerError::Transition { index, status: e.status, to: EntryStatus::Completed });
        }
        e.status = EntryStatus::Completed;
        e.complete_vtime = vtime;
        Ok(())
    }

    /// Completed entries inside the current window, earliest completion
    /// first (ties by index). Does not modify the queue.
    pub fn fetchable(&self) -> Vec<usize> {
        let end = (self.head + self.window).min(self.entries.len());
        let mut out: Vec<usize> =
            (self.head..end).filter(|&j| self.entries[j].status == EntryStatus::Completed).collect();
        out.sort_by(|&a, &b| self.entries[a].complete_vtime.total_cmp(&self.entries[b].complete_vtime).then(a.cmp(&b)));
        out
    }

    /// Fetches every currently fetchable entry and advances the head past
    /// the leading fetched run.
    pub fn fetch_ready(&mut self, fetch_vtime: f64) -> Vec<FetchEvent> {
        let window_head = self.head;
        let ready = self.fetchable();
        let mut events = Vec::with_capacity(ready.len());
        for j in ready {
            assert!(
                j >= window_head && j < window_head + self.window,
                "entry {j} fetched outside window [{window_head}, {})",
                window_head + self.window
            );
            let e = &mut self.entries[j];
            e.status = EntryStatus::Fetched;
            events.push(FetchEvent {
                index: j,
                submit_step: e.submit_step,
                complete_vtime: e.complete_vtime,
                fetch_vtime,
                window_head,
            });
        }
        while self.head < self.entries.len() && self.entries[self.head].status == EntryStatus::Fetched {
            self.head += 1;
        }
        events
    }
}

/// A queue shared between rollout workers (completions) and the trainer
/// (fetches). Every transition is serialized through one lock, so window
/// advance is atomic with respect to completions.
#[derive(Debug)]
pub struct SharedQueue(Mutex<GenerationQueue>);

impl SharedQueue {
    pub fn new(queue: GenerationQueue) -> Self {
        Self(Mutex::new(queue))
    }

    pub fn mark_running(&self, index: usize) -> Result<(), SchedulerError> {
        self.0.lock().unwrap().mark_running(index)
    }

    pub fn mark_completed(&self, index: usize, vtime: f64) -> Result<(), SchedulerError> {
        self.0.lock().unwrap().mark_completed(index, vtime)
    }

    pub fn fetch_ready(&self, fetch_vtime: f64) -> Vec<FetchEvent> {
        self.0.lock().unwrap().fetch_ready(fetch_vtime)
    }

    pub fn into_inner(self) -> GenerationQueue {
        self.0.into_inner().unwrap()
    }
}

/// Result of replaying a trainer against a fixed set of completion times.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerTimeline {
    pub events: Vec<FetchEvent>,
    /// Entry indices in the order the trainer received them.
    pub fetch_order: Vec<usize>,
    /// Virtual time the trainer spent waiting with nothing fetchable.
    pub idle_time: f64,
    pub busy_time: f64,
    pub end_time: f64,
}

impl TrainerTimeline {
    pub fn idle_fraction(&self, start: f64) -> f64 {
        let span = self.end_time - start;
        if span > 0.0 {
            self.idle_time / span
        } else {
            0.0
        }
    }
}

/// Discrete-event replay of one trainer consuming a queue. At each decision
/// point the trainer marks everything completed by now, fetches, and spends
/// `cost_per_entry` per fetched entry; with nothing fetchable it idles until
/// the next completion.
pub fn simulate_trainer(
    completion_times: &[f64],
    submit_steps: &[u64],
    window: usize,
    cost_per_entry: f64,
    start: f64,
) -> Result<TrainerTimeline, SchedulerError> {
    assert_eq!(completion_times.len(), submit_steps.len());
    let mut q = GenerationQueue::new(submit_steps, window)?;
    let mut by_time: Vec<usize> = (0..completion_times.len()).collect();
    by_time.sort_by(|&a, &b| completion_times[a].total_cmp(&completion_times[b]).then(a.cmp(&b)));
    let mut next = 0usize;
    let mut t = start;
    let mut tl = TrainerTimeline {
        events: Vec::new(),
        fetch_order: Vec::new(),
        idle_time: 0.0,
        busy_time: 0.0,
        end_time: start,
    };
    while !q.is_drained() {
        while next < by_time.len() && completion_times[by_time[next]] <= t {
            q.mark_completed(by_time[next], completion_times[by_time[next]])?;
            next += 1;
        }
        let batch = q.fetch_ready(t);
        if batch.is_empty() {
            let wake = completion_times[by_time[next]];
            tl.idle_time += wake - t;
            t = wake;
            continue;
        }
        let cost = cost_per_entry * batch.len() as f64;
        tl.busy_time += cost;
        t += cost;
        tl.fetch_order.extend(batch.iter().map(|e| e.index));
        tl.events.extend(batch);
    }
    tl.end_time = t;
    Ok(tl)
}

/// Normalized mean absolute displacement between two orderings of the same
/// items: `Σ|pos_fetch(x) − pos_submit(x)| / floor(N²/2)`, where the
/// denominator is the largest value the sum can take. 0 for identical
/// orders, 1 for a reversal.
pub fn displacement_metric(fetch_order: &[usize], submission_order: &[usize]) -> Result<f64, SchedulerError> {
    let n = fetch_order.len();
    if n != submission_order.len() {
        return Err(SchedulerError::OrderMismatch(format!("lengths {} and {}", n, submission_order.len())));
    }
    let mut submit_pos = std::collections::HashMap::with_capacity(n);
    for (p, &x) in submission_order.iter().enumerate() {
        if submit_pos.insert(x, p).is_some() {
            return Err(SchedulerError::OrderMismatch(format!("{x} repeated in submission order")));
        }
    }
    let mut seen = std::collections::HashSet::with_capacity(n);
    let mut total = 0usize;
    for (p, &x) in fetch_order.iter().enumerate() {
        let &s = submit_pos.get(&x).ok_or_else(|| SchedulerError::OrderMismatch(format!("{x} never submitted")))?;
        if !seen.insert(x) {
            return Err(SchedulerError::OrderMismatch(format!("{x} repeated in fetch order")));
        }
        total += p.abs_diff(s);
    }
    let max = n * n / 2;
    Ok(if max == 0 { 0.0 } else { total as f64 / max as f64 })
}

/// Per-domain sampling weights, difficulty distributions and context caps.
/// Arrays are indexed by [`Domain::index`] and [`Difficulty::index`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    pub ratios: [f64; 4],
    pub difficulty: [[f64; 3]; 4],
    pub context_cap: [usize; 4],
}

impl Default for MixConfig {
    fn default() -> Self {
        Self { ratios: [0.25; 4], difficulty: [[1.0 / 3.0; 3]; 4], context_cap: [128; 4] }
    }
}

impl MixConfig {
    /// Everything from one domain and tier.
    pub fn single(domain: Domain, tier: Difficulty) -> Self {
        let mut m = Self { ratios: [0.0; 4], difficulty: [[0.0; 3]; 4], ..Self::default() };
        m.ratios[domain.index()] = 1.0;
        m.difficulty[domain.index()][tier.index()] = 1.0;
        m
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        let ok = |w: &[f64]| w.iter().all(|&x| x.is_finite() && x >= 0.0);
        let sum: f64 = self.ratios.iter().sum();
        if !ok(&self.ratios) || (sum - 1.0).abs() > 1e-9 {
            return Err(SchedulerError::Mix(format!("ratios {:?} must be nonnegative and sum to 1", self.ratios)));
        }
        for d in Domain::ALL {
            let row = &self.difficulty[d.index()];
            if !ok(row) || (self.ratios[d.index()] > 0.0 && row.iter().sum::<f64>() <= 0.0) {
                return Err(SchedulerError::Mix(format!("{d:?} difficulty weights {row:?}")));
            }
            if self.context_cap[d.index()] == 0 {
                return Err(SchedulerError::Mix(format!("{d:?} context cap is 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub from_step: u64,
    pub mix: MixConfig,
}

/// A base mix plus later stages, each active from its `from_step` onward.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixSchedule {
    pub base: MixConfig,
    #[serde(default)]
    pub stages: Vec<Stage>,
}

impl MixSchedule {
    pub fn constant(mix: MixConfig) -> Self {
        Self { base: mix, stages: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        self.base.validate()?;
        for w in self.stages.windows(2) {
            if w[1].from_step <= w[0].from_step {
                return Err(SchedulerError::Mix("stage thresholds must increase".into()));
            }
        }
        self.stages.iter().try_for_each(|s| s.mix.validate())
    }

    pub fn active(&self, step: u64) -> &MixConfig {
        self.stages.iter().rev().find(|s| s.from_step <= step).map_or(&self.base, |s| &s.mix)
    }
}

/// Draws `count` tasks i.i.d. from the mix active at `step`. Each drawn
/// task carries its domain's context cap.
pub fn sample_tasks(
    schedule: &MixSchedule,
    catalog: &Catalog,
    count: usize,
    step: u64,
    seed_value: u64,
) -> Result<Vec<TaskSpec>, SchedulerError> {
    schedule.validate()?;
    let mix = schedule.active(step);
    let cells: Vec<Vec<&TaskSpec>> =
        Domain::ALL.iter().flat_map(|&d| Difficulty::ALL.iter().map(move |&t| catalog.cell(d, t))).collect();
    for d in Domain::ALL {
        for t in Difficulty::ALL {
            let weight = mix.ratios[d.index()] * mix.difficulty[d.index()][t.index()];
            if weight > 0.0 && cells[d.index() * 3 + t.index()].is_empty() {
                return Err(SchedulerError::Mix(format!("no {d:?}/{} tasks in catalog", t.name())));
            }
        }
    }
    let domains = WeightedIndex::new(mix.ratios).map_err(|e| SchedulerError::Mix(e.to_string()))?;
    let tiers: Vec<Option<WeightedIndex<f64>>> = mix.difficulty.iter().map(|w| WeightedIndex::new(w).ok()).collect();
    let mut rng = seed::rng(seed_value);
    (0..count)
        .map(|_| {
            let d = domains.sample(&mut rng);
            let tier =
                tiers[d].as_ref().ok_or_else(|| SchedulerError::Mix(format!("domain {d} has no tier weights")))?;
            let cell = &cells[d * 3 + tier.sample(&mut rng)];
            let mut task = cell[rng.random_range(0..cell.len())].clone();
            task.context_cap = mix.context_cap[d];
            Ok(task)
        })
        .collect()
}
