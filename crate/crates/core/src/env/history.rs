//! Conversation history and context-management transitions.
//!
//! The history is kept as role-tagged segments so that window and summary
//! transforms can respect segment boundaries even when the policy emits
//! delimiter tokens inside its own output. [`History::tokens`] renders the
//! state the policy conditions on.

use serde::{Deserialize, Serialize};

use crate::vocab::{ActionSegment, SegmentKind, Token, ASSISTANT, SUMMARY, TOOL, USER};

/// Length of the summary marker that replaces elided steps.
pub const SUMMARY_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Prompt,
    Assistant,
    Tool,
    Summary,
}

impl Role {
    pub fn delimiter(self) -> Token {
        match self {
            Role::Prompt => USER,
            Role::Assistant => ASSISTANT,
            Role::Tool => TOOL,
            Role::Summary => SUMMARY,
        }
    }
}

/// One rendered segment. `tokens` starts with the role delimiter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistorySegment {
    pub role: Role,
    /// Agent step that produced the segment; `None` for prompt and summary.
    pub step: Option<usize>,
    pub tokens: Vec<Token>,
}

impl HistorySegment {
    pub fn new(role: Role, step: Option<usize>, body: &[Token]) -> Self {
        let mut tokens = Vec::with_capacity(body.len() + 1);
        tokens.push(role.delimiter());
        tokens.extend_from_slice(body);
        Self { role, step, tokens }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct History {
    pub segments: Vec<HistorySegment>,
    /// Number of steps appended so far, including elided ones.
    pub steps: usize,
}

impl History {
    pub fn from_prompt(prompt: &[Token]) -> Self {
        Self { segments: vec![HistorySegment::new(Role::Prompt, None, prompt)], steps: 0 }
    }

    pub fn from_segments(segments: Vec<HistorySegment>) -> Self {
        let steps = segments.iter().filter_map(|s| s.step).max().map_or(0, |s| s + 1);
        Self { segments, steps }
    }

    pub fn tokens(&self) -> Vec<Token> {
        self.segments.iter().flat_map(|s| s.tokens.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Token offsets where each segment after the first begins.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut pos = 0;
        for s in &self.segments {
            if pos > 0 {
                out.push(pos);
            }
            pos += s.tokens.len();
        }
        out
    }
}

/// Context-management policy applied at every transition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum CmPolicy {
    /// Append everything, reasoning included.
    #[default]
    PersistAll,
    /// Strip reasoning segments from the action before appending it.
    DropReasoning,
    /// Keep the longest suffix of whole segments fitting in the window.
    SlidingWindow { window_tokens: usize },
    /// Keep the prompt and the last `k` steps; older steps collapse into a
    /// fixed summary marker.
    SummarizeStub { keep_last_k_steps: usize },
}

/// `H ⊕ [assistant(action)] ⊕ [tool(observation)]` followed by the policy's
/// rewrite.
pub fn transition(cm: &CmPolicy, h: &History, action: &[ActionSegment], observation: &[Token]) -> History {
    let step = h.steps;
    let body: Vec<Token> = action
        .iter()
        .filter(|s| !(matches!(cm, CmPolicy::DropReasoning) && s.kind == SegmentKind::Reasoning))
        .flat_map(|s| s.tokens.iter().copied())
        .collect();
    let mut next = h.clone();
    next.segments.push(HistorySegment::new(Role::Assistant, Some(step), &body));
    next.segments.push(HistorySegment::new(Role::Tool, Some(step), observation));
    next.steps = step + 1;
    match *cm {
        CmPolicy::PersistAll | CmPolicy::DropReasoning => next,
        CmPolicy::SlidingWindow { window_tokens } => sliding_window(next, window_tokens),
        CmPolicy::SummarizeStub { keep_last_k_steps } => summarize(next, keep_last_k_steps),
    }
}

/// Drops whole segments from the front until the rest fits. If the newest
/// segment alone is longer than the window, its trailing tokens are kept.
pub fn sliding_window(mut h: History, window: usize) -> History {
    let mut total = h.len();
    let mut drop = 0;
    while total > window && drop + 1 < h.segments.len() {
        total -= h.segments[drop].tokens.len();
        drop += 1;
    }
    h.segments.drain(..drop);
    if total > window {
        let last = &mut h.segments[0];
        let cut = last.tokens.len() - window;
        last.tokens.drain(..cut);
    }
    h
}

fn summarize(h: History, k: usize) -> History {
    let first_kept = h.steps.saturating_sub(k);
    let mut out = Vec::with_capacity(h.segments.len());
    let mut elided = false;
    for s in &h.segments {
        match (s.role, s.step) {
            (Role::Prompt, _) => out.push(s.clone()),
            (Role::Summary, _) => elided = true,
            (_, Some(step)) if step < first_kept => elided = true,
            _ => {}
        }
    }
    if elided {
        out.push(HistorySegment { role: Role::Summary, step: None, tokens: vec![SUMMARY; SUMMARY_LEN] });
    }
    out.extend(h.segments.iter().filter(|s| matches!(s.step, Some(step) if step >= first_kept)).cloned());
    History { segments: out, steps: h.steps }
}
