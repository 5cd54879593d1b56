//! Token alphabet and the action grammar.
//!
//! Tasks are defined directly over the integer alphabet. Ids below
//! [`FIRST_VALUE`] are reserved control tokens; everything from
//! [`FIRST_VALUE`] up is a plain "value" token usable as content.
//!
//! A tool call is `CALL_OPEN tool_id arg* CALL_CLOSE`; a final answer is
//! `ANSWER payload*`. `END` stops generation and is attached to whichever
//! segment precedes it.

use serde::{Deserialize, Serialize};

/// One symbol of the policy alphabet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    #[inline]
    pub fn id(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for Token {
    fn from(v: u32) -> Self {
        Token(v)
    }
}

/// Converts a slice of raw ids into tokens.
pub fn tokens(ids: &[u32]) -> Vec<Token> {
    ids.iter().copied().map(Token).collect()
}

pub const BOS: Token = Token(0);
pub const USER: Token = Token(1);
pub const ASSISTANT: Token = Token(2);
pub const TOOL: Token = Token(3);
pub const CALL_OPEN: Token = Token(4);
pub const CALL_CLOSE: Token = Token(5);
pub const ANSWER: Token = Token(6);
pub const END: Token = Token(7);
pub const SUMMARY: Token = Token(8);
pub const ERROR: Token = Token(9);
pub const TOOL_CALC: Token = Token(10);
pub const TOOL_RUN_TESTS: Token = Token(11);
pub const TOOL_SEARCH: Token = Token(12);
pub const TOOL_ECHO: Token = Token(13);
pub const PASS: Token = Token(14);
pub const FAIL: Token = Token(15);

/// First non-reserved id.
pub const FIRST_VALUE: u32 = 16;
/// Smallest vocabulary that holds the reserved block plus the value range
/// used by the builtin tasks.
pub const MIN_VOCAB: usize = 64;
/// Number of value tokens available under [`MIN_VOCAB`].
pub const VALUE_COUNT: u32 = MIN_VOCAB as u32 - FIRST_VALUE;

/// Value `v` (taken modulo [`VALUE_COUNT`]) as a token.
#[inline]
pub fn value(v: u32) -> Token {
    Token(FIRST_VALUE + v % VALUE_COUNT)
}

/// Inverse of [`value`]; `None` for reserved tokens.
#[inline]
pub fn as_value(t: Token) -> Option<u32> {
    (t.0 >= FIRST_VALUE).then(|| t.0 - FIRST_VALUE)
}

#[inline]
pub fn is_reserved(t: Token) -> bool {
    t.0 < FIRST_VALUE
}

#[inline]
pub fn is_tool_id(t: Token) -> bool {
    (TOOL_CALC.0..=TOOL_ECHO.0).contains(&t.0)
}

/// Kind of an action segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    Reasoning,
    ToolCall,
    FinalAnswer,
}

/// A contiguous piece of one completion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSegment {
    pub kind: SegmentKind,
    pub tokens: Vec<Token>,
}

/// A parsed tool invocation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToolCall {
    pub tool: Token,
    pub args: Vec<Token>,
}

impl ActionSegment {
    pub fn new(kind: SegmentKind, tokens: Vec<Token>) -> Option<Self> {
        (!tokens.is_empty()).then_some(Self { kind, tokens })
    }

    pub fn reasoning(ids: &[u32]) -> Self {
        Self { kind: SegmentKind::Reasoning, tokens: tokens(ids) }
    }

    pub fn tool_call(ids: &[u32]) -> Self {
        Self { kind: SegmentKind::ToolCall, tokens: tokens(ids) }
    }

    pub fn final_answer(ids: &[u32]) -> Self {
        Self { kind: SegmentKind::FinalAnswer, tokens: tokens(ids) }
    }

    /// Parses a `ToolCall` segment. `None` means malformed (or not a call).
    pub fn parse_call(&self) -> Option<ToolCall> {
        if self.kind != SegmentKind::ToolCall {
            return None;
        }
        let body = strip_end(&self.tokens);
        if body.len() < 3 || body[0] != CALL_OPEN || body[body.len() - 1] != CALL_CLOSE {
            return None;
        }
        let tool = body[1];
        let args = &body[2..body.len() - 1];
        if !is_tool_id(tool) || args.iter().any(|&t| is_reserved(t)) {
            return None;
        }
        Some(ToolCall { tool, args: args.to_vec() })
    }

    pub fn is_malformed_call(&self) -> bool {
        self.kind == SegmentKind::ToolCall && self.parse_call().is_none()
    }

    /// Payload of a `FinalAnswer` segment: the tokens after `ANSWER`,
    /// without a trailing `END`.
    pub fn answer_payload(&self) -> Option<&[Token]> {
        if self.kind != SegmentKind::FinalAnswer {
            return None;
        }
        let body = strip_end(&self.tokens);
        body.split_first().map(|(_, rest)| rest)
    }
}

fn strip_end(t: &[Token]) -> &[Token] {
    match t.last() {
        Some(&END) => &t[..t.len() - 1],
        _ => t,
    }
}

/// Splits raw completion tokens into segments. Lossless: the concatenation
/// of the returned segments is exactly `raw`.
pub fn parse_action(raw: &[Token]) -> Vec<ActionSegment> {
    let mut segs: Vec<ActionSegment> = Vec::new();
    let mut reasoning: Vec<Token> = Vec::new();
    let flush = |buf: &mut Vec<Token>, segs: &mut Vec<ActionSegment>| {
        if !buf.is_empty() {
            segs.push(ActionSegment { kind: SegmentKind::Reasoning, tokens: std::mem::take(buf) });
        }
    };
    let mut i = 0;
    while i < raw.len() {
        let t = raw[i];
        match t {
            CALL_OPEN => {
                flush(&mut reasoning, &mut segs);
                let mut call = vec![t];
                i += 1;
                while i < raw.len() {
                    let u = raw[i];
                    if matches!(u, CALL_OPEN | ANSWER | END) {
                        break;
                    }
                    call.push(u);
                    i += 1;
                    if u == CALL_CLOSE {
                        break;
                    }
                }
                segs.push(ActionSegment { kind: SegmentKind::ToolCall, tokens: call });
                continue;
            }
            ANSWER => {
                flush(&mut reasoning, &mut segs);
                segs.push(ActionSegment { kind: SegmentKind::FinalAnswer, tokens: raw[i..].to_vec() });
                return segs;
            }
            END => {
                if !reasoning.is_empty() {
                    reasoning.push(t);
                } else if let Some(last) = segs.last_mut() {
                    last.tokens.push(t);
                } else {
                    reasoning.push(t);
                }
            }
            _ => reasoning.push(t),
        }
        i += 1;
    }
    flush(&mut reasoning, &mut segs);
    segs
}

/// Concatenated tokens of a segment list.
pub fn concat_segments(segs: &[ActionSegment]) -> Vec<Token> {
    segs.iter().flat_map(|s| s.tokens.iter().copied()).collect()
}

/// Grammar diagnostics for one completion, used by the process reward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ActionDiagnostics {
    pub malformed_calls: usize,
    pub well_formed_calls: usize,
    /// Reserved tokens found outside grammar positions.
    pub misused_reserved: usize,
    /// Reasoning segments carrying at least one non-`END` token.
    pub reasoning_segments: usize,
    pub has_final_answer: bool,
}

pub fn diagnose(segs: &[ActionSegment]) -> ActionDiagnostics {
    let mut d = ActionDiagnostics::default();
    let total: usize = segs.iter().map(|s| s.tokens.len()).sum();
    let mut pos = 0usize;
    for seg in segs {
        let n = seg.tokens.len();
        for (j, &t) in seg.tokens.iter().enumerate() {
            let global = pos + j;
            if !is_reserved(t) {
                continue;
            }
            let grammar = match seg.kind {
                _ if t == END && global + 1 == total => true,
                SegmentKind::ToolCall => {
                    (j == 0 && t == CALL_OPEN)
                        || (j == 1 && is_tool_id(t))
                        || (t == CALL_CLOSE && (j + 1 == n || (j + 2 == n && seg.tokens[n - 1] == END)))
                }
                SegmentKind::FinalAnswer => j == 0 && t == ANSWER,
                SegmentKind::Reasoning => false,
            };
            if !grammar {
                d.misused_reserved += 1;
            }
        }
        match seg.kind {
            SegmentKind::ToolCall => {
                if seg.parse_call().is_some() {
                    d.well_formed_calls += 1;
                } else {
                    d.malformed_calls += 1;
                }
            }
            SegmentKind::FinalAnswer => d.has_final_answer = true,
            SegmentKind::Reasoning => {
                if seg.tokens.iter().any(|&t| t != END) {
                    d.reasoning_segments += 1;
                }
            }
        }
        pos += n;
    }
    d
}
