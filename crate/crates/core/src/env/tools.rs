//! Simulated tools and the per-step execution of tool calls.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::vocab::{
    as_value, value, ActionSegment, SegmentKind, Token, ERROR, FAIL, PASS, TOOL_CALC, TOOL_ECHO, TOOL_RUN_TESTS,
    TOOL_SEARCH, VALUE_COUNT,
};

/// Lognormal distribution of per-call virtual durations, in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub mu: f64,
    pub sigma: f64,
}

impl LatencyModel {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let d = LogNormal::new(self.mu, self.sigma).expect("sigma validated at task load");
        // exp() of a finite normal draw can underflow to zero only for absurd mu
        d.sample(rng).max(f64::MIN_POSITIVE)
    }

    pub fn is_valid(&self) -> bool {
        self.mu.is_finite() && self.sigma.is_finite() && self.sigma >= 0.0
    }
}

/// A deterministic tool: the observation depends only on the arguments.
pub trait Tool: Send + Sync + fmt::Debug {
    fn id(&self) -> Token;
    /// Calls to parallelizable tools issued in one action overlap in time.
    fn parallelizable(&self) -> bool;
    fn execute(&self, args: &[Token]) -> Vec<Token>;
    /// Multiplier applied to the latency draw of each call.
    fn time_scale(&self) -> f64 {
        1.0
    }
}

/// `calc(x, a) = (5x + a + 3) mod 48` over value tokens.
pub fn calc(x: u32, a: u32) -> u32 {
    (5 * x + a + 3) % VALUE_COUNT
}

#[derive(Debug)]
pub struct CalcTool;

impl Tool for CalcTool {
    fn id(&self) -> Token {
        TOOL_CALC
    }
    fn parallelizable(&self) -> bool {
        true
    }
    fn execute(&self, args: &[Token]) -> Vec<Token> {
        match args.iter().map(|&t| as_value(t)).collect::<Option<Vec<u32>>>().as_deref() {
            Some(&[x, a]) => vec![value(calc(x, a))],
            _ => vec![ERROR],
        }
    }
}

/// Key-value lookup; unknown keys yield `ERROR`.
#[derive(Debug)]
pub struct SearchTool {
    pub table: BTreeMap<u32, u32>,
}

impl Tool for SearchTool {
    fn id(&self) -> Token {
        TOOL_SEARCH
    }
    fn parallelizable(&self) -> bool {
        true
    }
    fn execute(&self, args: &[Token]) -> Vec<Token> {
        match args {
            [k] => as_value(*k).and_then(|k| self.table.get(&k)).map_or(vec![ERROR], |&v| vec![value(v)]),
            _ => vec![ERROR],
        }
    }
}

/// Checks proposed right-hand sides against the expected ones: `PASS`, or
/// `FAIL i expected_i` for the first failing rule.
#[derive(Debug)]
pub struct RunTestsTool {
    pub expected: Vec<u32>,
}

impl Tool for RunTestsTool {
    fn id(&self) -> Token {
        TOOL_RUN_TESTS
    }
    fn parallelizable(&self) -> bool {
        false
    }
    fn execute(&self, args: &[Token]) -> Vec<Token> {
        if args.len() != self.expected.len() {
            return vec![ERROR];
        }
        for (i, (&a, &e)) in args.iter().zip(&self.expected).enumerate() {
            if as_value(a) != Some(e) {
                return vec![FAIL, value(i as u32), value(e)];
            }
        }
        vec![PASS]
    }
}

/// Returns its arguments.
#[derive(Debug)]
pub struct EchoTool;

impl Tool for EchoTool {
    fn id(&self) -> Token {
        TOOL_ECHO
    }
    fn parallelizable(&self) -> bool {
        true
    }
    fn execute(&self, args: &[Token]) -> Vec<Token> {
        if args.is_empty() {
            vec![ERROR]
        } else {
            args.to_vec()
        }
    }
}

/// Outcome of executing every call in one action.
#[derive(Clone, Debug, PartialEq)]
pub struct StepToolResult {
    /// Concatenated per-call observations, in call order.
    pub observation: Vec<Token>,
    /// Sum of sequential call durations plus the max of parallel ones.
    pub tool_time: f64,
    pub calls: usize,
    pub errors: usize,
}

#[derive(Debug)]
pub struct ToolEnvironment {
    pub tools: Vec<Box<dyn Tool>>,
    pub latency: LatencyModel,
    /// Treat every call as sequential (for timing comparisons).
    pub force_sequential: bool,
}

impl ToolEnvironment {
    pub fn new(tools: Vec<Box<dyn Tool>>, latency: LatencyModel) -> Self {
        Self { tools, latency, force_sequential: false }
    }

    pub fn tool(&self, id: Token) -> Option<&dyn Tool> {
        self.tools.iter().find(|t| t.id() == id).map(|t| t.as_ref())
    }

    /// Executes the tool-call segments of `action`. Malformed calls and
    /// unknown tools produce `ERROR` and take no time. Each executed call
    /// draws one duration from `rng`, in call order, regardless of the
    /// parallel/sequential mode.
    pub fn execute<R: Rng + ?Sized>(&self, action: &[ActionSegment], rng: &mut R) -> StepToolResult {
        let mut out = StepToolResult { observation: Vec::new(), tool_time: 0.0, calls: 0, errors: 0 };
        let mut par_max: f64 = 0.0;
        for seg in action.iter().filter(|s| s.kind == SegmentKind::ToolCall) {
            out.calls += 1;
            let Some(call) = seg.parse_call() else {
                out.observation.push(ERROR);
                out.errors += 1;
                continue;
            };
            let Some(tool) = self.tool(call.tool) else {
                out.observation.push(ERROR);
                out.errors += 1;
                continue;
            };
            let obs = tool.execute(&call.args);
            let dt = self.latency.sample(rng) * tool.time_scale();
            if tool.parallelizable() && !self.force_sequential {
                par_max = par_max.max(dt);
            } else {
                out.tool_time += dt;
            }
            out.observation.extend(obs);
        }
        out.tool_time += par_max;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn env(tools: Vec<Box<dyn Tool>>) -> ToolEnvironment {
        ToolEnvironment::new(tools, LatencyModel { mu: 0.0, sigma: 1.0 })
    }

    #[test]
    fn calc_tool_closed_form() {
        assert_eq!(CalcTool.execute(&[value(3), value(4)]), vec![value(22)]);
        assert_eq!(CalcTool.execute(&[value(40), value(47)]), vec![value((200 + 47 + 3) % 48)]);
        assert_eq!(CalcTool.execute(&[value(3)]), vec![ERROR]);
    }

    #[test]
    fn run_tests_reports_first_failure() {
        let t = RunTestsTool { expected: vec![1, 2, 3] };
        assert_eq!(t.execute(&[value(1), value(2), value(3)]), vec![PASS]);
        assert_eq!(t.execute(&[value(1), value(9), value(9)]), vec![FAIL, value(1), value(2)]);
        assert_eq!(t.execute(&[value(1)]), vec![ERROR]);
    }

    #[test]
    fn parallel_calls_take_max_sequential_take_sum() {
        let table: BTreeMap<u32, u32> = [(1, 2), (3, 4)].into_iter().collect();
        let mut e = env(vec![Box::new(SearchTool { table })]);
        let action = vec![ActionSegment::tool_call(&[4, 12, 17, 5]), ActionSegment::tool_call(&[4, 12, 19, 5])];
        let mut rng = seed::rng(1);
        let d1 = e.latency.sample(&mut rng);
        let d2 = e.latency.sample(&mut rng);
        let par = e.execute(&action, &mut seed::rng(1));
        assert_eq!(par.observation, vec![value(2), value(4)]);
        assert_eq!(par.tool_time, d1.max(d2));
        e.force_sequential = true;
        let seq = e.execute(&action, &mut seed::rng(1));
        assert_eq!(seq.tool_time, d1 + d2);
        assert_eq!(seq.observation, par.observation);
    }

    #[derive(Debug)]
    struct Slow(Token, f64, bool);

    impl Tool for Slow {
        fn id(&self) -> Token {
            self.0
        }
        fn parallelizable(&self) -> bool {
            self.2
        }
        fn execute(&self, _: &[Token]) -> Vec<Token> {
            vec![value(0)]
        }
        fn time_scale(&self) -> f64 {
            self.1
        }
    }

    #[test]
    fn two_and_five_seconds() {
        let fixed = LatencyModel { mu: 0.0, sigma: 0.0 };
        let action = vec![ActionSegment::tool_call(&[4, 10, 16, 5]), ActionSegment::tool_call(&[4, 13, 16, 5])];
        let par = ToolEnvironment::new(
            vec![Box::new(Slow(TOOL_CALC, 2.0, true)), Box::new(Slow(TOOL_ECHO, 5.0, true))],
            fixed,
        );
        assert_eq!(par.execute(&action, &mut seed::rng(0)).tool_time, 5.0);
        let seq = ToolEnvironment::new(
            vec![Box::new(Slow(TOOL_CALC, 2.0, false)), Box::new(Slow(TOOL_ECHO, 5.0, false))],
            fixed,
        );
        assert_eq!(seq.execute(&action, &mut seed::rng(0)).tool_time, 7.0);
    }

    #[test]
    fn unknown_and_malformed_calls_yield_error() {
        let e = env(vec![Box::new(CalcTool)]);
        let action = vec![ActionSegment::tool_call(&[4, 12, 17, 5]), ActionSegment::tool_call(&[4, 20])];
        let r = e.execute(&action, &mut seed::rng(0));
        assert_eq!(r.observation, vec![ERROR, ERROR]);
        assert_eq!(r.errors, 2);
        assert_eq!(r.tool_time, 0.0);
    }

    #[test]
    fn latency_strictly_positive() {
        let m = LatencyModel { mu: 1.0, sigma: 1.0 };
        let mut rng = seed::rng(3);
        assert!((0..10_000).all(|_| m.sample(&mut rng) > 0.0));
    }
}
