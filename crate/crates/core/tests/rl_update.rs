use agentrl_core::env::{run_episode, Catalog, CmPolicy, EpisodeIds, SnapshotPolicy, TaskSpec};
use agentrl_core::policy::{grad_log_prob, token_log_probs, InitConfig, ModelConfig, PolicyParams};
use agentrl_core::rl::{
    apply_update, cispo_loss_and_grad, clip_ratio, compose_rewards, process_reward, reward_to_go, speed_reward,
    CispoConfig, GroupBatch, LogProbPath, RewardConfig, RlError, SpeedShaping,
};
use agentrl_core::seed;
use agentrl_core::trajectory::{RolloutGroup, StepRecord, TerminalOutcome, Trajectory};
use agentrl_core::vocab::{ActionSegment, Token};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn params(s: u64) -> PolicyParams {
    PolicyParams::init(ModelConfig::default(), InitConfig { unembed_std: 0.5, ..Default::default() }, s).unwrap()
}

fn perturbed(p: &PolicyParams, std: f64, s: u64) -> PolicyParams {
    let mut q = p.clone();
    let n = Normal::new(0.0, std).unwrap();
    let mut rng = seed::rng(s);
    for x in &mut q.data {
        *x += n.sample(&mut rng);
    }
    q
}

fn rollout_group(theta_old: &PolicyParams, task: &TaskSpec, group_id: u64, g: usize, s: u64) -> RolloutGroup {
    let trajs = (0..g)
        .map(|i| {
            let mut pol = SnapshotPolicy::new(theta_old, s, i as u64);
            run_episode(
                task,
                &task.environment(),
                &CmPolicy::PersistAll,
                &mut pol,
                EpisodeIds { group_id, group_index: i },
                s + i as u64,
            )
            .unwrap()
        })
        .collect();
    RolloutGroup::new(task.task_id.clone(), group_id, trajs).unwrap()
}

fn batches(theta_old: &PolicyParams, n_groups: usize, s: u64) -> Vec<GroupBatch> {
    let cat = Catalog::builtin(s);
    (0..n_groups)
        .map(|k| {
            let task = &cat.tasks[(s as usize * 7 + k * 13) % cat.tasks.len()];
            let mut group = rollout_group(theta_old, task, k as u64, 4, s * 100 + k as u64);
            let table = compose_rewards(&mut group, &RewardConfig::default()).unwrap();
            GroupBatch::from_group(&group, &table).unwrap()
        })
        .collect()
}

// ---------------------------------------------------------------- rewards

fn brute_rtg(r: &[f64], gamma: f64) -> Vec<f64> {
    (0..r.len()).map(|t| (t..r.len()).map(|k| gamma.powi((k - t) as i32) * r[k]).sum()).collect()
}

#[test]
fn reward_to_go_matches_double_loop() {
    let mut rng = seed::rng(6);
    for i in 0..1000 {
        let n = rng.random_range(0..40);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gamma = if i == 0 { 0.9 } else { rng.random_range(0.0..=1.0) };
        for (a, b) in reward_to_go(&r, gamma).iter().zip(brute_rtg(&r, gamma)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn shaping_is_monotone_on_grid() {
    let h = SpeedShaping::default();
    let mut prev = f64::INFINITY;
    for k in 1..=10_000 {
        let x = k as f64 * 10.0 / 10_000.0;
        let v = speed_reward(x, 1.0, &h).unwrap();
        assert!(v <= prev && (0.0..=1.0).contains(&v));
        prev = v;
    }
}

fn step(action: Vec<ActionSegment>, dt: f64) -> StepRecord {
    StepRecord {
        state_tokens: vec![Token(1)],
        action,
        observation_tokens: vec![],
        virtual_duration: dt,
        behavior_logprobs: vec![],
    }
}

fn traj(gi: usize, steps: Vec<StepRecord>, score: f64) -> Trajectory {
    let mut t = Trajectory::new("x", 0, gi);
    for s in steps {
        t.push_step(s);
    }
    t.finish(if score == 1.0 { TerminalOutcome::Success } else { TerminalOutcome::Failure }, score);
    t
}

#[test]
fn single_trajectory_gets_its_score() {
    let mut g =
        RolloutGroup::new("x", 0, vec![traj(0, vec![step(vec![ActionSegment::final_answer(&[6, 20, 7])], 0.03)], 1.0)])
            .unwrap();
    let cfg = RewardConfig { alpha: 0.0, beta: 0.0, ..Default::default() };
    let table = compose_rewards(&mut g, &cfg).unwrap();
    assert_eq!(table.advantages, vec![vec![1.0]]);
    assert_eq!(table.baselines, vec![0.0]);
}

#[test]
fn leave_one_out_baselines() {
    let ans = || vec![ActionSegment::final_answer(&[6, 20, 7])];
    let mut g =
        RolloutGroup::new("x", 0, vec![traj(0, vec![step(ans(), 1.0)], 1.0), traj(1, vec![step(ans(), 99.0)], 0.0)])
            .unwrap();
    // median 50: the fast agent gets h = 1, the slow one h = 0
    let cfg = RewardConfig {
        alpha: 0.0,
        beta: 1.0,
        speed: SpeedShaping { intercept: 2.0, slope: 2.0 },
        ..Default::default()
    };
    let table = compose_rewards(&mut g, &cfg).unwrap();
    assert_eq!(table.returns, vec![2.0, 0.0]);
    assert_eq!(table.baselines, vec![0.0, 2.0]);
    assert_eq!(table.advantages, vec![vec![2.0], vec![-2.0]]);
}

#[test]
fn non_terminal_group_is_rejected() {
    let mut t = Trajectory::new("x", 0, 0);
    t.push_step(step(vec![ActionSegment::reasoning(&[20])], 0.01));
    let mut g = RolloutGroup { task_id: "x".into(), group_id: 0, trajectories: vec![t] };
    assert!(matches!(compose_rewards(&mut g, &RewardConfig::default()), Err(RlError::NotTerminal { .. })));
}

/// Straight-line recomputation of every advantage from raw components.
fn recompute(group: &RolloutGroup, cfg: &RewardConfig) -> Vec<Vec<f64>> {
    let mut times: Vec<f64> =
        group.trajectories.iter().filter(|t| !t.steps.is_empty()).map(|t| t.total_virtual_time).collect();
    times.sort_by(f64::total_cmp);
    let k = times.len();
    let med = if k % 2 == 1 { times[k / 2] } else { (times[k / 2 - 1] + times[k / 2]) / 2.0 };
    let rewards: Vec<Vec<f64>> = group
        .trajectories
        .iter()
        .map(|t| {
            let n = t.steps.len();
            (0..n)
                .map(|i| {
                    let mut r = cfg.alpha * process_reward(&t.steps[i], &cfg.process);
                    if i + 1 == n {
                        let x = t.total_virtual_time / med;
                        r += cfg.beta * (2.0 - x).clamp(0.0, 1.0) + t.score;
                    }
                    r
                })
                .collect()
        })
        .collect();
    let totals: Vec<f64> = rewards.iter().map(|r| r.iter().sum()).collect();
    let g = totals.len();
    rewards
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let b =
                if g == 1 { 0.0 } else { (0..g).filter(|&j| j != i).map(|j| totals[j]).sum::<f64>() / (g - 1) as f64 };
            brute_rtg(r, cfg.gamma).into_iter().map(|x| x - b).collect()
        })
        .collect()
}

#[test]
fn advantages_match_recomputation_on_real_groups() {
    let cat = Catalog::builtin(3);
    let theta = params(3);
    let mut rng = seed::rng(3);
    for k in 0..30 {
        let task = &cat.tasks[(k * 7) % cat.tasks.len()];
        let mut g = rollout_group(&theta, task, k as u64, 4, k as u64);
        let cfg = RewardConfig {
            alpha: rng.random_range(0.0..1.0),
            beta: rng.random_range(0.0..1.0),
            gamma: rng.random_range(0.0..=1.0),
            ..Default::default()
        };
        let table = compose_rewards(&mut g, &cfg).unwrap();
        let want = recompute(&g, &cfg);
        for (a, b) in table.advantages.iter().flatten().zip(want.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (t, rtg) in g.trajectories.iter().zip(&table.reward_to_go) {
            assert_eq!(t.step_rewards.len(), t.steps.len());
            assert_eq!(rtg.len(), t.steps.len());
        }
    }
}

proptest! {
    #[test]
    fn terminal_advantages_ignore_constant_shift(seed_value in 0u64..500, c in -5.0f64..5.0, g in 2usize..6) {
        let cat = Catalog::builtin(1);
        let theta = params(1);
        let task = &cat.tasks[seed_value as usize % cat.tasks.len()];
        let group = rollout_group(&theta, task, 0, g, seed_value);
        let cfg = RewardConfig { gamma: 1.0, ..Default::default() };
        let mut a = group.clone();
        let mut b = group;
        for t in &mut b.trajectories {
            t.score += c;
        }
        let (ta, tb) = (compose_rewards(&mut a, &cfg).unwrap(), compose_rewards(&mut b, &cfg).unwrap());
        for (x, y) in ta.advantages.iter().zip(&tb.advantages) {
            if let (Some(x), Some(y)) = (x.last(), y.last()) {
                prop_assert!((x - y).abs() < 1e-9, "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn clip_is_asymmetric(rho in 0.0f64..10.0, eps in 0.01f64..1.0) {
        let r = clip_ratio(rho, eps);
        prop_assert!(r <= 1.0 + eps);
        if rho <= 1.0 + eps {
            prop_assert_eq!(r, rho);
        }
    }
}

// ---------------------------------------------------------------- CISPO

fn cfg() -> CispoConfig {
    CispoConfig { eps_high: 0.2, learning_rate: 0.1, group_size: 4 }
}

/// The objective with every clipped ratio frozen at its value under `at`.
fn frozen_objective(theta: &PolicyParams, at: &PolicyParams, bs: &[GroupBatch], eps: f64) -> f64 {
    let active: Vec<&GroupBatch> = bs.iter().filter(|b| b.tokens() > 0).collect();
    let mut j = 0.0;
    for b in &active {
        let n: usize = b.samples.iter().map(|s| s.action_tokens.len()).sum();
        let mut sum = 0.0;
        for (s, &adv) in b.samples.iter().zip(&b.advantages) {
            if s.action_tokens.is_empty() {
                continue;
            }
            let now = token_log_probs(theta, &s.state_tokens, &s.action_tokens).unwrap();
            let anchor = token_log_probs(at, &s.state_tokens, &s.action_tokens).unwrap();
            for ((l, a), old) in now.iter().zip(&anchor).zip(&s.behavior_logprobs) {
                let rhat = (a - old).exp().min(1.0 + eps);
                sum += rhat * adv * l;
            }
        }
        j += sum / n as f64 / active.len() as f64;
    }
    j
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

#[test]
fn gradient_matches_frozen_ratio_finite_differences() {
    let h = 1e-5;
    for s in 0..3u64 {
        let old = params(40 + s);
        let theta = perturbed(&old, 0.05, s);
        let bs = batches(&old, 2, s);
        let out = cispo_loss_and_grad(&theta, &bs, &cfg(), LogProbPath::Independent).unwrap();
        assert!((out.objective - frozen_objective(&theta, &theta, &bs, 0.2)).abs() < 1e-12);
        assert!(out.mean_ratio != 1.0);
        let pool: Vec<usize> = (0..theta.len()).filter(|&i| out.gradient.data[i] != 0.0).collect();
        let mut rng = seed::rng(s);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let i = pool[rng.random_range(0..pool.len())];
            let (mut plus, mut minus) = (theta.clone(), theta.clone());
            plus.data[i] += h;
            minus.data[i] -= h;
            let fd =
                (frozen_objective(&plus, &theta, &bs, 0.2) - frozen_objective(&minus, &theta, &bs, 0.2)) / (2.0 * h);
            worst = worst.max(rel_err(out.gradient.data[i], fd));
        }
        assert!(worst < 1e-4, "init {s}: worst relative error {worst}");
    }
}

#[test]
fn on_policy_gradient_is_token_mean_of_advantage_weighted_score() {
    let theta = params(50);
    let bs = batches(&theta, 3, 5);
    let out = cispo_loss_and_grad(&theta, &bs, &cfg(), LogProbPath::Independent).unwrap();
    assert!((out.mean_ratio - 1.0).abs() < 1e-12);
    assert_eq!(out.clip_fraction, 0.0);
    let active: Vec<&GroupBatch> = bs.iter().filter(|b| b.tokens() > 0).collect();
    let mut want = theta.zeros_like();
    for b in &active {
        for (s, &adv) in b.samples.iter().zip(&b.advantages) {
            if s.action_tokens.is_empty() {
                continue;
            }
            let g = grad_log_prob(&theta, &s.state_tokens, &s.action_tokens).unwrap();
            want.axpy(adv / b.tokens() as f64 / active.len() as f64, &g);
        }
    }
    for (a, b) in out.gradient.data.iter().zip(&want.data) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn clipping_is_reported_and_bounded() {
    let old = params(60);
    let theta = perturbed(&old, 0.3, 60);
    let bs = batches(&old, 2, 6);
    let out = cispo_loss_and_grad(&theta, &bs, &cfg(), LogProbPath::Independent).unwrap();
    assert!(out.clip_fraction > 0.0 && out.clip_fraction < 1.0, "{}", out.clip_fraction);
}

#[test]
fn merged_and_independent_paths_agree_bitwise() {
    let old = params(70);
    let theta = perturbed(&old, 0.05, 70);
    for s in 0..4 {
        let bs = batches(&old, 2, 70 + s);
        let a = cispo_loss_and_grad(&theta, &bs, &cfg(), LogProbPath::Independent).unwrap();
        let b = cispo_loss_and_grad(&theta, &bs, &cfg(), LogProbPath::Merged).unwrap();
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert_eq!(a.gradient, b.gradient);
        assert!(a.ledgers.is_empty());
        assert_eq!(b.ledgers.len(), bs.iter().filter(|x| x.tokens() > 0).count());
    }
}

#[test]
fn missing_behavior_log_probs_are_rejected() {
    let theta = params(80);
    let mut bs = batches(&theta, 1, 8);
    let s = bs[0].samples.iter_mut().find(|s| !s.action_tokens.is_empty()).unwrap();
    s.behavior_logprobs.pop();
    assert!(matches!(
        cispo_loss_and_grad(&theta, &bs, &cfg(), LogProbPath::Independent),
        Err(RlError::MissingBehavior { .. })
    ));
}

#[test]
fn single_group_has_zero_gradient_variance() {
    let theta = params(81);
    let bs = batches(&theta, 1, 9);
    assert_eq!(cispo_loss_and_grad(&theta, &bs, &cfg(), LogProbPath::Independent).unwrap().group_grad_variance, 0.0);
    let two = batches(&theta, 2, 9);
    assert!(cispo_loss_and_grad(&theta, &two, &cfg(), LogProbPath::Independent).unwrap().group_grad_variance > 0.0);
}

#[test]
fn empty_batch_is_a_no_op() {
    let theta = params(82);
    let out = cispo_loss_and_grad(&theta, &[], &cfg(), LogProbPath::Merged).unwrap();
    assert_eq!(out.objective, 0.0);
    assert_eq!(out.gradient.l2_norm(), 0.0);
}

// ---------------------------------------------------------------- updates

#[test]
fn update_algebra() {
    let p = params(90);
    let g1 = perturbed(&p.zeros_like(), 1.0, 1);
    let g2 = perturbed(&p.zeros_like(), 1.0, 2);
    assert_eq!(apply_update(&p, &p.zeros_like(), 0.5).unwrap(), p);
    assert_eq!(apply_update(&p, &g1, 0.0).unwrap(), p);
    let two = apply_update(&apply_update(&p, &g1, 0.25).unwrap(), &g2, 0.25).unwrap();
    let mut sum = g1.clone();
    sum.axpy(1.0, &g2);
    let one = apply_update(&p, &sum, 0.25).unwrap();
    for (a, b) in two.data.iter().zip(&one.data) {
        assert!((a - b).abs() < 1e-12);
    }
    let before = p.clone();
    let _ = apply_update(&p, &g1, 1.0).unwrap();
    assert_eq!(p, before, "old snapshot untouched");
}

#[test]
fn non_finite_gradients_are_rejected() {
    let p = params(91);
    let mut g = p.zeros_like();
    g.data[3] = f64::NAN;
    g.data[9] = f64::INFINITY;
    match apply_update(&p, &g, 0.1) {
        Err(RlError::NonFiniteGradient { count, first }) => assert_eq!((count, first), (2, 3)),
        other => panic!("{other:?}"),
    }
}
