use agentrl_core::env::{Catalog, Difficulty, Domain, LatencyModel};
use agentrl_core::scheduler::{
    displacement_metric, sample_tasks, simulate_trainer, window_for, GenerationQueue, MixConfig, MixSchedule,
    SchedulerError, SharedQueue, Stage,
};
use agentrl_core::seed;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn permuted_times(n: usize, s: u64) -> Vec<f64> {
    let mut t: Vec<f64> = (1..=n).map(|x| x as f64).collect();
    t.shuffle(&mut seed::rng(s));
    t
}

/// Strict FIFO by hand: entry j is consumed at max(its completion, the
/// moment the trainer finished j-1).
fn fifo_oracle(times: &[f64], cost: f64) -> Vec<f64> {
    let mut free = 0.0f64;
    times
        .iter()
        .map(|&c| {
            let at = free.max(c);
            free = at + cost;
            at
        })
        .collect()
}

#[test]
fn window_one_is_strict_fifo() {
    for s in 0..1000 {
        let n = 2 + (s as usize % 30);
        let times = permuted_times(n, s);
        let tl = simulate_trainer(&times, &vec![0; n], 1, 0.25, 0.0).unwrap();
        assert_eq!(tl.fetch_order, (0..n).collect::<Vec<_>>());
        let want = fifo_oracle(&times, 0.25);
        let got: Vec<f64> = tl.events.iter().map(|e| e.fetch_vtime).collect();
        assert_eq!(got, want, "seed {s}");
        assert_eq!(displacement_metric(&tl.fetch_order, &(0..n).collect::<Vec<_>>()).unwrap(), 0.0);
    }
}

#[test]
fn full_window_is_completion_order() {
    for s in 0..1000 {
        let n = 2 + (s as usize % 30);
        let times = permuted_times(n, s);
        let tl = simulate_trainer(&times, &vec![0; n], n, 0.25, 0.0).unwrap();
        let mut by_time: Vec<usize> = (0..n).collect();
        by_time.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        assert_eq!(tl.fetch_order, by_time);
    }
}

#[test]
fn random_permutation_displacement_matches_closed_form() {
    // E Σ|π(i) − i| = (N² − 1)/3 for a uniform permutation
    let n = 100usize;
    let expected = (n * n - 1) as f64 / 3.0 / (n * n / 2) as f64;
    let ident: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(2024);
    let draws = 10_000;
    let mut sum = 0.0;
    let mut perm = ident.clone();
    for _ in 0..draws {
        perm.shuffle(&mut rng);
        sum += displacement_metric(&perm, &ident).unwrap();
    }
    let mean = sum / draws as f64;
    assert!((mean - expected).abs() < 0.005, "mean {mean}, closed form {expected}");
}

#[test]
fn displacement_brute_force_small_n() {
    // exhaustive mean over all permutations of 5 items
    fn perms(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k == items.len() {
            out.push(items.clone());
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            perms(items, k + 1, out);
            items.swap(k, i);
        }
    }
    let mut all = Vec::new();
    perms(&mut (0..5).collect(), 0, &mut all);
    let ident: Vec<usize> = (0..5).collect();
    let mean: f64 = all.iter().map(|p| displacement_metric(p, &ident).unwrap()).sum::<f64>() / all.len() as f64;
    assert!((mean - 8.0 / 12.0).abs() < 1e-12);
    let max = all.iter().map(|p| displacement_metric(p, &ident).unwrap()).fold(0.0, f64::max);
    assert_eq!(max, 1.0);
}

/// Completion time of a rollout group: the slowest of G episodes, each a few
/// tool calls with lognormal latency.
fn heavy_tailed_workload(n: usize, s: u64) -> Vec<f64> {
    let lat = LatencyModel { mu: 0.5, sigma: 1.0 };
    let mut rng = seed::rng(s);
    (0..n)
        .map(|_| {
            (0..8).map(|_| (0..rng.random_range(1..6)).map(|_| lat.sample(&mut rng)).sum::<f64>()).fold(0.0, f64::max)
        })
        .collect()
}

#[test]
fn wider_window_never_idles_more_on_heavy_tails() {
    let n = 40;
    let w = window_for(0.3, n);
    let mut total = [0.0; 3];
    for s in 0..200 {
        let times = heavy_tailed_workload(n, s);
        let run = |w| simulate_trainer(&times, &vec![0; n], w, 0.5, 0.0).unwrap();
        let (fifo, mid, greedy) = (run(1), run(w), run(n));
        assert!(mid.idle_time <= fifo.idle_time + 1e-9, "seed {s}: {} > {}", mid.idle_time, fifo.idle_time);
        assert!(greedy.idle_time <= mid.idle_time + 1e-9, "seed {s}");
        total[0] += fifo.idle_time;
        total[1] += mid.idle_time;
        total[2] += greedy.idle_time;
    }
    assert!(total[1] < total[0], "windowing removes some head-of-line idle time: {total:?}");
}

#[test]
fn concurrent_completions_respect_window() {
    let n = 64;
    let q = SharedQueue::new(GenerationQueue::new(&vec![0; n], 5).unwrap());
    let mut events = Vec::new();
    std::thread::scope(|s| {
        for w in 0..4 {
            let q = &q;
            s.spawn(move || {
                let mut order: Vec<usize> = (w..n).step_by(4).collect();
                order.shuffle(&mut seed::rng(w as u64));
                for j in order {
                    q.mark_running(j).unwrap();
                    q.mark_completed(j, j as f64).unwrap();
                }
            });
        }
        let mut tick = 0.0;
        while events.len() < n {
            events.extend(q.fetch_ready(tick));
            tick += 1.0;
            std::thread::yield_now();
        }
    });
    let mut seen: Vec<usize> = events.iter().map(|e| e.index).collect();
    for e in &events {
        assert!(e.index >= e.window_head && e.index < e.window_head + 5);
    }
    seen.sort();
    assert_eq!(seen, (0..n).collect::<Vec<_>>());
    assert!(q.into_inner().is_drained());
}

proptest! {
    #[test]
    fn every_entry_fetched_once_within_window(
        times in prop::collection::vec(0.0f64..100.0, 1..40),
        frac in 0.0f64..1.0,
        cost in 0.0f64..3.0,
    ) {
        let n = times.len();
        let w = window_for(frac, n);
        let tl = simulate_trainer(&times, &vec![0; n], w, cost, 0.0).unwrap();
        let mut order = tl.fetch_order.clone();
        order.sort();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
        let mut last_head = 0;
        for e in &tl.events {
            prop_assert!(e.index >= e.window_head && e.index < e.window_head + w);
            prop_assert!(e.window_head >= last_head);
            prop_assert!(e.fetch_vtime >= e.complete_vtime);
            last_head = e.window_head;
        }
        prop_assert!((tl.end_time - tl.idle_time - tl.busy_time).abs() < 1e-9 * (1.0 + tl.end_time));
        let d = displacement_metric(&tl.fetch_order, &(0..n).collect::<Vec<_>>()).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }
}

fn counts(tasks: &[agentrl_core::env::TaskSpec]) -> [usize; 4] {
    let mut c = [0; 4];
    for t in tasks {
        c[t.domain.index()] += 1;
    }
    c
}

#[test]
fn single_domain_mix() {
    let cat = Catalog::builtin(1);
    let mix = MixConfig { ratios: [1.0, 0.0, 0.0, 0.0], ..MixConfig::default() };
    let tasks = sample_tasks(&MixSchedule::constant(mix), &cat, 500, 0, 3).unwrap();
    assert_eq!(counts(&tasks), [500, 0, 0, 0]);
}

#[test]
fn uniform_mix_within_three_sigma() {
    let cat = Catalog::builtin(1);
    let tasks = sample_tasks(&MixSchedule::default(), &cat, 10_000, 0, 9).unwrap();
    let sigma = (10_000.0f64 * 0.25 * 0.75).sqrt();
    for c in counts(&tasks) {
        assert!((c as f64 - 2500.0).abs() <= 3.0 * sigma, "{c}");
    }
    assert_eq!(tasks, sample_tasks(&MixSchedule::default(), &cat, 10_000, 0, 9).unwrap());
}

#[test]
fn stage_switch_and_context_cap() {
    let cat = Catalog::builtin(1);
    let mut late = MixConfig::single(Domain::Agent, Difficulty::Hard);
    late.context_cap[Domain::Agent.index()] = 96;
    let sched = MixSchedule {
        base: MixConfig::single(Domain::Reasoning, Difficulty::Easy),
        stages: vec![Stage { from_step: 100, mix: late }],
    };
    let before = sample_tasks(&sched, &cat, 50, 99, 0).unwrap();
    assert!(before
        .iter()
        .all(|t| t.domain == Domain::Reasoning && t.difficulty == Difficulty::Easy && t.context_cap == 128));
    let after = sample_tasks(&sched, &cat, 50, 100, 0).unwrap();
    assert!(after.iter().all(|t| t.domain == Domain::Agent && t.difficulty == Difficulty::Hard && t.context_cap == 96));
}

#[test]
fn empty_cell_with_positive_weight_is_an_error() {
    let cat = Catalog::builtin(1);
    let only_calc: Vec<String> =
        cat.tasks.iter().filter(|t| t.domain == Domain::Reasoning).map(|t| t.task_id.clone()).collect();
    let small = cat.restrict(&only_calc).unwrap();
    assert!(matches!(sample_tasks(&MixSchedule::default(), &small, 1, 0, 0), Err(SchedulerError::Mix(_))));
    let bad = MixConfig { ratios: [0.5, 0.6, 0.0, 0.0], ..MixConfig::default() };
    assert!(sample_tasks(&MixSchedule::constant(bad), &cat, 1, 0, 0).is_err());
}
