//! Acceptance gate: one line per criterion, nonzero exit if any fails.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voltguard::controller::{mistake_bound, parameter_diameter, run_episode, Dynamics, EpisodeResult, PriorMode};
use voltguard::geometry::{
    build_consistent_set, membership, param_dimension, project, tri_delta_distance, tri_norm, ModelEstimate,
    Observation, ProjectionOutcome, VparBox,
};
use voltguard::grid::{build_network, check_sensitivity_matrix, compute_sensitivity, make_prior_set, RadialNetwork};
use voltguard::oracle::{
    box_condition_holds, rho, rho_known, solve_oracle, verify_robust_ball, ControllerConfig, SlackPolicy,
};
use voltguard::scenario::{prepare, synth_case, RunSetup, SynthSpec, TopologyChange};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed <= limit
}

/// Random tree on buses `0..=n` with uniform parent attachment.
fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> RadialNetwork {
    let edges: Vec<(usize, usize)> = (1..=n).map(|b| (rng.random_range(0..b), b)).collect();
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.5)).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.5)).collect();
    let all: Vec<usize> = (1..=n).collect();
    build_network(&edges, &r, &x, &all).unwrap()
}

/// Edges (named by child bus) on the path from the substation to `b`.
fn path_edges(net: &RadialNetwork, mut b: usize) -> Vec<usize> {
    let mut out = Vec::new();
    while b != 0 {
        out.push(b);
        b = net.parent(b);
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut dominance = true;
    for _ in 0..100 {
        let n = rng.random_range(1..=12);
        let net = random_tree(&mut rng, n);
        let m = compute_sensitivity(&net);
        for i in 1..=n {
            let pi = path_edges(&net, i);
            for j in 1..=n {
                let pj = path_edges(&net, j);
                let shared = pi.iter().filter(|e| pj.contains(e));
                let xb: f64 = shared.clone().map(|&e| 2.0 * net.reactance(e)).sum();
                let rb: f64 = shared.map(|&e| 2.0 * net.resistance(e)).sum();
                worst = worst.max((m.x[(i - 1, j - 1)] - xb).abs()).max((m.r[(i - 1, j - 1)] - rb).abs());
                let cap = m.x[(i - 1, i - 1)].min(m.x[(j - 1, j - 1)]);
                dominance &= m.x[(i - 1, j - 1)] <= cap && m.x[(i - 1, j - 1)] >= 0.0;
            }
        }
        dominance &= check_sensitivity_matrix(&m.x, 1e-12).is_ok();
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-12 && dominance && within(Duration::from_secs(5), t),
        format!("max |X - brute| = {worst:.1e}, dominance {dominance}, {:.2}s", t.as_secs_f64()),
    )
}

fn sym_from(n: usize, vals: impl Iterator<Item = f64>) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    let mut it = vals;
    for i in 0..n {
        for j in i..n {
            let v = it.next().unwrap();
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut failures = 0;
    let mut tightest = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.random_range(1..=10);
        let a = sym_from(n, (0..).map(|_| rng.random_range(-5.0..5.0)));
        let alpha = tri_norm(&a).unwrap() * rng.random_range(1.0..1.5);
        let b = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let ab = &a * &b;
        let bound = alpha * b.norm();
        for i in 0..n {
            tightest = tightest.min(bound - ab[i].abs());
            if ab[i].abs() > bound + 1e-12 {
                failures += 1;
            }
        }
    }
    let t = start.elapsed();
    outcome(
        failures == 0 && within(Duration::from_secs(1), t),
        format!("{failures} violations, min slack {tightest:.2e}, {:.3}s", t.as_secs_f64()),
    )
}

fn episode(n: usize, seed: u64, len: usize, setup: RunSetup) -> EpisodeResult {
    let mut spec = SynthSpec::new(n, seed);
    spec.len = len;
    let bundle = synth_case(&spec).unwrap();
    let p = prepare(&bundle, &setup).unwrap();
    run_episode(&p.plant, &p.controller, &p.prior, &p.initial, &p.episode).unwrap()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for seed in 1..=20 {
        let setup = RunSetup { audit_truth: true, ..RunSetup::default() };
        let res = episode(8, seed, 501, setup);
        for s in &res.steps {
            worst = worst.max(s.truth_violation.unwrap());
            steps += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-6 && steps == 20 * 500 && within(Duration::from_secs(300), t),
        format!("{steps} steps, worst truth violation {worst:.2e}, {:.1}s", t.as_secs_f64()),
    )
}

/// Random consistent-set instance of size `n` plus a starting point outside it.
fn projection_instance(rng: &mut ChaCha8Rng, n: usize) -> (voltguard::geometry::ConsistentSetSpec, ModelEstimate, f64) {
    let net = random_tree(rng, n);
    let truth = compute_sensitivity(&net).x;
    let alpha = rng.random_range(0.3..0.8);
    let prior = make_prior_set(&truth, alpha, &[], &[], true).unwrap();
    let eta_star = rng.random_range(0.05..0.3);
    let mut observations = Vec::new();
    let mut vpars = Vec::new();
    let mut v = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    for _ in 0..rng.random_range(1..=3) {
        let u = DVector::from_fn(n, |_, _| rng.random_range(-0.3..0.3));
        let q_c = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
        let w = DVector::from_fn(n, |_, _| rng.random_range(-eta_star..eta_star));
        let v_after = &v + &truth * &u + w;
        vpars.push(&v_after - &truth * &q_c);
        observations.push(Observation { v_before: v.clone(), v_after: v_after.clone(), u, q_c });
        v = v_after;
    }
    let pad = 0.3;
    let lo = DVector::from_fn(n, |i, _| vpars.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min) - pad);
    let hi = DVector::from_fn(n, |i, _| vpars.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max) + pad);
    let set = build_consistent_set(prior, 2.0 * eta_star + 0.2, VparBox::new(lo, hi).unwrap(), observations);
    let far = sym_from(n, (0..).map(|_| rng.random_range(-1.0..3.0)));
    let from = ModelEstimate::new(far, rng.random_range(0.0..1.0));
    (set, from, rng.random_range(0.5..5.0))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut beaten = 0;
    let mut starved = 0;
    let mut gap = f64::INFINITY;
    for inst in 0..10 {
        let n = 1 + inst % 2;
        let (set, from, delta) = projection_instance(&mut rng, n);
        let ProjectionOutcome::Projected(p) = project(&set, &from, delta).unwrap() else {
            return outcome(false, format!("instance {inst} reported infeasible"));
        };
        if !membership(&p, &set, 1e-6) {
            return outcome(false, format!("instance {inst}: projection outside the set"));
        }
        let d_proj = tri_delta_distance(&p, &from, delta);
        let (center, radius) = (set.prior.center.clone(), set.prior.radius());
        let mut found = 0;
        let mut tries = 0;
        while found < 1000 && tries < 2_000_000 {
            tries += 1;
            let upper: Vec<f64> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).map(|ij| center[ij]).collect();
            let x = sym_from(n, upper.into_iter().map(|c| c + rng.random_range(-radius..radius)));
            let cand = ModelEstimate::new(x, rng.random_range(0.0..set.eta_max));
            if !membership(&cand, &set, 0.0) {
                continue;
            }
            found += 1;
            let d = tri_delta_distance(&cand, &from, delta);
            gap = gap.min(d - d_proj);
            if d < d_proj - 1e-6 {
                beaten += 1;
            }
        }
        if found < 1000 {
            starved += 1;
        }
    }

    // |1 - X| <= eta, X in [0, 3], eta in [0, 0.5]; (2, 0) projects to (1.5, 0.5).
    let c = DMatrix::from_element(1, 1, 1.5);
    let d1 = |x: f64| DVector::from_element(1, x);
    let hand = build_consistent_set(
        make_prior_set(&c, 1.0, &[], &[], true).unwrap(),
        0.5,
        VparBox::unbounded(1),
        vec![Observation { v_before: d1(0.0), v_after: d1(1.0), u: d1(1.0), q_c: d1(0.0) }],
    );
    let ProjectionOutcome::Projected(h) =
        project(&hand, &ModelEstimate::new(DMatrix::from_element(1, 1, 2.0), 0.0), 1.0).unwrap()
    else {
        return outcome(false, "hand case reported infeasible");
    };
    let hand_err = (h.x_hat[(0, 0)] - 1.5).abs().max((h.eta_hat - 0.5).abs());
    let t = start.elapsed();
    outcome(
        beaten == 0 && starved == 0 && hand_err <= 1e-6,
        format!(
            "10 instances x 1000 feasible points, {beaten} closer, min margin {gap:.2e}; hand case error {hand_err:.1e}; {:.1}s",
            t.as_secs_f64()
        ),
    )
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut infeasible, mut violations, mut no_assumption) = (0, 0, 0);
    for inst in 0..50u64 {
        let n = rng.random_range(1..=4);
        let q = 0.1;
        let mut cfg = ControllerConfig::uniform(n, 1.0, 0.95, 1.05, -q, q, 0.1, 10.0);
        cfg.eta_bar = 0.005;
        cfg.epsilon = 0.005;
        cfg.delta = 20.0;
        cfg.slack = SlackPolicy::Pinned;
        let x_hat = compute_sensitivity(&random_tree(&mut rng, n)).x;
        let est = ModelEstimate::new(x_hat.clone(), rng.random_range(0.0..cfg.eta_bar));
        let q_star = DVector::from_fn(n, |_, _| rng.random_range(-0.8 * q..0.8 * q));
        let target = DVector::from_fn(n, |_, _| rng.random_range(0.965..1.035));
        let vpar = &target - &x_hat * &q_star;
        if !box_condition_holds(&cfg, &x_hat, &vpar, cfg.eta_bar + cfg.epsilon).unwrap() {
            no_assumption += 1;
            continue;
        }
        let q_prev = DVector::from_fn(n, |_, _| rng.random_range(-q..q));
        let v_now = &vpar + &x_hat * &q_prev;
        match solve_oracle(&cfg, &est, &v_now, &q_prev) {
            Ok(sol) => {
                let check = verify_robust_ball(&cfg, &est, &v_now, &sol, 1000, cfg.rho(), inst);
                violations += check.violations;
            }
            Err(_) => infeasible += 1,
        }
    }
    let t = start.elapsed();
    outcome(
        infeasible == 0 && violations == 0 && no_assumption == 0 && within(Duration::from_secs(120), t),
        format!(
            "50 instances: {infeasible} pinned infeasible, {violations} robust-ball violations, {:.1}s",
            t.as_secs_f64()
        ),
    )
}

/// Exhaustive search for the scalar oracle with unit sensitivity, zero
/// noise and limits [0.95, 1.05].
fn grid_oracle(v: f64, q: f64, rho: f64, slack: bool) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0, 0.0);
    let steps = 400_000;
    for k in 0..=steps {
        let u = -q + 2.0 * q * k as f64 / steps as f64;
        let vp = v + u;
        let buf = rho * u.abs();
        let need = (0.95 + buf - vp).max(vp - (1.05 - buf)).max(0.0);
        if !slack && need > 0.0 {
            continue;
        }
        let cost = 0.1 * (vp - 1.0).powi(2) + 10.0 * u * u + 100.0 * need * need;
        if cost < best.0 {
            best = (cost, u, need);
        }
    }
    (best.1, best.2)
}

fn criterion_6() -> Outcome {
    let scalar = |v_q: f64, eps: f64, slack: SlackPolicy| {
        let mut cfg = ControllerConfig::uniform(1, 1.0, 0.95, 1.05, -v_q, v_q, 0.1, 10.0);
        cfg.epsilon = eps;
        cfg.known_eta = Some(0.0);
        cfg.slack = slack;
        cfg
    };
    let est = ModelEstimate::new(DMatrix::from_element(1, 1, 1.0), 0.0);
    let dv = |x: f64| DVector::from_element(1, x);
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for (name, cfg, v, expect_u, expect_xi) in [
        ("lower limit", scalar(1.0, 0.01, SlackPolicy::TwoStage), 0.9, 0.050251, 0.0),
        ("nominal", scalar(1.0, 0.01, SlackPolicy::TwoStage), 1.0, 0.0, 0.0),
        ("saturated", scalar(0.01, 0.01, SlackPolicy::Single), 0.9, 0.01, 0.045),
    ] {
        let sol = solve_oracle(&cfg, &est, &dv(v), &dv(0.0)).unwrap();
        let (gu, gxi) = grid_oracle(v, cfg.q_max[0], cfg.rho(), cfg.slack == SlackPolicy::Single);
        let err = [(sol.u[0] - gu).abs(), (sol.xi - gxi).abs(), (sol.u[0] - expect_u).abs(), (sol.xi - expect_xi).abs()]
            .into_iter()
            .fold(0.0, f64::max);
        worst = worst.max(err);
        lines.push(format!("{name} u={:.6} xi={:.6}", sol.u[0], sol.xi));
    }
    outcome(worst <= 1e-4, format!("{}; max error {worst:.1e}", lines.join(", ")))
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let mut late = 0;
    let mut dominated = true;
    let mut per_seed = Vec::new();
    for seed in 1..=4 {
        let run = |prior| episode(8, seed, 2001, RunSetup { prior: Some(prior), ..RunSetup::default() });
        let unknown = run(PriorMode::Unknown);
        let known = run(PriorMode::Known);
        late += unknown.steps[1000..].iter().chain(&known.steps[1000..]).filter(|s| s.mistake).count();
        dominated &= known.metrics.mistakes <= unknown.metrics.mistakes;
        per_seed.push(format!("{}/{}", known.metrics.mistakes, unknown.metrics.mistakes));
    }
    let t = start.elapsed();
    outcome(
        late == 0 && dominated && within(Duration::from_secs(900), t),
        format!(
            "mistakes known/unknown per seed [{}], {late} in final half, {:.1}s",
            per_seed.join(", "),
            t.as_secs_f64()
        ),
    )
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut complete = true;
    let mut per_seed = Vec::new();
    for seed in 1..=4 {
        let res = episode(8, seed, 2001, RunSetup { dynamics: Dynamics::Distflow, ..RunSetup::default() });
        complete &= res.steps.len() == 2000 && res.steps.iter().all(|s| s.pf_residual.is_some());
        worst = worst.max(res.steps.iter().filter_map(|s| s.pf_residual).fold(0.0, f64::max));
        per_seed.push(format!("{} ({:.3})", res.metrics.mistakes, res.metrics.avg_violation));
    }
    let t = start.elapsed();
    outcome(
        complete && worst <= 1e-10,
        format!(
            "mistakes (avg violation) per seed [{}], max residual {worst:.1e}, {:.1}s",
            per_seed.join(", "),
            t.as_secs_f64()
        ),
    )
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let change: TopologyChange = "1000: -3>6,-1>8,+0>6,+4>8".parse().unwrap();
    let res = episode(8, 1, 2001, RunSetup { topology_change: Some(change), ..RunSetup::default() });
    let Some(r) = res.steps.iter().position(|s| s.reset) else {
        return outcome(false, "no reset detected");
    };
    let after: Vec<f64> = res.steps[r..].iter().map(|s| s.model_error).collect();
    let w = (after.len() / 10).max(1);
    let head = after[..w].iter().sum::<f64>() / w as f64;
    let tail = after[after.len() - w..].iter().sum::<f64>() / w as f64;
    let t = start.elapsed();
    outcome(
        res.infeasible_events >= 1 && res.reset_events >= 1 && res.steps[r].t > 1000 && tail < head,
        format!(
            "{} infeasible, {} resets (first at t={}), model error {head:.3} -> {tail:.3}, {:.1}s",
            res.infeasible_events,
            res.reset_events,
            res.steps[r].t,
            t.as_secs_f64()
        ),
    )
}

fn criterion_10() -> Outcome {
    let mut rel: f64 = 0.0;
    for (eps, range) in [(0.1, 0.48 * 55f64.sqrt()), (0.3, 1.7), (0.01, 2.0)] {
        let k = rho_known(eps, range);
        rel = rel.max((rho(1e9, eps, range) - k).abs() / k);
    }
    let mut dims_ok = true;
    for n in 1..=12 {
        dims_ok &= param_dimension(n, false) == 1 + n * (n + 1) / 2 && param_dimension(n, true) == n * (n + 1) / 2;
    }
    let known = episode(3, 2, 21, RunSetup { known_eta: true, ..RunSetup::default() });
    let unknown = episode(3, 2, 21, RunSetup::default());
    let bundle = synth_case(&SynthSpec { len: 21, ..SynthSpec::new(3, 2) }).unwrap();
    let p = prepare(&bundle, &RunSetup { known_eta: true, ..RunSetup::default() }).unwrap();
    let diam = parameter_diameter(&p.prior, p.controller.delta, p.controller.eta_bar, true);
    let expect = mistake_bound(diam, rho_known(p.controller.epsilon, p.controller.q_range_norm()), 6);
    let bound_ok = known.param_dimension == 6
        && unknown.param_dimension == 7
        && (known.mistake_bound - expect).abs() <= 1e-9 * expect;
    outcome(
        rel <= 1e-9 && dims_ok && bound_ok,
        format!(
            "rho relative gap {rel:.1e}; m = {} known vs {} unknown for n = 3",
            known.param_dimension, unknown.param_dimension
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("sensitivity matches path-intersection oracle", criterion_1),
        ("matrix-vector bound from tri_norm", criterion_2),
        ("true model stays in the consistent set", criterion_3),
        ("projection optimality", criterion_4),
        ("pinned oracle feasible and robust", criterion_5),
        ("scalar oracle examples", criterion_6),
        ("finite mistakes, known prior dominates", criterion_7),
        ("branch-flow dynamics", criterion_8),
        ("topology change reset", criterion_9),
        ("known noise limit", criterion_10),
    ];
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        println!("criterion {:>2} {}: {} ({})", k + 1, if o.pass { "PASS" } else { "FAIL" }, name, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
