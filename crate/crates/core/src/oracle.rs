//! Robust control oracle: one-step predictive control that keeps the
//! predicted voltage a buffer `k` away from the limits, where `k` covers
//! the estimated noise bound and a ball of model error around the estimate.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{self, Affine, ConicProgram, SolveOptions, SolveStatus};
use crate::geometry::{vectorize, devectorize, ModelEstimate, VparBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("program infeasible with the slack pinned to zero")]
    Infeasible,
    #[error("oracle solver failed: {0:?}")]
    Solver(SolveStatus),
}

/// How the slack variable `xi` is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SlackPolicy {
    /// One solve with `xi >= 0` penalized by `beta * xi^2`.
    #[default]
    Single,
    /// Solve with `xi = 0`; fall back to the slack program if infeasible.
    TwoStage,
    /// `xi = 0` only; infeasibility is an error.
    Pinned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub v_nom: DVector<f64>,
    pub v_min: DVector<f64>,
    pub v_max: DVector<f64>,
    pub q_min: DVector<f64>,
    pub q_max: DVector<f64>,
    pub p_v: DMatrix<f64>,
    pub p_u: DMatrix<f64>,
    pub beta: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub eta_bar: f64,
    pub vpar_box: VparBox,
    /// Buses whose voltages the controller sees and constrains.
    pub observed: Vec<bool>,
    /// Known noise bound; switches the buffer to `eta + rho_known * ||u||`.
    pub known_eta: Option<f64>,
    pub slack: SlackPolicy,
    pub solve: SolveOptions,
}

impl ControllerConfig {
    /// Uniform limits and diagonal costs around `v_nom`.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        n: usize,
        v_nom: f64,
        v_min: f64,
        v_max: f64,
        q_min: f64,
        q_max: f64,
        pv_weight: f64,
        pu_weight: f64,
    ) -> Self {
        let c = |x: f64| DVector::from_element(n, x);
        Self {
            v_nom: c(v_nom),
            v_min: c(v_min),
            v_max: c(v_max),
            q_min: c(q_min),
            q_max: c(q_max),
            p_v: DMatrix::identity(n, n) * pv_weight,
            p_u: DMatrix::identity(n, n) * pu_weight,
            beta: 100.0,
            delta: 20.0,
            epsilon: 0.1,
            eta_bar: 10.0,
            vpar_box: VparBox::unbounded(n),
            observed: vec![true; n],
            known_eta: None,
            slack: SlackPolicy::Single,
            solve: SolveOptions { opt_tol: 1e-12, ..SolveOptions::default() },
        }
    }

    pub fn n(&self) -> usize {
        self.v_nom.len()
    }

    /// Zeroes the injection range of buses outside `controllable` (1-based).
    pub fn restrict_control(&mut self, controllable: &[usize]) {
        for i in 0..self.n() {
            if !controllable.contains(&(i + 1)) {
                self.q_min[i] = 0.0;
                self.q_max[i] = 0.0;
            }
        }
    }

    pub fn q_range_norm(&self) -> f64 {
        (&self.q_max - &self.q_min).norm()
    }

    /// Ball radius the oracle is robust to.
    pub fn rho(&self) -> f64 {
        match self.known_eta {
            Some(_) => rho_known(self.epsilon, self.q_range_norm()),
            None => rho(self.delta, self.epsilon, self.q_range_norm()),
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let n = self.n();
        for (name, len) in [
            ("v_min", self.v_min.len()),
            ("v_max", self.v_max.len()),
            ("q_min", self.q_min.len()),
            ("q_max", self.q_max.len()),
            ("p_v", self.p_v.nrows()),
            ("p_v", self.p_v.ncols()),
            ("p_u", self.p_u.nrows()),
            ("p_u", self.p_u.ncols()),
            ("vpar_box", self.vpar_box.n()),
            ("observed", self.observed.len()),
        ] {
            if len != n {
                return Err(OracleError::InvalidConfig(format!("{name} has length {len}, expected {n}")));
            }
        }
        for i in 0..n {
            if !(self.v_min[i] < self.v_max[i]) {
                return Err(OracleError::InvalidConfig(format!("v_min >= v_max at bus {}", i + 1)));
            }
            if !(self.q_min[i] <= self.q_max[i]) {
                return Err(OracleError::InvalidConfig(format!("q_min > q_max at bus {}", i + 1)));
            }
        }
        for (name, v) in [
            ("beta", self.beta),
            ("delta", self.delta),
            ("epsilon", self.epsilon),
            ("eta_bar", self.eta_bar),
        ] {
            if !(v > 0.0) {
                return Err(OracleError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.q_range_norm() == 0.0 {
            return Err(OracleError::InvalidConfig("no bus has a reactive power range".into()));
        }
        for (name, m) in [("p_v", &self.p_v), ("p_u", &self.p_u)] {
            if crate::grid::min_eigenvalue(m) < -1e-12 {
                return Err(OracleError::InvalidConfig(format!("{name} is not positive semidefinite")));
            }
        }
        Ok(())
    }
}

/// `delta * epsilon / (1 + delta * ||q_max - q_min||_2)`.
pub fn rho(delta: f64, epsilon: f64, q_range_norm: f64) -> f64 {
    delta * epsilon / (1.0 + delta * q_range_norm)
}

/// `epsilon / ||q_max - q_min||_2`, the margin when the noise bound is known.
pub fn rho_known(epsilon: f64, q_range_norm: f64) -> f64 {
    epsilon / q_range_norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub u: DVector<f64>,
    pub xi: f64,
    pub v_pred: DVector<f64>,
    /// Buffer evaluated at the returned `u`.
    pub k: f64,
    pub objective: f64,
    pub status: SolveStatus,
    /// Whether the slack program produced `u` (always true for `Single`).
    pub slack_used: bool,
}

fn check_len(expected: usize, got: usize) -> Result<(), OracleError> {
    if expected == got {
        Ok(())
    } else {
        Err(OracleError::DimensionMismatch { expected, got })
    }
}

/// Noise term and `rho` of the buffer `k = eta_term + rho * ||u||`.
fn buffer_terms(cfg: &ControllerConfig, est: &ModelEstimate) -> (f64, f64) {
    let r = cfg.rho();
    match cfg.known_eta {
        Some(eta) => (eta, r),
        None => (est.eta_hat + r / cfg.delta, r),
    }
}

/// Variables `(u, xi, s)` with `s >= ||u||_2`.
fn oracle_program(
    cfg: &ControllerConfig,
    est: &ModelEstimate,
    v_now: &DVector<f64>,
    q_prev: &DVector<f64>,
    with_slack: bool,
) -> ConicProgram {
    let n = cfg.n();
    let (xi, s) = (n, n + 1);
    let mut p = ConicProgram::new(n + 2);
    let x = &est.x_hat;
    let obs: Vec<usize> = (0..n).filter(|&i| cfg.observed[i]).collect();

    // Cost ||v + X u - v_nom||^2_Pv over observed buses + ||u||^2_Pu + beta xi^2.
    let mut pv = cfg.p_v.clone();
    for i in 0..n {
        if !cfg.observed[i] {
            pv.row_mut(i).fill(0.0);
            pv.column_mut(i).fill(0.0);
        }
    }
    let d = v_now - &cfg.v_nom;
    let d = DVector::from_fn(n, |i, _| if cfg.observed[i] { d[i] } else { 0.0 });
    let h = x.transpose() * &pv * x + &cfg.p_u;
    let g = x.transpose() * &pv * &d;
    for i in 0..n {
        for j in i..n {
            let hij = 0.5 * (h[(i, j)] + h[(j, i)]);
            p.add_quadratic(i, j, 2.0 * hij);
        }
        p.add_linear(i, 2.0 * g[i]);
    }
    p.add_constant(d.dot(&(&pv * &d)));
    if with_slack {
        p.add_quadratic(xi, xi, 2.0 * cfg.beta);
        p.set_bounds(xi, 0.0, f64::INFINITY);
    } else {
        p.set_bounds(xi, 0.0, 0.0);
    }

    for i in 0..n {
        p.set_bounds(i, cfg.q_min[i] - q_prev[i], cfg.q_max[i] - q_prev[i]);
    }
    p.add_soc(Affine::var(s), (0..n).map(Affine::var).collect());

    let (base, r) = buffer_terms(cfg, est);
    for &i in &obs {
        let xu: Vec<(usize, f64)> = (0..n).map(|j| (j, x[(i, j)])).filter(|&(_, c)| c != 0.0).collect();
        // v + X u + base + r s - xi <= v_max
        let mut up = xu.clone();
        up.push((s, r));
        up.push((xi, -1.0));
        p.add_le(up, cfg.v_max[i] - v_now[i] - base);
        // v + X u - base - r s + xi >= v_min
        let mut lo: Vec<(usize, f64)> = xu.iter().map(|&(j, c)| (j, -c)).collect();
        lo.push((s, r));
        lo.push((xi, -1.0));
        p.add_le(lo, v_now[i] - cfg.v_min[i] - base);
    }
    p
}

fn extract(
    cfg: &ControllerConfig,
    est: &ModelEstimate,
    v_now: &DVector<f64>,
    report: conic::SolveReport,
    slack_used: bool,
) -> OracleSolution {
    let n = cfg.n();
    let u = DVector::from_column_slice(&report.x[..n]);
    let (base, r) = buffer_terms(cfg, est);
    OracleSolution {
        v_pred: v_now + &est.x_hat * &u,
        k: base + r * u.norm(),
        xi: report.x[n].max(0.0),
        u,
        objective: report.objective,
        status: report.status,
        slack_used,
    }
}

/// Solves the oracle program at state `v_now` with previous injection
/// `q_prev`.
pub fn solve_oracle(
    cfg: &ControllerConfig,
    est: &ModelEstimate,
    v_now: &DVector<f64>,
    q_prev: &DVector<f64>,
) -> Result<OracleSolution, OracleError> {
    let n = cfg.n();
    check_len(n, est.n())?;
    check_len(n, v_now.len())?;
    check_len(n, q_prev.len())?;
    for i in 0..n {
        if cfg.q_min[i] > cfg.q_max[i] {
            return Err(OracleError::InvalidConfig(format!("empty injection box at bus {}", i + 1)));
        }
    }

    if cfg.slack != SlackPolicy::Single {
        let prog = oracle_program(cfg, est, v_now, q_prev, false);
        let report = conic::solve(&prog, &cfg.solve);
        match report.status {
            SolveStatus::Optimal => return Ok(extract(cfg, est, v_now, report, false)),
            SolveStatus::Infeasible if cfg.slack == SlackPolicy::Pinned => {
                return Err(OracleError::Infeasible)
            }
            SolveStatus::Infeasible => {}
            s => return Err(OracleError::Solver(s)),
        }
    }
    let prog = oracle_program(cfg, est, v_now, q_prev, true);
    let report = conic::solve(&prog, &cfg.solve);
    match report.status {
        SolveStatus::Optimal => Ok(extract(cfg, est, v_now, report, true)),
        s => Err(OracleError::Solver(s)),
    }
}

/// Whether some `q` in `[q_min, q_max]` puts `X q + vpar` inside the limits
/// shrunk by `margin` on every observed bus.
pub fn box_condition_holds(
    cfg: &ControllerConfig,
    x: &DMatrix<f64>,
    vpar: &DVector<f64>,
    margin: f64,
) -> Result<bool, OracleError> {
    let n = cfg.n();
    check_len(n, x.nrows())?;
    check_len(n, vpar.len())?;
    let mut p = ConicProgram::new(n);
    for i in 0..n {
        p.set_bounds(i, cfg.q_min[i], cfg.q_max[i]);
    }
    for i in (0..n).filter(|&i| cfg.observed[i]) {
        let row: Vec<(usize, f64)> = (0..n).map(|j| (j, x[(i, j)])).collect();
        p.add_le(row.clone(), cfg.v_max[i] - margin - vpar[i]);
        p.add_le(row.into_iter().map(|(j, c)| (j, -c)).collect(), vpar[i] - cfg.v_min[i] - margin);
    }
    match conic::solve(&p, &cfg.solve).status {
        SolveStatus::Optimal => Ok(true),
        SolveStatus::Infeasible => Ok(false),
        s => Err(OracleError::Solver(s)),
    }
}

/// Outcome of [`verify_robust_ball`].
#[derive(Debug, Clone, PartialEq)]
pub struct RobustCheck {
    pub samples: usize,
    pub violations: usize,
    /// Largest excursion beyond the limits over all samples (0 when none).
    pub worst_excess: f64,
}

/// Samples models `(X, eta)` within `radius` of the estimate (half of them
/// on the sphere) and checks that `v_now + X u + w` stays inside the limits
/// for the worst noise `|w_i| <= eta`, up to `1e-6`. In known-noise mode
/// only `X` is perturbed and `eta` is the known bound.
#[allow(clippy::too_many_arguments)]
pub fn verify_robust_ball(
    cfg: &ControllerConfig,
    est: &ModelEstimate,
    v_now: &DVector<f64>,
    sol: &OracleSolution,
    samples: usize,
    radius: f64,
    seed: u64,
) -> RobustCheck {
    let n = cfg.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = vectorize(est, cfg.delta);
    let m = center.len();
    let perturb_eta = cfg.known_eta.is_none();
    let dims = if perturb_eta { m } else { m - 1 };
    let mut check = RobustCheck { samples, violations: 0, worst_excess: 0.0 };

    for s in 0..samples {
        let mut dir = DVector::from_fn(m, |k, _| if k < dims { rng.sample::<f64, _>(StandardNormal) } else { 0.0 });
        let norm = dir.norm();
        if norm > 0.0 {
            dir /= norm;
        }
        let scale = if s % 2 == 0 { radius } else { radius * rng.random::<f64>().powf(1.0 / dims as f64) };
        let point = &center + dir * scale;
        let Ok(mut model) = devectorize(&point, n, cfg.delta) else { continue };
        model.eta_hat = match cfg.known_eta {
            Some(e) => e,
            None => model.eta_hat.clamp(0.0, cfg.eta_bar),
        };
        let v = v_now + &model.x_hat * &sol.u;
        let mut excess: f64 = 0.0;
        for i in (0..n).filter(|&i| cfg.observed[i]) {
            excess = excess.max(v[i] + model.eta_hat - cfg.v_max[i]);
            excess = excess.max(cfg.v_min[i] - (v[i] - model.eta_hat));
        }
        if excess > 1e-6 {
            check.violations += 1;
        }
        check.worst_excess = check.worst_excess.max(excess);
    }
    check
}


#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_cfg(v_min: f64, v_max: f64, q: f64, eps: f64) -> ControllerConfig {
        let mut cfg = ControllerConfig::uniform(1, 1.0, v_min, v_max, -q, q, 0.1, 10.0);
        cfg.epsilon = eps;
        cfg.known_eta = Some(0.0);
        cfg
    }

    fn est1(x: f64) -> ModelEstimate {
        ModelEstimate::new(DMatrix::from_element(1, 1, x), 0.0)
    }

    fn dv(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    /// Brute-force oracle for the scalar program: for each `u` on a grid
    /// the optimal slack is `max(0, required)` and the cost is explicit.
    fn grid_oracle(v: f64, q: f64, rho: f64, beta: f64, slack: bool) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let steps = 400_000;
        for k in 0..=steps {
            let u = -q + 2.0 * q * k as f64 / steps as f64;
            let vp = v + u;
            let kbuf = rho * u.abs();
            let need = (0.95 + kbuf - vp).max(vp - (1.05 - kbuf)).max(0.0);
            if !slack && need > 0.0 {
                continue;
            }
            let cost = 0.1 * (vp - 1.0).powi(2) + 10.0 * u * u + beta * need * need;
            if cost < best.0 {
                best = (cost, u, need);
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn rho_examples() {
        assert!((rho(1.0, 0.5, 2f64.sqrt()) - 0.20711).abs() < 1e-5);
        let r = rho(20.0, 0.1, 0.48 * 55f64.sqrt());
        assert!((r - 2.0 / (1.0 + 20.0 * 0.48 * 55f64.sqrt())).abs() < 1e-15);
        assert!((r - 0.027702555537).abs() < 1e-10);
        assert_eq!(rho_known(0.01, 2.0), 0.005);
        assert_eq!(rho_known(0.02, 2.0), 2.0 * rho_known(0.01, 2.0));
        let big = rho(1e9, 0.3, 1.7);
        assert!((big - rho_known(0.3, 1.7)).abs() / rho_known(0.3, 1.7) < 1e-9);
    }

    #[test]
    fn rho_decreases_with_range() {
        let mut last = f64::INFINITY;
        for r in [0.1, 0.5, 1.0, 2.0, 10.0] {
            let v = rho(20.0, 0.1, r);
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn lower_limit_active() {
        let mut cfg = scalar_cfg(0.95, 1.05, 1.0, 0.01);
        cfg.slack = SlackPolicy::TwoStage;
        assert!((cfg.rho() - 0.005).abs() < 1e-15);
        let sol = solve_oracle(&cfg, &est1(1.0), &dv(0.9), &dv(0.0)).unwrap();
        let (u, xi) = grid_oracle(0.9, 1.0, 0.005, 100.0, false);
        assert!((sol.u[0] - 0.05 / 0.995).abs() < 1e-6, "{sol:?}");
        assert!((sol.u[0] - u).abs() < 1e-4 && xi == 0.0);
        assert!(sol.xi <= 1e-9 && !sol.slack_used);
        assert!((sol.k - 0.005 * sol.u[0]).abs() < 1e-9);
    }

    #[test]
    fn single_solve_trades_slack_for_cost() {
        let cfg = scalar_cfg(0.95, 1.05, 1.0, 0.01);
        let sol = solve_oracle(&cfg, &est1(1.0), &dv(0.9), &dv(0.0)).unwrap();
        let (u, xi) = grid_oracle(0.9, 1.0, 0.005, 100.0, true);
        assert!((sol.u[0] - u).abs() < 1e-4, "{} vs {u}", sol.u[0]);
        assert!((sol.xi - xi).abs() < 1e-4, "{} vs {xi}", sol.xi);
        assert!(sol.xi > 1e-3);
    }

    #[test]
    fn at_nominal_does_nothing() {
        for policy in [SlackPolicy::Single, SlackPolicy::TwoStage, SlackPolicy::Pinned] {
            let mut cfg = scalar_cfg(0.95, 1.05, 1.0, 0.01);
            cfg.slack = policy;
            let sol = solve_oracle(&cfg, &est1(1.0), &dv(1.0), &dv(0.0)).unwrap();
            assert!(sol.u[0].abs() < 1e-7 && sol.xi < 1e-7, "{sol:?}");
        }
    }

    #[test]
    fn saturated_control_needs_slack() {
        let cfg = scalar_cfg(0.95, 1.05, 0.01, 0.01);
        assert!((cfg.rho() - 0.5).abs() < 1e-15);
        let sol = solve_oracle(&cfg, &est1(1.0), &dv(0.9), &dv(0.0)).unwrap();
        let (u, xi) = grid_oracle(0.9, 0.01, 0.5, 100.0, true);
        assert!((sol.u[0] - 0.01).abs() < 1e-6 && (u - 0.01).abs() < 1e-4);
        assert!((sol.xi - 0.045).abs() < 1e-6 && (xi - 0.045).abs() < 1e-4);
        assert!((sol.k - 0.005).abs() < 1e-9);
        let mut pinned = cfg.clone();
        pinned.slack = SlackPolicy::Pinned;
        assert_eq!(solve_oracle(&pinned, &est1(1.0), &dv(0.9), &dv(0.0)), Err(OracleError::Infeasible));
    }

    #[test]
    fn non_controllable_buses_hold() {
        let mut cfg = ControllerConfig::uniform(2, 1.0, 0.95, 1.05, -1.0, 1.0, 0.1, 10.0);
        cfg.restrict_control(&[2]);
        let est = ModelEstimate::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]), 0.0);
        let sol = solve_oracle(&cfg, &est, &DVector::from_element(2, 0.93), &DVector::zeros(2)).unwrap();
        assert!(sol.u[0].abs() < 1e-9);
        assert!(sol.u[1] > 0.0);
    }

    #[test]
    fn robust_ball_degenerate_and_falsified() {
        let mut cfg = scalar_cfg(0.95, 1.05, 1.0, 0.01);
        cfg.slack = SlackPolicy::TwoStage;
        let est = est1(1.0);
        let sol = solve_oracle(&cfg, &est, &dv(0.9), &dv(0.0)).unwrap();
        assert_eq!(verify_robust_ball(&cfg, &est, &dv(0.9), &sol, 100, 0.0, 1).violations, 0);
        assert_eq!(verify_robust_ball(&cfg, &est, &dv(0.9), &sol, 1000, cfg.rho(), 2).violations, 0);
        let doubled = verify_robust_ball(&cfg, &est, &dv(0.9), &sol, 1000, 2.0 * cfg.rho(), 3);
        assert!(doubled.violations > 0, "{doubled:?}");
    }

    #[test]
    fn box_condition_scalar() {
        // 0.9 + q >= 0.95 + m needs q >= 0.05 + m with q <= 0.1.
        let cfg = scalar_cfg(0.95, 1.05, 0.1, 0.01);
        let x = DMatrix::from_element(1, 1, 1.0);
        assert!(box_condition_holds(&cfg, &x, &dv(0.9), 0.04).unwrap());
        assert!(!box_condition_holds(&cfg, &x, &dv(0.9), 0.06).unwrap());
        // 1.1 + q <= 1.05 - m needs q <= -0.05 - m.
        assert!(box_condition_holds(&cfg, &x, &dv(1.1), 0.04).unwrap());
        assert!(!box_condition_holds(&cfg, &x, &dv(1.1), 0.06).unwrap());
    }

    #[test]
    fn buffer_dominates_euclidean_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let (eta, r, delta, un) =
                (rng.random::<f64>(), rng.random::<f64>(), 0.1 + 50.0 * rng.random::<f64>(), 3.0 * rng.random::<f64>());
            let k = eta + r * (1.0 / delta + un);
            assert!(k >= eta + r * (1.0 / (delta * delta) + un * un).sqrt() - 1e-15);
        }
    }
}
