//! The online loop: chase a consistent model, query the oracle, apply the
//! action, record the transition. [`OnlineController`] only ever sees
//! voltages; [`run_episode`] wraps it in a plant simulation and scores the
//! result against the true network.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    self, build_consistent_set, tri_delta_distance, tri_norm_unchecked, Chaser, ConsistentSetSpec,
    GeometryError, ModelEstimate, Observation, ProjectionChaser, ProjectionOutcome, VparBox,
};
use crate::grid::{
    compute_sensitivity, line_pins_first, make_prior_set, topo_pins_first, GridError, PriorSpec,
    RadialNetwork, SensitivityModel,
};
use crate::oracle::{solve_oracle, ControllerConfig, OracleError, OracleSolution};
use crate::powerflow::{self, solve_distflow, InjectionProfile, PowerFlowError};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("series has {got} steps, episode needs {needed}")]
    SeriesTooShort { needed: usize, got: usize },
    #[error("step {step}: model chasing failed: {source}")]
    Projection { step: usize, source: GeometryError },
    #[error("step {step}: oracle failed: {source}")]
    Oracle { step: usize, source: OracleError },
    #[error("step {step}: power flow failed: {source}")]
    PowerFlow { step: usize, source: PowerFlowError },
    #[error(transparent)]
    Grid(#[from] GridError),
}

impl ControllerError {
    /// Whether the error came from a numerical solve rather than bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(self, Self::Projection { .. } | Self::Oracle { .. } | Self::PowerFlow { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dynamics {
    Linear,
    Distflow,
}

impl FromStr for Dynamics {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "distflow" => Ok(Self::Distflow),
            _ => Err(format!("unknown dynamics '{s}' (expected linear or distflow)")),
        }
    }
}

impl fmt::Display for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Distflow => "distflow",
        })
    }
}

/// How much of the true network the prior set encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PriorMode {
    /// Norm ball and structural constraints only.
    Unknown,
    /// Lowest common ancestors among buses `1..=k`.
    Topo(usize),
    /// Exact entries `X_ij` for `i, j <= k`.
    Lines(usize),
    /// `X` itself.
    Known,
}

impl FromStr for PriorMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let num = |rest: &str| rest.parse::<usize>().map_err(|_| format!("bad prior '{s}'"));
        match s {
            "unknown" => Ok(Self::Unknown),
            "known" => Ok(Self::Known),
            _ if s.starts_with("topo-") => Ok(Self::Topo(num(&s[5..])?)),
            _ if s.starts_with("lines-") => Ok(Self::Lines(num(&s[6..])?)),
            _ => Err(format!("unknown prior '{s}' (expected unknown, topo-K, lines-K or known)")),
        }
    }
}

impl fmt::Display for PriorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Unknown => f.write_str("unknown"),
            Self::Topo(k) => write!(f, "topo-{k}"),
            Self::Lines(k) => write!(f, "lines-{k}"),
            Self::Known => f.write_str("known"),
        }
    }
}

/// Prior set around the true sensitivity matrix of `net`.
pub fn prior_for(
    net: &RadialNetwork,
    mode: PriorMode,
    alpha: f64,
    enforce_psd: bool,
) -> Result<PriorSpec, GridError> {
    let x = compute_sensitivity(net).x;
    match mode {
        PriorMode::Unknown => make_prior_set(&x, alpha, &[], &[], enforce_psd),
        PriorMode::Topo(k) => make_prior_set(&x, alpha, &topo_pins_first(net, k), &[], enforce_psd),
        PriorMode::Lines(k) => make_prior_set(&x, alpha, &[], &line_pins_first(&x, k), enforce_psd),
        PriorMode::Known => make_prior_set(&x, 0.0, &[], &[], enforce_psd),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub dynamics: Dynamics,
    pub horizon: usize,
    pub subsample_latest: usize,
    pub subsample_random: usize,
    pub seed: u64,
    pub reset_on_infeasible: bool,
    /// Give the controller the true noise bound (fixed `eta_hat`).
    pub known_eta: bool,
    /// Check the estimate against the full-trajectory set every step.
    pub audit_estimate: bool,
    /// Check the true model against the full-trajectory set every step.
    pub audit_truth: bool,
    pub pf_tol: f64,
    pub pf_max_iter: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            dynamics: Dynamics::Linear,
            horizon: 2000,
            subsample_latest: 20,
            subsample_random: 80,
            seed: 0,
            reset_on_infeasible: true,
            known_eta: false,
            audit_estimate: false,
            audit_truth: false,
            pf_tol: powerflow::DEFAULT_TOL,
            pf_max_iter: powerflow::DEFAULT_MAX_ITER,
        }
    }
}

/// Indices (ascending) of the `latest` most recent entries of a trajectory
/// of length `len` plus `random_count` uniform draws without replacement
/// from the rest.
pub fn subsample_indices(len: usize, latest: usize, random_count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= latest + random_count {
        return (0..len).collect();
    }
    let rest = len - latest;
    let mut picked: Vec<usize> = index::sample(rng, rest, random_count).into_iter().collect();
    picked.sort_unstable();
    picked.extend(rest..len);
    picked
}

pub fn subsample(trajectory: &[Observation], latest: usize, random_count: usize, seed: u64) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subsample_indices(trajectory.len(), latest, random_count, &mut rng)
        .into_iter()
        .map(|i| trajectory[i].clone())
        .collect()
}

/// What the controller did at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub oracle: OracleSolution,
    pub q_c: DVector<f64>,
    pub infeasible: bool,
    pub reset: bool,
    pub movement: f64,
}

/// Algorithm state that sees only measured voltages.
#[derive(Debug, Clone)]
pub struct OnlineController {
    cfg: ControllerConfig,
    prior: PriorSpec,
    estimate: ModelEstimate,
    chaser: ProjectionChaser,
    trajectory: Vec<Observation>,
    latest: usize,
    random: usize,
    reset_on_infeasible: bool,
    rng: ChaCha8Rng,
    q_c: DVector<f64>,
    pending: Option<(DVector<f64>, DVector<f64>)>,
    resets: usize,
    infeasible_events: usize,
    movement: f64,
}

impl OnlineController {
    pub fn new(
        cfg: ControllerConfig,
        prior: PriorSpec,
        initial: ModelEstimate,
        q_c0: DVector<f64>,
        ep: &EpisodeConfig,
    ) -> Result<Self, ControllerError> {
        cfg.validate().map_err(|e| ControllerError::Config(e.to_string()))?;
        let n = cfg.n();
        if prior.n() != n || initial.n() != n || q_c0.len() != n {
            return Err(ControllerError::Config("dimension mismatch between config, prior and estimate".into()));
        }
        Ok(Self {
            cfg,
            prior,
            estimate: initial,
            chaser: ProjectionChaser::new(),
            trajectory: Vec::new(),
            latest: ep.subsample_latest,
            random: ep.subsample_random,
            reset_on_infeasible: ep.reset_on_infeasible,
            rng: ChaCha8Rng::seed_from_u64(ep.seed ^ 0x5eed_c0de),
            q_c: q_c0,
            pending: None,
            resets: 0,
            infeasible_events: 0,
            movement: 0.0,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn estimate(&self) -> &ModelEstimate {
        &self.estimate
    }

    pub fn trajectory(&self) -> &[Observation] {
        &self.trajectory
    }

    pub fn q_c(&self) -> &DVector<f64> {
        &self.q_c
    }

    pub fn resets(&self) -> usize {
        self.resets
    }

    pub fn infeasible_events(&self) -> usize {
        self.infeasible_events
    }

    pub fn movement(&self) -> f64 {
        self.movement
    }

    /// Consistent set over the given observations.
    pub fn consistent_set(&self, observations: Vec<Observation>) -> ConsistentSetSpec {
        let set = build_consistent_set(self.prior.clone(), self.cfg.eta_bar, self.cfg.vpar_box.clone(), observations)
            .with_observed(self.cfg.observed.clone());
        match self.cfg.known_eta {
            Some(e) => set.with_fixed_eta(e),
            None => set,
        }
    }

    /// Consistent set over the whole trajectory since the last reset.
    pub fn full_set(&self) -> ConsistentSetSpec {
        self.consistent_set(self.trajectory.clone())
    }

    /// Chooses the action at state `v_now` (model update, then oracle).
    pub fn act(&mut self, v_now: &DVector<f64>, step: usize) -> Result<Decision, ControllerError> {
        let idx = subsample_indices(self.trajectory.len(), self.latest, self.random, &mut self.rng);
        let selected = idx.into_iter().map(|i| self.trajectory[i].clone()).collect();
        let set = self.consistent_set(selected);
        let delta = self.cfg.delta;
        let outcome = self
            .chaser
            .chase(&set, &self.estimate, delta)
            .map_err(|source| ControllerError::Projection { step, source })?;

        let (mut infeasible, mut reset, mut moved) = (false, false, 0.0);
        match outcome {
            ProjectionOutcome::Projected(est) => {
                moved = tri_delta_distance(&est, &self.estimate, delta);
                self.estimate = est;
            }
            ProjectionOutcome::Infeasible { .. } => {
                infeasible = true;
                self.infeasible_events += 1;
                if self.reset_on_infeasible {
                    reset = true;
                    self.resets += 1;
                    self.trajectory.clear();
                    let base = self.consistent_set(Vec::new());
                    if let ProjectionOutcome::Projected(est) = self
                        .chaser
                        .chase(&base, &self.estimate, delta)
                        .map_err(|source| ControllerError::Projection { step, source })?
                    {
                        moved = tri_delta_distance(&est, &self.estimate, delta);
                        self.estimate = est;
                    }
                }
            }
        }
        self.movement += moved;

        let oracle = solve_oracle(&self.cfg, &self.estimate, v_now, &self.q_c)
            .map_err(|source| ControllerError::Oracle { step, source })?;
        // Clip round-off so the applied injection never leaves its box.
        let mut q_next = &self.q_c + &oracle.u;
        for i in 0..q_next.len() {
            q_next[i] = q_next[i].clamp(self.cfg.q_min[i], self.cfg.q_max[i]);
        }
        let u = &q_next - &self.q_c;
        self.q_c = q_next.clone();
        self.pending = Some((v_now.clone(), u.clone()));
        let mut oracle = oracle;
        oracle.u = u;
        Ok(Decision { oracle, q_c: q_next, infeasible, reset, movement: moved })
    }

    /// Records the transition caused by the last action.
    pub fn observe(&mut self, v_next: &DVector<f64>) {
        if let Some((v_before, u)) = self.pending.take() {
            self.trajectory.push(Observation {
                v_before,
                v_after: v_next.clone(),
                u,
                q_c: self.q_c.clone(),
            });
        }
    }
}

/// True system: network (optionally swapped at a step), substation voltage
/// and exogenous injections `p(t)`, `q_e(t)` for `t = 0, 1, ...`.
#[derive(Debug, Clone)]
pub struct Plant {
    pub network: RadialNetwork,
    /// `(step, network)`: from that step on the second network is active.
    pub change: Option<(usize, RadialNetwork)>,
    pub v0: f64,
    pub p: Vec<DVector<f64>>,
    pub q_e: Vec<DVector<f64>>,
    models: Vec<SensitivityModel>,
}

impl Plant {
    pub fn new(
        network: RadialNetwork,
        change: Option<(usize, RadialNetwork)>,
        v0: f64,
        p: Vec<DVector<f64>>,
        q_e: Vec<DVector<f64>>,
    ) -> Result<Self, ControllerError> {
        let n = network.n();
        if p.len() != q_e.len() {
            return Err(ControllerError::Config("p and q_e series differ in length".into()));
        }
        if p.iter().chain(&q_e).any(|v| v.len() != n) {
            return Err(ControllerError::Config("series width differs from bus count".into()));
        }
        if let Some((_, net)) = &change {
            if net.n() != n {
                return Err(ControllerError::Config("topology change alters the bus count".into()));
            }
        }
        let mut models = vec![compute_sensitivity(&network)];
        if let Some((_, net)) = &change {
            models.push(compute_sensitivity(net));
        }
        Ok(Self { network, change, v0, p, q_e, models })
    }

    pub fn n(&self) -> usize {
        self.network.n()
    }

    /// Number of series rows.
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    fn active(&self, t: usize) -> usize {
        match &self.change {
            Some((at, _)) if t >= *at => 1,
            _ => 0,
        }
    }

    pub fn network_at(&self, t: usize) -> &RadialNetwork {
        match (&self.change, self.active(t)) {
            (Some((_, net)), 1) => net,
            _ => &self.network,
        }
    }

    pub fn model_at(&self, t: usize) -> &SensitivityModel {
        &self.models[self.active(t)]
    }

    /// Exogenous voltage `R p(t) + X q_e(t) + v0` under the network active at `t`.
    pub fn vpar(&self, t: usize) -> DVector<f64> {
        let m = self.model_at(t);
        &m.r * &self.p[t] + &m.x * &self.q_e[t] + DVector::from_element(self.n(), self.v0)
    }

    /// `max_t ||vpar(t) - vpar(t-1)||_inf` over `t = 1..=horizon`.
    pub fn eta_star(&self, horizon: usize) -> f64 {
        let horizon = horizon.min(self.len().saturating_sub(1));
        (1..=horizon).map(|t| (self.vpar(t) - self.vpar(t - 1)).amax()).fold(0.0, f64::max)
    }

    /// Exact per-bus range of `vpar` over `t = 0..=horizon`.
    pub fn vpar_box_linear(&self, horizon: usize) -> VparBox {
        let n = self.n();
        let mut lo = DVector::from_element(n, f64::INFINITY);
        let mut hi = DVector::from_element(n, f64::NEG_INFINITY);
        for t in 0..=horizon.min(self.len() - 1) {
            let v = self.vpar(t);
            lo = lo.inf(&v);
            hi = hi.sup(&v);
        }
        VparBox { lower: lo, upper: hi }
    }

    /// Range of the uncontrolled nonlinear voltages over `t = 0..=horizon`,
    /// widened by `padding` on both sides.
    pub fn vpar_box_distflow(&self, horizon: usize, padding: f64, tol: f64, max_iter: usize) -> Result<VparBox, ControllerError> {
        let n = self.n();
        let mut lo = DVector::from_element(n, f64::INFINITY);
        let mut hi = DVector::from_element(n, f64::NEG_INFINITY);
        for t in 0..=horizon.min(self.len() - 1) {
            let inj = InjectionProfile { p: self.p[t].clone(), q_e: self.q_e[t].clone(), q_c: DVector::zeros(n) };
            let sol = solve_distflow(self.network_at(t), &inj, self.v0, tol, max_iter)
                .map_err(|source| ControllerError::PowerFlow { step: t, source })?;
            lo = lo.inf(&sol.v);
            hi = hi.sup(&sol.v);
        }
        lo.add_scalar_mut(-padding);
        hi.add_scalar_mut(padding);
        Ok(VparBox { lower: lo, upper: hi })
    }
}

/// Per-step record. `v` is the state reached after the action, `v(t+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub v: DVector<f64>,
    pub u: DVector<f64>,
    pub q_c: DVector<f64>,
    pub xi: f64,
    pub k: f64,
    pub mistake: bool,
    pub observed_mistake: bool,
    /// Largest limit violation over all buses (0 when inside).
    pub violation: f64,
    /// `tri_norm(X_hat - X*)` for the estimate used at this step.
    pub model_error: f64,
    pub eta_hat: f64,
    pub infeasible: bool,
    pub reset: bool,
    pub movement: f64,
    pub pf_residual: Option<f64>,
    /// Violation of the full-trajectory set by the estimate, when audited.
    pub estimate_violation: Option<f64>,
    /// Violation of the full-trajectory set by the true model, when audited.
    pub truth_violation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mistakes: usize,
    pub avg_violation: f64,
    pub max_violation: f64,
}

/// Mistakes are steps with any bus outside `[v_min, v_max]`; the averages
/// run over violating `(bus, step)` pairs.
pub fn metrics(trace: &[DVector<f64>], v_min: &DVector<f64>, v_max: &DVector<f64>, mask: Option<&[bool]>) -> Metrics {
    let mut mistakes = 0;
    let (mut sum, mut count, mut worst) = (0.0, 0usize, 0.0f64);
    for v in trace {
        let mut any = false;
        for i in 0..v.len() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let excess = (v[i] - v_max[i]).max(v_min[i] - v[i]);
            if excess > 0.0 {
                any = true;
                sum += excess;
                count += 1;
                worst = worst.max(excess);
            }
        }
        mistakes += usize::from(any);
    }
    Metrics { mistakes, avg_violation: if count > 0 { sum / count as f64 } else { 0.0 }, max_violation: worst }
}

/// Competitive ratio of greedy projection in `m` dimensions,
/// `pi (m - 1) m^(m/2)`. Overflows to `+inf` for large `m`.
pub fn gamma_proj(m: usize) -> f64 {
    let m = m as f64;
    std::f64::consts::PI * (m - 1.0) * m.powf(m / 2.0)
}

/// `2 gamma_proj(m) diam / rho + 1`.
pub fn mistake_bound(diam: f64, rho: f64, m: usize) -> f64 {
    2.0 * gamma_proj(m) / rho * diam + 1.0
}

/// Diameter of `prior x [0, eta_bar]` in the `tri_delta` norm (the prior
/// alone when the noise bound is known).
pub fn parameter_diameter(prior: &PriorSpec, delta: f64, eta_bar: f64, known_eta: bool) -> f64 {
    let dx = prior.diameter();
    if known_eta {
        dx
    } else {
        (dx * dx + (delta * eta_bar).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub steps: Vec<StepRecord>,
    pub metrics: Metrics,
    pub observed_metrics: Metrics,
    pub movement_sum: f64,
    pub reset_events: usize,
    pub infeasible_events: usize,
    pub eta_star: f64,
    pub rho: f64,
    pub diameter: f64,
    pub param_dimension: usize,
    pub mistake_bound: f64,
    /// Steps at which the estimate left the full-trajectory set by more than
    /// the membership tolerance (audited episodes only).
    pub estimate_outside_full_set: Option<usize>,
    pub truth_outside_full_set: Option<usize>,
    pub max_pf_residual: Option<f64>,
    pub final_estimate: ModelEstimate,
    /// First step after which no mistake occurs (`None` if the last step is one).
    pub settled_at: Option<usize>,
}

/// Runs the online controller against `plant` for `ep.horizon` steps.
///
/// Step `t` uses state `v(t)` and previous injection `q_c(t-1)`; the plant
/// then produces `v(t+1) = X* q_c(t) + vpar(t)` (linear) or the branch-flow
/// solution at `p(t), q_e(t), q_c(t)`. Mistakes are flagged on `v(t+1)`.
pub fn run_episode(
    plant: &Plant,
    cfg: &ControllerConfig,
    prior: &PriorSpec,
    initial: &ModelEstimate,
    ep: &EpisodeConfig,
) -> Result<EpisodeResult, ControllerError> {
    let n = plant.n();
    let horizon = ep.horizon;
    if horizon == 0 {
        return Err(ControllerError::Config("horizon must be at least 1".into()));
    }
    if plant.len() < horizon + 1 {
        return Err(ControllerError::SeriesTooShort { needed: horizon + 1, got: plant.len() });
    }
    let eta_star = plant.eta_star(horizon);
    let mut cfg = cfg.clone();
    let mut initial = initial.clone();
    if ep.known_eta {
        cfg.known_eta = Some(eta_star);
        initial.eta_hat = eta_star;
    }
    let mut ctl = OnlineController::new(cfg.clone(), prior.clone(), initial, DVector::zeros(n), ep)?;

    let simulate = |t: usize, q_c: &DVector<f64>| -> Result<(DVector<f64>, Option<f64>), ControllerError> {
        match ep.dynamics {
            Dynamics::Linear => {
                // v(t+1) = v(t) + X u(t) + w(t), written in closed form.
                Ok((&plant.model_at(t).x * q_c + plant.vpar(t), None))
            }
            Dynamics::Distflow => {
                let inj = InjectionProfile { p: plant.p[t].clone(), q_e: plant.q_e[t].clone(), q_c: q_c.clone() };
                let sol = solve_distflow(plant.network_at(t), &inj, plant.v0, ep.pf_tol, ep.pf_max_iter)
                    .map_err(|source| ControllerError::PowerFlow { step: t, source })?;
                Ok((sol.v, Some(sol.residual)))
            }
        }
    };

    let (mut v, _) = simulate(0, &DVector::zeros(n))?;
    let mut steps = Vec::with_capacity(horizon);
    let truth_eta = cfg.known_eta.unwrap_or(eta_star);
    let mut truth_worst: f64 = 0.0;
    let mut traj_len = 0usize;

    for t in 1..=horizon {
        let d = ctl.act(&v, t)?;
        if d.reset {
            truth_worst = 0.0;
            traj_len = 0;
        }
        let est = ctl.estimate().clone();
        let (v_next, pf_residual) = simulate(t, &d.q_c)?;
        ctl.observe(&v_next);
        traj_len += 1;

        let mut excess: f64 = 0.0;
        let mut observed_excess: f64 = 0.0;
        for i in 0..n {
            let e = (v_next[i] - cfg.v_max[i]).max(cfg.v_min[i] - v_next[i]);
            excess = excess.max(e);
            if cfg.observed[i] {
                observed_excess = observed_excess.max(e);
            }
        }

        let truth_model = plant.model_at(t);
        let estimate_violation = ep.audit_estimate.then(|| geometry::max_violation(&est, &ctl.full_set()));
        let truth_violation = if ep.audit_truth {
            // The set only gains one observation per step, so the violation
            // of a fixed point is a running maximum.
            let truth = ModelEstimate::new(truth_model.x.clone(), truth_eta);
            let one = ctl.consistent_set(ctl.trajectory()[traj_len - 1..].to_vec());
            truth_worst = truth_worst.max(geometry::max_violation(&truth, &one));
            Some(truth_worst)
        } else {
            None
        };

        steps.push(StepRecord {
            t,
            v: v_next.clone(),
            u: d.oracle.u.clone(),
            q_c: d.q_c.clone(),
            xi: d.oracle.xi,
            k: d.oracle.k,
            mistake: excess > 0.0,
            observed_mistake: observed_excess > 0.0,
            violation: excess.max(0.0),
            model_error: tri_norm_unchecked(&(&est.x_hat - &truth_model.x)),
            eta_hat: est.eta_hat,
            infeasible: d.infeasible,
            reset: d.reset,
            movement: d.movement,
            pf_residual,
            estimate_violation,
            truth_violation,
        });
        v = v_next;
    }

    let trace: Vec<DVector<f64>> = steps.iter().map(|s| s.v.clone()).collect();
    let m = metrics(&trace, &cfg.v_min, &cfg.v_max, None);
    let om = metrics(&trace, &cfg.v_min, &cfg.v_max, Some(&cfg.observed));
    let known = cfg.known_eta.is_some();
    let dim = geometry::param_dimension(n, known);
    let diameter = parameter_diameter(prior, cfg.delta, cfg.eta_bar, known);
    let rho = cfg.rho();
    let count_outside = |f: fn(&StepRecord) -> Option<f64>| {
        steps.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| {
            v.iter().filter(|&&x| x > geometry::MEMBERSHIP_TOL).count()
        })
    };
    let settled_at = match steps.iter().rposition(|s| s.mistake) {
        None => Some(0),
        Some(i) if i + 1 < steps.len() => Some(steps[i].t),
        Some(_) => None,
    };
    Ok(EpisodeResult {
        metrics: m,
        observed_metrics: om,
        movement_sum: ctl.movement(),
        reset_events: ctl.resets(),
        infeasible_events: ctl.infeasible_events(),
        eta_star,
        rho,
        diameter,
        param_dimension: dim,
        mistake_bound: mistake_bound(diameter, rho, dim),
        estimate_outside_full_set: count_outside(|s| s.estimate_violation),
        truth_outside_full_set: count_outside(|s| s.truth_violation),
        max_pf_residual: steps.iter().filter_map(|s| s.pf_residual).reduce(f64::max),
        final_estimate: ctl.estimate().clone(),
        settled_at,
        steps,
    })
}
