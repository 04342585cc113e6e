//! Parameter-space geometry: the weighted norm on `(X, eta)` pairs, the set
//! of models consistent with an observed trajectory, and the projection
//! chaser that keeps the estimate inside it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::conic::{self, Backend, ConicProgram, SolveOptions, SolveStatus};
use crate::grid::PriorSpec;

/// Asymmetry above which a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Default membership tolerance.
pub const MEMBERSHIP_TOL: f64 = 1e-6;
/// Minimum phase-one violation that counts as an empty set.
pub const INFEASIBLE_VIOLATION: f64 = 1e-6;
/// Most negative eigenvalue accepted as positive semidefinite.
const PSD_TOL: f64 = 1e-9;
const MAX_ROUNDS: usize = 100;
/// Rows this close to active at the starting point enter the first solve.
const ROW_MARGIN: f64 = 1e-6;
/// Relative violation at which a left-out row joins the working set.
const ROW_ADD_TOL: f64 = 1e-10;
/// Violation below which the starting point is returned unchanged.
const INSIDE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not symmetric (asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("delta must be positive, got {0}")]
    NonPositiveDelta(f64),
    #[error("vpar box has lower > upper at bus {0}")]
    InvertedBox(usize),
    #[error("projection solver failed: {0}")]
    Solver(String),
}

/// A candidate model `(X_hat, eta_hat)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEstimate {
    pub x_hat: DMatrix<f64>,
    pub eta_hat: f64,
}

impl ModelEstimate {
    pub fn new(x_hat: DMatrix<f64>, eta_hat: f64) -> Self {
        Self { x_hat, eta_hat }
    }

    pub fn n(&self) -> usize {
        self.x_hat.nrows()
    }

    /// `self - other`, as an offset in parameter space.
    pub fn offset_from(&self, other: &ModelEstimate) -> ModelEstimate {
        ModelEstimate::new(&self.x_hat - &other.x_hat, self.eta_hat - other.eta_hat)
    }
}

fn asymmetry(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((x[(i, j)] - x[(j, i)]).abs());
        }
    }
    worst
}

/// Euclidean norm of the upper triangle (diagonal included).
pub fn tri_norm(x: &DMatrix<f64>) -> Result<f64, GeometryError> {
    if x.nrows() != x.ncols() {
        return Err(GeometryError::LengthMismatch { expected: x.nrows(), got: x.ncols() });
    }
    let a = asymmetry(x);
    if a > SYMMETRY_TOL {
        return Err(GeometryError::Asymmetric(a));
    }
    Ok(tri_norm_unchecked(x))
}

/// [`tri_norm`] without the symmetry check; reads the upper triangle only.
pub fn tri_norm_unchecked(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in i..n {
            s += x[(i, j)] * x[(i, j)];
        }
    }
    s.sqrt()
}

/// `sqrt(delta^2 eta^2 + tri_norm(X)^2)` for an offset `(X, eta)`.
pub fn tri_delta_norm(offset: &ModelEstimate, delta: f64) -> f64 {
    let t = tri_norm_unchecked(&offset.x_hat);
    (delta * delta * offset.eta_hat * offset.eta_hat + t * t).sqrt()
}

/// `tri_delta_norm(a - b)`.
pub fn tri_delta_distance(a: &ModelEstimate, b: &ModelEstimate, delta: f64) -> f64 {
    tri_delta_norm(&a.offset_from(b), delta)
}

/// Number of coordinates of the parameter space for `n` buses.
pub fn param_dimension(n: usize, known_eta: bool) -> usize {
    n * (n + 1) / 2 + usize::from(!known_eta)
}

/// Position of entry `(i, j)`, `i <= j`, in the row-major upper triangle.
pub fn tri_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j < n);
    i * n - i * i.saturating_sub(1) / 2 + (j - i)
}

/// Upper-triangle entries followed by `delta * eta`; an isometry from the
/// `tri_delta` norm onto the Euclidean norm.
pub fn vectorize(est: &ModelEstimate, delta: f64) -> DVector<f64> {
    let n = est.n();
    let mut v = Vec::with_capacity(param_dimension(n, false));
    for i in 0..n {
        for j in i..n {
            v.push(est.x_hat[(i, j)]);
        }
    }
    v.push(delta * est.eta_hat);
    DVector::from_vec(v)
}

/// Inverse of [`vectorize`].
pub fn devectorize(v: &DVector<f64>, n: usize, delta: f64) -> Result<ModelEstimate, GeometryError> {
    let m = param_dimension(n, false);
    if v.len() != m {
        return Err(GeometryError::LengthMismatch { expected: m, got: v.len() });
    }
    if !(delta > 0.0) {
        return Err(GeometryError::NonPositiveDelta(delta));
    }
    let mut x = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            x[(i, j)] = v[k];
            x[(j, i)] = v[k];
            k += 1;
        }
    }
    Ok(ModelEstimate::new(x, v[k] / delta))
}

/// One step of the trajectory: `(v(t), v(t+1), u(t), q_c(t))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub v_before: DVector<f64>,
    pub v_after: DVector<f64>,
    pub u: DVector<f64>,
    pub q_c: DVector<f64>,
}

/// Per-bus bounds on the exogenous voltage component.
#[derive(Debug, Clone, PartialEq)]
pub struct VparBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl VparBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self, GeometryError> {
        if lower.len() != upper.len() {
            return Err(GeometryError::LengthMismatch { expected: lower.len(), got: upper.len() });
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] <= upper[i])) {
            return Err(GeometryError::InvertedBox(i + 1));
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn n(&self) -> usize {
        self.lower.len()
    }
}

/// The set of `(X_hat, eta_hat)` consistent with the prior and a list of
/// observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistentSetSpec {
    pub prior: PriorSpec,
    pub eta_max: f64,
    /// When set, `eta_hat` is pinned to this value (known noise bound).
    pub eta_fixed: Option<f64>,
    pub observations: Vec<Observation>,
    pub vpar_box: VparBox,
    /// Buses whose voltages enter the observation constraints.
    pub observed: Vec<bool>,
}

impl ConsistentSetSpec {
    pub fn prior_only(prior: PriorSpec, eta_max: f64, vpar_box: VparBox) -> Self {
        build_consistent_set(prior, eta_max, vpar_box, Vec::new())
    }

    pub fn n(&self) -> usize {
        self.prior.n()
    }

    pub fn with_fixed_eta(mut self, eta: f64) -> Self {
        self.eta_fixed = Some(eta);
        self
    }

    pub fn with_observed(mut self, observed: Vec<bool>) -> Self {
        self.observed = observed;
        self
    }

    fn check_dimensions(&self) -> Result<(), GeometryError> {
        let n = self.n();
        let lens = [self.vpar_box.n(), self.observed.len()];
        for got in lens {
            if got != n {
                return Err(GeometryError::LengthMismatch { expected: n, got });
            }
        }
        for o in &self.observations {
            for got in [o.v_before.len(), o.v_after.len(), o.u.len(), o.q_c.len()] {
                if got != n {
                    return Err(GeometryError::LengthMismatch { expected: n, got });
                }
            }
        }
        Ok(())
    }
}

pub fn build_consistent_set(
    prior: PriorSpec,
    eta_max: f64,
    vpar_box: VparBox,
    observations: Vec<Observation>,
) -> ConsistentSetSpec {
    let n = prior.n();
    ConsistentSetSpec {
        prior,
        eta_max,
        eta_fixed: None,
        observations,
        vpar_box,
        observed: vec![true; n],
    }
}

/// Largest violation of any constraint of `set` at `est` (0 when inside).
pub fn max_violation(est: &ModelEstimate, set: &ConsistentSetSpec) -> f64 {
    let n = set.n();
    let x = &est.x_hat;
    let eta = est.eta_hat;
    let mut worst = set.prior.max_violation(x);
    worst = worst.max(-eta).max(eta - set.eta_max);
    if let Some(e) = set.eta_fixed {
        worst = worst.max((eta - e).abs());
    }
    for o in &set.observations {
        let xu = x * &o.u;
        let xq = x * &o.q_c;
        for i in (0..n).filter(|&i| set.observed[i]) {
            let resid = o.v_after[i] - o.v_before[i] - xu[i];
            worst = worst.max(resid.abs() - eta);
            let vpar = o.v_after[i] - xq[i];
            worst = worst.max(set.vpar_box.lower[i] - vpar).max(vpar - set.vpar_box.upper[i]);
        }
    }
    worst
}

pub fn membership(est: &ModelEstimate, set: &ConsistentSetSpec, tol: f64) -> bool {
    est.n() == set.n() && max_violation(est, set) <= tol
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProjectionOutcome {
    Projected(ModelEstimate),
    /// The set is empty. `min_violation` is the phase-one optimum when the
    /// decision came from a feasibility solve rather than a certificate.
    Infeasible { min_violation: Option<f64> },
}

/// Linear cut `v' X v >= 0` in upper-triangle coordinates, as `<=` terms.
fn psd_cut(n: usize, v: &DVector<f64>) -> Vec<(usize, f64)> {
    let mut terms = Vec::new();
    for i in 0..n {
        for j in i..n {
            let c = if i == j { v[i] * v[i] } else { 2.0 * v[i] * v[j] };
            if c != 0.0 {
                terms.push((tri_index(n, i, j), -c));
            }
        }
    }
    terms
}

fn projection_program(
    set: &ConsistentSetSpec,
    from: &ModelEstimate,
    delta: f64,
    cuts: &[Vec<(usize, f64)>],
    rows: &[&conic::Row],
) -> ConicProgram {
    let n = set.n();
    let nt = n * (n + 1) / 2;
    let eta = nt;
    let mut p = ConicProgram::new(nt + 1);
    let idx = |i: usize, j: usize| tri_index(n, i.min(j), i.max(j));

    for i in 0..n {
        for j in i..n {
            let k = idx(i, j);
            p.add_quadratic(k, k, 1.0);
            p.add_linear(k, -from.x_hat[(i, j)]);
            p.add_constant(0.5 * from.x_hat[(i, j)].powi(2));
        }
    }
    let d2 = delta * delta;
    p.add_quadratic(eta, eta, d2);
    p.add_linear(eta, -d2 * from.eta_hat);
    p.add_constant(0.5 * d2 * from.eta_hat.powi(2));

    // Prior.
    let prior = &set.prior;
    let radius = prior.radius();
    if radius > 0.0 {
        let t = conic::Affine::constant(radius);
        let mut xs = Vec::with_capacity(nt);
        for i in 0..n {
            for j in i..n {
                xs.push(conic::Affine::new(vec![(idx(i, j), 1.0)], -prior.center[(i, j)]));
            }
        }
        p.add_soc(t, xs);
    } else {
        for i in 0..n {
            for j in i..n {
                p.add_eq(vec![(idx(i, j), 1.0)], prior.center[(i, j)]);
            }
        }
    }
    for i in 0..n {
        for j in i..n {
            p.set_bounds(idx(i, j), 0.0, f64::INFINITY);
            if i != j {
                p.add_le(vec![(idx(i, j), 1.0), (idx(i, i), -1.0)], 0.0);
                p.add_le(vec![(idx(i, j), 1.0), (idx(j, j), -1.0)], 0.0);
            }
        }
    }
    for pin in &prior.topo_pins {
        let k = idx(pin.i - 1, pin.j - 1);
        if pin.k == 0 {
            p.add_eq(vec![(k, 1.0)], 0.0);
        } else {
            p.add_eq(vec![(k, 1.0), (idx(pin.k - 1, pin.k - 1), -1.0)], 0.0);
        }
    }
    for pin in &prior.line_pins {
        p.add_eq(vec![(idx(pin.i - 1, pin.j - 1), 1.0)], pin.value);
    }
    for cut in cuts {
        p.add_le(cut.clone(), 0.0);
    }

    match set.eta_fixed {
        Some(e) => p.set_bounds(eta, e, e),
        None => p.set_bounds(eta, 0.0, set.eta_max),
    }

    for row in rows {
        p.add_le(row.terms.clone(), row.rhs);
    }
    p
}

/// Observation constraints as `<=` rows over `(upper triangle, eta)`:
/// `|v' - v - X u|_i <= eta` and `lo_i <= v' - X q_c <= hi_i` for every
/// observed bus.
fn observation_rows(set: &ConsistentSetSpec) -> Vec<conic::Row> {
    let n = set.n();
    let eta = n * (n + 1) / 2;
    let idx = |i: usize, j: usize| tri_index(n, i.min(j), i.max(j));
    let mut rows = Vec::new();
    for o in &set.observations {
        for i in (0..n).filter(|&i| set.observed[i]) {
            let dv = o.v_after[i] - o.v_before[i];
            let xu: Vec<(usize, f64)> =
                (0..n).filter(|&j| o.u[j] != 0.0).map(|j| (idx(i, j), o.u[j])).collect();
            let mut lo: Vec<(usize, f64)> = xu.iter().map(|&(k, c)| (k, -c)).collect();
            lo.push((eta, -1.0));
            rows.push(conic::Row::new(lo, -dv));
            let mut hi = xu;
            hi.push((eta, -1.0));
            rows.push(conic::Row::new(hi, dv));

            let xq: Vec<(usize, f64)> =
                (0..n).filter(|&j| o.q_c[j] != 0.0).map(|j| (idx(i, j), o.q_c[j])).collect();
            let (lb, ub) = (set.vpar_box.lower[i], set.vpar_box.upper[i]);
            if ub.is_finite() {
                // v' - X q <= ub  <=>  -X q <= ub - v'
                let terms = xq.iter().map(|&(k, c)| (k, -c)).collect();
                rows.push(conic::Row::new(terms, ub - o.v_after[i]));
            }
            if lb.is_finite() {
                rows.push(conic::Row::new(xq, o.v_after[i] - lb));
            }
        }
    }
    rows
}

fn row_violation(row: &conic::Row, z: &[f64]) -> f64 {
    row.lhs(z) - row.rhs
}

fn unpack(z: &[f64], n: usize) -> ModelEstimate {
    let mut x = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = z[tri_index(n, i, j)];
            x[(i, j)] = v;
            x[(j, i)] = v;
        }
    }
    ModelEstimate::new(x, z[n * (n + 1) / 2])
}

/// Picks the next estimate inside a consistent set.
pub trait Chaser {
    fn chase(
        &mut self,
        set: &ConsistentSetSpec,
        from: &ModelEstimate,
        delta: f64,
    ) -> Result<ProjectionOutcome, GeometryError>;
}

/// Greedy chaser: the closest point of the set in the `tri_delta` norm.
///
/// Positive semidefiniteness is enforced with cutting planes `v'Xv >= 0`
/// taken from negative eigenvectors. The cuts are valid for every PSD
/// matrix, so the pool is kept across calls.
#[derive(Debug, Clone)]
pub struct ProjectionChaser {
    pub options: SolveOptions,
    cuts: Vec<Vec<(usize, f64)>>,
    cut_dim: usize,
    solves: usize,
}

impl Default for ProjectionChaser {
    fn default() -> Self {
        Self::new()
    }
}

impl ProjectionChaser {
    pub fn new() -> Self {
        Self {
            options: SolveOptions { feas_tol: 1e-9, opt_tol: 1e-12, ..SolveOptions::default() },
            cuts: Vec::new(),
            cut_dim: 0,
            solves: 0,
        }
    }

    pub fn with_options(options: SolveOptions) -> Self {
        Self { options, ..Self::new() }
    }

    /// Number of conic solves issued so far.
    pub fn solves(&self) -> usize {
        self.solves
    }

    fn solve_once(&mut self, prog: &ConicProgram) -> Result<Option<Vec<f64>>, GeometryError> {
        self.solves += 1;
        let first = conic::solve(prog, &self.options);
        match first.status {
            SolveStatus::Optimal => return Ok(Some(first.x)),
            SolveStatus::Infeasible => match first.min_violation {
                None => return Ok(None),
                Some(v) if v >= INFEASIBLE_VIOLATION => return Ok(None),
                Some(_) => {}
            },
            SolveStatus::MaxIter | SolveStatus::NumericalFailure => {}
        }
        // Retry on the other backend, then accept any point that satisfies
        // the program at membership tolerance.
        let other = match self.options.backend {
            Backend::Interior => Backend::Admm,
            Backend::Admm => Backend::Interior,
        };
        let second = conic::solve(prog, &SolveOptions { backend: other, ..self.options });
        if second.status == SolveStatus::Optimal {
            return Ok(Some(second.x));
        }
        for cand in [&first, &second] {
            if cand.x.len() == prog.num_vars() && prog.max_violation(&cand.x) <= MEMBERSHIP_TOL {
                return Ok(Some(cand.x.clone()));
            }
        }
        if let Some(v) = first.min_violation.or(second.min_violation) {
            if v >= INFEASIBLE_VIOLATION {
                return Ok(None);
            }
        }
        Err(GeometryError::Solver(format!("{:?} / {:?}", first.status, second.status)))
    }
}

impl Chaser for ProjectionChaser {
    /// Observation rows enter through a working set: the program is solved
    /// with the rows violated so far and re-solved whenever the solution
    /// violates a row left out. The final point satisfies every row, so it
    /// is the projection onto the full set.
    fn chase(
        &mut self,
        set: &ConsistentSetSpec,
        from: &ModelEstimate,
        delta: f64,
    ) -> Result<ProjectionOutcome, GeometryError> {
        if !(delta > 0.0) {
            return Err(GeometryError::NonPositiveDelta(delta));
        }
        let n = set.n();
        if from.n() != n {
            return Err(GeometryError::LengthMismatch { expected: n, got: from.n() });
        }
        set.check_dimensions()?;
        let a = asymmetry(&from.x_hat);
        if a > SYMMETRY_TOL {
            return Err(GeometryError::Asymmetric(a));
        }
        if self.cut_dim != n {
            self.cuts.clear();
            self.cut_dim = n;
        }
        // The projection of a member is itself.
        if max_violation(from, set) <= INSIDE_TOL {
            return Ok(ProjectionOutcome::Projected(from.clone()));
        }

        let rows = observation_rows(set);
        let mut z0 = vectorize(from, 1.0);
        z0[n * (n + 1) / 2] = from.eta_hat;
        let mut active: Vec<bool> =
            rows.iter().map(|r| row_violation(r, z0.as_slice()) > -ROW_MARGIN).collect();

        let psd = set.prior.enforce_psd && n > 1;
        for _ in 0..MAX_ROUNDS {
            let selected: Vec<&conic::Row> =
                rows.iter().zip(&active).filter(|(_, &a)| a).map(|(r, _)| r).collect();
            let cuts: &[Vec<(usize, f64)>] = if psd { &self.cuts } else { &[] };
            let prog = projection_program(set, from, delta, cuts, &selected);
            let Some(z) = self.solve_once(&prog)? else {
                return Ok(ProjectionOutcome::Infeasible { min_violation: None });
            };

            let mut added = false;
            for (k, r) in rows.iter().enumerate() {
                if !active[k] && row_violation(r, &z) > ROW_ADD_TOL * r.rhs.abs().max(1.0) {
                    active[k] = true;
                    added = true;
                }
            }
            let est = unpack(&z, n);
            if psd {
                let eig = SymmetricEigen::new(est.x_hat.clone());
                for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
                    if lambda < -PSD_TOL {
                        let v = eig.eigenvectors.column(k).into_owned();
                        self.cuts.push(psd_cut(n, &v));
                        added = true;
                    }
                }
            }
            if !added {
                return Ok(ProjectionOutcome::Projected(est));
            }
        }
        Err(GeometryError::Solver("working set or semidefinite cuts did not converge".into()))
    }
}

/// Projects `from` onto `set` in the `tri_delta` norm.
pub fn project(
    set: &ConsistentSetSpec,
    from: &ModelEstimate,
    delta: f64,
) -> Result<ProjectionOutcome, GeometryError> {
    ProjectionChaser::new().chase(set, from, delta)
}
