//! Small convex-program layer shared by the model chaser and the control
//! oracle: a quadratic objective with linear equalities, linear
//! inequalities, variable bounds and second-order cone constraints.
//!
//! Two backends sit behind [`solve`]: an interior-point method (Clarabel)
//! and an in-repo operator-splitting method ([`admm`]).

pub mod admm;
mod interior;

use serde::{Deserialize, Serialize};

/// `sum(coef * z[var]) + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Affine {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Affine {
    pub fn new(terms: Vec<(usize, f64)>, constant: f64) -> Self {
        Self { terms, constant }
    }

    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn var(i: usize) -> Self {
        Self { terms: vec![(i, 1.0)], constant: 0.0 }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, a)| a * z[i]).sum::<f64>() + self.constant
    }
}

/// Linear row `sum(coef * z[var]) (= or <=) rhs`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Row {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl Row {
    pub fn new(terms: Vec<(usize, f64)>, rhs: f64) -> Self {
        Self { terms, rhs }
    }

    pub fn lhs(&self, z: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, a)| a * z[i]).sum()
    }
}

/// `|| (x_1, ..., x_k) ||_2 <= t`, all entries affine in `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocBlock {
    pub t: Affine,
    pub x: Vec<Affine>,
}

impl SocBlock {
    pub fn violation(&self, z: &[f64]) -> f64 {
        let norm = self.x.iter().map(|a| a.eval(z).powi(2)).sum::<f64>().sqrt();
        (norm - self.t.eval(z)).max(0.0)
    }
}

/// `minimize 0.5 z'Pz + c'z + c0` subject to the stored constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct ConicProgram {
    num_vars: usize,
    /// Upper-triangle entries `(row, col, value)` of the symmetric `P`.
    quad: Vec<(usize, usize, f64)>,
    linear: Vec<f64>,
    constant: f64,
    equalities: Vec<Row>,
    inequalities: Vec<Row>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    socs: Vec<SocBlock>,
}

impl ConicProgram {
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            quad: Vec::new(),
            linear: vec![0.0; num_vars],
            constant: 0.0,
            equalities: Vec::new(),
            inequalities: Vec::new(),
            lower: vec![f64::NEG_INFINITY; num_vars],
            upper: vec![f64::INFINITY; num_vars],
            socs: Vec::new(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    /// Adds `value` to both `P_ij` and `P_ji` (once when `i == j`).
    pub fn add_quadratic(&mut self, i: usize, j: usize, value: f64) {
        assert!(i < self.num_vars && j < self.num_vars, "variable index out of range");
        if value != 0.0 {
            self.quad.push((i.min(j), i.max(j), value));
        }
    }

    pub fn add_linear(&mut self, i: usize, value: f64) {
        self.linear[i] += value;
    }

    pub fn add_constant(&mut self, value: f64) {
        self.constant += value;
    }

    pub fn add_eq(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        self.check_terms(&terms);
        self.equalities.push(Row::new(terms, rhs));
    }

    pub fn add_le(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        self.check_terms(&terms);
        self.inequalities.push(Row::new(terms, rhs));
    }

    pub fn set_bounds(&mut self, i: usize, lower: f64, upper: f64) {
        self.lower[i] = lower;
        self.upper[i] = upper;
    }

    pub fn add_soc(&mut self, t: Affine, x: Vec<Affine>) {
        self.check_terms(&t.terms);
        for a in &x {
            self.check_terms(&a.terms);
        }
        self.socs.push(SocBlock { t, x });
    }

    fn check_terms(&self, terms: &[(usize, f64)]) {
        assert!(terms.iter().all(|&(i, _)| i < self.num_vars), "variable index out of range");
    }

    pub fn equalities(&self) -> &[Row] {
        &self.equalities
    }

    pub fn inequalities(&self) -> &[Row] {
        &self.inequalities
    }

    pub fn socs(&self) -> &[SocBlock] {
        &self.socs
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lower, &self.upper)
    }

    pub fn linear(&self) -> &[f64] {
        &self.linear
    }

    pub fn quad_entries(&self) -> &[(usize, usize, f64)] {
        &self.quad
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let mut v = self.constant;
        for (i, &c) in self.linear.iter().enumerate() {
            v += c * z[i];
        }
        for &(i, j, p) in &self.quad {
            if i == j {
                v += 0.5 * p * z[i] * z[i];
            } else {
                v += p * z[i] * z[j];
            }
        }
        v
    }

    /// Largest absolute violation of any constraint at `z`.
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for r in &self.equalities {
            worst = worst.max((r.lhs(z) - r.rhs).abs());
        }
        for r in &self.inequalities {
            worst = worst.max(r.lhs(z) - r.rhs);
        }
        for ((lo, hi), zi) in self.lower.iter().zip(&self.upper).zip(z) {
            worst = worst.max(lo - zi).max(zi - hi);
        }
        for s in &self.socs {
            worst = worst.max(s.violation(z));
        }
        worst
    }

    /// Violation divided by `1 + scale`, where `scale` is the magnitude of
    /// the data and the point. Matches the absolute plus relative stopping
    /// tests of the backends.
    pub fn scaled_residual(&self, z: &[f64]) -> f64 {
        self.max_violation(z) / (1.0 + self.data_scale(z))
    }

    fn data_scale(&self, z: &[f64]) -> f64 {
        let mut scale: f64 = 0.0;
        for r in self.equalities.iter().chain(&self.inequalities) {
            scale = scale.max(r.rhs.abs());
        }
        for ((&lo, &hi), zi) in self.lower.iter().zip(&self.upper).zip(z) {
            for b in [lo, hi] {
                if b.is_finite() {
                    scale = scale.max(b.abs());
                }
            }
            scale = scale.max(zi.abs());
        }
        for s in &self.socs {
            scale = scale.max(s.t.constant.abs());
            for a in &s.x {
                scale = scale.max(a.constant.abs());
            }
        }
        scale
    }

    /// The phase-one program `min s` over `(z, s)` with every inequality,
    /// bound and cone constraint relaxed by `s >= 0`. Equalities stay hard.
    pub fn feasibility_phase(&self) -> ConicProgram {
        let s = self.num_vars;
        let mut p = ConicProgram::new(self.num_vars + 1);
        p.linear[s] = 1.0;
        p.lower[s] = 0.0;
        p.equalities = self.equalities.clone();
        for r in &self.inequalities {
            let mut terms = r.terms.clone();
            terms.push((s, -1.0));
            p.inequalities.push(Row::new(terms, r.rhs));
        }
        for i in 0..self.num_vars {
            if self.lower[i].is_finite() {
                p.inequalities.push(Row::new(vec![(i, -1.0), (s, -1.0)], -self.lower[i]));
            }
            if self.upper[i].is_finite() {
                p.inequalities.push(Row::new(vec![(i, 1.0), (s, -1.0)], self.upper[i]));
            }
        }
        for b in &self.socs {
            let mut t = b.t.clone();
            t.terms.push((s, 1.0));
            p.socs.push(SocBlock { t, x: b.x.clone() });
        }
        p
    }
}

/// Cone of a contiguous block of standard-form rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ConeBlock {
    Zero(usize),
    Nonneg(usize),
    Soc(usize),
}

/// `minimize 0.5 z'Pz + q'z` s.t. `A z + s = b`, `s` in a product of cones.
pub(crate) struct StandardForm {
    pub n: usize,
    /// Upper-triangle entries of `P`, duplicates not yet merged.
    pub p_upper: Vec<(usize, usize, f64)>,
    pub q: Vec<f64>,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub b: Vec<f64>,
    pub cones: Vec<ConeBlock>,
}

impl StandardForm {
    pub fn from_program(prog: &ConicProgram) -> Self {
        let n = prog.num_vars;
        let mut rows = Vec::new();
        let mut b = Vec::new();
        let mut cones = Vec::new();

        for r in &prog.equalities {
            rows.push(r.terms.clone());
            b.push(r.rhs);
        }
        for i in 0..n {
            if prog.lower[i] == prog.upper[i] {
                rows.push(vec![(i, 1.0)]);
                b.push(prog.lower[i]);
            }
        }
        if !rows.is_empty() {
            cones.push(ConeBlock::Zero(rows.len()));
        }

        let start = rows.len();
        for r in &prog.inequalities {
            rows.push(r.terms.clone());
            b.push(r.rhs);
        }
        for i in 0..n {
            if prog.lower[i] == prog.upper[i] {
                continue;
            }
            if prog.lower[i].is_finite() {
                rows.push(vec![(i, -1.0)]);
                b.push(-prog.lower[i]);
            }
            if prog.upper[i].is_finite() {
                rows.push(vec![(i, 1.0)]);
                b.push(prog.upper[i]);
            }
        }
        if rows.len() > start {
            cones.push(ConeBlock::Nonneg(rows.len() - start));
        }

        // s = b - A z lies in the cone, so an affine entry c'z + d becomes
        // the row A = -c, b = d.
        for soc in &prog.socs {
            for e in std::iter::once(&soc.t).chain(&soc.x) {
                rows.push(e.terms.iter().map(|&(i, c)| (i, -c)).collect());
                b.push(e.constant);
            }
            cones.push(ConeBlock::Soc(1 + soc.x.len()));
        }

        Self { n, p_upper: prog.quad.clone(), q: prog.linear.clone(), rows, b, cones }
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Backend {
    /// Primal-dual interior point (Clarabel).
    #[default]
    Interior,
    /// Operator splitting (ADMM) with dense factorizations.
    Admm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub feas_tol: f64,
    pub opt_tol: f64,
    pub max_iter: usize,
    pub backend: Backend,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { feas_tol: 1e-8, opt_tol: 1e-8, max_iter: 50_000, backend: Backend::Interior }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Scaled primal residual of `x` (see [`ConicProgram::scaled_residual`]).
    pub primal_residual: f64,
    pub iterations: usize,
    /// Optimal value of the phase-one program, when one was run.
    pub min_violation: Option<f64>,
}

/// Solves `prog` with the backend selected in `opts`.
///
/// A point is reported `Optimal` only if its scaled residual is within
/// `feas_tol`. When the backend neither solves the program nor certifies
/// infeasibility, a phase-one solve decides: a minimum violation that is
/// large on the same scale is reported as `Infeasible`.
pub fn solve(prog: &ConicProgram, opts: &SolveOptions) -> SolveReport {
    let raw = raw_solve(prog, opts);
    let mut report = finish(prog, raw, opts);
    if matches!(report.status, SolveStatus::MaxIter | SolveStatus::NumericalFailure) {
        let phase1 = prog.feasibility_phase();
        let p1 = finish(&phase1, raw_solve(&phase1, opts), opts);
        if p1.status == SolveStatus::Optimal {
            let v = p1.x[prog.num_vars()];
            report.min_violation = Some(v);
            if v > opts.feas_tol * (1.0 + prog.data_scale(&p1.x[..prog.num_vars()])) {
                report.status = SolveStatus::Infeasible;
            }
        }
    }
    report
}

pub(crate) struct RawResult {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub iterations: usize,
}

fn raw_solve(prog: &ConicProgram, opts: &SolveOptions) -> RawResult {
    match opts.backend {
        Backend::Interior => interior::solve(prog, opts),
        Backend::Admm => admm::solve(prog, opts),
    }
}

fn finish(prog: &ConicProgram, raw: RawResult, opts: &SolveOptions) -> SolveReport {
    let x = if raw.x.len() == prog.num_vars() { raw.x } else { vec![0.0; prog.num_vars()] };
    let primal_residual = prog.scaled_residual(&x);
    let status = match raw.status {
        SolveStatus::Optimal if primal_residual > opts.feas_tol => SolveStatus::NumericalFailure,
        s => s,
    };
    SolveReport {
        status,
        objective: prog.objective(&x),
        x,
        primal_residual,
        iterations: raw.iterations,
        min_violation: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn both() -> [SolveOptions; 2] {
        [
            SolveOptions::default(),
            SolveOptions { backend: Backend::Admm, ..SolveOptions::default() },
        ]
    }

    #[test]
    fn clipped_quadratic() {
        // min (x - 1)^2 s.t. x >= 2
        let mut p = ConicProgram::new(1);
        p.add_quadratic(0, 0, 2.0);
        p.add_linear(0, -2.0);
        p.add_constant(1.0);
        p.add_le(vec![(0, -1.0)], -2.0);
        for opts in both() {
            let r = solve(&p, &opts);
            assert_eq!(r.status, SolveStatus::Optimal, "{:?}", opts.backend);
            assert!((r.x[0] - 2.0).abs() < 1e-6, "{:?}: {}", opts.backend, r.x[0]);
            assert!((r.objective - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn soc_vertex() {
        // min t s.t. ||(1, 1)|| <= t
        let mut p = ConicProgram::new(1);
        p.add_linear(0, 1.0);
        p.add_soc(Affine::var(0), vec![Affine::constant(1.0), Affine::constant(1.0)]);
        for opts in both() {
            let r = solve(&p, &opts);
            assert_eq!(r.status, SolveStatus::Optimal, "{:?}", opts.backend);
            assert!((r.x[0] - 2f64.sqrt()).abs() < 1e-6, "{:?}: {}", opts.backend, r.x[0]);
        }
    }

    #[test]
    fn symmetric_least_norm() {
        // min ||z||^2 s.t. z1 + z2 = 1
        let mut p = ConicProgram::new(2);
        p.add_quadratic(0, 0, 2.0);
        p.add_quadratic(1, 1, 2.0);
        p.add_eq(vec![(0, 1.0), (1, 1.0)], 1.0);
        for opts in both() {
            let r = solve(&p, &opts);
            assert_eq!(r.status, SolveStatus::Optimal, "{:?}", opts.backend);
            assert!((r.x[0] - 0.5).abs() < 1e-6 && (r.x[1] - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn infeasible_is_certified() {
        // x <= 0 and x >= 1
        let mut p = ConicProgram::new(1);
        p.add_quadratic(0, 0, 1.0);
        p.add_le(vec![(0, 1.0)], 0.0);
        p.add_le(vec![(0, -1.0)], -1.0);
        for opts in both() {
            let r = solve(&p, &opts);
            assert_eq!(r.status, SolveStatus::Infeasible, "{:?}", opts.backend);
        }
    }

    #[test]
    fn infeasible_ball_and_halfspace() {
        // ||(x, y)|| <= 1 and x >= 2
        let mut p = ConicProgram::new(2);
        p.add_quadratic(0, 0, 1.0);
        p.add_quadratic(1, 1, 1.0);
        p.add_soc(Affine::constant(1.0), vec![Affine::var(0), Affine::var(1)]);
        p.add_le(vec![(0, -1.0)], -2.0);
        for opts in both() {
            let r = solve(&p, &opts);
            assert_eq!(r.status, SolveStatus::Infeasible, "{:?}", opts.backend);
        }
    }

    #[test]
    fn bounds_including_fixed_variables() {
        // min (x - 3)^2 + (y + 1)^2, x in [0, 1], y fixed to 0.25
        let mut p = ConicProgram::new(2);
        p.add_quadratic(0, 0, 2.0);
        p.add_quadratic(1, 1, 2.0);
        p.add_linear(0, -6.0);
        p.add_linear(1, 2.0);
        p.set_bounds(0, 0.0, 1.0);
        p.set_bounds(1, 0.25, 0.25);
        for opts in both() {
            let r = solve(&p, &opts);
            assert_eq!(r.status, SolveStatus::Optimal, "{:?}", opts.backend);
            assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 0.25).abs() < 1e-6, "{:?}", r.x);
        }
    }

    #[test]
    fn feasibility_phase_measures_gap() {
        let mut p = ConicProgram::new(1);
        p.add_le(vec![(0, 1.0)], 0.0);
        p.add_le(vec![(0, -1.0)], -1.0);
        let r = solve(&p.feasibility_phase(), &SolveOptions::default());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.x[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn deterministic() {
        let mut p = ConicProgram::new(3);
        for i in 0..3 {
            p.add_quadratic(i, i, 1.0 + i as f64);
            p.add_linear(i, -1.0);
        }
        p.add_le(vec![(0, 1.0), (1, 1.0), (2, 1.0)], 0.5);
        p.add_soc(Affine::constant(2.0), vec![Affine::var(0), Affine::var(2)]);
        for opts in both() {
            assert_eq!(solve(&p, &opts), solve(&p, &opts));
        }
    }
}
