//! Voltage evaluation: the loss-free linear model and the full branch-flow
//! equations solved by a backward/forward sweep.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::grid::{RadialNetwork, SensitivityModel};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("substation voltage must be positive, got {0}")]
    NonPositiveV0(f64),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("voltage collapse at bus {bus} in iteration {iteration}")]
    VoltageCollapse { bus: usize, iteration: usize },
}

fn check_len(expected: usize, got: usize) -> Result<(), PowerFlowError> {
    if expected == got {
        Ok(())
    } else {
        Err(PowerFlowError::DimensionMismatch { expected, got })
    }
}

/// Net injections per bus (index `b - 1` for bus `b`). Positive values
/// are generation.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionProfile {
    pub p: DVector<f64>,
    pub q_e: DVector<f64>,
    pub q_c: DVector<f64>,
}

impl InjectionProfile {
    pub fn new(p: DVector<f64>, q_e: DVector<f64>, q_c: DVector<f64>) -> Result<Self, PowerFlowError> {
        check_len(p.len(), q_e.len())?;
        check_len(p.len(), q_c.len())?;
        Ok(Self { p, q_e, q_c })
    }

    pub fn zeros(n: usize) -> Self {
        Self { p: DVector::zeros(n), q_e: DVector::zeros(n), q_c: DVector::zeros(n) }
    }

    pub fn n(&self) -> usize {
        self.p.len()
    }

    pub fn q(&self) -> DVector<f64> {
        &self.q_e + &self.q_c
    }
}

/// `R p + X (q_e + q_c) + v0`.
pub fn linear_voltage(
    model: &SensitivityModel,
    inj: &InjectionProfile,
    v0: f64,
) -> Result<DVector<f64>, PowerFlowError> {
    check_len(model.n(), inj.n())?;
    check_len(inj.n(), inj.q_e.len())?;
    check_len(inj.n(), inj.q_c.len())?;
    Ok(&model.r * &inj.p + &model.x * inj.q() + DVector::from_element(inj.n(), v0))
}

/// The exogenous voltage component `R p + X q_e + v0`.
pub fn vpar_linear(
    model: &SensitivityModel,
    p: &DVector<f64>,
    q_e: &DVector<f64>,
    v0: f64,
) -> Result<DVector<f64>, PowerFlowError> {
    check_len(model.n(), p.len())?;
    check_len(model.n(), q_e.len())?;
    Ok(&model.r * p + &model.x * q_e + DVector::from_element(p.len(), v0))
}

/// `v + X u + w`.
pub fn linear_step(
    v: &DVector<f64>,
    x: &DMatrix<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>, PowerFlowError> {
    let n = v.len();
    check_len(n, x.nrows())?;
    check_len(n, x.ncols())?;
    check_len(n, u.len())?;
    check_len(n, w.len())?;
    Ok(v + x * u + w)
}

/// Branch-flow state. Line quantities are indexed by the child bus of the
/// line (`index = child - 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub v: DVector<f64>,
    pub p_flow: DVector<f64>,
    pub q_flow: DVector<f64>,
    pub l: DVector<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Largest absolute violation of the branch-flow equations at `sol`:
/// power balance at each bus, the voltage drop along each line, and
/// `l_ij = (P_ij^2 + Q_ij^2) / v_i` with `v_i` the sending-end voltage.
pub fn distflow_residual(
    net: &RadialNetwork,
    inj: &InjectionProfile,
    v0: f64,
    sol: &PowerFlowSolution,
) -> f64 {
    let n = net.n();
    let q = inj.q();
    let v_at = |b: usize| if b == 0 { v0 } else { sol.v[b - 1] };
    let mut worst: f64 = 0.0;
    for j in 1..=n {
        let (r, x) = (net.resistance(j), net.reactance(j));
        let (pij, qij, lij) = (sol.p_flow[j - 1], sol.q_flow[j - 1], sol.l[j - 1]);
        let children = net.children(j);
        let p_out: f64 = children.iter().map(|&k| sol.p_flow[k - 1]).sum();
        let q_out: f64 = children.iter().map(|&k| sol.q_flow[k - 1]).sum();
        worst = worst.max((-inj.p[j - 1] - (pij - r * lij - p_out)).abs());
        worst = worst.max((-q[j - 1] - (qij - x * lij - q_out)).abs());
        let vi = v_at(net.parent(j));
        let vj = vi - 2.0 * (r * pij + x * qij) + (r * r + x * x) * lij;
        worst = worst.max((sol.v[j - 1] - vj).abs());
        worst = worst.max((lij - (pij * pij + qij * qij) / vi).abs());
    }
    worst
}

/// Backward/forward sweep from `l = 0`, `v = v0`. The backward pass sums
/// flows from the leaves with the current losses, the forward pass updates
/// voltages from the root, then the losses are refreshed.
pub fn solve_distflow(
    net: &RadialNetwork,
    inj: &InjectionProfile,
    v0: f64,
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let n = net.n();
    check_len(n, inj.n())?;
    check_len(n, inj.q_e.len())?;
    check_len(n, inj.q_c.len())?;
    if !(v0 > 0.0) {
        return Err(PowerFlowError::NonPositiveV0(v0));
    }
    let q = inj.q();
    let order = net.topological_order();
    let mut sol = PowerFlowSolution {
        v: DVector::from_element(n, v0),
        p_flow: DVector::zeros(n),
        q_flow: DVector::zeros(n),
        l: DVector::zeros(n),
        residual: f64::INFINITY,
        iterations: 0,
    };
    let mut v_full = vec![v0; n + 1];

    for iter in 1..=max_iter {
        for &j in order.iter().rev() {
            let mut pj = -inj.p[j - 1] + net.resistance(j) * sol.l[j - 1];
            let mut qj = -q[j - 1] + net.reactance(j) * sol.l[j - 1];
            for k in net.children(j) {
                pj += sol.p_flow[k - 1];
                qj += sol.q_flow[k - 1];
            }
            sol.p_flow[j - 1] = pj;
            sol.q_flow[j - 1] = qj;
        }
        for &j in order {
            let (r, x) = (net.resistance(j), net.reactance(j));
            let (pj, qj, lj) = (sol.p_flow[j - 1], sol.q_flow[j - 1], sol.l[j - 1]);
            let vj = v_full[net.parent(j)] - 2.0 * (r * pj + x * qj) + (r * r + x * x) * lj;
            if !(vj > 0.0) {
                return Err(PowerFlowError::VoltageCollapse { bus: j, iteration: iter });
            }
            v_full[j] = vj;
            sol.v[j - 1] = vj;
        }
        for &j in order {
            let (pj, qj) = (sol.p_flow[j - 1], sol.q_flow[j - 1]);
            sol.l[j - 1] = (pj * pj + qj * qj) / v_full[net.parent(j)];
        }
        sol.iterations = iter;
        sol.residual = distflow_residual(net, inj, v0, &sol);
        if sol.residual <= tol {
            return Ok(sol);
        }
    }
    Err(PowerFlowError::NonConvergence { iterations: max_iter, residual: sol.residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_network, compute_sensitivity};
    use proptest::prelude::*;

    fn dv(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn feeder8() -> RadialNetwork {
        let edges = [(0, 1), (1, 2), (2, 3), (1, 4), (4, 5), (0, 6), (6, 7), (6, 8)];
        let r = [0.10, 0.20, 0.15, 0.30, 0.12, 0.25, 0.18, 0.22];
        let x = [0.30, 0.25, 0.40, 0.20, 0.35, 0.28, 0.15, 0.33];
        build_network(&edges, &r, &x, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap()
    }

    #[test]
    fn linear_no_injection() {
        let model = compute_sensitivity(&feeder8());
        let v = linear_voltage(&model, &InjectionProfile::zeros(8), 1.3).unwrap();
        assert!(v.iter().all(|&x| x == 1.3));
        let vp = vpar_linear(&model, &DVector::zeros(8), &DVector::zeros(8), 1.3).unwrap();
        assert_eq!(v, vp);
    }

    #[test]
    fn linear_scalar() {
        let model = SensitivityModel { r: DMatrix::from_element(1, 1, 0.2), x: DMatrix::from_element(1, 1, 1.0) };
        let inj = InjectionProfile::new(dv(&[0.5]), dv(&[1.0]), dv(&[0.0])).unwrap();
        let v = linear_voltage(&model, &inj, 1.0).unwrap();
        assert!((v[0] - 2.1).abs() < 1e-15);
    }

    #[test]
    fn linear_dimension_mismatch() {
        let model = compute_sensitivity(&feeder8());
        assert!(linear_voltage(&model, &InjectionProfile::zeros(3), 1.0).is_err());
        assert!(linear_step(&dv(&[1.0]), &DMatrix::identity(2, 2), &dv(&[0.0]), &dv(&[0.0])).is_err());
    }

    #[test]
    fn step_examples() {
        let v = dv(&[1.0, 1.0]);
        let out = linear_step(&v, &DMatrix::identity(2, 2), &dv(&[0.1, -0.2]), &dv(&[0.0, 0.0])).unwrap();
        assert!((out - dv(&[1.1, 0.8])).amax() < 1e-15);
        let same = linear_step(&v, &DMatrix::identity(2, 2), &DVector::zeros(2), &DVector::zeros(2)).unwrap();
        assert_eq!(same, v);
    }

    #[test]
    fn telescoping_steps_match_closed_form() {
        let net = feeder8();
        let model = compute_sensitivity(&net);
        let steps = 30;
        let vpar: Vec<DVector<f64>> = (0..=steps)
            .map(|t| DVector::from_fn(8, |i, _| 1.0 + 0.01 * ((t * (i + 1)) as f64).sin()))
            .collect();
        let qc: Vec<DVector<f64>> = (0..=steps)
            .map(|t| DVector::from_fn(8, |i, _| 0.05 * ((t + 2 * i) as f64).cos()))
            .collect();
        let mut v = &model.x * &qc[0] + &vpar[0];
        for t in 1..=steps {
            let u = &qc[t] - &qc[t - 1];
            let w = &vpar[t] - &vpar[t - 1];
            v = linear_step(&v, &model.x, &u, &w).unwrap();
        }
        let closed = &model.x * &qc[steps] + &vpar[steps];
        assert!((v - closed).amax() < 1e-12);
    }

    #[test]
    fn distflow_no_load() {
        let net = feeder8();
        let sol = solve_distflow(&net, &InjectionProfile::zeros(8), 1.0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(sol.v.iter().all(|&x| x == 1.0));
        assert!(sol.p_flow.amax() == 0.0 && sol.q_flow.amax() == 0.0 && sol.l.amax() == 0.0);
    }

    /// Independent oracle for the two-bus system: eliminate P, Q and solve
    /// the scalar loss equation `l = ((0.1 + r l)^2 + (x l)^2) / v0` by
    /// bisection.
    fn two_bus_oracle(r: f64, x: f64, load: f64, v0: f64) -> f64 {
        let f = |l: f64| ((load + r * l).powi(2) + (x * l).powi(2)) / v0 - l;
        let (mut lo, mut hi) = (0.0, 1.0);
        assert!(f(lo) > 0.0 && f(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let l = 0.5 * (lo + hi);
        let (p, q) = (load + r * l, x * l);
        v0 - 2.0 * (r * p + x * q) + (r * r + x * x) * l
    }

    #[test]
    fn distflow_two_bus() {
        let net = build_network(&[(0, 1)], &[0.1], &[0.1], &[]).unwrap();
        let inj = InjectionProfile::new(dv(&[-0.1]), dv(&[0.0]), dv(&[0.0])).unwrap();
        let sol = solve_distflow(&net, &inj, 1.0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let expected = two_bus_oracle(0.1, 0.1, 0.1, 1.0);
        assert!((sol.v[0] - expected).abs() < 1e-10, "{} vs {expected}", sol.v[0]);
        assert!((sol.v[0] - 0.979798).abs() < 1e-4);
        assert!(sol.residual <= 1e-10);
    }

    #[test]
    fn distflow_light_load_matches_linear() {
        let net = feeder8();
        let model = compute_sensitivity(&net);
        let base_p = dv(&[-0.3, -0.2, -0.4, -0.1, -0.25, -0.35, -0.15, -0.2]);
        let base_q = dv(&[-0.1, -0.05, -0.15, -0.02, -0.1, -0.12, -0.05, -0.08]);
        let mut gaps = Vec::new();
        for scale in [1e-1, 1e-2, 1e-3] {
            let inj = InjectionProfile::new(&base_p * scale, &base_q * scale, DVector::zeros(8)).unwrap();
            let nl = solve_distflow(&net, &inj, 1.0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            let lin = linear_voltage(&model, &inj, 1.0).unwrap();
            let gap = (&nl.v - &lin).amax();
            if scale == 1e-2 {
                assert!(gap <= 0.01, "gap {gap}");
            }
            // All loads: voltages sag below the substation.
            assert!(nl.v.iter().all(|&v| v <= 1.0));
            assert!(nl.l.iter().all(|&l| l >= 0.0));
            gaps.push(gap);
        }
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }

    #[test]
    fn distflow_reports_non_convergence() {
        let net = feeder8();
        let inj = InjectionProfile::new(DVector::from_element(8, -0.2), DVector::zeros(8), DVector::zeros(8)).unwrap();
        let err = solve_distflow(&net, &inj, 1.0, 1e-14, 1).unwrap_err();
        assert!(matches!(err, PowerFlowError::NonConvergence { iterations: 1, .. }));
    }

    #[test]
    fn distflow_detects_collapse() {
        let net = build_network(&[(0, 1)], &[1.0], &[1.0], &[]).unwrap();
        let inj = InjectionProfile::new(dv(&[-5.0]), dv(&[-5.0]), dv(&[0.0])).unwrap();
        assert!(solve_distflow(&net, &inj, 1.0, DEFAULT_TOL, DEFAULT_MAX_ITER).is_err());
    }

    proptest! {
        #[test]
        fn linear_is_vpar_plus_control(p in prop::collection::vec(-1.0f64..1.0, 8),
                                       qe in prop::collection::vec(-1.0f64..1.0, 8),
                                       qc in prop::collection::vec(-1.0f64..1.0, 8)) {
            let model = compute_sensitivity(&feeder8());
            let (p, qe, qc) = (dv(&p), dv(&qe), dv(&qc));
            let v = linear_voltage(&model, &InjectionProfile::new(p.clone(), qe.clone(), qc.clone()).unwrap(), 1.0).unwrap();
            let v2 = vpar_linear(&model, &p, &qe, 1.0).unwrap() + &model.x * &qc;
            prop_assert!((v - v2).amax() < 1e-12);
        }

        #[test]
        // Loads stay inside the solvable region of this feeder.
        fn sweep_solution_satisfies_equations(p in prop::collection::vec(-0.1f64..0.05, 8),
                                              q in prop::collection::vec(-0.08f64..0.05, 8)) {
            let net = feeder8();
            let inj = InjectionProfile::new(dv(&p), dv(&q), DVector::zeros(8)).unwrap();
            let sol = solve_distflow(&net, &inj, 1.0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            prop_assert!(distflow_residual(&net, &inj, 1.0, &sol) <= DEFAULT_TOL);
            prop_assert!(sol.v.iter().all(|&v| v > 0.0));
        }
    }
}
