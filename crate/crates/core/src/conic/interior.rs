//! Adapter onto the Clarabel interior-point solver.

use std::collections::BTreeMap;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use super::{ConeBlock, ConicProgram, RawResult, SolveOptions, SolveStatus, StandardForm};

fn csc(entries: impl IntoIterator<Item = (usize, usize, f64)>, m: usize, n: usize) -> CscMatrix<f64> {
    let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (row, col, v) in entries {
        if v != 0.0 {
            *merged.entry((col, row)).or_insert(0.0) += v;
        }
    }
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(merged.len());
    let mut nzval = Vec::with_capacity(merged.len());
    for (&(col, row), &v) in &merged {
        colptr[col + 1] += 1;
        rowval.push(row);
        nzval.push(v);
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

pub(super) fn solve(prog: &ConicProgram, opts: &SolveOptions) -> RawResult {
    let sf = StandardForm::from_program(prog);
    let n = sf.n;
    let p = csc(sf.p_upper.iter().copied(), n, n);
    let a = csc(
        sf.rows.iter().enumerate().flat_map(|(r, terms)| terms.iter().map(move |&(c, v)| (r, c, v))),
        sf.m(),
        n,
    );
    let cones: Vec<SupportedConeT<f64>> = sf
        .cones
        .iter()
        .map(|c| match *c {
            ConeBlock::Zero(k) => SupportedConeT::ZeroConeT(k),
            ConeBlock::Nonneg(k) => SupportedConeT::NonnegativeConeT(k),
            ConeBlock::Soc(k) => SupportedConeT::SecondOrderConeT(k),
        })
        .collect();

    let settings = match DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(opts.max_iter.min(500) as u32)
        .tol_feas(opts.feas_tol)
        .tol_gap_abs(opts.opt_tol)
        .tol_gap_rel(opts.opt_tol)
        .build()
    {
        Ok(s) => s,
        Err(_) => return failure(n),
    };
    let mut solver = match DefaultSolver::new(&p, &sf.q, &a, &sf.b, &cones, settings) {
        Ok(s) => s,
        Err(_) => return failure(n),
    };
    solver.solve();

    let status = match solver.solution.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::MaxIter,
        _ => SolveStatus::NumericalFailure,
    };
    RawResult {
        status,
        x: solver.solution.x.clone(),
        iterations: solver.solution.iterations as usize,
    }
}

fn failure(n: usize) -> RawResult {
    RawResult { status: SolveStatus::NumericalFailure, x: vec![0.0; n], iterations: 0 }
}
