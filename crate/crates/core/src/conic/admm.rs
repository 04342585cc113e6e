//! Operator-splitting backend.
//!
//! OSQP-style ADMM on `minimize 0.5 x'Px + q'x` s.t. `Ax = z`, `z in C`
//! with `C = b - K`, after Ruiz equilibration. The linear system
//! `P + sigma I + A' diag(rho) A` is formed densely and Cholesky-factored,
//! which suits the few-dozen-variable programs this crate builds. Primal
//! infeasibility is detected from the dual iterate differences.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{ConeBlock, ConicProgram, RawResult, SolveOptions, SolveStatus, StandardForm};

const SIGMA: f64 = 1e-6;
const ALPHA: f64 = 1.6;
const RHO0: f64 = 0.1;
const RHO_EQ_FACTOR: f64 = 1e3;
const CHECK_EVERY: usize = 10;
const ADAPT_EVERY: usize = 50;
const INFEAS_TOL: f64 = 1e-6;
const RUIZ_ITERS: usize = 15;

struct Csr {
    rows: Vec<Vec<(usize, f64)>>,
    n: usize,
}

impl Csr {
    fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|r| r.iter().map(|&(j, a)| a * x[j]).sum::<f64>()),
        )
    }

    fn mul_t(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, a) in r {
                out[j] += a * y[i];
            }
        }
        out
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Projection onto `K` (dual = false) or onto its dual cone `K*`.
fn project_cone(cones: &[ConeBlock], v: &mut DVector<f64>, dual: bool) {
    let mut at = 0;
    for c in cones {
        match *c {
            ConeBlock::Zero(k) => {
                if !dual {
                    v.rows_mut(at, k).fill(0.0);
                }
                at += k;
            }
            ConeBlock::Nonneg(k) => {
                for i in at..at + k {
                    v[i] = v[i].max(0.0);
                }
                at += k;
            }
            ConeBlock::Soc(k) => {
                let t = v[at];
                let xn = v.rows(at + 1, k - 1).norm();
                if xn <= t {
                    // inside
                } else if xn <= -t {
                    v.rows_mut(at, k).fill(0.0);
                } else {
                    let s = 0.5 * (t + xn);
                    v[at] = s;
                    let f = s / xn;
                    for i in at + 1..at + k {
                        v[i] *= f;
                    }
                }
                at += k;
            }
        }
    }
}

struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: Csr,
    b: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn equilibrate(sf: &StandardForm) -> Scaled {
    let n = sf.n;
    let m = sf.m();
    let mut p = DMatrix::<f64>::zeros(n, n);
    for &(i, j, v) in &sf.p_upper {
        p[(i, j)] += v;
        if i != j {
            p[(j, i)] += v;
        }
    }
    let mut q = DVector::from_column_slice(&sf.q);
    let mut a = Csr { rows: sf.rows.clone(), n };
    let mut b = DVector::from_column_slice(&sf.b);
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let clamp = |x: f64| if x < 1e-4 { 1.0 } else { x.min(1e4) };

    for _ in 0..RUIZ_ITERS {
        let mut col = DVector::from_element(n, 0.0f64);
        for j in 0..n {
            for i in 0..n {
                col[j] = col[j].max(p[(i, j)].abs());
            }
        }
        for r in &a.rows {
            for &(j, v) in r {
                col[j] = col[j].max(v.abs());
            }
        }
        let dd = col.map(|x| 1.0 / clamp(x).sqrt());

        let mut row = DVector::from_element(m, 0.0f64);
        for (i, r) in a.rows.iter().enumerate() {
            row[i] = r.iter().fold(0.0f64, |acc, &(_, v)| acc.max(v.abs()));
        }
        // Cone blocks other than the orthants need one scale per block.
        let mut at = 0;
        for c in &sf.cones {
            match *c {
                ConeBlock::Soc(k) => {
                    let mx = row.rows(at, k).max();
                    row.rows_mut(at, k).fill(mx);
                    at += k;
                }
                ConeBlock::Zero(k) | ConeBlock::Nonneg(k) => at += k,
            }
        }
        let ee = row.map(|x| 1.0 / clamp(x).sqrt());

        for i in 0..n {
            for j in 0..n {
                p[(i, j)] *= dd[i] * dd[j];
            }
        }
        q.component_mul_assign(&dd);
        for (i, r) in a.rows.iter_mut().enumerate() {
            for (j, v) in r.iter_mut() {
                *v *= ee[i] * dd[*j];
            }
        }
        b.component_mul_assign(&ee);
        d.component_mul_assign(&dd);
        e.component_mul_assign(&ee);
    }

    let mut pmean = 0.0;
    for j in 0..n {
        pmean += p.column(j).amax();
    }
    pmean /= n.max(1) as f64;
    let c = 1.0 / clamp(pmean.max(q.amax()));
    p *= c;
    q *= c;
    Scaled { p, q, a, b, d, e, c }
}

fn factor(s: &Scaled, rho: &DVector<f64>) -> Option<Cholesky<f64, Dyn>> {
    let n = s.p.nrows();
    let mut k = s.p.clone();
    for i in 0..n {
        k[(i, i)] += SIGMA;
    }
    for (r, row) in s.a.rows.iter().enumerate() {
        for &(i, vi) in row {
            for &(j, vj) in row {
                k[(i, j)] += rho[r] * vi * vj;
            }
        }
    }
    Cholesky::new(k)
}

fn rho_vector(cones: &[ConeBlock], m: usize, rho: f64) -> DVector<f64> {
    let mut v = DVector::from_element(m, rho);
    let mut at = 0;
    for c in cones {
        match *c {
            ConeBlock::Zero(k) => {
                v.rows_mut(at, k).fill(rho * RHO_EQ_FACTOR);
                at += k;
            }
            ConeBlock::Nonneg(k) | ConeBlock::Soc(k) => at += k,
        }
    }
    v
}

pub(super) fn solve(prog: &ConicProgram, opts: &SolveOptions) -> RawResult {
    let sf = StandardForm::from_program(prog);
    let n = sf.n;
    let m = sf.m();
    let s = equilibrate(&sf);

    let mut rho_scalar = RHO0;
    let mut rho = rho_vector(&sf.cones, m, rho_scalar);
    let Some(mut chol) = factor(&s, &rho) else {
        return RawResult { status: SolveStatus::NumericalFailure, x: vec![0.0; n], iterations: 0 };
    };

    let mut x = DVector::zeros(n);
    let mut z = DVector::zeros(m);
    let mut y = DVector::zeros(m);

    let unscale_x = |x: &DVector<f64>| x.component_mul(&s.d);
    let mut status = SolveStatus::MaxIter;
    let mut iter = 0;

    while iter < opts.max_iter {
        iter += 1;
        let y_prev = y.clone();

        let mut rhs = &x * SIGMA - &s.q;
        rhs += s.a.mul_t(&(rho.component_mul(&z) - &y));
        let xt = chol.solve(&rhs);
        let zt = s.a.mul(&xt);
        x = &xt * ALPHA + &x * (1.0 - ALPHA);
        let zhat = &zt * ALPHA + &z * (1.0 - ALPHA);

        // z = Pi_C(zhat + y / rho), C = b - K
        let mut v = &s.b - (&zhat + y.component_div(&rho));
        project_cone(&sf.cones, &mut v, false);
        let z_new = &s.b - v;
        y += rho.component_mul(&(&zhat - &z_new));
        z = z_new;

        if iter % CHECK_EVERY != 0 && iter != opts.max_iter {
            continue;
        }

        // Residuals in the original (unscaled) problem.
        let ax = s.a.mul(&x);
        let r_prim = inf_norm(&(&ax - &z).component_div(&s.e));
        let px = &s.p * &x;
        let aty = s.a.mul_t(&y);
        let r_dual = inf_norm(&(&px + &s.q + &aty).component_div(&s.d)) / s.c;
        let eps_prim = opts.feas_tol
            + opts.feas_tol
                * inf_norm(&ax.component_div(&s.e)).max(inf_norm(&z.component_div(&s.e)));
        let eps_dual = opts.opt_tol
            + opts.opt_tol
                * inf_norm(&px.component_div(&s.d))
                    .max(inf_norm(&aty.component_div(&s.d)))
                    .max(inf_norm(&s.q.component_div(&s.d)))
                / s.c;
        if r_prim <= eps_prim && r_dual <= eps_dual {
            status = SolveStatus::Optimal;
            break;
        }

        // Certificate: dy in K*, A'dy = 0, b'dy < 0.
        let dy = &y - &y_prev;
        let dy_norm = inf_norm(&dy.component_mul(&s.e));
        if dy_norm > 1e-12 {
            let mut proj = dy.clone();
            project_cone(&sf.cones, &mut proj, true);
            let off_cone = inf_norm(&(&dy - &proj).component_mul(&s.e));
            let atdy = inf_norm(&s.a.mul_t(&proj).component_div(&s.d));
            let bdy = s.b.dot(&proj);
            if off_cone <= INFEAS_TOL * dy_norm
                && atdy <= INFEAS_TOL * dy_norm
                && bdy < -INFEAS_TOL * dy_norm
            {
                status = SolveStatus::Infeasible;
                break;
            }
        }

        if iter % ADAPT_EVERY == 0 {
            let prim_rel = r_prim / eps_prim.max(1e-300);
            let dual_rel = r_dual / eps_dual.max(1e-300);
            let ratio = (prim_rel / dual_rel.max(1e-300)).sqrt();
            if !(0.2..=5.0).contains(&ratio) {
                rho_scalar = (rho_scalar * ratio).clamp(1e-6, 1e6);
                rho = rho_vector(&sf.cones, m, rho_scalar);
                match factor(&s, &rho) {
                    Some(c) => chol = c,
                    None => {
                        status = SolveStatus::NumericalFailure;
                        break;
                    }
                }
            }
        }
    }

    let xs = unscale_x(&x);
    RawResult { status, x: xs.iter().copied().collect(), iterations: iter }
}
