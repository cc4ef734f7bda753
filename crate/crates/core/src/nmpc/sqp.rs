//! Line-search SQP on top of clarabel QP subproblems.
//!
//! The problem is `min f(x)` subject to `c_E(x) = 0`, `c_I(x) ≤ 0` and
//! `lo ≤ x ≤ hi`. Each iteration solves a convex QP built from a positive
//! semidefinite approximation of the Lagrangian Hessian and takes a step on
//! the l1 merit function, with one second-order correction when the full step
//! is rejected.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus, SupportedConeT, ZeroConeT};

const MAX_SHIFT_RETRIES: usize = 3;
const SHIFT_MIN: f64 = 1e-4;
const SHIFT_MAX: f64 = 1e6;
const SHIFT_UP: f64 = 8.0;
const SHIFT_DOWN: f64 = 3.0;

/// Sparse matrix as coordinate triplets; repeated entries are summed.
#[derive(Clone, Debug, Default)]
pub(crate) struct Triplets {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Triplets {
    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        if v != 0.0 {
            self.rows.push(r);
            self.cols.push(c);
            self.vals.push(v);
        }
    }

    /// `y += M x`.
    pub fn mul_add(&self, x: &[f64], y: &mut [f64]) {
        for k in 0..self.vals.len() {
            y[self.rows[k]] += self.vals[k] * x[self.cols[k]];
        }
    }

    /// `y += Mᵀ x`.
    pub fn tmul_add(&self, x: &[f64], y: &mut [f64]) {
        for k in 0..self.vals.len() {
            y[self.cols[k]] += self.vals[k] * x[self.rows[k]];
        }
    }

    fn csc(&self, m: usize, n: usize) -> CscMatrix<f64> {
        CscMatrix::new_from_triplets(m, n, self.rows.clone(), self.cols.clone(), self.vals.clone())
    }
}

/// Objective, constraints and Jacobian at one point. Rows `0..m_eq` of `c`
/// are equalities, the rest are `≤ 0`.
pub(crate) struct Eval {
    pub f: f64,
    pub grad: Vec<f64>,
    pub c: Vec<f64>,
    pub jac: Triplets,
}

pub(crate) trait Nlp {
    fn n(&self) -> usize;
    fn m_eq(&self) -> usize;
    fn m_in(&self) -> usize;
    fn bounds(&self) -> (&[f64], &[f64]);
    fn eval(&self, x: &[f64]) -> Eval;
    /// Objective and constraint values only.
    fn values(&self, x: &[f64]) -> (f64, Vec<f64>);
    /// Upper triangle of a positive semidefinite approximation of
    /// `∇²f + Σ λ_j ∇²c_j`.
    fn hessian(&self, x: &[f64], lambda: &[f64]) -> Triplets;
}

#[derive(Clone, Debug)]
pub(crate) struct SqpOptions {
    pub max_iter: usize,
    pub kkt_tol: f64,
    pub feas_tol: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum SqpStatus {
    Optimal,
    /// Feasible within tolerance but the KKT test never passed.
    Feasible,
    Infeasible,
}

#[derive(Clone, Debug)]
pub(crate) struct SqpResult {
    pub x: Vec<f64>,
    #[cfg_attr(not(test), allow(dead_code))]
    pub lambda: Vec<f64>,
    pub f: f64,
    pub kkt: f64,
    pub violation: f64,
    pub iterations: usize,
    pub status: SqpStatus,
    pub report: String,
}

/// Violation of `c` (l∞ and l1) under the equality/inequality split.
fn violation(c: &[f64], m_eq: usize) -> (f64, f64) {
    let mut inf: f64 = 0.0;
    let mut one = 0.0;
    for (j, &v) in c.iter().enumerate() {
        let e = if j < m_eq { v.abs() } else { v.max(0.0) };
        inf = inf.max(e);
        one += e;
    }
    (inf, one)
}

/// Violation weighted row by row.
fn weighted_violation(c: &[f64], m_eq: usize, w: &[f64]) -> f64 {
    c.iter()
        .zip(w)
        .enumerate()
        .map(|(j, (&v, &w))| w * if j < m_eq { v.abs() } else { v.max(0.0) })
        .sum()
}

/// Smallest penalty weight of a row.
const PENALTY_FLOOR: f64 = 1.0;

struct QpOut {
    d: Vec<f64>,
    lambda: Vec<f64>,
    /// `ν_hi − ν_lo` per variable.
    bound_mult: Vec<f64>,
}

struct Qp<'a> {
    n: usize,
    m_eq: usize,
    m_in: usize,
    hess: &'a Triplets,
    grad: &'a [f64],
    jac: &'a Triplets,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Qp<'_> {
    fn settings() -> DefaultSettings<f64> {
        DefaultSettings {
            verbose: false,
            max_iter: 200,
            max_threads: 1,
            presolve_enable: false,
            tol_gap_abs: 1e-9,
            tol_gap_rel: 1e-9,
            tol_feas: 1e-9,
            ..DefaultSettings::default()
        }
    }

    /// Bound rows on `d` in `[lo, hi]`; fixed variables become equalities.
    fn bound_rows(&self, a: &mut Triplets, b: &mut Vec<f64>, row0: usize, eq: bool) -> Vec<(usize, usize, f64)> {
        let mut map = Vec::new();
        let mut r = row0;
        for j in 0..self.n {
            let (l, h) = (self.lo[j], self.hi[j]);
            let fixed = h - l <= 1e-14;
            if eq != fixed {
                continue;
            }
            if fixed {
                a.push(r, j, 1.0);
                b.push(h);
                map.push((r, j, 1.0));
                r += 1;
                continue;
            }
            if h.is_finite() {
                a.push(r, j, 1.0);
                b.push(h);
                map.push((r, j, 1.0));
                r += 1;
            }
            if l.is_finite() {
                a.push(r, j, -1.0);
                b.push(-l);
                map.push((r, j, -1.0));
                r += 1;
            }
        }
        map
    }

    /// `min ½dᵀHd + gᵀd` s.t. `J d = rhs_eq`, `J d ≤ rhs_in`, bounds. With
    /// `elastic = Some(w)` every linearized constraint gets a penalized slack.
    fn solve(&self, rhs: &[f64], elastic: Option<f64>) -> Option<QpOut> {
        let (n, m_eq, m_in) = (self.n, self.m_eq, self.m_in);
        let m = m_eq + m_in;
        let n_el = if elastic.is_some() { 2 * m_eq + m_in } else { 0 };
        let nv = n + n_el;
        let mut a = Triplets::default();
        let mut b = Vec::new();
        let mut row = 0;
        // Equalities: linearized constraints, then fixed variables.
        for k in 0..self.jac.vals.len() {
            let r = self.jac.rows[k];
            if r < m_eq {
                a.push(r, self.jac.cols[k], self.jac.vals[k]);
            }
        }
        if elastic.is_some() {
            for r in 0..m_eq {
                a.push(r, n + 2 * r, -1.0);
                a.push(r, n + 2 * r + 1, 1.0);
            }
        }
        b.extend_from_slice(&rhs[..m_eq]);
        row += m_eq;
        let fixed = self.bound_rows(&mut a, &mut b, row, true);
        row += fixed.len();
        let n_zero = row;
        // Inequalities.
        for k in 0..self.jac.vals.len() {
            let r = self.jac.rows[k];
            if r >= m_eq {
                a.push(row + r - m_eq, self.jac.cols[k], self.jac.vals[k]);
            }
        }
        if elastic.is_some() {
            for r in 0..m_in {
                a.push(row + r, n + 2 * m_eq + r, -1.0);
            }
        }
        b.extend_from_slice(&rhs[m_eq..]);
        let in0 = row;
        row += m_in;
        let bounds = self.bound_rows(&mut a, &mut b, row, false);
        row += bounds.len();
        if elastic.is_some() {
            for s in 0..n_el {
                a.push(row + s, n + s, -1.0);
                b.push(0.0);
            }
            row += n_el;
        }
        let mut q = self.grad.to_vec();
        if let Some(w) = elastic {
            q.extend(std::iter::repeat_n(w, n_el));
        }
        let mut p = Triplets::default();
        for k in 0..self.hess.vals.len() {
            p.push(self.hess.rows[k], self.hess.cols[k], self.hess.vals[k]);
        }
        let cones: Vec<SupportedConeT<f64>> = vec![ZeroConeT(n_zero), NonnegativeConeT(row - n_zero)];
        let mut solver =
            DefaultSolver::new(&p.csc(nv, nv), &q, &a.csc(row, nv), &b, &cones, Self::settings()).ok()?;
        solver.solve();
        let sol = &solver.solution;
        if !matches!(sol.status, SolverStatus::Solved | SolverStatus::AlmostSolved) {
            return None;
        }
        let mut lambda = vec![0.0; m];
        lambda[..m_eq].copy_from_slice(&sol.z[..m_eq]);
        lambda[m_eq..].copy_from_slice(&sol.z[in0..in0 + m_in]);
        let mut bound_mult = vec![0.0; n];
        for (r, j, s) in fixed.iter().chain(&bounds) {
            bound_mult[*j] += s * sol.z[*r];
        }
        Some(QpOut { d: sol.x[..n].to_vec(), lambda, bound_mult })
    }
}

/// Scaled KKT error: stationarity, complementarity of inequalities and bounds.
fn kkt_error(ev: &Eval, x: &[f64], lo: &[f64], hi: &[f64], lambda: &[f64], bound_mult: &[f64], m_eq: usize) -> f64 {
    let mut stat = ev.grad.clone();
    ev.jac.tmul_add(lambda, &mut stat);
    for (s, b) in stat.iter_mut().zip(bound_mult) {
        *s += b;
    }
    let stat_inf = stat.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut comp: f64 = 0.0;
    for j in m_eq..ev.c.len() {
        comp = comp.max((lambda[j].max(0.0) * ev.c[j]).abs());
    }
    for j in 0..x.len() {
        let b = bound_mult[j];
        let gap = if b > 0.0 { hi[j] - x[j] } else { x[j] - lo[j] };
        if gap.is_finite() {
            comp = comp.max((b * gap).abs());
        }
    }
    // Multiplier-based scaling with the usual cap of 100.
    let s_max = 100.0;
    let mult_mean = (lambda.iter().map(|l| l.abs()).sum::<f64>() + bound_mult.iter().map(|l| l.abs()).sum::<f64>())
        / (lambda.len() + x.len()).max(1) as f64;
    let s_d = (mult_mean.max(s_max)) / s_max;
    (stat_inf / s_d).max(comp / s_d)
}

pub(crate) fn solve<P: Nlp>(nlp: &P, x0: &[f64], opts: &SqpOptions) -> SqpResult {
    let (n, m_eq, m_in) = (nlp.n(), nlp.m_eq(), nlp.m_in());
    let (lo, hi) = nlp.bounds();
    let mut x: Vec<f64> = x0.iter().zip(lo.iter().zip(hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect();
    let mut lambda = vec![0.0; m_eq + m_in];
    let mut bound_mult = vec![0.0; n];
    let mut have_mult = false;
    // Per-row penalty weights of the merit function.
    let mut nu: Vec<f64> = vec![PENALTY_FLOOR; m_eq + m_in];
    // Levenberg-Marquardt shift, raised whenever a full step is rejected.
    let mut reg: f64 = 0.0;
    let mut stalled = 0usize;
    let mut kkt = f64::INFINITY;
    let mut report = String::new();
    let mut best: Option<(f64, f64, Vec<f64>, Vec<f64>)> = None;
    let mut ev = nlp.eval(&x);
    let mut iterations = 0;

    for iter in 0..=opts.max_iter {
        iterations = iter;
        let viol = violation(&ev.c, m_eq).0;
        if have_mult {
            kkt = kkt_error(&ev, &x, lo, hi, &lambda, &bound_mult, m_eq);
        }
        let better = match &best {
            None => true,
            Some((bv, bf, _, _)) => {
                let feas = viol <= opts.feas_tol;
                let bfeas = *bv <= opts.feas_tol;
                (feas && !bfeas) || (feas == bfeas && if feas { ev.f < *bf } else { viol < *bv })
            }
        };
        if better {
            best = Some((viol, ev.f, x.clone(), lambda.clone()));
        }
        if have_mult && viol <= opts.feas_tol && kkt <= opts.kkt_tol {
            return SqpResult { x, lambda, f: ev.f, kkt, violation: viol, iterations: iter, status: SqpStatus::Optimal, report };
        }
        if iter == opts.max_iter {
            break;
        }

        let base_hess = nlp.hessian(&x, &lambda);
        let rhs: Vec<f64> = ev.c.iter().map(|c| -c).collect();
        let box_lo: Vec<f64> = x.iter().zip(lo).map(|(v, l)| l - v).collect();
        let box_hi: Vec<f64> = x.iter().zip(hi).map(|(v, h)| h - v).collect();
        let trial = |alpha: f64, d: &[f64]| -> Vec<f64> {
            x.iter().zip(d).zip(lo.iter().zip(hi)).map(|((v, s), (l, h))| (v + alpha * s).clamp(*l, *h)).collect()
        };
        let eta = 1e-4;
        let mut accepted: Option<Vec<f64>> = None;
        let mut taken = 1.0;
        let mut attempt = 0;
        // A rejected full step is retried with a stronger diagonal shift a
        // few times before falling back to backtracking.
        let (step, dphi, step_norm) = loop {
            let mut hess = base_hess.clone();
            if reg > 0.0 {
                for i in 0..n {
                    hess.push(i, i, reg);
                }
            }
            let qp = Qp { n, m_eq, m_in, hess: &hess, grad: &ev.grad, jac: &ev.jac, lo: box_lo.clone(), hi: box_hi.clone() };
            let (step, elastic) = match qp.solve(&rhs, None) {
                Some(s) => (s, false),
                None => match qp.solve(&rhs, Some(nu.iter().fold(1e3f64, |a, v| a.max(*v)) * 10.0)) {
                    Some(s) => (s, true),
                    None => {
                        report.push_str(&format!("iteration {iter}: QP subproblem failed\n"));
                        break (None, 0.0, 0.0);
                    }
                },
            };
            if elastic {
                report.push_str(&format!("iteration {iter}: linearization infeasible, elastic step\n"));
            }
            if !elastic && attempt == 0 {
                // Powell's rule: follow the multipliers, decreasing slowly.
                for (w, l) in nu.iter_mut().zip(&step.lambda) {
                    let target = 1.1 * l.abs() + PENALTY_FLOOR;
                    *w = target.max(0.5 * (*w + target));
                }
            }
            let merit = |f: f64, c: &[f64]| f + weighted_violation(c, m_eq, &nu);
            let viol_w = weighted_violation(&ev.c, m_eq, &nu);
            let phi0 = ev.f + viol_w;
            // Directional derivative of the merit along d.
            let mut lin = ev.c.clone();
            ev.jac.mul_add(&step.d, &mut lin);
            let gd: f64 = ev.grad.iter().zip(&step.d).map(|(g, d)| g * d).sum();
            let dphi = gd - (viol_w - weighted_violation(&lin, m_eq, &nu));
            let step_norm = step.d.iter().fold(0.0f64, |a, v| a.max(v.abs()));

            let x1 = trial(1.0, &step.d);
            let (f1, c1) = nlp.values(&x1);
            if merit(f1, &c1) <= phi0 + eta * dphi.min(0.0) || step_norm < 1e-12 {
                accepted = Some(x1);
                break (Some(step), dphi, step_norm);
            }
            // Second-order correction: re-linearize the constants at x + d.
            let mut jd = vec![0.0; m_eq + m_in];
            ev.jac.mul_add(&step.d, &mut jd);
            let rhs_soc: Vec<f64> = c1.iter().zip(&jd).map(|(c, j)| -(c - j)).collect();
            if let Some(soc) = qp.solve(&rhs_soc, None) {
                let x2 = trial(1.0, &soc.d);
                let (f2, c2) = nlp.values(&x2);
                if merit(f2, &c2) <= phi0 + eta * dphi.min(0.0) {
                    accepted = Some(x2);
                    break (Some(step), dphi, step_norm);
                }
            }
            if attempt < MAX_SHIFT_RETRIES && !elastic {
                attempt += 1;
                reg = (reg * SHIFT_UP).clamp(SHIFT_MIN, SHIFT_MAX);
                continue;
            }
            let mut alpha = 0.5;
            while alpha > 1e-10 {
                let xa = trial(alpha, &step.d);
                let (fa, ca) = nlp.values(&xa);
                if merit(fa, &ca) <= phi0 + eta * alpha * dphi.min(0.0) {
                    accepted = Some(xa);
                    taken = alpha;
                    break;
                }
                alpha *= 0.5;
            }
            break (Some(step), dphi, step_norm);
        };
        let Some(step) = step else { break };
        if attempt == 0 && taken == 1.0 {
            reg = if reg > SHIFT_MIN { reg / SHIFT_DOWN } else { 0.0 };
        }
        let moved = taken * step_norm;
        stalled = if viol <= opts.feas_tol && moved <= 1e-10 * (1.0 + x.iter().fold(0.0f64, |a, v| a.max(v.abs()))) { stalled + 1 } else { 0 };
        lambda = step.lambda;
        bound_mult = step.bound_mult;
        have_mult = true;
        match accepted {
            Some(xn) => x = xn,
            None => {
                report.push_str(&format!("iteration {iter}: line search failed (merit slope {dphi:.3e})\n"));
                // Still refresh the KKT estimate with the new multipliers at x.
                let viol = violation(&ev.c, m_eq).0;
                kkt = kkt_error(&ev, &x, lo, hi, &lambda, &bound_mult, m_eq);
                if viol <= opts.feas_tol && kkt <= opts.kkt_tol {
                    return SqpResult { x, lambda, f: ev.f, kkt, violation: viol, iterations: iter + 1, status: SqpStatus::Optimal, report };
                }
                break;
            }
        }
        ev = nlp.eval(&x);
        if stalled >= 2 {
            report.push_str(&format!("iteration {iter}: no progress, stopping\n"));
            let viol = violation(&ev.c, m_eq).0;
            kkt = kkt_error(&ev, &x, lo, hi, &lambda, &bound_mult, m_eq);
            let status = if viol <= opts.feas_tol && kkt <= opts.kkt_tol { SqpStatus::Optimal } else if viol <= opts.feas_tol { SqpStatus::Feasible } else { SqpStatus::Infeasible };
            return SqpResult { x, lambda, f: ev.f, kkt, violation: viol, iterations: iter + 1, status, report };
        }
    }

    // The last iterate usually has the lowest cost; pull it onto the
    // constraints before falling back to the best feasible iterate.
    if violation(&ev.c, m_eq).0 > opts.feas_tol {
        if let Some(xr) = restore(nlp, &x, opts.feas_tol) {
            report.push_str("final iterate projected onto the constraints\n");
            let (f, c) = nlp.values(&xr);
            let viol = violation(&c, m_eq).0;
            let better = match &best {
                Some((bv, bf, _, _)) => *bv > opts.feas_tol || f <= *bf,
                None => true,
            };
            if better {
                return SqpResult { x: xr, lambda, f, kkt, violation: viol, iterations, status: SqpStatus::Feasible, report };
            }
        }
    }
    let (viol, f, x, lambda) = best.expect("at least one iterate");
    let status = if viol <= opts.feas_tol { SqpStatus::Feasible } else { SqpStatus::Infeasible };
    SqpResult { x, lambda, f, kkt, violation: viol, iterations, status, report }
}

/// Gauss-Newton projection onto the constraint set: repeatedly take the
/// smallest step that satisfies the linearized constraints.
fn restore<P: Nlp>(nlp: &P, x0: &[f64], tol: f64) -> Option<Vec<f64>> {
    let (n, m_eq, m_in) = (nlp.n(), nlp.m_eq(), nlp.m_in());
    let (lo, hi) = nlp.bounds();
    let mut hess = Triplets::default();
    for i in 0..n {
        hess.push(i, i, 1.0);
    }
    let zero = vec![0.0; n];
    let mut x = x0.to_vec();
    for _ in 0..RESTORE_STEPS {
        let ev = nlp.eval(&x);
        if violation(&ev.c, m_eq).0 <= tol {
            return Some(x);
        }
        let qp = Qp {
            n,
            m_eq,
            m_in,
            hess: &hess,
            grad: &zero,
            jac: &ev.jac,
            lo: x.iter().zip(lo).map(|(v, l)| l - v).collect(),
            hi: x.iter().zip(hi).map(|(v, h)| h - v).collect(),
        };
        let rhs: Vec<f64> = ev.c.iter().map(|c| -c).collect();
        let step = qp.solve(&rhs, None)?;
        for (((v, d), l), h) in x.iter_mut().zip(&step.d).zip(lo).zip(hi) {
            *v = (*v + d).clamp(*l, *h);
        }
    }
    let (_, c) = nlp.values(&x);
    (violation(&c, m_eq).0 <= tol).then_some(x)
}

const RESTORE_STEPS: usize = 8;
