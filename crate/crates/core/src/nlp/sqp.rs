//! Sequential quadratic programming on top of the operator-splitting QP.
//!
//! Problems implement the [`Nlp`] trait (smooth cost, equality and
//! inequality constraints with sparse Jacobians, box bounds). Each iteration
//! linearizes the constraints, builds a convex QP over the step `d` with
//! either the problem-supplied quasi-second-order cost matrix (plus identity
//! damping) or a damped BFGS approximation, and globalizes with an ℓ1 merit
//! function and Armijo backtracking. Infeasible subproblems fall back to an
//! elastic relaxation with penalized slacks; a stationary elastic step with
//! persistent violation certifies local infeasibility.
//!
//! Receding-horizon use warm-starts both layers: the caller passes the
//! shifted previous solution, and successive QP subproblems reuse the last
//! step and multipliers. A warm start at a KKT point returns after a single
//! verification iteration.

use super::qp::{solve_qp_general, QpOptions, QpProblem, QpWarmStart, SparseMatrix};
use super::{SolveReport, SolveStatus, WorstViolation};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A smooth nonlinear program
///
/// ```text
///   minimize    f(x)
///   subject to  c_eq(x) = 0,  c_in(x) ≤ 0,  lb ≤ x ≤ ub.
/// ```
pub trait Nlp {
    fn dim(&self) -> usize;
    fn n_eq(&self) -> usize;
    fn n_ineq(&self) -> usize;
    fn cost(&self, x: &DVector<f64>) -> f64;
    fn cost_grad(&self, x: &DVector<f64>) -> DVector<f64>;
    fn eq_constraints(&self, x: &DVector<f64>) -> DVector<f64>;
    fn ineq_constraints(&self, x: &DVector<f64>) -> DVector<f64>;
    fn eq_jacobian(&self, x: &DVector<f64>) -> SparseMatrix;
    fn ineq_jacobian(&self, x: &DVector<f64>) -> SparseMatrix;
    /// Box bounds; use ±∞ for free variables.
    fn bounds(&self) -> (DVector<f64>, DVector<f64>);
    /// Optional convex quasi-second-order cost matrix (e.g. the
    /// Gauss-Newton matrix of a least-squares cost). When absent the solver
    /// maintains a damped BFGS approximation.
    fn cost_hessian(&self, x: &DVector<f64>) -> Option<SparseMatrix> {
        let _ = x;
        None
    }
    /// Optional convexified second-order model of the Lagrangian, given the
    /// current multiplier estimates (equalities then inequalities, in the
    /// constraint ordering). Takes precedence over [`Nlp::cost_hessian`].
    /// Implementations must return a positive-semidefinite matrix, so
    /// indefinite constraint curvature has to be projected or dropped.
    /// Supplying the curvature of constraints whose gradients vanish at the
    /// solution (e.g. squared-norm rows) is what restores fast local
    /// convergence there; the cost matrix alone cannot see it.
    fn lagrangian_hessian(
        &self,
        x: &DVector<f64>,
        lam_eq: &DVector<f64>,
        lam_in: &DVector<f64>,
    ) -> Option<SparseMatrix> {
        let _ = (x, lam_eq, lam_in);
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlpOptions {
    pub max_iter: usize,
    /// Stationarity/complementarity tolerance.
    pub tol_kkt: f64,
    /// Constraint-violation tolerance.
    pub tol_feas: f64,
    /// Identity damping added to the supplied cost matrix.
    pub hessian_damping: f64,
    /// Fraction of the predicted merit decrease a step must realize.
    pub armijo: f64,
    /// Smallest accepted line-search step.
    pub min_step: f64,
    /// Penalty weight of the elastic (slack) relaxation.
    pub elastic_penalty: f64,
    pub qp: QpOptions,
}

impl Default for NlpOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol_kkt: 1e-6,
            tol_feas: 1e-8,
            hessian_damping: 1e-6,
            armijo: 0.1,
            min_step: 1e-10,
            elastic_penalty: 1e4,
            qp: QpOptions { eps_abs: 1e-9, ..QpOptions::default() },
        }
    }
}

/// Multiplier layout of [`solve_nlp`] reports: equalities, then
/// inequalities, then one bound multiplier per variable.
#[derive(Debug, Clone, Copy)]
pub struct MultiplierLayout {
    pub n_eq: usize,
    pub n_ineq: usize,
    pub n_bounds: usize,
}

/// KKT residual breakdown returned by [`check_kkt`].
#[derive(Debug, Clone, Copy)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
    /// Sign violations of inequality/bound multipliers.
    pub dual: f64,
    pub pass: bool,
}

impl KktReport {
    pub fn residual(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity).max(self.dual)
    }
}

/// Evaluate the KKT conditions of `p` at `point` with `multipliers` in the
/// [`MultiplierLayout`] ordering.
pub fn check_kkt<P: Nlp + ?Sized>(
    p: &P,
    point: &DVector<f64>,
    multipliers: &DVector<f64>,
    tol: f64,
) -> KktReport {
    let n = p.dim();
    let me = p.n_eq();
    let mi = p.n_ineq();
    debug_assert_eq!(multipliers.len(), me + mi + n);
    let lam_eq = multipliers.rows(0, me).into_owned();
    let lam_in = multipliers.rows(me, mi).into_owned();
    let lam_b = multipliers.rows(me + mi, n).into_owned();
    let (lb, ub) = p.bounds();

    let mut stat = p.cost_grad(point);
    if me > 0 {
        stat += p.eq_jacobian(point).tr_mul_vec(&lam_eq);
    }
    if mi > 0 {
        stat += p.ineq_jacobian(point).tr_mul_vec(&lam_in);
    }
    stat += &lam_b;
    let stationarity = stat.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let ceq = p.eq_constraints(point);
    let cin = p.ineq_constraints(point);
    let mut primal = ceq.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut comp = 0.0f64;
    let mut dual = 0.0f64;
    for i in 0..mi {
        primal = primal.max(cin[i]);
        dual = dual.max(-lam_in[i]);
        comp = comp.max((lam_in[i] * cin[i]).abs());
    }
    for j in 0..n {
        primal = primal.max(lb[j] - point[j]).max(point[j] - ub[j]);
        let up = lam_b[j].max(0.0);
        let lo = (-lam_b[j]).max(0.0);
        if up > 0.0 {
            comp = comp.max(if ub[j].is_finite() { up * (ub[j] - point[j]).abs() } else { up });
        }
        if lo > 0.0 {
            comp = comp.max(if lb[j].is_finite() { lo * (point[j] - lb[j]).abs() } else { lo });
        }
    }
    let primal = primal.max(0.0);
    let pass = stationarity <= tol && primal <= tol && comp <= tol && dual <= tol;
    KktReport { stationarity, primal, complementarity: comp, dual, pass }
}

fn constraint_violation(ceq: &DVector<f64>, cin: &DVector<f64>) -> f64 {
    let e = ceq.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let i = cin.iter().fold(0.0f64, |m, v| m.max(*v));
    e.max(i).max(0.0)
}

fn l1_infeasibility(ceq: &DVector<f64>, cin: &DVector<f64>) -> f64 {
    ceq.iter().map(|v| v.abs()).sum::<f64>() + cin.iter().map(|v| v.max(0.0)).sum::<f64>()
}

/// Solve the NLP from `warm_start` (clamped into the bounds).
pub fn solve_nlp<P: Nlp + ?Sized>(
    p: &P,
    warm_start: &DVector<f64>,
    opts: &NlpOptions,
) -> SolveReport {
    let n = p.dim();
    let me = p.n_eq();
    let mi = p.n_ineq();
    assert_eq!(warm_start.len(), n);
    assert!(warm_start.iter().all(|v| v.is_finite()), "warm start must be finite");
    let (lb, ub) = p.bounds();

    let mut x = warm_start.clone();
    for j in 0..n {
        x[j] = x[j].clamp(lb[j], ub[j]);
    }
    let mut lam = DVector::zeros(me + mi + n);
    let mut merit_mu = 1.0f64;
    let mut merit_history = Vec::new();
    let mut qp_warm: Option<QpWarmStart> = None;

    // BFGS state (used only when the problem supplies no cost matrix).
    let mut bfgs: Option<DMatrix<f64>> = None;
    let mut prev_grad_l: Option<DVector<f64>> = None;
    let mut prev_x: Option<DVector<f64>> = None;

    let mut elastic_stall = 0usize;
    let mut uses_bfgs = false;

    for it in 0..=opts.max_iter {
        let g = p.cost_grad(&x);
        let ceq = p.eq_constraints(&x);
        let cin = p.ineq_constraints(&x);
        let viol = constraint_violation(&ceq, &cin);
        let kkt = check_kkt(p, &x, &lam, opts.tol_kkt);
        if kkt.stationarity <= opts.tol_kkt
            && kkt.complementarity <= opts.tol_kkt
            && kkt.dual <= opts.tol_kkt
            && viol <= opts.tol_feas.max(opts.tol_kkt)
        {
            return SolveReport {
                solution: x,
                multipliers: lam,
                kkt_residual: kkt.residual(),
                iterations: it,
                status: SolveStatus::Converged,
                worst_violation: None,
                merit_history,
            };
        }
        if it == opts.max_iter {
            break;
        }

        let jeq = p.eq_jacobian(&x);
        let jin = p.ineq_jacobian(&x);

        // Quasi-second-order model: convexified Lagrangian curvature when
        // the problem can supply it, else the cost matrix, else BFGS.
        let model = p
            .lagrangian_hessian(
                &x,
                &lam.rows(0, me).into_owned(),
                &lam.rows(me, mi).into_owned(),
            )
            .or_else(|| p.cost_hessian(&x));
        let h: SparseMatrix = match model {
            Some(h) => {
                let mut t: Vec<(usize, usize, f64)> = h.triplets().collect();
                for j in 0..n {
                    t.push((j, j, opts.hessian_damping));
                }
                SparseMatrix::from_triplets(n, n, t)
            }
            None => {
                // Damped BFGS on the Lagrangian gradient.
                uses_bfgs = true;
                let b = bfgs.get_or_insert_with(|| DMatrix::identity(n, n));
                if let (Some(pg), Some(px)) = (&prev_grad_l, &prev_x) {
                    let grad_l_now = grad_lagrangian(p, &x, &lam, me, mi);
                    let s = &x - px;
                    let yv = &grad_l_now - pg;
                    let sb = &*b * &s;
                    let sbs = s.dot(&sb);
                    let sy = s.dot(&yv);
                    if s.norm() > 1e-14 && sbs > 1e-14 {
                        // Powell damping keeps the update positive definite.
                        let theta = if sy >= 0.2 * sbs {
                            1.0
                        } else {
                            0.8 * sbs / (sbs - sy)
                        };
                        let r = theta * yv + (1.0 - theta) * &sb;
                        let sr = s.dot(&r);
                        if sr > 1e-14 {
                            *b += &r * r.transpose() / sr - &sb * sb.transpose() / sbs;
                        }
                    }
                }
                SparseMatrix::from_dense(bfgs.as_ref().unwrap())
            }
        };

        // QP subproblem over the step d.
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        for (r, c, v) in jeq.triplets() {
            triplets.push((r, c, v));
        }
        for (r, c, v) in jin.triplets() {
            triplets.push((me + r, c, v));
        }
        for j in 0..n {
            triplets.push((me + mi + j, j, 1.0));
        }
        let a = SparseMatrix::from_triplets(me + mi + n, n, triplets);
        let mut l = DVector::from_element(me + mi + n, f64::NEG_INFINITY);
        let mut u = DVector::from_element(me + mi + n, f64::INFINITY);
        for r in 0..me {
            l[r] = -ceq[r];
            u[r] = -ceq[r];
        }
        for r in 0..mi {
            u[me + r] = -cin[r];
        }
        for j in 0..n {
            l[me + mi + j] = lb[j] - x[j];
            u[me + mi + j] = ub[j] - x[j];
        }
        let qp = QpProblem { p: h.clone(), q: g.clone(), a, l, u };
        let rep = solve_qp_general(&qp, qp_warm.as_ref(), &opts.qp);

        let (d, qp_lam, used_elastic) = match rep.status {
            SolveStatus::Converged => (rep.solution, rep.multipliers, false),
            SolveStatus::MaxIter if rep.kkt_residual <= 1e-5 => {
                (rep.solution, rep.multipliers, false)
            }
            SolveStatus::Infeasible | SolveStatus::MaxIter => {
                // Elastic relaxation with penalized slacks.
                match solve_elastic(&h, &g, &jeq, &ceq, &jin, &cin, &lb, &ub, &x, opts) {
                    Some((d, qlam, slack_l1)) => {
                        let stalled = d.norm() <= 1e-8 * (1.0 + x.norm());
                        if stalled && slack_l1 > 10.0 * opts.tol_feas {
                            elastic_stall += 1;
                        } else {
                            elastic_stall = 0;
                        }
                        if elastic_stall >= 1 && stalled {
                            // Stationary point of the infeasibility measure.
                            let worst = worst_nlp_violation(&ceq, &cin, &x, &lb, &ub);
                            return SolveReport {
                                solution: x,
                                multipliers: lam,
                                kkt_residual: kkt.residual(),
                                iterations: it + 1,
                                status: SolveStatus::Infeasible,
                                worst_violation: worst,
                                merit_history,
                            };
                        }
                        (d, qlam, true)
                    }
                    None => {
                        let worst = worst_nlp_violation(&ceq, &cin, &x, &lb, &ub);
                        return SolveReport {
                            solution: x,
                            multipliers: lam,
                            kkt_residual: kkt.residual(),
                            iterations: it + 1,
                            status: SolveStatus::NumericalFailure,
                            worst_violation: worst,
                            merit_history,
                        };
                    }
                }
            }
            SolveStatus::NumericalFailure => {
                let worst = worst_nlp_violation(&ceq, &cin, &x, &lb, &ub);
                return SolveReport {
                    solution: x,
                    multipliers: lam,
                    kkt_residual: kkt.residual(),
                    iterations: it + 1,
                    status: SolveStatus::NumericalFailure,
                    worst_violation: worst,
                    merit_history,
                };
            }
        };
        if !used_elastic {
            qp_warm = Some(QpWarmStart { x: d.clone(), y: qp_lam.clone() });
        }

        // ℓ1 merit line search, accepting a fixed fraction of the QP model
        // decrease (slope alone under-rejects steps whose quadratic term
        // dominates, e.g. when the cost matrix misses constraint curvature).
        let lam_inf = qp_lam.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        merit_mu = merit_mu.max(1.1 * lam_inf).max(1.0);
        let l1_now = l1_infeasibility(&ceq, &cin);
        let phi0 = p.cost(&x) + merit_mu * l1_now;
        let l1_pred = l1_infeasibility(
            &(&ceq + jeq.mul_vec(&d)),
            &(&cin + jin.mul_vec(&d)),
        );
        let model_decrease = -(g.dot(&d) + 0.5 * d.dot(&h.mul_vec(&d)))
            + merit_mu * (l1_now - l1_pred);
        let descent = if model_decrease > 0.0 {
            -model_decrease
        } else {
            g.dot(&d) - merit_mu * l1_now
        };

        let mut t = 1.0f64;
        let mut accepted = false;
        let mut x_new = x.clone();
        while t >= opts.min_step {
            x_new = &x + t * &d;
            for j in 0..n {
                x_new[j] = x_new[j].clamp(lb[j], ub[j]);
            }
            let phi = p.cost(&x_new)
                + merit_mu
                    * l1_infeasibility(&p.eq_constraints(&x_new), &p.ineq_constraints(&x_new));
            if phi <= phi0 + opts.armijo * t * descent.min(0.0) + 1e-14 * phi0.abs().max(1.0) {
                merit_history.push(phi);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No merit progress along d: accept the multipliers (they may
            // close the KKT gap at a solution reached up to tolerance) and
            // let the next head-of-loop check decide.
            lam = grow_multipliers(qp_lam, me, mi, n);
            let kkt_retry = check_kkt(p, &x, &lam, opts.tol_kkt);
            if kkt_retry.residual() <= opts.tol_kkt && viol <= opts.tol_feas.max(opts.tol_kkt) {
                continue;
            }
            let worst = worst_nlp_violation(&ceq, &cin, &x, &lb, &ub);
            return SolveReport {
                solution: x,
                multipliers: lam,
                kkt_residual: kkt_retry.residual(),
                iterations: it + 1,
                status: SolveStatus::NumericalFailure,
                worst_violation: worst,
                merit_history,
            };
        }

        if uses_bfgs {
            let lam_new = grow_multipliers(qp_lam.clone(), me, mi, n);
            prev_grad_l = Some(grad_lagrangian(p, &x, &lam_new, me, mi));
            prev_x = Some(x.clone());
        }
        x = x_new;
        lam = grow_multipliers(qp_lam, me, mi, n);
    }

    let ceq = p.eq_constraints(&x);
    let cin = p.ineq_constraints(&x);
    let kkt = check_kkt(p, &x, &lam, opts.tol_kkt);
    SolveReport {
        solution: x.clone(),
        multipliers: lam,
        kkt_residual: kkt.residual(),
        iterations: opts.max_iter,
        status: SolveStatus::MaxIter,
        worst_violation: worst_nlp_violation(&ceq, &cin, &x, &lb, &ub),
        merit_history,
    }
}

/// The QP stacks multipliers as (eq, ineq, bounds); elastic solves produce a
/// longer vector whose tail refers to slack bounds — truncate accordingly.
fn grow_multipliers(qp_lam: DVector<f64>, me: usize, mi: usize, n: usize) -> DVector<f64> {
    let mut out = DVector::zeros(me + mi + n);
    let take = qp_lam.len().min(out.len());
    out.rows_mut(0, take).copy_from(&qp_lam.rows(0, take));
    out
}

fn grad_lagrangian<P: Nlp + ?Sized>(
    p: &P,
    x: &DVector<f64>,
    lam: &DVector<f64>,
    me: usize,
    mi: usize,
) -> DVector<f64> {
    let mut g = p.cost_grad(x);
    if me > 0 {
        g += p.eq_jacobian(x).tr_mul_vec(&lam.rows(0, me).into_owned());
    }
    if mi > 0 {
        g += p.ineq_jacobian(x).tr_mul_vec(&lam.rows(me, mi).into_owned());
    }
    g
}

fn worst_nlp_violation(
    ceq: &DVector<f64>,
    cin: &DVector<f64>,
    x: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
) -> Option<WorstViolation> {
    let me = ceq.len();
    let mi = cin.len();
    let mut worst: Option<WorstViolation> = None;
    let mut push = |row: usize, amount: f64| {
        if amount > 0.0 && worst.map_or(true, |w| amount > w.amount) {
            worst = Some(WorstViolation { row, amount });
        }
    };
    for i in 0..me {
        push(i, ceq[i].abs());
    }
    for i in 0..mi {
        push(me + i, cin[i]);
    }
    for j in 0..x.len() {
        push(me + mi + j, (lb[j] - x[j]).max(x[j] - ub[j]));
    }
    worst
}

/// Elastic subproblem: minimize ½dᵀHd + gᵀd + penalty·Σs subject to the
/// linearized constraints relaxed by slacks s ≥ 0. Returns the step, the
/// multipliers of the original rows, and the ℓ1 slack size.
#[allow(clippy::too_many_arguments)]
fn solve_elastic(
    h: &SparseMatrix,
    g: &DVector<f64>,
    jeq: &SparseMatrix,
    ceq: &DVector<f64>,
    jin: &SparseMatrix,
    cin: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
    x: &DVector<f64>,
    opts: &NlpOptions,
) -> Option<(DVector<f64>, DVector<f64>, f64)> {
    let n = g.len();
    let me = ceq.len();
    let mi = cin.len();
    let ns = me + mi;
    let nt = n + ns;
    let penalty =
        opts.elastic_penalty * g.iter().fold(1.0f64, |m, v| m.max(v.abs()));

    let mut pt: Vec<(usize, usize, f64)> = h.triplets().collect();
    for s in 0..ns {
        pt.push((n + s, n + s, 1e-8)); // keep the expanded QP strongly convex
    }
    let p_exp = SparseMatrix::from_triplets(nt, nt, pt);
    let mut q = DVector::zeros(nt);
    q.rows_mut(0, n).copy_from(g);
    for s in 0..ns {
        q[n + s] = penalty;
    }

    // Rows: eq upper (Jd − s ≤ −c), eq lower (Jd + s ≥ −c), ineq
    // (Jd − s ≤ −c), then bounds on d and s.
    let mut at: Vec<(usize, usize, f64)> = Vec::new();
    let mut l = DVector::from_element(2 * me + mi + nt, f64::NEG_INFINITY);
    let mut u = DVector::from_element(2 * me + mi + nt, f64::INFINITY);
    for (r, c, v) in jeq.triplets() {
        at.push((r, c, v));
        at.push((me + r, c, v));
    }
    for r in 0..me {
        at.push((r, n + r, -1.0));
        u[r] = -ceq[r];
        at.push((me + r, n + r, 1.0));
        l[me + r] = -ceq[r];
    }
    for (r, c, v) in jin.triplets() {
        at.push((2 * me + r, c, v));
    }
    for r in 0..mi {
        at.push((2 * me + r, n + me + r, -1.0));
        u[2 * me + r] = -cin[r];
    }
    for j in 0..n {
        at.push((2 * me + mi + j, j, 1.0));
        l[2 * me + mi + j] = lb[j] - x[j];
        u[2 * me + mi + j] = ub[j] - x[j];
    }
    for s in 0..ns {
        at.push((2 * me + mi + n + s, n + s, 1.0));
        l[2 * me + mi + n + s] = 0.0;
    }
    let a = SparseMatrix::from_triplets(2 * me + mi + nt, nt, at);
    let qp = QpProblem { p: p_exp, q, a, l, u };
    let rep = solve_qp_general(&qp, None, &opts.qp);
    if !matches!(rep.status, SolveStatus::Converged | SolveStatus::MaxIter) {
        return None;
    }
    let d = rep.solution.rows(0, n).into_owned();
    let slack_l1: f64 = rep.solution.rows(n, ns).iter().map(|v| v.max(0.0)).sum();
    // Map multipliers of the relaxed rows back onto the original layout:
    // equality rows take the sum of their two one-sided duals.
    let mut lam = DVector::zeros(me + mi + n);
    for r in 0..me {
        lam[r] = rep.multipliers[r] + rep.multipliers[me + r];
    }
    for r in 0..mi {
        lam[me + r] = rep.multipliers[2 * me + r];
    }
    for j in 0..n {
        lam[me + mi + j] = rep.multipliers[2 * me + mi + j];
    }
    Some((d, lam, slack_l1))
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

/// Result of checking analytic derivatives against central differences.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err_grad: f64,
    pub max_rel_err_eq: f64,
    pub max_rel_err_ineq: f64,
    pub pass: bool,
}

/// Compare the cost gradient and both constraint Jacobians against central
/// finite differences at the given points.
pub fn finite_difference_check<P: Nlp + ?Sized>(
    p: &P,
    points: &[DVector<f64>],
    step: f64,
    rel_tol: f64,
) -> FdReport {
    let n = p.dim();
    let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
    let mut eg = 0.0f64;
    let mut ee = 0.0f64;
    let mut ei = 0.0f64;
    for x in points {
        let grad = p.cost_grad(x);
        let jeq = p.eq_jacobian(x).to_dense();
        let jin = p.ineq_jacobian(x).to_dense();
        for j in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += step;
            xm[j] -= step;
            let fd_g = (p.cost(&xp) - p.cost(&xm)) / (2.0 * step);
            eg = eg.max(rel(fd_g, grad[j]));
            if p.n_eq() > 0 {
                let fe = (p.eq_constraints(&xp) - p.eq_constraints(&xm)) / (2.0 * step);
                for r in 0..p.n_eq() {
                    ee = ee.max(rel(fe[r], jeq[(r, j)]));
                }
            }
            if p.n_ineq() > 0 {
                let fi = (p.ineq_constraints(&xp) - p.ineq_constraints(&xm)) / (2.0 * step);
                for r in 0..p.n_ineq() {
                    ei = ei.max(rel(fi[r], jin[(r, j)]));
                }
            }
        }
    }
    FdReport {
        max_rel_err_grad: eg,
        max_rel_err_eq: ee,
        max_rel_err_ineq: ei,
        pass: eg <= rel_tol && ee <= rel_tol && ei <= rel_tol,
    }
}

/// Deterministic sample points inside the (possibly unbounded) box, for
/// derivative checks.
pub fn random_points_within_bounds<P: Nlp + ?Sized>(
    p: &P,
    count: usize,
    seed: u64,
) -> Vec<DVector<f64>> {
    let n = p.dim();
    let (lb, ub) = p.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            DVector::from_fn(n, |j, _| {
                let lo = if lb[j].is_finite() { lb[j] } else { -1.0 };
                let hi = if ub[j].is_finite() { ub[j] } else { 1.0 };
                if hi > lo {
                    rng.gen_range(lo..hi)
                } else {
                    lo
                }
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// min ½xᵀQx + bᵀx, no constraints, quasi-second-order matrix supplied.
    struct Quadratic {
        q: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl Nlp for Quadratic {
        fn dim(&self) -> usize {
            self.b.len()
        }
        fn n_eq(&self) -> usize {
            0
        }
        fn n_ineq(&self) -> usize {
            0
        }
        fn cost(&self, x: &DVector<f64>) -> f64 {
            0.5 * x.dot(&(&self.q * x)) + self.b.dot(x)
        }
        fn cost_grad(&self, x: &DVector<f64>) -> DVector<f64> {
            &self.q * x + &self.b
        }
        fn eq_constraints(&self, _x: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(0)
        }
        fn ineq_constraints(&self, _x: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(0)
        }
        fn eq_jacobian(&self, _x: &DVector<f64>) -> SparseMatrix {
            SparseMatrix::from_triplets(0, self.dim(), std::iter::empty())
        }
        fn ineq_jacobian(&self, _x: &DVector<f64>) -> SparseMatrix {
            SparseMatrix::from_triplets(0, self.dim(), std::iter::empty())
        }
        fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (
                DVector::from_element(self.dim(), f64::NEG_INFINITY),
                DVector::from_element(self.dim(), f64::INFINITY),
            )
        }
        fn cost_hessian(&self, _x: &DVector<f64>) -> Option<SparseMatrix> {
            Some(SparseMatrix::from_dense(&self.q))
        }
    }

    /// Rosenbrock valley with a lower bound on the first variable; solved
    /// with the BFGS path (no cost matrix supplied).
    struct BoundedRosenbrock;

    impl Nlp for BoundedRosenbrock {
        fn dim(&self) -> usize {
            2
        }
        fn n_eq(&self) -> usize {
            0
        }
        fn n_ineq(&self) -> usize {
            0
        }
        fn cost(&self, x: &DVector<f64>) -> f64 {
            (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
        }
        fn cost_grad(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ])
        }
        fn eq_constraints(&self, _x: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(0)
        }
        fn ineq_constraints(&self, _x: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(0)
        }
        fn eq_jacobian(&self, _x: &DVector<f64>) -> SparseMatrix {
            SparseMatrix::from_triplets(0, 2, std::iter::empty())
        }
        fn ineq_jacobian(&self, _x: &DVector<f64>) -> SparseMatrix {
            SparseMatrix::from_triplets(0, 2, std::iter::empty())
        }
        fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (
                DVector::from_vec(vec![1.2, f64::NEG_INFINITY]),
                DVector::from_element(2, f64::INFINITY),
            )
        }
    }

    /// min ½‖x − (2,0)‖² subject to ‖x‖² − 1 ≤ 0: solution (1,0), λ = 1/2.
    struct DiskProjection;

    impl Nlp for DiskProjection {
        fn dim(&self) -> usize {
            2
        }
        fn n_eq(&self) -> usize {
            0
        }
        fn n_ineq(&self) -> usize {
            1
        }
        fn cost(&self, x: &DVector<f64>) -> f64 {
            0.5 * ((x[0] - 2.0).powi(2) + x[1].powi(2))
        }
        fn cost_grad(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![x[0] - 2.0, x[1]])
        }
        fn eq_constraints(&self, _x: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(0)
        }
        fn ineq_constraints(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![x[0] * x[0] + x[1] * x[1] - 1.0])
        }
        fn eq_jacobian(&self, _x: &DVector<f64>) -> SparseMatrix {
            SparseMatrix::from_triplets(0, 2, std::iter::empty())
        }
        fn ineq_jacobian(&self, x: &DVector<f64>) -> SparseMatrix {
            SparseMatrix::from_triplets(1, 2, vec![(0, 0, 2.0 * x[0]), (0, 1, 2.0 * x[1])])
        }
        fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (
                DVector::from_element(2, f64::NEG_INFINITY),
                DVector::from_element(2, f64::INFINITY),
            )
        }
        fn cost_hessian(&self, _x: &DVector<f64>) -> Option<SparseMatrix> {
            Some(SparseMatrix::identity(2))
        }
    }

    /// x ≥ 1 and x ≤ −1 simultaneously: infeasible by construction.
    struct Contradiction;

    impl Nlp for Contradiction {
        fn dim(&self) -> usize {
            1
        }
        fn n_eq(&self) -> usize {
            0
        }
        fn n_ineq(&self) -> usize {
            2
        }
        fn cost(&self, x: &DVector<f64>) -> f64 {
            0.5 * x[0] * x[0]
        }
        fn cost_grad(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![x[0]])
        }
        fn eq_constraints(&self, _x: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(0)
        }
        fn ineq_constraints(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![1.0 - x[0], x[0] + 1.0])
        }
        fn eq_jacobian(&self, _x: &DVector<f64>) -> SparseMatrix {
            SparseMatrix::from_triplets(0, 1, std::iter::empty())
        }
        fn ineq_jacobian(&self, _x: &DVector<f64>) -> SparseMatrix {
            SparseMatrix::from_triplets(2, 1, vec![(0, 0, -1.0), (1, 0, 1.0)])
        }
        fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (
                DVector::from_element(1, f64::NEG_INFINITY),
                DVector::from_element(1, f64::INFINITY),
            )
        }
        fn cost_hessian(&self, _x: &DVector<f64>) -> Option<SparseMatrix> {
            Some(SparseMatrix::identity(1))
        }
    }

    fn quadratic_problem() -> Quadratic {
        let r = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.5, -0.2, 0.0, -0.2, 1.0]);
        Quadratic { q: &r * r.transpose(), b: DVector::from_vec(vec![1.0, -2.0, 0.5]) }
    }

    #[test]
    fn unconstrained_quadratic_is_solved_in_at_most_two_iterations() {
        let p = quadratic_problem();
        let rep = solve_nlp(&p, &DVector::from_vec(vec![5.0, -3.0, 2.0]), &NlpOptions::default());
        assert_eq!(rep.status, SolveStatus::Converged);
        assert!(rep.iterations <= 2, "took {} iterations", rep.iterations);
        let exact = p.q.clone().lu().solve(&(-&p.b)).unwrap();
        assert_abs_diff_eq!((&rep.solution - exact).norm(), 0.0, epsilon = 1e-7);
    }

    #[test]
    fn bounded_rosenbrock_matches_a_dense_grid_search() {
        // Oracle: exhaustive grid over the feasible box.
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let p = BoundedRosenbrock;
        let mut a = 1.2f64;
        while a <= 2.0 {
            let mut b = 0.0f64;
            while b <= 4.0 {
                let c = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                if c < best.0 {
                    best = (c, a, b);
                }
                b += 1e-3;
            }
            a += 1e-3;
        }

        let opts = NlpOptions { max_iter: 200, ..NlpOptions::default() };
        let rep = solve_nlp(&p, &DVector::from_vec(vec![2.0, 2.0]), &opts);
        assert_eq!(rep.status, SolveStatus::Converged);
        assert_abs_diff_eq!(rep.solution[0], best.1, epsilon = 1e-3);
        assert_abs_diff_eq!(rep.solution[1], best.2, epsilon = 2e-3);
        assert!(p.cost(&rep.solution) <= best.0 + 1e-6);
        // The bound is active at the optimum.
        assert_abs_diff_eq!(rep.solution[0], 1.2, epsilon = 1e-7);
    }

    #[test]
    fn warm_start_at_a_kkt_point_returns_immediately() {
        let p = DiskProjection;
        let opts = NlpOptions::default();
        let first = solve_nlp(&p, &DVector::from_vec(vec![0.0, 0.5]), &opts);
        assert_eq!(first.status, SolveStatus::Converged);
        assert_abs_diff_eq!(first.solution[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(first.solution[1], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(first.multipliers[0], 0.5, epsilon = 1e-5);

        let again = solve_nlp(&p, &first.solution, &opts);
        assert_eq!(again.status, SolveStatus::Converged);
        assert!(again.iterations <= 1, "took {} iterations", again.iterations);
        assert_abs_diff_eq!((&again.solution - &first.solution).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn merit_function_never_increases_across_accepted_steps() {
        let rep = solve_nlp(
            &BoundedRosenbrock,
            &DVector::from_vec(vec![2.0, 2.0]),
            &NlpOptions { max_iter: 200, ..NlpOptions::default() },
        );
        assert!(rep.merit_history.len() >= 2);
        for w in rep.merit_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "merit rose from {} to {}", w[0], w[1]);
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let p = DiskProjection;
        let opts = NlpOptions::default();
        let a = solve_nlp(&p, &DVector::from_vec(vec![0.3, -0.4]), &opts);
        let b = solve_nlp(&p, &DVector::from_vec(vec![0.3, -0.4]), &opts);
        assert_eq!(a.solution.as_slice(), b.solution.as_slice());
        assert_eq!(a.multipliers.as_slice(), b.multipliers.as_slice());
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn contradictory_constraints_are_certified_infeasible() {
        let rep = solve_nlp(&Contradiction, &DVector::from_vec(vec![0.0]), &NlpOptions::default());
        assert_eq!(rep.status, SolveStatus::Infeasible);
        let worst = rep.worst_violation.expect("violation report");
        assert!(worst.amount >= 0.9, "violation = {}", worst.amount);
    }

    #[test]
    fn converged_reports_pass_their_own_kkt_check() {
        let p = DiskProjection;
        let opts = NlpOptions::default();
        let rep = solve_nlp(&p, &DVector::from_vec(vec![0.0, 0.5]), &opts);
        assert_eq!(rep.status, SolveStatus::Converged);
        let check = check_kkt(&p, &rep.solution, &rep.multipliers, opts.tol_kkt);
        assert!(check.pass, "kkt breakdown: {check:?}");

        // Perturbing into the constraint makes the check fail.
        let mut bad = rep.solution.clone();
        bad[0] += 1e-3;
        let check_bad = check_kkt(&p, &bad, &rep.multipliers, opts.tol_kkt);
        assert!(!check_bad.pass);
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let p = DiskProjection;
        let points = random_points_within_bounds(&p, 20, 42);
        let report = finite_difference_check(&p, &points, 1e-6, 1e-5);
        assert!(report.pass, "fd report: {report:?}");
    }

    /// A deliberately wrong Jacobian must be caught by the checker.
    struct BrokenJacobian;

    impl Nlp for BrokenJacobian {
        fn dim(&self) -> usize {
            2
        }
        fn n_eq(&self) -> usize {
            1
        }
        fn n_ineq(&self) -> usize {
            0
        }
        fn cost(&self, x: &DVector<f64>) -> f64 {
            x.norm_squared()
        }
        fn cost_grad(&self, x: &DVector<f64>) -> DVector<f64> {
            2.0 * x
        }
        fn eq_constraints(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![x[0] * x[1] - 1.0])
        }
        fn ineq_constraints(&self, _x: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(0)
        }
        fn eq_jacobian(&self, x: &DVector<f64>) -> SparseMatrix {
            // Sign error on the second entry.
            SparseMatrix::from_triplets(1, 2, vec![(0, 0, x[1]), (0, 1, -x[0])])
        }
        fn ineq_jacobian(&self, _x: &DVector<f64>) -> SparseMatrix {
            SparseMatrix::from_triplets(0, 2, std::iter::empty())
        }
        fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (DVector::from_element(2, 0.5), DVector::from_element(2, 2.0))
        }
    }

    #[test]
    fn corrupted_jacobians_fail_the_finite_difference_check() {
        let p = BrokenJacobian;
        let points = random_points_within_bounds(&p, 20, 7);
        let report = finite_difference_check(&p, &points, 1e-6, 1e-5);
        assert!(!report.pass);
        assert!(report.max_rel_err_eq > 1e-2);
    }
}
