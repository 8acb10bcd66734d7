//! Sparse convex QP solver based on operator splitting (ADMM) with an
//! active-set polishing step.
//!
//! Problems are posed in the two-sided form
//!
//! ```text
//!   minimize    ½ xᵀPx + qᵀx
//!   subject to  l ≤ Ax ≤ u,
//! ```
//!
//! with equalities encoded as `l = u` and one-sided rows using ±∞. The
//! solver Ruiz-equilibrates the data, factors the ADMM normal matrix
//! `P + σI + Aᵀdiag(ρ)A` once per step-size change with an envelope
//! (variable-band) Cholesky that exploits the stage-banded structure of
//! receding-horizon problems, and finishes with a regularized active-set
//! solve plus iterative refinement so polished solutions reach 1e-8 KKT
//! residuals. Primal infeasibility is certified from the dual update
//! direction and reported with the most violated row.
//!
//! Everything is deterministic: no randomization, no data-dependent
//! reordering.

use super::{SolveReport, SolveStatus, WorstViolation};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Sparse matrix (CSR)
// ---------------------------------------------------------------------------

/// Compressed sparse row matrix; the only format the solver needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl SparseMatrix {
    /// Build from (row, col, value) triplets; duplicates are summed,
    /// explicit zeros dropped.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nrows];
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            rows[r].push((c, v));
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for row in &mut rows {
            row.sort_by_key(|&(c, _)| c);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for &(c, v) in row.iter() {
                match merged.last_mut() {
                    Some((lc, lv)) if *lc == c => *lv += v,
                    _ => merged.push((c, v)),
                }
            }
            for (c, v) in merged {
                if v != 0.0 {
                    indices.push(c);
                    data.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self { nrows, ncols, indptr, indices, data }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let triplets = (0..m.nrows()).flat_map(|r| {
            (0..m.ncols()).filter_map(move |c| {
                let v = m[(r, c)];
                (v != 0.0).then_some((r, c, v))
            })
        });
        Self::from_triplets(m.nrows(), m.ncols(), triplets)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)))
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    /// Column indices and values of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.data[span])
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.ncols);
        let mut y = DVector::zeros(self.nrows);
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            let mut acc = 0.0;
            for (&c, &v) in cols.iter().zip(vals) {
                acc += v * x[c];
            }
            y[r] = acc;
        }
        y
    }

    pub fn tr_mul_vec(&self, y: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(y.len(), self.nrows);
        let mut x = DVector::zeros(self.ncols);
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            let yr = y[r];
            if yr != 0.0 {
                for (&c, &v) in cols.iter().zip(vals) {
                    x[c] += v * yr;
                }
            }
        }
        x
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    fn scale_rows(&mut self, e: &[f64]) {
        for r in 0..self.nrows {
            let span = self.indptr[r]..self.indptr[r + 1];
            for v in &mut self.data[span] {
                *v *= e[r];
            }
        }
    }

    fn scale_cols(&mut self, d: &[f64]) {
        for (idx, &c) in self.indices.iter().enumerate() {
            self.data[idx] *= d[c];
        }
    }

    fn col_inf_norms(&self) -> Vec<f64> {
        let mut norms = vec![0.0f64; self.ncols];
        for (idx, &c) in self.indices.iter().enumerate() {
            norms[c] = norms[c].max(self.data[idx].abs());
        }
        norms
    }

    fn row_inf_norms(&self) -> Vec<f64> {
        (0..self.nrows)
            .map(|r| self.row(r).1.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Envelope (variable-band) Cholesky
// ---------------------------------------------------------------------------

/// Lower-triangular Cholesky factor stored by rows over the matrix envelope
/// (columns `fnz[i]..=i` of each row). The envelope of an SPD matrix is
/// closed under Cholesky, so no fill occurs outside it; for stage-ordered
/// receding-horizon problems this is effectively a banded factorization.
struct EnvelopeChol {
    n: usize,
    fnz: Vec<usize>,
    offs: Vec<usize>,
    data: Vec<f64>,
}

impl EnvelopeChol {
    /// Factor the lower triangle of `m` over the envelope `fnz`.
    fn factor(m: &DMatrix<f64>, fnz: &[usize]) -> Option<Self> {
        let n = m.nrows();
        debug_assert_eq!(fnz.len(), n);
        let mut offs = Vec::with_capacity(n + 1);
        offs.push(0);
        for (i, &f) in fnz.iter().enumerate() {
            debug_assert!(f <= i);
            offs.push(offs[i] + (i - f + 1));
        }
        let mut data = vec![0.0; offs[n]];
        for i in 0..n {
            for j in fnz[i]..=i {
                data[offs[i] + (j - fnz[i])] = m[(i, j)];
            }
        }
        let off = |i: usize, j: usize| offs[i] + (j - fnz[i]);
        for i in 0..n {
            for j in fnz[i]..=i {
                let lo = fnz[i].max(fnz[j]);
                let mut sum = data[off(i, j)];
                for k in lo..j {
                    sum -= data[off(i, k)] * data[off(j, k)];
                }
                if j < i {
                    data[off(i, j)] = sum / data[off(j, j)];
                } else {
                    if sum <= 0.0 || !sum.is_finite() {
                        return None;
                    }
                    data[off(i, i)] = sum.sqrt();
                }
            }
        }
        Some(Self { n, fnz: fnz.to_vec(), offs, data })
    }

    fn solve_in_place(&self, b: &mut DVector<f64>) {
        let off = |i: usize, j: usize| self.offs[i] + (j - self.fnz[i]);
        for i in 0..self.n {
            let mut sum = b[i];
            for k in self.fnz[i]..i {
                sum -= self.data[off(i, k)] * b[k];
            }
            b[i] = sum / self.data[off(i, i)];
        }
        for i in (0..self.n).rev() {
            let xi = b[i] / self.data[off(i, i)];
            b[i] = xi;
            for k in self.fnz[i]..i {
                b[k] -= self.data[off(i, k)] * xi;
            }
        }
    }
}

/// First structurally-nonzero column per row of `P + σI + Aᵀdiag(ρ)A`.
fn normal_matrix_envelope(n: usize, p: &SparseMatrix, a: &SparseMatrix) -> Vec<usize> {
    let mut fnz: Vec<usize> = (0..n).collect();
    for (r, c, _) in p.triplets() {
        let (hi, lo) = if r >= c { (r, c) } else { (c, r) };
        fnz[hi] = fnz[hi].min(lo);
    }
    for r in 0..a.nrows() {
        let (cols, _) = a.row(r);
        if let Some(&first) = cols.first() {
            for &c in cols {
                fnz[c] = fnz[c].min(first);
            }
        }
    }
    fnz
}

/// Assemble the dense lower triangle of `P + σI + Aᵀdiag(ρ)A`.
fn assemble_normal_matrix(
    n: usize,
    p: &SparseMatrix,
    a: &SparseMatrix,
    sigma: f64,
    rho: &[f64],
) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for (r, c, v) in p.triplets() {
        if c <= r {
            m[(r, c)] += v;
        }
    }
    for i in 0..n {
        m[(i, i)] += sigma;
    }
    for r in 0..a.nrows() {
        let (cols, vals) = a.row(r);
        let w = rho[r];
        for (ia, (&ca, &va)) in cols.iter().zip(vals).enumerate() {
            for (&cb, &vb) in cols[..=ia].iter().zip(&vals[..=ia]) {
                // cols are sorted ascending, so cb <= ca.
                m[(ca, cb)] += w * va * vb;
            }
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Problem, options, scaling
// ---------------------------------------------------------------------------

/// Two-sided sparse QP data.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p: SparseMatrix,
    pub q: DVector<f64>,
    pub a: SparseMatrix,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    fn validate(&self) {
        let n = self.q.len();
        let m = self.l.len();
        assert_eq!(self.p.nrows(), n);
        assert_eq!(self.p.ncols(), n);
        assert_eq!(self.a.ncols(), n);
        assert_eq!(self.a.nrows(), m);
        assert_eq!(self.u.len(), m);
        for i in 0..m {
            assert!(self.l[i] <= self.u[i], "row {i}: l > u");
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpOptions {
    pub max_iter: usize,
    /// Absolute KKT tolerance of the final (polished) solution.
    pub eps_abs: f64,
    /// Relative addition to all tolerances.
    pub eps_rel: f64,
    /// Proximal regularization of the x-update.
    pub sigma: f64,
    /// Initial step size; adapted online unless `adaptive_rho` is off.
    pub rho: f64,
    /// Over-relaxation in (1, 2).
    pub alpha: f64,
    pub adaptive_rho: bool,
    /// Residuals, certificates, and step-size adaption run every this many
    /// iterations.
    pub check_interval: usize,
    pub polish: bool,
    /// Tikhonov regularization of the polish KKT system.
    pub polish_delta: f64,
    /// Relative tolerance of the infeasibility certificates.
    pub eps_infeasible: f64,
    /// Step-size multiplier on equality rows.
    pub eq_rho_scale: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            eps_abs: 1e-8,
            eps_rel: 0.0,
            sigma: 1e-6,
            rho: 0.1,
            alpha: 1.6,
            adaptive_rho: true,
            check_interval: 25,
            polish: true,
            polish_delta: 1e-7,
            eps_infeasible: 1e-7,
            eq_rho_scale: 1e3,
        }
    }
}

/// Warm-start point (unscaled primal and dual).
#[derive(Debug, Clone)]
pub struct QpWarmStart {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

struct Scaling {
    /// Variable scaling: x = d ∘ x̄.
    d: Vec<f64>,
    /// Row scaling: ȳ-to-y uses y = (e ∘ ȳ)/c.
    e: Vec<f64>,
    /// Cost scaling.
    c: f64,
}

/// Modified Ruiz equilibration (iterated ∞-norm scaling plus cost
/// normalization). Returns the scaled problem and the scaling to undo it.
fn ruiz_equilibrate(prob: &QpProblem, iterations: usize) -> (QpProblem, Scaling) {
    let n = prob.q.len();
    let m = prob.l.len();
    let mut scaled = prob.clone();
    let mut d = vec![1.0; n];
    let mut e = vec![1.0; m];
    let mut c = 1.0;

    for _ in 0..iterations {
        let pc = scaled.p.col_inf_norms();
        let ac = scaled.a.col_inf_norms();
        let mut delta = vec![1.0; n];
        for j in 0..n {
            let norm = pc[j].max(ac[j]);
            if norm > 1e-12 {
                delta[j] = 1.0 / norm.sqrt();
            }
        }
        scaled.p.scale_rows(&delta);
        scaled.p.scale_cols(&delta);
        for j in 0..n {
            scaled.q[j] *= delta[j];
            d[j] *= delta[j];
        }
        scaled.a.scale_cols(&delta);

        let ar = scaled.a.row_inf_norms();
        let mut eps_row = vec![1.0; m];
        for i in 0..m {
            if ar[i] > 1e-12 {
                eps_row[i] = 1.0 / ar[i].sqrt();
            }
        }
        scaled.a.scale_rows(&eps_row);
        for i in 0..m {
            scaled.l[i] *= eps_row[i];
            scaled.u[i] *= eps_row[i];
            e[i] *= eps_row[i];
        }

        // Cost normalization.
        let pc = scaled.p.col_inf_norms();
        let mean_p = if n > 0 { pc.iter().sum::<f64>() / n as f64 } else { 0.0 };
        let q_norm = scaled.q.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let gamma = 1.0 / mean_p.max(q_norm).max(1e-12).min(1e12);
        let gamma = gamma.clamp(1e-6, 1e6);
        for v in &mut scaled.p.data {
            *v *= gamma;
        }
        scaled.q *= gamma;
        c *= gamma;
    }

    (scaled, Scaling { d, e, c })
}

// ---------------------------------------------------------------------------
// KKT residual
// ---------------------------------------------------------------------------

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

/// Unscaled KKT residual: max of stationarity, constraint violation, and
/// complementarity (wrong-side duals on infinite bounds count directly).
pub fn qp_kkt_residual(prob: &QpProblem, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let ax = prob.a.mul_vec(x);
    let stat = inf_norm(&(prob.p.mul_vec(x) + &prob.q + prob.a.tr_mul_vec(y)));
    let mut prim = 0.0f64;
    let mut comp = 0.0f64;
    for i in 0..ax.len() {
        prim = prim.max(prob.l[i] - ax[i]).max(ax[i] - prob.u[i]);
        let up = y[i].max(0.0);
        let lo = (-y[i]).max(0.0);
        let comp_up =
            if prob.u[i].is_finite() { up * (prob.u[i] - ax[i]).abs() } else { up };
        let comp_lo =
            if prob.l[i].is_finite() { lo * (ax[i] - prob.l[i]).abs() } else { lo };
        comp = comp.max(comp_up).max(comp_lo);
    }
    stat.max(prim.max(0.0)).max(comp)
}

fn worst_violation(prob: &QpProblem, x: &DVector<f64>) -> Option<WorstViolation> {
    let ax = prob.a.mul_vec(x);
    let mut worst: Option<WorstViolation> = None;
    for i in 0..ax.len() {
        let v = (prob.l[i] - ax[i]).max(ax[i] - prob.u[i]).max(0.0);
        if worst.map_or(v > 0.0, |w| v > w.amount) {
            worst = Some(WorstViolation { row: i, amount: v });
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

struct Workspace {
    x: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
}

fn build_rho(l: &DVector<f64>, u: &DVector<f64>, rho_bar: f64, eq_scale: f64) -> Vec<f64> {
    (0..l.len())
        .map(|i| {
            if l[i] == u[i] {
                (rho_bar * eq_scale).clamp(1e-6, 1e6)
            } else if l[i] == f64::NEG_INFINITY && u[i] == f64::INFINITY {
                1e-6
            } else {
                rho_bar.clamp(1e-6, 1e6)
            }
        })
        .collect()
}

/// Solve a general two-sided QP. See module docs for the algorithm.
pub fn solve_qp_general(
    prob: &QpProblem,
    warm: Option<&QpWarmStart>,
    opts: &QpOptions,
) -> SolveReport {
    prob.validate();
    let n = prob.q.len();
    let m = prob.l.len();

    let (sp, scaling) = ruiz_equilibrate(prob, 10);
    let fnz = normal_matrix_envelope(n, &sp.p, &sp.a);

    let mut rho_bar = opts.rho;
    let mut rho = build_rho(&sp.l, &sp.u, rho_bar, opts.eq_rho_scale);
    let mut chol =
        match EnvelopeChol::factor(&assemble_normal_matrix(n, &sp.p, &sp.a, opts.sigma, &rho), &fnz)
        {
            Some(c) => c,
            None => {
                return SolveReport {
                    solution: DVector::zeros(n),
                    multipliers: DVector::zeros(m),
                    kkt_residual: f64::INFINITY,
                    iterations: 0,
                    status: SolveStatus::NumericalFailure,
                    worst_violation: None,
                    merit_history: vec![],
                }
            }
        };

    // Scaled iterates.
    let mut ws = Workspace {
        x: DVector::zeros(n),
        z: DVector::zeros(m),
        y: DVector::zeros(m),
    };
    if let Some(w) = warm {
        for j in 0..n {
            ws.x[j] = w.x[j] / scaling.d[j];
        }
        for i in 0..m {
            ws.y[i] = w.y[i] * scaling.c / scaling.e[i];
        }
    }
    let az0 = sp.a.mul_vec(&ws.x);
    for i in 0..m {
        ws.z[i] = az0[i].clamp(sp.l[i], sp.u[i]);
    }

    let unscale = |ws: &Workspace| -> (DVector<f64>, DVector<f64>) {
        let mut x = DVector::zeros(n);
        for j in 0..n {
            x[j] = scaling.d[j] * ws.x[j];
        }
        let mut y = DVector::zeros(m);
        for i in 0..m {
            y[i] = scaling.e[i] * ws.y[i] / scaling.c;
        }
        (x, y)
    };

    let mut stage_eps = opts.eps_abs.max(1e-4);
    let mut iterations = 0usize;
    let mut prev_check: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut best: Option<(DVector<f64>, DVector<f64>, f64)> = None;

    'outer: while iterations < opts.max_iter {
        // --- one ADMM iteration (scaled) ---
        iterations += 1;
        let mut rhs = DVector::zeros(n);
        for j in 0..n {
            rhs[j] = opts.sigma * ws.x[j] - sp.q[j];
        }
        let mut t = DVector::zeros(m);
        for i in 0..m {
            t[i] = rho[i] * ws.z[i] - ws.y[i];
        }
        rhs += sp.a.tr_mul_vec(&t);
        chol.solve_in_place(&mut rhs);
        let x_tilde = rhs;
        let z_tilde = sp.a.mul_vec(&x_tilde);

        let alpha = opts.alpha;
        for j in 0..n {
            ws.x[j] = alpha * x_tilde[j] + (1.0 - alpha) * ws.x[j];
        }
        for i in 0..m {
            let mix = alpha * z_tilde[i] + (1.0 - alpha) * ws.z[i];
            let z_new = (mix + ws.y[i] / rho[i]).clamp(sp.l[i], sp.u[i]);
            ws.y[i] += rho[i] * (mix - z_new);
            ws.z[i] = z_new;
        }

        if iterations % opts.check_interval != 0 && iterations != opts.max_iter {
            continue;
        }

        // --- residuals, certificates, step-size adaption (unscaled) ---
        let (x_u, y_u) = unscale(&ws);
        let mut z_u = DVector::zeros(m);
        for i in 0..m {
            z_u[i] = ws.z[i] / scaling.e[i];
        }
        let ax = prob.a.mul_vec(&x_u);
        let px = prob.p.mul_vec(&x_u);
        let aty = prob.a.tr_mul_vec(&y_u);
        let r_prim = inf_norm(&(&ax - &z_u));
        let r_dual = inf_norm(&(&px + &prob.q + &aty));
        let scale_prim = inf_norm(&ax).max(inf_norm(&z_u));
        let scale_dual = inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&prob.q));

        if let Some((px_prev, py_prev)) = &prev_check {
            // Primal infeasibility certificate from the dual direction.
            let dy = &y_u - py_prev;
            let ny = inf_norm(&dy);
            if ny > 1e-14 {
                let eps = opts.eps_infeasible * ny;
                let mut support = 0.0;
                let mut certified = inf_norm(&prob.a.tr_mul_vec(&dy)) <= eps;
                if certified {
                    for i in 0..m {
                        let up = dy[i].max(0.0);
                        let lo = dy[i].min(0.0);
                        if up > 0.0 {
                            if prob.u[i].is_finite() {
                                support += prob.u[i] * up;
                            } else if up > eps {
                                certified = false;
                                break;
                            }
                        }
                        if lo < 0.0 {
                            if prob.l[i].is_finite() {
                                support += prob.l[i] * lo;
                            } else if -lo > eps {
                                certified = false;
                                break;
                            }
                        }
                    }
                }
                if certified && support <= -eps {
                    return SolveReport {
                        solution: x_u.clone(),
                        multipliers: y_u,
                        kkt_residual: f64::INFINITY,
                        iterations,
                        status: SolveStatus::Infeasible,
                        worst_violation: worst_violation(prob, &x_u),
                        merit_history: vec![],
                    };
                }
            }
            // Dual infeasibility certificate (unbounded direction).
            let dx = &x_u - px_prev;
            let nx = inf_norm(&dx);
            if nx > 1e-14 {
                let eps = opts.eps_infeasible * nx;
                let pdx = prob.p.mul_vec(&dx);
                let adx = prob.a.mul_vec(&dx);
                let mut certified =
                    inf_norm(&pdx) <= eps && prob.q.dot(&dx) <= -eps;
                if certified {
                    for i in 0..m {
                        let ok = if prob.l[i].is_finite() && prob.u[i].is_finite() {
                            adx[i].abs() <= eps
                        } else if prob.u[i].is_finite() {
                            adx[i] <= eps
                        } else if prob.l[i].is_finite() {
                            adx[i] >= -eps
                        } else {
                            true
                        };
                        if !ok {
                            certified = false;
                            break;
                        }
                    }
                }
                if certified {
                    return SolveReport {
                        solution: x_u.clone(),
                        multipliers: y_u,
                        kkt_residual: f64::INFINITY,
                        iterations,
                        status: SolveStatus::NumericalFailure,
                        worst_violation: worst_violation(prob, &x_u),
                        merit_history: vec![],
                    };
                }
            }
        }
        prev_check = Some((x_u.clone(), y_u.clone()));

        // Stage gates are relative to problem scale: they only decide when
        // to attempt a polish, whose result is verified against the true
        // KKT residual before being accepted.
        let eps_prim = stage_eps * scale_prim.max(1.0) + opts.eps_rel * scale_prim;
        let eps_dual = stage_eps * scale_dual.max(1.0) + opts.eps_rel * scale_dual;
        let converged_stage = r_prim <= eps_prim && r_dual <= eps_dual;

        if !converged_stage {
            if opts.adaptive_rho && iterations < opts.max_iter {
                let rp = r_prim / scale_prim.max(1e-10);
                let rd = r_dual / scale_dual.max(1e-10);
                let ratio = (rp / rd.max(1e-16)).sqrt().clamp(1e-4, 1e4);
                if ratio > 5.0 || ratio < 0.2 {
                    rho_bar = (rho_bar * ratio).clamp(1e-6, 1e6);
                    rho = build_rho(&sp.l, &sp.u, rho_bar, opts.eq_rho_scale);
                    match EnvelopeChol::factor(
                        &assemble_normal_matrix(n, &sp.p, &sp.a, opts.sigma, &rho),
                        &fnz,
                    ) {
                        Some(c) => chol = c,
                        None => break 'outer,
                    }
                }
            }
            continue;
        }

        // --- stage converged: polish and decide ---
        let kkt_admm = qp_kkt_residual(prob, &x_u, &y_u);
        let mut cand_x = x_u.clone();
        let mut cand_y = y_u.clone();
        let mut cand_kkt = kkt_admm;
        if opts.polish {
            if let Some((xp, yp)) = polish(prob, &sp, &ws, opts) {
                let kkt_p = qp_kkt_residual(prob, &xp, &yp);
                if kkt_p < cand_kkt {
                    cand_x = xp;
                    cand_y = yp;
                    cand_kkt = kkt_p;
                }
            }
        }
        if best.as_ref().map_or(true, |(_, _, k)| cand_kkt < *k) {
            best = Some((cand_x, cand_y, cand_kkt));
        }
        let target =
            opts.eps_abs + opts.eps_rel * scale_prim.max(scale_dual);
        if best.as_ref().unwrap().2 <= target {
            let (bx, by, bk) = best.unwrap();
            return SolveReport {
                solution: bx,
                multipliers: by,
                kkt_residual: bk,
                iterations,
                status: SolveStatus::Converged,
                worst_violation: None,
                merit_history: vec![],
            };
        }
        // Tighten and keep iterating toward the target.
        if stage_eps <= opts.eps_abs {
            // Already at the tightest stage; keep going until max_iter.
            if iterations >= opts.max_iter {
                break;
            }
        } else {
            stage_eps = (stage_eps / 100.0).max(opts.eps_abs);
        }
    }

    // Iteration budget exhausted; give polish a final chance.
    let (x_u, y_u) = unscale(&ws);
    let mut kkt_now = qp_kkt_residual(prob, &x_u, &y_u);
    let (mut x_u, mut y_u) = (x_u, y_u);
    if opts.polish {
        if let Some((xp, yp)) = polish(prob, &sp, &ws, opts) {
            let kkt_p = qp_kkt_residual(prob, &xp, &yp);
            if kkt_p < kkt_now {
                x_u = xp;
                y_u = yp;
                kkt_now = kkt_p;
            }
        }
    }
    let (bx, by, bk) = match best {
        Some((bx, by, bk)) if bk < kkt_now => (bx, by, bk),
        _ => (x_u, y_u, kkt_now),
    };
    let scale = inf_norm(&prob.q)
        .max(inf_norm(&prob.p.mul_vec(&bx)))
        .max(inf_norm(&prob.a.tr_mul_vec(&by)));
    if bk <= opts.eps_abs + opts.eps_rel * scale {
        return SolveReport {
            solution: bx,
            multipliers: by,
            kkt_residual: bk,
            iterations,
            status: SolveStatus::Converged,
            worst_violation: None,
            merit_history: vec![],
        };
    }
    let wv = worst_violation(prob, &bx);
    SolveReport {
        solution: bx,
        multipliers: by,
        kkt_residual: bk,
        iterations,
        status: SolveStatus::MaxIter,
        worst_violation: wv,
        merit_history: vec![],
    }
}

/// Active-set polish: equality-solve on the rows the projection pinned to a
/// bound, Tikhonov-regularized and iteratively refined against the
/// unregularized KKT system. The working set itself is then refined for a
/// few passes — rows whose multiplier comes out with the wrong sign are
/// released and rows the candidate violates are activated — which lets the
/// polish succeed from a moderately accurate iterate whose clamp pattern has
/// not fully settled. The best candidate by true KKT residual is returned;
/// the caller independently verifies it before acceptance.
fn polish(
    prob: &QpProblem,
    sp: &QpProblem,
    ws: &Workspace,
    opts: &QpOptions,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = prob.q.len();
    let m = prob.l.len();

    // Working set seeded from the projection: 2 = equality row (permanent),
    // 1 = at upper bound, -1 = at lower bound, 0 = inactive.
    let mut side = vec![0i8; m];
    for i in 0..m {
        let (zl, zu) = (sp.l[i], sp.u[i]);
        if zl == zu {
            side[i] = 2;
        } else if zl.is_finite() && ws.z[i] <= zl {
            side[i] = -1;
        } else if zu.is_finite() && ws.z[i] >= zu {
            side[i] = 1;
        }
    }

    // Factor P + δI over its own envelope (working-set independent).
    let delta = opts.polish_delta;
    let empty = SparseMatrix::from_triplets(0, n, std::iter::empty());
    let fnz_p = normal_matrix_envelope(n, &prob.p, &empty);
    let mp = {
        let mut mp = DMatrix::zeros(n, n);
        for (r, c, v) in prob.p.triplets() {
            if c <= r {
                mp[(r, c)] += v;
            }
        }
        for i in 0..n {
            mp[(i, i)] += delta;
        }
        mp
    };
    let chol_p = EnvelopeChol::factor(&mp, &fnz_p)?;
    let mut w0 = -prob.q.clone();
    chol_p.solve_in_place(&mut w0);

    let mut best: Option<(DVector<f64>, DVector<f64>, f64)> = None;
    for _pass in 0..10 {
        // Equilibrate the working-set rows to unit ∞-norm so the Schur
        // complement is well balanced; a near-zero linearized row would
        // otherwise make the refinement contraction arbitrarily slow.
        // Null rows are skipped outright. Multipliers are unscaled on exit.
        let mut active = Vec::new();
        let mut rows: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
        let mut b_act = Vec::new();
        let mut row_scale = Vec::new();
        for i in 0..m {
            if side[i] == 0 {
                continue;
            }
            let (cols, vals) = prob.a.row(i);
            let s = vals.iter().fold(0.0f64, |mx, v| mx.max(v.abs()));
            if s == 0.0 {
                continue;
            }
            active.push(i);
            rows.push((cols.to_vec(), vals.iter().map(|v| v / s).collect()));
            b_act.push(if side[i] == 1 { prob.u[i] / s } else { prob.l[i] / s });
            row_scale.push(s);
        }
        let ma = active.len();
        let b_act = DVector::from_vec(b_act);

        // W = (P+δI)⁻¹ Gᵀ, one envelope solve per active row.
        let mut w = DMatrix::zeros(n, ma);
        for (k, (cols, vals)) in rows.iter().enumerate() {
            let mut col = DVector::zeros(n);
            for (&c, &v) in cols.iter().zip(vals) {
                col[c] = v;
            }
            chol_p.solve_in_place(&mut col);
            w.set_column(k, &col);
        }

        // Schur complement S = G W + δI (dense, size = working set).
        let mut s = DMatrix::zeros(ma, ma);
        for (k, (cols, vals)) in rows.iter().enumerate() {
            for j in 0..ma {
                let mut acc = 0.0;
                for (&c, &v) in cols.iter().zip(vals) {
                    acc += v * w[(c, j)];
                }
                s[(k, j)] = acc;
            }
            s[(k, k)] += delta;
        }
        let chol_s = Cholesky::new(s)?;

        let g_mul = |x: &DVector<f64>| -> DVector<f64> {
            let mut out = DVector::zeros(ma);
            for (k, (cols, vals)) in rows.iter().enumerate() {
                out[k] = cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum();
            }
            out
        };
        let gt_mul = |lam: &DVector<f64>| -> DVector<f64> {
            let mut out = DVector::zeros(n);
            for (k, (cols, vals)) in rows.iter().enumerate() {
                for (&c, &v) in cols.iter().zip(vals) {
                    out[c] += v * lam[k];
                }
            }
            out
        };

        // Initial regularized solve: x = w0 − W λ with
        // λ = S⁻¹ (G (P+δI)⁻¹ (−q) − b_act).
        let mut lam = chol_s.solve(&(g_mul(&w0) - &b_act));
        let mut x = &w0 - &w * &lam;

        // Refinement against the unregularized KKT system. With δ-dependent
        // (near-singular) working sets the residual contracts by roughly
        // δ/σ_min per step, so allow enough steps for slow geometric decay.
        for _step in 0..30 {
            let r_x = -&prob.q - prob.p.mul_vec(&x) - gt_mul(&lam);
            let r_l = &b_act - g_mul(&x);
            if inf_norm(&r_x).max(inf_norm(&r_l)) <= 1e-14 {
                break;
            }
            let mut w1 = r_x.clone();
            chol_p.solve_in_place(&mut w1);
            let dlam = chol_s.solve(&(g_mul(&w1) - &r_l));
            let dx = &w1 - &w * &dlam;
            x += dx;
            lam += dlam;
            if !x.iter().all(|v| v.is_finite()) {
                return None;
            }
        }
        if !lam.iter().all(|v| v.is_finite()) {
            return None;
        }

        let mut y = DVector::zeros(m);
        for (k, &r) in active.iter().enumerate() {
            y[r] = lam[k] / row_scale[k];
        }
        let kkt = qp_kkt_residual(prob, &x, &y);
        if best.as_ref().map_or(true, |(_, _, k)| kkt < *k) {
            best = Some((x.clone(), y.clone(), kkt));
        }

        // Working-set update: release wrong-sign multipliers, activate
        // violated rows. Stop when the set is consistent.
        let ax = prob.a.mul_vec(&x);
        let lam_tol = 1e-8 * (1.0 + inf_norm(&lam));
        let vio_tol = 1e-9 * (1.0 + inf_norm(&ax));
        let mut changed = false;
        for (k, &r) in active.iter().enumerate() {
            match side[r] {
                1 if lam[k] < -lam_tol => {
                    side[r] = 0;
                    changed = true;
                }
                -1 if lam[k] > lam_tol => {
                    side[r] = 0;
                    changed = true;
                }
                _ => {}
            }
        }
        for i in 0..m {
            if side[i] != 0 {
                continue;
            }
            if prob.u[i].is_finite() && ax[i] > prob.u[i] + vio_tol {
                side[i] = 1;
                changed = true;
            } else if prob.l[i].is_finite() && ax[i] < prob.l[i] - vio_tol {
                side[i] = -1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    best.map(|(x, y, _)| (x, y))
}

// ---------------------------------------------------------------------------
// Dense convenience wrapper
// ---------------------------------------------------------------------------

/// Solve a dense QP given as separate equality, inequality (`A_in x ≤ b_in`),
/// and box-bound blocks. Multipliers are stacked in that order (equalities,
/// inequalities, then one bound row per variable).
pub fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    a_in: &DMatrix<f64>,
    b_in: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> SolveReport {
    let n = g.len();
    let me = b_eq.len();
    let mi = b_in.len();
    let mut triplets = Vec::new();
    for r in 0..me {
        for c in 0..n {
            let v = a_eq[(r, c)];
            if v != 0.0 {
                triplets.push((r, c, v));
            }
        }
    }
    for r in 0..mi {
        for c in 0..n {
            let v = a_in[(r, c)];
            if v != 0.0 {
                triplets.push((me + r, c, v));
            }
        }
    }
    for j in 0..n {
        triplets.push((me + mi + j, j, 1.0));
    }
    let mut l = DVector::from_element(me + mi + n, f64::NEG_INFINITY);
    let mut u = DVector::from_element(me + mi + n, f64::INFINITY);
    for r in 0..me {
        l[r] = b_eq[r];
        u[r] = b_eq[r];
    }
    for r in 0..mi {
        u[me + r] = b_in[r];
    }
    for j in 0..n {
        l[me + mi + j] = lower[j];
        u[me + mi + j] = upper[j];
    }
    let prob = QpProblem {
        p: SparseMatrix::from_dense(h),
        q: g.clone(),
        a: SparseMatrix::from_triplets(me + mi + n, n, triplets),
        l,
        u,
    };
    solve_qp_general(&prob, None, &QpOptions::default())
}
