//! Receding-horizon force controller with optional stability constraints.
//!
//! Each tick assembles a nonlinear program over a horizon of `n_p` control
//! intervals and `n_p + 1` state knots. States are the CoM position, the
//! mass-normalized momentum, and the two foot centers; controls are the
//! mass-normalized corner forces and the swing-foot velocities. The
//! prediction model is the forward-Euler discretization of the centroidal
//! dynamics with per-foot contact flags.
//!
//! Three controller variants share the assembly:
//! - `FullContraction`: error coordinates `z1`, `z2` enter as decision
//!   variables tied to the state by definition rows, the aggregate force is
//!   coupled to the stabilizing feedback plus a correction `ν`, the
//!   decrease-rate residual of the error coordinates must stay strictly
//!   negative, and the angular-momentum norm must contract step to step.
//! - `NormBound`: same, but the contraction row is replaced by a cap on the
//!   angular-momentum norm.
//! - `Off`: the plain centroidal controller — no `z`, no `ν`, no coupling
//!   or stability rows; this is the ablation baseline.
//!
//! By default the coupling and stability rows are applied only to the first
//! interval (only the first control of the sequence is ever applied);
//! full-horizon enforcement is retained for ablations.

use crate::dynamics::{skew, CentroidalState, FootGeometry, GRAVITY_ACCEL};
use crate::gait::{ContactPlan, Foot, ReferenceSample, CORNERS_PER_FOOT, N_FEET};
use crate::nlp::qp::SparseMatrix;
use crate::nlp::sqp::{solve_nlp, Nlp, NlpOptions};
use crate::nlp::{SolveReport, SolveStatus};
use crate::stabilizer::{relaxed_stability_bound, stability_residual, GainSet};
use nalgebra::{DVector, Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Total force corners across both feet.
pub const N_CORNERS: usize = N_FEET * CORNERS_PER_FOOT;

/// Smallest angular-momentum norm the step-to-step contraction row is asked
/// to contract from. When the measured norm is below this the row would
/// degenerate into the squared equality η(k+1) = 0, whose gradient vanishes
/// on its own feasible set and therefore admits no finite multiplier; the
/// floor keeps the problem regular while bounding the norm by a ball that is
/// negligible next to the 0.3 operating cap.
pub const ETA_CONTRACTION_FLOOR: f64 = 1e-3;

/// Which stability machinery the controller runs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityMode {
    /// Decrease-rate residual row plus step-to-step contraction of the
    /// angular-momentum norm.
    FullContraction,
    /// Decrease-rate residual row plus a cap on the angular-momentum norm.
    NormBound,
    /// No stability rows at all (ablation baseline).
    Off,
}

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
    #[error("window/schedule mismatch: {0}")]
    WindowMismatch(String),
}

/// Controller configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Number of control intervals in the horizon (≥ 1).
    pub n_p: usize,
    /// Controller period in seconds.
    pub period: f64,
    /// Weight on CoM position error (must be positive definite).
    pub q1: Matrix3<f64>,
    /// Weight on the mass-normalized angular momentum (positive definite).
    pub q2: Matrix3<f64>,
    /// Weight on foot-center deviation from nominal (positive definite).
    pub q3: Matrix3<f64>,
    /// Weight on corner-force asymmetry within a foot; a rate-of-change
    /// term at 1e-3 of this weight is added automatically.
    pub w_force: f64,
    /// Feedback and adaptation gains shared with the stabilizer.
    pub gains: GainSet,
    /// Cap on the mass-normalized angular-momentum norm (`NormBound` mode).
    pub eta_bound: f64,
    pub stability_mode: StabilityMode,
    /// Apply coupling/stability rows only to the first interval.
    pub first_step_only: bool,
    /// Friction coefficient of the linearized pyramid.
    pub friction_mu: f64,
    /// Minimum normal force per active corner, in Newtons.
    pub f_z_min: f64,
    /// Componentwise lower bound of the contact-adaptation box (≤ 0).
    pub contact_lower: Vector3<f64>,
    /// Componentwise upper bound of the contact-adaptation box (≥ 0).
    pub contact_upper: Vector3<f64>,
    /// Symmetric box bound on each component of ν, in m/s².
    pub nu_bound: f64,
    /// Margin of the strict stability inequality.
    pub eps_stab: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            n_p: 12,
            period: 0.1,
            q1: Matrix3::identity() * 120.0,
            q2: Matrix3::identity() * 40.0,
            q3: Matrix3::identity() * 1000.0,
            w_force: 0.02,
            gains: GainSet::default(),
            eta_bound: 0.3,
            stability_mode: StabilityMode::FullContraction,
            first_step_only: true,
            friction_mu: 0.5,
            f_z_min: 0.0,
            contact_lower: Vector3::new(-0.08, -0.08, -0.01),
            contact_upper: Vector3::new(0.08, 0.08, 0.01),
            nu_bound: 20.0,
            eps_stab: 1e-6,
        }
    }
}

fn is_positive_definite(m: &Matrix3<f64>) -> bool {
    (m - m.transpose()).norm() < 1e-12 && m.clone_owned().cholesky().is_some()
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        let bad = |msg: &str| Err(MpcError::InvalidConfig(msg.to_string()));
        if self.n_p < 1 {
            return bad("horizon must have at least one interval");
        }
        if !(self.period > 0.0) {
            return bad("controller period must be positive");
        }
        for (name, m) in [("q1", &self.q1), ("q2", &self.q2), ("q3", &self.q3)] {
            if !is_positive_definite(m) {
                return Err(MpcError::InvalidConfig(format!(
                    "{name} must be symmetric positive definite"
                )));
            }
        }
        if self.w_force < 0.0 {
            return bad("force regularization weight must be nonnegative");
        }
        self.gains
            .validate()
            .map_err(|e| MpcError::InvalidConfig(e.to_string()))?;
        if !(self.eta_bound > 0.0) {
            return bad("angular-momentum bound must be positive");
        }
        if !(self.friction_mu > 0.0) {
            return bad("friction coefficient must be positive");
        }
        if self.f_z_min < 0.0 {
            return bad("minimum normal force must be nonnegative");
        }
        for axis in 0..3 {
            if !(self.contact_lower[axis] <= 0.0 && 0.0 <= self.contact_upper[axis]) {
                return bad("contact-adaptation box must contain zero componentwise");
            }
        }
        if !(self.nu_bound > 0.0) {
            return bad("correction-term bound must be positive");
        }
        if !(self.eps_stab > 0.0) {
            return bad("stability margin must be positive");
        }
        Ok(())
    }
}

/// Reference data at one state knot.
#[derive(Debug, Clone)]
pub struct KnotRef {
    pub p_ref: Vector3<f64>,
    pub v_ref: Vector3<f64>,
    pub a_ref: Vector3<f64>,
    /// Nominal foot-center positions.
    pub foot_nominal: [Vector3<f64>; N_FEET],
}

/// Horizon window: `n_p + 1` knot references plus per-interval contact flags.
#[derive(Debug, Clone)]
pub struct MpcWindow {
    pub dt: f64,
    pub refs: Vec<KnotRef>,
    /// Per-interval stance flag per foot, sampled at the interval midpoint.
    pub gamma: Vec<[bool; N_FEET]>,
}

impl MpcWindow {
    /// Sample a window of `n_p` intervals starting at `t0` from a plan.
    pub fn from_plan(plan: &ContactPlan, t0: f64, n_p: usize, dt: f64) -> Self {
        let refs = (0..=n_p)
            .map(|k| {
                let t = t0 + k as f64 * dt;
                let s: ReferenceSample = crate::gait::sample_reference(plan, t);
                KnotRef {
                    p_ref: s.p_ref,
                    v_ref: s.v_ref,
                    a_ref: s.a_ref,
                    foot_nominal: [
                        plan.foot_center(Foot::Left, t),
                        plan.foot_center(Foot::Right, t),
                    ],
                }
            })
            .collect();
        let gamma = (0..n_p)
            .map(|k| {
                let t_mid = t0 + (k as f64 + 0.5) * dt;
                [
                    plan.contact_active(Foot::Left, t_mid),
                    plan.contact_active(Foot::Right, t_mid),
                ]
            })
            .collect();
        Self { dt, refs, gamma }
    }
}

/// Variable offsets. Stage-ordered: the knot block (CoM 3, momentum 6, foot
/// centers 6, optional z 6) is followed by its interval block (corner
/// forces 24, foot velocities 6, optional ν 3).
#[derive(Debug, Clone)]
pub struct VarLayout {
    pub n_p: usize,
    pub n: usize,
    p_com: Vec<usize>,
    hm: Vec<usize>,
    feet: Vec<usize>,
    fm: Vec<usize>,
    v: Vec<usize>,
    z: Vec<usize>,
    nu: Vec<usize>,
    stab_intervals: Vec<usize>,
}

const NONE: usize = usize::MAX;

impl VarLayout {
    fn new(n_p: usize, mode: StabilityMode, first_step_only: bool) -> Self {
        let stab_intervals: Vec<usize> = match mode {
            StabilityMode::Off => Vec::new(),
            _ if first_step_only => vec![0],
            _ => (0..n_p).collect(),
        };
        let is_stab = |k: usize| stab_intervals.contains(&k);
        let mut p_com = vec![NONE; n_p + 1];
        let mut hm = vec![NONE; n_p + 1];
        let mut feet = vec![NONE; n_p + 1];
        let mut fm = vec![NONE; n_p];
        let mut v = vec![NONE; n_p];
        let mut z = vec![NONE; n_p + 1];
        let mut nu = vec![NONE; n_p];
        let mut off = 0;
        for k in 0..=n_p {
            p_com[k] = off;
            off += 3;
            hm[k] = off;
            off += 6;
            feet[k] = off;
            off += 2 * 3;
            if is_stab(k) {
                z[k] = off;
                off += 6;
            }
            if k < n_p {
                fm[k] = off;
                off += N_CORNERS * 3;
                v[k] = off;
                off += 2 * 3;
                if is_stab(k) {
                    nu[k] = off;
                    off += 3;
                }
            }
        }
        Self { n_p, n: off, p_com, hm, feet, fm, v, z, nu, stab_intervals }
    }

    pub fn p_com(&self, k: usize) -> usize {
        self.p_com[k]
    }
    pub fn hm(&self, k: usize) -> usize {
        self.hm[k]
    }
    pub fn foot(&self, k: usize, foot: Foot) -> usize {
        self.feet[k] + 3 * foot.index()
    }
    /// Corner force offset; corners are foot-major (left 0–3, right 4–7).
    pub fn fm(&self, k: usize, corner: usize) -> usize {
        self.fm[k] + 3 * corner
    }
    pub fn v_foot(&self, k: usize, foot: Foot) -> usize {
        self.v[k] + 3 * foot.index()
    }
    pub fn z1(&self, k: usize) -> Option<usize> {
        (self.z[k] != NONE).then(|| self.z[k])
    }
    pub fn z2(&self, k: usize) -> Option<usize> {
        (self.z[k] != NONE).then(|| self.z[k] + 3)
    }
    pub fn nu(&self, k: usize) -> Option<usize> {
        (self.nu[k] != NONE).then(|| self.nu[k])
    }
    pub fn stab_intervals(&self) -> &[usize] {
        &self.stab_intervals
    }
}

fn vec3_at(x: &DVector<f64>, off: usize) -> Vector3<f64> {
    Vector3::new(x[off], x[off + 1], x[off + 2])
}

/// One tick's optimization problem.
pub struct MpcProblem {
    pub cfg: MpcConfig,
    pub window: MpcWindow,
    pub layout: VarLayout,
    pub mass: f64,
    /// Corner offsets from the foot center, foot-major.
    corner_offset: [Vector3<f64>; N_CORNERS],
    /// Measured state, mass-normalized momentum.
    p_com0: Vector3<f64>,
    hm0: Vector6<f64>,
    feet0: [Vector3<f64>; N_FEET],
    theta_hat: Vector3<f64>,
    // Constant quadratic cost ½xᵀPx + qᵀx + c.
    cost_p: SparseMatrix,
    cost_q: DVector<f64>,
    cost_c: f64,
    n_eq: usize,
    n_ineq: usize,
}

impl MpcProblem {
    pub fn new(
        cfg: MpcConfig,
        mass: f64,
        geometry: &FootGeometry,
        window: MpcWindow,
        state: &CentroidalState,
        feet: [Vector3<f64>; N_FEET],
        theta_hat: Vector3<f64>,
    ) -> Result<Self, MpcError> {
        cfg.validate()?;
        if !(mass > 0.0) {
            return Err(MpcError::InvalidConfig("mass must be positive".into()));
        }
        if window.refs.len() != cfg.n_p + 1 {
            return Err(MpcError::WindowMismatch(format!(
                "expected {} knot references, got {}",
                cfg.n_p + 1,
                window.refs.len()
            )));
        }
        if window.gamma.len() != cfg.n_p {
            return Err(MpcError::WindowMismatch(format!(
                "expected {} interval contact flags, got {}",
                cfg.n_p,
                window.gamma.len()
            )));
        }
        if (window.dt - cfg.period).abs() > 1e-12 {
            return Err(MpcError::WindowMismatch(
                "window sampling period differs from controller period".into(),
            ));
        }
        let layout = VarLayout::new(cfg.n_p, cfg.stability_mode, cfg.first_step_only);
        let mut corner_offset = [Vector3::zeros(); N_CORNERS];
        let local = geometry.corner_offsets();
        for f in 0..N_FEET {
            for c in 0..CORNERS_PER_FOOT {
                corner_offset[f * CORNERS_PER_FOOT + c] = local[c];
            }
        }
        let mut problem = Self {
            mass,
            corner_offset,
            p_com0: state.p_com,
            hm0: state.h / mass,
            feet0: feet,
            theta_hat,
            cost_p: SparseMatrix::identity(0),
            cost_q: DVector::zeros(layout.n),
            cost_c: 0.0,
            n_eq: 0,
            n_ineq: 0,
            cfg,
            window,
            layout,
        };
        problem.build_cost();
        problem.count_rows();
        Ok(problem)
    }

    /// Assemble the constant quadratic cost: CoM tracking, angular-momentum
    /// magnitude, foot-center deviation from nominal, force symmetry within
    /// each foot, and a small force rate-of-change term.
    fn build_cost(&mut self) {
        let n = self.layout.n;
        let np = self.cfg.n_p;
        let mut trip: Vec<(usize, usize, f64)> = Vec::new();
        let mut q = DVector::zeros(n);
        let mut c = 0.0;

        let add_quad = |trip: &mut Vec<(usize, usize, f64)>,
                            q: &mut DVector<f64>,
                            c: &mut f64,
                            off: usize,
                            w: &Matrix3<f64>,
                            target: &Vector3<f64>| {
            // (v − t)ᵀW(v − t) contributes P += 2W, q += −2Wt, c += tᵀWt.
            for i in 0..3 {
                for j in 0..3 {
                    if w[(i, j)] != 0.0 {
                        trip.push((off + i, off + j, 2.0 * w[(i, j)]));
                    }
                }
            }
            let wt = w * target;
            for i in 0..3 {
                q[off + i] += -2.0 * wt[i];
            }
            *c += target.dot(&wt);
        };

        for k in 0..=np {
            let r = &self.window.refs[k];
            add_quad(&mut trip, &mut q, &mut c, self.layout.p_com(k), &self.cfg.q1, &r.p_ref);
            // Angular part of the momentum block.
            let hm_ang = self.layout.hm(k) + 3;
            for i in 0..3 {
                for j in 0..3 {
                    if self.cfg.q2[(i, j)] != 0.0 {
                        trip.push((hm_ang + i, hm_ang + j, 2.0 * self.cfg.q2[(i, j)]));
                    }
                }
            }
            for foot in Foot::BOTH {
                add_quad(
                    &mut trip,
                    &mut q,
                    &mut c,
                    self.layout.foot(k, foot),
                    &self.cfg.q3,
                    &r.foot_nominal[foot.index()],
                );
            }
        }

        // Σᵢ‖fᵢ − mean‖² over each foot's active corners
        // = Σᵢ‖fᵢ‖² − n‖mean‖² per axis.
        let w = self.cfg.w_force;
        for k in 0..np {
            for foot in Foot::BOTH {
                if !self.window.gamma[k][foot.index()] {
                    continue;
                }
                let nc = CORNERS_PER_FOOT as f64;
                for a in 0..3 {
                    for ci in 0..CORNERS_PER_FOOT {
                        let i = self.layout.fm(k, foot.index() * CORNERS_PER_FOOT + ci) + a;
                        for cj in 0..CORNERS_PER_FOOT {
                            let j = self.layout.fm(k, foot.index() * CORNERS_PER_FOOT + cj) + a;
                            let m = if ci == cj { 1.0 - 1.0 / nc } else { -1.0 / nc };
                            trip.push((i, j, 2.0 * w * m));
                        }
                    }
                }
            }
        }
        // Rate term between consecutive intervals (pinned swing forces act
        // as zero anchors, penalizing landing impact jumps).
        let wr = w * 1e-3;
        if wr > 0.0 {
            for k in 1..np {
                for corner in 0..N_CORNERS {
                    for a in 0..3 {
                        let i = self.layout.fm(k, corner) + a;
                        let j = self.layout.fm(k - 1, corner) + a;
                        trip.push((i, i, 2.0 * wr));
                        trip.push((j, j, 2.0 * wr));
                        trip.push((i, j, -2.0 * wr));
                        trip.push((j, i, -2.0 * wr));
                    }
                }
            }
        }

        self.cost_p = SparseMatrix::from_triplets(n, n, trip);
        self.cost_q = q;
        self.cost_c = c;
    }

    fn count_rows(&mut self) {
        let np = self.cfg.n_p;
        let stab = self.layout.stab_intervals().len();
        self.n_eq = 15 * np + 6 * stab + 3 * stab;
        let mut ineq = 0;
        for k in 0..np {
            for foot in Foot::BOTH {
                if self.window.gamma[k][foot.index()] {
                    ineq += 4 * CORNERS_PER_FOOT;
                }
            }
        }
        match self.cfg.stability_mode {
            StabilityMode::Off => {}
            StabilityMode::FullContraction => ineq += 2 * stab,
            StabilityMode::NormBound => ineq += 2 * stab,
        }
        self.n_ineq = ineq;
    }

    fn gravity_lin() -> Vector3<f64> {
        Vector3::new(0.0, 0.0, GRAVITY_ACCEL)
    }

    /// Equality residuals; when `jac` is provided, also emit the Jacobian
    /// triplets in the same row order.
    fn eval_eq(
        &self,
        x: &DVector<f64>,
        mut jac: Option<&mut Vec<(usize, usize, f64)>>,
    ) -> DVector<f64> {
        let np = self.cfg.n_p;
        let dt = self.window.dt;
        let mut out = DVector::zeros(self.n_eq);
        let mut row = 0;

        let emit = |jac: &mut Option<&mut Vec<(usize, usize, f64)>>, r: usize, c: usize, v: f64| {
            if let Some(t) = jac.as_deref_mut() {
                if v != 0.0 {
                    t.push((r, c, v));
                }
            }
        };

        for k in 0..np {
            let pk = vec3_at(x, self.layout.p_com(k));
            let pk1 = vec3_at(x, self.layout.p_com(k + 1));
            let hl = vec3_at(x, self.layout.hm(k));
            let hl1 = vec3_at(x, self.layout.hm(k + 1));
            let ha = vec3_at(x, self.layout.hm(k) + 3);
            let ha1 = vec3_at(x, self.layout.hm(k + 1) + 3);

            // CoM kinematics: p(k+1) = p(k) + Δ·(linear momentum / mass).
            for a in 0..3 {
                out[row + a] = pk1[a] - pk[a] - dt * hl[a];
                emit(&mut jac, row + a, self.layout.p_com(k + 1) + a, 1.0);
                emit(&mut jac, row + a, self.layout.p_com(k) + a, -1.0);
                emit(&mut jac, row + a, self.layout.hm(k) + a, -dt);
            }
            row += 3;

            // Linear momentum: h_l(k+1) = h_l(k) + Δ·(Σ active forces + g).
            let mut fsum = Vector3::zeros();
            for corner in 0..N_CORNERS {
                if self.window.gamma[k][corner / CORNERS_PER_FOOT] {
                    fsum += vec3_at(x, self.layout.fm(k, corner));
                }
            }
            let g = Self::gravity_lin();
            for a in 0..3 {
                out[row + a] = hl1[a] - hl[a] - dt * (fsum[a] + g[a]);
                emit(&mut jac, row + a, self.layout.hm(k + 1) + a, 1.0);
                emit(&mut jac, row + a, self.layout.hm(k) + a, -1.0);
                for corner in 0..N_CORNERS {
                    if self.window.gamma[k][corner / CORNERS_PER_FOOT] {
                        emit(&mut jac, row + a, self.layout.fm(k, corner) + a, -dt);
                    }
                }
            }
            row += 3;

            // Angular momentum: h_a(k+1) = h_a(k) + Δ·Σ (cᵢ − p_com) × fᵢ.
            let mut torque = Vector3::zeros();
            let mut fsum_active = Vector3::zeros();
            for corner in 0..N_CORNERS {
                if !self.window.gamma[k][corner / CORNERS_PER_FOOT] {
                    continue;
                }
                let foot = if corner < CORNERS_PER_FOOT { Foot::Left } else { Foot::Right };
                let pc = vec3_at(x, self.layout.foot(k, foot));
                let f = vec3_at(x, self.layout.fm(k, corner));
                let arm = pc + self.corner_offset[corner] - pk;
                torque += arm.cross(&f);
                fsum_active += f;
            }
            let resid = ha1 - ha - dt * torque;
            for a in 0..3 {
                out[row + a] = resid[a];
                emit(&mut jac, row + a, self.layout.hm(k + 1) + 3 + a, 1.0);
                emit(&mut jac, row + a, self.layout.hm(k) + 3 + a, -1.0);
            }
            if jac.is_some() {
                // ∂(arm × f): by f → S(arm); by contact center → −S(f);
                // by CoM → +S(f). All scaled by −Δ in the residual.
                for corner in 0..N_CORNERS {
                    if !self.window.gamma[k][corner / CORNERS_PER_FOOT] {
                        continue;
                    }
                    let foot = if corner < CORNERS_PER_FOOT { Foot::Left } else { Foot::Right };
                    let pc = vec3_at(x, self.layout.foot(k, foot));
                    let f = vec3_at(x, self.layout.fm(k, corner));
                    let arm = pc + self.corner_offset[corner] - pk;
                    let s_arm = skew(&arm);
                    let s_f = skew(&f);
                    for a in 0..3 {
                        for b in 0..3 {
                            emit(
                                &mut jac,
                                row + a,
                                self.layout.fm(k, corner) + b,
                                -dt * s_arm[(a, b)],
                            );
                            emit(
                                &mut jac,
                                row + a,
                                self.layout.foot(k, foot) + b,
                                dt * s_f[(a, b)],
                            );
                        }
                    }
                }
                let s_fsum = skew(&fsum_active);
                for a in 0..3 {
                    for b in 0..3 {
                        emit(&mut jac, row + a, self.layout.p_com(k) + b, -dt * s_fsum[(a, b)]);
                    }
                }
            }
            row += 3;

            // Foot centers: stance feet hold position, swing feet integrate
            // the commanded velocity.
            for foot in Foot::BOTH {
                let stance = self.window.gamma[k][foot.index()];
                let pc = vec3_at(x, self.layout.foot(k, foot));
                let pc1 = vec3_at(x, self.layout.foot(k + 1, foot));
                let v = vec3_at(x, self.layout.v_foot(k, foot));
                let gain = if stance { 0.0 } else { dt };
                for a in 0..3 {
                    out[row + a] = pc1[a] - pc[a] - gain * v[a];
                    emit(&mut jac, row + a, self.layout.foot(k + 1, foot) + a, 1.0);
                    emit(&mut jac, row + a, self.layout.foot(k, foot) + a, -1.0);
                    if gain != 0.0 {
                        emit(&mut jac, row + a, self.layout.v_foot(k, foot) + a, -gain);
                    }
                }
                row += 3;
            }
        }

        // Error-coordinate definitions and force/feedback coupling.
        let k1 = self.cfg.gains.k1;
        let k2 = self.cfg.gains.k2;
        for &k in self.layout.stab_intervals() {
            let r = &self.window.refs[k];
            let z1o = self.layout.z1(k).expect("stab interval has z variables");
            let z2o = self.layout.z2(k).expect("stab interval has z variables");
            let z1 = vec3_at(x, z1o);
            let z2 = vec3_at(x, z2o);
            let pk = vec3_at(x, self.layout.p_com(k));
            let hl = vec3_at(x, self.layout.hm(k));
            // z1 = p_com − p_ref
            for a in 0..3 {
                out[row + a] = z1[a] - pk[a] + r.p_ref[a];
                emit(&mut jac, row + a, z1o + a, 1.0);
                emit(&mut jac, row + a, self.layout.p_com(k) + a, -1.0);
            }
            row += 3;
            // z2 = k1∘z1 + h_l − v_ref
            for a in 0..3 {
                out[row + a] = z2[a] - k1[a] * z1[a] - hl[a] + r.v_ref[a];
                emit(&mut jac, row + a, z2o + a, 1.0);
                emit(&mut jac, row + a, z1o + a, -k1[a]);
                emit(&mut jac, row + a, self.layout.hm(k) + a, -1.0);
            }
            row += 3;
        }
        for &k in self.layout.stab_intervals() {
            // Aggregate active force = stabilizing feedback + ν:
            // Σfmᵢ + (k1+k2)∘z2 − k1²∘z1 − ν = a_ref − g − θ̂.
            let r = &self.window.refs[k];
            let z1o = self.layout.z1(k).unwrap();
            let z2o = self.layout.z2(k).unwrap();
            let nuo = self.layout.nu(k).unwrap();
            let z1 = vec3_at(x, z1o);
            let z2 = vec3_at(x, z2o);
            let nu = vec3_at(x, nuo);
            let mut fsum = Vector3::zeros();
            for corner in 0..N_CORNERS {
                if self.window.gamma[k][corner / CORNERS_PER_FOOT] {
                    fsum += vec3_at(x, self.layout.fm(k, corner));
                }
            }
            let rhs = r.a_ref - Self::gravity_lin() - self.theta_hat;
            for a in 0..3 {
                out[row + a] =
                    fsum[a] + (k1[a] + k2[a]) * z2[a] - k1[a] * k1[a] * z1[a] - nu[a] - rhs[a];
                for corner in 0..N_CORNERS {
                    if self.window.gamma[k][corner / CORNERS_PER_FOOT] {
                        emit(&mut jac, row + a, self.layout.fm(k, corner) + a, 1.0);
                    }
                }
                emit(&mut jac, row + a, z2o + a, k1[a] + k2[a]);
                emit(&mut jac, row + a, z1o + a, -k1[a] * k1[a]);
                emit(&mut jac, row + a, nuo + a, -1.0);
            }
            row += 3;
        }
        debug_assert_eq!(row, self.n_eq);
        out
    }

    /// Inequality residuals (≤ 0); optionally emits Jacobian triplets.
    fn eval_ineq(
        &self,
        x: &DVector<f64>,
        mut jac: Option<&mut Vec<(usize, usize, f64)>>,
    ) -> DVector<f64> {
        let np = self.cfg.n_p;
        let mu = self.cfg.friction_mu;
        let mut out = DVector::zeros(self.n_ineq);
        let mut row = 0;

        let emit = |jac: &mut Option<&mut Vec<(usize, usize, f64)>>, r: usize, c: usize, v: f64| {
            if let Some(t) = jac.as_deref_mut() {
                if v != 0.0 {
                    t.push((r, c, v));
                }
            }
        };

        // Friction pyramid per active corner: ±f_x ≤ μf_z, ±f_y ≤ μf_z.
        for k in 0..np {
            for corner in 0..N_CORNERS {
                if !self.window.gamma[k][corner / CORNERS_PER_FOOT] {
                    continue;
                }
                let off = self.layout.fm(k, corner);
                let f = vec3_at(x, off);
                for (axis, sign) in [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)] {
                    out[row] = sign * f[axis] - mu * f[2];
                    emit(&mut jac, row, off + axis, sign);
                    emit(&mut jac, row, off + 2, -mu);
                    row += 1;
                }
            }
        }

        match self.cfg.stability_mode {
            StabilityMode::Off => {}
            StabilityMode::FullContraction | StabilityMode::NormBound => {
                for &k in self.layout.stab_intervals() {
                    // Strict decrease-rate residual with a state-scaled
                    // margin that vanishes at the origin.
                    let z1o = self.layout.z1(k).unwrap();
                    let z2o = self.layout.z2(k).unwrap();
                    let nuo = self.layout.nu(k).unwrap();
                    let z1 = vec3_at(x, z1o);
                    let z2 = vec3_at(x, z2o);
                    let nu = vec3_at(x, nuo);
                    let resid = stability_residual(z1, z2, nu, &self.cfg.gains);
                    let bound = relaxed_stability_bound(z1, z2, self.cfg.eps_stab);
                    out[row] = resid - bound;
                    if jac.is_some() {
                        let k1 = self.cfg.gains.k1;
                        let k2 = self.cfg.gains.k2;
                        let inside = z1.norm_squared() + z2.norm_squared() < 1.0;
                        let eps = if inside { self.cfg.eps_stab } else { 0.0 };
                        for a in 0..3 {
                            emit(
                                &mut jac,
                                row,
                                z1o + a,
                                -2.0 * k1[a] * z1[a] + z2[a] + 2.0 * eps * z1[a],
                            );
                            emit(
                                &mut jac,
                                row,
                                z2o + a,
                                -2.0 * k2[a] * z2[a] + z1[a] + nu[a] + 2.0 * eps * z2[a],
                            );
                            emit(&mut jac, row, nuo + a, z2[a]);
                        }
                    }
                    row += 1;

                    let ha = vec3_at(x, self.layout.hm(k) + 3);
                    let ha1 = vec3_at(x, self.layout.hm(k + 1) + 3);
                    if self.cfg.stability_mode == StabilityMode::FullContraction {
                        // ‖η(k+1)‖² ≤ max(‖η(k)‖², floor²). Without the
                        // floor the row collapses to the squared equality
                        // η(k+1) = 0 whenever the incoming norm vanishes,
                        // and a squared equality admits no finite
                        // multiplier; the floor keeps the active gradient
                        // bounded away from zero while still confining the
                        // norm to a physically negligible ball.
                        let floor2 = ETA_CONTRACTION_FLOOR * ETA_CONTRACTION_FLOOR;
                        out[row] = ha1.norm_squared() - ha.norm_squared().max(floor2);
                        for a in 0..3 {
                            emit(&mut jac, row, self.layout.hm(k + 1) + 3 + a, 2.0 * ha1[a]);
                            if ha.norm_squared() > floor2 {
                                emit(&mut jac, row, self.layout.hm(k) + 3 + a, -2.0 * ha[a]);
                            }
                        }
                    } else {
                        // ‖η(k+1)‖² ≤ ᾱ² (the first controllable knot).
                        out[row] = ha1.norm_squared() - self.cfg.eta_bound * self.cfg.eta_bound;
                        for a in 0..3 {
                            emit(&mut jac, row, self.layout.hm(k + 1) + 3 + a, 2.0 * ha1[a]);
                        }
                    }
                    row += 1;
                }
            }
        }
        debug_assert_eq!(row, self.n_ineq);
        out
    }

    /// Initial guess tracking the reference with an even force split.
    pub fn initial_guess(&self) -> DVector<f64> {
        let np = self.cfg.n_p;
        let mut x = DVector::zeros(self.layout.n);
        for k in 0..=np {
            let r = &self.window.refs[k];
            let (p, hl, feet) = if k == 0 {
                (self.p_com0, Vector3::new(self.hm0[0], self.hm0[1], self.hm0[2]), self.feet0)
            } else {
                (r.p_ref, r.v_ref, [r.foot_nominal[0], r.foot_nominal[1]])
            };
            for a in 0..3 {
                x[self.layout.p_com(k) + a] = p[a];
                x[self.layout.hm(k) + a] = hl[a];
            }
            if k == 0 {
                for a in 0..3 {
                    x[self.layout.hm(k) + 3 + a] = self.hm0[3 + a];
                }
            }
            for foot in Foot::BOTH {
                for a in 0..3 {
                    x[self.layout.foot(k, foot) + a] = feet[foot.index()][a];
                }
            }
            if let (Some(z1o), Some(z2o)) = (self.layout.z1(k), self.layout.z2(k)) {
                let z1 = p - r.p_ref;
                let z2 = self.cfg.gains.k1.component_mul(&z1) + hl - r.v_ref;
                for a in 0..3 {
                    x[z1o + a] = z1[a];
                    x[z2o + a] = z2[a];
                }
            }
        }
        for k in 0..np {
            let n_active: usize = (0..N_CORNERS)
                .filter(|c| self.window.gamma[k][c / CORNERS_PER_FOOT])
                .count();
            if n_active > 0 {
                let share = -GRAVITY_ACCEL / n_active as f64;
                for corner in 0..N_CORNERS {
                    if self.window.gamma[k][corner / CORNERS_PER_FOOT] {
                        x[self.layout.fm(k, corner) + 2] = share;
                    }
                }
            }
            for foot in Foot::BOTH {
                if !self.window.gamma[k][foot.index()] {
                    let v = (self.window.refs[k + 1].foot_nominal[foot.index()]
                        - self.window.refs[k].foot_nominal[foot.index()])
                        / self.window.dt;
                    for a in 0..3 {
                        x[self.layout.v_foot(k, foot) + a] = v[a];
                    }
                }
            }
        }
        x
    }
}

impl Nlp for MpcProblem {
    fn dim(&self) -> usize {
        self.layout.n
    }
    fn n_eq(&self) -> usize {
        self.n_eq
    }
    fn n_ineq(&self) -> usize {
        self.n_ineq
    }
    fn cost(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&self.cost_p.mul_vec(x)) + self.cost_q.dot(x) + self.cost_c
    }
    fn cost_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        self.cost_p.mul_vec(x) + &self.cost_q
    }
    fn eq_constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        self.eval_eq(x, None)
    }
    fn ineq_constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        self.eval_ineq(x, None)
    }
    fn eq_jacobian(&self, x: &DVector<f64>) -> SparseMatrix {
        let mut trip = Vec::new();
        self.eval_eq(x, Some(&mut trip));
        SparseMatrix::from_triplets(self.n_eq, self.layout.n, trip)
    }
    fn ineq_jacobian(&self, x: &DVector<f64>) -> SparseMatrix {
        let mut trip = Vec::new();
        self.eval_ineq(x, Some(&mut trip));
        SparseMatrix::from_triplets(self.n_ineq, self.layout.n, trip)
    }
    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.layout.n;
        let np = self.cfg.n_p;
        let mut lb = DVector::from_element(n, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(n, f64::INFINITY);
        let pin = |lb: &mut DVector<f64>, ub: &mut DVector<f64>, off: usize, v: &Vector3<f64>| {
            for a in 0..3 {
                lb[off + a] = v[a];
                ub[off + a] = v[a];
            }
        };
        // Measured initial state.
        pin(&mut lb, &mut ub, self.layout.p_com(0), &self.p_com0);
        for a in 0..6 {
            lb[self.layout.hm(0) + a] = self.hm0[a];
            ub[self.layout.hm(0) + a] = self.hm0[a];
        }
        for foot in Foot::BOTH {
            pin(&mut lb, &mut ub, self.layout.foot(0, foot), &self.feet0[foot.index()]);
        }
        // Contact-adaptation box around the nominal centers.
        for k in 1..=np {
            let r = &self.window.refs[k];
            for foot in Foot::BOTH {
                let off = self.layout.foot(k, foot);
                let nom = r.foot_nominal[foot.index()];
                for a in 0..3 {
                    lb[off + a] = nom[a] + self.cfg.contact_lower[a];
                    ub[off + a] = nom[a] + self.cfg.contact_upper[a];
                }
            }
        }
        // Forces: swing corners pinned to zero, active normal components
        // bounded below.
        let fz_min = self.cfg.f_z_min / self.mass;
        for k in 0..np {
            for corner in 0..N_CORNERS {
                let off = self.layout.fm(k, corner);
                if self.window.gamma[k][corner / CORNERS_PER_FOOT] {
                    lb[off + 2] = fz_min;
                } else {
                    for a in 0..3 {
                        lb[off + a] = 0.0;
                        ub[off + a] = 0.0;
                    }
                }
            }
            // Stance feet have no velocity freedom.
            for foot in Foot::BOTH {
                if self.window.gamma[k][foot.index()] {
                    let off = self.layout.v_foot(k, foot);
                    for a in 0..3 {
                        lb[off + a] = 0.0;
                        ub[off + a] = 0.0;
                    }
                }
            }
            if let Some(nuo) = self.layout.nu(k) {
                for a in 0..3 {
                    lb[nuo + a] = -self.cfg.nu_bound;
                    ub[nuo + a] = self.cfg.nu_bound;
                }
            }
        }
        (lb, ub)
    }
    fn cost_hessian(&self, _x: &DVector<f64>) -> Option<SparseMatrix> {
        Some(self.cost_p.clone())
    }
    /// The squared-norm stability rows have gradients that vanish with the
    /// tracking error, so their multipliers grow like the inverse error and
    /// the missing curvature would otherwise stall the step computation near
    /// good tracking. Add the multiplier-weighted curvature of those rows to
    /// the cost matrix, projected onto its positive-semidefinite part.
    fn lagrangian_hessian(
        &self,
        _x: &DVector<f64>,
        _lam_eq: &DVector<f64>,
        lam_in: &DVector<f64>,
    ) -> Option<SparseMatrix> {
        let stab = self.layout.stab_intervals();
        if stab.is_empty() {
            return Some(self.cost_p.clone());
        }
        let n = self.layout.n;
        let mut trip: Vec<(usize, usize, f64)> = self.cost_p.triplets().collect();

        // Per-axis curvature of the decrease-rate residual on
        // (z1_a, z2_a, ν_a); constant, axis-decoupled, indefinite.
        let k1 = self.cfg.gains.k1;
        let k2 = self.cfg.gains.k2;
        let eps = self.cfg.eps_stab;
        let mut psd = [Matrix3::<f64>::zeros(); 3];
        for a in 0..3 {
            #[rustfmt::skip]
            let m = Matrix3::new(
                -2.0 * k1[a] + 2.0 * eps, 1.0,                      0.0,
                1.0,                      -2.0 * k2[a] + 2.0 * eps, 1.0,
                0.0,                      1.0,                      0.0,
            );
            let se = m.symmetric_eigen();
            let clipped = se.eigenvalues.map(|v| v.max(0.0));
            psd[a] = se.eigenvectors * Matrix3::from_diagonal(&clipped)
                * se.eigenvectors.transpose();
        }

        let mut row = self.n_ineq - 2 * stab.len();
        for &k in stab {
            let lam_res = lam_in[row].max(0.0);
            row += 1;
            let lam_con = lam_in[row].max(0.0);
            row += 1;
            if lam_res > 0.0 {
                let offs = [
                    self.layout.z1(k).unwrap(),
                    self.layout.z2(k).unwrap(),
                    self.layout.nu(k).unwrap(),
                ];
                for a in 0..3 {
                    for i in 0..3 {
                        for j in 0..3 {
                            let v = lam_res * psd[a][(i, j)];
                            if v != 0.0 {
                                trip.push((offs[i] + a, offs[j] + a, v));
                            }
                        }
                    }
                }
            }
            if lam_con > 0.0 {
                // ‖η(k+1)‖² curvature. The opposing −‖η(k)‖² block of the
                // full-contraction row is concave and dropped — exactly so
                // at k = 0, where that knot is pinned to the measurement.
                let off = self.layout.hm(k + 1) + 3;
                for a in 0..3 {
                    trip.push((off + a, off + a, 2.0 * lam_con));
                }
            }
        }
        Some(SparseMatrix::from_triplets(n, n, trip))
    }
}

/// Worst residuals by constraint family, on the returned solution.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub dynamics: f64,
    pub coupling: f64,
    pub friction: f64,
    pub stability: f64,
    pub contact_box: f64,
}

/// First-step quantities extracted from a solved tick.
#[derive(Debug, Clone)]
pub struct MpcSolution {
    /// Per-corner ground-reaction forces in Newtons, foot-major order.
    pub forces: [Vector3<f64>; N_CORNERS],
    /// First-step correction term (zero when stability rows are off).
    pub nu: Vector3<f64>,
    /// Commanded foot-center velocities for the first interval.
    pub foot_velocity: [Vector3<f64>; N_FEET],
    /// Foot centers at the next knot (the adapted contact locations).
    pub adapted_contacts: [Vector3<f64>; N_FEET],
    /// Predicted CoM positions at every knot.
    pub predicted_com: Vec<Vector3<f64>>,
    /// Predicted mass-normalized momentum at every knot.
    pub predicted_hm: Vec<Vector6<f64>>,
    pub residuals: ResidualSummary,
    pub report: SolveReport,
    /// Full decision vector, reusable as the next tick's warm start.
    pub decision: DVector<f64>,
}

impl MpcSolution {
    pub fn converged(&self) -> bool {
        self.report.status == SolveStatus::Converged
    }
}

/// Options used for every tick solve.
pub fn default_nlp_options() -> NlpOptions {
    NlpOptions { max_iter: 50, ..NlpOptions::default() }
}

/// Solve one tick. `warm` is the previous tick's decision vector shifted
/// with [`shift_warm_start`]; pass `None` for a cold start.
pub fn solve_mpc(problem: &MpcProblem, warm: Option<&DVector<f64>>) -> MpcSolution {
    let guess = match warm {
        Some(w) if w.len() == problem.layout.n => w.clone(),
        _ => problem.initial_guess(),
    };
    let report = solve_nlp(problem, &guess, &default_nlp_options());
    extract_control(problem, report)
}

/// Build the extracted first-step quantities and the residual summary.
pub fn extract_control(problem: &MpcProblem, report: SolveReport) -> MpcSolution {
    let x = &report.solution;
    let l = &problem.layout;
    let mut forces = [Vector3::zeros(); N_CORNERS];
    for corner in 0..N_CORNERS {
        forces[corner] = vec3_at(x, l.fm(0, corner)) * problem.mass;
    }
    let nu = l.nu(0).map(|o| vec3_at(x, o)).unwrap_or_else(Vector3::zeros);
    let foot_velocity =
        [vec3_at(x, l.v_foot(0, Foot::Left)), vec3_at(x, l.v_foot(0, Foot::Right))];
    let adapted_contacts = [vec3_at(x, l.foot(1, Foot::Left)), vec3_at(x, l.foot(1, Foot::Right))];
    let predicted_com = (0..=problem.cfg.n_p).map(|k| vec3_at(x, l.p_com(k))).collect();
    let predicted_hm = (0..=problem.cfg.n_p)
        .map(|k| {
            let mut h = Vector6::zeros();
            for a in 0..6 {
                h[a] = x[l.hm(k) + a];
            }
            h
        })
        .collect();

    let eq = problem.eval_eq(x, None);
    let ineq = problem.eval_ineq(x, None);
    let stab = l.stab_intervals().len();
    let n_dyn = 15 * problem.cfg.n_p + 6 * stab;
    let dynamics = eq.rows(0, n_dyn).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let coupling = if stab > 0 {
        eq.rows(n_dyn, 3 * stab).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    } else {
        0.0
    };
    let n_friction = problem.n_ineq
        - match problem.cfg.stability_mode {
            StabilityMode::Off => 0,
            _ => 2 * stab,
        };
    let friction = ineq.rows(0, n_friction).iter().fold(0.0f64, |m, v| m.max(*v)).max(0.0);
    let stability = if problem.n_ineq > n_friction {
        ineq.rows(n_friction, problem.n_ineq - n_friction)
            .iter()
            .fold(0.0f64, |m, v| m.max(*v))
            .max(0.0)
    } else {
        0.0
    };
    let mut contact_box = 0.0f64;
    for k in 1..=problem.cfg.n_p {
        let r = &problem.window.refs[k];
        for foot in Foot::BOTH {
            let dev = vec3_at(x, l.foot(k, foot)) - r.foot_nominal[foot.index()];
            for a in 0..3 {
                contact_box = contact_box
                    .max(dev[a] - problem.cfg.contact_upper[a])
                    .max(problem.cfg.contact_lower[a] - dev[a]);
            }
        }
    }

    MpcSolution {
        forces,
        nu,
        foot_velocity,
        adapted_contacts,
        predicted_com,
        predicted_hm,
        residuals: ResidualSummary {
            dynamics,
            coupling,
            friction,
            stability,
            contact_box: contact_box.max(0.0),
        },
        decision: report.solution.clone(),
        report,
    }
}

/// Shift the previous tick's decision vector one interval forward for use
/// as a warm start (the terminal knot and last interval are duplicated).
/// Both problems must share horizon length and stability layout.
pub fn shift_warm_start(problem: &MpcProblem, prev: &DVector<f64>) -> DVector<f64> {
    let l = &problem.layout;
    let np = l.n_p;
    let mut x = problem.initial_guess();
    if prev.len() != l.n {
        return x;
    }
    let copy3 = |x: &mut DVector<f64>, dst: usize, src: usize, prev: &DVector<f64>| {
        for a in 0..3 {
            x[dst + a] = prev[src + a];
        }
    };
    for k in 0..=np {
        let src_k = (k + 1).min(np);
        copy3(&mut x, l.p_com(k), l.p_com(src_k), prev);
        for a in 0..6 {
            x[l.hm(k) + a] = prev[l.hm(src_k) + a];
        }
        for foot in Foot::BOTH {
            copy3(&mut x, l.foot(k, foot), l.foot(src_k, foot), prev);
        }
        if let (Some(z1d), Some(z1s)) = (l.z1(k), l.z1(src_k)) {
            copy3(&mut x, z1d, z1s, prev);
            copy3(&mut x, l.z2(k).unwrap(), l.z2(src_k).unwrap(), prev);
        }
    }
    for k in 0..np {
        let src_k = (k + 1).min(np - 1);
        for corner in 0..N_CORNERS {
            copy3(&mut x, l.fm(k, corner), l.fm(src_k, corner), prev);
        }
        for foot in Foot::BOTH {
            copy3(&mut x, l.v_foot(k, foot), l.v_foot(src_k, foot), prev);
        }
        if let (Some(nd), Some(ns)) = (l.nu(k), l.nu(src_k)) {
            copy3(&mut x, nd, ns, prev);
        }
    }
    // Re-pin the measured initial state so the warm start is consistent
    // with the new problem's bounds.
    for a in 0..3 {
        x[l.p_com(0) + a] = problem.p_com0[a];
    }
    for a in 0..6 {
        x[l.hm(0) + a] = problem.hm0[a];
    }
    for foot in Foot::BOTH {
        for a in 0..3 {
            x[l.foot(0, foot) + a] = problem.feet0[foot.index()][a];
        }
    }
    if let (Some(z1o), Some(z2o)) = (l.z1(0), l.z2(0)) {
        let r = &problem.window.refs[0];
        let z1 = problem.p_com0 - r.p_ref;
        let hl = Vector3::new(problem.hm0[0], problem.hm0[1], problem.hm0[2]);
        let z2 = problem.cfg.gains.k1.component_mul(&z1) + hl - r.v_ref;
        for a in 0..3 {
            x[z1o + a] = z1[a];
            x[z2o + a] = z2[a];
        }
    }
    x
}
