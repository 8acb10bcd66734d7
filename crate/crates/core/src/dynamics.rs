//! Centroidal momentum dynamics of a legged floating mass.
//!
//! The robot is reduced to its total mass m with center-of-mass position
//! `p_com` and six-dimensional centroidal momentum `h = (h_lin, h_ang)`.
//! Ground contacts act through point forces applied at foot corners:
//!
//! ```text
//! ṗ_com = (1/m) · B h                      B = [I3  03]
//! ḣ     = Σᵢ Aᵢ(pᵢ) Γᵢ fᵢ + Σⱼ Aⱼ(pⱼ) θⱼ + m·g⃗
//! ```
//!
//! where `A(p) = [I3; S(p − p_com)]` maps a force applied at point `p` to a
//! momentum rate (`S` is the cross-product matrix), `Γᵢ ∈ {0, 1}` is the
//! contact activation of corner i, `θⱼ` are external disturbance forces, and
//! `g⃗ = (0, 0, -9.81, 0, 0, 0)ᵀ` collects gravity.
//!
//! Two integrators are provided: [`euler_step`] (the prediction model used
//! inside the receding-horizon controller) and [`plant_step`] (a classical
//! 4th-order step used as simulation ground truth).

use nalgebra::{Matrix3, Matrix6x3, SVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Standard gravitational acceleration (m/s²), pointing down the z axis.
pub const GRAVITY_ACCEL: f64 = -9.81;

/// Errors produced by the dynamics layer.
#[derive(Debug, Error)]
pub enum DynamicsError {
    /// `forces` must carry exactly one entry per contact corner.
    #[error("expected {corners} corner forces, got {forces}")]
    ForceCountMismatch { corners: usize, forces: usize },
    /// The state stopped being finite during integration.
    #[error("state diverged (non-finite) at t = {t:.6} s")]
    Diverged { t: f64 },
}

/// State of the floating mass: CoM position and centroidal momentum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentroidalState {
    /// Center-of-mass position (m).
    pub p_com: Vector3<f64>,
    /// Centroidal momentum `(h_lin, h_ang)` (kg·m/s, kg·m²/s).
    pub h: Vector6<f64>,
}

impl CentroidalState {
    pub fn new(p_com: Vector3<f64>, h: Vector6<f64>) -> Self {
        Self { p_com, h }
    }

    /// State at rest at the given position.
    pub fn at_rest(p_com: Vector3<f64>) -> Self {
        Self { p_com, h: Vector6::zeros() }
    }

    /// CoM velocity (m/s) for the given total mass.
    pub fn com_velocity(&self, mass: f64) -> Vector3<f64> {
        self.h.fixed_rows::<3>(0).into_owned() / mass
    }

    pub fn is_finite(&self) -> bool {
        self.p_com.iter().chain(self.h.iter()).all(|v| v.is_finite())
    }
}

/// Time derivative of a [`CentroidalState`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentroidalDerivative {
    /// ṗ_com (m/s).
    pub p_com_dot: Vector3<f64>,
    /// ḣ (N, N·m).
    pub h_dot: Vector6<f64>,
}

/// One force application point of a foot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactCorner {
    /// World position of the corner (m).
    pub position: Vector3<f64>,
    /// Commanded velocity while the corner is in swing (m/s); ignored while
    /// the corner is active.
    pub swing_velocity: Vector3<f64>,
    /// Contact activation Γ: active corners transmit force, swinging ones do
    /// not.
    pub active: bool,
    /// Rotation of the local contact surface (identity on flat ground);
    /// used by the friction model, not by the rigid-body dynamics.
    pub surface_rotation: Matrix3<f64>,
}

impl ContactCorner {
    /// Active corner resting on flat ground at `position`.
    pub fn stance(position: Vector3<f64>) -> Self {
        Self {
            position,
            swing_velocity: Vector3::zeros(),
            active: true,
            surface_rotation: Matrix3::identity(),
        }
    }
}

/// How a disturbance force behaves over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    /// Force held over the whole window.
    Constant,
    /// Short shove; windows shorter than one plant substep are compressed
    /// into a single substep scaled to preserve the delivered momentum.
    Impulse,
    /// Force level that switches at the window boundaries (payload placed
    /// and removed); the gating is identical to `Constant`, schedules with
    /// several levels compose from several specs.
    StepChange,
}

/// An external force acting on the mass over a time window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    /// Force vector θ (N).
    pub force: Vector3<f64>,
    /// Application point, expressed relative to the instantaneous CoM; a zero
    /// lever arm applies the force at the CoM (no induced torque).
    pub application_point: Vector3<f64>,
    /// Half-open activation window `[start, end)` in seconds; `end` may be
    /// `inf`.
    pub window: (f64, f64),
    pub kind: DisturbanceKind,
}

/// A disturbance resolved at a specific instant: a plain force plus lever arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveDisturbance {
    /// Force (N).
    pub force: Vector3<f64>,
    /// Application point relative to the CoM (m).
    pub offset: Vector3<f64>,
}

/// Rectangular foot: four corners around the foot center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FootGeometry {
    /// Full sole length along the walking direction (m).
    pub length: f64,
    /// Full sole width (m).
    pub width: f64,
}

impl FootGeometry {
    /// Corner offsets from the foot center in the foot frame, z = 0.
    /// Order: front-left, front-right, back-left, back-right.
    pub fn corner_offsets(&self) -> [Vector3<f64>; 4] {
        let l = self.length / 2.0;
        let w = self.width / 2.0;
        [
            Vector3::new(l, w, 0.0),
            Vector3::new(l, -w, 0.0),
            Vector3::new(-l, w, 0.0),
            Vector3::new(-l, -w, 0.0),
        ]
    }

    /// World corner positions for a foot center with the given yaw.
    pub fn corner_positions(&self, center: Vector3<f64>, yaw: f64) -> [Vector3<f64>; 4] {
        let rot = yaw_rotation(yaw);
        self.corner_offsets().map(|o| center + rot * o)
    }
}

/// Rotation about the world z axis.
pub fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Physical parameters of the reduced model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Total mass (kg).
    pub mass: f64,
    /// Six-dimensional gravity vector; must be zero outside the third entry.
    pub gravity: Vector6<f64>,
    /// Corner layout shared by both feet.
    pub foot: FootGeometry,
}

impl ModelParams {
    pub fn new(mass: f64, foot: FootGeometry) -> Self {
        Self { mass, gravity: gravity_vector(), foot }
    }

    /// Gravity acceleration (signed z component, m/s²).
    pub fn gravity_z(&self) -> f64 {
        self.gravity[2]
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.mass.is_finite() && self.mass > 0.0) {
            return Err(format!("mass must be positive, got {}", self.mass));
        }
        for (i, v) in self.gravity.iter().enumerate() {
            if i != 2 && *v != 0.0 {
                return Err(format!(
                    "gravity vector must be zero outside the third entry, entry {i} is {v}"
                ));
            }
        }
        if !(self.foot.length > 0.0 && self.foot.width > 0.0) {
            return Err("foot dimensions must be positive".to_string());
        }
        Ok(())
    }
}

/// The canonical gravity vector `(0, 0, -9.81, 0, 0, 0)ᵀ`.
pub fn gravity_vector() -> Vector6<f64> {
    let mut g = Vector6::zeros();
    g[2] = GRAVITY_ACCEL;
    g
}

/// Cross-product (skew-symmetric) matrix: `skew(a) * b == a × b`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Map from a force applied at `p` to a centroidal momentum rate:
/// `A(p) = [I3; S(p − p_com)]`.
pub fn contact_map(p: &Vector3<f64>, p_com: &Vector3<f64>) -> Matrix6x3<f64> {
    let mut a = Matrix6x3::zeros();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    a.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&(p - p_com)));
    a
}

/// Momentum rate and CoM velocity under the given corner forces and
/// disturbances. `forces[i]` is the force transmitted by `corners[i]` and is
/// applied only while that corner is active.
pub fn dynamics_rhs(
    state: &CentroidalState,
    corners: &[ContactCorner],
    forces: &[Vector3<f64>],
    disturbances: &[ActiveDisturbance],
    params: &ModelParams,
) -> Result<CentroidalDerivative, DynamicsError> {
    if corners.len() != forces.len() {
        return Err(DynamicsError::ForceCountMismatch {
            corners: corners.len(),
            forces: forces.len(),
        });
    }
    let mut h_dot = params.mass * params.gravity;
    for (corner, force) in corners.iter().zip(forces) {
        if corner.active {
            h_dot += contact_map(&corner.position, &state.p_com) * force;
        }
    }
    for d in disturbances {
        // The application point rides with the CoM, so the lever arm is the
        // stored offset itself.
        let torque = d.offset.cross(&d.force);
        for i in 0..3 {
            h_dot[i] += d.force[i];
            h_dot[3 + i] += torque[i];
        }
    }
    Ok(CentroidalDerivative { p_com_dot: state.com_velocity(params.mass), h_dot })
}

/// One forward-Euler step of the unperturbed dynamics — the prediction model
/// used by the receding-horizon controller.
pub fn euler_step(
    state: &CentroidalState,
    corners: &[ContactCorner],
    forces: &[Vector3<f64>],
    params: &ModelParams,
    dt: f64,
) -> Result<CentroidalState, DynamicsError> {
    let rhs = dynamics_rhs(state, corners, forces, &[], params)?;
    Ok(CentroidalState {
        p_com: state.p_com + dt * rhs.p_com_dot,
        h: state.h + dt * rhs.h_dot,
    })
}

/// One classical 4th-order step of an autonomous ODE. [`plant_step`] and the
/// closed-loop reference integrations share this stepper.
pub fn rk4_step<const N: usize>(
    x: &SVector<f64, N>,
    dt: f64,
    rhs: impl Fn(&SVector<f64, N>) -> SVector<f64, N>,
) -> SVector<f64, N> {
    let k1 = rhs(x);
    let k2 = rhs(&(x + dt / 2.0 * k1));
    let k3 = rhs(&(x + dt / 2.0 * k2));
    let k4 = rhs(&(x + dt * k3));
    x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// One classical 4th-order (RK4) step of the perturbed dynamics — the
/// simulation plant. Forces, corner positions, and disturbances are held
/// constant over the substep (zero-order hold); `t` is the substep start
/// time, used to time-stamp divergence.
///
/// With held inputs the centroidal dynamics are linear with a nilpotent
/// system matrix, so this step reproduces the exact flow up to roundoff (a
/// property the tests pin down).
pub fn plant_step(
    state: &CentroidalState,
    corners: &[ContactCorner],
    forces: &[Vector3<f64>],
    disturbances: &[ActiveDisturbance],
    params: &ModelParams,
    dt: f64,
    t: f64,
) -> Result<CentroidalState, DynamicsError> {
    if corners.len() != forces.len() {
        return Err(DynamicsError::ForceCountMismatch {
            corners: corners.len(),
            forces: forces.len(),
        });
    }
    let x0 = pack(state);
    let x1 = rk4_step(&x0, dt, |x| {
        let s = unpack(x);
        let d = dynamics_rhs(&s, corners, forces, disturbances, params)
            .expect("force count checked above");
        let mut out = SVector::<f64, 9>::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&d.p_com_dot);
        out.fixed_rows_mut::<6>(3).copy_from(&d.h_dot);
        out
    });
    let next = unpack(&x1);
    if !next.is_finite() {
        return Err(DynamicsError::Diverged { t });
    }
    Ok(next)
}

fn pack(state: &CentroidalState) -> SVector<f64, 9> {
    let mut x = SVector::<f64, 9>::zeros();
    x.fixed_rows_mut::<3>(0).copy_from(&state.p_com);
    x.fixed_rows_mut::<6>(3).copy_from(&state.h);
    x
}

fn unpack(x: &SVector<f64, 9>) -> CentroidalState {
    CentroidalState {
        p_com: x.fixed_rows::<3>(0).into_owned(),
        h: x.fixed_rows::<6>(3).into_owned(),
    }
}
