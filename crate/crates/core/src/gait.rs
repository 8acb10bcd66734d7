//! Footstep plans and center-of-mass references for flat-ground gaits.
//!
//! A plan alternates left/right steps of a biped whose feet are rigid
//! rectangles. Each step lasts `step_duration` seconds: a double-support
//! weight-transfer phase first (`double_support_fraction` of the step),
//! then a single-support phase in which the stepping foot follows a
//! minimum-jerk arc to its next foothold. Every step advances the stepping
//! foot by `step_length * walk_speed_scale` along +x, so after an even
//! number of steps the feet stand side by side again.
//!
//! The CoM reference is a quintic Hermite spline through the support-region
//! midpoints (phase centers): mean of both foot centers in double support,
//! the stance-foot center in single support. Knot accelerations are zero and
//! knot velocities come from centered differences, which makes the reference
//! twice continuously differentiable with analytic `v_ref` and `a_ref` —
//! the controller consumes all three.
//!
//! Zero-displacement steps are pruned: a plan with `step_length = 0`
//! degenerates to quiet standing with both feet permanently active, which is
//! what the disturbance-rejection scenarios use.

use crate::dynamics::FootGeometry;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of feet of the biped model.
pub const N_FEET: usize = 2;
/// Corners per rectangular foot.
pub const CORNERS_PER_FOOT: usize = 4;

/// Foot identifiers; also the index into per-foot arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Foot {
    Left = 0,
    Right = 1,
}

impl Foot {
    pub const BOTH: [Foot; 2] = [Foot::Left, Foot::Right];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Parameters of an alternating-step flat-ground gait.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaitParams {
    /// Advance of the stepping foot per step (m); 0 gives quiet standing.
    pub step_length: f64,
    /// Lateral distance between the two foot centers (m).
    pub step_width: f64,
    /// Duration of one step (s).
    pub step_duration: f64,
    /// Fraction of the step spent in double support, in `[0, 1)`.
    pub double_support_fraction: f64,
    /// Number of steps.
    pub n_steps: usize,
    /// Constant CoM reference height (m).
    pub com_height: f64,
    /// Scales the per-step advance (and with it the mean walk speed).
    pub walk_speed_scale: f64,
}

impl Default for GaitParams {
    /// Quiet double-support standing at the humanoid's nominal stance.
    fn default() -> Self {
        Self {
            step_length: 0.0,
            step_width: 0.18,
            step_duration: 0.8,
            double_support_fraction: 0.25,
            n_steps: 1,
            com_height: 0.53,
            walk_speed_scale: 1.0,
        }
    }
}

impl GaitParams {
    pub fn validate(&self) -> Result<(), GaitError> {
        let bad = |what: &str| Err(GaitError::InvalidParams(what.to_string()));
        if !(self.step_length >= 0.0) {
            return bad("step_length must be non-negative");
        }
        if !(self.step_width > 0.0) {
            return bad("step_width must be positive");
        }
        if !(self.step_duration > 0.0) {
            return bad("step_duration must be positive");
        }
        if !(0.0..1.0).contains(&self.double_support_fraction) {
            return bad("double_support_fraction must lie in [0, 1)");
        }
        if self.n_steps < 1 {
            return bad("n_steps must be at least 1");
        }
        if !(self.com_height > 0.0) {
            return bad("com_height must be positive");
        }
        if !(self.walk_speed_scale > 0.0) {
            return bad("walk_speed_scale must be positive");
        }
        Ok(())
    }

    /// Effective advance of the stepping foot per step.
    pub fn stride(&self) -> f64 {
        self.step_length * self.walk_speed_scale
    }
}

#[derive(Debug, Error)]
pub enum GaitError {
    #[error("invalid gait parameters: {0}")]
    InvalidParams(String),
}

/// One single-support flight of a foot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Swing {
    /// Lift-off time (s); the foot is airborne on `[start, end)`.
    pub start: f64,
    pub end: f64,
    pub from: Vector3<f64>,
    pub to: Vector3<f64>,
}

impl Swing {
    fn phase(&self, t: f64) -> f64 {
        ((t - self.start) / (self.end - self.start)).clamp(0.0, 1.0)
    }

    /// Minimum-jerk position along the arc (flat ground: z stays 0).
    pub fn position(&self, t: f64) -> Vector3<f64> {
        let s = self.phase(t);
        let blend = s * s * s * (10.0 + s * (-15.0 + 6.0 * s));
        self.from + blend * (self.to - self.from)
    }

    /// Minimum-jerk velocity along the arc.
    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        let s = self.phase(t);
        let dblend = 30.0 * s * s * (1.0 - s) * (1.0 - s) / (self.end - self.start);
        dblend * (self.to - self.from)
    }
}

/// A footstep plan plus the CoM reference spline built from it.
#[derive(Debug, Clone)]
pub struct ContactPlan {
    params: GaitParams,
    geometry: FootGeometry,
    initial: [Vector3<f64>; N_FEET],
    swings: [Vec<Swing>; N_FEET],
    spline: ComSpline,
    /// End of the scripted motion; beyond it the plan clamps to standing.
    end_time: f64,
}

/// A reference sample consumed by the controller at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSample {
    pub p_ref: Vector3<f64>,
    pub v_ref: Vector3<f64>,
    pub a_ref: Vector3<f64>,
    /// Nominal corner positions, foot-major: left corners 0..4, then right.
    pub nominal_contacts: Vec<Vector3<f64>>,
    /// Per-corner activation Γ, same ordering.
    pub contact_flags: Vec<bool>,
    /// True when `t` fell outside the scripted plan and the final standing
    /// sample was returned instead.
    pub clamped: bool,
}

/// Build the footstep plan and CoM reference for the given gait.
///
/// The foot geometry expands foot centers into the per-corner contacts that
/// [`sample_reference`] reports.
pub fn plan_footsteps(
    params: &GaitParams,
    geometry: &FootGeometry,
) -> Result<ContactPlan, GaitError> {
    params.validate()?;
    let half_width = params.step_width / 2.0;
    let initial = [
        Vector3::new(0.0, half_width, 0.0),
        Vector3::new(0.0, -half_width, 0.0),
    ];

    // One full step period of quiet double support before the first lift-off
    // gives the controller a spin-up window.
    let lead_in = params.step_duration;
    let ds = params.double_support_fraction * params.step_duration;
    let stride = Vector3::new(params.stride(), 0.0, 0.0);

    let mut swings: [Vec<Swing>; N_FEET] = [Vec::new(), Vec::new()];
    let mut current = initial;
    for step in 0..params.n_steps {
        // Right foot steps first, then alternate.
        let foot = if step % 2 == 0 { Foot::Right } else { Foot::Left };
        let step_start = lead_in + step as f64 * params.step_duration;
        let from = current[foot.index()];
        let to = from + stride;
        if (to - from).norm() > 1e-9 {
            swings[foot.index()].push(Swing {
                start: step_start + ds,
                end: step_start + params.step_duration,
                from,
                to,
            });
            current[foot.index()] = to;
        }
    }
    let end_time = lead_in + params.n_steps as f64 * params.step_duration;

    let spline = build_com_spline(&initial, &swings, end_time);
    Ok(ContactPlan { params: *params, geometry: *geometry, initial, swings, spline, end_time })
}

impl ContactPlan {
    pub fn params(&self) -> &GaitParams {
        &self.params
    }

    pub fn geometry(&self) -> &FootGeometry {
        &self.geometry
    }

    /// End of the scripted motion (s).
    pub fn end_time(&self) -> f64 {
        self.end_time
    }

    pub fn swings(&self, foot: Foot) -> &[Swing] {
        &self.swings[foot.index()]
    }

    /// The swing containing `t`, if the foot is airborne then.
    pub fn swing_at(&self, foot: Foot, t: f64) -> Option<&Swing> {
        self.swings[foot.index()].iter().find(|s| t >= s.start && t < s.end)
    }

    /// Whether the foot is in stance (transmitting force) at `t`.
    pub fn contact_active(&self, foot: Foot, t: f64) -> bool {
        self.swing_at(foot, t).is_none()
    }

    /// Nominal foot-center position at `t`: the current foothold in stance,
    /// the minimum-jerk arc position in swing.
    pub fn foot_center(&self, foot: Foot, t: f64) -> Vector3<f64> {
        if let Some(swing) = self.swing_at(foot, t) {
            return swing.position(t);
        }
        // Last completed swing before t decides the foothold.
        self.swings[foot.index()]
            .iter()
            .rev()
            .find(|s| s.end <= t)
            .map(|s| s.to)
            .unwrap_or(self.initial[foot.index()])
    }

    /// Nominal foot-center velocity at `t` (zero in stance).
    pub fn foot_nominal_velocity(&self, foot: Foot, t: f64) -> Vector3<f64> {
        self.swing_at(foot, t).map(|s| s.velocity(t)).unwrap_or_else(Vector3::zeros)
    }

}

/// Sample the reference trajectory and nominal contact layout at time `t`.
///
/// Beyond the scripted plan the final standing posture is returned with zero
/// derivatives and `clamped = true`.
pub fn sample_reference(plan: &ContactPlan, t: f64) -> ReferenceSample {
    let clamped = t > plan.end_time;
    let tq = t.min(plan.end_time);
    let (mut p, mut v, mut a) = plan.spline.eval(tq);
    p[2] = plan.params.com_height;
    v[2] = 0.0;
    a[2] = 0.0;
    if clamped {
        v = Vector3::zeros();
        a = Vector3::zeros();
    }

    let mut nominal_contacts = Vec::with_capacity(N_FEET * CORNERS_PER_FOOT);
    let mut contact_flags = Vec::with_capacity(N_FEET * CORNERS_PER_FOOT);
    for foot in Foot::BOTH {
        let center = plan.foot_center(foot, tq);
        let active = plan.contact_active(foot, tq);
        for corner in plan.geometry.corner_positions(center, 0.0) {
            nominal_contacts.push(corner);
            contact_flags.push(active);
        }
    }

    ReferenceSample { p_ref: p, v_ref: v, a_ref: a, nominal_contacts, contact_flags, clamped }
}

// ---------------------------------------------------------------------------
// CoM reference spline
// ---------------------------------------------------------------------------

/// Piecewise quintic with positions, velocities, and accelerations matched at
/// the knots (accelerations are pinned to zero there).
#[derive(Debug, Clone)]
struct ComSpline {
    knots: Vec<f64>,
    segments: Vec<QuinticSegment>,
    first: Vector3<f64>,
    last: Vector3<f64>,
}

#[derive(Debug, Clone, Copy)]
struct QuinticSegment {
    t0: f64,
    /// Per-axis polynomial coefficients c0..c5 in (t - t0).
    coeffs: [[f64; 6]; 3],
}

impl QuinticSegment {
    /// Hermite segment matching (p, v, a) at both ends over `[0, h]`.
    fn hermite(
        t0: f64,
        h: f64,
        p0: Vector3<f64>,
        v0: Vector3<f64>,
        a0: Vector3<f64>,
        p1: Vector3<f64>,
        v1: Vector3<f64>,
        a1: Vector3<f64>,
    ) -> Self {
        let mut coeffs = [[0.0; 6]; 3];
        for axis in 0..3 {
            let (p0, v0, a0, p1, v1, a1) =
                (p0[axis], v0[axis], a0[axis], p1[axis], v1[axis], a1[axis]);
            let h2 = h * h;
            let c0 = p0;
            let c1 = v0;
            let c2 = a0 / 2.0;
            let c3 = (20.0 * (p1 - p0) - (8.0 * v1 + 12.0 * v0) * h - (3.0 * a0 - a1) * h2)
                / (2.0 * h * h2);
            let c4 = (30.0 * (p0 - p1) + (14.0 * v1 + 16.0 * v0) * h + (3.0 * a0 - 2.0 * a1) * h2)
                / (2.0 * h2 * h2);
            let c5 = (12.0 * (p1 - p0) - 6.0 * (v1 + v0) * h + (a1 - a0) * h2)
                / (2.0 * h2 * h2 * h);
            coeffs[axis] = [c0, c1, c2, c3, c4, c5];
        }
        Self { t0, coeffs }
    }

    fn eval(&self, t: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let s = t - self.t0;
        let mut p = Vector3::zeros();
        let mut v = Vector3::zeros();
        let mut a = Vector3::zeros();
        for axis in 0..3 {
            let c = &self.coeffs[axis];
            // Horner evaluation of the polynomial and its derivatives.
            p[axis] = ((((c[5] * s + c[4]) * s + c[3]) * s + c[2]) * s + c[1]) * s + c[0];
            v[axis] = (((5.0 * c[5] * s + 4.0 * c[4]) * s + 3.0 * c[3]) * s + 2.0 * c[2]) * s
                + c[1];
            a[axis] = ((20.0 * c[5] * s + 12.0 * c[4]) * s + 6.0 * c[3]) * s + 2.0 * c[2];
        }
        (p, v, a)
    }
}

impl ComSpline {
    fn eval(&self, t: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        if self.segments.is_empty() || t <= self.knots[0] {
            return (self.first, Vector3::zeros(), Vector3::zeros());
        }
        if t >= *self.knots.last().unwrap() {
            return (self.last, Vector3::zeros(), Vector3::zeros());
        }
        // knots[i] <= t < knots[i+1]
        let idx = match self.knots.binary_search_by(|k| k.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(self.segments.len() - 1),
            Err(i) => i - 1,
        };
        self.segments[idx].eval(t)
    }
}

/// Waypoints: start of plan, every phase center (support midpoints), end of
/// plan. Knot velocities are centered differences, accelerations zero.
fn build_com_spline(
    initial: &[Vector3<f64>; N_FEET],
    swings: &[Vec<Swing>; N_FEET],
    end_time: f64,
) -> ComSpline {
    // Chronological swing list across both feet; phases alternate
    // DS / SS / DS / ... with possibly zero-length DS gaps.
    let mut all: Vec<&Swing> = swings.iter().flatten().collect();
    all.sort_by(|a, b| a.start.partial_cmp(&b.start).unwrap());

    let midpoint_at = |t: f64| -> Vector3<f64> {
        let mut sum = Vector3::zeros();
        let mut n = 0;
        for foot in Foot::BOTH {
            let in_swing = swings[foot.index()].iter().any(|s| t >= s.start && t < s.end);
            if !in_swing {
                let center = swings[foot.index()]
                    .iter()
                    .rev()
                    .find(|s| s.end <= t)
                    .map(|s| s.to)
                    .unwrap_or(initial[foot.index()]);
                sum += center;
                n += 1;
            }
        }
        sum / n.max(1) as f64
    };

    let mut times = vec![0.0];
    let mut cursor = 0.0;
    for swing in &all {
        // Double-support gap before this swing.
        if swing.start - cursor > 1e-9 {
            times.push((cursor + swing.start) / 2.0);
        }
        times.push((swing.start + swing.end) / 2.0);
        cursor = swing.end;
    }
    if end_time - cursor > 1e-9 {
        times.push((cursor + end_time) / 2.0);
    }
    times.push(end_time);
    times.dedup_by(|a, b| (*a - *b).abs() < 1e-9);

    let points: Vec<Vector3<f64>> = times.iter().map(|&t| midpoint_at(t)).collect();

    // Centered-difference knot velocities, zero at the endpoints.
    let n = times.len();
    let mut vels = vec![Vector3::zeros(); n];
    for i in 1..n - 1 {
        vels[i] = (points[i + 1] - points[i - 1]) / (times[i + 1] - times[i - 1]);
    }

    let mut segments = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n - 1 {
        let h = times[i + 1] - times[i];
        segments.push(QuinticSegment::hermite(
            times[i],
            h,
            points[i],
            vels[i],
            Vector3::zeros(),
            points[i + 1],
            vels[i + 1],
            Vector3::zeros(),
        ));
    }

    ComSpline {
        knots: times,
        segments,
        first: points[0],
        last: *points.last().unwrap(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn geometry() -> FootGeometry {
        FootGeometry { length: 0.2, width: 0.1 }
    }

    fn walk_params() -> GaitParams {
        GaitParams {
            step_length: 0.2,
            step_width: 0.18,
            step_duration: 1.0,
            double_support_fraction: 0.25,
            n_steps: 4,
            com_height: 0.53,
            walk_speed_scale: 1.0,
        }
    }

    /// Hand enumeration: four alternating 0.2 m steps advance each foot
    /// twice, leaving the final stance center 0.4 m ahead of the start.
    #[test]
    fn four_steps_of_point_two_meters_advance_stance_center_by_point_four() {
        let plan = plan_footsteps(&walk_params(), &geometry()).unwrap();
        let t_end = plan.end_time();
        let left = plan.foot_center(Foot::Left, t_end);
        let right = plan.foot_center(Foot::Right, t_end);
        assert_relative_eq!((left[0] + right[0]) / 2.0, 0.4, epsilon = 1e-12);
        assert_relative_eq!(left[0], 0.4, epsilon = 1e-12);
        assert_relative_eq!(right[0], 0.4, epsilon = 1e-12);
    }

    #[test]
    fn walk_speed_scale_scales_the_advance() {
        let mut p = walk_params();
        p.walk_speed_scale = 0.7;
        let plan = plan_footsteps(&p, &geometry()).unwrap();
        let left = plan.foot_center(Foot::Left, plan.end_time());
        assert_relative_eq!(left[0], 0.4 * 0.7, epsilon = 1e-12);
    }

    #[test]
    fn at_least_one_foot_is_always_active() {
        let plan = plan_footsteps(&walk_params(), &geometry()).unwrap();
        let mut t = 0.0;
        while t <= plan.end_time() + 1.0 {
            let any = Foot::BOTH.iter().any(|f| plan.contact_active(*f, t));
            assert!(any, "no active foot at t = {t}");
            t += 0.01;
        }
    }

    /// With zero double support the activation intervals of the stepping
    /// feet tile the step sequence with no overlap of swing phases.
    #[test]
    fn zero_double_support_partitions_time() {
        let mut p = walk_params();
        p.double_support_fraction = 0.0;
        let plan = plan_footsteps(&p, &geometry()).unwrap();
        let mut t = p.step_duration; // stepping begins after lead-in
        while t < plan.end_time() {
            let swinging =
                Foot::BOTH.iter().filter(|f| !plan.contact_active(**f, t)).count();
            assert_eq!(swinging, 1, "expected exactly one airborne foot at t = {t}");
            t += 0.01;
        }
    }

    #[test]
    fn standing_plan_keeps_reference_and_contacts_constant() {
        let mut p = walk_params();
        p.step_length = 0.0;
        let plan = plan_footsteps(&p, &geometry()).unwrap();
        for &t in &[0.0, 0.7, 2.3, plan.end_time()] {
            let s = sample_reference(&plan, t);
            assert_relative_eq!(s.p_ref, Vector3::new(0.0, 0.0, 0.53), epsilon = 1e-12);
            assert_abs_diff_eq!(s.v_ref.norm(), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(s.a_ref.norm(), 0.0, epsilon = 1e-12);
            assert!(s.contact_flags.iter().all(|&f| f), "standing keeps all corners active");
        }
    }

    #[test]
    fn reference_height_is_always_com_height() {
        let plan = plan_footsteps(&walk_params(), &geometry()).unwrap();
        let mut t = 0.0;
        while t <= plan.end_time() {
            let s = sample_reference(&plan, t);
            assert_eq!(s.p_ref[2], 0.53);
            assert_eq!(s.v_ref[2], 0.0);
            t += 0.037;
        }
    }

    #[test]
    fn samples_beyond_the_plan_are_clamped_and_still() {
        let plan = plan_footsteps(&walk_params(), &geometry()).unwrap();
        let end = sample_reference(&plan, plan.end_time());
        let later = sample_reference(&plan, plan.end_time() + 5.0);
        assert!(!end.clamped);
        assert!(later.clamped);
        assert_relative_eq!(later.p_ref, end.p_ref, epsilon = 1e-12);
        assert_abs_diff_eq!(later.v_ref.norm(), 0.0);
        assert_eq!(later.contact_flags, end.contact_flags);
    }

    /// v_ref and a_ref are the analytic derivatives of p_ref: compare to
    /// central finite differences at random interior times.
    #[test]
    fn reference_derivatives_match_finite_differences() {
        let plan = plan_footsteps(&walk_params(), &geometry()).unwrap();
        let eps = 1e-5;
        let mut t = 0.31;
        while t < plan.end_time() - 0.31 {
            let c = sample_reference(&plan, t);
            let plus = sample_reference(&plan, t + eps);
            let minus = sample_reference(&plan, t - eps);
            let v_fd = (plus.p_ref - minus.p_ref) / (2.0 * eps);
            let a_fd = (plus.v_ref - minus.v_ref) / (2.0 * eps);
            assert_abs_diff_eq!((c.v_ref - v_fd).norm(), 0.0, epsilon = 1e-6);
            assert_abs_diff_eq!((c.a_ref - a_fd).norm(), 0.0, epsilon = 1e-6);
            t += 0.173;
        }
    }

    /// The acceleration reference is continuous across knots (zero on both
    /// sides by construction).
    #[test]
    fn acceleration_is_continuous_at_knots() {
        let plan = plan_footsteps(&walk_params(), &geometry()).unwrap();
        for &knot in &plan.spline.knots {
            if knot <= 0.0 || knot >= plan.end_time() {
                continue;
            }
            let left = sample_reference(&plan, knot - 1e-9);
            let right = sample_reference(&plan, knot + 1e-9);
            assert_abs_diff_eq!((left.a_ref - right.a_ref).norm(), 0.0, epsilon = 1e-6);
            assert_abs_diff_eq!(left.a_ref.norm(), 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn swing_is_minimum_jerk_between_footholds() {
        let plan = plan_footsteps(&walk_params(), &geometry()).unwrap();
        let swing = plan.swings(Foot::Right)[0];
        assert_relative_eq!(swing.position(swing.start), swing.from, epsilon = 1e-12);
        assert_relative_eq!(swing.position(swing.end - 1e-12), swing.to, epsilon = 1e-9);
        assert_abs_diff_eq!(swing.velocity(swing.start).norm(), 0.0, epsilon = 1e-9);
        // Minimum-jerk peak speed is 15/8 of the mean.
        let mid = (swing.start + swing.end) / 2.0;
        let mean = (swing.to - swing.from).norm() / (swing.end - swing.start);
        assert_relative_eq!(swing.velocity(mid).norm(), 1.875 * mean, epsilon = 1e-9);
    }

    #[test]
    fn contact_flags_follow_swing_windows() {
        let plan = plan_footsteps(&walk_params(), &geometry()).unwrap();
        let swing = plan.swings(Foot::Right)[0];
        assert!(plan.contact_active(Foot::Right, swing.start - 1e-9));
        assert!(!plan.contact_active(Foot::Right, swing.start));
        assert!(!plan.contact_active(Foot::Right, swing.end - 1e-9));
        assert!(plan.contact_active(Foot::Right, swing.end));
        let s = sample_reference(&plan, (swing.start + swing.end) / 2.0);
        assert_eq!(&s.contact_flags[0..4], &[true; 4], "left corners stay active");
        assert_eq!(&s.contact_flags[4..8], &[false; 4], "right corners swing");
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut p = walk_params();
        p.double_support_fraction = 1.0;
        assert!(plan_footsteps(&p, &geometry()).is_err());
        let mut p = walk_params();
        p.n_steps = 0;
        assert!(plan_footsteps(&p, &geometry()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn sampled_references_are_consistent(
            step_length in 0.0..0.35f64,
            step_duration in 0.6..1.6f64,
            ds in 0.0..0.5f64,
            n_steps in 1usize..7,
            probe in 0.0..1.0f64,
        ) {
            let params = GaitParams {
                step_length,
                step_width: 0.18,
                step_duration,
                double_support_fraction: ds,
                n_steps,
                com_height: 0.53,
                walk_speed_scale: 1.0,
            };
            let plan = plan_footsteps(&params, &geometry()).unwrap();
            let t = probe * plan.end_time();
            let s = sample_reference(&plan, t);
            // Height pinned, at least one active corner set, derivative
            // consistency against finite differences.
            prop_assert_eq!(s.p_ref[2], 0.53);
            prop_assert!(s.contact_flags.iter().any(|&f| f));
            if t > 1e-3 && t < plan.end_time() - 1e-3 {
                let eps = 1e-6;
                let plus = sample_reference(&plan, t + eps);
                let minus = sample_reference(&plan, t - eps);
                let v_fd = (plus.p_ref - minus.p_ref) / (2.0 * eps);
                prop_assert!((s.v_ref - v_fd).norm() < 1e-5);
            }
        }
    }
}
