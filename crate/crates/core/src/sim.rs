//! Closed-loop scenario executor: ground-truth plant integration under a
//! zero-order-held predictive controller, disturbance injection, trace
//! recording, and metric evaluation.
//!
//! One controller tick covers `period` seconds. The loop per tick:
//!
//! 1. measure the plant state and transform it into error coordinates,
//! 2. advance the disturbance estimate one step,
//! 3. build and solve the receding-horizon problem (warm-started by the
//!    shifted previous solution),
//! 4. hold the first-interval forces and foot velocities constant while the
//!    plant integrates [`PLANT_SUBSTEPS`] exact substeps with disturbances
//!    applied at substep resolution.
//!
//! Solver breakdowns and numerical divergence are recorded outcomes (the
//! failing tick is kept in the trace and reported in the metrics), never
//! panics or errors.

use crate::dynamics::{
    plant_step, ActiveDisturbance, CentroidalState, ContactCorner, DisturbanceKind,
    DisturbanceSpec, ModelParams,
};
use crate::gait::{plan_footsteps, sample_reference, Foot, GaitParams, N_FEET};
use crate::mpc::{
    shift_warm_start, solve_mpc, MpcConfig, MpcProblem, MpcWindow, N_CORNERS,
};
use crate::nlp::sqp::NlpOptions;
use crate::nlp::SolveStatus;
use crate::stabilizer::{adapt_step, stability_residual, transform, EstimatorState, TransformedState};
use nalgebra::{DVector, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exact plant substeps per controller period (zero-order-held inputs).
pub const PLANT_SUBSTEPS: usize = 10;

/// Thresholds a finished run is judged against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessThresholds {
    /// Largest tolerated per-axis CoM position error (m).
    pub z1_max: f64,
    /// Largest tolerated CoM height error (m).
    pub height_max: f64,
}

impl Default for SuccessThresholds {
    fn default() -> Self {
        Self { z1_max: 0.15, height_max: 0.05 }
    }
}

/// Everything one closed-loop run needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub model: ModelParams,
    pub gait: GaitParams,
    pub mpc: MpcConfig,
    pub disturbances: Vec<DisturbanceSpec>,
    /// Simulated duration in seconds; the tick count is `duration / period`
    /// rounded to the nearest integer.
    pub duration: f64,
    /// Recorded for provenance; the run itself is deterministic, the seed
    /// names the draw that generated randomized scenario parameters.
    pub seed: u64,
    pub thresholds: SuccessThresholds,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
}

/// Outcome of one controller tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TickStatus {
    /// Solver reached its tolerance; first-interval command applied.
    Converged,
    /// Iteration budget exhausted; the best iterate was applied and the run
    /// continued (the thresholds catch any real consequence).
    Unconverged,
    /// Solver broke down numerically; the run stops at this tick.
    Failed,
    /// The plant state stopped being finite; the run stops at this tick.
    Diverged,
    /// Final trace row: recorded state only, no solve behind it.
    Terminal,
}

/// One recorded controller tick (or the terminal state row).
#[derive(Debug, Clone)]
pub struct TraceRow {
    /// Tick time (s).
    pub t: f64,
    /// Measured plant state at `t`.
    pub state: CentroidalState,
    /// Reference position at `t`.
    pub p_ref: Vector3<f64>,
    /// Reference velocity at `t`.
    pub v_ref: Vector3<f64>,
    /// Error coordinates of `state`.
    pub transformed: TransformedState,
    /// Disturbance estimate used by this tick's solve (m/s²).
    pub theta_hat: Vector3<f64>,
    /// Applied correction term (zero when stability rows are off).
    pub nu: Vector3<f64>,
    /// Applied per-corner forces (N), foot-major order.
    pub forces: [Vector3<f64>; N_CORNERS],
    /// Stance flags at `t`.
    pub contact_active: [bool; N_FEET],
    /// Simulated foot centers at `t`.
    pub foot_centers: [Vector3<f64>; N_FEET],
    /// Largest per-axis deviation of the commanded next-knot foot centers
    /// from their nominal locations (m).
    pub contact_deviation: f64,
    /// Decrease-rate residual at the measured state under the applied ν.
    pub stab_residual: f64,
    /// Mass-normalized angular-momentum norm at `t`.
    pub eta_norm: f64,
    pub solve_iters: usize,
    /// Wall-clock solve time; excluded from equality comparisons because it
    /// is the one field that varies between reruns of the same scenario.
    pub solve_ms: f64,
    pub status: TickStatus,
}

impl PartialEq for TraceRow {
    fn eq(&self, other: &Self) -> bool {
        self.t == other.t
            && self.state == other.state
            && self.p_ref == other.p_ref
            && self.v_ref == other.v_ref
            && self.transformed == other.transformed
            && self.theta_hat == other.theta_hat
            && self.nu == other.nu
            && self.forces == other.forces
            && self.contact_active == other.contact_active
            && self.foot_centers == other.foot_centers
            && self.contact_deviation == other.contact_deviation
            && self.stab_residual == other.stab_residual
            && self.eta_norm == other.eta_norm
            && self.solve_iters == other.solve_iters
            && self.status == other.status
    }
}

/// Scalar summary of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean absolute CoM height error over the finite trace rows (m).
    pub height_error_mean: f64,
    /// Population standard deviation of the absolute height error (m).
    pub height_error_std: f64,
    /// Largest absolute CoM height error (m).
    pub max_height_error: f64,
    /// Largest mass-normalized angular-momentum norm.
    pub max_eta_norm: f64,
    /// Largest commanded foot-center deviation from nominal (m).
    pub max_contact_deviation: f64,
    /// Largest per-axis CoM position error (m).
    pub max_z1_inf: f64,
    /// Ticks whose solve hit the iteration budget without converging.
    pub unconverged_ticks: usize,
    /// First tick that failed, diverged, or carries a non-finite state.
    pub failure_tick: Option<usize>,
    /// No failure tick and all thresholds met.
    pub success: bool,
}

/// A finished run: full trace plus metrics and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub trace: Vec<TraceRow>,
    pub metrics: Metrics,
    /// Seed copied from the scenario for provenance.
    pub seed: u64,
    /// Solver options every tick ran with.
    pub solver: NlpOptions,
}

/// Disturbance forces active at the instant `t` (half-open windows).
pub fn disturbance_at(t: f64, specs: &[DisturbanceSpec]) -> Vec<ActiveDisturbance> {
    specs
        .iter()
        .filter(|s| t >= s.window.0 && t < s.window.1)
        .map(|s| ActiveDisturbance { force: s.force, offset: s.application_point })
        .collect()
}

/// Disturbance forces for the plant substep `[t0, t0 + dt)`.
///
/// Windows no shorter than a substep are gated on the substep midpoint, which
/// makes the delivered impulse of a window exact whenever its boundaries fall
/// on substep boundaries. An `Impulse` window shorter than one substep is
/// compressed into the substep containing its start, with the force scaled by
/// `width / dt` so the delivered momentum is preserved.
pub fn disturbances_for_substep(
    t0: f64,
    dt: f64,
    specs: &[DisturbanceSpec],
) -> Vec<ActiveDisturbance> {
    let mid = t0 + dt / 2.0;
    let mut out = Vec::new();
    for s in specs {
        let (start, end) = s.window;
        let width = end - start;
        if s.kind == DisturbanceKind::Impulse && width < dt {
            if t0 <= start && start < t0 + dt {
                out.push(ActiveDisturbance {
                    force: s.force * (width / dt),
                    offset: s.application_point,
                });
            }
        } else if mid >= start && mid < end {
            out.push(ActiveDisturbance { force: s.force, offset: s.application_point });
        }
    }
    out
}

fn validate(cfg: &ScenarioConfig) -> Result<(), SimError> {
    let bad = |m: String| Err(SimError::InvalidConfig(m));
    cfg.model.validate().or_else(|e| bad(e))?;
    cfg.gait.validate().or_else(|e| bad(e.to_string()))?;
    cfg.mpc.validate().or_else(|e| bad(e.to_string()))?;
    if !(cfg.duration > 0.0 && cfg.duration.is_finite()) {
        return bad(format!("duration must be positive, got {}", cfg.duration));
    }
    if cfg.duration < cfg.mpc.period {
        return bad("duration must cover at least one controller period".to_string());
    }
    if (cfg.gait.com_height - 0.0).abs() < f64::EPSILON {
        return bad("gait com_height must be positive".to_string());
    }
    Ok(())
}

fn nan_state() -> CentroidalState {
    CentroidalState { p_com: Vector3::repeat(f64::NAN), h: Vector6::repeat(f64::NAN) }
}

/// Execute one closed-loop scenario.
///
/// Configuration problems are errors; everything that can go wrong *during*
/// the run (solver breakdown, divergence) is recorded in the returned trace
/// and metrics instead.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimResult, SimError> {
    validate(cfg)?;
    let plan = plan_footsteps(&cfg.gait, &cfg.model.foot)
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let dt = cfg.mpc.period;
    let n_ticks = (cfg.duration / dt).round() as usize;
    let substep = dt / PLANT_SUBSTEPS as f64;
    let mass = cfg.model.mass;
    let gains = cfg.mpc.gains;

    let r0 = sample_reference(&plan, 0.0);
    let mut state = CentroidalState::at_rest(r0.p_ref);
    let mut feet =
        [plan.foot_center(Foot::Left, 0.0), plan.foot_center(Foot::Right, 0.0)];
    let mut est = EstimatorState::zero();
    let mut prev_decision: Option<DVector<f64>> = None;
    let mut trace: Vec<TraceRow> = Vec::with_capacity(n_ticks + 1);
    let mut ended_early = false;

    'ticks: for i in 0..n_ticks {
        let t = i as f64 * dt;
        let r = sample_reference(&plan, t);
        let contact_active =
            [plan.contact_active(Foot::Left, t), plan.contact_active(Foot::Right, t)];
        if !state.is_finite() {
            trace.push(state_only_row(
                t,
                state,
                &r,
                est.theta_hat,
                contact_active,
                feet,
                &gains,
                mass,
                TickStatus::Diverged,
            ));
            ended_early = true;
            break;
        }
        let ts = transform(&state, &r, &gains, mass);
        est = adapt_step(&est, ts.z2, dt, &gains);

        let window = MpcWindow::from_plan(&plan, t, cfg.mpc.n_p, dt);
        let problem =
            MpcProblem::new(cfg.mpc.clone(), mass, &cfg.model.foot, window, &state, feet, est.theta_hat)
                .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        let warm = prev_decision.as_ref().map(|d| shift_warm_start(&problem, d));
        let started = std::time::Instant::now();
        let sol = solve_mpc(&problem, warm.as_ref());
        let solve_ms = started.elapsed().as_secs_f64() * 1e3;

        let forces_finite = sol.forces.iter().all(|f| f.iter().all(|v| v.is_finite()));
        let status = match sol.report.status {
            SolveStatus::Converged if forces_finite => TickStatus::Converged,
            SolveStatus::MaxIter if forces_finite => TickStatus::Unconverged,
            _ => TickStatus::Failed,
        };

        let mut contact_deviation = 0.0f64;
        let next_ref = &problem.window.refs[1];
        for foot in Foot::BOTH {
            let dev = sol.adapted_contacts[foot.index()] - next_ref.foot_nominal[foot.index()];
            for a in 0..3 {
                contact_deviation = contact_deviation.max(dev[a].abs());
            }
        }

        trace.push(TraceRow {
            t,
            state,
            p_ref: r.p_ref,
            v_ref: r.v_ref,
            transformed: ts,
            theta_hat: est.theta_hat,
            nu: sol.nu,
            forces: sol.forces,
            contact_active,
            foot_centers: feet,
            contact_deviation,
            stab_residual: stability_residual(ts.z1, ts.z2, sol.nu, &gains),
            eta_norm: ts.eta.norm(),
            solve_iters: sol.report.iterations,
            solve_ms,
            status,
        });
        if status == TickStatus::Failed {
            ended_early = true;
            break;
        }
        prev_decision = Some(sol.decision.clone());

        // Hold the first-interval command and integrate the plant.
        for j in 0..PLANT_SUBSTEPS {
            let t_sub = t + j as f64 * substep;
            let active = [
                plan.contact_active(Foot::Left, t_sub + substep / 2.0),
                plan.contact_active(Foot::Right, t_sub + substep / 2.0),
            ];
            let mut corners = Vec::with_capacity(N_CORNERS);
            let mut forces = Vec::with_capacity(N_CORNERS);
            for foot in Foot::BOTH {
                for (c, offset) in cfg.model.foot.corner_offsets().iter().enumerate() {
                    let mut corner = ContactCorner::stance(feet[foot.index()] + offset);
                    corner.active = active[foot.index()];
                    corners.push(corner);
                    forces.push(sol.forces[foot.index() * 4 + c]);
                }
            }
            let dists = disturbances_for_substep(t_sub, substep, &cfg.disturbances);
            match plant_step(&state, &corners, &forces, &dists, &cfg.model, substep, t_sub) {
                Ok(next) => state = next,
                Err(_) => {
                    // Record the divergence as a trailing non-finite row so
                    // the metrics see it at trace level.
                    let t_fail = (i + 1) as f64 * dt;
                    let r_fail = sample_reference(&plan, t_fail);
                    trace.push(state_only_row(
                        t_fail,
                        nan_state(),
                        &r_fail,
                        est.theta_hat,
                        active,
                        feet,
                        &gains,
                        mass,
                        TickStatus::Diverged,
                    ));
                    ended_early = true;
                    break 'ticks;
                }
            }
            // Swing feet follow the commanded velocity; stance feet stay put
            // (touchdown freezes a foot wherever the swing left it).
            for foot in Foot::BOTH {
                if !active[foot.index()] {
                    feet[foot.index()] += substep * sol.foot_velocity[foot.index()];
                }
            }
        }
    }

    if !ended_early {
        let t_end = n_ticks as f64 * dt;
        let r = sample_reference(&plan, t_end);
        let contact_active =
            [plan.contact_active(Foot::Left, t_end), plan.contact_active(Foot::Right, t_end)];
        let status =
            if state.is_finite() { TickStatus::Terminal } else { TickStatus::Diverged };
        trace.push(state_only_row(
            t_end,
            state,
            &r,
            est.theta_hat,
            contact_active,
            feet,
            &gains,
            mass,
            status,
        ));
    }

    let metrics = evaluate_metrics(&trace, &cfg.thresholds);
    Ok(SimResult { trace, metrics, seed: cfg.seed, solver: crate::mpc::default_nlp_options() })
}

/// A trace row that records a state without a solve behind it (the terminal
/// row, or a divergence marker).
#[allow(clippy::too_many_arguments)]
fn state_only_row(
    t: f64,
    state: CentroidalState,
    r: &crate::gait::ReferenceSample,
    theta_hat: Vector3<f64>,
    contact_active: [bool; N_FEET],
    feet: [Vector3<f64>; N_FEET],
    gains: &crate::stabilizer::GainSet,
    mass: f64,
    status: TickStatus,
) -> TraceRow {
    let ts = transform(&state, r, gains, mass);
    TraceRow {
        t,
        state,
        p_ref: r.p_ref,
        v_ref: r.v_ref,
        transformed: ts,
        theta_hat,
        nu: Vector3::zeros(),
        forces: [Vector3::zeros(); N_CORNERS],
        contact_active,
        foot_centers: feet,
        contact_deviation: 0.0,
        stab_residual: stability_residual(ts.z1, ts.z2, Vector3::zeros(), gains),
        eta_norm: ts.eta.norm(),
        solve_iters: 0,
        solve_ms: 0.0,
        status,
    }
}

/// Score a trace against the thresholds.
///
/// The failure tick is the first row that failed, diverged, or carries a
/// non-finite state; rows from it onward are excluded from the error
/// statistics. Success requires no failure tick, every per-axis CoM error
/// within `z1_max`, and every height error within `height_max`.
pub fn evaluate_metrics(trace: &[TraceRow], thresholds: &SuccessThresholds) -> Metrics {
    let mut failure_tick = None;
    let mut unconverged = 0usize;
    let mut height_errors: Vec<f64> = Vec::with_capacity(trace.len());
    let mut max_eta = 0.0f64;
    let mut max_dev = 0.0f64;
    let mut max_z1 = 0.0f64;
    for (i, row) in trace.iter().enumerate() {
        let broken = !row.state.is_finite()
            || row.status == TickStatus::Failed
            || row.status == TickStatus::Diverged;
        if broken {
            if failure_tick.is_none() {
                failure_tick = Some(i);
            }
            continue;
        }
        if row.status == TickStatus::Unconverged {
            unconverged += 1;
        }
        height_errors.push((row.state.p_com[2] - row.p_ref[2]).abs());
        max_eta = max_eta.max(row.transformed.eta.norm());
        max_dev = max_dev.max(row.contact_deviation);
        max_z1 = max_z1.max(row.transformed.z1.amax());
    }
    let n = height_errors.len().max(1) as f64;
    let mean = height_errors.iter().sum::<f64>() / n;
    let var = height_errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    let max_height = height_errors.iter().fold(0.0f64, |m, e| m.max(*e));
    let success = !trace.is_empty()
        && failure_tick.is_none()
        && max_z1 <= thresholds.z1_max
        && max_height <= thresholds.height_max;
    Metrics {
        height_error_mean: mean,
        height_error_std: var.sqrt(),
        max_height_error: max_height,
        max_eta_norm: max_eta,
        max_contact_deviation: max_dev,
        max_z1_inf: max_z1,
        unconverged_ticks: unconverged,
        failure_tick,
        success,
    }
}

/// Seeded mean-walk-speed draws (m/s), uniform over `range`, for building
/// randomized trial batches.
pub fn sample_walk_speeds(seed: u64, n: usize, range: (f64, f64)) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(range.0..range.1)).collect()
}
