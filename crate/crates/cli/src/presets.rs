//! Built-in scenario library.
//!
//! Six canonical scenarios cover the horizon/period ablation grid, quiet
//! standing, constant-push disturbance rejection, and loaded walking with a
//! lateral shove. `stabmpc preset <name>` runs one and writes the
//! materialized configuration next to its outputs so every preset doubles as
//! a documented example file.

use crate::config::{
    ConfigFile, DisturbanceSection, GaitSection, KindChoice, ModelSection,
    MpcSection, ScenarioSection, StabilityChoice, ThresholdSection,
    SCHEMA_VERSION,
};

pub const PRESET_NAMES: [&str; 6] =
    ["fig2-left", "fig2-center", "fig2-right", "standing", "push", "payload"];

fn base(id: &str, duration: f64, seed: u64) -> ConfigFile {
    ConfigFile {
        schema: SCHEMA_VERSION,
        scenario: ScenarioSection { id: Some(id.to_string()), duration, seed },
        model: ModelSection { mass: 56.7, foot_length: 0.2, foot_width: 0.1 },
        gait: GaitSection::default(),
        mpc: MpcSection::default(),
        thresholds: ThresholdSection::default(),
        disturbances: vec![],
    }
}

fn walk(mut file: ConfigFile, n_steps: usize) -> ConfigFile {
    file.gait = GaitSection {
        step_length: 0.15,
        n_steps,
        ..GaitSection::default()
    };
    file
}

/// Look up a preset by name.
pub fn preset(name: &str) -> Option<ConfigFile> {
    let file = match name {
        // Ablation grid over prediction horizon and controller period: the
        // nominal-horizon/nominal-period cell, the shortened horizon, and
        // the halved controller frequency.
        "fig2-left" => walk(base("fig2-left", 10.0, 1), 10),
        "fig2-center" => {
            let mut f = walk(base("fig2-center", 10.0, 2), 10);
            f.mpc.horizon = 10;
            f
        }
        "fig2-right" => {
            let mut f = walk(base("fig2-right", 10.0, 3), 10);
            f.mpc.period = 0.2;
            f
        }
        "standing" => base("standing", 10.0, 4),
        // Constant 20 N shove at the CoM. The correction term is tightly
        // bounded so the total force tracks the adaptive feedback and the
        // estimator sees the disturbance (see README on adaptation vs.
        // correction authority); the estimate settles within 10 s.
        "push" => {
            let mut f = base("push", 15.0, 5);
            f.mpc.nu_bound = 1e-3;
            f.mpc.gains.adapt_gain = 3.0;
            f.disturbances.push(DisturbanceSection {
                force: [20.0, 0.0, 0.0],
                application_point: [0.0, 0.0, 0.0],
                window: [1.0, f64::INFINITY],
                kind: KindChoice::Constant,
            });
            f
        }
        // Loaded walking: a 6 kg payload placed on the robot early in the
        // walk plus a lateral shove mid-walk, stressing contact adaptation.
        "payload" => {
            let mut f = walk(base("payload", 10.0, 6), 10);
            f.disturbances.push(DisturbanceSection {
                force: [0.0, 0.0, -58.9],
                application_point: [0.0, 0.0, 0.0],
                window: [1.2, f64::INFINITY],
                kind: KindChoice::StepChange,
            });
            f.disturbances.push(DisturbanceSection {
                force: [0.0, 35.0, 0.0],
                application_point: [0.0, 0.0, 0.05],
                window: [4.0, 4.4],
                kind: KindChoice::Impulse,
            });
            f
        }
        _ => return None,
    };
    Some(file)
}

pub fn describe(name: &str) -> &'static str {
    match name {
        "fig2-left" => "10-step walk, horizon 12, period 0.1 s (both modes track)",
        "fig2-center" => "10-step walk, horizon 10, period 0.1 s (stability rows required)",
        "fig2-right" => "10-step walk, horizon 12, period 0.2 s (stability rows required)",
        "standing" => "quiet double-support standing, no disturbance",
        "push" => "standing under a constant 20 N CoM push; adaptive rejection",
        "payload" => "loaded 10-step walk with a mid-walk lateral shove",
        _ => "",
    }
}
