//! Scenario configuration files.
//!
//! The on-disk format is TOML with a required `schema = 1` version key.
//! Unknown keys are rejected, and parse or validation failures name the
//! offending key as a dotted path (for example `model.mass`). The full
//! grammar is documented in `docs/config.md`.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stabmpc::dynamics::{
    DisturbanceKind, DisturbanceSpec, FootGeometry, ModelParams,
};
use stabmpc::gait::GaitParams;
use stabmpc::mpc::{MpcConfig, StabilityMode};
use stabmpc::sim::{ScenarioConfig, SuccessThresholds};
use stabmpc::stabilizer::GainSet;

/// The schema revision this binary reads and writes.
pub const SCHEMA_VERSION: u32 = 1;

/// A configuration problem, with the dotted key path when one is known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: Option<String>,
    pub message: String,
}

impl ConfigError {
    fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: Some(path.into()), message: message.into() }
    }

    fn bare(message: impl Into<String>) -> Self {
        Self { path: None, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.path {
            Some(p) => write!(f, "config error at `{p}`: {}", self.message),
            None => write!(f, "config error: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// On-disk scenario file. Every field has a documented default except
/// `schema`, `scenario.duration`, and `model.mass`, which must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema: u32,
    pub scenario: ScenarioSection,
    pub model: ModelSection,
    #[serde(default)]
    pub gait: GaitSection,
    #[serde(default)]
    pub mpc: MpcSection,
    #[serde(default)]
    pub thresholds: ThresholdSection,
    #[serde(default, rename = "disturbance")]
    pub disturbances: Vec<DisturbanceSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// Identifier used for the output directory; defaults to the file stem.
    #[serde(default)]
    pub id: Option<String>,
    /// Simulated duration in seconds.
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Total mass in kilograms.
    pub mass: f64,
    #[serde(default = "defaults::foot_length")]
    pub foot_length: f64,
    #[serde(default = "defaults::foot_width")]
    pub foot_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitSection {
    pub step_length: f64,
    pub step_width: f64,
    pub step_duration: f64,
    pub double_support_fraction: f64,
    pub n_steps: usize,
    pub com_height: f64,
    pub walk_speed_scale: f64,
}

impl Default for GaitSection {
    fn default() -> Self {
        let g = GaitParams::default();
        Self {
            step_length: g.step_length,
            step_width: g.step_width,
            step_duration: g.step_duration,
            double_support_fraction: g.double_support_fraction,
            n_steps: g.n_steps,
            com_height: g.com_height,
            walk_speed_scale: g.walk_speed_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSection {
    /// Number of prediction intervals.
    pub horizon: usize,
    /// Controller period in seconds.
    pub period: f64,
    /// Diagonals of the tracking, angular-momentum, and contact weights.
    pub q1: [f64; 3],
    pub q2: [f64; 3],
    pub q3: [f64; 3],
    pub force_symmetry_weight: f64,
    pub eta_bound: f64,
    pub stability: StabilityChoice,
    pub first_step_only: bool,
    pub friction_mu: f64,
    pub f_z_min: f64,
    /// Half-widths of the symmetric contact-adaptation box.
    pub contact_box: [f64; 3],
    pub nu_bound: f64,
    pub eps_stab: f64,
    pub gains: GainsSection,
}

impl Default for MpcSection {
    fn default() -> Self {
        let m = MpcConfig::default();
        Self {
            horizon: m.n_p,
            period: m.period,
            q1: [m.q1[(0, 0)], m.q1[(1, 1)], m.q1[(2, 2)]],
            q2: [m.q2[(0, 0)], m.q2[(1, 1)], m.q2[(2, 2)]],
            q3: [m.q3[(0, 0)], m.q3[(1, 1)], m.q3[(2, 2)]],
            force_symmetry_weight: m.w_force,
            eta_bound: m.eta_bound,
            stability: StabilityChoice::On,
            first_step_only: m.first_step_only,
            friction_mu: m.friction_mu,
            f_z_min: m.f_z_min,
            contact_box: [m.contact_upper[0], m.contact_upper[1], m.contact_upper[2]],
            nu_bound: m.nu_bound,
            eps_stab: m.eps_stab,
            gains: GainsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainsSection {
    pub k1: [f64; 3],
    pub k2: [f64; 3],
    pub adapt_gain: f64,
}

impl Default for GainsSection {
    fn default() -> Self {
        let g = MpcConfig::default().gains;
        Self { k1: [g.k1[0], g.k1[1], g.k1[2]], k2: [g.k2[0], g.k2[1], g.k2[2]], adapt_gain: g.adapt_gain }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdSection {
    pub z1_max: f64,
    pub height_max: f64,
}

impl Default for ThresholdSection {
    fn default() -> Self {
        let t = SuccessThresholds::default();
        Self { z1_max: t.z1_max, height_max: t.height_max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSection {
    /// Force vector in Newtons.
    pub force: [f64; 3],
    /// Lever arm from the CoM in meters; zero applies the force at the CoM.
    #[serde(default)]
    pub application_point: [f64; 3],
    /// Half-open activation window `[start, end)` in seconds; `end` may be
    /// `inf`.
    pub window: [f64; 2],
    pub kind: KindChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StabilityChoice {
    /// Stability residual row plus step-to-step contraction of ‖η‖.
    On,
    /// No stability rows (ablation baseline).
    Off,
    /// Stability residual row plus the cap ‖η‖ ≤ eta_bound.
    NormBound,
}

impl From<StabilityChoice> for StabilityMode {
    fn from(c: StabilityChoice) -> Self {
        match c {
            StabilityChoice::On => StabilityMode::FullContraction,
            StabilityChoice::Off => StabilityMode::Off,
            StabilityChoice::NormBound => StabilityMode::NormBound,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindChoice {
    Constant,
    Impulse,
    StepChange,
}

impl From<KindChoice> for DisturbanceKind {
    fn from(k: KindChoice) -> Self {
        match k {
            KindChoice::Constant => DisturbanceKind::Constant,
            KindChoice::Impulse => DisturbanceKind::Impulse,
            KindChoice::StepChange => DisturbanceKind::StepChange,
        }
    }
}

mod defaults {
    pub fn foot_length() -> f64 {
        0.2
    }
    pub fn foot_width() -> f64 {
        0.1
    }
}

/// Parse a configuration document, rejecting unknown keys and reporting
/// errors with dotted key paths.
pub fn parse_config_str(text: &str) -> Result<ConfigFile, ConfigError> {
    let de = toml::de::Deserializer::new(text);
    let file: ConfigFile =
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let msg = e.inner().message().to_string();
            // Fold serde's "missing field `mass`" into the dotted path so the
            // error names `model.mass` directly.
            if let Some(field) = msg
                .strip_prefix("missing field `")
                .and_then(|r| r.strip_suffix('`'))
            {
                let full = if path.is_empty() || path == "." {
                    field.to_string()
                } else {
                    format!("{path}.{field}")
                };
                return ConfigError::at(full, "missing required key");
            }
            if path.is_empty() || path == "." {
                ConfigError::bare(msg)
            } else {
                ConfigError::at(path, msg)
            }
        })?;
    if file.schema != SCHEMA_VERSION {
        return Err(ConfigError::at(
            "schema",
            format!("unsupported schema revision {} (expected {SCHEMA_VERSION})", file.schema),
        ));
    }
    Ok(file)
}

/// Build the simulator scenario from a parsed file, running the library
/// validators and mapping their messages onto dotted key paths.
pub fn to_scenario(file: &ConfigFile) -> Result<ScenarioConfig, ConfigError> {
    let model = ModelParams::new(
        file.model.mass,
        FootGeometry { length: file.model.foot_length, width: file.model.foot_width },
    );
    model.validate().map_err(|m| ConfigError::at("model", m).prefixed())?;

    let g = &file.gait;
    let gait = GaitParams {
        step_length: g.step_length,
        step_width: g.step_width,
        step_duration: g.step_duration,
        double_support_fraction: g.double_support_fraction,
        n_steps: g.n_steps,
        com_height: g.com_height,
        walk_speed_scale: g.walk_speed_scale,
    };
    gait.validate().map_err(|e| ConfigError::at("gait", e.to_string()).prefixed())?;

    let m = &file.mpc;
    let box_half = Vector3::from(m.contact_box);
    let mpc = MpcConfig {
        n_p: m.horizon,
        period: m.period,
        q1: Matrix3::from_diagonal(&Vector3::from(m.q1)),
        q2: Matrix3::from_diagonal(&Vector3::from(m.q2)),
        q3: Matrix3::from_diagonal(&Vector3::from(m.q3)),
        w_force: m.force_symmetry_weight,
        gains: GainSet {
            k1: Vector3::from(m.gains.k1),
            k2: Vector3::from(m.gains.k2),
            adapt_gain: m.gains.adapt_gain,
        },
        eta_bound: m.eta_bound,
        stability_mode: m.stability.into(),
        first_step_only: m.first_step_only,
        friction_mu: m.friction_mu,
        f_z_min: m.f_z_min,
        contact_lower: -box_half,
        contact_upper: box_half,
        nu_bound: m.nu_bound,
        eps_stab: m.eps_stab,
    };
    mpc.validate().map_err(|e| ConfigError::at("mpc", e.to_string()).prefixed())?;

    if !(file.scenario.duration > 0.0) {
        return Err(ConfigError::at("scenario.duration", "must be positive"));
    }

    let disturbances = file
        .disturbances
        .iter()
        .enumerate()
        .map(|(i, d)| {
            if !(d.window[0] < d.window[1]) {
                return Err(ConfigError::at(
                    format!("disturbance[{i}].window"),
                    "window start must precede its end",
                ));
            }
            Ok(DisturbanceSpec {
                force: Vector3::from(d.force),
                application_point: Vector3::from(d.application_point),
                window: (d.window[0], d.window[1]),
                kind: d.kind.into(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(ScenarioConfig {
        model,
        gait,
        mpc,
        disturbances,
        duration: file.scenario.duration,
        seed: file.scenario.seed,
        thresholds: SuccessThresholds {
            z1_max: file.thresholds.z1_max,
            height_max: file.thresholds.height_max,
        },
    })
}

impl ConfigError {
    /// Library validators lead their messages with the offending field name
    /// (`step_width must be positive`). Splice that name into the dotted
    /// path so the final message reads `gait.step_width must be positive`.
    fn prefixed(self) -> Self {
        let Some(section) = self.path else { return self };
        let mut words = self.message.splitn(2, ' ');
        let first = words.next().unwrap_or_default();
        let looks_like_field = !first.is_empty()
            && first.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
        match (looks_like_field, words.next()) {
            (true, Some(rest)) => ConfigError {
                path: Some(format!("{section}.{first}")),
                message: rest.to_string(),
            },
            _ => ConfigError { path: Some(section), message: self.message },
        }
    }
}

/// Load and fully validate a scenario file.
pub fn load(path: &Path) -> Result<(ConfigFile, ScenarioConfig), ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::bare(format!("cannot read {}: {e}", path.display())))?;
    let file = parse_config_str(&text)?;
    let scenario = to_scenario(&file)?;
    Ok((file, scenario))
}

/// Scenario identifier: explicit id, else the file stem.
pub fn scenario_id(file: &ConfigFile, path: Option<&Path>) -> String {
    if let Some(id) = &file.scenario.id {
        return id.clone();
    }
    path.and_then(|p| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".to_string())
}

/// Fallback identifier for a file that could not be parsed.
pub fn scenario_id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Platform-stable digest of the effective configuration: SHA-256 over the
/// canonical JSON encoding of the fully-defaulted file.
pub fn config_hash(file: &ConfigFile) -> String {
    let canonical = serde_json::to_string(file).expect("config serializes");
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    format!("sha256:{}", hex::encode(h.finalize()))
}
