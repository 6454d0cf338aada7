//! Run configuration: one TOML document with a section per module.
//!
//! Every key is optional; missing keys take the defaults below and unknown
//! keys are rejected. Angles are given in degrees here and converted to
//! radians when the module configs are built.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::control::ControlConfig;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::perception::{DatasetConfig, OptConfig, OracleParams, TwoHeadModel};
use crate::scale_align::ScaleDemoConfig;
use crate::sim::{default_disturbance_schedule, Disturbance, EpisodeConfig, PerceptionVariant};
use crate::trail::{make_scenario, make_scenario_by_name, ScenarioKind, Trail};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory.
    pub out: PathBuf,
    pub trail: TrailSection,
    pub perception: PerceptionSection,
    pub control: ControlSection,
    pub loss: LossConfig,
    pub episode: EpisodeSection,
    pub disturbance: DisturbanceSection,
    pub autonomy: AutonomySection,
    pub scale_demo: ScaleDemoSection,
    pub train: TrainSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            trail: TrailSection::default(),
            perception: PerceptionSection::default(),
            control: ControlSection::default(),
            loss: LossConfig::default(),
            episode: EpisodeSection::default(),
            disturbance: DisturbanceSection::default(),
            autonomy: AutonomySection::default(),
            scale_demo: ScaleDemoSection::default(),
            train: TrainSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrailSection {
    /// Built-in trail: `straight100`, `zigzag250` or `long1k`.
    pub scenario: String,
    /// Trail text file; takes precedence over `scenario`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl Default for TrailSection {
    fn default() -> Self {
        Self {
            scenario: "straight100".into(),
            file: None,
        }
    }
}

impl TrailSection {
    pub fn load(&self) -> Result<Trail> {
        match &self.file {
            Some(path) => Trail::from_text(&read_text(path)?),
            None => make_scenario_by_name(&self.scenario),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptionKind {
    Oracle6,
    VoOnly,
    Model,
}

impl PerceptionKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Oracle6 => "oracle6",
            Self::VoOnly => "vo_only",
            Self::Model => "model",
        }
    }
}

impl FromStr for PerceptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle6" => Ok(Self::Oracle6),
            "vo_only" => Ok(Self::VoOnly),
            "model" => Ok(Self::Model),
            other => Err(Error::Config(format!(
                "unknown perception variant `{other}` (expected oracle6, vo_only or model)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionSection {
    pub variant: PerceptionKind,
    pub vo_anchors_deg: [f64; 3],
    pub lo_anchors: [f64; 3],
    pub sigma_psi_deg: f64,
    pub sigma_d: f64,
    pub label_noise: f64,
    /// Model text file, required when `variant = "model"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_file: Option<PathBuf>,
}

impl Default for PerceptionSection {
    fn default() -> Self {
        Self {
            variant: PerceptionKind::Oracle6,
            vo_anchors_deg: [-30.0, 0.0, 30.0],
            lo_anchors: [-0.5, 0.0, 0.5],
            sigma_psi_deg: 15.0,
            sigma_d: 0.25,
            label_noise: 0.0,
            model_file: None,
        }
    }
}

impl PerceptionSection {
    pub fn oracle(&self) -> Result<OracleParams> {
        let p = OracleParams {
            vo_anchors: self.vo_anchors_deg.map(f64::to_radians),
            lo_anchors: self.lo_anchors,
            sigma_psi: self.sigma_psi_deg.to_radians(),
            sigma_d: self.sigma_d,
            label_noise: self.label_noise,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn dataset(&self) -> Result<DatasetConfig> {
        let oracle = self.oracle()?;
        Ok(DatasetConfig {
            vo_anchors: oracle.vo_anchors,
            lo_anchors: oracle.lo_anchors,
            ..Default::default()
        })
    }

    /// Builds the variant `kind` from this section's parameters.
    pub fn variant(&self, kind: PerceptionKind) -> Result<PerceptionVariant> {
        Ok(match kind {
            PerceptionKind::Oracle6 => PerceptionVariant::Oracle(self.oracle()?),
            PerceptionKind::VoOnly => PerceptionVariant::VoOnlyOracle(self.oracle()?),
            PerceptionKind::Model => {
                let path = self.model_file.as_ref().ok_or_else(|| {
                    Error::Config("perception.model_file is required for the model variant".into())
                })?;
                PerceptionVariant::Model {
                    model: Box::new(TwoHeadModel::from_text(&read_text(path)?)?),
                    dataset: self.dataset()?,
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlSection {
    pub beta1_deg: f64,
    pub beta2_deg: f64,
    pub lookahead: f64,
    pub altitude: f64,
    pub speed: f64,
    pub staleness_limit: f64,
    pub detection_area_threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection_classes: Option<Vec<String>>,
}

impl Default for ControlSection {
    fn default() -> Self {
        let c = ControlConfig::default();
        Self {
            beta1_deg: 10.0,
            beta2_deg: 10.0,
            lookahead: c.lookahead,
            altitude: c.altitude,
            speed: c.speed,
            staleness_limit: c.staleness_limit,
            detection_area_threshold: c.detection_area_threshold,
            detection_classes: c.detection_classes,
        }
    }
}

impl ControlSection {
    pub fn to_control(&self) -> Result<ControlConfig> {
        if !(self.beta1_deg >= 0.0) {
            return Err(Error::Config(format!("control.beta1_deg must be >= 0, got {}", self.beta1_deg)));
        }
        if !(self.beta2_deg >= 0.0) {
            return Err(Error::Config(format!("control.beta2_deg must be >= 0, got {}", self.beta2_deg)));
        }
        let c = ControlConfig {
            beta1: self.beta1_deg.to_radians(),
            beta2: self.beta2_deg.to_radians(),
            lookahead: self.lookahead,
            altitude: self.altitude,
            speed: self.speed,
            staleness_limit: self.staleness_limit,
            detection_area_threshold: self.detection_area_threshold,
            detection_classes: self.detection_classes.clone(),
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSection {
    pub dt: f64,
    pub control_period: f64,
    pub perception_period: f64,
    pub max_time: f64,
    pub initial_offset: f64,
    pub initial_heading_deg: f64,
    pub interventions_enabled: bool,
    pub intervention_penalty: f64,
    pub k_yaw: f64,
    pub settle_threshold: f64,
    /// Disturbances for the `run` subcommand.
    pub disturbances: Vec<Disturbance>,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        let e = EpisodeConfig::new(
            make_scenario(ScenarioKind::Straight100),
            PerceptionVariant::Oracle(OracleParams::default()),
        );
        Self {
            dt: e.dt,
            control_period: e.control_period,
            perception_period: e.perception_period,
            max_time: e.max_time,
            initial_offset: e.initial_offset,
            initial_heading_deg: e.initial_heading.to_degrees(),
            interventions_enabled: e.interventions_enabled,
            intervention_penalty: e.intervention_penalty,
            k_yaw: e.k_yaw,
            settle_threshold: e.settle_threshold,
            disturbances: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceSection {
    pub scenario: String,
    pub max_time: f64,
    pub disturbances: Vec<Disturbance>,
    /// Heading-head sharpness of the degraded three-category variant.
    pub degraded_sigma_psi_deg: f64,
    /// Heading-gain multiplier of the degraded three-category variant.
    pub degraded_beta1_scale: f64,
    /// Seconds after each disturbance within which the six-category variant must settle.
    pub recovery_limit: f64,
}

impl Default for DisturbanceSection {
    fn default() -> Self {
        Self {
            scenario: "straight100".into(),
            max_time: 40.0,
            disturbances: default_disturbance_schedule(),
            degraded_sigma_psi_deg: 5.0,
            degraded_beta1_scale: 0.5,
            recovery_limit: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutonomySection {
    pub scenario: String,
    pub variants: Vec<PerceptionKind>,
    /// Logit noise for every variant; replaces `perception.label_noise`.
    pub label_noise: f64,
    pub initial_offset: f64,
}

impl Default for AutonomySection {
    fn default() -> Self {
        Self {
            scenario: "zigzag250".into(),
            variants: vec![PerceptionKind::Oracle6, PerceptionKind::VoOnly],
            label_noise: 2.0,
            initial_offset: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleDemoSection {
    /// Relative error bound on the distance estimate.
    pub tolerance: f64,
    /// Accepted pairs after which the estimate must be within tolerance.
    pub settle_pairs: usize,
    /// The trailing estimates that must all be within tolerance.
    pub final_window: usize,
    /// Seeded repetitions, seeds `seed .. seed + trials`.
    pub trials: usize,
    pub min_passing: usize,
    pub stream: ScaleDemoConfig,
}

impl Default for ScaleDemoSection {
    fn default() -> Self {
        Self {
            tolerance: 0.05,
            settle_pairs: 20,
            final_window: 10,
            trials: 5,
            min_passing: 4,
            stream: ScaleDemoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub samples: usize,
    /// Held-out fraction.
    pub holdout: f64,
    pub hidden: usize,
    pub psi_range_deg: f64,
    pub d_range: f64,
    pub feature_noise: f64,
    pub opt: OptConfig,
    pub min_vo_accuracy: f64,
    pub min_lo_accuracy: f64,
    /// Largest accepted held-out accuracy loss against plain cross entropy.
    pub max_accuracy_drop: f64,
    pub export_datasets: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            samples: 3000,
            holdout: 0.2,
            hidden: crate::perception::HIDDEN_DIM,
            psi_range_deg: d.psi_range.to_degrees(),
            d_range: d.d_range,
            feature_noise: d.feature_noise,
            opt: OptConfig::default(),
            min_vo_accuracy: 0.85,
            min_lo_accuracy: 0.7,
            max_accuracy_drop: 0.05,
            export_datasets: false,
        }
    }
}

impl TrainSection {
    pub fn dataset(&self, perception: &PerceptionSection) -> Result<DatasetConfig> {
        if !(self.psi_range_deg > 0.0 && self.d_range > 0.0 && self.feature_noise >= 0.0) {
            return Err(Error::Config("train ranges must be positive and feature_noise >= 0".into()));
        }
        Ok(DatasetConfig {
            psi_range: self.psi_range_deg.to_radians(),
            d_range: self.d_range,
            feature_noise: self.feature_noise,
            ..perception.dataset()?
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub instances: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            instances: 1000,
            step: 1e-5,
            tolerance: 1e-5,
        }
    }
}

impl RunConfig {
    /// Checks every section that can be checked without touching the file system.
    pub fn validate(&self) -> Result<()> {
        self.control.to_control()?;
        self.perception.oracle()?;
        self.loss.validate()?;
        if self.trail.file.is_none() {
            make_scenario_by_name(&self.trail.scenario)?;
        }
        make_scenario_by_name(&self.disturbance.scenario)?;
        make_scenario_by_name(&self.autonomy.scenario)?;
        self.train.dataset(&self.perception)?;
        if !(self.train.holdout > 0.0 && self.train.holdout < 1.0) {
            return Err(Error::Config("train.holdout must lie in (0, 1)".into()));
        }
        if self.train.samples < 10 || self.train.hidden == 0 {
            return Err(Error::Config("train.samples must be >= 10 and train.hidden > 0".into()));
        }
        if !(self.gradcheck.step > 0.0) {
            return Err(Error::Config("gradcheck.step must be > 0".into()));
        }
        if self.scale_demo.min_passing > self.scale_demo.trials {
            return Err(Error::Config("scale_demo.min_passing exceeds scale_demo.trials".into()));
        }
        for d in self.episode.disturbances.iter().chain(&self.disturbance.disturbances) {
            Disturbance::new(d.start, d.duration, d.yaw_rate)?;
        }
        // trail and perception are validated separately
        let trail = make_scenario(ScenarioKind::Straight100);
        self.episode_config(trail, PerceptionVariant::Oracle(OracleParams::default()))?
            .validate()
    }

    /// Episode settings from `[episode]` and `[control]` around a trail and perception variant.
    pub fn episode_config(&self, trail: Trail, perception: PerceptionVariant) -> Result<EpisodeConfig> {
        let e = &self.episode;
        Ok(EpisodeConfig {
            control: self.control.to_control()?,
            disturbances: e.disturbances.clone(),
            dt: e.dt,
            control_period: e.control_period,
            perception_period: e.perception_period,
            max_time: e.max_time,
            seed: self.seed,
            initial_offset: e.initial_offset,
            initial_heading: e.initial_heading_deg.to_radians(),
            interventions_enabled: e.interventions_enabled,
            intervention_penalty: e.intervention_penalty,
            k_yaw: e.k_yaw,
            settle_threshold: e.settle_threshold,
            ..EpisodeConfig::new(trail, perception)
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses and validates a TOML document; missing keys take defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&read_text(path)?)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
