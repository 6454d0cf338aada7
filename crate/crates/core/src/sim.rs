//! Deterministic closed-loop simulation of the perception-control loop.
//!
//! The vehicle is a kinematic unicycle at fixed speed and altitude. The
//! simulator steps at `dt`, samples perception every `perception_period` and
//! runs the controller every `control_period`; both periods must be integer
//! multiples of `dt`. Everything is driven by one seeded ChaCha stream, so an
//! episode is a pure function of its config.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::control::{arbitrate, command_csv_row, turn_angle, Command, CommandSource, ControlConfig, COMMAND_CSV_HEADER};
use crate::error::{Error, Result};
use crate::geo::{ned_to_enu, wrap_angle, Pose3, Vec3};
use crate::perception::{
    model_predict, oracle_predict, DatasetConfig, Embedding, OracleParams, SoftLabel3, TrailEstimate, TwoHeadModel,
};
use crate::trail::{is_off_trail, relative_state, RelativeState, Trail};

pub const LOG_SCHEMA_VERSION: u32 = 1;
/// Yaw-rate limit of the vehicle, rad/s.
pub const DEFAULT_K_YAW: f64 = 1.5;
const PERIOD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// ENU.
    pub pose: Pose3,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    pub start: f64,
    pub duration: f64,
    /// Forced yaw rate, rad/s, counterclockwise positive.
    pub yaw_rate: f64,
}

impl Disturbance {
    pub fn new(start: f64, duration: f64, yaw_rate: f64) -> Result<Self> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::param("duration", "must be > 0"));
        }
        if !start.is_finite() || !yaw_rate.is_finite() {
            return Err(Error::param("disturbance", "start and yaw_rate must be finite"));
        }
        Ok(Self {
            start,
            duration,
            yaw_rate,
        })
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    /// Half-open `[start, end)`, with a small tolerance so that a window
    /// aligned to the step grid covers exactly `duration / dt` steps.
    pub fn is_active(&self, t: f64) -> bool {
        t >= self.start - PERIOD_TOL && t < self.end() - PERIOD_TOL
    }
}

/// Kinematic step.
///
/// With a disturbance active the commanded steering is ignored and the yaw
/// is driven at the disturbance rate. Otherwise the yaw turns toward the
/// commanded setpoint by at most `k_yaw * dt`. Either way the vehicle then
/// advances `speed * dt` along its new yaw. Hover freezes the vehicle unless
/// a disturbance is active.
pub fn step(state: &VehicleState, cmd: &Command, disturbance: Option<&Disturbance>, dt: f64, k_yaw: f64) -> VehicleState {
    let mut pose = state.pose;
    if let Some(dist) = disturbance {
        pose.yaw = wrap_angle(pose.yaw + dist.yaw_rate * dt);
    } else {
        let Some((target_ned, _)) = cmd.setpoint_ned() else {
            return *state;
        };
        let target = ned_to_enu(&target_ned);
        let (dx, dy) = (target.x - pose.position.x, target.y - pose.position.y);
        if dx.hypot(dy) > 1e-9 {
            let err = wrap_angle(dy.atan2(dx) - pose.yaw);
            let max_turn = k_yaw * dt;
            pose.yaw = wrap_angle(pose.yaw + err.clamp(-max_turn, max_turn));
        }
        pose.position.z = target.z;
    }
    let (s, c) = pose.yaw.sin_cos();
    pose.position.x += state.speed * dt * c;
    pose.position.y += state.speed * dt * s;
    VehicleState { pose, speed: state.speed }
}

/// Operator reset: back onto the closest centerline point, aligned with the trail.
pub fn intervention(state: &VehicleState, trail: &Trail) -> VehicleState {
    let p = state.pose.position;
    let proj = trail.project(&crate::trail::Point2::new(p.x, p.y));
    let mut pose = state.pose;
    pose.position = Vec3::new(proj.closest.x, proj.closest.y, p.z);
    pose.yaw = proj.heading;
    VehicleState { pose, speed: state.speed }
}

/// Autonomy in percent: share of `duration` not charged to interventions.
pub fn autonomy_percent(duration: f64, interventions: usize, penalty: f64) -> f64 {
    if duration <= 0.0 {
        return 100.0;
    }
    (100.0 * (duration - interventions as f64 * penalty) / duration).clamp(0.0, 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub enum PerceptionVariant {
    /// Six-category oracle: both heads informative.
    Oracle(OracleParams),
    /// Three-category oracle: the offset head is forced uniform.
    VoOnlyOracle(OracleParams),
    /// Trained classifier fed with embedded ground-truth state.
    Model {
        model: Box<TwoHeadModel>,
        dataset: DatasetConfig,
    },
}

impl PerceptionVariant {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Oracle(_) => "oracle6",
            Self::VoOnlyOracle(_) => "vo_only",
            Self::Model { .. } => "model",
        }
    }
}

struct Perceiver<'a> {
    variant: &'a PerceptionVariant,
    embedding: Option<Embedding>,
    rng: ChaCha8Rng,
}

impl<'a> Perceiver<'a> {
    fn new(variant: &'a PerceptionVariant, seed: u64) -> Self {
        let embedding = matches!(variant, PerceptionVariant::Model { .. }).then(Embedding::fixed);
        Self {
            variant,
            embedding,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn perceive(&mut self, rel: &RelativeState, t: f64) -> Result<TrailEstimate> {
        match self.variant {
            PerceptionVariant::Oracle(p) => Ok(oracle_predict(rel, p, t, &mut self.rng)),
            PerceptionVariant::VoOnlyOracle(p) => {
                let mut est = oracle_predict(rel, p, t, &mut self.rng);
                est.lo = SoftLabel3::uniform();
                Ok(est)
            }
            PerceptionVariant::Model { model, dataset } => {
                let emb = self.embedding.as_ref().expect("built for model variant");
                let mut x = emb.embed(rel.d, rel.psi, dataset);
                if dataset.feature_noise > 0.0 {
                    let n = Normal::new(0.0, dataset.feature_noise).expect("finite noise");
                    for v in x.iter_mut() {
                        *v += n.sample(&mut self.rng);
                    }
                }
                model_predict(model, x.as_slice(), t)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub trail: Trail,
    pub perception: PerceptionVariant,
    pub control: ControlConfig,
    pub disturbances: Vec<Disturbance>,
    pub dt: f64,
    pub control_period: f64,
    pub perception_period: f64,
    pub max_time: f64,
    pub seed: u64,
    /// Starting lateral offset, meters, `+` = left.
    pub initial_offset: f64,
    /// Starting heading error, radians, `+` = facing left.
    pub initial_heading: f64,
    pub interventions_enabled: bool,
    /// Non-autonomous time charged per intervention, seconds.
    pub intervention_penalty: f64,
    pub k_yaw: f64,
    /// `|d|` below which the vehicle counts as recovered after a disturbance.
    pub settle_threshold: f64,
}

impl EpisodeConfig {
    pub fn new(trail: Trail, perception: PerceptionVariant) -> Self {
        Self {
            trail,
            perception,
            control: ControlConfig::default(),
            disturbances: Vec::new(),
            dt: 1.0 / 60.0,
            control_period: 1.0 / 20.0,
            perception_period: 1.0 / 30.0,
            max_time: 600.0,
            seed: 0,
            initial_offset: 0.0,
            initial_heading: 0.0,
            interventions_enabled: true,
            intervention_penalty: 2.0,
            k_yaw: DEFAULT_K_YAW,
            settle_threshold: 0.25,
        }
    }

    fn steps_per(&self, period: f64, name: &'static str) -> Result<usize> {
        let ratio = period / self.dt;
        let n = ratio.round();
        if !(n >= 1.0 && (ratio - n).abs() <= PERIOD_TOL * n.max(1.0)) {
            return Err(Error::param(name, format!("{period} is not a multiple of dt = {}", self.dt)));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param("dt", "must be > 0"));
        }
        self.steps_per(self.control_period, "control_period")?;
        self.steps_per(self.perception_period, "perception_period")?;
        if !(self.max_time > 0.0 && self.max_time.is_finite()) {
            return Err(Error::param("max_time", "must be > 0"));
        }
        if !(self.k_yaw > 0.0 && self.k_yaw.is_finite()) {
            return Err(Error::param("k_yaw", "must be > 0"));
        }
        if !(self.intervention_penalty >= 0.0 && self.intervention_penalty.is_finite()) {
            return Err(Error::param("intervention_penalty", "must be >= 0"));
        }
        if !(self.settle_threshold > 0.0) {
            return Err(Error::param("settle_threshold", "must be > 0"));
        }
        if !self.initial_offset.is_finite() || !self.initial_heading.is_finite() {
            return Err(Error::param("initial_state", "must be finite"));
        }
        self.control.validate()?;
        match &self.perception {
            PerceptionVariant::Oracle(p) | PerceptionVariant::VoOnlyOracle(p) => p.validate()?,
            PerceptionVariant::Model { model, .. } => {
                if model.input_dim() != crate::perception::FEATURE_DIM {
                    return Err(Error::DimensionMismatch {
                        expected: crate::perception::FEATURE_DIM,
                        found: model.input_dim(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn initial_state(&self) -> VehicleState {
        let (p, heading) = self.trail.point_at(0.0);
        let normal = crate::trail::Point2::new(-heading.sin(), heading.cos());
        let xy = p + self.initial_offset * normal;
        VehicleState {
            pose: Pose3::enu(xy.x, xy.y, self.control.altitude, wrap_angle(heading + self.initial_heading)),
            speed: self.control.speed,
        }
    }
}

/// One row per control tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickRecord {
    pub t: f64,
    pub pose: Pose3,
    pub rel: RelativeState,
    pub estimate: Option<TrailEstimate>,
    /// Turn angle behind a trail-network waypoint.
    pub alpha: Option<f64>,
    pub command: Command,
    /// An intervention happened since the previous row.
    pub intervention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub schema_version: u32,
    pub perception: String,
    pub seed: u64,
    pub duration: f64,
    pub reached_trail_end: bool,
    pub interventions: usize,
    pub intervention_times: Vec<f64>,
    pub autonomy_percent: f64,
    pub max_abs_offset: f64,
    pub final_abs_offset: f64,
    /// Per disturbance: seconds from its end until `|d|` stays below the
    /// settle threshold up to the next disturbance (or episode end); `None`
    /// if it never does.
    pub recovery_times: Vec<Option<f64>>,
    /// Per disturbance: mean `|d|` over the last second before the next
    /// disturbance (or episode end).
    pub residual_offsets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub ticks: Vec<TickRecord>,
    /// `(t, d)` at every simulation step.
    pub offsets: Vec<(f64, f64)>,
    pub summary: EpisodeSummary,
}

pub const TICK_CSV_HEADER: &str = "t,x,y,z,yaw,s,d,psi,vo_left,vo_center,vo_right,lo_left,lo_center,lo_right,estimate_t,alpha";

impl EpisodeLog {
    /// Control-tick log. Columns after `alpha` follow the command log schema,
    /// then a trailing `intervention` flag (0/1).
    pub fn to_csv(&self) -> String {
        let cmd_cols = COMMAND_CSV_HEADER.split_once(',').map(|(_, rest)| rest).unwrap_or("");
        let mut out = format!("{TICK_CSV_HEADER},{cmd_cols},intervention\n");
        for r in &self.ticks {
            let p = &r.pose;
            write!(
                out,
                "{},{},{},{},{},{},{},{},",
                r.t, p.position.x, p.position.y, p.position.z, p.yaw, r.rel.s, r.rel.d, r.rel.psi
            )
            .unwrap();
            match &r.estimate {
                Some(e) => {
                    let (v, l) = (e.vo.probs(), e.lo.probs());
                    write!(out, "{},{},{},{},{},{},{},", v[0], v[1], v[2], l[0], l[1], l[2], e.timestamp).unwrap()
                }
                None => out.push_str(",,,,,,,"),
            }
            if let Some(a) = r.alpha {
                write!(out, "{a}").unwrap();
            }
            let cmd = command_csv_row(r.t, &r.command);
            let cmd_fields = cmd.split_once(',').map(|(_, rest)| rest).unwrap_or("");
            writeln!(out, ",{cmd_fields},{}", u8::from(r.intervention)).unwrap();
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes") + "\n"
    }
}

pub fn run_episode(cfg: &EpisodeConfig) -> Result<EpisodeLog> {
    cfg.validate()?;
    let n_ctrl = cfg.steps_per(cfg.control_period, "control_period")?;
    let n_perc = cfg.steps_per(cfg.perception_period, "perception_period")?;
    let max_steps = (cfg.max_time / cfg.dt).round() as usize;
    let end_s = cfg.trail.length() - 1e-6;

    let mut perceiver = Perceiver::new(&cfg.perception, cfg.seed);
    let mut state = cfg.initial_state();
    let mut estimate: Option<TrailEstimate> = None;
    let mut command = Command::hover(CommandSource::Dnn);
    let mut pending_intervention = false;
    let mut ticks = Vec::new();
    let mut offsets = Vec::with_capacity(max_steps.min(1 << 20) + 1);
    let mut intervention_times = Vec::new();
    let mut reached_end = false;
    let mut t = 0.0;

    for k in 0..=max_steps {
        t = k as f64 * cfg.dt;
        let rel = relative_state(&cfg.trail, &state.pose)?;
        offsets.push((t, rel.d));
        if rel.s >= end_s {
            reached_end = true;
            break;
        }
        if k == max_steps {
            break;
        }
        if k % n_perc == 0 {
            estimate = Some(perceiver.perceive(&rel, t)?);
        }
        if k % n_ctrl == 0 {
            command = arbitrate(None, &[], estimate.as_ref(), t, &state.pose, &cfg.control)?;
            let alpha = match (command.source, command.is_hover(), &estimate) {
                (CommandSource::Dnn, false, Some(e)) => Some(turn_angle(e, &cfg.control)),
                _ => None,
            };
            ticks.push(TickRecord {
                t,
                pose: state.pose,
                rel,
                estimate,
                alpha,
                command,
                intervention: std::mem::take(&mut pending_intervention),
            });
        }
        let active = cfg.disturbances.iter().find(|d| d.is_active(t));
        state = step(&state, &command, active, cfg.dt, cfg.k_yaw);
        if cfg.interventions_enabled && is_off_trail(&cfg.trail, &state.pose)? {
            state = intervention(&state, &cfg.trail);
            pending_intervention = true;
            intervention_times.push((k + 1) as f64 * cfg.dt);
        }
    }

    let summary = summarize(cfg, t, reached_end, intervention_times, &offsets);
    Ok(EpisodeLog {
        ticks,
        offsets,
        summary,
    })
}

fn summarize(
    cfg: &EpisodeConfig,
    duration: f64,
    reached_trail_end: bool,
    intervention_times: Vec<f64>,
    offsets: &[(f64, f64)],
) -> EpisodeSummary {
    let max_abs_offset = offsets.iter().map(|(_, d)| d.abs()).fold(0.0, f64::max);
    let final_abs_offset = offsets.last().map_or(0.0, |(_, d)| d.abs());
    let mut sorted = cfg.disturbances.clone();
    sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
    let mut recovery_times = Vec::with_capacity(sorted.len());
    let mut residual_offsets = Vec::with_capacity(sorted.len());
    for (i, dist) in sorted.iter().enumerate() {
        let window_end = sorted.get(i + 1).map_or(f64::INFINITY, |n| n.start);
        let window: Vec<(f64, f64)> = offsets
            .iter()
            .copied()
            .filter(|(t, _)| *t >= dist.end() - PERIOD_TOL && *t < window_end - PERIOD_TOL)
            .collect();
        recovery_times.push(settling_time(&window, dist.end(), cfg.settle_threshold));
        let last_t = window.last().map_or(dist.end(), |(t, _)| *t);
        let tail: Vec<f64> = window
            .iter()
            .filter(|(t, _)| *t > last_t - 1.0)
            .map(|(_, d)| d.abs())
            .collect();
        residual_offsets.push(if tail.is_empty() {
            0.0
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        });
    }
    EpisodeSummary {
        schema_version: LOG_SCHEMA_VERSION,
        perception: cfg.perception.name().to_string(),
        seed: cfg.seed,
        duration,
        reached_trail_end,
        interventions: intervention_times.len(),
        autonomy_percent: autonomy_percent(duration, intervention_times.len(), cfg.intervention_penalty),
        intervention_times,
        max_abs_offset,
        final_abs_offset,
        recovery_times,
        residual_offsets,
    }
}

/// Time after `from` at which `|d|` drops below `threshold` for good within
/// `window`; `None` if the last sample is still above it.
pub fn settling_time(window: &[(f64, f64)], from: f64, threshold: f64) -> Option<f64> {
    match window.iter().rposition(|(_, d)| d.abs() >= threshold) {
        None => Some(0.0),
        Some(i) if i + 1 == window.len() => None,
        Some(i) => Some(window[i + 1].0 - from),
    }
}

/// One closed-loop configuration in a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub perception: PerceptionVariant,
    pub control: ControlConfig,
}

/// Three alternating 2 s yaw kicks on a straight trail. Magnitudes differ so
/// the kicks do not cancel each other's residual offset.
pub fn default_disturbance_schedule() -> Vec<Disturbance> {
    [(5.0, 0.5), (15.0, -0.3), (25.0, 0.5)]
        .into_iter()
        .map(|(start, rate)| Disturbance::new(start, 2.0, rate).expect("valid schedule"))
        .collect()
}

/// The comparison set: six-category oracle, three-category oracle, and an
/// overconfident three-category oracle with a weakened heading gain.
pub fn default_variants(control: &ControlConfig, oracle: &OracleParams) -> Vec<Variant> {
    let degraded = OracleParams {
        sigma_psi: 5f64.to_radians(),
        ..*oracle
    };
    vec![
        Variant {
            name: "oracle6".into(),
            perception: PerceptionVariant::Oracle(*oracle),
            control: control.clone(),
        },
        Variant {
            name: "vo_only".into(),
            perception: PerceptionVariant::VoOnlyOracle(*oracle),
            control: control.clone(),
        },
        Variant {
            name: "vo_only_degraded".into(),
            perception: PerceptionVariant::VoOnlyOracle(degraded),
            control: ControlConfig {
                beta1: control.beta1 * 0.5,
                ..control.clone()
            },
        },
    ]
}

/// Runs every variant through the same trail, schedule and seed.
pub fn disturbance_experiment(base: &EpisodeConfig, variants: &[Variant]) -> Result<Vec<(String, EpisodeLog)>> {
    variants
        .iter()
        .map(|v| {
            let cfg = EpisodeConfig {
                perception: v.perception.clone(),
                control: v.control.clone(),
                ..base.clone()
            };
            Ok((v.name.clone(), run_episode(&cfg)?))
        })
        .collect()
}

/// Aligned `t` plus one `d` column per variant, sampled at control ticks.
pub fn aligned_offsets_csv(runs: &[(String, EpisodeLog)]) -> String {
    let mut out = String::from("t");
    for (name, _) in runs {
        write!(out, ",d_{name}").unwrap();
    }
    out.push('\n');
    let rows = runs.iter().map(|(_, l)| l.ticks.len()).min().unwrap_or(0);
    for i in 0..rows {
        write!(out, "{}", runs[0].1.ticks[i].t).unwrap();
        for (_, log) in runs {
            write!(out, ",{}", log.ticks[i].rel.d).unwrap();
        }
        out.push('\n');
    }
    out
}
