//! Experiment drivers behind the command-line subcommands.
//!
//! Each driver turns a [`RunConfig`] into a set of named output files plus a
//! list of pass/fail checks. Drivers never read the clock, so identical
//! configs give byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{PerceptionKind, RunConfig, TrainSection};
use crate::error::{Error, Result};
use crate::loss::{finite_diff_check, smooth_labels, LossConfig, LossWeights};
use crate::perception::{
    evaluate, make_synthetic_dataset, train_stage, Category, DatasetConfig, DatasetKind, FreezeMask, Head, HeadMetrics,
    TrainingHistory, TwoHeadModel, FEATURE_DIM,
};
use crate::scale_align::{pairs_to_csv, scale_demo, synthetic_stream, ScaleSample};
use crate::sim::{aligned_offsets_csv, disturbance_experiment, run_episode, EpisodeLog, Variant};
use crate::trail::make_scenario_by_name;

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subcommand {
    Run,
    Disturbance,
    Autonomy,
    ScaleDemo,
    Train,
    Gradcheck,
}

impl Subcommand {
    pub const ALL: [Subcommand; 6] = [
        Self::Run,
        Self::Disturbance,
        Self::Autonomy,
        Self::ScaleDemo,
        Self::Train,
        Self::Gradcheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Run => "run",
            Self::Disturbance => "disturbance",
            Self::Autonomy => "autonomy",
            Self::ScaleDemo => "scale-demo",
            Self::Train => "train",
            Self::Gradcheck => "gradcheck",
        }
    }
}

impl FromStr for Subcommand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown subcommand `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Artifacts {
    /// File name (relative to the output directory) to contents.
    pub files: BTreeMap<String, Vec<u8>>,
    pub checks: Vec<Check>,
}

impl Artifacts {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn add(&mut self, name: impl Into<String>, contents: impl Into<Vec<u8>>) {
        self.files.insert(name.into(), contents.into());
    }

    fn add_summary(&mut self, name: &str, cmd: Subcommand, seed: u64, body: serde_json::Value) {
        let doc = json!({
            "schema_version": SUMMARY_SCHEMA_VERSION,
            "subcommand": cmd.name(),
            "seed": seed,
            "results": body,
            "checks": self.checks,
        });
        self.add(name, serde_json::to_string_pretty(&doc).expect("json") + "\n");
    }
}

/// Command-line overrides layered on top of the config document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scenario: Option<String>,
    pub perception: Option<PerceptionKind>,
    /// Label noise for simulation commands, position noise for `scale-demo`.
    pub noise: Option<f64>,
}

pub fn apply_overrides(cmd: Subcommand, cfg: &mut RunConfig, o: &Overrides) -> Result<()> {
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(s) = &o.scenario {
        make_scenario_by_name(s)?;
        match cmd {
            Subcommand::Disturbance => cfg.disturbance.scenario = s.clone(),
            Subcommand::Autonomy => cfg.autonomy.scenario = s.clone(),
            _ => {
                cfg.trail.scenario = s.clone();
                cfg.trail.file = None;
            }
        }
    }
    if let Some(kind) = o.perception {
        cfg.perception.variant = kind;
        if cmd == Subcommand::Autonomy {
            cfg.autonomy.variants = vec![kind];
        }
    }
    if let Some(noise) = o.noise {
        match cmd {
            Subcommand::ScaleDemo => cfg.scale_demo.stream.noise = noise,
            Subcommand::Autonomy => cfg.autonomy.label_noise = noise,
            _ => cfg.perception.label_noise = noise,
        }
    }
    cfg.validate()
}

pub fn run_experiment(cmd: Subcommand, cfg: &RunConfig) -> Result<Artifacts> {
    cfg.validate()?;
    match cmd {
        Subcommand::Run => run(cfg),
        Subcommand::Disturbance => disturbance(cfg),
        Subcommand::Autonomy => autonomy(cfg),
        Subcommand::ScaleDemo => scale(cfg),
        Subcommand::Train => train(cfg),
        Subcommand::Gradcheck => gradcheck(cfg),
    }
}

fn run(cfg: &RunConfig) -> Result<Artifacts> {
    let perception = cfg.perception.variant(cfg.perception.variant)?;
    let log = run_episode(&cfg.episode_config(cfg.trail.load()?, perception)?)?;
    let mut out = Artifacts::default();
    out.add("episode.csv", log.to_csv());
    out.add("episode_summary.json", log.summary_json());
    Ok(out)
}

fn worst_recovery(log: &EpisodeLog) -> f64 {
    log.summary
        .recovery_times
        .iter()
        .map(|r| r.unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max)
}

fn disturbance(cfg: &RunConfig) -> Result<Artifacts> {
    let sec = &cfg.disturbance;
    let oracle = cfg.perception.oracle()?;
    let control = cfg.control.to_control()?;
    let mut base = cfg.episode_config(make_scenario_by_name(&sec.scenario)?, cfg.perception.variant(PerceptionKind::Oracle6)?)?;
    base.disturbances = sec.disturbances.clone();
    base.max_time = sec.max_time;
    base.interventions_enabled = false;
    let degraded_oracle = crate::perception::OracleParams {
        sigma_psi: sec.degraded_sigma_psi_deg.to_radians(),
        ..oracle
    };
    degraded_oracle.validate()?;
    let variants = [
        Variant {
            name: "oracle6".into(),
            perception: crate::sim::PerceptionVariant::Oracle(oracle),
            control: control.clone(),
        },
        Variant {
            name: "vo_only".into(),
            perception: crate::sim::PerceptionVariant::VoOnlyOracle(oracle),
            control: control.clone(),
        },
        Variant {
            name: "vo_only_degraded".into(),
            perception: crate::sim::PerceptionVariant::VoOnlyOracle(degraded_oracle),
            control: crate::control::ControlConfig {
                beta1: control.beta1 * sec.degraded_beta1_scale,
                ..control.clone()
            },
        },
    ];
    let runs = disturbance_experiment(&base, &variants)?;
    let mut out = Artifacts::default();
    for (name, log) in &runs {
        out.add(format!("disturbance_{name}.csv"), log.to_csv());
    }
    out.add("disturbance_offsets.csv", aligned_offsets_csv(&runs));

    let six = &runs[0].1.summary;
    let three = &runs[1].1.summary;
    out.checks.push(Check::new(
        "max_offset_six_below_three",
        six.max_abs_offset < three.max_abs_offset,
        format!("{:.4} m vs {:.4} m", six.max_abs_offset, three.max_abs_offset),
    ));
    let (r6, r3) = (worst_recovery(&runs[0].1), worst_recovery(&runs[1].1));
    out.checks.push(Check::new(
        "settling_six_below_three",
        r6 < r3,
        format!("{r6:.3} s vs {r3:.3} s"),
    ));
    out.checks.push(Check::new(
        "six_recovers_within_limit",
        six.recovery_times.iter().all(|r| r.is_some_and(|t| t <= sec.recovery_limit)),
        format!("{:?} vs limit {} s", six.recovery_times, sec.recovery_limit),
    ));
    out.checks.push(Check::new(
        "residual_six_below_three",
        six.residual_offsets.iter().zip(&three.residual_offsets).all(|(a, b)| a < b),
        format!("{:?} vs {:?}", six.residual_offsets, three.residual_offsets),
    ));
    let body: BTreeMap<&str, _> = runs.iter().map(|(n, l)| (n.as_str(), &l.summary)).collect();
    out.add_summary("disturbance_summary.json", Subcommand::Disturbance, cfg.seed, json!(body));
    Ok(out)
}

fn autonomy(cfg: &RunConfig) -> Result<Artifacts> {
    let sec = &cfg.autonomy;
    let trail = make_scenario_by_name(&sec.scenario)?;
    let mut perception = cfg.perception.clone();
    perception.label_noise = sec.label_noise;
    let mut out = Artifacts::default();
    let mut body = BTreeMap::new();
    for &kind in &sec.variants {
        let mut ep = cfg.episode_config(trail.clone(), perception.variant(kind)?)?;
        ep.initial_offset = sec.initial_offset;
        let log = run_episode(&ep)?;
        let s = &log.summary;
        match kind {
            PerceptionKind::Oracle6 => out.checks.push(Check::new(
                "oracle6_full_autonomy",
                s.interventions == 0 && s.autonomy_percent == 100.0,
                format!("{} interventions, {:.2}%", s.interventions, s.autonomy_percent),
            )),
            PerceptionKind::VoOnly => out.checks.push(Check::new(
                "vo_only_needs_interventions",
                s.autonomy_percent < 100.0,
                format!("{} interventions, {:.2}%", s.interventions, s.autonomy_percent),
            )),
            PerceptionKind::Model => {}
        }
        out.add(format!("autonomy_{}.csv", kind.name()), log.to_csv());
        body.insert(kind.name(), log.summary);
    }
    out.add_summary("autonomy_summary.json", Subcommand::Autonomy, cfg.seed, json!(body));
    Ok(out)
}

fn scale_csv(samples: &[ScaleSample]) -> String {
    let mut s = String::from("pair,t,estimate,truth,rel_error,buffered\n");
    for (i, x) in samples.iter().enumerate() {
        match x.estimate {
            Some(e) => writeln!(s, "{},{},{},{},{},{}", i + 1, x.t, e, x.truth, (e - x.truth).abs() / x.truth, x.buffered),
            None => writeln!(s, "{},{},,{},,{}", i + 1, x.t, x.truth, x.buffered),
        }
        .unwrap();
    }
    s
}

fn within(x: &ScaleSample, tol: f64) -> bool {
    x.estimate.is_some_and(|e| (e - x.truth).abs() <= tol * x.truth)
}

fn scale(cfg: &RunConfig) -> Result<Artifacts> {
    let sec = &cfg.scale_demo;
    let mut out = Artifacts::default();
    let mut trials = Vec::new();
    for k in 0..sec.trials.max(1) as u64 {
        let seed = cfg.seed.wrapping_add(k);
        let samples = scale_demo(&sec.stream, seed)?;
        let settled = samples.get(sec.settle_pairs.saturating_sub(1)).is_some_and(|x| within(x, sec.tolerance));
        let tail_ok = samples.len() >= sec.final_window
            && samples[samples.len() - sec.final_window..].iter().all(|x| within(x, sec.tolerance));
        if k == 0 {
            out.add("scale_demo.csv", scale_csv(&samples));
            out.add("scale_pairs.csv", pairs_to_csv(&synthetic_stream(&sec.stream, seed)?.pairs));
            out.checks.push(Check::new(
                "final_estimates_within_tolerance",
                tail_ok,
                format!("last {} of {} estimates within {}", sec.final_window, samples.len(), sec.tolerance),
            ));
        }
        let last = samples.last().copied();
        trials.push(json!({
            "seed": seed,
            "accepted_pairs": samples.len(),
            "settled_after_pairs": settled,
            "final_estimate": last.and_then(|x| x.estimate),
            "final_truth": last.map(|x| x.truth),
        }));
    }
    if sec.trials > 0 {
        let passing = trials.iter().filter(|t| t["settled_after_pairs"] == true).count();
        out.checks.push(Check::new(
            "settles_in_most_trials",
            passing >= sec.min_passing,
            format!("{passing} of {} trials within {} after {} pairs", sec.trials, sec.tolerance, sec.settle_pairs),
        ));
    }
    out.add_summary(
        "scale_demo_summary.json",
        Subcommand::ScaleDemo,
        cfg.seed,
        json!({ "noise": sec.stream.noise, "true_scale": sec.stream.true_scale, "trials": trials }),
    );
    Ok(out)
}

/// Outcome of the two-stage transfer run.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub model: TwoHeadModel,
    /// Held-out view-orientation metrics after stage 1.
    pub stage1: HeadMetrics,
    /// Same, trained with plain cross entropy (no entropy reward, no smoothing).
    pub baseline: HeadMetrics,
    /// Held-out lateral-offset metrics after stage 2.
    pub stage2: HeadMetrics,
    /// View-orientation metrics re-measured after stage 2.
    pub vo_after_stage2: HeadMetrics,
    /// Trunk and view-orientation head unchanged by stage 2, bit for bit.
    pub frozen_unchanged: bool,
    pub stage1_history: TrainingHistory,
    pub baseline_history: TrainingHistory,
    pub stage2_history: TrainingHistory,
}

/// Stage 1 trains everything on the orientation task; stage 2 freezes the
/// trunk and orientation head and fits the offset head on the offset task.
pub fn train_transfer(sec: &TrainSection, data_cfg: &DatasetConfig, loss: &LossConfig, seed: u64) -> Result<TransferReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let orient = make_synthetic_dataset(DatasetKind::OrientationOnly, sec.samples, data_cfg, &mut rng)?;
    let offset = make_synthetic_dataset(DatasetKind::OffsetOnly, sec.samples, data_cfg, &mut rng)?;
    let (o_train, o_test) = orient.split(sec.holdout);
    let (d_train, d_test) = offset.split(sec.holdout);
    let mut init = TwoHeadModel::init(FEATURE_DIM, sec.hidden, &mut rng);
    init.freeze = FreezeMask::stage1();

    let (stage1, stage1_history) = train_stage(&init, &o_train, Head::ViewOrientation, loss, &sec.opt)?;
    let plain = LossConfig {
        lambda1: 0.0,
        epsilon: 0.0,
        ..*loss
    };
    let (baseline_model, baseline_history) = train_stage(&init, &o_train, Head::ViewOrientation, &plain, &sec.opt)?;

    let mut frozen = stage1.clone();
    frozen.freeze = FreezeMask::stage2();
    let (model, stage2_history) = train_stage(&frozen, &d_train, Head::LateralOffset, loss, &sec.opt)?;
    let frozen_unchanged = model.trunk_w == stage1.trunk_w
        && model.trunk_b == stage1.trunk_b
        && model.vo_w == stage1.vo_w
        && model.vo_b == stage1.vo_b;

    Ok(TransferReport {
        stage1: evaluate(&stage1, &o_test, Head::ViewOrientation)?,
        baseline: evaluate(&baseline_model, &o_test, Head::ViewOrientation)?,
        stage2: evaluate(&model, &d_test, Head::LateralOffset)?,
        vo_after_stage2: evaluate(&model, &o_test, Head::ViewOrientation)?,
        frozen_unchanged,
        model,
        stage1_history,
        baseline_history,
        stage2_history,
    })
}

fn history_csv(r: &TransferReport) -> String {
    let mut s = String::from("epoch,stage1_loss,baseline_loss,stage2_loss\n");
    let n = r
        .stage1_history
        .loss
        .len()
        .max(r.baseline_history.loss.len())
        .max(r.stage2_history.loss.len());
    let cell = |h: &TrainingHistory, i: usize| h.loss.get(i).map(|v| v.to_string()).unwrap_or_default();
    for i in 0..n {
        writeln!(
            s,
            "{},{},{},{}",
            i + 1,
            cell(&r.stage1_history, i),
            cell(&r.baseline_history, i),
            cell(&r.stage2_history, i)
        )
        .unwrap();
    }
    s
}

fn metrics_json(m: &HeadMetrics) -> serde_json::Value {
    json!({ "accuracy": m.accuracy, "mean_max_prob": m.mean_max_prob })
}

fn train(cfg: &RunConfig) -> Result<Artifacts> {
    let sec = &cfg.train;
    let data_cfg = sec.dataset(&cfg.perception)?;
    let r = train_transfer(sec, &data_cfg, &cfg.loss, cfg.seed)?;
    let mut out = Artifacts::default();
    out.add("model.txt", r.model.to_text());
    out.add("train_history.csv", history_csv(&r));
    if sec.export_datasets {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for kind in [DatasetKind::OrientationOnly, DatasetKind::OffsetOnly] {
            let d = make_synthetic_dataset(kind, sec.samples, &data_cfg, &mut rng)?;
            let name = match kind {
                DatasetKind::OrientationOnly => "dataset_orientation.csv",
                _ => "dataset_offset.csv",
            };
            out.add(name, d.to_csv());
        }
    }
    out.checks.push(Check::new(
        "stage1_accuracy",
        r.stage1.accuracy >= sec.min_vo_accuracy,
        format!("{:.4} >= {}", r.stage1.accuracy, sec.min_vo_accuracy),
    ));
    out.checks.push(Check::new(
        "less_confident_than_plain_cross_entropy",
        r.stage1.mean_max_prob < r.baseline.mean_max_prob,
        format!("{:.4} vs {:.4}", r.stage1.mean_max_prob, r.baseline.mean_max_prob),
    ));
    let drop = r.baseline.accuracy - r.stage1.accuracy;
    out.checks.push(Check::new(
        "accuracy_drop_small",
        drop < sec.max_accuracy_drop,
        format!("{drop:.4} < {}", sec.max_accuracy_drop),
    ));
    out.checks.push(Check::new(
        "frozen_blocks_unchanged",
        r.frozen_unchanged && r.vo_after_stage2 == r.stage1,
        format!("bit-identical: {}", r.frozen_unchanged),
    ));
    out.checks.push(Check::new(
        "stage2_accuracy",
        r.stage2.accuracy >= sec.min_lo_accuracy,
        format!("{:.4} >= {}", r.stage2.accuracy, sec.min_lo_accuracy),
    ));
    let body = json!({
        "stage1_vo": metrics_json(&r.stage1),
        "baseline_vo": metrics_json(&r.baseline),
        "stage2_lo": metrics_json(&r.stage2),
        "vo_after_stage2": metrics_json(&r.vo_after_stage2),
        "rejected_steps": [r.stage1_history.rejected_steps, r.baseline_history.rejected_steps, r.stage2_history.rejected_steps],
    });
    out.add_summary("train_summary.json", Subcommand::Train, cfg.seed, body);
    Ok(out)
}

/// Random loss instance: logits in `[-4, 4)`, smoothing in `[0, 0.5)`,
/// weights in `[0, 1)`.
pub fn random_loss_instance<R: Rng + ?Sized>(rng: &mut R) -> ([f64; 3], Category, f64, LossWeights) {
    let z = [
        rng.random_range(-4.0..4.0),
        rng.random_range(-4.0..4.0),
        rng.random_range(-4.0..4.0),
    ];
    let truth = Category::from_index(rng.random_range(0..3));
    let eps = rng.random_range(0.0..0.5);
    let w = LossWeights {
        lambda1: rng.random_range(0.0..1.0),
        lambda2: rng.random_range(0.0..1.0),
    };
    (z, truth, eps, w)
}

fn gradcheck(cfg: &RunConfig) -> Result<Artifacts> {
    let sec = &cfg.gradcheck;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut csv = String::from("instance,truth,epsilon,lambda1,lambda2,max_rel_error\n");
    let mut worst: f64 = 0.0;
    let mut sum = 0.0;
    for i in 0..sec.instances {
        let (z, truth, eps, w) = random_loss_instance(&mut rng);
        let err = finite_diff_check(&z, &smooth_labels(truth, eps), &w, sec.step);
        worst = worst.max(err);
        sum += err;
        writeln!(csv, "{i},{},{eps},{},{},{err}", truth.name(), w.lambda1, w.lambda2).unwrap();
    }
    let mut out = Artifacts::default();
    out.add("gradcheck.csv", csv);
    out.checks.push(Check::new(
        "max_relative_error",
        worst < sec.tolerance,
        format!("{worst:e} < {:e}", sec.tolerance),
    ));
    out.add_summary(
        "gradcheck_summary.json",
        Subcommand::Gradcheck,
        cfg.seed,
        json!({
            "instances": sec.instances,
            "step": sec.step,
            "max_rel_error": worst,
            "mean_rel_error": if sec.instances > 0 { sum / sec.instances as f64 } else { 0.0 },
        }),
    );
    Ok(out)
}
