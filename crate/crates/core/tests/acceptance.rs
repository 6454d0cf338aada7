//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion and then asserts it, runtime budget included.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{UnitQuaternion, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trailnav::config::{PerceptionKind, RunConfig};
use trailnav::control::{turn_angle, ControlConfig};
use trailnav::experiments::{run_experiment, train_transfer, Subcommand, TransferReport};
use trailnav::geo::{SimilarityTransform, Vec3};
use trailnav::loss::{finite_diff_check, loss_value, smooth_labels, LossWeights, SmoothedLabel};
use trailnav::perception::{oracle_predict, Category, OracleParams, SoftLabel3, TrailEstimate};
use trailnav::scale_align::{running_scale_estimate, synthetic_stream, umeyama, PairBuffer, ScaleDemoConfig};
use trailnav::sim::{
    default_disturbance_schedule, default_variants, disturbance_experiment, run_episode, EpisodeConfig, EpisodeLog,
    PerceptionVariant,
};
use trailnav::trail::{make_scenario, RelativeState, ScenarioKind};
use trailnav::Error;

fn report(id: u32, title: &str, passed: bool, detail: &str, elapsed: Duration, budget_s: f64) {
    let in_time = elapsed.as_secs_f64() < budget_s;
    let ok = passed && in_time;
    println!(
        "{} criterion {id} ({title}): {detail} [{:.2} s / {budget_s} s]",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    assert!(passed, "criterion {id} failed: {detail}");
    assert!(in_time, "criterion {id} over budget: {:.2} s", elapsed.as_secs_f64());
}

fn est(vo: [f64; 3], lo: [f64; 3]) -> TrailEstimate {
    TrailEstimate {
        vo: SoftLabel3::new(vo).unwrap(),
        lo: SoftLabel3::new(lo).unwrap(),
        timestamp: 0.0,
    }
}

fn random_simplex(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let w: [f64; 3] = std::array::from_fn(|_| rng.random_range(-5.0..5.0f64).exp());
    let s = w[0] + w[1] + w[2];
    [w[0] / s, w[1] / s, w[2] / s]
}

#[test]
fn criterion_01_steering_formula() {
    let t0 = Instant::now();
    let cfg = ControlConfig::default();
    let ten = 10f64.to_radians();
    let a0 = turn_angle(&est([0.2, 0.6, 0.2], [0.35, 0.3, 0.35]), &cfg);
    let a1 = turn_angle(&est([0.0, 0.0, 1.0], [0.0, 1.0, 0.0]), &cfg);
    let a2 = turn_angle(&est([1.0, 0.0, 0.0], [1.0, 0.0, 0.0]), &cfg);
    let examples = a0 == 0.0 && a1 == ten && a2 == -2.0 * ten;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let e = est(random_simplex(&mut rng), random_simplex(&mut rng));
        let c = ControlConfig {
            beta1: rng.random_range(0.0..0.5),
            beta2: rng.random_range(0.0..0.5),
            ..Default::default()
        };
        worst = worst.max((turn_angle(&e.mirrored(), &c) + turn_angle(&e, &c)).abs());
    }
    report(
        1,
        "steering formula",
        examples && worst <= 1e-12,
        &format!("examples {a0}, {:.6} deg, {:.6} deg; mirror residual {worst:e}", a1.to_degrees(), a2.to_degrees()),
        t0.elapsed(),
        1.0,
    );
}

/// Plain cross entropy written out independently of the crate.
fn cross_entropy(y: &[f64; 3], p: &[f64; 3]) -> f64 {
    -(0..3).map(|i| p[i] * y[i].ln()).sum::<f64>()
}

#[test]
fn criterion_02_loss_and_gradients() {
    let t0 = Instant::now();
    let third = 1.0 / 3.0;
    let uniform = SoftLabel3::new([third; 3]).unwrap();
    let w = LossWeights {
        lambda1: 0.1,
        lambda2: 0.3,
    };
    let worked = loss_value(&uniform, &smooth_labels(Category::Left, 0.0), &w).unwrap();
    let by_hand = 3f64.ln() - 0.1 * 3f64.ln() + 0.3 * third;
    let worked_ok = (worked - 1.0887511).abs() <= 1e-6 && (worked - by_hand).abs() <= 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let zero = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
    };
    let mut ce_gap: f64 = 0.0;
    for _ in 0..1000 {
        let y = random_simplex(&mut rng);
        let truth = Category::from_index(rng.random_range(0..3));
        let p = smooth_labels(truth, 0.0);
        let l = loss_value(&SoftLabel3::new(y).unwrap(), &p, &zero).unwrap();
        ce_gap = ce_gap.max((l - cross_entropy(&y, &p.probs)).abs());
        // soft targets too
        let q = SmoothedLabel::from_probs(random_simplex(&mut rng)).unwrap();
        let l = loss_value(&SoftLabel3::new(y).unwrap(), &q, &zero).unwrap();
        ce_gap = ce_gap.max((l - cross_entropy(&y, &q.probs)).abs());
    }

    let mut worst_fd: f64 = 0.0;
    for _ in 0..1000 {
        let z: [f64; 3] = std::array::from_fn(|_| rng.random_range(-4.0..4.0));
        let truth = Category::from_index(rng.random_range(0..3));
        let p = smooth_labels(truth, rng.random_range(0.0..0.5));
        let w = LossWeights {
            lambda1: rng.random_range(0.0..1.0),
            lambda2: rng.random_range(0.0..1.0),
        };
        worst_fd = worst_fd.max(finite_diff_check(&z, &p, &w, 1e-5));
    }
    report(
        2,
        "loss value and gradients",
        worked_ok && ce_gap <= 1e-12 && worst_fd < 1e-5,
        &format!("worked example {worked:.9}; CE reduction gap {ce_gap:e}; max FD rel err {worst_fd:e}"),
        t0.elapsed(),
        5.0,
    );
}

fn transfer_run() -> &'static TransferReport {
    static RUN: OnceLock<TransferReport> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = RunConfig::default();
        let data = cfg.train.dataset(&cfg.perception).unwrap();
        train_transfer(&cfg.train, &data, &cfg.loss, 0).unwrap()
    })
}

#[test]
fn criterion_03_entropy_reward_reduces_confidence() {
    let t0 = Instant::now();
    let cfg = RunConfig::default();
    assert_eq!((cfg.loss.lambda1, cfg.loss.epsilon), (0.1, 0.1));
    let r = transfer_run();
    let drop = r.baseline.accuracy - r.stage1.accuracy;
    report(
        3,
        "anti-overconfidence",
        r.stage1.mean_max_prob < r.baseline.mean_max_prob && drop < 0.05,
        &format!(
            "mean winning prob {:.4} vs {:.4} (plain CE); accuracy {:.4} vs {:.4}, drop {:.2} pp",
            r.stage1.mean_max_prob,
            r.baseline.mean_max_prob,
            r.stage1.accuracy,
            r.baseline.accuracy,
            100.0 * drop
        ),
        t0.elapsed(),
        60.0,
    );
}

#[test]
fn criterion_04_transfer_staging() {
    let t0 = Instant::now();
    let r = transfer_run();
    let vo_same = r.vo_after_stage2 == r.stage1;
    report(
        4,
        "transfer staging",
        r.frozen_unchanged && vo_same && r.stage2.accuracy >= 0.7,
        &format!(
            "trunk+vo bit-identical {}; vo accuracy unchanged {}; lo accuracy {:.4}",
            r.frozen_unchanged, vo_same, r.stage2.accuracy
        ),
        t0.elapsed(),
        60.0,
    );
}

#[test]
fn criterion_05_similarity_recovery() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut ds, mut dr, mut dt) = (0f64, 0f64, 0f64);
    for _ in 0..200 {
        let q = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let rot = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(q)).to_rotation_matrix().into_inner();
        let scale = rng.random_range(0.1..10.0);
        let shift = Vec3::from_fn(|_, _| rng.random_range(-10.0..10.0));
        // proper rotation check happens in the constructor
        SimilarityTransform::new(scale, rot, shift).unwrap();
        let n = rng.random_range(4..20);
        let src: Vec<Vec3> = (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(-5.0..5.0))).collect();
        let dst: Vec<Vec3> = src.iter().map(|p| scale * (rot * p) + shift).collect();
        let fit = umeyama(&src, &dst).unwrap();
        ds = ds.max((fit.scale() - scale).abs());
        dr = dr.max((fit.rotation() - rot).norm());
        dt = dt.max((fit.translation() - shift).norm());
    }
    let line: Vec<Vec3> = (0..5).map(|k| Vec3::new(1.0, -2.0, 0.5) * k as f64).collect();
    let degenerate = matches!(umeyama(&line, &line), Err(Error::DegenerateGeometry { .. }));
    report(
        5,
        "similarity recovery",
        ds < 1e-9 && dr < 1e-9 && dt < 1e-9 && degenerate,
        &format!("max errors scale {ds:e}, rotation {dr:e}, translation {dt:e}; collinear rejected {degenerate}"),
        t0.elapsed(),
        5.0,
    );
}

#[test]
fn criterion_06_running_scale_estimate() {
    let t0 = Instant::now();
    let cfg = ScaleDemoConfig {
        noise: 0.02,
        ..Default::default()
    };
    let mut passing = 0;
    let mut errors = Vec::new();
    for seed in 0..5 {
        let stream = synthetic_stream(&cfg, seed).unwrap();
        let mut buf = PairBuffer::new(cfg.capacity, cfg.parallax_threshold).unwrap();
        let samples = running_scale_estimate(&stream.pairs, &mut buf, &stream.target_dso, |_| f64::NAN);
        let s = samples[19];
        // ground truth from the noise-free path, independent of the estimator
        let k = stream.pairs.iter().position(|p| p.t == s.t).unwrap();
        let truth = (stream.target_enu - stream.true_positions[k]).norm();
        let rel = (s.estimate.unwrap() - truth).abs() / truth;
        errors.push(rel);
        if rel <= 0.05 {
            passing += 1;
        }
    }
    report(
        6,
        "running scale estimate",
        passing >= 4,
        &format!("{passing}/5 trials within 5% after 20 accepted pairs; relative errors {errors:.4?}"),
        t0.elapsed(),
        10.0,
    );
}

/// Seconds after `end` until `|d|` stays under `thr` for the rest of `[end, until)`.
fn settle(offsets: &[(f64, f64)], end: f64, until: f64, thr: f64) -> f64 {
    let window: Vec<_> = offsets.iter().filter(|(t, _)| *t >= end - 1e-9 && *t < until - 1e-9).collect();
    match window.iter().rposition(|(_, d)| d.abs() >= thr) {
        None => 0.0,
        Some(i) if i + 1 == window.len() => f64::INFINITY,
        Some(i) => window[i + 1].0 - end,
    }
}

#[test]
fn criterion_07_disturbance_recovery() {
    let t0 = Instant::now();
    let mut base = EpisodeConfig::new(
        make_scenario(ScenarioKind::Straight100),
        PerceptionVariant::Oracle(OracleParams::default()),
    );
    let schedule = default_disturbance_schedule();
    base.disturbances = schedule.clone();
    base.interventions_enabled = false;
    base.max_time = 40.0;
    let runs = disturbance_experiment(&base, &default_variants(&ControlConfig::default(), &OracleParams::default())).unwrap();
    let six: &EpisodeLog = &runs[0].1;
    let three: &EpisodeLog = &runs[1].1;
    let max_abs = |l: &EpisodeLog| l.offsets.iter().map(|(_, d)| d.abs()).fold(0.0, f64::max);
    let settling = |l: &EpisodeLog| -> Vec<f64> {
        schedule
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let until = schedule.get(i + 1).map_or(f64::INFINITY, |n| n.start);
                settle(&l.offsets, d.end(), until, 0.25)
            })
            .collect()
    };
    let (s6, s3) = (settling(six), settling(three));
    let worst6 = s6.iter().copied().fold(0.0, f64::max);
    let worst3 = s3.iter().copied().fold(0.0, f64::max);
    report(
        7,
        "disturbance recovery",
        max_abs(six) < max_abs(three) && worst6 < worst3 && s6.iter().all(|t| *t <= 6.0),
        &format!(
            "max |d| {:.3} vs {:.3} m; settling 6-class {s6:.3?} s, vo-only {s3:.3?} s",
            max_abs(six),
            max_abs(three)
        ),
        t0.elapsed(),
        30.0,
    );
}

#[test]
fn criterion_08_autonomy_ordering() {
    let t0 = Instant::now();
    let mut cfg = RunConfig {
        seed: 0,
        ..Default::default()
    };
    cfg.autonomy.variants = vec![PerceptionKind::Oracle6, PerceptionKind::VoOnly];
    assert_eq!(cfg.autonomy.scenario, "zigzag250");
    let art = run_experiment(Subcommand::Autonomy, &cfg).unwrap();
    let summary: serde_json::Value = serde_json::from_slice(&art.files["autonomy_summary.json"]).unwrap();
    let six = &summary["results"]["oracle6"];
    let three = &summary["results"]["vo_only"];
    let a6 = six["autonomy_percent"].as_f64().unwrap();
    let a3 = three["autonomy_percent"].as_f64().unwrap();
    report(
        8,
        "autonomy ordering",
        six["interventions"] == 0 && a6 == 100.0 && a3 < 100.0,
        &format!(
            "6-class {a6:.2}% ({} interventions), vo-only {a3:.2}% ({} interventions)",
            six["interventions"], three["interventions"]
        ),
        t0.elapsed(),
        30.0,
    );
}

#[test]
fn criterion_09_three_class_ambiguity() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut e = oracle_predict(
        &RelativeState {
            d: 0.6,
            psi: 0.0,
            s: 0.0,
        },
        &OracleParams::default(),
        0.0,
        &mut rng,
    );
    e.lo = SoftLabel3::uniform();
    let direct = turn_angle(&e, &ControlConfig::default());

    let mut cfg = EpisodeConfig::new(
        make_scenario(ScenarioKind::Straight100),
        PerceptionVariant::VoOnlyOracle(OracleParams::default()),
    );
    cfg.initial_offset = 0.6;
    let log = run_episode(&cfg).unwrap();
    let max_alpha = log.ticks.iter().map(|r| r.alpha.unwrap().abs()).fold(0.0, f64::max);
    let min_d = log.offsets.iter().map(|(_, d)| *d).fold(f64::INFINITY, f64::min);
    report(
        9,
        "three-class ambiguity",
        direct.abs() <= 1e-9 && max_alpha <= 1e-9 && min_d >= 0.5,
        &format!("alpha at (0.6 m, 0) = {direct:e}; max |alpha| over episode {max_alpha:e}; min d {min_d:.6} m"),
        t0.elapsed(),
        10.0,
    );
}

#[test]
fn criterion_10_determinism() {
    let t0 = Instant::now();
    let cfg = RunConfig {
        seed: 17,
        ..Default::default()
    };
    let mut differing = Vec::new();
    let mut files = 0;
    for cmd in Subcommand::ALL {
        let a = run_experiment(cmd, &cfg).unwrap();
        let b = run_experiment(cmd, &cfg).unwrap();
        files += a.files.len();
        if a.files != b.files {
            differing.push(cmd.name());
        }
    }
    report(
        10,
        "determinism",
        differing.is_empty(),
        &format!("{files} files across {} subcommands; differing: {differing:?}", Subcommand::ALL.len()),
        t0.elapsed(),
        60.0,
    );
}
