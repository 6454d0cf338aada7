//! Metric scale for monocular odometry.
//!
//! Odometry poses are paired with metric vehicle poses in a parallax-gated
//! circular buffer. A least-squares similarity fit over the buffered
//! positions maps odometry coordinates into the vehicle's ENU frame, which is
//! then used to lift sparse inverse-depth samples into metric obstacle points.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{Matrix3, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{rot_z, wrap_angle, Frame, Pose3, SimilarityTransform, Vec3};

/// Relative singular-value floor below which the fit is rejected as collinear.
pub const DEGENERACY_RATIO: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosePair {
    /// Odometry frame, arbitrary scale.
    pub x_dso: Pose3,
    /// ENU, metric.
    pub x_mav: Pose3,
    pub t: f64,
}

impl PosePair {
    pub fn is_finite(&self) -> bool {
        self.x_dso.is_finite() && self.x_mav.is_finite() && self.t.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBuffer {
    capacity: usize,
    parallax_threshold: f64,
    entries: VecDeque<PosePair>,
}

impl Default for PairBuffer {
    fn default() -> Self {
        Self::new(50, 0.3).expect("valid defaults")
    }
}

impl PairBuffer {
    pub fn new(capacity: usize, parallax_threshold: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::param("capacity", "must be positive"));
        }
        if !(parallax_threshold.is_finite() && parallax_threshold >= 0.0) {
            return Err(Error::param("parallax_threshold", "must be >= 0"));
        }
        Ok(Self {
            capacity,
            parallax_threshold,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn parallax_threshold(&self) -> f64 {
        self.parallax_threshold
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &PosePair> {
        self.entries.iter()
    }

    /// Accepts the pair when the buffer is empty or the vehicle has moved at
    /// least the parallax threshold since the last retained pair. Non-finite
    /// pairs and pairs older than the last retained one are rejected.
    pub fn push(&mut self, pair: PosePair) -> bool {
        if !pair.is_finite() {
            return false;
        }
        if let Some(last) = self.entries.back() {
            if pair.t < last.t {
                return false;
            }
            let moved = (pair.x_mav.position - last.x_mav.position).norm();
            if moved < self.parallax_threshold {
                return false;
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(pair);
        true
    }

    pub fn solve(&self) -> Result<SimilarityTransform> {
        let (src, dst): (Vec<Vec3>, Vec<Vec3>) = self
            .entries
            .iter()
            .map(|p| (p.x_dso.position, p.x_mav.position))
            .unzip();
        umeyama(&src, &dst)
    }
}

pub fn push_pair(buf: &mut PairBuffer, pair: PosePair) -> bool {
    buf.push(pair)
}

pub fn solve_similarity(buf: &PairBuffer) -> Result<SimilarityTransform> {
    buf.solve()
}

/// Least-squares similarity `dst ≈ s·R·src + t` over corresponded points.
///
/// Centers both sets, takes the SVD of the cross-covariance, flips the
/// weakest direction when needed so `det R = +1`, and reads the scale off
/// the ratio of the matched variance to the source variance.
pub fn umeyama(src: &[Vec3], dst: &[Vec3]) -> Result<SimilarityTransform> {
    assert_eq!(src.len(), dst.len(), "point sets must be corresponded");
    let n = src.len();
    if n < 3 {
        return Err(Error::InsufficientData { needed: 3, have: n });
    }
    let inv_n = 1.0 / n as f64;
    let mu_src = src.iter().fold(Vec3::zeros(), |acc, p| acc + p) * inv_n;
    let mu_dst = dst.iter().fold(Vec3::zeros(), |acc, p| acc + p) * inv_n;
    let mut cov = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let cs = s - mu_src;
        let cd = d - mu_dst;
        cov += cd * cs.transpose();
        var_src += cs.norm_squared();
    }
    cov *= inv_n;
    var_src *= inv_n;

    let svd = SVD::new(cov, true, true);
    let sv = svd.singular_values;
    // a planar point set leaves one zero singular value; a collinear one leaves two
    let ratio = if sv[0] > 0.0 { sv[1] / sv[0] } else { 0.0 };
    if !(ratio >= DEGENERACY_RATIO) || !(var_src > 0.0) {
        return Err(Error::DegenerateGeometry {
            ratio,
            threshold: DEGENERACY_RATIO,
        });
    }
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut signs = Vec3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        signs[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = sv.dot(&signs) / var_src;
    let translation = mu_dst - scale * (rotation * mu_src);
    SimilarityTransform::new(scale, rotation, translation)
}

/// Root-mean-square residual of `dst - T(src)`.
pub fn alignment_rmse(t: &SimilarityTransform, src: &[Vec3], dst: &[Vec3]) -> f64 {
    let sum: f64 = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (d - t.apply(s)).norm_squared())
        .sum();
    (sum / src.len().max(1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthSample {
    pub u: f64,
    pub v: f64,
    /// Reciprocal depth in odometry units.
    pub inv_depth: f64,
}

/// Sparse inverse-depth map from the odometry front end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseDepthImage {
    pub intrinsics: Intrinsics,
    pub samples: Vec<DepthSample>,
}

pub const DEPTH_CSV_INTRINSICS_HEADER: &str = "fx,fy,cx,cy,width,height";
pub const DEPTH_CSV_SAMPLES_HEADER: &str = "u,v,inv_depth";

impl InverseDepthImage {
    pub fn new(intrinsics: Intrinsics, samples: Vec<DepthSample>) -> Result<Self> {
        let k = &intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0 && k.cx.is_finite() && k.cy.is_finite()) {
            return Err(Error::param("intrinsics", "focal lengths must be positive"));
        }
        for (i, s) in samples.iter().enumerate() {
            if !(s.inv_depth > 0.0 && s.inv_depth.is_finite()) {
                return Err(Error::param("inv_depth", format!("sample {i} is not positive")));
            }
            if !(0.0..=k.width as f64).contains(&s.u) || !(0.0..=k.height as f64).contains(&s.v) {
                return Err(Error::param("sample", format!("sample {i} lies outside the image")));
            }
        }
        Ok(Self { intrinsics, samples })
    }

    pub fn to_csv(&self) -> String {
        let k = &self.intrinsics;
        let mut out = format!(
            "{DEPTH_CSV_INTRINSICS_HEADER}\n{},{},{},{},{},{}\n{DEPTH_CSV_SAMPLES_HEADER}\n",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height
        );
        for s in &self.samples {
            writeln!(out, "{},{},{}", s.u, s.v, s.inv_depth).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        expect_header(lines.next(), DEPTH_CSV_INTRINSICS_HEADER)?;
        let (n, row) = lines.next().ok_or_else(|| Error::parse(2, "missing intrinsics row"))?;
        let vals = parse_row(row, n, 6)?;
        let as_u32 = |v: f64| -> Result<u32> {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(Error::parse(n, "image size must be a non-negative integer"))
            }
        };
        let intrinsics = Intrinsics {
            fx: vals[0],
            fy: vals[1],
            cx: vals[2],
            cy: vals[3],
            width: as_u32(vals[4])?,
            height: as_u32(vals[5])?,
        };
        expect_header(lines.next(), DEPTH_CSV_SAMPLES_HEADER)?;
        let mut samples = Vec::new();
        for (n, row) in lines {
            let v = parse_row(row, n, 3)?;
            samples.push(DepthSample {
                u: v[0],
                v: v[1],
                inv_depth: v[2],
            });
        }
        Self::new(intrinsics, samples)
    }
}

fn expect_header(line: Option<(usize, &str)>, header: &str) -> Result<()> {
    match line {
        Some((_, l)) if l.replace(' ', "") == header => Ok(()),
        Some((n, l)) => Err(Error::parse(n, format!("expected header `{header}`, found `{l}`"))),
        None => Err(Error::parse(0, format!("missing header `{header}`"))),
    }
}

fn parse_row(row: &str, line: usize, expected: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = row
        .split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(line, format!("`{}`: {e}", f.trim())))
        })
        .collect::<Result<_>>()?;
    if vals.len() != expected {
        return Err(Error::parse(
            line,
            format!("expected {expected} fields, got {}", vals.len()),
        ));
    }
    Ok(vals)
}

/// Pinhole back-projection into the camera frame (x right, y down, z forward).
pub fn points_from_inverse_depth(img: &InverseDepthImage) -> Vec<Vec3> {
    let k = &img.intrinsics;
    img.samples
        .iter()
        .map(|s| {
            let z = 1.0 / s.inv_depth;
            Vec3::new((s.u - k.cx) * z / k.fx, (s.v - k.cy) * z / k.fy, z)
        })
        .collect()
}

/// Moves camera-frame points into the odometry frame given the camera's
/// odometry pose. The optical axis points along the pose yaw, image x to the
/// right and image y down.
pub fn camera_to_odometry(points: &[Vec3], camera: &Pose3) -> Vec<Vec3> {
    let r = rot_z(camera.yaw);
    points
        .iter()
        .map(|p| camera.position + r * Vec3::new(p.z, -p.x, -p.y))
        .collect()
}

/// Smallest planar distance from the vehicle to any odometry-frame point
/// that, once mapped into ENU by `t`, lies within `cone_half_angle` of the
/// vehicle's yaw.
pub fn nearest_obstacle_distance(
    points: &[Vec3],
    t: &SimilarityTransform,
    pose: &Pose3,
    cone_half_angle: f64,
) -> Option<f64> {
    points
        .iter()
        .filter_map(|p| {
            let rel = t.apply(p) - pose.position;
            let dist = rel.x.hypot(rel.y);
            let bearing = rel.y.atan2(rel.x);
            (wrap_angle(bearing - pose.yaw).abs() <= cone_half_angle).then_some(dist)
        })
        .reduce(f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleSample {
    pub t: f64,
    /// Estimated metric distance from the camera to the target.
    pub estimate: Option<f64>,
    pub truth: f64,
    pub buffered: usize,
}

/// Feeds `stream` through `buf` and, after every accepted pair, reports the
/// estimated metric distance from the camera to `target_dso` (an odometry-frame
/// point), or `None` while the alignment is unsolvable.
///
/// `truth` is returned alongside for convenience; callers that have no ground
/// truth may pass a closure returning `f64::NAN`.
pub fn running_scale_estimate(
    stream: &[PosePair],
    buf: &mut PairBuffer,
    target_dso: &Vec3,
    truth: impl Fn(&PosePair) -> f64,
) -> Vec<ScaleSample> {
    let mut out = Vec::new();
    for pair in stream {
        if !buf.push(*pair) {
            continue;
        }
        let estimate = buf
            .solve()
            .ok()
            .map(|t| (t.apply(target_dso) - t.apply(&pair.x_dso.position)).norm());
        out.push(ScaleSample {
            t: pair.t,
            estimate,
            truth: truth(pair),
            buffered: buf.len(),
        });
    }
    out
}

/// Synthetic odometry stream: a weaving planar flight whose odometry frame is
/// a scaled, rotated and shifted copy of ENU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleDemoConfig {
    /// Metric meters per odometry unit.
    pub true_scale: f64,
    /// Std-dev of Gaussian noise on the metric positions, meters.
    pub noise: f64,
    pub duration: f64,
    /// Odometry update period, seconds.
    pub period: f64,
    pub speed: f64,
    pub weave_amplitude: f64,
    pub weave_wavelength: f64,
    pub altitude: f64,
    /// Fixed ENU target the distance is measured to.
    pub target: [f64; 3],
    pub capacity: usize,
    pub parallax_threshold: f64,
}

impl Default for ScaleDemoConfig {
    fn default() -> Self {
        Self {
            true_scale: 2.0,
            noise: 0.02,
            duration: 20.0,
            period: 0.25,
            speed: 2.0,
            weave_amplitude: 2.0,
            weave_wavelength: 16.0,
            altitude: 2.0,
            target: [45.0, 4.0, 1.0],
            capacity: 50,
            parallax_threshold: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStream {
    pub pairs: Vec<PosePair>,
    /// Noise-free metric vehicle positions, aligned with `pairs`.
    pub true_positions: Vec<Vec3>,
    pub truth: SimilarityTransform,
    pub target_enu: Vec3,
    pub target_dso: Vec3,
}

pub fn synthetic_stream(cfg: &ScaleDemoConfig, seed: u64) -> Result<SyntheticStream> {
    if !(cfg.period > 0.0 && cfg.duration > 0.0) {
        return Err(Error::param("period", "period and duration must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yaw_offset: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let shift = Vec3::new(
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-1.0..1.0),
    );
    // maps odometry → ENU
    let truth = SimilarityTransform::new(cfg.true_scale, rot_z(yaw_offset), shift)?;
    let to_dso = truth.inverse();
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise");
    let k = std::f64::consts::TAU / cfg.weave_wavelength;
    let steps = (cfg.duration / cfg.period).round() as usize;
    let mut pairs = Vec::with_capacity(steps + 1);
    let mut true_positions = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = i as f64 * cfg.period;
        let x = cfg.speed * t;
        let y = cfg.weave_amplitude * (k * x).sin();
        let yaw = (cfg.weave_amplitude * k * (k * x).cos()).atan();
        let p = Vec3::new(x, y, cfg.altitude);
        let mut measured = p;
        if cfg.noise > 0.0 {
            for c in measured.iter_mut() {
                *c += noise.sample(&mut rng);
            }
        }
        pairs.push(PosePair {
            x_dso: Pose3::new(to_dso.apply(&p), yaw - yaw_offset, Frame::CameraLocal),
            x_mav: Pose3::new(measured, yaw, Frame::Enu),
            t,
        });
        true_positions.push(p);
    }
    let target_enu = Vec3::from(cfg.target);
    Ok(SyntheticStream {
        pairs,
        true_positions,
        truth,
        target_dso: to_dso.apply(&target_enu),
        target_enu,
    })
}

/// Runs the running estimate over a synthetic stream with ground truth filled in.
pub fn scale_demo(cfg: &ScaleDemoConfig, seed: u64) -> Result<Vec<ScaleSample>> {
    let stream = synthetic_stream(cfg, seed)?;
    let mut buf = PairBuffer::new(cfg.capacity, cfg.parallax_threshold)?;
    let truth_at = |pair: &PosePair| {
        let p = stream.truth.apply(&pair.x_dso.position);
        (stream.target_enu - p).norm()
    };
    Ok(running_scale_estimate(
        &stream.pairs,
        &mut buf,
        &stream.target_dso,
        truth_at,
    ))
}

pub const PAIR_TRACE_HEADER: &str = "t,dso_x,dso_y,dso_z,dso_yaw,mav_x,mav_y,mav_z,mav_yaw";

pub fn pairs_to_csv(pairs: &[PosePair]) -> String {
    let mut out = format!("{PAIR_TRACE_HEADER}\n");
    for p in pairs {
        let (d, m) = (&p.x_dso, &p.x_mav);
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            p.t, d.position.x, d.position.y, d.position.z, d.yaw, m.position.x, m.position.y, m.position.z, m.yaw
        )
        .unwrap();
    }
    out
}

pub fn pairs_from_csv(text: &str) -> Result<Vec<PosePair>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    expect_header(lines.next(), PAIR_TRACE_HEADER)?;
    lines
        .map(|(n, row)| {
            let v = parse_row(row, n, 9)?;
            Ok(PosePair {
                t: v[0],
                x_dso: Pose3::new(Vec3::new(v[1], v[2], v[3]), v[4], Frame::CameraLocal),
                x_mav: Pose3::new(Vec3::new(v[5], v[6], v[7]), v[8], Frame::Enu),
            })
        })
        .collect()
}
