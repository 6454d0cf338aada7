//! Six-category soft trail perception: two 3-way heads, one for view
//! orientation and one for lateral offset.
//!
//! Two producers are provided. [`oracle_predict`] scores the true relative
//! state against fixed anchors (a desk-scale stand-in for an image network),
//! and [`TwoHeadModel`] is a small trainable classifier over synthetic
//! features, trained in two stages with a frozen trunk.
//!
//! Category binding: `Left` means the camera view is rotated / shifted to
//! the left of the trail, i.e. `psi > 0` or `d > 0`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{loss_grad_logits, loss_value, smooth_labels, LossConfig, LossWeights};
use crate::trail::RelativeState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Left,
    Center,
    Right,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Left, Category::Center, Category::Right];

    pub fn index(self) -> usize {
        match self {
            Category::Left => 0,
            Category::Center => 1,
            Category::Right => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Left => "left",
            Category::Center => "center",
            Category::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    ViewOrientation,
    LateralOffset,
}

/// Numerically stable softmax over three logits.
pub fn softmax3(z: &[f64; 3]) -> [f64; 3] {
    let m = z[0].max(z[1]).max(z[2]);
    let e = z.map(|v| (v - m).exp());
    // summing the outer pair first keeps left/right mirroring bit-exact
    let s = (e[0] + e[2]) + e[1];
    e.map(|v| v / s)
}

/// Distribution over (left, center, right).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel3([f64; 3]);

impl SoftLabel3 {
    pub fn new(probs: [f64; 3]) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::param(
                "soft label",
                format!("{probs:?} is not on the probability simplex"),
            ));
        }
        Ok(Self(probs))
    }

    pub(crate) fn from_probs_unchecked(probs: [f64; 3]) -> Self {
        Self(probs)
    }

    pub fn from_logits(z: &[f64; 3]) -> Self {
        Self(softmax3(z))
    }

    pub fn uniform() -> Self {
        Self([1.0 / 3.0; 3])
    }

    pub fn probs(&self) -> [f64; 3] {
        self.0
    }

    pub fn p_left(&self) -> f64 {
        self.0[0]
    }

    pub fn p_center(&self) -> f64 {
        self.0[1]
    }

    pub fn p_right(&self) -> f64 {
        self.0[2]
    }

    /// Swaps the left and right probabilities.
    pub fn mirrored(&self) -> Self {
        Self([self.0[2], self.0[1], self.0[0]])
    }

    pub fn argmax(&self) -> Category {
        let mut best = 0;
        for i in 1..3 {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        Category::from_index(best)
    }

    pub fn max_prob(&self) -> f64 {
        self.0[0].max(self.0[1]).max(self.0[2])
    }
}

/// The perception-to-control message.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrailEstimate {
    pub vo: SoftLabel3,
    pub lo: SoftLabel3,
    /// Capture time, seconds.
    pub timestamp: f64,
}

impl TrailEstimate {
    pub fn mirrored(&self) -> Self {
        Self {
            vo: self.vo.mirrored(),
            lo: self.lo.mirrored(),
            timestamp: self.timestamp,
        }
    }
}

/// Anchors are listed in increasing order: `[right, center, left]`
/// (negative heading error / offset is a right-of-trail view).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    /// Radians.
    pub vo_anchors: [f64; 3],
    /// Meters.
    pub lo_anchors: [f64; 3],
    /// Radians.
    pub sigma_psi: f64,
    /// Meters.
    pub sigma_d: f64,
    /// Standard deviation of Gaussian noise added to every logit.
    pub label_noise: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        let a = 30f64.to_radians();
        Self {
            vo_anchors: [-a, 0.0, a],
            lo_anchors: [-0.5, 0.0, 0.5],
            sigma_psi: 15f64.to_radians(),
            sigma_d: 0.25,
            label_noise: 0.0,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        let increasing = |a: &[f64; 3]| a[0] < a[1] && a[1] < a[2] && a.iter().all(|v| v.is_finite());
        if !increasing(&self.vo_anchors) {
            return Err(Error::param("vo_anchors", "must be strictly increasing"));
        }
        if !increasing(&self.lo_anchors) {
            return Err(Error::param("lo_anchors", "must be strictly increasing"));
        }
        if !(self.sigma_psi > 0.0 && self.sigma_psi.is_finite()) {
            return Err(Error::param("sigma_psi", "must be positive"));
        }
        if !(self.sigma_d > 0.0 && self.sigma_d.is_finite()) {
            return Err(Error::param("sigma_d", "must be positive"));
        }
        if !(self.label_noise >= 0.0 && self.label_noise.is_finite()) {
            return Err(Error::param("label_noise", "must be >= 0"));
        }
        Ok(())
    }
}

/// Gaussian-scored logits in `(left, center, right)` order.
fn anchor_logits(value: f64, anchors: &[f64; 3], sigma: f64) -> [f64; 3] {
    let score = |a: f64| -(value - a).powi(2) / (2.0 * sigma * sigma);
    [score(anchors[2]), score(anchors[1]), score(anchors[0])]
}

fn noisy_head<R: Rng + ?Sized>(mut z: [f64; 3], noise: f64, rng: &mut R) -> SoftLabel3 {
    if noise > 0.0 {
        let n = Normal::new(0.0, noise).expect("validated noise");
        for v in &mut z {
            *v += n.sample(rng);
        }
    }
    SoftLabel3::from_logits(&z)
}

pub fn oracle_predict<R: Rng + ?Sized>(
    rel: &RelativeState,
    params: &OracleParams,
    timestamp: f64,
    rng: &mut R,
) -> TrailEstimate {
    let vo = noisy_head(
        anchor_logits(rel.psi, &params.vo_anchors, params.sigma_psi),
        params.label_noise,
        rng,
    );
    let lo = noisy_head(
        anchor_logits(rel.d, &params.lo_anchors, params.sigma_d),
        params.label_noise,
        rng,
    );
    TrailEstimate { vo, lo, timestamp }
}

/// Nearest-anchor category; anchors in increasing order as in [`OracleParams`].
pub fn nearest_anchor(value: f64, anchors: &[f64; 3]) -> Category {
    let mut best = 0;
    for k in 1..3 {
        if (value - anchors[k]).abs() < (value - anchors[best]).abs() {
            best = k;
        }
    }
    [Category::Right, Category::Center, Category::Left][best]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    OrientationOnly,
    OffsetOnly,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Heading errors are drawn from `[-psi_range, psi_range]`, radians.
    pub psi_range: f64,
    /// Offsets are drawn from `[-d_range, d_range]`, meters.
    pub d_range: f64,
    /// Gaussian noise added to each feature.
    pub feature_noise: f64,
    pub vo_anchors: [f64; 3],
    pub lo_anchors: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let oracle = OracleParams::default();
        Self {
            psi_range: 45f64.to_radians(),
            d_range: 0.75,
            feature_noise: 0.05,
            vo_anchors: oracle.vo_anchors,
            lo_anchors: oracle.lo_anchors,
        }
    }
}

pub const FEATURE_DIM: usize = 16;
pub const HIDDEN_DIM: usize = 32;
const EMBEDDING_SEED: u64 = 0x7a11_5eed;

/// Fixed affine map from normalized `(d, psi)` to feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Embedding {
    pub fn fixed() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EMBEDDING_SEED);
        let n = Normal::new(0.0, 1.0).unwrap();
        let weights = DMatrix::from_fn(FEATURE_DIM, 2, |_, _| n.sample(&mut rng));
        let bias = DVector::from_fn(FEATURE_DIM, |_, _| 0.5 * n.sample(&mut rng));
        Self { weights, bias }
    }

    pub fn embed(&self, d: f64, psi: f64, cfg: &DatasetConfig) -> DVector<f64> {
        let latent = nalgebra::Vector2::new(d / cfg.d_range, psi / cfg.psi_range);
        &self.weights * latent + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One row per sample.
    pub features: DMatrix<f64>,
    pub vo_labels: Vec<Category>,
    pub lo_labels: Vec<Category>,
    /// `(d, psi)` that generated each row.
    pub latent: Vec<(f64, f64)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.vo_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vo_labels.is_empty()
    }

    pub fn labels(&self, head: Head) -> &[Category] {
        match head {
            Head::ViewOrientation => &self.vo_labels,
            Head::LateralOffset => &self.lo_labels,
        }
    }

    fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            features: self.features.rows(range.start, range.len()).into_owned(),
            vo_labels: self.vo_labels[range.clone()].to_vec(),
            lo_labels: self.lo_labels[range.clone()].to_vec(),
            latent: self.latent[range].to_vec(),
        }
    }

    /// Splits off the last `holdout` fraction as a test set. Samples are i.i.d.
    pub fn split(&self, holdout: f64) -> (Dataset, Dataset) {
        let n_test = ((self.len() as f64) * holdout).round() as usize;
        let n_train = self.len() - n_test;
        (self.subset(0..n_train), self.subset(n_train..self.len()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for j in 0..self.features.ncols() {
            write!(out, "feature_{j},").unwrap();
        }
        out.push_str("vo_label,lo_label\n");
        for i in 0..self.len() {
            for j in 0..self.features.ncols() {
                write!(out, "{},", self.features[(i, j)]).unwrap();
            }
            writeln!(out, "{},{}", self.vo_labels[i].name(), self.lo_labels[i].name()).unwrap();
        }
        out
    }
}

/// Draws a category uniformly, then a value uniformly inside that category's
/// nearest-anchor cell clipped to `[-range, range]`.
fn balanced_value<R: Rng + ?Sized>(anchors: &[f64; 3], range: f64, rng: &mut R) -> f64 {
    let lo_edge = 0.5 * (anchors[0] + anchors[1]);
    let hi_edge = 0.5 * (anchors[1] + anchors[2]);
    let cells = [(-range, lo_edge), (lo_edge, hi_edge), (hi_edge, range)];
    let (a, b) = cells[rng.random_range(0..3)];
    rng.random_range(a..b)
}

pub fn make_synthetic_dataset<R: Rng + ?Sized>(
    kind: DatasetKind,
    n: usize,
    cfg: &DatasetConfig,
    rng: &mut R,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::param("n", "dataset size must be positive"));
    }
    let embedding = Embedding::fixed();
    let noise = Normal::new(0.0, cfg.feature_noise.max(0.0)).expect("finite noise");
    let mut features = DMatrix::zeros(n, FEATURE_DIM);
    let mut vo_labels = Vec::with_capacity(n);
    let mut lo_labels = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    for i in 0..n {
        let psi = match kind {
            DatasetKind::OffsetOnly => 0.0,
            _ => balanced_value(&cfg.vo_anchors, cfg.psi_range, rng),
        };
        let d = match kind {
            DatasetKind::OrientationOnly => 0.0,
            _ => balanced_value(&cfg.lo_anchors, cfg.d_range, rng),
        };
        let x = embedding.embed(d, psi, cfg);
        for j in 0..FEATURE_DIM {
            let eps = if cfg.feature_noise > 0.0 { noise.sample(rng) } else { 0.0 };
            features[(i, j)] = x[j] + eps;
        }
        vo_labels.push(nearest_anchor(psi, &cfg.vo_anchors));
        lo_labels.push(nearest_anchor(d, &cfg.lo_anchors));
        latent.push((d, psi));
    }
    Ok(Dataset {
        features,
        vo_labels,
        lo_labels,
        latent,
    })
}

/// Which parameter blocks training may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub trunk: bool,
    pub vo_head: bool,
    pub lo_head: bool,
}

impl FreezeMask {
    pub const NONE: FreezeMask = FreezeMask {
        trunk: false,
        vo_head: false,
        lo_head: false,
    };

    /// Orientation pre-training: everything trainable.
    pub fn stage1() -> Self {
        Self::NONE
    }

    /// Offset transfer: only the lateral-offset head learns.
    pub fn stage2() -> Self {
        Self {
            trunk: true,
            vo_head: true,
            lo_head: false,
        }
    }
}

/// Shifted rectifier, `max(x, -1)`.
pub fn srelu(x: f64) -> f64 {
    x.max(-1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoHeadModel {
    pub trunk_w: DMatrix<f64>,
    pub trunk_b: DVector<f64>,
    pub vo_w: DMatrix<f64>,
    pub vo_b: DVector<f64>,
    pub lo_w: DMatrix<f64>,
    pub lo_b: DVector<f64>,
    pub freeze: FreezeMask,
}

struct Forward {
    pre: DMatrix<f64>,
    hidden: DMatrix<f64>,
    vo_logits: DMatrix<f64>,
    lo_logits: DMatrix<f64>,
}

fn add_row_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut row in m.row_iter_mut() {
        row += b.transpose();
    }
}

fn row3(m: &DMatrix<f64>, i: usize) -> [f64; 3] {
    [m[(i, 0)], m[(i, 1)], m[(i, 2)]]
}

impl TwoHeadModel {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            trunk_w: DMatrix::zeros(hidden_dim, input_dim),
            trunk_b: DVector::zeros(hidden_dim),
            vo_w: DMatrix::zeros(3, hidden_dim),
            vo_b: DVector::zeros(3),
            lo_w: DMatrix::zeros(3, hidden_dim),
            lo_b: DVector::zeros(3),
            freeze: FreezeMask::NONE,
        }
    }

    /// He-style initialization from a seeded source.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let trunk = Normal::new(0.0, (2.0 / input_dim as f64).sqrt()).unwrap();
        let head = Normal::new(0.0, (1.0 / hidden_dim as f64).sqrt()).unwrap();
        let mut m = Self::zeros(input_dim, hidden_dim);
        m.trunk_w = DMatrix::from_fn(hidden_dim, input_dim, |_, _| trunk.sample(rng));
        m.vo_w = DMatrix::from_fn(3, hidden_dim, |_, _| head.sample(rng));
        m.lo_w = DMatrix::from_fn(3, hidden_dim, |_, _| head.sample(rng));
        m
    }

    pub fn input_dim(&self) -> usize {
        self.trunk_w.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.trunk_w.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, m)| m.iter().all(|v| v.is_finite()))
    }

    fn blocks(&self) -> [(&'static str, DMatrix<f64>); 6] {
        [
            ("trunk_w", self.trunk_w.clone()),
            ("trunk_b", DMatrix::from_column_slice(self.trunk_b.len(), 1, self.trunk_b.as_slice())),
            ("vo_w", self.vo_w.clone()),
            ("vo_b", DMatrix::from_column_slice(3, 1, self.vo_b.as_slice())),
            ("lo_w", self.lo_w.clone()),
            ("lo_b", DMatrix::from_column_slice(3, 1, self.lo_b.as_slice())),
        ]
    }

    fn forward(&self, x: &DMatrix<f64>) -> Forward {
        let mut pre = x * self.trunk_w.transpose();
        add_row_bias(&mut pre, &self.trunk_b);
        let hidden = pre.map(srelu);
        let mut vo_logits = &hidden * self.vo_w.transpose();
        add_row_bias(&mut vo_logits, &self.vo_b);
        let mut lo_logits = &hidden * self.lo_w.transpose();
        add_row_bias(&mut lo_logits, &self.lo_b);
        Forward {
            pre,
            hidden,
            vo_logits,
            lo_logits,
        }
    }

    pub fn predict_batch(&self, x: &DMatrix<f64>) -> Result<Vec<(SoftLabel3, SoftLabel3)>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        let f = self.forward(x);
        Ok((0..x.nrows())
            .map(|i| {
                (
                    SoftLabel3::from_logits(&row3(&f.vo_logits, i)),
                    SoftLabel3::from_logits(&row3(&f.lo_logits, i)),
                )
            })
            .collect())
    }

    pub fn head_logits(&self, features: &[f64]) -> Result<([f64; 3], [f64; 3])> {
        if features.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: features.len(),
            });
        }
        let x = DMatrix::from_row_slice(1, features.len(), features);
        let f = self.forward(&x);
        Ok((row3(&f.vo_logits, 0), row3(&f.lo_logits, 0)))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("trailnav-model v1\n");
        writeln!(
            out,
            "freeze trunk={} vo_head={} lo_head={}",
            self.freeze.trunk as u8, self.freeze.vo_head as u8, self.freeze.lo_head as u8
        )
        .unwrap();
        for (name, m) in self.blocks() {
            writeln!(out, "block {name} {} {}", m.nrows(), m.ncols()).unwrap();
            for row in m.row_iter() {
                let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", vals.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, "trailnav-model v1")) => {}
            Some((n, other)) => {
                return Err(Error::parse(n, format!("unsupported header `{other}`")))
            }
            None => return Err(Error::parse(1, "empty model file")),
        }
        let (n, freeze_line) = lines.next().ok_or_else(|| Error::parse(2, "missing freeze line"))?;
        let mut freeze = FreezeMask::NONE;
        let mut parts = freeze_line.split_whitespace();
        if parts.next() != Some("freeze") {
            return Err(Error::parse(n, "expected `freeze ...`"));
        }
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::parse(n, format!("bad freeze entry `{kv}`")))?;
            let flag = match v {
                "0" => false,
                "1" => true,
                _ => return Err(Error::parse(n, format!("bad freeze flag `{v}`"))),
            };
            match k {
                "trunk" => freeze.trunk = flag,
                "vo_head" => freeze.vo_head = flag,
                "lo_head" => freeze.lo_head = flag,
                _ => return Err(Error::parse(n, format!("unknown freeze block `{k}`"))),
            }
        }
        let mut blocks = std::collections::HashMap::new();
        while let Some((n, header)) = lines.next() {
            if header.is_empty() {
                continue;
            }
            let fields: Vec<&str> = header.split_whitespace().collect();
            let [kw, name, rows, cols] = fields[..] else {
                return Err(Error::parse(n, "expected `block <name> <rows> <cols>`"));
            };
            if kw != "block" {
                return Err(Error::parse(n, "expected `block <name> <rows> <cols>`"));
            }
            let rows: usize = rows.parse().map_err(|_| Error::parse(n, "bad row count"))?;
            let cols: usize = cols.parse().map_err(|_| Error::parse(n, "bad column count"))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (rn, row) = lines
                    .next()
                    .ok_or_else(|| Error::parse(n, format!("block {name} truncated")))?;
                let vals: Vec<f64> = row
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|e| Error::parse(rn, e.to_string())))
                    .collect::<Result<_>>()?;
                if vals.len() != cols {
                    return Err(Error::parse(rn, format!("expected {cols} values, got {}", vals.len())));
                }
                data.extend(vals);
            }
            blocks.insert(name.to_string(), DMatrix::from_row_slice(rows, cols, &data));
        }
        let mut take = |name: &str| {
            blocks
                .remove(name)
                .ok_or_else(|| Error::parse(0, format!("missing block {name}")))
        };
        let col = |m: DMatrix<f64>| DVector::from_column_slice(m.as_slice());
        let model = Self {
            trunk_w: take("trunk_w")?,
            trunk_b: col(take("trunk_b")?),
            vo_w: take("vo_w")?,
            vo_b: col(take("vo_b")?),
            lo_w: take("lo_w")?,
            lo_b: col(take("lo_b")?),
            freeze,
        };
        let h = model.hidden_dim();
        if model.trunk_b.len() != h
            || model.vo_w.shape() != (3, h)
            || model.lo_w.shape() != (3, h)
            || model.vo_b.len() != 3
            || model.lo_b.len() != 3
        {
            return Err(Error::parse(0, "inconsistent block shapes"));
        }
        Ok(model)
    }
}

pub fn model_predict(model: &TwoHeadModel, features: &[f64], timestamp: f64) -> Result<TrailEstimate> {
    let (vo, lo) = model.head_logits(features)?;
    Ok(TrailEstimate {
        vo: SoftLabel3::from_logits(&vo),
        lo: SoftLabel3::from_logits(&lo),
        timestamp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Learning-rate multiplier after an accepted step.
    pub lr_growth: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.5,
            momentum: 0.9,
            lr_growth: 1.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Mean training loss after each epoch.
    pub loss: Vec<f64>,
    pub rejected_steps: usize,
    pub final_learning_rate: f64,
}

struct Grads {
    trunk_w: DMatrix<f64>,
    trunk_b: DVector<f64>,
    head_w: DMatrix<f64>,
    head_b: DVector<f64>,
}

fn mean_loss_and_grads(
    model: &TwoHeadModel,
    data: &Dataset,
    head: Head,
    targets: &[crate::loss::SmoothedLabel],
    weights: &LossWeights,
    want_grads: bool,
) -> Result<(f64, Option<Grads>)> {
    let f = model.forward(&data.features);
    let logits = match head {
        Head::ViewOrientation => &f.vo_logits,
        Head::LateralOffset => &f.lo_logits,
    };
    let n = data.len();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut dz = DMatrix::zeros(n, 3);
    for i in 0..n {
        let z = row3(logits, i);
        total += loss_value(&SoftLabel3::from_logits(&z), &targets[i], weights)?;
        if want_grads {
            let g = loss_grad_logits(&z, &targets[i], weights);
            for k in 0..3 {
                dz[(i, k)] = g[k] * inv_n;
            }
        }
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    if !want_grads {
        return Ok((loss, None));
    }
    let head_w = match head {
        Head::ViewOrientation => &model.vo_w,
        Head::LateralOffset => &model.lo_w,
    };
    let grad_head_w = dz.transpose() * &f.hidden;
    let grad_head_b = DVector::from_iterator(3, dz.column_iter().map(|c| c.sum()));
    let mut dpre = &dz * head_w;
    dpre.zip_apply(&f.pre, |g, p| {
        if p <= -1.0 {
            *g = 0.0;
        }
    });
    let grad_trunk_w = dpre.transpose() * &data.features;
    let grad_trunk_b = DVector::from_iterator(dpre.ncols(), dpre.column_iter().map(|c| c.sum()));
    Ok((
        loss,
        Some(Grads {
            trunk_w: grad_trunk_w,
            trunk_b: grad_trunk_b,
            head_w: grad_head_w,
            head_b: grad_head_b,
        }),
    ))
}

pub fn smoothed_targets(labels: &[Category], epsilon: f64) -> Vec<crate::loss::SmoothedLabel> {
    labels.iter().map(|&c| smooth_labels(c, epsilon)).collect()
}

/// Full-batch gradient descent with heavy-ball momentum on one head's loss.
///
/// A step that raises the loss is rejected, the learning rate is halved and
/// the velocity reset, so the recorded history never increases. Blocks marked
/// frozen in `model.freeze` are left untouched.
pub fn train_stage(
    model: &TwoHeadModel,
    data: &Dataset,
    head: Head,
    loss_cfg: &LossConfig,
    opt: &OptConfig,
) -> Result<(TwoHeadModel, TrainingHistory)> {
    loss_cfg.validate()?;
    if data.features.ncols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            found: data.features.ncols(),
        });
    }
    if data.is_empty() {
        return Err(Error::param("data", "training set is empty"));
    }
    let weights = loss_cfg.for_head(head);
    let targets = smoothed_targets(data.labels(head), loss_cfg.epsilon);
    let head_frozen = match head {
        Head::ViewOrientation => model.freeze.vo_head,
        Head::LateralOffset => model.freeze.lo_head,
    };
    let train_trunk = !model.freeze.trunk;

    let mut current = model.clone();
    let diverged = |epoch: usize, last: &TwoHeadModel| Error::Diverged {
        epoch,
        last_finite: Box::new(last.clone()),
    };
    let (mut loss, mut grads) = match mean_loss_and_grads(&current, data, head, &targets, &weights, true) {
        Ok((l, g)) => (l, g.expect("requested")),
        Err(Error::NonFiniteLoss) => return Err(diverged(0, &current)),
        Err(e) => return Err(e),
    };

    let mut lr = opt.learning_rate;
    let mut v_trunk_w = DMatrix::zeros(current.trunk_w.nrows(), current.trunk_w.ncols());
    let mut v_trunk_b = DVector::zeros(current.trunk_b.len());
    let mut v_head_w = DMatrix::zeros(3, current.hidden_dim());
    let mut v_head_b = DVector::zeros(3);
    let mut history = TrainingHistory {
        loss: Vec::with_capacity(opt.epochs),
        rejected_steps: 0,
        final_learning_rate: lr,
    };

    for epoch in 1..=opt.epochs {
        let mut candidate = current.clone();
        let nv_head_w = &v_head_w * opt.momentum - &grads.head_w * lr;
        let nv_head_b = &v_head_b * opt.momentum - &grads.head_b * lr;
        let nv_trunk_w = &v_trunk_w * opt.momentum - &grads.trunk_w * lr;
        let nv_trunk_b = &v_trunk_b * opt.momentum - &grads.trunk_b * lr;
        if !head_frozen {
            match head {
                Head::ViewOrientation => {
                    candidate.vo_w += &nv_head_w;
                    candidate.vo_b += &nv_head_b;
                }
                Head::LateralOffset => {
                    candidate.lo_w += &nv_head_w;
                    candidate.lo_b += &nv_head_b;
                }
            }
        }
        if train_trunk {
            candidate.trunk_w += &nv_trunk_w;
            candidate.trunk_b += &nv_trunk_b;
        }
        match mean_loss_and_grads(&candidate, data, head, &targets, &weights, true) {
            Ok((new_loss, new_grads)) if new_loss <= loss => {
                current = candidate;
                loss = new_loss;
                grads = new_grads.expect("requested");
                v_head_w = nv_head_w;
                v_head_b = nv_head_b;
                v_trunk_w = nv_trunk_w;
                v_trunk_b = nv_trunk_b;
                lr *= opt.lr_growth;
            }
            Ok(_) => {
                history.rejected_steps += 1;
                lr *= 0.5;
                v_head_w.fill(0.0);
                v_head_b.fill(0.0);
                v_trunk_w.fill(0.0);
                v_trunk_b.fill(0.0);
            }
            Err(Error::NonFiniteLoss) => return Err(diverged(epoch, &current)),
            Err(e) => return Err(e),
        }
        history.loss.push(loss);
    }
    history.final_learning_rate = lr;
    Ok((current, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub accuracy: f64,
    /// Mean probability assigned to the argmax category.
    pub mean_max_prob: f64,
}

pub fn evaluate(model: &TwoHeadModel, data: &Dataset, head: Head) -> Result<HeadMetrics> {
    let preds = model.predict_batch(&data.features)?;
    let labels = data.labels(head);
    let mut correct = 0usize;
    let mut conf = 0.0;
    for (i, (vo, lo)) in preds.iter().enumerate() {
        let y = match head {
            Head::ViewOrientation => vo,
            Head::LateralOffset => lo,
        };
        if y.argmax() == labels[i] {
            correct += 1;
        }
        conf += y.max_prob();
    }
    let n = data.len().max(1) as f64;
    Ok(HeadMetrics {
        accuracy: correct as f64 / n,
        mean_max_prob: conf / n,
    })
}

/// Least-squares recovery of normalized `(d, psi)` from noiseless features.
pub fn invert_embedding(embedding: &Embedding, features: &DVector<f64>) -> DVector<f64> {
    let wt = embedding.weights.transpose();
    let normal = &wt * &embedding.weights;
    normal
        .lu()
        .solve(&(wt * (features - &embedding.bias)))
        .expect("embedding has full column rank")
}
