//! Cosine-logit softmax heads.
//!
//! Every head computes, per sample, a positive logit `s·T(cos θ_y)` and
//! negative logits `s·g(t, cos θ_j)`, then softmax cross-entropy:
//!
//! | head         | `T(c)`            | `g(t, c)` when `T(c_y) - c < 0` | extra                  |
//! |--------------|-------------------|---------------------------------|------------------------|
//! | NormFace     | `c`               | `c`                             |                        |
//! | ArcFace      | `cos(θ + m)`      | `c`                             |                        |
//! | CosFace      | `c - m`           | `c`                             |                        |
//! | Focal        | `cos(θ + m)`      | `c`                             | weight `(1 - p)^γ`     |
//! | MVArc        | `cos(θ + m)`      | `c + t`                         |                        |
//! | Curricular   | `cos(θ + m)`      | `c (t + c)`                     | EMA state `t`          |
//! | BoundaryF1   | `cos(θ + m)`      | `c`                             | label correction       |
//! | BoundaryFace | `cos(θ + m)`      | `c`                             | correction, `+ λ f`    |
//!
//! The boundary regularizer is `f = max(0, max_{j≠y} cos θ_j - cos(θ_y + m))`:
//! positive exactly for samples sitting between their own decision boundary
//! and the nearest negative class. Label correction moves `y` to
//! `argmax_{k≠y} cos(θ_k + m)` when that score beats `cos θ_y`.
//!
//! The regularizer is added (`CE + λ f`) so hard samples are penalized.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypersphere::{
    angular_add_derivative, angular_add_saturating_derivative, angular_add_saturating_with, angular_add_with,
    cos_unclamped, cosine_rows, dot, normalize_with_norm,
    CosineRow,
};
use crate::numeric::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    NormFace,
    ArcFace,
    CosFace,
    Focal,
    MVArc,
    Curricular,
    BoundaryF1,
    BoundaryFace,
}

impl HeadKind {
    pub const ALL: [HeadKind; 8] = [
        HeadKind::NormFace,
        HeadKind::ArcFace,
        HeadKind::CosFace,
        HeadKind::Focal,
        HeadKind::MVArc,
        HeadKind::Curricular,
        HeadKind::BoundaryF1,
        HeadKind::BoundaryFace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::NormFace => "normface",
            HeadKind::ArcFace => "arcface",
            HeadKind::CosFace => "cosface",
            HeadKind::Focal => "focal",
            HeadKind::MVArc => "mvarc",
            HeadKind::Curricular => "curricular",
            HeadKind::BoundaryF1 => "boundaryf1",
            HeadKind::BoundaryFace => "boundaryface",
        }
    }

    pub fn supports_correction(self) -> bool {
        matches!(self, HeadKind::BoundaryF1 | HeadKind::BoundaryFace)
    }

    fn needs_modulator(self) -> bool {
        matches!(self, HeadKind::MVArc | HeadKind::Curricular)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase().replace(['-', '_'], "");
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::InvalidHeadConfig(format!("unknown head '{s}'")))
    }
}

/// How `cos(θ + m)` behaves once `θ + m` passes `π`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginOverflow {
    /// `cos(min(θ + m, π))`: monotone, flat at `-1` past the cap.
    #[default]
    Saturate,
    /// The raw `cos(θ + m)`, which rises again past `π`.
    Wrap,
}

/// A loss head and its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Logit scale.
    pub s: f64,
    /// Additive angle in radians, or a cosine offset for CosFace.
    pub m: f64,
    /// Mining modulator: fixed for MVArc, EMA state for Curricular.
    pub t: Option<f64>,
    /// Weight of the boundary regularizer (BoundaryFace only).
    pub lambda: f64,
    pub focal_gamma: f64,
    pub correction_enabled: bool,
    /// EMA rate for the Curricular modulator.
    pub ema_alpha: f64,
    #[serde(default)]
    pub margin_overflow: MarginOverflow,
}

impl HeadConfig {
    /// Defaults per head: `s = 32`, `m = 0.5` for the additive-angle heads,
    /// `m = 0.35` for CosFace, `λ = π`, `γ = 2`, MVArc `t = 0.2`,
    /// Curricular `t(0) = 0` with `α = 0.01`. Correction is on for the two
    /// boundary heads.
    pub fn new(kind: HeadKind) -> Self {
        let m = match kind {
            HeadKind::NormFace | HeadKind::Focal => 0.0,
            HeadKind::CosFace => 0.35,
            _ => 0.5,
        };
        let t = match kind {
            HeadKind::MVArc => Some(0.2),
            HeadKind::Curricular => Some(0.0),
            _ => None,
        };
        Self {
            kind,
            s: 32.0,
            m,
            t,
            lambda: PI,
            focal_gamma: 2.0,
            correction_enabled: kind.supports_correction(),
            ema_alpha: 0.01,
            margin_overflow: MarginOverflow::Saturate,
        }
    }

    pub fn with_margin(mut self, m: f64) -> Self {
        self.m = m;
        self
    }

    pub fn with_scale(mut self, s: f64) -> Self {
        self.s = s;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_modulator(mut self, t: Option<f64>) -> Self {
        self.t = t;
        self
    }

    pub fn with_correction(mut self, enabled: bool) -> Self {
        self.correction_enabled = enabled;
        self
    }

    pub fn with_focal_gamma(mut self, gamma: f64) -> Self {
        self.focal_gamma = gamma;
        self
    }

    pub fn with_margin_overflow(mut self, overflow: MarginOverflow) -> Self {
        self.margin_overflow = overflow;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidHeadConfig(msg));
        if !(self.s > 0.0 && self.s.is_finite()) {
            return bad(format!("scale s must be positive, got {}", self.s));
        }
        if !(self.m >= 0.0 && self.m.is_finite()) {
            return bad(format!("margin m must be non-negative, got {}", self.m));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return bad(format!("focal_gamma must be non-negative, got {}", self.focal_gamma));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha must lie in [0, 1], got {}", self.ema_alpha));
        }
        if self.correction_enabled && !self.kind.supports_correction() {
            return bad(format!("{} does not support label correction", self.kind));
        }
        Ok(())
    }

    fn uses_regularizer(&self) -> bool {
        self.kind == HeadKind::BoundaryFace && self.lambda > 0.0
    }

    fn modulator(&self) -> Result<f64> {
        if self.kind.needs_modulator() {
            self.t.ok_or_else(|| {
                Error::InvalidHeadState(format!("{} requires a modulator t", self.kind))
            })
        } else {
            Ok(0.0)
        }
    }
}

/// Per-sample outcome of [`forward_loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchForwardRecord {
    pub original_label: usize,
    pub effective_label: usize,
    pub corrected: bool,
    /// `f > 0`.
    pub hard: bool,
    pub regularizer_value: f64,
    pub loss_value: f64,
    pub cosine_row: CosineRow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub mean_loss: f64,
    pub records: Vec<BatchForwardRecord>,
    /// Modulator `t` the logits were computed with.
    pub modulator: Option<f64>,
    /// Curricular only: the EMA state after this batch.
    pub updated_modulator: Option<f64>,
}

impl ForwardOutput {
    pub fn corrected_count(&self) -> usize {
        self.records.iter().filter(|r| r.corrected).count()
    }

    pub fn hard_count(&self) -> usize {
        self.records.iter().filter(|r| r.hard).count()
    }
}

/// Gradients of the mean batch loss w.r.t. the unnormalized inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub features: Vec<Vec<f64>>,
    pub centers: Vec<Vec<f64>>,
}

#[derive(Clone, Copy)]
struct Margin {
    cos_m: f64,
    sin_m: f64,
    overflow: MarginOverflow,
}

impl Margin {
    fn of(cfg: &HeadConfig) -> Self {
        Self::new(cfg.m, cfg.margin_overflow)
    }

    fn new(m: f64, overflow: MarginOverflow) -> Self {
        Self {
            cos_m: m.cos(),
            sin_m: m.sin(),
            overflow,
        }
    }

    fn apply<T: Scalar>(self, c: T) -> T {
        match self.overflow {
            MarginOverflow::Saturate => angular_add_saturating_with(c, self.cos_m, self.sin_m),
            MarginOverflow::Wrap => angular_add_with(c, self.cos_m, self.sin_m),
        }
    }

    fn slope(self, c: f64) -> f64 {
        match self.overflow {
            MarginOverflow::Saturate => angular_add_saturating_derivative(c, self.cos_m, self.sin_m),
            MarginOverflow::Wrap => angular_add_derivative(c, self.cos_m, self.sin_m),
        }
    }
}

fn transform_pos<T: Scalar>(cfg: &HeadConfig, mg: Margin, c: T) -> T {
    match cfg.kind {
        HeadKind::NormFace => c,
        HeadKind::CosFace => c - T::from_f64(cfg.m),
        _ => mg.apply(c),
    }
}

fn transform_pos_derivative(cfg: &HeadConfig, mg: Margin, c: f64) -> f64 {
    match cfg.kind {
        HeadKind::NormFace | HeadKind::CosFace => 1.0,
        _ => mg.slope(c),
    }
}

fn transform_neg<T: Scalar>(kind: HeadKind, c: T, pos: T, t: f64) -> T {
    if pos - c >= T::zero() {
        return c;
    }
    match kind {
        HeadKind::MVArc => c + T::from_f64(t),
        HeadKind::Curricular => c * (T::from_f64(t) + c),
        _ => c,
    }
}

fn transform_neg_derivative(kind: HeadKind, c: f64, pos: f64, t: f64) -> f64 {
    if pos - c >= 0.0 {
        return 1.0;
    }
    match kind {
        HeadKind::Curricular => t + 2.0 * c,
        _ => 1.0,
    }
}

/// `T(cos θ_y)` for the configured head.
pub fn positive_transform(config: &HeadConfig, cos_pos: f64) -> f64 {
    transform_pos(config, Margin::of(config), cos_pos)
}

/// `g(t, cos θ_j)` given the already transformed positive score `t_pos`.
/// Uses `config.t` (zero when absent).
pub fn negative_transform(config: &HeadConfig, cos_neg: f64, t_pos: f64) -> f64 {
    transform_neg(config.kind, cos_neg, t_pos, config.t.unwrap_or(0.0))
}

/// Index of the first maximum of `score(j)` over `j ≠ skip`.
fn argmax_excluding<T: Scalar>(n: usize, skip: usize, score: impl Fn(usize) -> T) -> Option<(usize, T)> {
    let mut best: Option<(usize, T)> = None;
    for j in (0..n).filter(|&j| j != skip) {
        let v = score(j);
        match best {
            Some((_, b)) if !(v > b) => {}
            _ => best = Some((j, v)),
        }
    }
    best
}

fn correction_target<T: Scalar>(row: &[T], y: usize, mg: Margin) -> Option<usize> {
    let (k, score) = argmax_excluding(row.len(), y, |k| mg.apply(row[k]))?;
    (score > row[y]).then_some(k)
}

/// Label self-correction: the nearest margin-adjusted negative class if the
/// sample lies inside its decision region, i.e.
/// `max_{k≠y} cos(θ_k + m) > cos θ_y` (strict). Ties go to the lowest index.
pub fn correction_check(row: &CosineRow, y: usize, m: f64) -> Option<usize> {
    correction_target(row.values(), y, Margin::new(m, MarginOverflow::default()))
}

fn regularizer<T: Scalar>(row: &[T], y: usize, pos: T) -> (T, Option<usize>) {
    match argmax_excluding(row.len(), y, |j| row[j]) {
        Some((j, neg)) => {
            let gap = neg - pos;
            if gap > T::zero() {
                (gap, Some(j))
            } else {
                (T::zero(), None)
            }
        }
        None => (T::zero(), None),
    }
}

/// `f = max(0, max_{j≠y} cos θ_j - cos(θ_y + m))`.
pub fn boundary_regularizer(row: &CosineRow, y: usize, m: f64) -> f64 {
    let pos = Margin::new(m, MarginOverflow::default()).apply(row[y]);
    regularizer(row.values(), y, pos).0
}

/// `(1 - p)^γ`.
pub fn focal_indicator(p: f64, focal_gamma: f64) -> f64 {
    (1.0 - p).max(0.0).powf(focal_gamma)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Logits of one sample for label `y` (no correction applied).
pub fn sample_logits(config: &HeadConfig, row: &CosineRow, y: usize, modulator: f64) -> Vec<f64> {
    logits_of(config, Margin::of(config), row.values(), y, modulator).0
}

fn logits_of<T: Scalar>(cfg: &HeadConfig, mg: Margin, row: &[T], y: usize, t: f64) -> (Vec<T>, T) {
    let s = T::from_f64(cfg.s);
    let pos = transform_pos(cfg, mg, row[y]);
    let z = row
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            if j == y {
                s * pos
            } else {
                s * transform_neg(cfg.kind, c, pos, t)
            }
        })
        .collect();
    (z, pos)
}

/// `-ln softmax(z)_y = ln(1 + Σ_{k≠y} e^{z_k - z_y})`, written so that a
/// near-zero loss keeps its relative precision.
fn cross_entropy<T: Scalar>(z: &[T], y: usize) -> T {
    let shift = z
        .iter()
        .map(|&v| v - z[y])
        .fold(T::zero(), T::max);
    let mut rest = T::zero();
    for (k, &v) in z.iter().enumerate() {
        if k != y {
            rest += (v - z[y] - shift).exp();
        }
    }
    if shift > T::zero() {
        shift + ((-shift).exp() + rest).ln()
    } else {
        rest.ln_1p()
    }
}

struct SampleEval<T> {
    label: usize,
    corrected: bool,
    regularizer: T,
    loss: T,
}

fn eval_sample<T: Scalar>(cfg: &HeadConfig, mg: Margin, row: &[T], label: usize, t: f64) -> SampleEval<T> {
    let mut y = label;
    let mut corrected = false;
    if cfg.correction_enabled {
        if let Some(k) = correction_target(row, y, mg) {
            y = k;
            corrected = true;
        }
    }
    let (z, pos) = logits_of(cfg, mg, row, y, t);
    let ce = cross_entropy(&z, y);
    let mut loss = if cfg.kind == HeadKind::Focal {
        let p = (-ce).exp();
        (T::one() - p).max(T::zero()).powf(cfg.focal_gamma) * ce
    } else {
        ce
    };
    let (f, _) = regularizer(row, y, pos);
    if cfg.uses_regularizer() {
        loss += T::from_f64(cfg.lambda) * f;
    }
    SampleEval {
        label: y,
        corrected,
        regularizer: f,
        loss,
    }
}

fn check_batch(rows: usize, labels: &[usize], num_classes: usize) -> Result<()> {
    if rows == 0 {
        return Err(Error::InvalidHeadState("empty batch".into()));
    }
    if labels.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            found: labels.len(),
        });
    }
    if num_classes < 2 {
        return Err(Error::InvalidHeadState("need at least two classes".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    Ok(())
}

/// Mean loss over a batch of cosine rows plus per-sample records.
///
/// With correction enabled each sample's label may be replaced for this call
/// only; `labels` is never modified. For Curricular the logits use the
/// incoming state `config.t` and the returned `updated_modulator` is
/// `α · mean(cos θ_y) + (1 - α) · t`.
pub fn forward_loss(config: &HeadConfig, cos_matrix: &[CosineRow], labels: &[usize]) -> Result<ForwardOutput> {
    config.validate()?;
    let n = cos_matrix.first().map_or(0, CosineRow::len);
    check_batch(cos_matrix.len(), labels, n)?;
    if let Some(row) = cos_matrix.iter().find(|r| r.len() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: row.len(),
        });
    }
    let t = config.modulator()?;
    let mg = Margin::of(config);

    let mut total = 0.0;
    let records: Vec<BatchForwardRecord> = cos_matrix
        .iter()
        .zip(labels)
        .map(|(row, &label)| {
            let e = eval_sample(config, mg, row.values(), label, t);
            total += e.loss;
            BatchForwardRecord {
                original_label: label,
                effective_label: e.label,
                corrected: e.corrected,
                hard: e.regularizer > 0.0,
                regularizer_value: e.regularizer,
                loss_value: e.loss,
                cosine_row: row.clone(),
            }
        })
        .collect();

    let updated_modulator = (config.kind == HeadKind::Curricular).then(|| {
        let mean_pos =
            records.iter().map(|r| r.cosine_row[r.effective_label]).sum::<f64>() / records.len() as f64;
        config.ema_alpha * mean_pos + (1.0 - config.ema_alpha) * t
    });

    Ok(ForwardOutput {
        mean_loss: total / records.len() as f64,
        records,
        modulator: config.kind.needs_modulator().then_some(t),
        updated_modulator,
    })
}

/// Normalizes raw features and centers, then runs [`forward_loss`].
pub fn forward_embeddings(
    config: &HeadConfig,
    features: &[Vec<f64>],
    centers: &[Vec<f64>],
    labels: &[usize],
) -> Result<ForwardOutput> {
    let rows = raw_cosines(features, centers)?;
    let rows: Vec<CosineRow> = rows.into_iter().map(CosineRow).collect();
    forward_loss(config, &rows, labels)
}

fn raw_cosines<T: Scalar>(features: &[Vec<T>], centers: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
    let dim = centers.first().map_or(0, Vec::len);
    for v in features.iter().chain(centers) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        if !(crate::hypersphere::norm(v).to_f64() > crate::hypersphere::MIN_NORM) {
            return Err(Error::ZeroVector {
                norm: crate::hypersphere::norm(v).to_f64(),
            });
        }
    }
    let xs: Vec<Vec<T>> = features.iter().map(|v| normalize_with_norm(v).0).collect();
    let ws: Vec<Vec<T>> = centers.iter().map(|v| normalize_with_norm(v).0).collect();
    Ok(cosine_rows(&xs, &ws))
}

/// Mean batch loss evaluated in any [`Scalar`] type, from raw embeddings.
///
/// `modulator` is the `t` to use (ignored by heads without mining).
pub fn batch_loss<T: Scalar>(
    config: &HeadConfig,
    features: &[Vec<T>],
    centers: &[Vec<T>],
    labels: &[usize],
    modulator: f64,
) -> Result<T> {
    config.validate()?;
    let rows = raw_cosines(features, centers)?;
    check_batch(rows.len(), labels, centers.len())?;
    let mg = Margin::of(config);
    let mut total = T::zero();
    for (row, &label) in rows.iter().zip(labels) {
        total += eval_sample(config, mg, row, label, modulator).loss;
    }
    Ok(total / T::from_f64(rows.len() as f64))
}

/// `∂L/∂cos θ_ij` of the mean batch loss, ignoring the cosine clamp.
pub fn cosine_gradients(config: &HeadConfig, forward: &ForwardOutput) -> Vec<Vec<f64>> {
    let mg = Margin::of(config);
    let t = forward.modulator.unwrap_or(0.0);
    let scale = 1.0 / forward.records.len() as f64;

    forward
        .records
        .iter()
        .map(|rec| {
            let row = rec.cosine_row.values();
            let y = rec.effective_label;
            let (z, pos) = logits_of(config, mg, row, y, t);
            let p = softmax(&z);

            // dL/dz_k = (p_k - δ_ky) · weight
            let weight = if config.kind == HeadKind::Focal {
                focal_logit_weight(p[y], config.focal_gamma)
            } else {
                1.0
            };
            let pos_slope = transform_pos_derivative(config, mg, row[y]);
            let mut g: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, &c)| {
                    let dz = (p[j] - if j == y { 1.0 } else { 0.0 }) * weight;
                    let slope = if j == y {
                        pos_slope
                    } else {
                        transform_neg_derivative(config.kind, c, pos, t)
                    };
                    config.s * dz * slope
                })
                .collect();

            if config.uses_regularizer() {
                if let (_, Some(j)) = regularizer(row, y, pos) {
                    g[j] += config.lambda;
                    g[y] -= config.lambda * pos_slope;
                }
            }
            g.iter_mut().for_each(|v| *v *= scale);
            g
        })
        .collect()
}

/// For `L = (1 - p)^γ · (-ln p)`: `dL/dz_k = (p_k - δ_ky) · [(1 - p)^γ + γ (1 - p)^{γ-1} p (-ln p)]`.
fn focal_logit_weight(p: f64, gamma: f64) -> f64 {
    let q = (1.0 - p).max(0.0);
    let w = q.powf(gamma);
    if gamma == 0.0 || q == 0.0 {
        return w;
    }
    w + gamma * q.powf(gamma - 1.0) * p * (-p.ln())
}

/// Gradients of the mean batch loss w.r.t. raw (unnormalized) features and
/// centers, through clamp, normalization and the head's transforms.
///
/// `features` and `centers` must be the raw inputs that produced `forward`.
pub fn backward(
    config: &HeadConfig,
    forward: &ForwardOutput,
    features: &[Vec<f64>],
    centers: &[Vec<f64>],
) -> Result<Gradients> {
    if features.len() != forward.records.len() {
        return Err(Error::DimensionMismatch {
            expected: forward.records.len(),
            found: features.len(),
        });
    }
    let dim = centers.first().map_or(0, Vec::len);
    let xs: Vec<(Vec<f64>, f64)> = features.iter().map(|v| normalize_with_norm(v)).collect();
    let ws: Vec<(Vec<f64>, f64)> = centers.iter().map(|v| normalize_with_norm(v)).collect();

    let mut dcos = cosine_gradients(config, forward);
    for (i, row) in dcos.iter_mut().enumerate() {
        for (j, g) in row.iter_mut().enumerate() {
            if !cos_unclamped(dot(&xs[i].0, &ws[j].0)) {
                *g = 0.0;
            }
        }
    }

    let mut gx_hat = vec![vec![0.0; dim]; features.len()];
    let mut gw_hat = vec![vec![0.0; dim]; centers.len()];
    for (i, row) in dcos.iter().enumerate() {
        for (j, &g) in row.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for k in 0..dim {
                gx_hat[i][k] += g * ws[j].0[k];
                gw_hat[j][k] += g * xs[i].0[k];
            }
        }
    }

    Ok(Gradients {
        features: gx_hat
            .iter()
            .zip(&xs)
            .map(|(g, (u, n))| through_normalization(g, u, *n))
            .collect(),
        centers: gw_hat
            .iter()
            .zip(&ws)
            .map(|(g, (u, n))| through_normalization(g, u, *n))
            .collect(),
    })
}

/// `∂L/∂v = (g - <g, u> u) / ‖v‖` for `u = v / ‖v‖`.
fn through_normalization(g: &[f64], u: &[f64], norm: f64) -> Vec<f64> {
    let proj = dot(g, u);
    g.iter().zip(u).map(|(gk, uk)| (gk - proj * uk) / norm).collect()
}
