//! Central finite-difference check of the hand-written backward pass.
//!
//! Perturbed losses are evaluated in [`DoubleDouble`] so the difference
//! quotient carries no `f64` cancellation noise; the analytic side is the
//! ordinary `f64` backward used by the trainer.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::heads::{batch_loss, HeadConfig};
use crate::model::{EmbeddingModel, ModelShape};
use crate::noisegen::NoisyDataset;
use crate::numeric::{DoubleDouble, Scalar};
use crate::trainer::batch_gradients;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuditOptions {
    pub step: f64,
    /// Multiplies every analytic gradient before comparison. `1.0` in normal
    /// use; anything else is a negative control.
    pub analytic_scale: f64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    /// `max |analytic - numeric| / max(|numeric|, 1e-8)` over all parameters.
    pub max_rel_error: f64,
    pub worst_tensor: &'static str,
    pub worst_index: usize,
    pub num_parameters: usize,
    /// Samples with a positive boundary regularizer.
    pub hard_count: usize,
    /// Samples whose label the head corrected.
    pub corrected_count: usize,
}

impl AuditReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub fn finite_diff_audit(model: &EmbeddingModel, batch: &NoisyDataset, head: &HeadConfig) -> Result<AuditReport> {
    finite_diff_audit_with(model, batch, head, AuditOptions::default())
}

pub fn finite_diff_audit_with(
    model: &EmbeddingModel,
    batch: &NoisyDataset,
    head: &HeadConfig,
    options: AuditOptions,
) -> Result<AuditReport> {
    if batch.is_empty() {
        return Err(Error::InvalidTrainConfig("audit batch is empty".into()));
    }
    let inputs: Vec<&[f64]> = batch.inputs.iter().map(Vec::as_slice).collect();
    let (grads, fwd) = batch_gradients(model, &inputs, &batch.labels, head)?;
    let modulator = fwd.modulator.unwrap_or(0.0);

    let inputs_dd: Vec<Vec<DoubleDouble>> = batch
        .inputs
        .iter()
        .map(|x| x.iter().map(|&v| DoubleDouble::from_f64(v)).collect())
        .collect();
    let loss_at = |m: &EmbeddingModel<DoubleDouble>| -> Result<DoubleDouble> {
        let features: Vec<Vec<DoubleDouble>> = inputs_dd.iter().map(|x| m.embed(x)).collect();
        batch_loss(head, &features, &m.centers.to_rows(), &batch.labels, modulator)
    };

    let mut probe = model.cast::<DoubleDouble>();
    let h = DoubleDouble::from_f64(options.step);
    let two_h = DoubleDouble::from_f64(2.0 * options.step);

    let names: Vec<(&'static str, usize)> = grads.tensors().iter().map(|(n, t)| (*n, t.as_slice().len())).collect();
    let analytic: Vec<f64> = grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.as_slice().iter().copied())
        .collect();

    let mut report = AuditReport {
        max_rel_error: 0.0,
        worst_tensor: names[0].0,
        worst_index: 0,
        num_parameters: analytic.len(),
        hard_count: fwd.hard_count(),
        corrected_count: fwd.corrected_count(),
    };
    for (p, &a) in analytic.iter().enumerate() {
        let original = *probe.parameter_mut(p).expect("index within parameter count");
        *probe.parameter_mut(p).unwrap() = original + h;
        let plus = loss_at(&probe)?;
        *probe.parameter_mut(p).unwrap() = original - h;
        let minus = loss_at(&probe)?;
        *probe.parameter_mut(p).unwrap() = original;

        let numeric = ((plus - minus) / two_h).to_f64();
        let err = (a * options.analytic_scale - numeric).abs() / numeric.abs().max(DENOMINATOR_FLOOR);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            let mut offset = p;
            for &(name, len) in &names {
                if offset < len {
                    report.worst_tensor = name;
                    report.worst_index = offset;
                    break;
                }
                offset -= len;
            }
        }
    }
    Ok(report)
}

/// Dimensions of a seeded random audit case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaseShape {
    pub batch: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: Option<usize>,
}

impl CaseShape {
    /// 8 samples, 10 classes, 16-dimensional embeddings.
    pub const STANDARD: CaseShape = CaseShape {
        batch: 8,
        num_classes: 10,
        input_dim: 12,
        embed_dim: 16,
        hidden_dim: None,
    };
}

/// Random model plus a batch with Gaussian inputs and uniform labels. With
/// random centers most samples are hard at `m = 0.5` and several trigger
/// correction.
pub fn random_case(shape: CaseShape, seed: u64) -> Result<(EmbeddingModel, NoisyDataset)> {
    let model = EmbeddingModel::new(
        ModelShape {
            input_dim: shape.input_dim,
            hidden_dim: shape.hidden_dim,
            embed_dim: shape.embed_dim,
            num_classes: shape.num_classes,
        },
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let inputs = (0..shape.batch)
        .map(|_| (0..shape.input_dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let labels = (0..shape.batch).map(|_| rng.gen_range(0..shape.num_classes)).collect();
    Ok((model, NoisyDataset::new(shape.num_classes, inputs, labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadKind;

    #[test]
    fn linear_normface_is_tight() {
        let (model, batch) = random_case(CaseShape::STANDARD, 1).unwrap();
        let r = finite_diff_audit(&model, &batch, &HeadConfig::new(HeadKind::NormFace)).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
        assert_eq!(r.num_parameters, 16 * 12 + 16 + 10 * 16);
    }

    #[test]
    fn boundaryface_with_hard_and_corrected_samples() {
        let head = HeadConfig::new(HeadKind::BoundaryFace);
        let mut seen = false;
        for seed in 0..10 {
            let (model, batch) = random_case(CaseShape::STANDARD, seed).unwrap();
            let r = finite_diff_audit(&model, &batch, &head).unwrap();
            assert!(r.max_rel_error <= 1e-5, "seed {seed}: {r:?}");
            seen |= r.hard_count > 0 && r.corrected_count > 0;
        }
        assert!(seen);
    }

    #[test]
    fn every_head_with_hidden_layer() {
        let shape = CaseShape {
            hidden_dim: Some(10),
            ..CaseShape::STANDARD
        };
        for kind in HeadKind::ALL {
            let (model, batch) = random_case(shape, 3).unwrap();
            let r = finite_diff_audit(&model, &batch, &HeadConfig::new(kind)).unwrap();
            assert!(r.max_rel_error <= 1e-5, "{kind}: {r:?}");
        }
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (model, batch) = random_case(CaseShape::STANDARD, 2).unwrap();
        let opts = AuditOptions {
            analytic_scale: 1.001,
            ..Default::default()
        };
        let r = finite_diff_audit_with(&model, &batch, &HeadConfig::new(HeadKind::ArcFace), opts).unwrap();
        assert!(r.max_rel_error > 5e-4, "{r:?}");
        assert!(!r.passes(DEFAULT_TOLERANCE));
    }

    #[test]
    fn random_case_is_seeded() {
        assert_eq!(
            random_case(CaseShape::STANDARD, 9).unwrap(),
            random_case(CaseShape::STANDARD, 9).unwrap()
        );
        assert_ne!(
            random_case(CaseShape::STANDARD, 9).unwrap().1,
            random_case(CaseShape::STANDARD, 10).unwrap().1
        );
    }
}
