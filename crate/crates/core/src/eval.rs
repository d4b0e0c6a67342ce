//! Verification accuracy, noise-detection curves and the frozen-center
//! correction oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::correction_check;
use crate::hypersphere::{cosine_matrix, dot, normalize, UnitVector};
use crate::model::EmbeddingModel;
use crate::noisegen::{NoiseKind, NoiseLedger, NoisyDataset, VerificationPair};
use crate::trainer::MetricsLog;

/// Thresholds `-1.000, -0.999, ..., 1.000`.
pub const THRESHOLD_STEPS: i32 = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub best_threshold: f64,
    pub accuracy: f64,
    pub genuine_mean_cos: f64,
    pub impostor_mean_cos: f64,
}

pub fn threshold_grid() -> impl Iterator<Item = f64> {
    (0..=THRESHOLD_STEPS).map(|k| f64::from(k - THRESHOLD_STEPS / 2) / 1000.0)
}

/// Accuracy of the predicate `similarity >= threshold` at the best grid
/// threshold. Ties keep the lowest threshold.
pub fn verification_from_similarities(similarities: &[f64], same: &[bool]) -> Result<VerificationResult> {
    if similarities.is_empty() || similarities.len() != same.len() {
        return Err(Error::EmptyPairs);
    }
    let total = similarities.len() as f64;
    let mean_of = |want: bool| {
        let (sum, count) = similarities
            .iter()
            .zip(same)
            .filter(|(_, &s)| s == want)
            .fold((0.0, 0usize), |(a, n), (&c, _)| (a + c, n + 1));
        if count == 0 {
            f64::NAN
        } else {
            sum / count as f64
        }
    };

    // Sweep in ascending order: a pair flips from "same" to "different" once
    // the threshold passes its similarity.
    let mut order: Vec<usize> = (0..similarities.len()).collect();
    order.sort_by(|&a, &b| similarities[a].total_cmp(&similarities[b]));
    let mut correct = same.iter().filter(|&&s| s).count() as i64;
    let mut next = 0;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for threshold in threshold_grid() {
        while next < order.len() && similarities[order[next]] < threshold {
            correct += if same[order[next]] { -1 } else { 1 };
            next += 1;
        }
        let acc = correct as f64 / total;
        if acc > best.0 {
            best = (acc, threshold);
        }
    }
    Ok(VerificationResult {
        best_threshold: best.1,
        accuracy: best.0,
        genuine_mean_cos: mean_of(true),
        impostor_mean_cos: mean_of(false),
    })
}

/// Cosine similarity of each pair of embeddings.
pub fn pair_similarities(embeddings: &[UnitVector], pairs: &[VerificationPair]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| match (embeddings.get(p.a), embeddings.get(p.b)) {
            (Some(a), Some(b)) => Ok(dot(a.coords(), b.coords())),
            _ => Err(Error::LabelOutOfRange {
                label: p.a.max(p.b),
                num_classes: embeddings.len(),
            }),
        })
        .collect()
}

pub fn verification_from_embeddings(embeddings: &[UnitVector], pairs: &[VerificationPair]) -> Result<VerificationResult> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let sims = pair_similarities(embeddings, pairs)?;
    let same: Vec<bool> = pairs.iter().map(|p| p.same_identity).collect();
    verification_from_similarities(&sims, &same)
}

/// Embeds the holdout set with `model` and sweeps the pair threshold.
pub fn verification_accuracy(
    model: &EmbeddingModel,
    pairs: &[VerificationPair],
    holdout: &NoisyDataset,
) -> Result<VerificationResult> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let embeddings = embed_all(model, holdout)?;
    verification_from_embeddings(&embeddings, pairs)
}

pub fn embed_all(model: &EmbeddingModel, data: &NoisyDataset) -> Result<Vec<UnitVector>> {
    data.inputs.iter().map(|x| normalize(&model.embed(x))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionPoint {
    pub epoch: usize,
    pub detected: usize,
    pub correct: usize,
    pub wrong: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionCurve {
    pub points: Vec<DetectionPoint>,
}

impl DetectionCurve {
    pub fn last(&self) -> Option<&DetectionPoint> {
        self.points.last()
    }

    pub fn max_detected(&self) -> usize {
        self.points.iter().map(|p| p.detected).max().unwrap_or(0)
    }
}

/// Per-epoch precision `correct / max(detected, 1)` and recall
/// `correct / (closed-set entries in the ledger)`.
pub fn detection_curve(log: &MetricsLog, ledger: &NoiseLedger) -> Result<DetectionCurve> {
    if !log.ledger_attached {
        return Err(Error::LedgerMissing);
    }
    let closed = ledger.count(NoiseKind::ClosedSet);
    let points = log
        .epochs
        .iter()
        .map(|e| DetectionPoint {
            epoch: e.epoch,
            detected: e.detected,
            correct: e.correct_corrections,
            wrong: e.wrong_corrections,
            precision: e.correct_corrections as f64 / e.detected.max(1) as f64,
            recall: if closed == 0 {
                0.0
            } else {
                e.correct_corrections as f64 / closed as f64
            },
        })
        .collect();
    Ok(DetectionCurve { points })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleOutcome {
    /// Closed-set flips whose correction restored the original label.
    pub recovered: usize,
    pub flipped: usize,
    /// Unflipped samples that triggered a correction anyway.
    pub false_positives: usize,
    pub detections: usize,
}

impl OracleOutcome {
    /// `recovered / flipped`, or 1 when nothing was flipped.
    pub fn recovery(&self) -> f64 {
        if self.flipped == 0 {
            1.0
        } else {
            self.recovered as f64 / self.flipped as f64
        }
    }
}

/// Runs [`correction_check`] for every sample with the class centers frozen
/// at `centers`.
pub fn oracle_correction_test(
    centers: &[UnitVector],
    data: &NoisyDataset,
    ledger: &NoiseLedger,
    m: f64,
) -> Result<OracleOutcome> {
    let features = data
        .inputs
        .iter()
        .map(|x| normalize(x))
        .collect::<Result<Vec<_>>>()?;
    let rows = cosine_matrix(&features, centers)?;
    let clean = ledger.clean_labels(data.len());
    let noisy = ledger.indices();
    let mut out = OracleOutcome {
        recovered: 0,
        flipped: ledger.count(NoiseKind::ClosedSet),
        false_positives: 0,
        detections: 0,
    };
    for (i, (row, &label)) in rows.iter().zip(&data.labels).enumerate() {
        let Some(k) = correction_check(row, label, m) else {
            continue;
        };
        out.detections += 1;
        match clean[i] {
            Some(orig) if orig != label => {
                if orig == k {
                    out.recovered += 1;
                }
            }
            _ => {
                if !noisy.contains(&i) {
                    out.false_positives += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noisegen::inject_closed_noise;
    use crate::trainer::{EpochMetrics, IterationMetrics};
    use proptest::prelude::*;

    fn pairs(n: usize) -> (Vec<VerificationPair>, Vec<bool>) {
        let p: Vec<_> = (0..n)
            .map(|i| VerificationPair {
                a: 2 * i,
                b: 2 * i + 1,
                same_identity: i % 2 == 0,
            })
            .collect();
        let same = p.iter().map(|p| p.same_identity).collect();
        (p, same)
    }

    #[test]
    fn perfectly_separated() {
        let r = verification_from_similarities(&[1.0, -1.0, 1.0, -1.0], &[true, false, true, false]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.best_threshold, -0.999);
        assert_eq!(r.genuine_mean_cos, 1.0);
        assert_eq!(r.impostor_mean_cos, -1.0);
    }

    #[test]
    fn four_pair_sweep() {
        let r = verification_from_similarities(&[0.8, 0.9, 0.1, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.best_threshold > 0.2 && r.best_threshold <= 0.8);
        assert_eq!(r.best_threshold, 0.201);
    }

    #[test]
    fn empty_pairs_rejected() {
        assert!(matches!(verification_from_similarities(&[], &[]), Err(Error::EmptyPairs)));
        let dummy = NoisyDataset::new(2, vec![vec![1.0]], vec![0]).unwrap();
        let model = EmbeddingModel::new(
            crate::model::ModelShape {
                input_dim: 1,
                hidden_dim: None,
                embed_dim: 2,
                num_classes: 2,
            },
            0,
        )
        .unwrap();
        assert!(matches!(verification_accuracy(&model, &[], &dummy), Err(Error::EmptyPairs)));
    }

    #[test]
    fn random_embeddings_near_chance() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let emb: Vec<UnitVector> = (0..4000)
            .map(|_| {
                let v: Vec<f64> = (0..16).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
                normalize(&v).unwrap()
            })
            .collect();
        let (p, _) = pairs(2000);
        let r = verification_from_embeddings(&emb, &p).unwrap();
        // best of 2001 thresholds on 2000 coin flips stays within a few sigma
        assert!(r.accuracy >= 0.5 && r.accuracy < 0.56, "{r:?}");
    }

    #[test]
    fn detection_curve_examples() {
        let data = NoisyDataset::new(2, vec![vec![1.0]; 1000], vec![0; 1000]).unwrap();
        let (_, ledger) = inject_closed_noise(&data, 0.2, 1).unwrap();
        assert_eq!(ledger.count(NoiseKind::ClosedSet), 200);
        let epoch = |detected, correct| EpochMetrics {
            epoch: 0,
            mean_loss: 0.0,
            lr: 0.1,
            detected,
            correct_corrections: correct,
            wrong_corrections: detected - correct,
            hard_count: 0,
            verification_accuracy: None,
        };
        let mut log = MetricsLog {
            iterations: vec![],
            epochs: vec![epoch(0, 0), epoch(150, 140), epoch(200, 200)],
            ledger_attached: true,
        };
        let c = detection_curve(&log, &ledger).unwrap();
        assert_eq!((c.points[0].precision, c.points[0].recall), (0.0, 0.0));
        assert!((c.points[1].precision - 140.0 / 150.0).abs() < 1e-15);
        assert_eq!(c.points[1].recall, 0.7);
        assert_eq!((c.points[2].precision, c.points[2].recall), (1.0, 1.0));
        assert_eq!(c.max_detected(), 200);

        log.ledger_attached = false;
        assert!(matches!(detection_curve(&log, &ledger), Err(Error::LedgerMissing)));
    }

    #[test]
    fn curve_totals_match_iterations() {
        let its: Vec<IterationMetrics> = (0..6)
            .map(|i| IterationMetrics {
                epoch: i / 3,
                iteration: i,
                loss: 1.0,
                lr: 0.1,
                batch_size: 4,
                detected: i,
                correct_corrections: i / 2,
                wrong_corrections: i - i / 2,
                hard_count: 1,
            })
            .collect();
        let log = MetricsLog {
            epochs: MetricsLog::aggregate_epochs(&its),
            iterations: its.clone(),
            ledger_attached: true,
        };
        let ledger = NoiseLedger::new(vec![]).unwrap();
        let c = detection_curve(&log, &ledger).unwrap();
        let total: usize = c.points.iter().map(|p| p.detected).sum();
        assert_eq!(total, its.iter().map(|i| i.detected).sum::<usize>());
        assert_eq!(c.points[1].correct, 1 + 2 + 2);
    }

    fn orthogonal(n: usize) -> Vec<UnitVector> {
        (0..n)
            .map(|i| {
                let mut v = vec![0.0; n];
                v[i] = 1.0;
                normalize(&v).unwrap()
            })
            .collect()
    }

    fn on_centers(n: usize, per_class: usize) -> NoisyDataset {
        let centers = orthogonal(n);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (c, w) in centers.iter().enumerate() {
            for _ in 0..per_class {
                inputs.push(w.coords().to_vec());
                labels.push(c);
            }
        }
        NoisyDataset::new(n, inputs, labels).unwrap()
    }

    #[test]
    fn oracle_recovers_every_flip() {
        let clean = on_centers(10, 20);
        let (flipped, ledger) = inject_closed_noise(&clean, 0.2, 3).unwrap();
        let out = oracle_correction_test(&orthogonal(10), &flipped, &ledger, 0.5).unwrap();
        assert_eq!(out.flipped, 40);
        assert_eq!(out.recovery(), 1.0);
        assert_eq!(out.false_positives, 0);
        assert_eq!(out.detections, 40);
    }

    #[test]
    fn oracle_without_flips_or_margin() {
        let clean = on_centers(10, 5);
        let empty = NoiseLedger::new(vec![]).unwrap();
        let out = oracle_correction_test(&orthogonal(10), &clean, &empty, 0.5).unwrap();
        assert_eq!((out.recovery(), out.detections), (1.0, 0));
        let out = oracle_correction_test(&orthogonal(10), &clean, &empty, 0.0).unwrap();
        assert_eq!(out.detections, 0);
    }

    #[test]
    fn mean_std_sample_convention() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    /// Best accuracy over every cut between sorted similarities.
    fn brute_force(sims: &[f64], same: &[bool]) -> f64 {
        let mut sorted = sims.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut cuts = vec![f64::NEG_INFINITY, f64::INFINITY];
        cuts.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        cuts.iter()
            .map(|&t| {
                sims.iter()
                    .zip(same)
                    .filter(|(&c, &s)| (c >= t) == s)
                    .count() as f64
                    / sims.len() as f64
            })
            .fold(0.0, f64::max)
    }

    proptest! {
        #[test]
        fn sweep_matches_brute_force(
            cells in prop::collection::vec((-99i32..99, any::<bool>()), 1..60)
        ) {
            // Similarities on a 0.01 lattice shifted off the threshold grid, so
            // every midpoint cut is realized by some grid threshold.
            let sims: Vec<f64> = cells.iter().map(|&(k, _)| k as f64 / 100.0 + 0.0005).collect();
            let same: Vec<bool> = cells.iter().map(|&(_, s)| s).collect();
            let r = verification_from_similarities(&sims, &same).unwrap();
            prop_assert_eq!(r.accuracy, brute_force(&sims, &same));
        }

        #[test]
        fn rescaling_embeddings_is_invisible(
            raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 8),
            scale in 0.01f64..100.0,
        ) {
            prop_assume!(raw.iter().all(|v| crate::hypersphere::norm(v) > 1e-3));
            let (p, _) = pairs(4);
            let a: Vec<UnitVector> = raw.iter().map(|v| normalize(v).unwrap()).collect();
            let b: Vec<UnitVector> = raw
                .iter()
                .map(|v| normalize(&v.iter().map(|x| x * scale).collect::<Vec<_>>()).unwrap())
                .collect();
            let ra = verification_from_embeddings(&a, &p).unwrap();
            let rb = verification_from_embeddings(&b, &p).unwrap();
            prop_assert_eq!(ra.accuracy, rb.accuracy);
        }

        #[test]
        fn balanced_accuracy_at_least_half(
            sims in prop::collection::vec(-1.0f64..1.0, 1..40)
        ) {
            let mut s = sims.clone();
            s.extend(sims.iter().map(|x| -x));
            let same: Vec<bool> = (0..s.len()).map(|i| i < sims.len()).collect();
            let r = verification_from_similarities(&s, &same).unwrap();
            prop_assert!(r.accuracy >= 0.5);
        }
    }
}
