//! Synthetic labeled data on the unit sphere with injectable label noise.
//!
//! Class centers are normalized Gaussian draws; a sample is
//! `normalize(center + N(0, σ²I))` with `σ = 1 / concentration`. Closed-set
//! noise flips a label to a uniformly chosen other class; open-set noise
//! swaps the input for a distractor drawn from classes outside the label
//! set and keeps the label. Every corruption is recorded in a
//! [`NoiseLedger`].

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypersphere::{normalize, UnitVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Inverse per-coordinate noise scale; `f64::INFINITY` gives zero spread.
    pub concentration: f64,
    #[serde(default)]
    pub num_distractor_classes: usize,
    #[serde(default)]
    pub num_holdout_classes: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive");
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        if !(self.concentration > 0.0) {
            return bad("concentration must be positive");
        }
        Ok(())
    }

    fn spread(&self) -> f64 {
        1.0 / self.concentration
    }
}

/// Inputs with labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyDataset {
    pub num_classes: usize,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl NoisyDataset {
    pub fn new(num_classes: usize, inputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                found: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        if let Some(first) = inputs.first() {
            if let Some(v) = inputs.iter().find(|v| v.len() != first.len()) {
                return Err(Error::DimensionMismatch {
                    expected: first.len(),
                    found: v.len(),
                });
            }
        }
        Ok(Self {
            num_classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by[l].push(i);
        }
        by
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedData {
    pub train: NoisyDataset,
    pub holdout: NoisyDataset,
    pub distractors: Vec<Vec<f64>>,
    pub train_centers: Vec<UnitVector>,
    pub holdout_centers: Vec<UnitVector>,
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> UnitVector {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = normalize(&v) {
            return u;
        }
    }
}

fn sample_around(rng: &mut ChaCha8Rng, center: &UnitVector, spread: f64) -> Vec<f64> {
    if spread == 0.0 {
        return center.coords().to_vec();
    }
    loop {
        let v: Vec<f64> = center
            .coords()
            .iter()
            .map(|&c| c + spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Ok(u) = normalize(&v) {
            return u.into_inner();
        }
    }
}

fn sample_classes(rng: &mut ChaCha8Rng, centers: &[UnitVector], per_class: usize, spread: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut inputs = Vec::with_capacity(centers.len() * per_class);
    let mut labels = Vec::with_capacity(centers.len() * per_class);
    for (label, c) in centers.iter().enumerate() {
        for _ in 0..per_class {
            inputs.push(sample_around(rng, c, spread));
            labels.push(label);
        }
    }
    (inputs, labels)
}

/// Draws training, holdout and distractor sets with clean labels.
///
/// Draw order is fixed (train centers, holdout centers, distractor centers,
/// then the samples of each set in class order) so a seed pins the output.
pub fn generate(spec: &DatasetSpec) -> Result<GeneratedData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.input_dim;
    let train_centers: Vec<UnitVector> = (0..spec.num_classes).map(|_| random_direction(&mut rng, dim)).collect();
    let holdout_centers: Vec<UnitVector> = (0..spec.num_holdout_classes)
        .map(|_| random_direction(&mut rng, dim))
        .collect();
    let distractor_centers: Vec<UnitVector> = (0..spec.num_distractor_classes)
        .map(|_| random_direction(&mut rng, dim))
        .collect();

    let spread = spec.spread();
    let (inputs, labels) = sample_classes(&mut rng, &train_centers, spec.samples_per_class, spread);
    let train = NoisyDataset::new(spec.num_classes, inputs, labels)?;
    let (inputs, labels) = sample_classes(&mut rng, &holdout_centers, spec.samples_per_class, spread);
    let holdout = NoisyDataset::new(spec.num_holdout_classes, inputs, labels)?;
    let (distractors, _) = sample_classes(&mut rng, &distractor_centers, spec.samples_per_class, spread);

    Ok(GeneratedData {
        train,
        holdout,
        distractors,
        train_centers,
        holdout_centers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    ClosedSet,
    OpenSet,
}

/// One corrupted sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub index: usize,
    pub kind: NoiseKind,
    /// The clean label (closed-set only).
    pub original_label: Option<usize>,
    pub assigned_label: usize,
    /// Which distractor replaced the input (open-set only).
    pub distractor_index: Option<usize>,
}

/// Ground truth of every injected corruption. No index appears twice.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NoiseLedger {
    entries: Vec<NoiseEntry>,
}

impl NoiseLedger {
    pub fn new(entries: Vec<NoiseEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.index) {
                return Err(Error::Parse(format!("index {} corrupted twice", e.index)));
            }
            if e.kind == NoiseKind::ClosedSet && e.original_label == Some(e.assigned_label) {
                return Err(Error::Parse(format!("closed-set entry {} does not change its label", e.index)));
            }
            if e.kind == NoiseKind::ClosedSet && e.original_label.is_none() {
                return Err(Error::Parse(format!("closed-set entry {} has no original label", e.index)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[NoiseEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, kind: NoiseKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    pub fn indices(&self) -> HashSet<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }

    /// Per-sample clean label for closed-set entries, `None` elsewhere.
    pub fn clean_labels(&self, len: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; len];
        for e in &self.entries {
            if e.kind == NoiseKind::ClosedSet && e.index < len {
                out[e.index] = e.original_label;
            }
        }
        out
    }

    /// Concatenates two ledgers over disjoint index sets.
    pub fn merge(&self, other: &NoiseLedger) -> Result<NoiseLedger> {
        let mut entries = self.entries.clone();
        entries.extend(other.entries.iter().cloned());
        NoiseLedger::new(entries)
    }

    /// Labels of `noisy` with every closed-set flip undone.
    pub fn restore_labels(&self, noisy: &NoisyDataset) -> Vec<usize> {
        let mut labels = noisy.labels.clone();
        for e in &self.entries {
            if let (NoiseKind::ClosedSet, Some(orig)) = (e.kind, e.original_label) {
                labels[e.index] = orig;
            }
        }
        labels
    }

    /// Replays the recorded corruptions onto `data`.
    pub fn apply(&self, data: &NoisyDataset, distractors: &[Vec<f64>]) -> Result<NoisyDataset> {
        let mut out = data.clone();
        for e in &self.entries {
            if e.index >= out.len() {
                return Err(Error::Parse(format!("ledger index {} out of range", e.index)));
            }
            match e.kind {
                NoiseKind::ClosedSet => out.labels[e.index] = e.assigned_label,
                NoiseKind::OpenSet => {
                    let d = e.distractor_index.ok_or_else(|| {
                        Error::Parse(format!("open-set entry {} has no distractor", e.index))
                    })?;
                    out.inputs[e.index] = distractors
                        .get(d)
                        .ok_or(Error::InsufficientDistractors {
                            needed: d + 1,
                            available: distractors.len(),
                        })?
                        .clone();
                }
            }
        }
        Ok(out)
    }
}

fn noise_count(ratio: f64, len: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidSpec(format!("noise ratio {ratio} outside [0, 1)")));
    }
    Ok((ratio * len as f64).round() as usize)
}

/// Uniformly chooses `count` indices of `data` outside `avoid`, sorted.
fn choose_indices(rng: &mut ChaCha8Rng, len: usize, count: usize, avoid: &NoiseLedger) -> Result<Vec<usize>> {
    let taken = avoid.indices();
    let pool: Vec<usize> = (0..len).filter(|i| !taken.contains(i)).collect();
    if count > pool.len() {
        return Err(Error::InvalidSpec(format!(
            "cannot corrupt {count} samples, only {} untouched",
            pool.len()
        )));
    }
    let mut chosen: Vec<usize> = index::sample(rng, pool.len(), count).into_iter().map(|k| pool[k]).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Flips `round(ratio · |data|)` labels, chosen uniformly without
/// replacement, each to a uniformly random different class.
pub fn inject_closed_noise(data: &NoisyDataset, ratio: f64, seed: u64) -> Result<(NoisyDataset, NoiseLedger)> {
    inject_closed_noise_avoiding(data, ratio, seed, &NoiseLedger::default())
}

/// [`inject_closed_noise`] restricted to indices not already in `avoid`.
pub fn inject_closed_noise_avoiding(
    data: &NoisyDataset,
    ratio: f64,
    seed: u64,
    avoid: &NoiseLedger,
) -> Result<(NoisyDataset, NoiseLedger)> {
    let count = noise_count(ratio, data.len())?;
    if count > 0 && data.num_classes < 2 {
        return Err(Error::InvalidSpec("label flips need at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = choose_indices(&mut rng, data.len(), count, avoid)?;
    let mut out = data.clone();
    let mut entries = Vec::with_capacity(count);
    for i in chosen {
        let orig = data.labels[i];
        let mut new = rng.gen_range(0..data.num_classes - 1);
        if new >= orig {
            new += 1;
        }
        out.labels[i] = new;
        entries.push(NoiseEntry {
            index: i,
            kind: NoiseKind::ClosedSet,
            original_label: Some(orig),
            assigned_label: new,
            distractor_index: None,
        });
    }
    Ok((out, NoiseLedger::new(entries)?))
}

/// Replaces the inputs of `round(ratio · |data|)` samples with distinct
/// distractor inputs; labels are kept.
pub fn inject_open_noise(
    data: &NoisyDataset,
    ratio: f64,
    distractors: &[Vec<f64>],
    seed: u64,
) -> Result<(NoisyDataset, NoiseLedger)> {
    inject_open_noise_avoiding(data, ratio, distractors, seed, &NoiseLedger::default())
}

pub fn inject_open_noise_avoiding(
    data: &NoisyDataset,
    ratio: f64,
    distractors: &[Vec<f64>],
    seed: u64,
    avoid: &NoiseLedger,
) -> Result<(NoisyDataset, NoiseLedger)> {
    let count = noise_count(ratio, data.len())?;
    if distractors.len() < count {
        return Err(Error::InsufficientDistractors {
            needed: count,
            available: distractors.len(),
        });
    }
    if count > 0 && distractors[0].len() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            found: distractors[0].len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = choose_indices(&mut rng, data.len(), count, avoid)?;
    let sources = index::sample(&mut rng, distractors.len(), count).into_vec();
    let mut out = data.clone();
    let entries = chosen
        .into_iter()
        .zip(sources)
        .map(|(i, d)| {
            out.inputs[i] = distractors[d].clone();
            NoiseEntry {
                index: i,
                kind: NoiseKind::OpenSet,
                original_label: None,
                assigned_label: data.labels[i],
                distractor_index: Some(d),
            }
        })
        .collect();
    Ok((out, NoiseLedger::new(entries)?))
}

/// Closed-set flips first, then open-set replacement on the remaining
/// indices, so the two corruption sets are disjoint.
pub fn corrupt(
    clean: &NoisyDataset,
    distractors: &[Vec<f64>],
    closed_ratio: f64,
    open_ratio: f64,
    seed: u64,
) -> Result<(NoisyDataset, NoiseLedger)> {
    if closed_ratio + open_ratio >= 1.0 {
        return Err(Error::InvalidSpec(format!(
            "closed ({closed_ratio}) + open ({open_ratio}) noise must stay below 1"
        )));
    }
    let (flipped, closed) = inject_closed_noise(clean, closed_ratio, seed)?;
    let (noisy, open) = inject_open_noise_avoiding(&flipped, open_ratio, distractors, seed.wrapping_add(1), &closed)?;
    Ok((noisy, closed.merge(&open)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub same_identity: bool,
}

/// `num_pairs` genuine pairs followed by `num_pairs` impostor pairs.
///
/// Genuine: a class with at least two samples, then two distinct samples of
/// it. Impostor: two distinct classes, one sample from each.
pub fn make_verification_pairs(holdout: &NoisyDataset, num_pairs: usize, seed: u64) -> Result<Vec<VerificationPair>> {
    if num_pairs == 0 {
        return Err(Error::EmptyPairs);
    }
    let by_class = holdout.indices_by_class();
    let populated: Vec<&Vec<usize>> = by_class.iter().filter(|v| !v.is_empty()).collect();
    let multi: Vec<&Vec<usize>> = by_class.iter().filter(|v| v.len() >= 2).collect();
    if multi.len() < 2 || populated.len() < 2 {
        return Err(Error::InsufficientHoldout);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(2 * num_pairs);
    for _ in 0..num_pairs {
        let class = multi[rng.gen_range(0..multi.len())];
        let picked = index::sample(&mut rng, class.len(), 2);
        pairs.push(VerificationPair {
            a: class[picked.index(0)],
            b: class[picked.index(1)],
            same_identity: true,
        });
    }
    for _ in 0..num_pairs {
        let classes = index::sample(&mut rng, populated.len(), 2);
        let (ca, cb) = (populated[classes.index(0)], populated[classes.index(1)]);
        pairs.push(VerificationPair {
            a: ca[rng.gen_range(0..ca.len())],
            b: cb[rng.gen_range(0..cb.len())],
            same_identity: false,
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypersphere::{dot, norm};

    fn spec() -> DatasetSpec {
        DatasetSpec {
            num_classes: 10,
            samples_per_class: 100,
            input_dim: 32,
            concentration: 4.0,
            num_distractor_classes: 5,
            num_holdout_classes: 4,
            seed: 7,
        }
    }

    #[test]
    fn zero_spread_samples_sit_on_centers() {
        let g = generate(&DatasetSpec {
            concentration: f64::INFINITY,
            ..spec()
        })
        .unwrap();
        for (x, &l) in g.train.inputs.iter().zip(&g.train.labels) {
            assert_eq!(x.as_slice(), g.train_centers[l].coords());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&spec()).unwrap();
        let b = generate(&spec()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.holdout, b.holdout);
        assert_eq!(a.distractors, b.distractors);
        let c = generate(&DatasetSpec { seed: 8, ..spec() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn within_class_cosine_exceeds_between_class() {
        let g = generate(&spec()).unwrap();
        let (x, y) = (&g.train.inputs, &g.train.labels);
        let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for i in (0..x.len()).step_by(7) {
            for j in (i + 1..x.len()).step_by(5) {
                let c = dot(&x[i], &x[j]);
                if y[i] == y[j] {
                    within += c;
                    nw += 1;
                } else {
                    between += c;
                    nb += 1;
                }
            }
        }
        let (within, between) = (within / nw as f64, between / nb as f64);
        assert!(within > between + 0.1, "within {within} between {between}");
    }

    #[test]
    fn all_inputs_unit_norm() {
        let g = generate(&spec()).unwrap();
        for v in g.train.inputs.iter().chain(&g.holdout.inputs).chain(&g.distractors) {
            assert!((norm(v) - 1.0).abs() < 1e-12);
        }
        assert_eq!(g.distractors.len(), 5 * 100);
        assert_eq!(g.holdout.len(), 4 * 100);
        assert_eq!(g.holdout.num_classes, 4);
    }

    #[test]
    fn invalid_spec_rejected() {
        for bad in [
            DatasetSpec { num_classes: 1, ..spec() },
            DatasetSpec { samples_per_class: 0, ..spec() },
            DatasetSpec { concentration: 0.0, ..spec() },
            DatasetSpec { input_dim: 0, ..spec() },
        ] {
            assert!(matches!(generate(&bad), Err(Error::InvalidSpec(_))));
        }
    }

    #[test]
    fn closed_noise_counts_and_conservation() {
        let g = generate(&spec()).unwrap();
        let (same, ledger) = inject_closed_noise(&g.train, 0.0, 1).unwrap();
        assert_eq!(same, g.train);
        assert!(ledger.is_empty());

        let (noisy, ledger) = inject_closed_noise(&g.train, 0.2, 1).unwrap();
        assert_eq!(ledger.len(), 200);
        assert_eq!(ledger.count(NoiseKind::ClosedSet), 200);
        for e in ledger.entries() {
            assert_ne!(e.original_label, Some(e.assigned_label));
            assert_eq!(noisy.labels[e.index], e.assigned_label);
        }
        let changed = noisy.labels.iter().zip(&g.train.labels).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 200);
        assert_eq!(noisy.label_histogram().iter().sum::<usize>(), g.train.len());
        assert_eq!(ledger.restore_labels(&noisy), g.train.labels);
    }

    #[test]
    fn open_noise_replaces_inputs() {
        let g = generate(&spec()).unwrap();
        let (same, ledger) = inject_open_noise(&g.train, 0.0, &g.distractors, 3).unwrap();
        assert_eq!(same, g.train);
        assert!(ledger.is_empty());

        let (noisy, ledger) = inject_open_noise(&g.train, 0.2, &g.distractors, 3).unwrap();
        assert_eq!(noisy.labels, g.train.labels);
        let mut used = HashSet::new();
        for e in ledger.entries() {
            assert_ne!(noisy.inputs[e.index], g.train.inputs[e.index]);
            assert!(used.insert(e.distractor_index.unwrap()));
        }
    }

    #[test]
    fn open_noise_needs_enough_distractors() {
        let g = generate(&spec()).unwrap();
        assert!(matches!(
            inject_open_noise(&g.train, 0.9, &g.distractors, 3),
            Err(Error::InsufficientDistractors {
                needed: 900,
                available: 500
            })
        ));
    }

    #[test]
    fn mixed_noise_partitions_indices() {
        let g = generate(&spec()).unwrap();
        let (_, ledger) = corrupt(&g.train, &g.distractors, 0.2, 0.2, 11).unwrap();
        assert_eq!(ledger.count(NoiseKind::ClosedSet), 200);
        assert_eq!(ledger.count(NoiseKind::OpenSet), 200);
        assert_eq!(ledger.indices().len(), 400);
        assert!(corrupt(&g.train, &g.distractors, 0.6, 0.4, 11).is_err());
    }

    #[test]
    fn disjoint_injections_commute() {
        let g = generate(&spec()).unwrap();
        let (_, closed) = inject_closed_noise(&g.train, 0.2, 5).unwrap();
        let (_, open) = inject_open_noise_avoiding(&g.train, 0.2, &g.distractors, 6, &closed).unwrap();
        let a = open.apply(&closed.apply(&g.train, &g.distractors).unwrap(), &g.distractors).unwrap();
        let b = closed.apply(&open.apply(&g.train, &g.distractors).unwrap(), &g.distractors).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ledger_rejects_duplicates() {
        let e = NoiseEntry {
            index: 3,
            kind: NoiseKind::OpenSet,
            original_label: None,
            assigned_label: 1,
            distractor_index: Some(0),
        };
        assert!(NoiseLedger::new(vec![e.clone(), e]).is_err());
    }

    #[test]
    fn verification_pairs_respect_identity() {
        let g = generate(&spec()).unwrap();
        let pairs = make_verification_pairs(&g.holdout, 50, 9).unwrap();
        assert_eq!(pairs.len(), 100);
        assert_eq!(pairs.iter().filter(|p| p.same_identity).count(), 50);
        for p in &pairs {
            assert_ne!(p.a, p.b);
            let same = g.holdout.labels[p.a] == g.holdout.labels[p.b];
            assert_eq!(same, p.same_identity);
        }
        assert_eq!(pairs, make_verification_pairs(&g.holdout, 50, 9).unwrap());
    }

    #[test]
    fn verification_pairs_need_holdout() {
        let one_class = NoisyDataset::new(1, vec![vec![1.0]; 3], vec![0; 3]).unwrap();
        assert!(matches!(
            make_verification_pairs(&one_class, 5, 1),
            Err(Error::InsufficientHoldout)
        ));
    }
}
