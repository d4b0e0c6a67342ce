//! Experiment configuration: one JSON file plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use boundaryface::heads::{HeadConfig, HeadKind, MarginOverflow};
use boundaryface::model::ModelShape;
use boundaryface::noisegen::DatasetSpec;
use boundaryface::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Default output root when `output_dir` is relative.
pub const OUTPUT_ENV: &str = "BOUNDARYFACE_OUTPUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    pub heads: Vec<HeadSpec>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub closed_ratio: f64,
    pub open_ratio: f64,
    pub seed: u64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            closed_ratio: 0.2,
            open_ratio: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: Some(128),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub warmup_epochs: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_milestones: Option<Vec<usize>>,
    pub persistent_correction: bool,
    pub correction_during_warmup: bool,
    pub regularizer_during_warmup: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(HeadConfig::new(HeadKind::ArcFace), 30);
        Self {
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_milestones: t.lr_milestones,
            persistent_correction: t.persistent_correction,
            correction_during_warmup: t.correction_during_warmup,
            regularizer_during_warmup: t.regularizer_during_warmup,
        }
    }
}

/// A head to compare. Unset fields take the per-kind defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// Run-name prefix; defaults to the kind name.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub s: Option<f64>,
    #[serde(default)]
    pub m: Option<f64>,
    #[serde(default)]
    pub t: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub focal_gamma: Option<f64>,
    #[serde(default)]
    pub correction_enabled: Option<bool>,
    #[serde(default)]
    pub ema_alpha: Option<f64>,
    #[serde(default)]
    pub margin_overflow: Option<MarginOverflow>,
}

impl HeadSpec {
    pub fn of(kind: HeadKind) -> Self {
        Self {
            kind,
            name: None,
            s: None,
            m: None,
            t: None,
            lambda: None,
            focal_gamma: None,
            correction_enabled: None,
            ema_alpha: None,
            margin_overflow: None,
        }
    }

    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    pub fn build(&self) -> HeadConfig {
        let mut h = HeadConfig::new(self.kind);
        if let Some(v) = self.s {
            h.s = v;
        }
        if let Some(v) = self.m {
            h.m = v;
        }
        if self.t.is_some() {
            h.t = self.t;
        }
        if let Some(v) = self.lambda {
            h.lambda = v;
        }
        if let Some(v) = self.focal_gamma {
            h.focal_gamma = v;
        }
        if let Some(v) = self.correction_enabled {
            h.correction_enabled = v;
        }
        if let Some(v) = self.ema_alpha {
            h.ema_alpha = v;
        }
        if let Some(v) = self.margin_overflow {
            h.margin_overflow = v;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Genuine pairs; the same number of impostor pairs is drawn.
    pub num_pairs: usize,
    pub pair_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            num_pairs: 1000,
            pair_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub closed: Vec<f64>,
    pub open: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            closed: vec![0.0, 0.1, 0.2, 0.3],
            open: vec![0.0, 0.1, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub seeds: Vec<u64>,
    pub tolerance: f64,
    /// Multiplies the analytic gradients; anything but 1 is a negative
    /// control that must FAIL.
    pub fault_scale: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            tolerance: boundaryface::audit::DEFAULT_TOLERANCE,
            fault_scale: 1.0,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec {
                num_classes: 20,
                samples_per_class: 200,
                input_dim: 64,
                concentration: 4.0,
                num_distractor_classes: 10,
                num_holdout_classes: 20,
                seed: 0,
            },
            noise: NoiseSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            heads: vec![HeadSpec::of(HeadKind::ArcFace), HeadSpec::of(HeadKind::BoundaryFace)],
            seeds: vec![1, 2, 3],
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            gradcheck: GradcheckSection::default(),
            output_dir: default_output_dir(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or the defaults when `None`) and applies `key=value`
    /// overrides on dotted paths. Values parse as JSON, falling back to a
    /// plain string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => serde_json::to_value(Self::default())?,
        };
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .with_context(|| format!("override '{o}' is not key=value"))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, v).with_context(|| format!("applying override '{o}'"))?;
        }
        let cfg: Self = serde_json::from_value(value).context("invalid experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let n = &self.noise;
        if !(0.0..1.0).contains(&n.closed_ratio) || !(0.0..1.0).contains(&n.open_ratio) {
            bail!("noise ratios must lie in [0, 1)");
        }
        if n.closed_ratio + n.open_ratio >= 1.0 {
            bail!("closed_ratio + open_ratio must be below 1");
        }
        if self.heads.is_empty() {
            bail!("at least one head is required");
        }
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        let mut names: Vec<String> = self.heads.iter().map(HeadSpec::name).collect();
        if let Some(bad) = names
            .iter()
            .find(|n| n.is_empty() || !n.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)))
        {
            bail!("head name '{bad}' may only use ASCII letters, digits, '-', '_' and '.'");
        }
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            bail!("head names must be unique; set `name` to tell same-kind heads apart");
        }
        for h in &self.heads {
            self.train_config(h, self.seeds[0]).validate()?;
        }
        Ok(())
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            input_dim: self.dataset.input_dim,
            hidden_dim: self.model.hidden_dim,
            embed_dim: self.model.embed_dim,
            num_classes: self.dataset.num_classes,
        }
    }

    pub fn train_config(&self, head: &HeadSpec, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            head: head.build(),
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_milestones: t.lr_milestones.clone(),
            seed,
            persistent_correction: t.persistent_correction,
            correction_during_warmup: t.correction_during_warmup,
            regularizer_during_warmup: t.regularizer_during_warmup,
        }
    }

    /// `output_dir`, resolved against `$BOUNDARYFACE_OUTPUT` when relative.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), v);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().with_context(|| format!("'{part}' is not an array index"))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .with_context(|| format!("index {idx} out of range (length {len})"))?;
                if last {
                    *slot = v;
                    return Ok(());
                }
                slot
            }
            Value::Null if !last => {
                *cur = Value::Object(Default::default());
                match cur {
                    Value::Object(map) => map
                        .entry(part.to_string())
                        .or_insert_with(|| Value::Object(Default::default())),
                    _ => unreachable!(),
                }
            }
            _ => bail!("'{part}' does not index into a scalar"),
        };
    }
    bail!("empty key")
}
