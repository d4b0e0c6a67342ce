//! The five subcommands. Each takes a validated config and returns a small
//! summary; printing is left to the binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use boundaryface::audit::{finite_diff_audit_with, random_case, AuditOptions, CaseShape};
use boundaryface::eval::{detection_curve, mean_std, verification_accuracy};
use boundaryface::heads::{HeadConfig, HeadKind};
use boundaryface::io::{self, fmt_f64, ComparisonRow};
use boundaryface::model::EmbeddingModel;
use boundaryface::noisegen::{corrupt, generate, make_verification_pairs, NoiseKind, NoisyDataset};
use boundaryface::trainer::train;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, HeadSpec};

/// File locations under one output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn train(&self) -> PathBuf {
        self.data_dir().join("train.txt")
    }
    pub fn holdout(&self) -> PathBuf {
        self.data_dir().join("holdout.txt")
    }
    pub fn distractors(&self) -> PathBuf {
        self.data_dir().join("distractors.txt")
    }
    pub fn ledger(&self) -> PathBuf {
        self.data_dir().join("ledger.csv")
    }
    pub fn pairs(&self) -> PathBuf {
        self.data_dir().join("pairs.csv")
    }
    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }
    pub fn checkpoint(&self, run: &str) -> PathBuf {
        self.runs_dir().join(format!("{run}.ckpt"))
    }
    pub fn metrics(&self, run: &str) -> PathBuf {
        self.runs_dir().join(format!("{run}.csv"))
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn comparison(&self) -> PathBuf {
        self.eval_dir().join("comparison.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.eval_dir().join("summary.csv")
    }
    pub fn curve(&self, run: &str) -> PathBuf {
        self.eval_dir().join("curves").join(format!("{run}.csv"))
    }
}

pub fn run_name(head: &HeadSpec, seed: u64) -> String {
    format!("{}_{seed}", head.name())
}

/// Runs `f` on a pool of `jobs` threads (`None`: one per core).
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .context("building thread pool")?;
    Ok(pool.install(f))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSummary {
    pub train: usize,
    pub holdout: usize,
    pub distractors: usize,
    pub closed: usize,
    pub open: usize,
    pub pairs: usize,
    /// Closed-set and open-set index sets share no sample.
    pub disjoint: bool,
}

pub fn gen(cfg: &ExperimentConfig, layout: &Layout) -> Result<GenSummary> {
    let data = generate(&cfg.dataset)?;
    let (noisy, ledger) = corrupt(
        &data.train,
        &data.distractors,
        cfg.noise.closed_ratio,
        cfg.noise.open_ratio,
        cfg.noise.seed,
    )?;
    let pairs = if cfg.dataset.num_holdout_classes > 0 {
        make_verification_pairs(&data.holdout, cfg.eval.num_pairs, cfg.eval.pair_seed)?
    } else {
        Vec::new()
    };

    fs::create_dir_all(layout.data_dir())?;
    io::write_dataset(&layout.train(), &noisy)?;
    io::write_dataset(&layout.holdout(), &data.holdout)?;
    let distractors = NoisyDataset::new(1, data.distractors.clone(), vec![0; data.distractors.len()])?;
    io::write_dataset(&layout.distractors(), &distractors)?;
    io::write_ledger(&layout.ledger(), &ledger)?;
    io::write_pairs(&layout.pairs(), &pairs)?;

    let of = |k| ledger.entries().iter().filter(move |e| e.kind == k).map(|e| e.index);
    let closed: Vec<usize> = of(NoiseKind::ClosedSet).collect();
    let disjoint = of(NoiseKind::OpenSet).all(|i| !closed.contains(&i));
    Ok(GenSummary {
        train: noisy.len(),
        holdout: data.holdout.len(),
        distractors: data.distractors.len(),
        closed: closed.len(),
        open: ledger.count(NoiseKind::OpenSet),
        pairs: pairs.len(),
        disjoint,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run: String,
    pub final_loss: f64,
    pub detected: usize,
}

/// One training run per (head, seed), in parallel on the current pool.
/// Results come back in config order regardless of scheduling.
pub fn train_all(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<RunSummary>> {
    let data = io::read_dataset(&layout.train()).context("reading training set; run `gen` first")?;
    let ledger = io::read_ledger(&layout.ledger())?;
    fs::create_dir_all(layout.runs_dir())?;
    let jobs: Vec<(&HeadSpec, u64)> = cfg
        .heads
        .iter()
        .flat_map(|h| cfg.seeds.iter().map(move |&s| (h, s)))
        .collect();
    jobs.par_iter()
        .map(|&(head, seed)| {
            let run = run_name(head, seed);
            let model = EmbeddingModel::new(cfg.model_shape(), seed)?;
            let (model, log) = train(model, &data, Some(&ledger), &cfg.train_config(head, seed))
                .with_context(|| format!("training {run}"))?;
            io::write_checkpoint(&layout.checkpoint(&run), &model)?;
            io::write_metrics(&layout.metrics(&run), &log)?;
            let last = log.epochs.last();
            Ok(RunSummary {
                final_loss: last.map_or(f64::NAN, |e| e.mean_loss),
                detected: last.map_or(0, |e| e.detected),
                run,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSummary {
    pub head: String,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub rows: Vec<ComparisonRow>,
    pub heads: Vec<HeadSummary>,
    pub curves: Vec<PathBuf>,
}

pub fn eval_all(cfg: &ExperimentConfig, layout: &Layout) -> Result<EvalSummary> {
    let holdout = io::read_dataset(&layout.holdout())?;
    let pairs = io::read_pairs(&layout.pairs())?;
    let ledger = io::read_ledger(&layout.ledger())?;
    let runs: Vec<(&HeadSpec, u64)> = cfg
        .heads
        .iter()
        .flat_map(|h| cfg.seeds.iter().map(move |&s| (h, s)))
        .collect();
    let rows = runs
        .par_iter()
        .map(|&(head, seed)| {
            let run = run_name(head, seed);
            let path = layout.checkpoint(&run);
            let model = io::read_checkpoint(&path).with_context(|| format!("reading {}", path.display()))?;
            let v = verification_accuracy(&model, &pairs, &holdout).with_context(|| format!("evaluating {run}"))?;
            Ok(ComparisonRow {
                run,
                head: head.name(),
                seed,
                accuracy: v.accuracy,
                best_threshold: v.best_threshold,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(layout.eval_dir())?;
    io::write_comparison(&layout.comparison(), &rows)?;

    let heads: Vec<HeadSummary> = cfg
        .heads
        .iter()
        .map(|h| {
            let acc: Vec<f64> = rows.iter().filter(|r| r.head == h.name()).map(|r| r.accuracy).collect();
            let (mean, std) = mean_std(&acc);
            HeadSummary {
                head: h.name(),
                runs: acc.len(),
                mean_accuracy: mean,
                std_accuracy: std,
            }
        })
        .collect();
    write_summary(&layout.summary(), &heads)?;

    let mut curves = Vec::new();
    for (head, seed) in runs {
        let hc = head.build();
        if !(hc.correction_enabled && hc.kind.supports_correction()) {
            continue;
        }
        let run = run_name(head, seed);
        let log = io::read_metrics(&layout.metrics(&run), true)?;
        let curve = detection_curve(&log, &ledger)?;
        let path = layout.curve(&run);
        fs::create_dir_all(path.parent().expect("curve path has a parent"))?;
        io::write_detection_curve(&path, &curve)?;
        curves.push(path);
    }
    Ok(EvalSummary { rows, heads, curves })
}

fn write_summary(path: &Path, heads: &[HeadSummary]) -> Result<()> {
    let mut out = String::from("head,runs,mean_accuracy,std_accuracy\n");
    for h in heads {
        out += &format!(
            "{},{},{},{}\n",
            h.head,
            h.runs,
            fmt_f64(h.mean_accuracy),
            fmt_f64(h.std_accuracy)
        );
    }
    Ok(io::atomic_write(path, out.as_bytes())?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckLine {
    pub head: String,
    pub max_rel_error: f64,
    pub batches: usize,
    pub hard: usize,
    pub corrected: usize,
    pub passed: bool,
}

/// Heads to audit: every kind at its defaults, then any configured head
/// that differs from them.
fn audit_heads(cfg: &ExperimentConfig) -> Vec<(String, HeadConfig)> {
    let mut heads: Vec<(String, HeadConfig)> =
        HeadKind::ALL.iter().map(|&k| (k.name().to_string(), HeadConfig::new(k))).collect();
    for spec in &cfg.heads {
        let h = spec.build();
        if !heads.iter().any(|(_, d)| *d == h) {
            heads.push((spec.name(), h));
        }
    }
    heads
}

pub fn gradcheck(cfg: &ExperimentConfig) -> Result<Vec<GradcheckLine>> {
    let g = &cfg.gradcheck;
    let options = AuditOptions {
        analytic_scale: g.fault_scale,
        ..Default::default()
    };
    let shapes = [
        CaseShape::STANDARD,
        CaseShape {
            hidden_dim: Some(10),
            ..CaseShape::STANDARD
        },
    ];
    audit_heads(cfg)
        .par_iter()
        .map(|(name, head)| {
            let mut line = GradcheckLine {
                head: name.clone(),
                max_rel_error: 0.0,
                batches: 0,
                hard: 0,
                corrected: 0,
                passed: true,
            };
            for shape in shapes {
                for &seed in &g.seeds {
                    let (model, batch) = random_case(shape, seed)?;
                    let r = finite_diff_audit_with(&model, &batch, head, options)?;
                    line.max_rel_error = line.max_rel_error.max(r.max_rel_error);
                    line.batches += 1;
                    line.hard += r.hard_count;
                    line.corrected += r.corrected_count;
                }
            }
            line.passed = line.max_rel_error <= g.tolerance;
            Ok(line)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub closed: f64,
    pub open: f64,
    pub heads: Vec<HeadSummary>,
}

/// gen, train and eval for every (closed, open) pair of the grid. Cells
/// whose ratios sum to 1 or more are skipped.
pub fn sweep(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for &closed in &cfg.sweep.closed {
        for &open in &cfg.sweep.open {
            if closed + open >= 1.0 {
                continue;
            }
            let mut cell_cfg = cfg.clone();
            cell_cfg.noise.closed_ratio = closed;
            cell_cfg.noise.open_ratio = open;
            cell_cfg.validate()?;
            let cell = Layout::new(layout.root.join("sweep").join(format!("closed{closed}_open{open}")));
            gen(&cell_cfg, &cell)?;
            train_all(&cell_cfg, &cell)?;
            let summary = eval_all(&cell_cfg, &cell)?;
            cells.push(SweepCell {
                closed,
                open,
                heads: summary.heads,
            });
        }
    }
    let mut out = String::from("closed,open,head,runs,mean_accuracy,std_accuracy\n");
    for c in &cells {
        for h in &c.heads {
            out += &format!(
                "{},{},{},{},{},{}\n",
                fmt_f64(c.closed),
                fmt_f64(c.open),
                h.head,
                h.runs,
                fmt_f64(h.mean_accuracy),
                fmt_f64(h.std_accuracy)
            );
        }
    }
    fs::create_dir_all(layout.root.join("sweep"))?;
    io::atomic_write(&layout.root.join("sweep").join("summary.csv"), out.as_bytes())?;
    Ok(cells)
}
