//! Single training runs and the seeded structure-ordering study.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RESOLVED_CONFIG_FILE};
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::infer::evaluate;
use crate::metrics::EvalReport;
use crate::network::Model;
use crate::structures::StructureKind;
use crate::train::{train, RunOutput, TrainSummary};

pub const REPORT_FILE: &str = "report.json";

/// Training and validation data for one experiment.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

impl Splits {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self { train: cfg.data.train_set()?, val: cfg.data.val_set()? })
    }
}

#[derive(Debug)]
pub struct TrainedRun {
    pub model: Model,
    pub summary: TrainSummary,
    pub report: EvalReport,
    pub seconds: f64,
}

/// Builds the model from `cfg` (seeded by `cfg.train.seed`), trains it and
/// evaluates on the validation split with `cfg.eval.scales`. With `out_dir`
/// set, the resolved config, metric log, checkpoints and report are written
/// there.
pub fn train_and_evaluate(cfg: &ExperimentConfig, splits: &Splits, out_dir: Option<&Path>) -> Result<TrainedRun> {
    cfg.validate()?;
    let start = Instant::now();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        cfg.save(&dir.join(RESOLVED_CONFIG_FILE))?;
    }
    let mut model = Model::build(&cfg.model, cfg.train.seed)?;
    let output = RunOutput { dir: out_dir.map(Path::to_path_buf), config: serde_json::to_value(cfg)? };
    let summary = train(&mut model, &splits.train, &cfg.train, &output)?;
    let cm = evaluate(&model, &splits.val, &cfg.eval.scales, cfg.eval.batch_size)?;
    let report = EvalReport::from_matrix(&cm, cfg.digest())?;
    if let Some(dir) = out_dir {
        fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(TrainedRun { model, summary, report, seconds: start.elapsed().as_secs_f64() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: StructureKind,
    pub seed: u64,
    /// Validation mIoU in [0, 1]; `None` when the run aborted.
    pub mean_iou: Option<f64>,
    pub error: Option<String>,
    pub checkpoint_digest: Option<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: StructureKind,
    pub median: Option<f64>,
    /// One entry per seed, in seed order.
    pub mean_ious: Vec<Option<f64>>,
}

/// Seeds on which `a` scored strictly higher than `b`, and the reverse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseWins {
    pub a: StructureKind,
    pub b: StructureKind,
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<VariantRow>,
    pub wins: Vec<PairwiseWins>,
    /// Set when any run aborted; medians then cover the finished runs only.
    pub incomplete: bool,
    pub runs: Vec<RunRecord>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => None,
        n if n % 2 == 1 => Some(v[n / 2]),
        n => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
    }
}

impl OrderingTable {
    pub fn from_runs(variants: &[StructureKind], seeds: &[u64], runs: Vec<RunRecord>) -> Self {
        let score = |v: StructureKind, s: u64| runs.iter().find(|r| r.variant == v && r.seed == s).and_then(|r| r.mean_iou);
        let rows: Vec<VariantRow> = variants
            .iter()
            .map(|&v| {
                let mean_ious: Vec<Option<f64>> = seeds.iter().map(|&s| score(v, s)).collect();
                let done: Vec<f64> = mean_ious.iter().flatten().copied().collect();
                VariantRow { variant: v, median: median(&done), mean_ious }
            })
            .collect();
        let mut wins = Vec::new();
        for (i, &a) in variants.iter().enumerate() {
            for &b in &variants[i + 1..] {
                let mut w = PairwiseWins { a, b, a_wins: 0, b_wins: 0, ties: 0 };
                for &s in seeds {
                    if let (Some(x), Some(y)) = (score(a, s), score(b, s)) {
                        match x.total_cmp(&y) {
                            std::cmp::Ordering::Greater => w.a_wins += 1,
                            std::cmp::Ordering::Less => w.b_wins += 1,
                            std::cmp::Ordering::Equal => w.ties += 1,
                        }
                    }
                }
                wins.push(w);
            }
        }
        let incomplete = runs.iter().any(|r| r.mean_iou.is_none());
        Self { seeds: seeds.to_vec(), rows, wins, incomplete, runs }
    }

    pub fn row(&self, variant: StructureKind) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn median(&self, variant: StructureKind) -> Option<f64> {
        self.row(variant).and_then(|r| r.median)
    }

    /// Seeds on which `low < mid < high` holds strictly.
    pub fn strictly_between(&self, low: StructureKind, mid: StructureKind, high: StructureKind) -> usize {
        let (Some(l), Some(m), Some(h)) = (self.row(low), self.row(mid), self.row(high)) else { return 0 };
        (0..self.seeds.len())
            .filter(|&i| matches!((l.mean_ious[i], m.mean_ious[i], h.mean_ious[i]), (Some(a), Some(b), Some(c)) if a < b && b < c))
            .count()
    }
}

impl fmt::Display for OrderingTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: Option<f64>| v.map_or_else(|| "  --  ".to_string(), |x| format!("{:6.2}", 100.0 * x));
        write!(f, "{:<9} {:>6}", "variant", "median")?;
        for s in &self.seeds {
            write!(f, " {:>6}", format!("s{s}"))?;
        }
        writeln!(f)?;
        for r in &self.rows {
            write!(f, "{:<9} {}", r.variant.name(), pct(r.median))?;
            for &v in &r.mean_ious {
                write!(f, " {}", pct(v))?;
            }
            writeln!(f)?;
        }
        for w in &self.wins {
            writeln!(f, "{} vs {}: {}-{} ({} ties)", w.a.name(), w.b.name(), w.a_wins, w.b_wins, w.ties)?;
        }
        if self.incomplete {
            writeln!(f, "ordering incomplete: at least one run aborted")?;
        }
        Ok(())
    }
}

/// Trains every variant once per seed on the same splits and tabulates
/// validation mIoU. Runs that fail are recorded and mark the table
/// incomplete instead of aborting the study. With `out_root` set, run
/// artifacts go to `out_root/<variant>/seed<k>`.
pub fn run_ordering_experiment(
    variants: &[StructureKind],
    base: &ExperimentConfig,
    splits: &Splits,
    seeds: &[u64],
    out_root: Option<&Path>,
) -> Result<OrderingTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(invalid("need at least one variant and one seed"));
    }
    for (i, v) in variants.iter().enumerate() {
        if variants[..i].contains(v) {
            return Err(invalid(format!("variant {} listed twice", v.name())));
        }
    }
    if seeds.len() < 3 {
        log::warn!("only {} seed(s); medians over fewer than 3 seeds are not meaningful", seeds.len());
    }
    let mut runs = Vec::with_capacity(variants.len() * seeds.len());
    for &variant in variants {
        for &seed in seeds {
            let cfg = base.clone().with_structure(variant).with_seed(seed);
            let dir: Option<PathBuf> = out_root.map(|r| r.join(variant.name()).join(format!("seed{seed}")));
            let start = Instant::now();
            let record = match train_and_evaluate(&cfg, splits, dir.as_deref()) {
                Ok(run) => RunRecord {
                    variant,
                    seed,
                    mean_iou: Some(run.report.mean_iou),
                    error: None,
                    checkpoint_digest: run.summary.final_digest,
                    seconds: run.seconds,
                },
                Err(e) => {
                    log::warn!("{} seed {seed} aborted: {e}", variant.name());
                    RunRecord {
                        variant,
                        seed,
                        mean_iou: None,
                        error: Some(e.to_string()),
                        checkpoint_digest: None,
                        seconds: start.elapsed().as_secs_f64(),
                    }
                }
            };
            log::info!("{} seed {seed}: mIoU {:?} in {:.0}s", variant.name(), record.mean_iou, record.seconds);
            runs.push(record);
        }
    }
    Ok(OrderingTable::from_runs(variants, seeds, runs))
}
