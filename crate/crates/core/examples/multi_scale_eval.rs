//! Trains a cascade briefly, then compares single-scale and 7-scale inference
//! on the validation split.

use std::time::Instant;

use dcanet::config::ExperimentConfig;
use dcanet::experiment::{train_and_evaluate, Splits};
use dcanet::infer::{evaluate, DEFAULT_SCALES};

fn main() -> dcanet::Result<()> {
    let iters = std::env::args().nth(1).and_then(|n| n.parse().ok()).unwrap_or(200);
    let mut cfg = ExperimentConfig::default();
    cfg.train.max_iter = iters;
    let splits = Splits::from_config(&cfg)?;
    let run = train_and_evaluate(&cfg, &splits, None)?;
    for scales in [&[1.0][..], &[0.75, 1.0, 1.25], &DEFAULT_SCALES] {
        let start = Instant::now();
        let cm = evaluate(&run.model, &splits.val, scales, 10)?;
        println!("scales {scales:?}: mIoU {:.2} ({:.1}s)", 100.0 * cm.mean_iou()?, start.elapsed().as_secs_f64());
    }
    Ok(())
}
