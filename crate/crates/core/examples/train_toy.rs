//! Trains one variant on the synthetic dataset and reports validation mIoU.
//!
//! `cargo run --example train_toy -- cascade 300`

use dcanet::config::ExperimentConfig;
use dcanet::experiment::{train_and_evaluate, Splits};
use dcanet::StructureKind;

fn main() -> dcanet::Result<()> {
    let mut args = std::env::args().skip(1);
    let kind: StructureKind = args.next().as_deref().unwrap_or("cascade").parse()?;
    let iters = args.next().and_then(|n| n.parse().ok()).unwrap_or(200);
    let mut cfg = ExperimentConfig::default().with_structure(kind);
    cfg.train.max_iter = iters;
    let splits = Splits::from_config(&cfg)?;
    let run = train_and_evaluate(&cfg, &splits, None)?;
    let losses = &run.summary.losses;
    let window = (iters / 10).max(1);
    for (i, chunk) in losses.chunks(window).enumerate() {
        let mean = chunk.iter().map(|l| l.total).sum::<f64>() / chunk.len() as f64;
        println!("iter {:5}  loss {mean:.4}", i * window);
    }
    println!("{}: val mIoU {:.2}, pixel acc {:.2} ({:.0}s)", kind.name(), 100.0 * run.report.mean_iou, 100.0 * run.report.pixel_acc, run.seconds);
    for (k, iou) in run.report.per_class_iou.iter().enumerate() {
        println!("  class {k}: {}", iou.map_or("-".into(), |v| format!("{:.2}", 100.0 * v)));
    }
    Ok(())
}
