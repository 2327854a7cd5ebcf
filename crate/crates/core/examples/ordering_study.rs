//! The variant ordering study at reduced length: every structure trained on
//! the same splits for several seeds, then medians and pairwise wins.
//!
//! `cargo run --example ordering_study -- 300 3`

use dcanet::config::ExperimentConfig;
use dcanet::experiment::{run_ordering_experiment, Splits};
use dcanet::StructureKind;

fn main() -> dcanet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let iters = args.next().and_then(|n| n.parse().ok()).unwrap_or(200);
    let num_seeds: u64 = args.next().and_then(|n| n.parse().ok()).unwrap_or(3);
    let mut base = ExperimentConfig::default();
    base.train.max_iter = iters;
    base.model.structure.semantic_supervision = false;
    let splits = Splits::from_config(&base)?;
    let variants = [StructureKind::None, StructureKind::Crs, StructureKind::Cascade, StructureKind::Pyramid];
    let seeds: Vec<u64> = (0..num_seeds).collect();
    let table = run_ordering_experiment(&variants, &base, &splits, &seeds, None)?;
    for row in &table.rows {
        let runs: Vec<String> = row.mean_ious.iter().map(|m| m.map_or("fail".into(), |v| format!("{:.1}", 100.0 * v))).collect();
        println!("{:8} median {:6}  runs [{}]", row.variant.name(), row.median.map_or("n/a".into(), |m| format!("{:.2}", 100.0 * m)), runs.join(", "));
    }
    for w in &table.wins {
        println!("{} vs {}: {}-{} ({} ties)", w.a.name(), w.b.name(), w.a_wins, w.b_wins, w.ties);
    }
    let between = table.strictly_between(StructureKind::None, StructureKind::Crs, StructureKind::Cascade);
    println!("crs strictly between none and cascade in {between}/{} seeds", seeds.len());
    Ok(())
}
