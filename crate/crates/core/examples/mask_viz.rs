//! Trains a small pyramid and writes its attention masks for one validation
//! image as grayscale PNGs.
//!
//! `cargo run --example mask_viz -- masks/`

use std::path::PathBuf;

use dcanet::config::ExperimentConfig;
use dcanet::experiment::{train_and_evaluate, Splits};
use dcanet::viz::{export_masks, VizOptions};
use dcanet::StructureKind;

fn main() -> dcanet::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "masks".into()));
    let mut cfg = ExperimentConfig::default().with_structure(StructureKind::Pyramid);
    cfg.train.max_iter = 150;
    let splits = Splits::from_config(&cfg)?;
    let run = train_and_evaluate(&cfg, &splits, None)?;
    let written = export_masks(&run.model, &splits.val.samples[0].image, &out, &VizOptions::default())?;
    for p in &written.masks {
        println!("{}", p.display());
    }
    println!("{}", written.prediction.display());
    Ok(())
}
