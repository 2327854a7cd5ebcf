//! Generates the seeded synthetic shapes dataset and writes it to disk.
//!
//! `cargo run --example synth_dataset -- out/shapes 200`

use std::path::PathBuf;

use dcanet::data::{generate_synth_dataset, save_dataset, SynthSpec};

fn main() -> dcanet::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "shapes".into()));
    let num_images = args.next().and_then(|n| n.parse().ok()).unwrap_or(40);
    let spec = SynthSpec { num_images, ..SynthSpec::default() };
    let ds = generate_synth_dataset(&spec)?;
    save_dataset(&ds, &dir)?;
    println!("{} images of {}x{} in {}", ds.len(), spec.image_size, spec.image_size, dir.display());
    let counts = ds.class_counts();
    let total: u64 = counts.iter().sum();
    for (k, (pixels, images)) in counts.iter().zip(ds.images_per_class()).enumerate() {
        println!("  class {k}: {:5.1}% of pixels, in {images} images", 100.0 * *pixels as f64 / total as f64);
    }
    Ok(())
}
