//! Builds each context structure at the reference width (2048 backbone
//! channels, width 512) and prints what comes out of it.

use dca_tensor::{ParamKind, ParamStore, Tape};
use dcanet::check::random_tensor;
use dcanet::layers::{Ctx, Init};
use dcanet::{Structure, StructureConfig, StructureKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dcanet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor::<f32>(&mut rng, &[1, 2048, 8, 8]);
    for kind in [StructureKind::Crs, StructureKind::Cascade, StructureKind::Pyramid] {
        let cfg = StructureConfig { kind, ..StructureConfig::default() };
        let mut store = ParamStore::<f32>::new();
        let structure = Structure::build(&mut Init::new(&mut store, &mut rng), &cfg, 2048, 21)?.expect("not the baseline");
        let tape = Tape::inference();
        let out = structure.forward(&Ctx::new(&tape, &store), tape.input(x.clone(), false))?;
        println!(
            "{:8} schedule {:?}: features {:?}, {} masks, {} class heads, {} DCA modules, {:.1}M parameters",
            kind.name(),
            cfg.schedule().0,
            tape.shape(out.features),
            out.masks.len(),
            out.semantic_logits.len(),
            structure.dca_modules().len(),
            store.num_scalars(ParamKind::Trainable) as f64 / 1e6,
        );
        if let Structure::Pyramid(p) = &structure {
            println!("         branch concat has {} channels", p.concat_channels());
        }
    }
    Ok(())
}
