//! One DCA module on a random feature map: output shapes, mask statistics and
//! the residual identity when the mask is forced to zero.

use dca_tensor::{ParamStore, Tape};
use dcanet::check::random_tensor;
use dcanet::layers::{Ctx, Init};
use dcanet::{DcaConfig, DcaModule, ForwardOptions, PathwayPair};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dcanet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let cfg = DcaConfig::new(64, 64, 32, 2).with_semantic_head(5, 16);
    let module = DcaModule::new(&mut Init::new(&mut store, &mut rng), cfg)?;

    let x = random_tensor::<f32>(&mut rng, &[2, 64, 12, 12]);
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &store);
    let input = tape.input(x.clone(), false);
    let out = module.forward(&cx, PathwayPair::shared(input))?;

    let mask = tape.value(out.mask);
    let (lo, hi) = mask.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!("context out  {:?}", tape.shape(out.pair.context));
    println!("spatial out  {:?}", tape.shape(out.pair.spatial));
    println!("mask         {:?} in [{lo:.3}, {hi:.3}]", mask.shape());
    if let Some(logits) = out.semantic_logits {
        println!("class logits {:?}", tape.shape(logits));
    }

    // With the mask pinned to zero the spatial output is exactly the residual operand.
    let zero = Ctx::new(&tape, &store).with_options(ForwardOptions { mask_override: Some(0.0), ..ForwardOptions::default() });
    let xs = tape.input(x, false);
    let pinned = module.forward(&zero, PathwayPair::shared(xs))?;
    let (_, residual) = module.spatial_transform(&zero, xs)?;
    let same = tape.value(pinned.pair.spatial).data() == tape.value(residual).data();
    println!("zero mask leaves the residual untouched: {same}");
    Ok(())
}
