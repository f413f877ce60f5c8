//! Group consensus aggregation on one group of random features: the
//! shuffle, the fused output map and the two pooled consensus vectors.

use mccl::gcam::{inverse_permutation, permutation, Gcam};
use mccl::layers::{Ctx, Mode, ParamStore};
use mccl::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mccl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let gcam = Gcam::build(&mut store, &mut rng, 8)?;
    let perm = permutation(6, Some(42));
    println!("shuffle {perm:?}, inverse {:?}", inverse_permutation(&perm));

    let mut tape = Tape::new();
    let feat = tape.constant(Tensor::uniform(&[6, 8, 4, 4], -1.0, 1.0, &mut rng));
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, false);
    let out = gcam.forward(&mut ctx, "stars", feat, Some(42))?;
    println!("input {:?} -> output {:?}", tape.shape(feat), tape.shape(out.feat_out));
    let (a, b) = (tape.value(out.vec_a).to_f64_vec(), tape.value(out.vec_b).to_f64_vec());
    let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    println!("consensus vectors of dimension {}, halves {dist:.4} apart", a.len());
    Ok(())
}
