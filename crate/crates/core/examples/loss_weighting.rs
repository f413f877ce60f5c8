//! The weighted generator objective and the discriminator objective on
//! hand-picked inputs.

use mccl::ail::{disc_loss, Discriminator, DISC_CHANNELS};
use mccl::layers::{Ctx, Mode, ParamStore};
use mccl::losses::{bce_loss, iou_loss, total_generator_loss, LossParts, LossWeights};
use mccl::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mccl::Result<()> {
    let mut tape = Tape::<f64>::new();
    let pred = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![0.9, 0.8, 0.2, 0.1])?);
    let gt = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.0])?);
    let bce = bce_loss(&mut tape, pred, gt)?;
    let iou = iou_loss(&mut tape, pred, gt)?;
    println!("BCE {:.4}  IoU {:.4}", tape.value(bce).item(), tape.value(iou).item());

    let w = LossWeights::default();
    let one = |t: &mut Tape<f64>| t.constant(Tensor::scalar(1.0));
    let parts = LossParts {
        bce: one(&mut tape),
        iou: one(&mut tape),
        mcm: Some(one(&mut tape)),
        adv: Some(one(&mut tape)),
    };
    let total = total_generator_loss(&mut tape, &parts, &w)?;
    println!("unit components under {:?}: {}", w, tape.value(total).item());

    // A zero head makes the discriminator output 0.5 for every image.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let disc = Discriminator::build(&mut store, &mut rng, DISC_CHANNELS)?;
    store.param_mut("disc/head/w")?.data_mut().fill(0.0);
    let src = tape.constant(Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng));
    let maps = tape.constant(Tensor::full(&[2, 1, 32, 32], 0.5));
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Train, false);
    let (loss, scores) = disc_loss(&mut ctx, &disc, src, maps, maps, w.disc)?;
    println!(
        "discriminator loss at D = {:.2}: {:.6} (3 ln 2 = {:.6})",
        scores.real[0],
        tape.value(loss).item(),
        3.0 * 2f64.ln()
    );
    Ok(())
}
