//! The class-keyed momentum memory and the contrastive loss built on it.

use mccl::mcm::{mcm_loss, triplet_loss, ConsensusMemory};
use mccl::{Tape, Tensor};
use std::collections::BTreeMap;

fn main() -> mccl::Result<()> {
    let mut mem = ConsensusMemory::new(0.5, 0.1)?;
    mem.update("cat", &[4.0, 0.0], &[0.0, 4.0])?;
    for t in 1..=5 {
        mem.update("cat", &[0.0, 0.0], &[0.0, 0.0])?;
        println!("after {t} updates toward zero: slot a = {:?}", mem.get("cat").unwrap().a);
    }

    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::new(&[2], vec![0.0, 0.0])?);
    let n = tape.constant(Tensor::new(&[2], vec![1.0, 0.0])?);
    let t = triplet_loss(&mut tape, a, a, n, 0.1, false)?;
    let c = triplet_loss(&mut tape, a, a, n, 0.1, true)?;
    println!("triplet, coincident positive, unit negative: {:.3} (clamped {:.3})", tape.value(t).item(), tape.value(c).item());

    mem.update("dog", &[1.0, 1.0], &[1.0, 1.0])?;
    let mut live = BTreeMap::new();
    for (class, v) in [("cat", [0.1, 0.2]), ("dog", [0.9, 1.1])] {
        let va = tape.param(Tensor::new(&[2], v.to_vec())?);
        let vb = tape.param(Tensor::new(&[2], v.map(|x| x + 0.05).to_vec())?);
        live.insert(class.to_string(), (va, vb));
    }
    let classes = vec!["cat".to_string(), "dog".to_string()];
    let loss = mcm_loss(&mut tape, &classes, &mem, &live)?;
    tape.backward(loss)?;
    println!("mcm loss over 2 classes: {:.4}", tape.value(loss).item());
    Ok(())
}
