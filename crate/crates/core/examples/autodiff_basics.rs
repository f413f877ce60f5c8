//! Reverse-mode differentiation on the tape: build a small expression,
//! backpropagate, and compare against a central difference.

use mccl::gradcheck::grad_check;
use mccl::{Tape, Tensor};

fn main() -> mccl::Result<()> {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.3, -0.7])?);
    let w = tape.param(Tensor::new(&[3, 1], vec![1.0, 2.0, -1.0])?);
    let h = tape.matmul(x, w)?;
    let s = tape.sigmoid(h);
    let loss = tape.mean(s);
    tape.backward(loss)?;
    println!("loss       {:.6}", tape.value(loss).item());
    println!("d loss/dx  {:?}", tape.grad(x).unwrap());
    println!("d loss/dw  {:?}", tape.grad(w).unwrap());

    let x0 = tape.value(x).clone();
    let err = grad_check(
        |t, x| {
            let w = t.constant(Tensor::new(&[3, 1], vec![1.0, 2.0, -1.0])?);
            let h = t.matmul(x, w)?;
            let s = t.sigmoid(h);
            Ok(t.mean(s))
        },
        &x0,
        1e-6,
    )?;
    println!("max relative error vs central difference: {err:.2e}");
    Ok(())
}
