//! The four saliency measures on a perfect, a blurred and an inverted
//! prediction of the same ground truth.

use mccl::metrics::{score_pair, SaliencyMap};

fn main() -> mccl::Result<()> {
    let n = 32;
    let disc = |y: usize, x: usize| {
        let (dy, dx) = (y as f64 - 15.5, x as f64 - 15.5);
        ((dy * dy + dx * dx).sqrt() < 9.0) as u8 as f64
    };
    let gt = SaliencyMap::new(n, n, (0..n * n).map(|i| disc(i / n, i % n)).collect())?;
    let blurred = SaliencyMap::new(
        n,
        n,
        (0..n * n)
            .map(|i| {
                let (dy, dx) = ((i / n) as f64 - 15.5, (i % n) as f64 - 15.5);
                1.0 / (1.0 + ((dy * dy + dx * dx).sqrt() - 9.0).exp())
            })
            .collect(),
    )?;
    let inverted = SaliencyMap::new(n, n, gt.values().iter().map(|v| 1.0 - v).collect())?;
    println!("{:<10} {:>7} {:>7} {:>7} {:>7}", "map", "S", "Fmax", "Emax", "MAE");
    for (name, pred) in [("perfect", &gt), ("blurred", &blurred), ("inverted", &inverted)] {
        let s = score_pair(pred, &gt)?;
        println!("{name:<10} {:>7.4} {:>7.4} {:>7.4} {:>7.4}", s.s_measure, s.f_max, s.e_max, s.mae);
    }
    Ok(())
}
