//! Runs the full gradient-check suite and prints one line per check.

use mccl::gradcheck::suite::run_suite;

fn main() -> mccl::Result<()> {
    let start = std::time::Instant::now();
    let results = run_suite(0)?;
    for r in &results {
        println!(
            "{:<18} {:>3} cases  max rel error {:.2e} (< {:.0e}) {}",
            r.name,
            r.cases,
            r.max_rel_error,
            r.threshold,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("{} checks in {:.1}s", results.len(), start.elapsed().as_secs_f64());
    Ok(())
}
