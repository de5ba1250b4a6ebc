//! Runs the 64-bit finite-difference gradient suite over every primitive
//! and block and prints the worst relative error of each.

use std::time::Instant;

use upmad::net::suite::{gradient_suite, GRADCHECK_TOLERANCE};
use upmad::tensor::GradCheckOpts;

fn main() -> upmad::Result<()> {
    let start = Instant::now();
    let entries = gradient_suite(GradCheckOpts::default())?;
    for e in &entries {
        println!(
            "{:<24} checked {:>5}  kinks {:>2}  max rel error {:.3e}  {}",
            e.name,
            e.report.checked,
            e.report.nonsmooth.len(),
            e.report.max_rel_error,
            if e.passed() { "ok" } else { "FAIL" }
        );
        if !e.passed() {
            println!("    worst (input, coord, analytic, numeric) = {:?}", e.report.worst);
        }
    }
    println!("tolerance {GRADCHECK_TOLERANCE:e}, {:.1?}", start.elapsed());
    Ok(())
}
