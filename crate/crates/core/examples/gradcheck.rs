//! Runs the finite-difference suite over every differentiable operation and
//! shows that a backward pass missing the threshold term is caught.

use tokengate::harness::gradcheck::{broken_registry, registry, run_checks, TOLERANCE};
use tokengate::harness::Scope;

fn main() -> tokengate::Result<()> {
    let seeds: Vec<u64> = (0..20).collect();
    let report = run_checks(&registry(), Scope::All, &seeds, TOLERANCE)?;
    print!("{}", report.render());
    println!("all passed: {}\n", report.passed());

    let broken = run_checks(&broken_registry(), Scope::Softtopk, &seeds, TOLERANCE)?;
    print!("{}", broken.render());
    println!("diagonal-only soft top-k backward passes: {}", broken.passed());
    Ok(())
}
