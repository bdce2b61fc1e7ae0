//! Finite-difference verification of every registered operator, printed as a
//! table. Each case compares tape gradients against central differences at
//! randomly sampled coordinates; relative error must stay below 1e-4.
//!
//!     cargo run --release --example gradient_check

use tafpnet::gradcheck::{operator_checks, run_cases};

fn main() {
    let cases = operator_checks(41);
    let results = run_cases(&cases, 42).expect("checks run");
    let mut worst = (String::new(), 0.0f64);
    for r in &results {
        println!(
            "{:<22} max_rel {:9.3e} over {:2} points  {}",
            r.name,
            r.max_rel_err,
            r.points,
            if r.pass { "pass" } else { "FAIL" }
        );
        if r.max_rel_err > worst.1 {
            worst = (r.name.clone(), r.max_rel_err);
        }
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!();
    println!(
        "{} operators checked, {} failed; worst: {} at {:.3e}",
        results.len(),
        failed,
        worst.0,
        worst.1
    );
    assert_eq!(failed, 0, "gradient checks must pass");
}
