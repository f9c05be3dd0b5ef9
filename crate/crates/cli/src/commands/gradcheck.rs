//! `gradcheck`: run every finite-difference verification suite and report
//! the worst relative error per check. Any failure exits with the
//! verification status code.

use ivmetric_core::error::{Error, Result};
use ivmetric_core::gradcheck::run_all;

pub fn run(seed: u64, seeds: usize) -> Result<()> {
    let reports = run_all(seed, seeds)?;
    let mut failures = 0;
    println!(
        "{:<26} {:>14} {:>12} {:>8}",
        "check", "max_rel_err", "tolerance", "status"
    );
    for report in &reports {
        let status = if report.passed() { "pass" } else { "FAIL" };
        if !report.passed() {
            failures += 1;
        }
        println!(
            "{:<26} {:>14.3e} {:>12.0e} {:>8}",
            report.name, report.max_rel_err, report.tolerance, status
        );
    }
    if failures > 0 {
        return Err(Error::Verification(format!(
            "{} of {} gradient checks failed",
            failures,
            reports.len()
        )));
    }
    println!("all {} checks passed ({} seeds each)", reports.len(), seeds);
    Ok(())
}
