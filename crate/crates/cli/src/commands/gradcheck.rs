//! Run every registered gradient self-check; nonzero exit on any failure.

use super::RunContext;
use crate::config::RunConfig;
use fera_core::checks::grad_check_suite;
use fera_core::io::{sig9, Csv};
use fera_core::{FeraError, Result};

pub fn run(_cfg: &RunConfig, ctx: &mut RunContext) -> Result<()> {
    let mut csv = Csv::new(&["check", "max_rel_err", "threshold", "pass"]);
    let mut failures = Vec::new();
    for check in grad_check_suite() {
        let (err, pass) = match (check.run)() {
            Ok(report) => {
                let pass = report.max_rel_err < check.threshold;
                (report.max_rel_err, pass)
            }
            Err(e) => {
                eprintln!("{}: {e}", check.name);
                (f64::NAN, false)
            }
        };
        println!(
            "{:>24}  rel_err {:<14} threshold {:<8} {}",
            check.name,
            sig9(err),
            check.threshold,
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            failures.push(check.name);
        }
        csv.row(&[
            check.name.to_string(),
            sig9(err),
            check.threshold.to_string(),
            pass.to_string(),
        ]);
    }
    ctx.write("gradcheck.csv", &csv.into_string())?;
    if !failures.is_empty() {
        return Err(FeraError::Numeric(format!(
            "gradient checks failed: {failures:?}"
        )));
    }
    Ok(())
}
