//! The `selftest` subcommand: run the property suites and report.

use admix::suites;

use crate::CliError;

pub fn run(seeds: u64) -> Result<(), CliError> {
    let mut checks = Vec::new();
    let fail = |e: admix::diffmath::DiffError| CliError::Failed(e.to_string());
    checks.extend(suites::gradient_suite(seeds).map_err(fail)?);
    checks.extend(suites::composite_gradient_suite(seeds.min(3)).map_err(fail)?);
    checks.extend(suites::mask_suite(100).map_err(fail)?);
    checks.extend(suites::directionality_suite(5, 4).map_err(fail)?);
    checks.extend(suites::metric_oracle_suite().map_err(fail)?);

    let mut failed = 0usize;
    for check in &checks {
        let tag = if check.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {}", check.name, check.detail);
        if !check.pass {
            failed += 1;
        }
    }
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} self-test checks failed")));
    }
    Ok(())
}
