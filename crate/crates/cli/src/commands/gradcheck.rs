use anyhow::{bail, Result};
use sevnav_core::check::gradcheck_all;

pub fn cmd_gradcheck(seed: u64) -> Result<()> {
    let results = gradcheck_all(seed, 4);
    println!("{:<24} {:>12} {:>8} {:>6}", "check", "max_rel_err", "points", "pass");
    let mut failures = 0;
    for r in &results {
        println!(
            "{:<24} {:>12.3e} {:>8} {:>6}",
            r.name,
            r.max_rel_err,
            r.points,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failures += 1;
        }
    }
    if failures > 0 {
        bail!("{failures} gradient check(s) failed");
    }
    Ok(())
}
