//! Runs every finite-difference gradient suite and prints a summary line
//! per suite. Pass a substring argument to run a subset, e.g.
//! `cargo run --example gradcheck -- fusion`.

use vortx::diagnostics::gradcheck_suites;

fn main() {
    let filter = std::env::args().nth(1);
    let results = gradcheck_suites(filter.as_deref());
    if results.is_empty() {
        eprintln!("no suite matches {:?}", filter.unwrap_or_default());
        std::process::exit(2);
    }
    let mut ok = true;
    for r in &results {
        println!(
            "{:<20} {} (max rel err {:.2e}, {} gradient entries)",
            r.name,
            if r.report.passed() { "ok" } else { "FAIL" },
            r.report.max_rel_err,
            r.report.n_checked
        );
        ok &= r.report.passed();
    }
    std::process::exit(if ok { 0 } else { 1 });
}
