//! Runs every acceptance criterion at desk scale and prints one verdict line
//! per criterion. `ACCEPTANCE_ONLY=2,5` restricts the run; `ACCEPTANCE_VERBOSE=1`
//! prints every check.

use std::io::Write;
use std::process::ExitCode;

use eddy_stommel::verify::{run_criteria, VerifyScale};

fn main() -> ExitCode {
    let ids: Vec<u8> = match std::env::var("ACCEPTANCE_ONLY") {
        Ok(s) if !s.trim().is_empty() => s
            .split(',')
            .map(|t| t.trim().parse().expect("ACCEPTANCE_ONLY takes comma-separated criterion ids"))
            .collect(),
        _ => (1..=8).collect(),
    };
    let verbose = std::env::var("ACCEPTANCE_VERBOSE").is_ok_and(|v| v != "0");
    let mut out = std::io::stdout();
    let reports = run_criteria(&ids, &VerifyScale::desk(), |r| {
        if verbose || !r.passed() {
            write!(out, "{r}").unwrap();
        } else {
            writeln!(out, "{}", r.line()).unwrap();
        }
        out.flush().unwrap();
    })
    .expect("valid criterion ids");
    let failed: Vec<u8> = reports.iter().filter(|r| !r.passed()).map(|r| r.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", reports.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
