//! Acceptance suite: one line per criterion with its details. Runs without the
//! libtest harness so the lines are always shown; exits nonzero on any failure.

use std::process::ExitCode;

use periodic_lap::verify::{run_criterion, CRITERIA};

fn main() -> ExitCode {
    let mut failed = Vec::new();
    for (id, _) in CRITERIA {
        let report = run_criterion(id).expect("known criterion");
        println!("{report}");
        for d in &report.details {
            println!("       {d}");
        }
        if !report.passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", CRITERIA.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
