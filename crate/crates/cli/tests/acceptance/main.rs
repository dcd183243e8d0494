//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p cranesafe-cli --test acceptance`. Pass criterion
//! numbers as arguments to run a subset, e.g. `-- 3 6`.

use std::process::ExitCode;
use std::time::Instant;

mod barrier;
mod closed_loop;
mod dynamics;
mod gradients;
mod qp;
mod wavy;

/// Outcome of one criterion: a short summary either way.
pub type Outcome = Result<String, String>;

/// Fails the enclosing criterion with a formatted message unless `cond` holds.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const CRITERIA: [(u32, &str, fn() -> Outcome); 8] = [
    (1, "nominal/robust sign separation on the default scenario", closed_loop::sign_separation),
    (2, "invariance over 50 model-error realizations", closed_loop::invariance_suite),
    (3, "margin adaptation equals brute force", barrier::delta_oracle),
    (4, "dynamics validation", dynamics::validation),
    (5, "gradient checks", gradients::finite_differences),
    (6, "QP solver", qp::solver_checks),
    (7, "regulation performance", closed_loop::regulation),
    (8, "determinism of run", closed_loop::determinism),
];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let clock = Instant::now();
        let outcome = check();
        let secs = clock.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(s) => ("PASS", s),
            Err(s) => ("FAIL", s),
        };
        println!("criterion {id} [{tag}] {name}: {detail} ({secs:.1} s)");
        failed += usize::from(outcome.is_err());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
