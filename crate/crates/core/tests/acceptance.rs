//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Criterion 5 is expected to stay red on its strictly convex grid sweep;
//! its piecewise-linear sweeps are still required to classify correctly.

use std::process::ExitCode;

use powerdelay::asymptotics::ScalingClass;
use powerdelay::suite::Suite;

const KNOWN_RED: &[usize] = &[5];

fn main() -> ExitCode {
    let suite = Suite::run(|o| println!("{}", o.line()));
    let mut unexpected: Vec<String> = suite
        .outcomes
        .iter()
        .filter(|o| !o.passed && !KNOWN_RED.contains(&o.id))
        .map(|o| format!("criterion {} failed", o.id))
        .collect();
    for (label, want) in [
        ("grid linear lambda=0.6", ScalingClass::Log),
        ("grid linear lambda=0.8", ScalingClass::Inv),
    ] {
        match suite.sweeps.iter().find(|r| r.label == label) {
            Some(run) if run.class() == want => {}
            Some(run) => unexpected.push(format!("{label}: got {}, want {want}", run.class())),
            None => unexpected.push(format!("{label}: sweep missing")),
        }
    }
    let passed = suite.outcomes.iter().filter(|o| o.passed).count();
    println!("{passed}/{} criteria passed", suite.outcomes.len());
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        for u in &unexpected {
            println!("unexpected: {u}");
        }
        ExitCode::FAILURE
    }
}
