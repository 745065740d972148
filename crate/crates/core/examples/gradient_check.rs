//! Finite-difference checks of every op and loss component, then the same
//! suites with a deliberately broken backward rule.
//!
//! cargo run --release --example gradient_check -- [op-to-break]

use wtal::gradcheck::{run_suites, SuiteConfig};
use wtal::OpKind;

fn main() -> wtal::Result<()> {
    let broken = std::env::args().nth(1).unwrap_or_else(|| "cosine".into());
    let fault = OpKind::from_name(&broken)
        .ok_or_else(|| wtal::Error::Usage(format!("unknown op {broken}")))?;

    for r in run_suites(&SuiteConfig::default())? {
        println!("{:<4} {:<28} {:.2e}", if r.passed { "ok" } else { "FAIL" }, r.name, r.max_rel_err);
    }

    println!("\nwith a wrong backward rule for {broken}:");
    let cfg = SuiteConfig {
        seeds: vec![0],
        fault: Some(fault),
        ..SuiteConfig::default()
    };
    for r in run_suites(&cfg)?.iter().filter(|r| !r.passed) {
        println!("FAIL {:<28} {:.2e}", r.name, r.max_rel_err);
    }
    Ok(())
}
