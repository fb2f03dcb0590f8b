//! Compares reverse-mode gradients with central differences in every mode
//! and prints the per-tensor table for each.

use wuneng::gradcheck::suite;

fn main() -> wuneng::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let reports = suite(seed)?;
    for m in &reports {
        println!("== {} / {}", m.combine_mode, m.middle_mode);
        print!("{}", m.report.table());
    }
    let pass = reports.iter().all(|m| m.report.pass);
    println!("all modes: {}", if pass { "pass" } else { "FAIL" });
    Ok(())
}
