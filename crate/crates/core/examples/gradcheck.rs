//! Central finite-difference checks of every differentiable op in the tape,
//! plus the combined adaptation objective, in f64.
//!
//! cargo run --release --example gradcheck -- [seed]

use difficulty_moe::gradcheck::check_gradients;

fn main() -> difficulty_moe::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let report = check_gradients(seed)?;
    for (name, err) in &report {
        let verdict = if *err < 1e-4 { "ok" } else { "FAIL" };
        println!("{name:<22} {err:.3e}  {verdict}");
    }
    let worst = report.iter().map(|r| r.1).fold(0.0, f64::max);
    println!("{} checks, worst relative error {worst:.3e}", report.len());
    Ok(())
}
