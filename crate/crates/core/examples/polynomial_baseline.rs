//! Polynomial baseline of increasing degree, offline (fit inside each
//! scenario) and online (held-out placements, epoch picked on the
//! laboratory).
//!
//!     cargo run --release --example polynomial_baseline

use emtcomp::config::ExperimentConfig;
use emtcomp::experiment::{self, ModelKind};
use emtcomp::poly::monomial_count;

fn main() -> emtcomp::Result<()> {
    let cfg = ExperimentConfig::default();
    let data = experiment::generate(&cfg)?;
    println!("{:>6} {:>6} {:>14} {:>14} {:>12}", "degree", "terms", "offline mean %", "offline best %", "online %");
    for degree in 1..=4 {
        let mut offline = Vec::new();
        for d in &data {
            offline.push(experiment::train_offline(&cfg, d, ModelKind::Poly, true, degree)?.metrics.headline.reduction_pct);
        }
        let online = experiment::train_online(&cfg, &data, ModelKind::Poly, true, degree)?;
        println!(
            "{degree:>6} {:>6} {:>14.1} {:>14.1} {:>12.1}",
            monomial_count(4, degree),
            offline.iter().sum::<f64>() / offline.len() as f64,
            offline.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            online.metrics.headline.reduction_pct
        );
    }
    Ok(())
}
