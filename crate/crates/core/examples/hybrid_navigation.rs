//! Hybrid navigation: tracks a path with the planar model and compares
//! uncertainty-triggered against fixed-interval x-ray recalibration.
//!
//!     cargo run --release --example hybrid_navigation

use emtcomp::config::ExperimentConfig;
use emtcomp::experiment;
use emtcomp::navsim::{adaptive_win_fraction, RecalPolicy};

fn main() -> emtcomp::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.planar.mc_samples = 1000;
    let trained = experiment::train_planar_model(&cfg)?;
    let report = experiment::uncertainty_report(&cfg, &trained.model)?;
    let paths = experiment::nav_paths(&cfg, &report)?;

    for (region, traj) in [("seen", &paths.seen), ("unseen", &paths.unseen)] {
        println!("== {region} region, {:.0} mm in {} segments", traj.total_length_mm, traj.n_segments());
        let run = experiment::run_simulation(&report, traj, RecalPolicy::Adaptive { tau_mm: 0.3 })?;
        for (i, s) in run.segments.iter().enumerate().step_by(3) {
            println!(
                "  seg {i:>2} at {:>5.0} mm: error {:.3} mm, sigma {:.3} mm{}",
                s.traveled_mm,
                s.error_mm,
                s.sigma_accum_mm,
                if s.recalibrated { "  <- x-ray" } else { "" }
            );
        }
        let pts = experiment::run_pareto(&cfg, &report, traj)?;
        println!("  {:<9} {:>8} {:>6} {:>10}", "policy", "param", "recal", "mean err");
        for p in pts.iter().step_by(4) {
            println!(
                "  {:<9} {:>8.2} {:>6} {:>10.4}",
                p.policy.family(),
                p.policy.parameter_mm(),
                p.recal_count,
                p.mean_error_mm
            );
        }
        if let Some(w) = adaptive_win_fraction(&pts) {
            println!("  adaptive is no worse at {:.0}% of shared recalibration counts", 100.0 * w);
        }
    }
    Ok(())
}
