//! Trains the planar MC-dropout model on clustered board measurements and
//! prints its uncertainty map next to the training density.
//!
//!     cargo run --release --example uncertainty_map -- [mc_samples]

use emtcomp::config::ExperimentConfig;
use emtcomp::experiment;

fn main() -> emtcomp::Result<()> {
    let mut cfg = ExperimentConfig::default();
    if let Some(n) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        cfg.planar.mc_samples = n;
    }
    let trained = experiment::train_planar_model(&cfg)?;
    let report = experiment::uncertainty_report(&cfg, &trained.model)?;
    let s = experiment::summarize(&cfg, &report);

    let sigmas: Vec<f64> = report.uncertainty.data.iter().map(|u| u.sigma_mm).collect();
    let (lo, hi) = sigmas.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '@'];
    let training = cfg.planar.training_cells();
    println!("sigma {lo:.3}..{hi:.3} mm; x marks training cells");
    for r in 0..report.board.n_rows {
        let line: String = (0..report.board.n_cols)
            .map(|c| {
                if training.contains(&(r, c)) {
                    return 'x';
                }
                let v = sigmas[r * report.board.n_cols + c];
                let k = ((v - lo) / (hi - lo).max(1e-12) * (shades.len() - 1) as f64).round() as usize;
                shades[k]
            })
            .collect();
        println!("{line}");
    }
    println!("sigma vs error    r = {:.3}", s.sigma_vs_error.pearson_r);
    println!("sigma vs distance r = {:.3}", s.sigma_vs_distance.pearson_r);
    println!("rmse vs max dist  r = {:.3}", s.rmse_vs_max_distance.pearson_r);
    if let (Some(near), Some(far)) = (s.mean_sigma_near_mm, s.mean_sigma_far_mm) {
        println!("mean sigma: {near:.3} mm within 10 mm of training data, {far:.3} mm beyond 35 mm");
    }
    Ok(())
}
