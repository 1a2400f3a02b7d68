use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use emtcomp::config::ExperimentConfig;
use emtcomp::experiment::{self as exp, ModelKind, Trained};
use emtcomp::io::{self, Model};
use emtcomp::navsim::RecalPolicy;
use emtcomp::{Error, Result};

#[derive(Parser)]
#[command(name = "emtcomp", version, about = "EMT error compensation experiments")]
struct Cli {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Ann,
    Poly,
    Planar,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Online,
    Offline,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Adaptive,
    Static,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scenario datasets as CSV.
    Generate,
    /// Train a compensation model on generated data.
    Train {
        #[arg(long, value_enum, default_value = "ann")]
        kind: Kind,
        #[arg(long, value_enum, default_value = "online")]
        mode: ModeArg,
        #[arg(long, overrides_with = "no_quality")]
        quality: bool,
        #[arg(long = "no-quality")]
        no_quality: bool,
        /// Polynomial degree (poly only).
        #[arg(long)]
        degree: Option<usize>,
        /// Offline mode: train only on this scenario instead of each one.
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Evaluate a saved model on every scenario dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Monte-Carlo-dropout uncertainty map of a planar model.
    Uncertainty {
        /// Planar model; trained from the configuration when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Simulate navigation with one recalibration policy.
    Simulate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "adaptive")]
        policy: PolicyArg,
        /// Threshold tau (adaptive) or interval (static) in mm.
        #[arg(long)]
        value: Option<f64>,
    },
    /// Sweep both policy families and write the trade-off points.
    Pareto {
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    cfg.validate()?;

    match cli.command {
        Command::Generate => {
            for p in exp::cmd_generate(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Train { kind, mode, quality, no_quality, degree, scenario } => {
            let use_quality = quality || !no_quality;
            let degree = degree.unwrap_or(cfg.poly.degree);
            if degree > emtcomp::poly::MAX_DEGREE {
                return Err(Error::config("degree", format!("must lie in 0..={}", emtcomp::poly::MAX_DEGREE)));
            }
            let kind = match kind {
                Kind::Ann => ModelKind::Ann,
                Kind::Poly => ModelKind::Poly,
                Kind::Planar => return report(&exp::train_planar_model(&cfg)?, &cfg),
            };
            let data = exp::load_data(&cfg)?;
            match mode {
                ModeArg::Online => report(&exp::train_online(&cfg, &data, kind, use_quality, degree)?, &cfg)?,
                ModeArg::Offline => {
                    if let Some(name) = &scenario {
                        cfg.scenario(name)?;
                    }
                    for d in data.iter().filter(|d| scenario.as_ref().is_none_or(|n| *n == d.scenario.name)) {
                        report(&exp::train_offline(&cfg, d, kind, use_quality, degree)?, &cfg)?;
                    }
                }
            }
        }
        Command::Eval { model } => {
            let (m, _) = io::load_model(&model)?;
            let stem = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
            let out = cfg.out_dir.join("metrics").join(format!("eval_{stem}.csv"));
            for s in exp::cmd_eval(&cfg, &m, &out)? {
                println!("{:<14} raw {:7.3} mm  comp {:7.3} mm  {:6.1}%", s.set, s.raw_rmse_mm, s.compensated_rmse_mm, s.reduction_pct);
            }
        }
        Command::Uncertainty { model } => {
            let m = planar_model(&cfg, model)?;
            let (_, s) = exp::cmd_uncertainty(&cfg, &m)?;
            println!("sigma vs error    r = {:.3}", s.sigma_vs_error.pearson_r);
            println!("sigma vs distance r = {:.3}", s.sigma_vs_distance.pearson_r);
            println!("rmse vs max dist  r = {:.3}", s.rmse_vs_max_distance.pearson_r);
        }
        Command::Simulate { model, policy, value } => {
            let m = planar_model(&cfg, model)?;
            let policy = match policy {
                PolicyArg::Adaptive => RecalPolicy::Adaptive { tau_mm: value.unwrap_or(emtcomp::navsim::DEFAULT_TAU_MM) },
                PolicyArg::Static => RecalPolicy::Static { interval_mm: value.unwrap_or(cfg.nav.path_length_mm / 4.0) },
            };
            policy.validate()?;
            let rows = exp::cmd_simulate(&cfg, &m, policy)?;
            for region in ["seen", "unseen"] {
                let r: Vec<_> = rows.iter().filter(|r| r.region == region).collect();
                let recal = r.iter().filter(|r| r.recalibrated).count();
                let err = r.last().map_or(0.0, |r| r.error_mm);
                println!("{region:<7} segments {:3}  recalibrations {recal:3}  final error {err:.3} mm", r.len());
            }
        }
        Command::Pareto { model } => {
            let m = planar_model(&cfg, model)?;
            let rows = exp::cmd_pareto(&cfg, &m)?;
            println!("{} points -> {}", rows.len(), cfg.out_dir.join("nav").join("pareto.csv").display());
        }
    }
    Ok(())
}

fn report(t: &Trained, cfg: &ExperimentConfig) -> Result<()> {
    let (model_path, _) = t.save(cfg)?;
    let h = &t.metrics.headline;
    println!(
        "{} {}: raw {:.3} mm, compensated {:.3} mm ({:.1}% reduction)",
        model_path.display(),
        h.set,
        h.raw_rmse_mm,
        h.compensated_rmse_mm,
        h.reduction_pct
    );
    Ok(())
}

fn planar_model(cfg: &ExperimentConfig, path: Option<PathBuf>) -> Result<Model> {
    match path {
        Some(p) => Ok(io::load_model(&p)?.0),
        None => {
            let t = exp::train_planar_model(cfg)?;
            t.save(cfg)?;
            Ok(t.model)
        }
    }
}
