//! End-to-end drivers behind the command-line front end: dataset
//! generation, online and offline training, evaluation, the planar
//! uncertainty study and the navigation sweeps.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::distortion::{generate_dataset_with_samples, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{displacement_rmse, Compensator, DisplacementPair, Grid2, Measurement};
use crate::io::{self, Model, ModelMetadata};
use crate::navsim::{build_path, pareto_sweep, simulate, ParetoPoint, RecalPolicy, SimResult, Trajectory};
use crate::nn::{self, MlpModel, TrainConfig};
use crate::poly::train_poly;
use crate::scenario::{offline_split, Scenario, ScenarioRole};
use crate::uncertainty::{analyze_planar, planar_training_data, train_planar, LinearFit, PlanarReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ann,
    Poly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Online,
    Offline,
}

/// Generated or loaded data of one scenario.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub scenario: Scenario,
    pub dataset: Dataset,
}

pub fn generate(cfg: &ExperimentConfig) -> Result<Vec<ScenarioData>> {
    cfg.scenarios()
        .into_iter()
        .map(|scenario| {
            let dataset = generate_dataset_with_samples(&scenario.name, &scenario.distortion, &cfg.grid, cfg.samples_per_position)?;
            Ok(ScenarioData { scenario, dataset })
        })
        .collect()
}

/// Writes one CSV per scenario under `<out>/data`.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    generate(cfg)?
        .iter()
        .map(|d| {
            let path = io::dataset_path(&cfg.out_dir, &d.scenario.name);
            io::write_dataset(&path, &d.dataset)?;
            Ok(path)
        })
        .collect()
}

/// Reads the dataset files written by [`cmd_generate`].
pub fn load_data(cfg: &ExperimentConfig) -> Result<Vec<ScenarioData>> {
    cfg.scenarios()
        .into_iter()
        .map(|scenario| {
            let dataset = io::read_dataset(&io::dataset_path(&cfg.out_dir, &scenario.name))?;
            Ok(ScenarioData { scenario, dataset })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMetric {
    pub set: String,
    pub role: String,
    pub n_pairs: usize,
    pub raw_rmse_mm: f64,
    pub compensated_rmse_mm: f64,
    pub reduction_pct: f64,
}

impl SetMetric {
    pub fn measure(set: &str, role: &str, pairs: &[DisplacementPair], model: &dyn Compensator) -> Self {
        let raw = displacement_rmse(pairs, None);
        let comp = displacement_rmse(pairs, Some(model));
        Self {
            set: set.to_string(),
            role: role.to_string(),
            n_pairs: pairs.len(),
            raw_rmse_mm: raw,
            compensated_rmse_mm: comp,
            reduction_pct: reduction_pct(raw, comp),
        }
    }
}

pub fn reduction_pct(raw: f64, compensated: f64) -> f64 {
    if raw > 0.0 {
        100.0 * (1.0 - compensated / raw)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub kind: ModelKind,
    pub mode: Mode,
    pub purpose: String,
    pub use_quality: bool,
    pub degree: Option<usize>,
    pub best_epoch: usize,
    pub sets: Vec<SetMetric>,
    /// All held-out pairs pooled (online) or the test split (offline).
    pub headline: SetMetric,
}

/// A trained model together with its report.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    pub metrics: Metrics,
}

impl Trained {
    pub fn metadata(&self, cfg: &ExperimentConfig) -> ModelMetadata {
        ModelMetadata {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            purpose: self.metrics.purpose.clone(),
            best_epoch: self.metrics.best_epoch,
        }
    }

    /// File stem shared by the model and metrics files.
    pub fn stem(&self) -> String {
        let m = &self.metrics;
        let kind = match m.kind {
            ModelKind::Ann => format!("ann_{}", if m.use_quality { "q" } else { "noq" }),
            ModelKind::Poly => format!("poly_d{}", m.degree.unwrap_or(0)),
        };
        format!("{kind}_{}", m.purpose.replace(':', "_"))
    }

    pub fn save(&self, cfg: &ExperimentConfig) -> Result<(PathBuf, PathBuf)> {
        let model_path = cfg.out_dir.join("models").join(format!("{}.json", self.stem()));
        let metrics_path = cfg.out_dir.join("metrics").join(format!("{}.json", self.stem()));
        io::save_model(&model_path, &self.model, self.metadata(cfg))?;
        io::write_json(&metrics_path, &self.metrics)?;
        Ok((model_path, metrics_path))
    }
}

fn fit(
    kind: ModelKind,
    train: &[DisplacementPair],
    val: &[DisplacementPair],
    use_quality: bool,
    degree: usize,
    ann_cfg: &TrainConfig,
    cfg: &ExperimentConfig,
) -> Result<(Model, usize)> {
    let ann_cfg = TrainConfig {
        use_quality,
        seed: cfg.seed,
        ..ann_cfg.clone()
    };
    Ok(match kind {
        ModelKind::Ann => {
            let out = nn::train(train, val, &ann_cfg)?;
            (Model::Mlp(out.model), out.best_epoch)
        }
        ModelKind::Poly => {
            let out = train_poly(train, val, degree, use_quality, &cfg.poly.train_config(&ann_cfg))?;
            (Model::Poly(out.model), out.best_epoch)
        }
    })
}

fn role_name(role: ScenarioRole) -> &'static str {
    match role {
        ScenarioRole::Train => "train",
        ScenarioRole::Validation => "validation",
        ScenarioRole::Evaluation => "evaluation",
    }
}

/// Per-scenario metrics plus the pooled held-out figure.
pub fn evaluate(model: &dyn Compensator, data: &[ScenarioData]) -> (Vec<SetMetric>, SetMetric) {
    let sets = data
        .iter()
        .map(|d| SetMetric::measure(&d.scenario.name, role_name(d.scenario.role), &d.dataset.pairs, model))
        .collect();
    let held: Vec<DisplacementPair> = data
        .iter()
        .filter(|d| d.scenario.role == ScenarioRole::Evaluation)
        .flat_map(|d| d.dataset.pairs.iter().copied())
        .collect();
    (sets, SetMetric::measure("heldout", "evaluation", &held, model))
}

/// Trains on the training scenarios, selects the epoch on the validation
/// scenario and evaluates on everything.
pub fn train_online(cfg: &ExperimentConfig, data: &[ScenarioData], kind: ModelKind, use_quality: bool, degree: usize) -> Result<Trained> {
    let pairs_of = |role| -> Vec<DisplacementPair> {
        data.iter()
            .filter(|d| d.scenario.role == role)
            .flat_map(|d| d.dataset.pairs.iter().copied())
            .collect()
    };
    let train = pairs_of(ScenarioRole::Train);
    let val = pairs_of(ScenarioRole::Validation);
    let (model, best_epoch) = fit(kind, &train, &val, use_quality, degree, &cfg.train, cfg)?;
    let (sets, headline) = evaluate(&model, data);
    Ok(Trained {
        metrics: Metrics {
            kind,
            mode: Mode::Online,
            purpose: "online".into(),
            use_quality,
            degree: (kind == ModelKind::Poly).then_some(degree),
            best_epoch,
            sets,
            headline,
        },
        model,
    })
}

/// Trains and tests inside one scenario on its spatially disjoint split.
pub fn train_offline(cfg: &ExperimentConfig, data: &ScenarioData, kind: ModelKind, use_quality: bool, degree: usize) -> Result<Trained> {
    let split = offline_split(&data.dataset, cfg.offline.split_seed)?;
    let (model, best_epoch) = fit(kind, &split.train.pairs, &split.val.pairs, use_quality, degree, &cfg.offline.train, cfg)?;
    let headline = SetMetric::measure("test", "test", &split.test.pairs, &model);
    let sets = vec![
        SetMetric::measure("train", "train", &split.train.pairs, &model),
        SetMetric::measure("val", "validation", &split.val.pairs, &model),
        headline.clone(),
    ];
    Ok(Trained {
        metrics: Metrics {
            kind,
            mode: Mode::Offline,
            purpose: format!("offline:{}", data.scenario.name),
            use_quality,
            degree: (kind == ModelKind::Poly).then_some(degree),
            best_epoch,
            sets,
            headline,
        },
        model,
    })
}

/// Planar model trained on the configured board clusters.
pub fn train_planar_model(cfg: &ExperimentConfig) -> Result<Trained> {
    let (model, _) = train_planar(&cfg.grid, &cfg.carm, &cfg.planar)?;
    let training = planar_training_data(&cfg.grid, &cfg.carm, &cfg.planar)?;
    let pairs: Vec<DisplacementPair> = training.iter().flat_map(|d| d.pairs.iter().copied()).collect();
    let headline = SetMetric::measure("planar_train", "train", &pairs, &model);
    Ok(Trained {
        metrics: Metrics {
            kind: ModelKind::Ann,
            mode: Mode::Online,
            purpose: "planar".into(),
            use_quality: cfg.planar.train.use_quality,
            degree: None,
            best_epoch: 0,
            sets: vec![headline.clone()],
            headline,
        },
        model: Model::Mlp(model),
    })
}

pub fn planar_mlp(model: &Model) -> Result<&MlpModel> {
    match model.as_mlp() {
        Some(m) if m.layout.spatial_dims == 2 => Ok(m),
        _ => Err(Error::domain("a planar network model (2 outputs) is required")),
    }
}

/// Uncertainty, error and density maps of a planar model.
pub fn uncertainty_report(cfg: &ExperimentConfig, model: &Model) -> Result<PlanarReport> {
    let mlp = planar_mlp(model)?.clone();
    let training = planar_training_data(&cfg.grid, &cfg.carm, &cfg.planar)?;
    analyze_planar(&cfg.grid, &cfg.carm, &cfg.planar, mlp, training)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub row: usize,
    pub col: usize,
    pub x_mm: f64,
    pub y_mm: f64,
    pub sigma_mm: f64,
    pub std_x_mm: f64,
    pub std_y_mm: f64,
    pub nearest_training_mm: f64,
    pub moore_error_mm: f64,
}

pub fn grid_rows(report: &PlanarReport) -> Vec<GridRow> {
    report
        .board
        .cells()
        .zip(&report.board.data)
        .enumerate()
        .map(|(i, ((row, col), m))| {
            let u = &report.uncertainty.data[i];
            GridRow {
                row,
                col,
                x_mm: m.gt.position_mm.x,
                y_mm: m.gt.position_mm.y,
                sigma_mm: u.sigma_mm,
                std_x_mm: u.per_dim_std_mm[0],
                std_y_mm: u.per_dim_std_mm[1],
                nearest_training_mm: report.nearest_training_mm.data[i],
                moore_error_mm: report.error_mm.data[i],
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub n_cells: usize,
    pub mc_samples: usize,
    pub sigma_vs_error: LinearFit,
    pub sigma_vs_distance: LinearFit,
    pub rmse_vs_max_distance: LinearFit,
    /// Mean σ of cells closer than 10 mm to a training point.
    pub mean_sigma_near_mm: Option<f64>,
    /// Mean σ of cells farther than 35 mm from every training point.
    pub mean_sigma_far_mm: Option<f64>,
}

pub fn summarize(cfg: &ExperimentConfig, report: &PlanarReport) -> UncertaintySummary {
    UncertaintySummary {
        n_cells: report.board.data.len(),
        mc_samples: cfg.planar.mc_samples,
        sigma_vs_error: report.sigma_vs_error,
        sigma_vs_distance: report.sigma_vs_distance,
        rmse_vs_max_distance: report.rmse_vs_max_distance,
        mean_sigma_near_mm: report.mean_sigma_where(|d| d < 10.0),
        mean_sigma_far_mm: report.mean_sigma_where(|d| d > 35.0),
    }
}

/// Writes `sigma_grid.csv` and `uncertainty.json` under `<out>/uncertainty`.
pub fn cmd_uncertainty(cfg: &ExperimentConfig, model: &Model) -> Result<(PlanarReport, UncertaintySummary)> {
    let report = uncertainty_report(cfg, model)?;
    let summary = summarize(cfg, &report);
    let dir = cfg.out_dir.join("uncertainty");
    io::write_csv(&dir.join("sigma_grid.csv"), grid_rows(&report))?;
    io::write_json(&dir.join("uncertainty.json"), &summary)?;
    Ok((report, summary))
}

/// Planar model output with the board height restored, so segment lengths
/// are measured in the board plane.
pub struct PlanarCompensator<'a>(pub &'a MlpModel);

impl Compensator for PlanarCompensator<'_> {
    fn compensate(&self, m: &Measurement) -> Vector3<f64> {
        let c = self.0.compensate(m);
        Vector3::new(c.x, c.y, m.gt.position_mm.z)
    }
}

/// Paths through well-covered and sparsely covered parts of the board.
#[derive(Debug, Clone)]
pub struct NavPaths {
    pub seen: Trajectory,
    pub unseen: Trajectory,
}

fn mean_nearest(traj: &Trajectory, report: &PlanarReport) -> f64 {
    let n = report.board.n_cols;
    let total: f64 = traj
        .waypoints
        .iter()
        .map(|w| report.nearest_training_mm.data[w.gt.cell.row * n + w.gt.cell.col])
        .sum();
    total / traj.waypoints.len().max(1) as f64
}

/// Of the candidate paths, the one closest to and the one farthest from
/// the training data on average.
pub fn nav_paths(cfg: &ExperimentConfig, report: &PlanarReport) -> Result<NavPaths> {
    let mut scored = (0..cfg.nav.candidate_paths)
        .map(|k| {
            let t = build_path(&report.board, cfg.nav.path_length_mm, cfg.seed.wrapping_add(k as u64))?;
            Ok((mean_nearest(&t, report), t))
        })
        .collect::<Result<Vec<_>>>()?;
    // stable sort keeps the lower seed on ties
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(NavPaths {
        seen: scored.first().expect("at least one candidate").1.clone(),
        unseen: scored.last().expect("at least one candidate").1.clone(),
    })
}

fn sigma_lookup(report: &PlanarReport) -> impl Fn(&Measurement) -> f64 + Sync + '_ {
    let grid: &Grid2<_> = &report.uncertainty;
    move |m: &Measurement| grid.get(m.gt.cell.row, m.gt.cell.col).map_or(0.0, |u| u.sigma_mm)
}

pub fn run_simulation(report: &PlanarReport, traj: &Trajectory, policy: RecalPolicy) -> Result<SimResult> {
    simulate(traj, &PlanarCompensator(&report.model), &sigma_lookup(report), policy)
}

pub fn run_pareto(cfg: &ExperimentConfig, report: &PlanarReport, traj: &Trajectory) -> Result<Vec<ParetoPoint>> {
    pareto_sweep(
        traj,
        &PlanarCompensator(&report.model),
        &sigma_lookup(report),
        &cfg.nav.taus_mm,
        &cfg.nav.intervals_mm,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub region: String,
    pub segment: usize,
    pub row: usize,
    pub col: usize,
    pub traveled_mm: f64,
    pub segment_error_mm: f64,
    pub segment_sigma_mm: f64,
    pub error_mm: f64,
    pub sigma_accum_mm: f64,
    pub recalibrated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub region: String,
    pub family: String,
    pub parameter_mm: f64,
    pub recal_count: usize,
    pub mean_error_mm: f64,
}

/// Writes `trace.csv` for `policy` on both paths.
pub fn cmd_simulate(cfg: &ExperimentConfig, model: &Model, policy: RecalPolicy) -> Result<Vec<TraceRow>> {
    let report = uncertainty_report(cfg, model)?;
    let paths = nav_paths(cfg, &report)?;
    let mut rows = Vec::new();
    for (region, traj) in [("seen", &paths.seen), ("unseen", &paths.unseen)] {
        let r = run_simulation(&report, traj, policy)?;
        for (i, (s, (_, end))) in r.segments.iter().zip(traj.segments()).enumerate() {
            rows.push(TraceRow {
                region: region.into(),
                segment: i,
                row: end.gt.cell.row,
                col: end.gt.cell.col,
                traveled_mm: s.traveled_mm,
                segment_error_mm: s.segment_error_mm,
                segment_sigma_mm: s.segment_sigma_mm,
                error_mm: s.error_mm,
                sigma_accum_mm: s.sigma_accum_mm,
                recalibrated: s.recalibrated,
            });
        }
    }
    io::write_csv(&cfg.out_dir.join("nav").join("trace.csv"), &rows)?;
    Ok(rows)
}

/// Writes `pareto.csv` with both policy families on both paths.
pub fn cmd_pareto(cfg: &ExperimentConfig, model: &Model) -> Result<Vec<ParetoRow>> {
    let report = uncertainty_report(cfg, model)?;
    let paths = nav_paths(cfg, &report)?;
    let mut rows = Vec::new();
    for (region, traj) in [("seen", &paths.seen), ("unseen", &paths.unseen)] {
        for p in run_pareto(cfg, &report, traj)? {
            rows.push(ParetoRow {
                region: region.into(),
                family: p.policy.family().into(),
                parameter_mm: p.policy.parameter_mm(),
                recal_count: p.recal_count,
                mean_error_mm: p.mean_error_mm,
            });
        }
    }
    io::write_csv(&cfg.out_dir.join("nav").join("pareto.csv"), &rows)?;
    Ok(rows)
}

/// Writes a metrics CSV for `model` over every scenario dataset.
pub fn cmd_eval(cfg: &ExperimentConfig, model: &Model, out: &Path) -> Result<Vec<SetMetric>> {
    let data = load_data(cfg)?;
    if model.layout().spatial_dims != 3 {
        return Err(Error::domain("evaluation on scenario datasets needs a volumetric model"));
    }
    let (mut sets, headline) = evaluate(model, &data);
    sets.push(headline);
    io::write_csv(out, &sets)?;
    Ok(sets)
}
