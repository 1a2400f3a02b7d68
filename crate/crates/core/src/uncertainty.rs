//! Monte-Carlo dropout uncertainty, training density and their relation to
//! compensation error on the planar board.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distortion::{measure_cells, Dataset, SAMPLES_PER_POSITION};
use crate::error::{Error, Result};
use crate::geometry::{absolute_error_estimate, Cell, GridSpec, Grid2, Measurement, Rotation};
use crate::nn::{train, DropoutMask, MlpModel, TrainConfig};
use crate::scenario::{CArmModel, ScenarioRole};

/// MC dropout draws per point used by the planar study.
pub const DEFAULT_MC_SAMPLES: usize = 3000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEstimate {
    /// Mean of the sampled outputs.
    pub point: Vec<f64>,
    /// Root-sum-square of the per-dimension standard deviations. A raw
    /// dispersion; the sample distribution is not assumed Gaussian.
    pub sigma_mm: f64,
    pub per_dim_std_mm: Vec<f64>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub pearson_r: f64,
}

/// `n` forward passes of `input` under independent dropout masks drawn from
/// one seeded stream.
pub fn mc_samples(model: &MlpModel, input: &[f64], n: usize, rate: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mc_samples_with(model, input, n, rate, &mut rng)
}

fn mc_samples_with(model: &MlpModel, input: &[f64], n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if n < 2 {
        return Err(Error::domain("need at least 2 Monte-Carlo samples"));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::domain(format!("dropout rate {rate} outside [0, 1)")));
    }
    (0..n)
        .map(|_| {
            let mask = DropoutMask::sample(model.hidden_dims(), rate, rng);
            model.forward(input, Some(&mask))
        })
        .collect()
}

/// Per-dimension sample standard deviation (Welford), combined by
/// root-sum-square.
pub fn spatial_sigma(samples: &[Vec<f64>]) -> Result<UncertaintyEstimate> {
    if samples.len() < 2 {
        return Err(Error::domain("need at least 2 samples for a standard deviation"));
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::domain("samples differ in dimension"));
    }
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    for (i, s) in samples.iter().enumerate() {
        let k = (i + 1) as f64;
        for d in 0..dim {
            let delta = s[d] - mean[d];
            mean[d] += delta / k;
            m2[d] += delta * (s[d] - mean[d]);
        }
    }
    let n = samples.len();
    let per_dim_std_mm: Vec<f64> = m2.iter().map(|v| (v / (n - 1) as f64).sqrt()).collect();
    let sigma_mm = per_dim_std_mm.iter().map(|s| s * s).sum::<f64>().sqrt();
    Ok(UncertaintyEstimate {
        point: mean,
        sigma_mm,
        per_dim_std_mm,
        n_samples: n,
    })
}

/// Distance from `p` to the closest training point, by exhaustive scan.
pub fn nearest_training_distance<P: AsRef<[f64]>>(p: &[f64], training: &[P]) -> Result<f64> {
    if training.is_empty() {
        return Err(Error::domain("empty training set"));
    }
    let mut best = f64::INFINITY;
    for t in training {
        let t = t.as_ref();
        if t.len() != p.len() {
            return Err(Error::domain("training point dimension differs from query"));
        }
        let d2: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        best = best.min(d2);
    }
    Ok(best.sqrt())
}

/// Ordinary least squares line and Pearson correlation. Constant `ys` give
/// r = 0.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() {
        return Err(Error::domain("xs and ys differ in length"));
    }
    if xs.len() < 2 {
        return Err(Error::domain("need at least 2 points for a line"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if !(sxx > 0.0) {
        return Err(Error::domain("xs are all equal"));
    }
    let slope = sxy / sxx;
    let pearson_r = if syy > 0.0 {
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        pearson_r,
    })
}

/// MC-dropout uncertainty at every measurement of `grid`. Cell `i` draws
/// its masks from stream `i` of the seed, so the result does not depend on
/// scheduling.
pub fn uncertainty_map(model: &MlpModel, grid: &Grid2<Measurement>, n: usize, seed: u64) -> Result<Grid2<UncertaintyEstimate>> {
    let data = grid
        .data
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let samples = mc_samples_with(model, &model.layout.features(m), n, model.dropout_rate, &mut rng)?;
            spatial_sigma(&samples)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Grid2 {
        n_rows: grid.n_rows,
        n_cols: grid.n_cols,
        data,
    })
}

/// One c-arm placement used to collect planar training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub distance_mm: f64,
    pub gantry_deg: f64,
}

/// Planar board study: the phantom is moved between clusters of cells on
/// the lowest layer, each cluster is measured under several c-arm
/// alignments, and the evaluation board covers every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanarConfig {
    pub alignments: Vec<Alignment>,
    /// Top-left cells of the square training clusters.
    pub clusters: Vec<(usize, usize)>,
    pub cluster_size: usize,
    /// Index into `alignments` of the placement the full board is measured in.
    pub eval_alignment: usize,
    pub mc_samples: usize,
    pub moore_radius: usize,
    pub samples_per_position: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for PlanarConfig {
    fn default() -> Self {
        let alignments = [(70.0, 0.0), (90.0, 0.0), (110.0, 0.0), (150.0, 15.0), (200.0, 30.0), (300.0, 45.0)]
            .iter()
            .map(|&(distance_mm, gantry_deg)| Alignment { distance_mm, gantry_deg })
            .collect();
        Self {
            alignments,
            clusters: vec![(2, 2), (2, 14), (3, 26), (14, 8), (15, 21), (26, 3), (26, 15), (25, 26)],
            cluster_size: 3,
            eval_alignment: 1,
            mc_samples: DEFAULT_MC_SAMPLES,
            moore_radius: 3,
            samples_per_position: SAMPLES_PER_POSITION,
            train: TrainConfig::planar(),
            seed: 0,
        }
    }
}

impl PlanarConfig {
    pub fn validate(&self, spec: &GridSpec) -> Result<()> {
        if self.alignments.is_empty() {
            return Err(Error::config("planar.alignments", "must not be empty"));
        }
        if self.eval_alignment >= self.alignments.len() {
            return Err(Error::config("planar.eval_alignment", "must index into alignments"));
        }
        if self.cluster_size == 0 {
            return Err(Error::config("planar.cluster_size", "must be >= 1"));
        }
        for &(r, c) in &self.clusters {
            if r + self.cluster_size > spec.n_rows || c + self.cluster_size > spec.n_cols {
                return Err(Error::config("planar.clusters", format!("cluster at ({r}, {c}) leaves the board")));
            }
        }
        if self.clusters.is_empty() {
            return Err(Error::config("planar.clusters", "must not be empty"));
        }
        if self.mc_samples < 2 {
            return Err(Error::config("planar.mc_samples", "must be >= 2"));
        }
        if self.samples_per_position == 0 {
            return Err(Error::config("planar.samples_per_position", "must be >= 1"));
        }
        if self.train.spatial_dims != 2 {
            return Err(Error::config("planar.train.spatial_dims", "the planar model has 2 outputs"));
        }
        if !(self.train.dropout_rate > 0.0) {
            return Err(Error::config("planar.train.dropout_rate", "must be > 0 for Monte-Carlo dropout"));
        }
        self.train.validate()
    }

    pub fn training_cells(&self) -> Vec<(usize, usize)> {
        let mut cells: Vec<(usize, usize)> = self
            .clusters
            .iter()
            .flat_map(|&(r, c)| {
                (0..self.cluster_size).flat_map(move |dr| (0..self.cluster_size).map(move |dc| (r + dr, c + dc)))
            })
            .collect();
        cells.sort();
        cells.dedup();
        cells
    }
}

/// Everything the planar study produces, one value per board cell.
#[derive(Debug, Clone)]
pub struct PlanarReport {
    pub model: MlpModel,
    pub training: Vec<Dataset>,
    pub board: Grid2<Measurement>,
    pub uncertainty: Grid2<UncertaintyEstimate>,
    /// Moore-neighborhood absolute error of the compensated board.
    pub error_mm: Grid2<f64>,
    pub nearest_training_mm: Grid2<f64>,
    pub sigma_vs_error: LinearFit,
    pub sigma_vs_distance: LinearFit,
    /// Error RMSE of the cells within a distance bound, against the bound.
    pub rmse_vs_max_distance: LinearFit,
}

impl PlanarReport {
    /// Mean σ over cells whose nearest-training distance satisfies `keep`.
    pub fn mean_sigma_where(&self, keep: impl Fn(f64) -> bool) -> Option<f64> {
        let picked: Vec<f64> = self
            .nearest_training_mm
            .data
            .iter()
            .zip(&self.uncertainty.data)
            .filter(|(d, _)| keep(**d))
            .map(|(_, u)| u.sigma_mm)
            .collect();
        (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
    }
}

fn planar_cells(cells: impl IntoIterator<Item = (usize, usize)>) -> Vec<(Cell, Rotation)> {
    cells.into_iter().map(|(r, c)| (Cell::new(r, c, 0), Rotation::Deg0)).collect()
}

/// Measures the planar training clusters under every alignment.
pub fn planar_training_data(spec: &GridSpec, carm: &CArmModel, cfg: &PlanarConfig) -> Result<Vec<Dataset>> {
    let cells = planar_cells(cfg.training_cells());
    cfg.alignments
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let name = format!("planar_{i}");
            let s = carm.scenario(spec, &name, ScenarioRole::Train, a.distance_mm, a.gantry_deg, cfg.seed.wrapping_add(i as u64 + 1));
            measure_cells(&name, &s.distortion, spec, &cells, cfg.samples_per_position)
        })
        .collect()
}

/// Measures every board cell under the evaluation alignment, with a noise
/// stream separate from the training data.
pub fn planar_board(spec: &GridSpec, carm: &CArmModel, cfg: &PlanarConfig) -> Result<Grid2<Measurement>> {
    let a = cfg.alignments[cfg.eval_alignment];
    let s = carm.scenario(spec, "planar_board", ScenarioRole::Evaluation, a.distance_mm, a.gantry_deg, cfg.seed.wrapping_add(1000));
    let all = (0..spec.n_rows).flat_map(|r| (0..spec.n_cols).map(move |c| (r, c)));
    let ds = measure_cells("planar_board", &s.distortion, spec, &planar_cells(all), cfg.samples_per_position)?;
    Ok(Grid2 {
        n_rows: spec.n_rows,
        n_cols: spec.n_cols,
        data: ds.measurements,
    })
}

/// Trains the planar model on the cluster data of every alignment.
pub fn train_planar(spec: &GridSpec, carm: &CArmModel, cfg: &PlanarConfig) -> Result<(MlpModel, Vec<Dataset>)> {
    spec.validate()?;
    cfg.validate(spec)?;
    let training = planar_training_data(spec, carm, cfg)?;
    let pairs: Vec<_> = training.iter().flat_map(|d| d.pairs.iter().copied()).collect();
    let outcome = train(&pairs, &[], &cfg.train)?;
    Ok((outcome.model, training))
}

/// RMSE of `errors` over the cells whose distance is at most each edge, for
/// edges every `step_mm` up to the largest distance.
pub fn rmse_by_max_distance(distances: &[f64], errors: &[f64], step_mm: f64) -> Vec<(f64, f64)> {
    let far = distances.iter().copied().fold(0.0, f64::max);
    let mut out = Vec::new();
    let mut edge = step_mm;
    while edge < far + step_mm {
        let picked: Vec<f64> = distances.iter().zip(errors).filter(|(d, _)| **d <= edge).map(|(_, e)| *e).collect();
        if !picked.is_empty() {
            out.push((edge, (picked.iter().map(|e| e * e).sum::<f64>() / picked.len() as f64).sqrt()));
        }
        edge += step_mm;
    }
    out
}

/// Maps uncertainty, compensation error and training density over the
/// whole board for an already trained planar model.
pub fn analyze_planar(
    spec: &GridSpec,
    carm: &CArmModel,
    cfg: &PlanarConfig,
    model: MlpModel,
    training: Vec<Dataset>,
) -> Result<PlanarReport> {
    if model.layout.spatial_dims != 2 {
        return Err(Error::domain("uncertainty analysis needs a planar model with 2 outputs"));
    }
    if training.iter().all(|d| d.measurements.is_empty()) {
        return Err(Error::domain("empty training set"));
    }
    let board = planar_board(spec, carm, cfg)?;
    let uncertainty = uncertainty_map(&model, &board, cfg.mc_samples, cfg.seed)?;

    // planar error: both grids flattened onto the board plane
    let flat = |v: Vector3<f64>| Vector3::new(v.x, v.y, 0.0);
    let compensated = board.map(|m| Some(flat(model.compensate(m))));
    let gt = board.map(|m| flat(m.gt.position_mm));
    let error_mm = Grid2 {
        n_rows: board.n_rows,
        n_cols: board.n_cols,
        data: board
            .cells()
            .map(|cell| absolute_error_estimate(cell, &compensated, &gt, cfg.moore_radius))
            .collect::<Result<Vec<_>>>()?,
    };

    let train_xy: Vec<[f64; 2]> = training
        .iter()
        .flat_map(|d| d.measurements.iter().map(|m| [m.position_mm.x, m.position_mm.y]))
        .collect();
    let nearest_training_mm = Grid2 {
        n_rows: board.n_rows,
        n_cols: board.n_cols,
        data: board
            .data
            .iter()
            .map(|m| nearest_training_distance(&[m.position_mm.x, m.position_mm.y], &train_xy))
            .collect::<Result<Vec<_>>>()?,
    };

    let sigma: Vec<f64> = uncertainty.data.iter().map(|u| u.sigma_mm).collect();
    let sigma_vs_error = linear_fit(&sigma, &error_mm.data)?;
    let sigma_vs_distance = linear_fit(&nearest_training_mm.data, &sigma)?;
    let curve = rmse_by_max_distance(&nearest_training_mm.data, &error_mm.data, 5.0);
    let (edges, rmse): (Vec<f64>, Vec<f64>) = curve.into_iter().unzip();
    let rmse_vs_max_distance = linear_fit(&edges, &rmse)?;
    Ok(PlanarReport {
        model,
        training,
        board,
        uncertainty,
        error_mm,
        nearest_training_mm,
        sigma_vs_error,
        sigma_vs_distance,
        rmse_vs_max_distance,
    })
}

/// [`train_planar`] followed by [`analyze_planar`].
pub fn planar_study(spec: &GridSpec, carm: &CArmModel, cfg: &PlanarConfig) -> Result<PlanarReport> {
    let (model, training) = train_planar(spec, carm, cfg)?;
    analyze_planar(spec, carm, cfg, model, training)
}
