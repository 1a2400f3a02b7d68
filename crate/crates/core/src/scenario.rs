//! Named distortion scenarios and their train/validation/evaluation roles.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distortion::{CArmPlacement, DirectionMode, Dataset, DistortionConfig, DistortionSource, QualityModel};
use crate::error::{Error, Result};
use crate::geometry::{GridSpec, Measurement, Rotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioRole {
    Train,
    Validation,
    Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub role: ScenarioRole,
    pub distortion: DistortionConfig,
}

/// Shape shared by every scenario of the default suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CArmModel {
    pub amplitude_mm: f64,
    pub decay_mm: f64,
    pub standoff_mm: f64,
    pub noise_std_mm: f64,
    pub quality_gain: f64,
    /// Inherent distortion of the operating room, present in every c-arm
    /// scenario.
    pub room: Vec<DistortionSource>,
    /// Inherent distortion of the laboratory, which has no c-arm.
    pub laboratory: Vec<DistortionSource>,
}

impl Default for CArmModel {
    fn default() -> Self {
        Self {
            amplitude_mm: 40.0,
            decay_mm: 50.0,
            standoff_mm: 0.0,
            noise_std_mm: 0.1,
            quality_gain: 1.0,
            room: vec![DistortionSource {
                center_mm: [-200.0, 60.0, -50.0],
                amplitude_mm: 35.0,
                decay_mm: 200.0,
                direction: DirectionMode::Radial,
            }],
            laboratory: vec![DistortionSource {
                center_mm: [350.0, -150.0, -80.0],
                amplitude_mm: 35.0,
                decay_mm: 200.0,
                direction: DirectionMode::Radial,
            }],
        }
    }
}

impl CArmModel {
    fn config(&self, sources: Vec<DistortionSource>, seed: u64) -> DistortionConfig {
        DistortionConfig {
            sources,
            noise_std_mm: self.noise_std_mm,
            quality: QualityModel::raw(self.quality_gain),
            seed,
        }
    }

    pub fn scenario(&self, spec: &GridSpec, name: &str, role: ScenarioRole, distance_mm: f64, gantry_deg: f64, seed: u64) -> Scenario {
        let tube = CArmPlacement {
            distance_mm,
            gantry_deg,
            amplitude_mm: self.amplitude_mm,
            decay_mm: self.decay_mm,
            standoff_mm: self.standoff_mm,
        }
        .source(spec);
        Scenario {
            name: name.to_string(),
            role,
            distortion: self.config(std::iter::once(tube).chain(self.room.iter().cloned()).collect(), seed),
        }
    }

    pub fn laboratory_scenario(&self, name: &str, role: ScenarioRole, seed: u64) -> Scenario {
        Scenario {
            name: name.to_string(),
            role,
            distortion: self.config(self.laboratory.clone(), seed),
        }
    }
}

/// Nine scenarios: four near c-arm placements for training, the laboratory
/// for validation, and four held-out placements (two farther, two with a
/// swung gantry).
pub fn default_suite(spec: &GridSpec, model: &CArmModel, seed: u64) -> Vec<Scenario> {
    use ScenarioRole::*;
    let table: [(&str, ScenarioRole, f64, f64); 8] = [
        ("carm_7cm", Train, 70.0, 0.0),
        ("carm_8cm", Train, 80.0, 0.0),
        ("carm_9cm", Train, 90.0, 0.0),
        ("carm_10cm", Train, 100.0, 0.0),
        ("carm_11cm", Evaluation, 110.0, 0.0),
        ("carm_12cm", Evaluation, 120.0, 0.0),
        ("carm_30cm_gantry30", Evaluation, 300.0, 30.0),
        ("carm_50cm_gantry60", Evaluation, 500.0, 60.0),
    ];
    let mut out: Vec<Scenario> = table
        .iter()
        .enumerate()
        .map(|(i, &(name, role, d, g))| model.scenario(spec, name, role, d, g, seed.wrapping_add(i as u64 + 1)))
        .collect();
    out.insert(4, model.laboratory_scenario("laboratory", Validation, seed.wrapping_add(100)));
    out
}

/// Spatially disjoint train/validation/test parts of one scenario.
#[derive(Debug, Clone)]
pub struct OfflineSplit {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Splits a dataset 45/5/50 by cell groups. A group is one board cell in one
/// phantom rotation with all of its elevations, so no physical location is
/// shared between parts. Groups of both rotations are interleaved after a
/// seeded shuffle; test takes the first half, validation the next 5%.
pub fn offline_split(dataset: &Dataset, seed: u64) -> Result<OfflineSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_rotation: Vec<Vec<(usize, usize, Rotation)>> = Vec::new();
    for rotation in [Rotation::Deg0, Rotation::Deg180] {
        let mut cells: Vec<(usize, usize, Rotation)> = dataset
            .measurements
            .iter()
            .filter(|m| m.gt.rotation == rotation)
            .map(|m| (m.gt.cell.row, m.gt.cell.col, rotation))
            .collect();
        cells.sort();
        cells.dedup();
        cells.shuffle(&mut rng);
        per_rotation.push(cells);
    }
    let longest = per_rotation.iter().map(Vec::len).max().unwrap_or(0);
    let groups: Vec<(usize, usize, Rotation)> = (0..longest)
        .flat_map(|i| per_rotation.iter().filter_map(move |g| g.get(i).copied()))
        .collect();
    let n = groups.len();
    let n_test = (n as f64 * 0.5).round() as usize;
    let n_val = ((n as f64 * 0.05).round() as usize).max(1);
    if n < n_test + n_val + 1 {
        return Err(Error::domain(format!("{n} cell groups are too few for a 45/5/50 split")));
    }
    let part = |range: std::ops::Range<usize>, suffix: &str| {
        let chosen = &groups[range];
        let ms: Vec<Measurement> = dataset
            .measurements
            .iter()
            .filter(|m| chosen.contains(&(m.gt.cell.row, m.gt.cell.col, m.gt.rotation)))
            .copied()
            .collect();
        Dataset::from_measurements(format!("{}_{suffix}", dataset.name), ms)
    };
    Ok(OfflineSplit {
        test: part(0..n_test, "test"),
        val: part(n_test..n_test + n_val, "val"),
        train: part(n_test + n_val..n, "train"),
    })
}
