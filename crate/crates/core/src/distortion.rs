//! Synthetic field distortion, sensor noise and the vendor quality indicator.
//!
//! A scenario is a sum of exponentially decaying vector fields. Each source
//! pushes measured positions either radially away from its center or along a
//! fixed direction, with magnitude `amplitude * exp(-dist / decay)`.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    build_displacement_pairs, Cell, DisplacementPair, GridSpec, GroundTruthPoint, Measurement, Rotation,
};

/// Median sample count per recorded position.
pub const SAMPLES_PER_POSITION: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    Radial,
    Fixed([f64; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSource {
    pub center_mm: [f64; 3],
    pub amplitude_mm: f64,
    pub decay_mm: f64,
    pub direction: DirectionMode,
}

impl DistortionSource {
    /// Offset this source adds at `p`.
    pub fn offset(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let center = Vector3::from(self.center_mm);
        let rel = p - center;
        let dist = rel.norm();
        let unit = match self.direction {
            DirectionMode::Radial => {
                if dist == 0.0 {
                    return Vector3::zeros();
                }
                rel / dist
            }
            DirectionMode::Fixed(d) => {
                let d = Vector3::from(d);
                let n = d.norm();
                if n == 0.0 {
                    return Vector3::zeros();
                }
                d / n
            }
        };
        unit * (self.amplitude_mm * (-dist / self.decay_mm).exp())
    }
}

/// `Q = S * (eps - (b + m * r))` with `eps = epsilon_gain * |local distortion|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityModel {
    pub sensitivity: f64,
    pub offset: f64,
    pub slope: f64,
    pub epsilon_gain: f64,
}

impl QualityModel {
    /// Vendor parameters zeroed out (S=1, b=0, m=0).
    pub fn raw(epsilon_gain: f64) -> Self {
        Self {
            sensitivity: 1.0,
            offset: 0.0,
            slope: 0.0,
            epsilon_gain,
        }
    }
}

impl Default for QualityModel {
    fn default() -> Self {
        Self::raw(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionConfig {
    pub sources: Vec<DistortionSource>,
    pub noise_std_mm: f64,
    #[serde(default)]
    pub quality: QualityModel,
    pub seed: u64,
}

impl DistortionConfig {
    /// Undistorted laboratory setup.
    pub fn laboratory(noise_std_mm: f64, seed: u64) -> Self {
        Self {
            sources: Vec::new(),
            noise_std_mm,
            quality: QualityModel::default(),
            seed,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.noise_std_mm >= 0.0) || !self.noise_std_mm.is_finite() {
            return Err(Error::config(format!("{field}.noise_std_mm"), "must be finite and >= 0"));
        }
        for (i, s) in self.sources.iter().enumerate() {
            if !(s.amplitude_mm >= 0.0) {
                return Err(Error::config(format!("{field}.sources[{i}].amplitude_mm"), "must be >= 0"));
            }
            if !(s.decay_mm > 0.0) {
                return Err(Error::config(format!("{field}.sources[{i}].decay_mm"), "must be > 0"));
            }
        }
        Ok(())
    }

    pub fn offset(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.sources.iter().map(|s| s.offset(p)).sum()
    }
}

/// C-arm style scenario: one radial source `distance_mm + standoff_mm` from
/// the board center, swung about the board's row axis by `gantry_deg`.
///
/// `standoff_mm` is the offset between the nominal distance and the
/// effective center of the distorting metal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CArmPlacement {
    pub distance_mm: f64,
    pub gantry_deg: f64,
    pub amplitude_mm: f64,
    pub decay_mm: f64,
    #[serde(default)]
    pub standoff_mm: f64,
}

impl CArmPlacement {
    pub fn source(&self, spec: &GridSpec) -> DistortionSource {
        let (cx, cy) = spec.center_xy();
        let g = self.gantry_deg.to_radians();
        let reach = self.distance_mm + self.standoff_mm;
        DistortionSource {
            center_mm: [cx, cy + reach * g.sin(), -reach * g.cos()],
            amplitude_mm: self.amplitude_mm,
            decay_mm: self.decay_mm,
            direction: DirectionMode::Radial,
        }
    }
}

/// Deterministic distorted position (no noise).
pub fn distort(config: &DistortionConfig, p: &Vector3<f64>) -> Vector3<f64> {
    p + config.offset(p)
}

pub fn quality_of(qm: &QualityModel, distortion_magnitude_mm: f64, range_mm: f64) -> f64 {
    let eps = qm.epsilon_gain * distortion_magnitude_mm;
    qm.sensitivity * (eps - (qm.offset + qm.slope * range_mm))
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let (_, &mut upper, _) = values.select_nth_unstable_by(n / 2, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Coordinate-wise median of `n_samples` noisy readings of `gt_point`.
pub fn sample_measurement(
    config: &DistortionConfig,
    gt_point: &GroundTruthPoint,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Measurement> {
    if n_samples == 0 {
        return Err(Error::domain("n_samples must be >= 1"));
    }
    let p = gt_point.position_mm;
    let offset = config.offset(&p);
    let clean = p + offset;
    let noise = Normal::new(0.0, config.noise_std_mm).map_err(|e| Error::domain(e.to_string()))?;
    let mut axes = [
        Vec::with_capacity(n_samples),
        Vec::with_capacity(n_samples),
        Vec::with_capacity(n_samples),
    ];
    for _ in 0..n_samples {
        for (k, axis) in axes.iter_mut().enumerate() {
            axis.push(clean[k] + noise.sample(rng));
        }
    }
    let position_mm = Vector3::new(median(&mut axes[0]), median(&mut axes[1]), median(&mut axes[2]));
    Ok(Measurement {
        position_mm,
        quality: quality_of(&config.quality, offset.norm(), p.norm()),
        gt: *gt_point,
    })
}

/// Measurements and derived displacement pairs for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub measurements: Vec<Measurement>,
    pub pairs: Vec<DisplacementPair>,
}

impl Dataset {
    pub fn from_measurements(name: impl Into<String>, measurements: Vec<Measurement>) -> Self {
        let pairs = build_displacement_pairs(&measurements);
        Self {
            name: name.into(),
            measurements,
            pairs,
        }
    }
}

/// Measures every calibrated cell at every elevation, in both rotations.
pub fn generate_dataset(name: &str, config: &DistortionConfig, spec: &GridSpec) -> Result<Dataset> {
    generate_dataset_with_samples(name, config, spec, SAMPLES_PER_POSITION)
}

pub fn generate_dataset_with_samples(
    name: &str,
    config: &DistortionConfig,
    spec: &GridSpec,
    n_samples: usize,
) -> Result<Dataset> {
    spec.validate()?;
    let mut cells = Vec::new();
    for rotation in [Rotation::Deg0, Rotation::Deg180] {
        for &(row, col) in &spec.calibrated {
            for elevation in 0..spec.n_elevations {
                cells.push((Cell::new(row, col, elevation), rotation));
            }
        }
    }
    measure_cells(name, config, spec, &cells, n_samples)
}

/// Measures an explicit list of cells in order with one seeded stream.
pub fn measure_cells(
    name: &str,
    config: &DistortionConfig,
    spec: &GridSpec,
    cells: &[(Cell, Rotation)],
    n_samples: usize,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let measurements = cells
        .iter()
        .map(|&(cell, rotation)| {
            let gt = GroundTruthPoint::new(spec, cell, rotation)?;
            sample_measurement(config, &gt, n_samples, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_measurements(name, measurements))
}
