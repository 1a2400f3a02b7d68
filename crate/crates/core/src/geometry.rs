//! Phantom grid geometry, displacement pairs and Moore neighborhoods.
//!
//! The measurement board is a regular grid of stud positions. Rows map to the
//! x axis and columns to the y axis, both scaled by the stud pitch; elevation
//! indices are scaled by the brick height. A phantom rotated by 180° about its
//! vertical axis places each cell at the point mirrored through the board
//! center.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Height of one interlocking brick.
pub const BRICK_HEIGHT_MM: f64 = 9.6;

/// Standard interlocking-brick stud spacing.
pub const STUD_PITCH_MM: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub pitch_mm: f64,
    pub elevation_step_mm: f64,
    pub n_rows: usize,
    pub n_cols: usize,
    pub n_elevations: usize,
    /// `(row, col)` cells carrying a calibrated measurement position.
    pub calibrated: Vec<(usize, usize)>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            pitch_mm: STUD_PITCH_MM,
            elevation_step_mm: BRICK_HEIGHT_MM,
            n_rows: 32,
            n_cols: 32,
            n_elevations: 3,
            calibrated: vec![
                (3, 5),
                (5, 17),
                (4, 28),
                (10, 10),
                (12, 23),
                (17, 3),
                (19, 15),
                (21, 26),
                (26, 8),
                (28, 20),
            ],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.pitch_mm > 0.0) {
            return Err(Error::config("grid.pitch_mm", "must be > 0"));
        }
        if !(self.elevation_step_mm > 0.0) {
            return Err(Error::config("grid.elevation_step_mm", "must be > 0"));
        }
        if self.n_rows == 0 || self.n_cols == 0 || self.n_elevations == 0 {
            return Err(Error::config("grid", "dimensions must be non-zero"));
        }
        for &(r, c) in &self.calibrated {
            if r >= self.n_rows || c >= self.n_cols {
                return Err(Error::config(
                    "grid.calibrated",
                    format!("cell ({r}, {c}) outside {}x{} board", self.n_rows, self.n_cols),
                ));
            }
        }
        Ok(())
    }

    /// Horizontal center of the board, about which a 180° rotation pivots.
    pub fn center_xy(&self) -> (f64, f64) {
        (
            (self.n_rows - 1) as f64 * self.pitch_mm / 2.0,
            (self.n_cols - 1) as f64 * self.pitch_mm / 2.0,
        )
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.row < self.n_rows && cell.col < self.n_cols && cell.elevation < self.n_elevations
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    pub elevation: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize, elevation: usize) -> Self {
        Self { row, col, elevation }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rotation {
    Deg0,
    Deg180,
}

impl Rotation {
    pub fn degrees(self) -> u32 {
        match self {
            Rotation::Deg0 => 0,
            Rotation::Deg180 => 180,
        }
    }

    pub fn from_degrees(deg: u32) -> Option<Self> {
        match deg {
            0 => Some(Rotation::Deg0),
            180 => Some(Rotation::Deg180),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthPoint {
    pub cell: Cell,
    pub rotation: Rotation,
    pub position_mm: Vector3<f64>,
}

impl GroundTruthPoint {
    pub fn new(spec: &GridSpec, cell: Cell, rotation: Rotation) -> Result<Self> {
        Ok(Self {
            cell,
            rotation,
            position_mm: grid_position(spec, cell, rotation)?,
        })
    }
}

/// One tracked pose: median position and raw quality indicator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub position_mm: Vector3<f64>,
    pub quality: f64,
    pub gt: GroundTruthPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisplacementPair {
    pub m1: Measurement,
    pub m2: Measurement,
    pub gt_distance_mm: f64,
}

impl DisplacementPair {
    pub fn new(m1: Measurement, m2: Measurement) -> Self {
        let gt_distance_mm = (m2.gt.position_mm - m1.gt.position_mm).norm();
        Self { m1, m2, gt_distance_mm }
    }

    pub fn swapped(&self) -> Self {
        Self {
            m1: self.m2,
            m2: self.m1,
            gt_distance_mm: self.gt_distance_mm,
        }
    }
}

/// Maps a measured pose to a compensated position.
pub trait Compensator {
    fn compensate(&self, m: &Measurement) -> Vector3<f64>;
}

/// Pass-through compensator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Compensator for Identity {
    fn compensate(&self, m: &Measurement) -> Vector3<f64> {
        m.position_mm
    }
}

impl<F> Compensator for F
where
    F: Fn(&Vector3<f64>) -> Vector3<f64>,
{
    fn compensate(&self, m: &Measurement) -> Vector3<f64> {
        self(&m.position_mm)
    }
}

/// Physical position of a board cell.
pub fn grid_position(spec: &GridSpec, cell: Cell, rotation: Rotation) -> Result<Vector3<f64>> {
    if !spec.contains(cell) {
        return Err(Error::domain(format!(
            "cell {cell:?} outside {}x{}x{} grid",
            spec.n_rows, spec.n_cols, spec.n_elevations
        )));
    }
    let x = cell.row as f64 * spec.pitch_mm;
    let y = cell.col as f64 * spec.pitch_mm;
    let z = cell.elevation as f64 * spec.elevation_step_mm;
    Ok(match rotation {
        Rotation::Deg0 => Vector3::new(x, y, z),
        Rotation::Deg180 => {
            let (cx, cy) = spec.center_xy();
            Vector3::new(2.0 * cx - x, 2.0 * cy - y, z)
        }
    })
}

/// All unordered pairs within each rotation group, in input order.
pub fn build_displacement_pairs(points: &[Measurement]) -> Vec<DisplacementPair> {
    let mut pairs = Vec::new();
    for rotation in [Rotation::Deg0, Rotation::Deg180] {
        let group: Vec<&Measurement> = points.iter().filter(|m| m.gt.rotation == rotation).collect();
        for (i, a) in group.iter().enumerate() {
            for b in &group[i + 1..] {
                pairs.push(DisplacementPair::new(**a, **b));
            }
        }
    }
    pairs
}

/// `||c(x2) - c(x1)|| - y`, with `c` the identity when no compensator is given.
pub fn displacement_error(pair: &DisplacementPair, compensator: Option<&dyn Compensator>) -> f64 {
    let (a, b) = match compensator {
        Some(c) => (c.compensate(&pair.m1), c.compensate(&pair.m2)),
        None => (pair.m1.position_mm, pair.m2.position_mm),
    };
    (b - a).norm() - pair.gt_distance_mm
}

pub fn displacement_rmse(pairs: &[DisplacementPair], compensator: Option<&dyn Compensator>) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let ss: f64 = pairs
        .iter()
        .map(|p| displacement_error(p, compensator).powi(2))
        .sum();
    (ss / pairs.len() as f64).sqrt()
}

/// Cells within Chebyshev distance `radius` of `cell`, excluding the center.
pub fn moore_neighbors(cell: (usize, usize), radius: usize, bounds: (usize, usize)) -> Vec<(usize, usize)> {
    let (r0, c0) = (cell.0 as isize, cell.1 as isize);
    let rad = radius as isize;
    let mut out = Vec::with_capacity((2 * radius + 1).pow(2));
    for r in (r0 - rad)..=(r0 + rad) {
        for c in (c0 - rad)..=(c0 + rad) {
            if (r, c) == (r0, c0) || r < 0 || c < 0 || r >= bounds.0 as isize || c >= bounds.1 as isize {
                continue;
            }
            out.push((r as usize, c as usize));
        }
    }
    out
}

/// Dense row-major 2D field over board cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2<T> {
    pub n_rows: usize,
    pub n_cols: usize,
    pub data: Vec<T>,
}

impl<T> Grid2<T> {
    pub fn from_fn(n_rows: usize, n_cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in 0..n_rows {
            for c in 0..n_cols {
                data.push(f(r, c));
            }
        }
        Self { n_rows, n_cols, data }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<&T> {
        (row < self.n_rows && col < self.n_cols).then(|| &self.data[row * self.n_cols + col])
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid2<U> {
        Grid2 {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_rows).flat_map(move |r| (0..self.n_cols).map(move |c| (r, c)))
    }
}

/// Mean absolute neighbor-distance error around `cell`.
///
/// For every Moore neighbor that has data, compares the measured distance to
/// the center against the ground-truth distance.
pub fn absolute_error_estimate(
    cell: (usize, usize),
    measured: &Grid2<Option<Vector3<f64>>>,
    gt: &Grid2<Vector3<f64>>,
    radius: usize,
) -> Result<f64> {
    let center = measured
        .get(cell.0, cell.1)
        .copied()
        .flatten()
        .ok_or_else(|| Error::domain(format!("no measurement at cell {cell:?}")))?;
    let center_gt = *gt
        .get(cell.0, cell.1)
        .ok_or_else(|| Error::domain(format!("cell {cell:?} outside ground-truth grid")))?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, c) in moore_neighbors(cell, radius, (measured.n_rows, measured.n_cols)) {
        let (Some(Some(m)), Some(g)) = (measured.get(r, c), gt.get(r, c)) else {
            continue;
        };
        sum += ((m - center).norm() - (g - center_gt).norm()).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::domain(format!("cell {cell:?} has no neighbor with data")));
    }
    Ok(sum / n as f64)
}
