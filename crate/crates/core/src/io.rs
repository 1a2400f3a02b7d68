//! Dataset CSV, model JSON and small file helpers.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::distortion::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{Cell, Compensator, GroundTruthPoint, Measurement, Rotation};
use crate::nn::{InputLayout, MlpModel, Normalizer};
use crate::poly::PolyModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetRow {
    scenario: String,
    point_id: usize,
    row: usize,
    col: usize,
    elevation: usize,
    rotation: u32,
    meas_x_mm: f64,
    meas_y_mm: f64,
    meas_z_mm: f64,
    quality: f64,
    gt_x_mm: f64,
    gt_y_mm: f64,
    gt_z_mm: f64,
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

/// Serializes `rows` to a CSV file with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

pub fn dataset_path(out_dir: &Path, scenario: &str) -> PathBuf {
    out_dir.join("data").join(format!("{scenario}.csv"))
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let rows = ds.measurements.iter().enumerate().map(|(i, m)| DatasetRow {
        scenario: ds.name.clone(),
        point_id: i,
        row: m.gt.cell.row,
        col: m.gt.cell.col,
        elevation: m.gt.cell.elevation,
        rotation: m.gt.rotation.degrees(),
        meas_x_mm: m.position_mm.x,
        meas_y_mm: m.position_mm.y,
        meas_z_mm: m.position_mm.z,
        quality: m.quality,
        gt_x_mm: m.gt.position_mm.x,
        gt_y_mm: m.gt.position_mm.y,
        gt_z_mm: m.gt.position_mm.z,
    });
    write_csv(path, rows)
}

/// Reads a dataset file and rebuilds its displacement pairs.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let rows: Vec<DatasetRow> = read_csv(path)?;
    let name = rows.first().map(|r| r.scenario.clone()).unwrap_or_else(|| {
        path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    });
    let mut measurements = Vec::with_capacity(rows.len());
    for (i, r) in rows.into_iter().enumerate() {
        if r.scenario != name {
            return Err(Error::parse(path, format!("row {i}: scenario `{}` differs from `{name}`", r.scenario)));
        }
        if r.point_id != i {
            return Err(Error::parse(path, format!("row {i}: point_id {} out of sequence", r.point_id)));
        }
        let rotation = Rotation::from_degrees(r.rotation)
            .ok_or_else(|| Error::parse(path, format!("row {i}: rotation {} is not 0 or 180", r.rotation)))?;
        measurements.push(Measurement {
            position_mm: Vector3::new(r.meas_x_mm, r.meas_y_mm, r.meas_z_mm),
            quality: r.quality,
            gt: GroundTruthPoint {
                cell: Cell::new(r.row, r.col, r.elevation),
                rotation,
                position_mm: Vector3::new(r.gt_x_mm, r.gt_y_mm, r.gt_z_mm),
            },
        });
    }
    Ok(Dataset::from_measurements(name, measurements))
}

/// Provenance stored with every model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: u64,
    pub config_hash: String,
    /// What the model was trained for, e.g. `online` or `offline:carm_7cm`.
    pub purpose: String,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    /// `fan_out` rows of `fan_in` weights.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpFile {
    pub layer_dims: Vec<usize>,
    pub layers: Vec<LayerFile>,
    pub leaky_slope: f64,
    pub dropout_rate: f64,
    #[serde(default)]
    pub residual: bool,
    pub layout: InputLayout,
    pub input_norm: Normalizer,
    pub output_norm: Normalizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelBody {
    Mlp(MlpFile),
    Poly(PolyModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: ModelBody,
    pub metadata: ModelMetadata,
}

impl MlpFile {
    pub fn from_model(m: &MlpModel) -> Self {
        let dims = m.layer_dims().to_vec();
        let layers = (0..m.n_layers())
            .map(|l| LayerFile {
                weights: m.weights(l).chunks(dims[l]).map(<[f64]>::to_vec).collect(),
                biases: m.biases(l).to_vec(),
            })
            .collect();
        Self {
            layer_dims: dims,
            layers,
            leaky_slope: m.leaky_slope,
            dropout_rate: m.dropout_rate,
            residual: m.residual,
            layout: m.layout,
            input_norm: m.input_norm.clone(),
            output_norm: m.output_norm.clone(),
        }
    }

    pub fn to_model(&self) -> Result<MlpModel> {
        let mut m = MlpModel::zeros(self.layer_dims.clone(), self.layout, self.input_norm.clone(), self.output_norm.clone())?;
        if self.layers.len() != m.n_layers() {
            return Err(Error::domain(format!("{} layers stored, dims imply {}", self.layers.len(), m.n_layers())));
        }
        let mut params = Vec::with_capacity(m.params().len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            if layer.weights.len() != fan_out || layer.weights.iter().any(|r| r.len() != fan_in) || layer.biases.len() != fan_out {
                return Err(Error::domain(format!("layer {l} does not match dims {fan_in}x{fan_out}")));
            }
            params.extend(layer.weights.iter().flatten());
            params.extend(&layer.biases);
        }
        m.set_params(params)?;
        m.leaky_slope = self.leaky_slope;
        m.dropout_rate = self.dropout_rate;
        m.residual = self.residual;
        Ok(m)
    }
}

/// A trained compensator of either family.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Mlp(MlpModel),
    Poly(PolyModel),
}

impl Compensator for Model {
    fn compensate(&self, m: &Measurement) -> Vector3<f64> {
        match self {
            Model::Mlp(n) => n.compensate(m),
            Model::Poly(p) => p.compensate(m),
        }
    }
}

impl Model {
    pub fn layout(&self) -> InputLayout {
        match self {
            Model::Mlp(n) => n.layout,
            Model::Poly(p) => p.layout,
        }
    }

    pub fn as_mlp(&self) -> Option<&MlpModel> {
        match self {
            Model::Mlp(n) => Some(n),
            Model::Poly(_) => None,
        }
    }
}

pub fn save_model(path: &Path, model: &Model, metadata: ModelMetadata) -> Result<()> {
    let body = match model {
        Model::Mlp(m) => ModelBody::Mlp(MlpFile::from_model(m)),
        Model::Poly(p) => ModelBody::Poly(p.clone()),
    };
    write_json(path, &ModelFile { model: body, metadata })
}

pub fn load_model(path: &Path) -> Result<(Model, ModelMetadata)> {
    let file: ModelFile = read_json(path)?;
    let model = match file.model {
        ModelBody::Mlp(f) => Model::Mlp(f.to_model()?),
        ModelBody::Poly(p) => Model::Poly(p.restore()?),
    };
    Ok((model, file.metadata))
}
