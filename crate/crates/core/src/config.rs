//! Experiment configuration read from TOML.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distortion::SAMPLES_PER_POSITION;
use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::navsim::{linspace, DEFAULT_PATH_MM};
use crate::nn::TrainConfig;
use crate::poly::{DEFAULT_DEGREE, MAX_DEGREE};
use crate::scenario::{default_suite, CArmModel, Scenario, ScenarioRole};
use crate::uncertainty::PlanarConfig;

/// Polynomial baseline settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolyConfig {
    pub degree: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for PolyConfig {
    fn default() -> Self {
        Self {
            degree: DEFAULT_DEGREE,
            learning_rate: 0.01,
            epochs: 500,
            batch_size: 512,
        }
    }
}

impl PolyConfig {
    /// Optimizer settings for [`crate::poly::train_poly`], sharing the seed
    /// and normalization of the network run it is compared with.
    pub fn train_config(&self, ann: &TrainConfig) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            final_lr_fraction: 1.0,
            ..ann.clone()
        }
    }
}

/// Offline (same-scenario) training settings. The validation part is a
/// single cell column whose pairs are purely vertical, too weak a signal
/// for epoch selection, so training runs a fixed number of epochs. With
/// only 27 training measurements, wider layers are far less sensitive to
/// the initialization seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OfflineConfig {
    pub split_seed: u64,
    pub train: TrainConfig,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            split_seed: 0,
            train: TrainConfig {
                epochs: 300,
                early_stopping: false,
                hidden: vec![128; 3],
                ..TrainConfig::default()
            },
        }
    }
}

/// Trajectory and recalibration sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavConfig {
    pub path_length_mm: f64,
    /// Candidate paths; the sweep runs on the one closest to and the one
    /// farthest from the training data.
    pub candidate_paths: usize,
    pub taus_mm: Vec<f64>,
    pub intervals_mm: Vec<f64>,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            path_length_mm: DEFAULT_PATH_MM,
            candidate_paths: 16,
            taus_mm: linspace(0.0, 6.0, 25),
            intervals_mm: linspace(0.0, DEFAULT_PATH_MM, 28),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub samples_per_position: usize,
    pub grid: GridSpec,
    pub carm: CArmModel,
    /// Explicit scenario list; the default suite built from `carm` and
    /// `seed` when absent.
    pub scenarios: Option<Vec<Scenario>>,
    pub train: TrainConfig,
    pub poly: PolyConfig,
    pub offline: OfflineConfig,
    pub planar: PlanarConfig,
    pub nav: NavConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("out"),
            samples_per_position: SAMPLES_PER_POSITION,
            grid: GridSpec::default(),
            carm: CArmModel::default(),
            scenarios: None,
            train: TrainConfig::default(),
            poly: PolyConfig::default(),
            offline: OfflineConfig::default(),
            planar: PlanarConfig::default(),
            nav: NavConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses `text` as overrides of the defaults. Tables merge key by key,
    /// so a partial `[planar.train]` keeps the planar defaults for the rest.
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let located = |e: toml::de::Error| {
            let msg = e.message().to_string();
            match e.span().and_then(|s| key_at(text, s.start)) {
                Some(key) => Error::config(key, msg),
                None => Error::parse(origin, msg),
            }
        };
        // type-check the raw text first: errors there carry a span
        toml::from_str::<Self>(text).map_err(located)?;
        let user: toml::Table = text.parse().map_err(located)?;
        let mut merged = toml::Table::try_from(Self::default()).expect("config serializes");
        merge(&mut merged, user);
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::parse(origin, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form, hex encoded. The output
    /// directory is left out so relocated runs stay byte-identical.
    pub fn hash(&self) -> String {
        let canonical = Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn scenarios(&self) -> Vec<Scenario> {
        match &self.scenarios {
            Some(s) => s.clone(),
            None => default_suite(&self.grid, &self.carm, self.seed),
        }
    }

    pub fn scenario(&self, name: &str) -> Result<Scenario> {
        self.scenarios()
            .into_iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::config("scenario", format!("no scenario named `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.samples_per_position == 0 {
            return Err(Error::config("samples_per_position", "must be >= 1"));
        }
        let scenarios = self.scenarios();
        let mut names = HashSet::new();
        for (i, s) in scenarios.iter().enumerate() {
            if s.name.is_empty() || s.name.contains(['/', '\\']) {
                return Err(Error::config(format!("scenarios[{i}].name"), "must be a non-empty file-safe name"));
            }
            if !names.insert(s.name.as_str()) {
                return Err(Error::config(format!("scenarios[{i}].name"), format!("duplicate scenario `{}`", s.name)));
            }
            s.distortion.validate(&format!("scenarios[{i}].distortion"))?;
        }
        if !scenarios.iter().any(|s| s.role == ScenarioRole::Train) {
            return Err(Error::config("scenarios", "at least one scenario must have role `train`"));
        }
        if scenarios.iter().filter(|s| s.role == ScenarioRole::Validation).count() > 1 {
            return Err(Error::config("scenarios", "at most one scenario may have role `validation`"));
        }
        self.train.validate().map_err(|e| prefix("train", e))?;
        if self.poly.degree > MAX_DEGREE {
            return Err(Error::config("poly.degree", format!("must lie in 0..={MAX_DEGREE}")));
        }
        if !(self.poly.learning_rate > 0.0) {
            return Err(Error::config("poly.learning_rate", "must be > 0"));
        }
        if self.poly.batch_size == 0 {
            return Err(Error::config("poly.batch_size", "must be >= 1"));
        }
        self.offline.train.validate().map_err(|e| prefix("offline.train", e))?;
        self.planar.validate(&self.grid)?;
        if !(self.nav.path_length_mm >= 0.0) {
            return Err(Error::config("nav.path_length_mm", "must be >= 0"));
        }
        if self.nav.candidate_paths == 0 {
            return Err(Error::config("nav.candidate_paths", "must be >= 1"));
        }
        if self.nav.taus_mm.is_empty() || self.nav.taus_mm.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::config("nav.taus_mm", "must be a non-empty list of values >= 0"));
        }
        if self.nav.intervals_mm.is_empty() || self.nav.intervals_mm.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::config("nav.intervals_mm", "must be a non-empty list of values >= 0"));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, reason } => Error::config(format!("{section}.{field}"), reason),
        other => other,
    }
}

/// Dotted key of the TOML line containing byte `offset`, qualified by the
/// nearest table header above it.
fn key_at(text: &str, offset: usize) -> Option<String> {
    let upto = &text[..offset.min(text.len())];
    let line_start = upto.rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("");
    let key = line.split('=').next()?.trim();
    if key.is_empty() || key.starts_with('[') {
        return None;
    }
    let table = upto[..line_start]
        .lines()
        .rev()
        .find_map(|l| {
            let l = l.trim();
            l.strip_prefix('[').and_then(|r| r.split(']').next()).map(str::to_string)
        });
    Some(match table {
        Some(t) if !t.is_empty() => format!("{}.{key}", t.trim_matches(['[', ']'])),
        _ => key.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn empty_file_is_default() {
        let cfg = ExperimentConfig::from_toml_str("", Path::new("x")).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.scenarios().len(), 9);
    }

    #[test]
    fn bad_value_names_the_field() {
        let err = ExperimentConfig::from_toml_str("[train]\nlearning_rate = -1.0\n", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("train.learning_rate"), "{err}");
        let err = ExperimentConfig::from_toml_str("[poly]\ndegree = 9\n", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("poly.degree"), "{err}");
        let err = ExperimentConfig::from_toml_str("[grid]\npitch_mm = \"wide\"\n", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("grid.pitch_mm"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn partial_tables_keep_section_defaults() {
        let text = "[planar.train]\nepochs = 5\n[offline.train]\nepochs = 7\n";
        let cfg = ExperimentConfig::from_toml_str(text, Path::new("x")).unwrap();
        let d = ExperimentConfig::default();
        assert_eq!(cfg.planar.train, TrainConfig { epochs: 5, ..d.planar.train });
        assert_eq!(cfg.offline.train, TrainConfig { epochs: 7, ..d.offline.train });
    }

    #[test]
    fn duplicate_scenarios_rejected() {
        let mut cfg = ExperimentConfig::default();
        let mut s = cfg.scenarios();
        s.push(s[0].clone());
        cfg.scenarios = Some(s);
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn seed_changes_hash() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 2, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
        let c = ExperimentConfig { out_dir: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash(), c.hash());
    }
}
