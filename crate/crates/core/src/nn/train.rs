//! Siamese mini-batch training on displacement pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::mlp::{accumulate_pair_gradients, DropoutMask, InputLayout, MlpModel, DEFAULT_LEAKY_SLOPE};
use super::normalizer::Normalizer;
use crate::distortion::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{displacement_rmse, DisplacementPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub dropout_rate: f64,
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub spatial_dims: usize,
    pub use_quality: bool,
    /// Fractional widening of the normalization window on each side.
    pub norm_margin: f64,
    /// Learning rate reached at the last epoch, as a fraction of the initial
    /// rate; decays geometrically in between. 1.0 keeps it constant.
    pub final_lr_fraction: f64,
    /// Start from the identity map (see [`MlpModel::init_pass_through`])
    /// instead of plain He initialization.
    pub pass_through: bool,
    /// Initial output weights of the units not used by the identity path.
    pub pass_through_scale: f64,
    /// Skip connection from the positional inputs to the output.
    pub residual: bool,
    /// Keep the epoch with the lowest validation RMSE; otherwise the last.
    pub early_stopping: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 512,
            epochs: 500,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            dropout_rate: 0.0,
            hidden: vec![32, 32, 32],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            spatial_dims: 3,
            use_quality: true,
            norm_margin: 0.05,
            final_lr_fraction: 1.0,
            pass_through: true,
            pass_through_scale: 0.0,
            residual: false,
            early_stopping: true,
        }
    }
}

impl TrainConfig {
    /// Two hidden layers of 64 units, planar output, 10% dropout.
    pub fn planar() -> Self {
        Self {
            hidden: vec![64, 64],
            spatial_dims: 2,
            dropout_rate: 0.1,
            learning_rate: 1e-3,
            pass_through: false,
            residual: true,
            ..Self::default()
        }
    }

    pub fn layout(&self) -> InputLayout {
        InputLayout {
            spatial_dims: self.spatial_dims,
            use_quality: self.use_quality,
        }
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.learning_rate;
        }
        let t = (epoch.saturating_sub(1)) as f64 / (self.epochs - 1) as f64;
        self.learning_rate * self.final_lr_fraction.powf(t)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::config("final_lr_fraction", "must lie in (0, 1]"));
        }
        if !matches!(self.spatial_dims, 2 | 3) {
            return Err(Error::config("spatial_dims", "must be 2 or 3"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    /// Entry 0 is the untrained network.
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Input normalizer over the union of pair endpoints.
pub fn fit_input_normalizer(pairs: &[DisplacementPair], layout: InputLayout, margin: f64) -> Result<Normalizer> {
    let rows: Vec<Vec<f64>> = pairs
        .iter()
        .flat_map(|p| [layout.features(&p.m1), layout.features(&p.m2)])
        .collect();
    Normalizer::fit(rows.iter().map(|r| r.as_slice()), margin)
}

pub fn train_on_datasets(train_sets: &[Dataset], val: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let pairs: Vec<DisplacementPair> = train_sets.iter().flat_map(|d| d.pairs.iter().copied()).collect();
    train(&pairs, &val.pairs, cfg)
}

/// Adam on the displacement loss; keeps the parameters of the epoch with the
/// lowest validation displacement RMSE (training RMSE if `val` is empty).
pub fn train(train_pairs: &[DisplacementPair], val: &[DisplacementPair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::domain("training set has no displacement pairs"));
    }
    let layout = cfg.layout();
    let input_norm = fit_input_normalizer(train_pairs, layout, cfg.norm_margin)?;
    let output_norm = input_norm.leading(layout.spatial_dims);
    let mut dims = vec![layout.input_dim()];
    dims.extend(&cfg.hidden);
    dims.push(layout.spatial_dims);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::zeros(dims, layout, input_norm, output_norm)?;
    model.leaky_slope = cfg.leaky_slope;
    model.dropout_rate = cfg.dropout_rate;
    model.residual = cfg.residual;
    if cfg.pass_through {
        model.init_pass_through(&mut rng, cfg.pass_through_scale)?;
    } else {
        model.init_he(&mut rng);
    }
    if cfg.residual {
        // the correction branch starts silent
        let (w, _) = model.layer_range(model.n_layers() - 1);
        model.params_mut()[w].iter_mut().for_each(|p| *p = 0.0);
    }

    let score_set = if val.is_empty() { train_pairs } else { val };
    let score = |m: &MlpModel| displacement_rmse(score_set, Some(m));

    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: super::mlp::displacement_loss(&model, train_pairs)?,
        val_rmse: score(&model),
    }];
    let mut best = (f64::INFINITY, 0usize, model.params().to_vec());
    let mut adam = AdamState::new(model.params().len());
    let mut adam_cfg = cfg.adam();
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut grad = vec![0.0; model.params().len()];
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let hidden = model.hidden_dims().to_vec();

    for epoch in 1..=cfg.epochs {
        adam_cfg.learning_rate = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_pairs[i]));
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = accumulate_pair_gradients(&model, &batch, &mut grad, |_| {
                (cfg.dropout_rate > 0.0).then(|| DropoutMask::sample(&hidden, cfg.dropout_rate, &mut rng))
            });
            epoch_loss += loss * chunk.len() as f64;
            adam.step(model.params_mut(), &grad, &adam_cfg);
        }
        let val_rmse = score(&model);
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train_pairs.len() as f64,
            val_rmse,
        });
        if val_rmse < best.0 || !cfg.early_stopping {
            best = (val_rmse, epoch, model.params().to_vec());
        }
    }
    let (_, best_epoch, params) = best;
    if best_epoch > 0 {
        model.set_params(params)?;
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}
