//! Mixed-term polynomial compensator, the classical baseline.
//!
//! Monomials are ordered graded-lexicographically: by total degree, then
//! lexicographically by exponent tuple with the first variable most
//! significant. For three inputs and degree 2 this gives
//! `1, x, y, z, x², xy, xz, y², yz, z²`.

use nalgebra::{DMatrix, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{displacement_rmse, Compensator, DisplacementPair, Measurement};
use crate::nn::adam::AdamState;
use crate::nn::train::{fit_input_normalizer, TrainConfig};
use crate::nn::{InputLayout, Normalizer};

pub const DEFAULT_DEGREE: usize = 3;
pub const MAX_DEGREE: usize = 5;

/// Exponent tuples of every monomial in `n_vars` variables with total degree
/// at most `degree`, in graded-lex order.
pub fn monomial_exponents(n_vars: usize, degree: usize) -> Vec<Vec<u32>> {
    fn fill(rest: usize, n: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() + 1 == n {
            prefix.push(rest as u32);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=rest).rev() {
            prefix.push(e as u32);
            fill(rest - e, n, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for d in 0..=degree {
        if n_vars == 0 {
            if d == 0 {
                out.push(Vec::new());
            }
            continue;
        }
        fill(d, n_vars, &mut Vec::with_capacity(n_vars), &mut out);
    }
    out
}

pub fn monomial_count(n_vars: usize, degree: usize) -> usize {
    // C(degree + n_vars, n_vars)
    (1..=n_vars).fold(1usize, |acc, k| acc * (degree + k) / k)
}

fn eval_monomials(input: &[f64], exponents: &[Vec<u32>]) -> Vec<f64> {
    exponents
        .iter()
        .map(|e| e.iter().zip(input).map(|(&k, &x)| x.powi(k as i32)).product())
        .collect()
}

pub fn poly_features(input: &[f64], degree: usize) -> Vec<f64> {
    eval_monomials(input, &monomial_exponents(input.len(), degree))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyModel {
    pub degree: usize,
    pub layout: InputLayout,
    /// One row per output dimension, one column per monomial.
    pub coefficients: Vec<Vec<f64>>,
    pub input_norm: Normalizer,
    pub output_norm: Normalizer,
    #[serde(skip)]
    exponents: Vec<Vec<u32>>,
}

impl PolyModel {
    /// Identity map in normalized coordinates (a constant for degree 0).
    pub fn identity(degree: usize, layout: InputLayout, input_norm: Normalizer) -> Result<Self> {
        if degree > MAX_DEGREE {
            return Err(Error::config("degree", format!("must lie in 0..={MAX_DEGREE}")));
        }
        if input_norm.dim() != layout.input_dim() {
            return Err(Error::domain("normalizer width does not match the input layout"));
        }
        let exponents = monomial_exponents(layout.input_dim(), degree);
        let out_dim = layout.spatial_dims;
        let mut coefficients = vec![vec![0.0; exponents.len()]; out_dim];
        for (k, row) in coefficients.iter_mut().enumerate() {
            match exponents.iter().position(|e| e.iter().sum::<u32>() == 1 && e[k] == 1) {
                Some(j) => row[j] = 1.0,
                None => row[0] = 0.5,
            }
        }
        let output_norm = input_norm.leading(out_dim);
        Ok(Self {
            degree,
            layout,
            coefficients,
            input_norm,
            output_norm,
            exponents,
        })
    }

    /// Rebuilds the cached monomial table, e.g. after deserialization.
    pub fn restore(mut self) -> Result<Self> {
        self.exponents = monomial_exponents(self.layout.input_dim(), self.degree);
        let n = self.exponents.len();
        if self.coefficients.len() != self.layout.spatial_dims || self.coefficients.iter().any(|r| r.len() != n) {
            return Err(Error::domain(format!(
                "polynomial of degree {} needs {} x {n} coefficients",
                self.degree, self.layout.spatial_dims
            )));
        }
        Ok(self)
    }

    pub fn n_terms(&self) -> usize {
        self.exponents.len()
    }

    fn features(&self, m: &Measurement) -> Vec<f64> {
        eval_monomials(&self.input_norm.normalize(&self.layout.features(m)), &self.exponents)
    }

    fn apply(&self, phi: &[f64]) -> Vec<f64> {
        let out: Vec<f64> = self
            .coefficients
            .iter()
            .map(|row| row.iter().zip(phi).map(|(c, f)| c * f).sum())
            .collect();
        self.output_norm.denormalize(&out)
    }
}

pub fn poly_compensate(model: &PolyModel, m: &Measurement) -> Vector3<f64> {
    model.layout.to_position(&model.apply(&model.features(m)), m)
}

impl Compensator for PolyModel {
    fn compensate(&self, m: &Measurement) -> Vector3<f64> {
        poly_compensate(self, m)
    }
}

/// Mean displacement loss and its gradient with respect to the coefficients
/// (flattened row by row).
fn loss_and_gradient(model: &PolyModel, batch: &[&DisplacementPair], grad: &mut [f64]) -> f64 {
    let n_terms = model.n_terms();
    let out_dim = model.layout.spatial_dims;
    let inv_n = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for pair in batch {
        let (f1, f2) = (model.features(&pair.m1), model.features(&pair.m2));
        let (o1, o2) = (model.apply(&f1), model.apply(&f2));
        let diff: Vec<f64> = (0..out_dim).map(|k| o2[k] - o1[k]).collect();
        let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        let residual = norm - pair.gt_distance_mm;
        loss += residual * residual * inv_n;
        if norm == 0.0 {
            continue;
        }
        let coef = 2.0 * residual * inv_n / norm;
        for k in 0..out_dim {
            let g = coef * diff[k] * model.output_norm.scale(k);
            let row = &mut grad[k * n_terms..(k + 1) * n_terms];
            for j in 0..n_terms {
                row[j] += g * (f2[j] - f1[j]);
            }
        }
    }
    loss
}

pub fn displacement_loss(model: &PolyModel, batch: &[DisplacementPair]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let refs: Vec<&DisplacementPair> = batch.iter().collect();
    let mut scratch = vec![0.0; model.layout.spatial_dims * model.n_terms()];
    Ok(loss_and_gradient(model, &refs, &mut scratch))
}

#[derive(Debug, Clone)]
pub struct PolyOutcome {
    pub model: PolyModel,
    pub best_epoch: usize,
    pub val_rmse: f64,
}

/// Adam on the displacement loss, starting from the identity map. Uses the
/// optimizer settings of `cfg`; keeps the epoch with the lowest validation
/// RMSE (training RMSE if `val` is empty).
pub fn train_poly(
    train: &[DisplacementPair],
    val: &[DisplacementPair],
    degree: usize,
    use_quality: bool,
    cfg: &TrainConfig,
) -> Result<PolyOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::domain("training set has no displacement pairs"));
    }
    let layout = InputLayout {
        spatial_dims: cfg.spatial_dims,
        use_quality,
    };
    let norm = fit_input_normalizer(train, layout, cfg.norm_margin)?;
    let mut model = PolyModel::identity(degree, layout, norm)?;
    let n_params = layout.spatial_dims * model.n_terms();
    let score_set = if val.is_empty() { train } else { val };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(n_params);
    let mut adam_cfg = cfg.adam();
    let mut flat: Vec<f64> = model.coefficients.concat();
    let mut grad = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (displacement_rmse(score_set, Some(&model)), 0usize, flat.clone());

    for epoch in 1..=cfg.epochs {
        adam_cfg.learning_rate = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DisplacementPair> = chunk.iter().map(|&i| &train[i]).collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            loss_and_gradient(&model, &batch, &mut grad);
            adam.step(&mut flat, &grad, &adam_cfg);
            unflatten(&mut model, &flat);
        }
        let rmse = displacement_rmse(score_set, Some(&model));
        if rmse < best.0 || !cfg.early_stopping {
            best = (rmse, epoch, flat.clone());
        }
    }
    unflatten(&mut model, &best.2);
    Ok(PolyOutcome {
        model,
        best_epoch: best.1,
        val_rmse: best.0,
    })
}

fn unflatten(model: &mut PolyModel, flat: &[f64]) {
    let n = model.n_terms();
    for (k, row) in model.coefficients.iter_mut().enumerate() {
        row.copy_from_slice(&flat[k * n..(k + 1) * n]);
    }
}

/// Least-squares fit against absolute ground-truth positions. Only used to
/// check the polynomial machinery against closed-form solutions.
pub fn fit_absolute(measurements: &[Measurement], degree: usize, use_quality: bool, margin: f64) -> Result<PolyModel> {
    if measurements.is_empty() {
        return Err(Error::domain("no measurements to fit"));
    }
    let layout = InputLayout {
        spatial_dims: 3,
        use_quality,
    };
    let rows: Vec<Vec<f64>> = measurements.iter().map(|m| layout.features(m)).collect();
    let norm = Normalizer::fit(rows.iter().map(|r| r.as_slice()), margin)?;
    let mut model = PolyModel::identity(degree, layout, norm)?;
    let n = model.n_terms();
    if measurements.len() < n {
        return Err(Error::domain(format!("{n} monomials need at least {n} measurements")));
    }
    let phi = DMatrix::from_fn(measurements.len(), n, |i, j| model.features(&measurements[i])[j]);
    let svd = phi.svd(true, true);
    for k in 0..3 {
        let target = nalgebra::DVector::from_fn(measurements.len(), |i, _| {
            let gt = measurements[i].gt.position_mm[k];
            (gt - model.output_norm.min[k]) / model.output_norm.scale(k)
        });
        let sol = svd
            .solve(&target, 1e-12)
            .map_err(|e| Error::domain(format!("least squares failed: {e}")))?;
        model.coefficients[k] = sol.iter().copied().collect();
    }
    Ok(model)
}
