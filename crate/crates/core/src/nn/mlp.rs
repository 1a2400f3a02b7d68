//! Fully connected compensation network with leaky ReLU hidden layers.
//!
//! Parameters are kept in one flat vector. Layer `l` maps `dims[l]` inputs to
//! `dims[l + 1]` outputs and owns a row-major `out x in` weight block followed
//! by its `out` biases.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::normalizer::Normalizer;
use crate::error::{Error, Result};
use crate::geometry::{Compensator, DisplacementPair, Measurement};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Which measurement channels feed the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    /// 3 for volumetric compensation, 2 for the planar board model.
    pub spatial_dims: usize,
    pub use_quality: bool,
}

impl InputLayout {
    pub const VOLUMETRIC: Self = Self {
        spatial_dims: 3,
        use_quality: true,
    };

    pub fn input_dim(&self) -> usize {
        self.spatial_dims + usize::from(self.use_quality)
    }

    pub fn features(&self, m: &Measurement) -> Vec<f64> {
        let mut v: Vec<f64> = m.position_mm.iter().take(self.spatial_dims).copied().collect();
        if self.use_quality {
            v.push(m.quality);
        }
        v
    }

    /// Lift a network output back to a 3-vector; a planar output keeps the
    /// measured height.
    pub fn to_position(&self, out: &[f64], m: &Measurement) -> Vector3<f64> {
        match self.spatial_dims {
            2 => Vector3::new(out[0], out[1], m.position_mm.z),
            _ => Vector3::new(out[0], out[1], out[2]),
        }
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Per-hidden-unit multipliers: 0 for dropped units, `1/(1-rate)` for kept.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub layers: Vec<Vec<f64>>,
}

impl DropoutMask {
    pub fn sample<R: Rng + ?Sized>(hidden_dims: &[usize], rate: f64, rng: &mut R) -> Self {
        let keep = 1.0 / (1.0 - rate);
        let layers = hidden_dims
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|_| if rate > 0.0 && rng.random::<f64>() < rate { 0.0 } else { keep })
                    .collect()
            })
            .collect();
        Self { layers }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    params: Vec<f64>,
    pub leaky_slope: f64,
    pub dropout_rate: f64,
    /// Adds the normalized positional inputs to the output layer, so the
    /// layers learn only a correction.
    pub residual: bool,
    pub input_norm: Normalizer,
    pub output_norm: Normalizer,
    pub layout: InputLayout,
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub(crate) struct ForwardCache {
    /// `activations[0]` is the normalized input; `activations[l + 1]` the
    /// (masked) output of layer `l`.
    activations: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    masks: Option<DropoutMask>,
}

impl ForwardCache {
    /// Raw network output in normalized space.
    pub(crate) fn output(&self) -> &[f64] {
        self.activations.last().expect("non-empty network")
    }
}

impl MlpModel {
    /// Zero-initialized model.
    pub fn zeros(
        layer_dims: Vec<usize>,
        layout: InputLayout,
        input_norm: Normalizer,
        output_norm: Normalizer,
    ) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::domain(format!("invalid layer dims {layer_dims:?}")));
        }
        if layer_dims[0] != layout.input_dim() || layer_dims[0] != input_norm.dim() {
            return Err(Error::domain(format!(
                "input width {} does not match layout ({}) / normalizer ({})",
                layer_dims[0],
                layout.input_dim(),
                input_norm.dim()
            )));
        }
        let out = *layer_dims.last().unwrap();
        if out != layout.spatial_dims || out != output_norm.dim() {
            return Err(Error::domain(format!("output width {out} inconsistent with layout")));
        }
        let n = param_count(&layer_dims);
        Ok(Self {
            layer_dims,
            params: vec![0.0; n],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            dropout_rate: 0.0,
            residual: false,
            input_norm,
            output_norm,
            layout,
        })
    }

    /// He-style uniform fan-in initialization, zero biases.
    pub fn init_he<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for l in 0..self.n_layers() {
            let fan_in = self.layer_dims[l];
            let limit = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            let (w, b) = self.layer_range(l);
            for p in &mut self.params[w] {
                *p = dist.sample(rng);
            }
            for p in &mut self.params[b] {
                *p = 0.0;
            }
        }
    }

    /// He initialization plus an exact pass-through of the positional
    /// channels: each hidden layer reserves unit pairs carrying `+x` and `-x`,
    /// and since `leaky(x) - leaky(-x) = (1 + slope) x` the untrained network
    /// is the identity map up to the contribution of the remaining units,
    /// whose output weights are scaled by `residual_scale`.
    pub fn init_pass_through<R: Rng + ?Sized>(&mut self, rng: &mut R, residual_scale: f64) -> Result<()> {
        let d = self.layout.spatial_dims;
        if self.hidden_dims().iter().any(|&h| h < 2 * d) {
            return Err(Error::domain(format!("pass-through needs hidden layers at least {} wide", 2 * d)));
        }
        self.init_he(rng);
        let c = 1.0 / (1.0 + self.leaky_slope);
        let last = self.n_layers() - 1;
        for l in 0..=last {
            let fan_in = self.layer_dims[l];
            let (w, _) = self.layer_range(l);
            let weights = &mut self.params[w];
            let rows = if l == last { d } else { 2 * d };
            for r in 0..rows {
                weights[r * fan_in..(r + 1) * fan_in].iter_mut().for_each(|v| *v = 0.0);
            }
            for k in 0..d {
                if l == 0 {
                    weights[2 * k * fan_in + k] = 1.0;
                    weights[(2 * k + 1) * fan_in + k] = -1.0;
                } else if l < last {
                    weights[2 * k * fan_in + 2 * k] = c;
                    weights[2 * k * fan_in + 2 * k + 1] = -c;
                    weights[(2 * k + 1) * fan_in + 2 * k] = -c;
                    weights[(2 * k + 1) * fan_in + 2 * k + 1] = c;
                } else {
                    let row = &mut weights[k * fan_in..(k + 1) * fan_in];
                    row[2 * k] = c;
                    row[2 * k + 1] = -c;
                }
            }
            if l == last {
                // random units feed the output only weakly
                let he_limit = (6.0 / fan_in as f64).sqrt() * residual_scale;
                let dist = Uniform::new_inclusive(-he_limit, he_limit).expect("finite limit");
                for k in 0..d {
                    for j in 2 * d..fan_in {
                        weights[k * fan_in + j] = dist.sample(rng);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.layer_dims[1..self.layer_dims.len() - 1]
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::domain(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Index ranges of layer `l`'s weights and biases in the flat vector.
    pub fn layer_range(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let mut offset = 0;
        for k in 0..l {
            offset += self.layer_dims[k + 1] * (self.layer_dims[k] + 1);
        }
        let (fan_in, fan_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
        let w_end = offset + fan_in * fan_out;
        (offset..w_end, w_end..w_end + fan_out)
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        &self.params[self.layer_range(l).0]
    }

    pub fn biases(&self, l: usize) -> &[f64] {
        &self.params[self.layer_range(l).1]
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.layer_dims[0] {
            return Err(Error::domain(format!(
                "input has {} channels, model expects {}",
                input.len(),
                self.layer_dims[0]
            )));
        }
        Ok(())
    }

    /// Pass on an already-normalized input.
    pub(crate) fn forward_cached(&self, normalized: Vec<f64>, masks: Option<DropoutMask>) -> ForwardCache {
        let n_layers = self.n_layers();
        let mut activations = Vec::with_capacity(n_layers + 1);
        let mut pre_activations = Vec::with_capacity(n_layers);
        activations.push(normalized);
        for l in 0..n_layers {
            let (wr, br) = self.layer_range(l);
            let (w, b) = (&self.params[wr], &self.params[br]);
            let a = &activations[l];
            let fan_in = a.len();
            let z: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(j, &bj)| {
                    let row = &w[j * fan_in..(j + 1) * fan_in];
                    bj + row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>()
                })
                .collect();
            let next = if l + 1 < n_layers {
                let mut h: Vec<f64> = z.iter().map(|&v| leaky_relu(v, self.leaky_slope)).collect();
                if let Some(m) = &masks {
                    for (hv, s) in h.iter_mut().zip(&m.layers[l]) {
                        *hv *= s;
                    }
                }
                h
            } else if self.residual {
                z.iter().zip(&activations[0]).map(|(v, x)| v + x).collect()
            } else {
                z.clone()
            };
            pre_activations.push(z);
            activations.push(next);
        }
        ForwardCache {
            activations,
            pre_activations,
            masks,
        }
    }

    /// Accumulates `d loss / d params` into `grad` given the gradient with
    /// respect to the normalized network output.
    pub(crate) fn backward(&self, cache: &ForwardCache, grad_output: &[f64], grad: &mut [f64]) {
        let mut delta = grad_output.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (wr, br) = self.layer_range(l);
            let a = &cache.activations[l];
            let fan_in = a.len();
            for (j, &d) in delta.iter().enumerate() {
                grad[br.start + j] += d;
                let row = &mut grad[wr.start + j * fan_in..wr.start + (j + 1) * fan_in];
                for (g, &ai) in row.iter_mut().zip(a) {
                    *g += d * ai;
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[wr];
            let z_prev = &cache.pre_activations[l - 1];
            let mut prev = vec![0.0; fan_in];
            for (j, &d) in delta.iter().enumerate() {
                let row = &w[j * fan_in..(j + 1) * fan_in];
                for (p, &wji) in prev.iter_mut().zip(row) {
                    *p += wji * d;
                }
            }
            for (i, p) in prev.iter_mut().enumerate() {
                let slope = if z_prev[i] > 0.0 { 1.0 } else { self.leaky_slope };
                let keep = cache.masks.as_ref().map_or(1.0, |m| m.layers[l - 1][i]);
                *p *= slope * keep;
            }
            delta = prev;
        }
    }

    /// Normalize, propagate (optionally masked), denormalize.
    pub fn forward(&self, input: &[f64], mask: Option<&DropoutMask>) -> Result<Vec<f64>> {
        self.check_input(input)?;
        if let Some(m) = mask {
            let ok = m.layers.len() == self.hidden_dims().len()
                && m.layers.iter().zip(self.hidden_dims()).all(|(a, &b)| a.len() == b);
            if !ok {
                return Err(Error::domain("dropout mask shape does not match hidden layers"));
            }
        }
        let cache = self.forward_cached(self.input_norm.normalize(input), mask.cloned());
        Ok(self.output_norm.denormalize(cache.output()))
    }

    /// Deterministic inference on a measurement.
    pub fn compensate(&self, m: &Measurement) -> Vector3<f64> {
        let cache = self.forward_cached(self.input_norm.normalize(&self.layout.features(m)), None);
        self.layout.to_position(&self.output_norm.denormalize(cache.output()), m)
    }

    /// Compensated position under an explicit dropout mask.
    pub fn compensate_masked(&self, m: &Measurement, mask: &DropoutMask) -> Vector3<f64> {
        let cache = self.forward_cached(self.input_norm.normalize(&self.layout.features(m)), Some(mask.clone()));
        self.layout.to_position(&self.output_norm.denormalize(cache.output()), m)
    }
}

impl Compensator for MlpModel {
    fn compensate(&self, m: &Measurement) -> Vector3<f64> {
        MlpModel::compensate(self, m)
    }
}

pub fn param_count(layer_dims: &[usize]) -> usize {
    layer_dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
}

/// Mean of `(||f(x2,q2) - f(x1,q1)|| - y)^2` over the batch.
pub fn displacement_loss(model: &MlpModel, batch: &[DisplacementPair]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let out = |m: &Measurement| {
        let cache = model.forward_cached(model.input_norm.normalize(&model.layout.features(m)), None);
        model.output_norm.denormalize(cache.output())
    };
    let sum: f64 = batch
        .iter()
        .map(|p| {
            let (a, b) = (out(&p.m1), out(&p.m2));
            let norm = a.iter().zip(&b).map(|(u, v)| (v - u).powi(2)).sum::<f64>().sqrt();
            (norm - p.gt_distance_mm).powi(2)
        })
        .sum();
    Ok(sum / batch.len() as f64)
}

/// Analytic gradient of [`displacement_loss`] with respect to the flat
/// parameter vector.
pub fn gradients(model: &MlpModel, batch: &[DisplacementPair]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let mut grad = vec![0.0; model.params.len()];
    accumulate_pair_gradients(model, batch, &mut grad, |_| None);
    Ok(grad)
}

/// Sums per-pair gradient contributions (scaled by `1/batch.len()`) into
/// `grad` and returns the mean loss. `mask_for` supplies a dropout mask per
/// siamese branch (called twice per pair, branch 1 first).
pub(crate) fn accumulate_pair_gradients(
    model: &MlpModel,
    batch: &[DisplacementPair],
    grad: &mut [f64],
    mut mask_for: impl FnMut(usize) -> Option<DropoutMask>,
) -> f64 {
    let inv_n = 1.0 / batch.len() as f64;
    let out_dim = model.layout.spatial_dims;
    let mut loss = 0.0;
    for pair in batch {
        let c1 = model.forward_cached(
            model.input_norm.normalize(&model.layout.features(&pair.m1)),
            mask_for(1),
        );
        let c2 = model.forward_cached(
            model.input_norm.normalize(&model.layout.features(&pair.m2)),
            mask_for(2),
        );
        let o1 = model.output_norm.denormalize(c1.output());
        let o2 = model.output_norm.denormalize(c2.output());
        let diff: Vec<f64> = (0..out_dim).map(|k| o2[k] - o1[k]).collect();
        let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        let residual = norm - pair.gt_distance_mm;
        loss += residual * residual * inv_n;
        if norm == 0.0 {
            continue;
        }
        let coef = 2.0 * residual * inv_n / norm;
        let g2: Vec<f64> = (0..out_dim)
            .map(|k| coef * diff[k] * model.output_norm.scale(k))
            .collect();
        let g1: Vec<f64> = g2.iter().map(|g| -g).collect();
        model.backward(&c2, &g2, grad);
        model.backward(&c1, &g1, grad);
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Cell, GroundTruthPoint, Rotation};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_norm(d: usize) -> Normalizer {
        Normalizer::new(vec![0.0; d], vec![1.0; d]).unwrap()
    }

    fn meas(p: [f64; 3], q: f64) -> Measurement {
        let v = Vector3::from(p);
        Measurement {
            position_mm: v,
            quality: q,
            gt: GroundTruthPoint {
                cell: Cell::new(0, 0, 0),
                rotation: Rotation::Deg0,
                position_mm: v,
            },
        }
    }

    fn pair(a: [f64; 3], b: [f64; 3], y: f64) -> DisplacementPair {
        DisplacementPair {
            m1: meas(a, 0.0),
            m2: meas(b, 0.0),
            gt_distance_mm: y,
        }
    }

    /// 3 -> 3 -> 3 net that computes the identity on positive inputs
    /// (unit normalizers, identity weights).
    fn identity_net() -> MlpModel {
        let layout = InputLayout {
            spatial_dims: 3,
            use_quality: false,
        };
        let mut m = MlpModel::zeros(vec![3, 3, 3], layout, unit_norm(3), unit_norm(3)).unwrap();
        for l in 0..2 {
            let (w, _) = m.layer_range(l);
            for i in 0..3 {
                m.params[w.start + i * 3 + i] = 1.0;
            }
        }
        m
    }

    #[test]
    fn leaky_relu_values() {
        assert_eq!(leaky_relu(-1.0, DEFAULT_LEAKY_SLOPE), -0.01);
        assert_eq!(leaky_relu(2.0, DEFAULT_LEAKY_SLOPE), 2.0);
    }

    #[test]
    fn zero_net_outputs_normalizer_min() {
        let layout = InputLayout::VOLUMETRIC;
        let m = MlpModel::zeros(vec![4, 5, 3], layout, unit_norm(4), unit_norm(3)).unwrap();
        assert_eq!(m.forward(&[0.3, 2.0, -1.0, 7.0], None).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let m = identity_net();
        assert!(matches!(m.forward(&[1.0, 2.0], None), Err(Error::Domain(_))));
        let bad_mask = DropoutMask { layers: vec![vec![1.0; 2]] };
        assert!(m.forward(&[1.0, 2.0, 3.0], Some(&bad_mask)).is_err());
        assert!(MlpModel::zeros(vec![4, 3], InputLayout::VOLUMETRIC, unit_norm(3), unit_norm(3)).is_err());
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let layout = InputLayout::VOLUMETRIC;
        let in_norm = Normalizer::new(vec![-10.0, 0.0, 5.0, 0.0], vec![10.0, 50.0, 9.0, 2.0]).unwrap();
        let out_norm = Normalizer::new(vec![-3.0, 1.0, 0.0], vec![4.0, 2.0, 100.0]).unwrap();
        let mut m = MlpModel::zeros(vec![4, 3, 3], layout, in_norm, out_norm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in m.params.iter_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
        let x = [1.5, 20.0, 6.0, 0.4];
        let got = m.forward(&x, None).unwrap();

        // independent evaluation written out term by term
        let p = m.params.clone();
        let xn = [
            (x[0] + 10.0) / 20.0,
            (x[1] - 0.0) / 50.0,
            (x[2] - 5.0) / 4.0,
            (x[3] - 0.0) / 2.0,
        ];
        let lrelu = |v: f64| if v > 0.0 { v } else { 0.01 * v };
        let mut h = [0.0; 3];
        for j in 0..3 {
            let z = p[j * 4] * xn[0] + p[j * 4 + 1] * xn[1] + p[j * 4 + 2] * xn[2] + p[j * 4 + 3] * xn[3] + p[12 + j];
            h[j] = lrelu(z);
        }
        let mut o = [0.0; 3];
        for j in 0..3 {
            o[j] = p[15 + j * 3] * h[0] + p[15 + j * 3 + 1] * h[1] + p[15 + j * 3 + 2] * h[2] + p[24 + j];
        }
        let expected = [o[0] * 7.0 - 3.0, o[1] * 1.0 + 1.0, o[2] * 100.0];
        for k in 0..3 {
            assert_abs_diff_eq!(got[k], expected[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        let m = identity_net();
        let mask = DropoutMask {
            layers: vec![vec![0.0, 2.0, 1.0]],
        };
        let out = m.forward(&[1.0, 1.0, 1.0], Some(&mask)).unwrap();
        assert_eq!(out, vec![0.0, 2.0, 1.0]);
    }

    #[test]
    fn identity_weights_compensate_to_input() {
        let m = identity_net();
        let x = meas([3.0, 4.0, 0.5], 0.0);
        assert_abs_diff_eq!(m.compensate(&x), x.position_mm, epsilon = 1e-12);
        assert_eq!(m.compensate(&x), m.compensate(&x));
    }

    #[test]
    fn loss_examples() {
        let m = identity_net();
        let p5 = pair([0.0, 0.0, 0.0], [3.0, 4.0, 0.0], 5.0);
        let p4 = pair([0.0, 0.0, 0.0], [3.0, 4.0, 0.0], 4.0);
        let p2 = pair([0.0, 0.0, 0.0], [3.0, 4.0, 0.0], 2.0);
        assert_abs_diff_eq!(displacement_loss(&m, &[p5]).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(displacement_loss(&m, &[p4]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(displacement_loss(&m, &[p4, p2]).unwrap(), 5.0, epsilon = 1e-12);
        assert!(displacement_loss(&m, &[]).is_err());
    }

    #[test]
    fn zero_loss_has_zero_gradient() {
        let m = identity_net();
        let batch = [
            pair([0.0, 0.0, 0.0], [3.0, 4.0, 0.0], 5.0),
            pair([1.0, 1.0, 1.0], [1.0, 1.0, 3.0], 2.0),
        ];
        let g = gradients(&m, &batch).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coincident_outputs_contribute_no_gradient() {
        let m = identity_net();
        let g = gradients(&m, &[pair([1.0, 1.0, 1.0], [1.0, 1.0, 1.0], 3.0)]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_pair_gradient_equals_single() {
        let mut m = identity_net();
        m.params[0] = 1.3;
        let p = pair([0.2, 0.5, 0.9], [0.7, 0.1, 0.4], 0.4);
        let single = gradients(&m, &[p]).unwrap();
        let double = gradients(&m, &[p, p]).unwrap();
        for (a, b) in single.iter().zip(&double) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for draw in 0..10 {
            let layout = if draw % 2 == 0 {
                InputLayout::VOLUMETRIC
            } else {
                InputLayout {
                    spatial_dims: 2,
                    use_quality: true,
                }
            };
            let d_in = layout.input_dim();
            let d_out = layout.spatial_dims;
            let in_norm = Normalizer::new(vec![-20.0; d_in], vec![20.0; d_in]).unwrap();
            let out_norm = Normalizer::new(vec![-15.0; d_out], vec![25.0; d_out]).unwrap();
            let dims = vec![d_in, 6, 5, d_out];
            let mut m = MlpModel::zeros(dims, layout, in_norm, out_norm).unwrap();
            m.init_he(&mut rng);
            m.residual = draw % 3 == 0;
            for b in m.params.iter_mut() {
                *b += rng.random_range(-0.1..0.1);
            }
            // ground truth within 1 mm of the current output distance keeps the
            // loss O(1), so round-off in the differences stays near 1e-11
            let batch: Vec<_> = (0..6)
                .map(|_| {
                    let draw_point = |rng: &mut ChaCha8Rng| {
                        let p = [
                            rng.random_range(-15.0..15.0),
                            rng.random_range(-15.0..15.0),
                            rng.random_range(-5.0..5.0),
                        ];
                        meas(p, rng.random_range(0.0..3.0))
                    };
                    let (a, b) = (draw_point(&mut rng), draw_point(&mut rng));
                    let fa = m.forward(&layout.features(&a), None).unwrap();
                    let fb = m.forward(&layout.features(&b), None).unwrap();
                    let d = fa.iter().zip(&fb).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
                    DisplacementPair {
                        m1: a,
                        m2: b,
                        gt_distance_mm: (d + rng.random_range(-1.0..1.0)).max(0.0),
                    }
                })
                .collect();
            let g = gradients(&m, &batch).unwrap();
            let h = 1e-5;
            let mut max_rel: f64 = 0.0;
            for i in 0..m.params.len() {
                let mut plus = m.clone();
                plus.params[i] += h;
                let mut minus = m.clone();
                minus.params[i] -= h;
                let fd = (displacement_loss(&plus, &batch).unwrap() - displacement_loss(&minus, &batch).unwrap()) / (2.0 * h);
                // entries below 1e-5 (exact zeros from cancelling branches) compare absolutely
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-5);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel < 1e-4, "draw {draw}: max relative error {max_rel}");
        }
    }

    #[test]
    fn loss_is_symmetric_in_pair_order() {
        let mut m = identity_net();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in m.params.iter_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
        let batch: Vec<_> = (0..8)
            .map(|_| {
                pair(
                    [rng.random(), rng.random(), rng.random()],
                    [rng.random(), rng.random(), rng.random()],
                    rng.random(),
                )
            })
            .collect();
        let swapped: Vec<_> = batch.iter().map(|p| p.swapped()).collect();
        assert_abs_diff_eq!(
            displacement_loss(&m, &batch).unwrap(),
            displacement_loss(&m, &swapped).unwrap(),
            epsilon = 1e-14
        );
    }
}
