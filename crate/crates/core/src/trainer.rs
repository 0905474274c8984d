//! Training glue between datasets and the neural engine.
//!
//! CSI tensors are transformed once into complex angle-delay maps and
//! cached; per-epoch augmentation adds seeded complex noise to the cached
//! maps before taking normalized magnitudes, so the DFT never reruns
//! inside the training loop. All randomness (batch order, augmentation)
//! derives from the train seed, making runs bit-reproducible.

use ndarray::{Array2, Array3, Array4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CsiTensor, Dataset};
use crate::error::{Error, Result};
use crate::nn::{CoordScaler, ModelConfig, OptimSpec, Optimizer, Scalar, Sequential};
use crate::rng;
use crate::transform::{augment_noise, AngleDelayMap, NormMode, TransformPlan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimSpec,
    /// Relative noise level: per-sample sigma is this times the sample's
    /// angle-delay rms. Zero disables augmentation.
    pub augment_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            optim: OptimSpec::Adam { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            augment_sigma: 0.03,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..*self }
    }

    /// Fine-tuning: continue from existing weights at a reduced rate.
    pub fn fine_tune(&self, epochs: usize, lr_scale: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            seed,
            optim: self.optim.with_lr(self.optim.lr() * lr_scale),
            ..*self
        }
    }
}

/// One training example: an index into an [`InputCache`] plus its world
/// coordinate target and loss weight.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem {
    pub input: usize,
    pub target: [f64; 2],
    pub weight: f32,
}

impl TrainItem {
    pub fn new(input: usize, target: [f64; 2]) -> Self {
        TrainItem { input, target, weight: 1.0 }
    }
}

/// Cached angle-delay inputs for a set of CSI tensors.
#[derive(Debug, Clone)]
pub struct InputCache {
    /// Complex angle-delay maps (augmentation operates here).
    pub maps: Vec<Array3<num_complex::Complex64>>,
    /// Per-sample element rms, the augmentation scale reference.
    pub rms: Vec<f64>,
    /// Clean normalized-magnitude inputs.
    pub clean: Vec<Array3<f32>>,
    pub dims: [usize; 3],
    pub norm: NormMode,
}

impl InputCache {
    pub fn from_csis(csis: &[&CsiTensor], norm: NormMode) -> Result<InputCache> {
        if csis.is_empty() {
            return Err(Error::Empty("input cache over no samples".into()));
        }
        let shape = csis[0].shape();
        let dims = [shape[0], shape[1], shape[2]];
        let plan = TransformPlan::new(dims[1], dims[2], norm);
        let maps: Vec<Array3<num_complex::Complex64>> = csis
            .par_iter()
            .map(|c| plan.apply(c).map(|m| m.values))
            .collect::<Result<_>>()?;
        let rms: Vec<f64> = maps
            .iter()
            .map(|m| (m.iter().map(|v| v.norm_sqr()).sum::<f64>() / m.len() as f64).sqrt())
            .collect();
        let clean = maps
            .par_iter()
            .map(|m| {
                crate::transform::model_input(&AngleDelayMap { values: m.clone(), norm_mode: norm })
            })
            .collect();
        Ok(InputCache { maps, rms, clean, dims, norm })
    }

    pub fn from_dataset(ds: &Dataset, norm: NormMode) -> Result<InputCache> {
        let csis: Vec<&CsiTensor> = ds.samples.iter().map(|s| &s.csi).collect();
        Self::from_csis(&csis, norm)
    }

    /// Cache over an already-preprocessed magnitude file. Complex maps are
    /// unavailable here, so augmentation must stay disabled.
    pub fn from_magnitudes(set: &crate::dataset::MagnitudeSet) -> Result<InputCache> {
        if set.samples.is_empty() {
            return Err(Error::Empty("input cache over no samples".into()));
        }
        let sh = set.samples[0].values.shape();
        let norm = match set.meta.norm.as_deref() {
            Some("none") => NormMode::None,
            _ => NormMode::Unitary,
        };
        Ok(InputCache {
            maps: Vec::new(),
            rms: Vec::new(),
            clean: set.samples.iter().map(|s| s.values.clone()).collect(),
            dims: [sh[0], sh[1], sh[2]],
            norm,
        })
    }

    /// Whether augmentation is possible (complex maps cached).
    pub fn supports_augmentation(&self) -> bool {
        !self.maps.is_empty()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Input with seeded complex noise at `sigma_rel` times the sample rms.
    pub fn augmented(
        &self,
        index: usize,
        sigma_rel: f64,
        seed: u64,
        round: u64,
    ) -> Result<Array3<f32>> {
        if sigma_rel == 0.0 {
            return Ok(self.clean[index].clone());
        }
        let sigma = sigma_rel * self.rms[index];
        let mut r = rng::stream(seed, "augment", &[round, index as u64]);
        let noisy = augment_noise(&self.maps[index], sigma, &mut r)?;
        Ok(crate::transform::model_input(&AngleDelayMap {
            values: noisy,
            norm_mode: self.norm,
        }))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn first_loss(&self) -> f64 {
        self.epoch_losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn last_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Weighted mean-squared-Euclidean loss over a batch.
pub(crate) fn weighted_mse<F: Scalar>(
    pred: &Array2<F>,
    target: &Array2<F>,
    weights: &[F],
) -> Result<(f64, Array2<F>)> {
    if pred.shape() != target.shape() || pred.shape()[0] != weights.len() {
        return Err(Error::ShapeMismatch {
            context: "weighted loss".into(),
            expected: target.shape().to_vec(),
            actual: pred.shape().to_vec(),
        });
    }
    let bsz = pred.shape()[0];
    let mut diff = pred - target;
    let mut loss = 0.0;
    for (i, mut row) in diff.rows_mut().into_iter().enumerate() {
        let w = weights[i];
        loss += w.as_f64() * row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        let s = F::from_f64(2.0 / bsz as f64) * w;
        row.mapv_inplace(|v| v * s);
    }
    Ok((loss / bsz as f64, diff))
}

fn assemble_batch(
    cache: &InputCache,
    items: &[TrainItem],
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<Array4<f32>> {
    let [c, h, w] = cache.dims;
    let mut x = Array4::zeros((items.len(), c, h, w));
    for (row, item) in items.iter().enumerate() {
        let input = cache.augmented(item.input, cfg.augment_sigma, cfg.seed, epoch)?;
        x.index_axis_mut(ndarray::Axis(0), row).assign(&input);
    }
    Ok(x)
}

/// Train `model` in place over the items. Batch order reshuffles each epoch
/// from the train seed.
pub fn train_supervised(
    model: &mut Sequential<f32>,
    optimizer: &mut Optimizer<f32>,
    cache: &InputCache,
    items: &[TrainItem],
    cfg: &TrainConfig,
    scaler: CoordScaler,
) -> Result<TrainReport> {
    if items.is_empty() {
        return Err(Error::Empty("training over no items".into()));
    }
    if cfg.augment_sigma > 0.0 && !cache.supports_augmentation() {
        return Err(Error::config(
            "augmentation needs complex angle-delay maps; magnitude-only inputs \
             must train with augment_sigma = 0",
        ));
    }
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        let mut r = rng::stream(cfg.seed, "shuffle", &[epoch as u64]);
        order.shuffle(&mut r);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<TrainItem> = chunk.iter().map(|&i| items[i]).collect();
            let x = assemble_batch(cache, &batch, cfg, epoch as u64)?;
            let mut t = Array2::zeros((batch.len(), 2));
            let mut weights = Vec::with_capacity(batch.len());
            for (row, item) in batch.iter().enumerate() {
                let m = scaler.to_model(item.target);
                t[[row, 0]] = m[0] as f32;
                t[[row, 1]] = m[1] as f32;
                weights.push(item.weight);
            }
            model.zero_grad();
            let pred = model.forward(&x, true)?;
            let (loss, grad) = weighted_mse(&pred, &t, &weights)?;
            if !loss.is_finite() {
                let norms = model
                    .weight_norms()
                    .iter()
                    .map(|(n, v)| format!("{n}={v:.3e}"))
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}; weight norms: {norms}"
                )));
            }
            model.backward(&grad)?;
            optimizer.step(model.params_mut())?;
            epoch_loss += loss * batch.len() as f64;
            seen += batch.len();
        }
        report.epoch_losses.push(epoch_loss / seen as f64);
    }
    model.clear_caches();
    Ok(report)
}

/// Batched inference over cached inputs; returns world coordinates.
pub fn predict(
    model: &mut Sequential<f32>,
    cache: &InputCache,
    indices: &[usize],
    scaler: CoordScaler,
) -> Result<Vec<[f64; 2]>> {
    predict_inputs(model, cache, indices, scaler, |c, i| Ok(c.clean[i].clone()))
}

/// Inference with a caller-supplied input selector (e.g. augmented views).
pub fn predict_inputs(
    model: &mut Sequential<f32>,
    cache: &InputCache,
    indices: &[usize],
    scaler: CoordScaler,
    mut input_for: impl FnMut(&InputCache, usize) -> Result<Array3<f32>>,
) -> Result<Vec<[f64; 2]>> {
    let [c, h, w] = cache.dims;
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(256) {
        let mut x = Array4::zeros((chunk.len(), c, h, w));
        for (row, &i) in chunk.iter().enumerate() {
            x.index_axis_mut(ndarray::Axis(0), row).assign(&input_for(cache, i)?);
        }
        let pred = model.forward(&x, false)?;
        for row in 0..chunk.len() {
            out.push(scaler.to_world([pred[[row, 0]] as f64, pred[[row, 1]] as f64]));
        }
    }
    Ok(out)
}

/// Fit a fresh model from a config.
pub fn fit(
    model_cfg: &ModelConfig,
    cache: &InputCache,
    items: &[TrainItem],
    cfg: &TrainConfig,
    scaler: CoordScaler,
) -> Result<(Sequential<f32>, Optimizer<f32>, TrainReport)> {
    let mut model = Sequential::new(model_cfg.clone())?;
    let mut opt = Optimizer::new(cfg.optim);
    let report = train_supervised(&mut model, &mut opt, cache, items, cfg, scaler)?;
    Ok((model, opt, report))
}

/// Labeled training items of a dataset, targets in world meters.
pub fn labeled_items(ds: &Dataset, indices: &[usize]) -> Vec<TrainItem> {
    indices
        .iter()
        .filter_map(|&i| ds.samples[i].position.map(|p| TrainItem::new(i, p)))
        .collect()
}

/// Coordinate scaler centered on the BS; 100 m brings desk and reference
/// scenes into unit range.
pub fn scaler_for_scene(cfg: &crate::scene::SceneConfig) -> CoordScaler {
    CoordScaler { center: cfg.bs_xy(), scale: 100.0 }
}

/// Mean Euclidean error of predictions at `indices` against a truth lookup.
pub fn mean_error(
    predictions: &[[f64; 2]],
    indices: &[usize],
    truth_of: impl Fn(usize) -> [f64; 2],
) -> f64 {
    let total: f64 = predictions
        .iter()
        .zip(indices)
        .map(|(p, &i)| {
            let t = truth_of(i);
            f64::hypot(p[0] - t[0], p[1] - t[1])
        })
        .sum();
    total / predictions.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::generate_with_truth;
    use crate::nn::LayerSpec;
    use crate::scene::SceneConfig;

    fn tiny_scene() -> SceneConfig {
        SceneConfig {
            n_rx_per_sector: [40, 20, 30],
            rx_grid_spacing_m: 4.0,
            n_freq_bins: 16,
            bs_array_rows: 2,
            bs_array_cols: 2,
            n_scatterers: 6,
            n_buildings: 2,
            labeled_fraction: 0.5,
            ta_max_s: 0.05e-6,
            seed: 3,
            ..SceneConfig::default()
        }
    }

    fn tiny_model(dims: [usize; 3]) -> ModelConfig {
        ModelConfig {
            input_dims: dims,
            layers: vec![
                LayerSpec::Conv2d { out_channels: 4, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: 8 },
                LayerSpec::Relu,
                LayerSpec::Dense { out_features: 2 },
            ],
            init_seed: 5,
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (ds, _truth) = generate_with_truth(&tiny_scene()).unwrap();
        let cache = InputCache::from_dataset(&ds, NormMode::Unitary).unwrap();
        let items = labeled_items(&ds, &ds.labeled_indices());
        assert_eq!(items.len(), 45);
        let scaler = scaler_for_scene(&ds.config);
        let cfg = TrainConfig { epochs: 15, seed: 11, ..TrainConfig::default() };
        let model_cfg = tiny_model(cache.dims);

        let (m1, _, r1) = fit(&model_cfg, &cache, &items, &cfg, scaler).unwrap();
        let (m2, _, r2) = fit(&model_cfg, &cache, &items, &cfg, scaler).unwrap();
        assert!(r1.last_loss() < r1.first_loss(), "loss should drop: {:?}", r1.epoch_losses);
        assert_eq!(r1.epoch_losses, r2.epoch_losses, "training must be deterministic");
        for (a, b) in m1.params_ref().iter().zip(m2.params_ref().iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn augmentation_changes_inputs_not_labels() {
        let (ds, _) = generate_with_truth(&tiny_scene()).unwrap();
        let cache = InputCache::from_dataset(&ds, NormMode::Unitary).unwrap();
        let a = cache.augmented(0, 0.1, 9, 0).unwrap();
        let b = cache.augmented(0, 0.1, 9, 1).unwrap();
        assert_ne!(a, b, "different rounds draw different noise");
        assert_ne!(a, cache.clean[0]);
        let c = cache.augmented(0, 0.0, 9, 0).unwrap();
        assert_eq!(c, cache.clean[0]);
    }

    #[test]
    fn predictions_are_finite_and_descaled() {
        let (ds, truth) = generate_with_truth(&tiny_scene()).unwrap();
        let cache = InputCache::from_dataset(&ds, NormMode::Unitary).unwrap();
        let items = labeled_items(&ds, &ds.labeled_indices());
        let scaler = scaler_for_scene(&ds.config);
        let cfg = TrainConfig { epochs: 10, seed: 2, ..TrainConfig::default() };
        let (mut model, _, _) =
            fit(&tiny_model(cache.dims), &cache, &items, &cfg, scaler).unwrap();
        let idx: Vec<usize> = (0..cache.len()).collect();
        let preds = predict(&mut model, &cache, &idx, scaler).unwrap();
        assert_eq!(preds.len(), ds.samples.len());
        assert!(preds.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
        let err = mean_error(&preds, &idx, |i| truth.get(i as u64).unwrap().position);
        assert!(err < 500.0, "mean error {err}");
    }

    #[test]
    fn weighted_loss_reduces_to_plain_mse_at_unit_weight() {
        let pred = Array2::from_shape_vec((2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let target = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 1.0, 5.0]).unwrap();
        let (wl, wg) = weighted_mse(&pred, &target, &[1.0, 1.0]).unwrap();
        let (pl, pg) = crate::nn::mse_loss_grad(&pred, &target).unwrap();
        assert!((wl - pl).abs() < 1e-12);
        assert_eq!(wg, pg);
    }
}
