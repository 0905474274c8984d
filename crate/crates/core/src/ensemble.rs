//! Ensemble positioning: train a pool of models under varied
//! architectures / hyperparameters / seeds and combine their coordinate
//! predictions by uniform mean, inverse-validation-error weighting, or
//! coordinate-wise median (the regression form of voting).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, CoordScaler, LayerSpec, ModelConfig, Sequential};
use crate::rng;
use crate::trainer::{self, labeled_items, InputCache, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    UniformMean,
    InverseErrorWeighted,
    CoordinateMedian,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub members: Vec<MemberSpec>,
    pub combiner: Combiner,
    /// Fraction of labeled data held out per member for validation error.
    pub validation_split: f64,
}

impl EnsembleSpec {
    pub fn diagnostics(&self) -> Vec<String> {
        let mut d = Vec::new();
        if self.members.len() < 2 {
            d.push(format!("ensemble needs at least 2 members, got {}", self.members.len()));
        }
        if !(0.0 < self.validation_split && self.validation_split < 1.0) {
            d.push(format!(
                "ensemble.validation_split must lie in (0, 1), got {}",
                self.validation_split
            ));
        }
        let mut names: Vec<&str> = self.members.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.members.len() {
            d.push("ensemble member names must be unique".into());
        }
        d
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let d = self.diagnostics();
        if d.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(d.join("; ")))
        }
    }
}

/// Default diverse pool: two depths x two widths plus an alternate seed.
pub fn default_pool_spec(
    input_dims: [usize; 3],
    base_train: &TrainConfig,
    combiner: Combiner,
) -> EnsembleSpec {
    let conv = |oc: usize| LayerSpec::Conv2d { out_channels: oc, kernel: 3, stride: 1, padding: 1 };
    let shallow = |w: usize, hidden: usize, seed: u64| ModelConfig {
        input_dims,
        layers: vec![
            conv(w),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            conv(w * 2),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { out_features: hidden },
            LayerSpec::Relu,
            LayerSpec::Dense { out_features: 2 },
        ],
        init_seed: seed,
    };
    let deep = |w: usize, hidden: usize, seed: u64| ModelConfig {
        input_dims,
        layers: vec![
            conv(w),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            conv(w * 2),
            LayerSpec::Relu,
            conv(w * 2),
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { out_features: hidden },
            LayerSpec::Relu,
            LayerSpec::Dense { out_features: 2 },
        ],
        init_seed: seed,
    };
    let seed = base_train.seed;
    let member = |name: &str, model: ModelConfig, tseed: u64| MemberSpec {
        name: name.to_string(),
        model,
        train: base_train.with_seed(tseed),
    };
    EnsembleSpec {
        members: vec![
            member("shallow-narrow", shallow(8, 24, rng::derive_seed(seed, "m0", &[])), rng::derive_seed(seed, "t0", &[])),
            member("shallow-wide", shallow(16, 32, rng::derive_seed(seed, "m1", &[])), rng::derive_seed(seed, "t1", &[])),
            member("deep-narrow", deep(8, 24, rng::derive_seed(seed, "m2", &[])), rng::derive_seed(seed, "t2", &[])),
            member("deep-wide", deep(16, 32, rng::derive_seed(seed, "m3", &[])), rng::derive_seed(seed, "t3", &[])),
            member("shallow-narrow-alt", shallow(8, 24, rng::derive_seed(seed, "m4", &[])), rng::derive_seed(seed, "t4", &[])),
        ],
        combiner,
        validation_split: 0.1,
    }
}

#[derive(Debug, Clone)]
pub struct TrainedMember {
    pub name: String,
    pub checkpoint: Checkpoint,
    /// Mean squared validation error (meters squared).
    pub val_mse: f64,
    pub val_mean_error: f64,
}

#[derive(Debug, Clone)]
pub struct Pool {
    pub members: Vec<TrainedMember>,
}

impl Pool {
    /// Inverse-MSE weights, normalized to sum to one.
    pub fn inverse_error_weights(&self) -> Vec<f64> {
        let inv: Vec<f64> = self.members.iter().map(|m| 1.0 / m.val_mse.max(1e-12)).collect();
        let total: f64 = inv.iter().sum();
        inv.into_iter().map(|w| w / total).collect()
    }
}

/// Train every member on the same training split; record per-member
/// validation error on a held-out slice of the labeled data. Members train
/// in parallel; any failure is reported with the member's name.
pub fn train_pool(
    spec: &EnsembleSpec,
    dataset: &Dataset,
    cache: &InputCache,
    scaler: CoordScaler,
    exclude: &[usize],
    dataset_hash: &str,
) -> Result<Pool> {
    spec.ensure_valid()?;
    let excluded: std::collections::BTreeSet<usize> = exclude.iter().copied().collect();
    let labeled: Vec<usize> = dataset
        .labeled_indices()
        .into_iter()
        .filter(|i| !excluded.contains(i))
        .collect();
    if labeled.len() < 2 {
        return Err(Error::Empty("ensemble training needs at least 2 labeled samples".into()));
    }

    // one shared validation split for comparable member errors
    let mut order = labeled.clone();
    use rand::seq::SliceRandom;
    let mut r = rng::stream(dataset.seed, "ensemble-val", &[]);
    order.shuffle(&mut r);
    let n_val = ((order.len() as f64 * spec.validation_split).round() as usize)
        .clamp(1, order.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_items = labeled_items(dataset, train_idx);
    let val_items = labeled_items(dataset, val_idx);

    let members: Vec<TrainedMember> = spec
        .members
        .par_iter()
        .map(|m| -> Result<TrainedMember> {
            let run = || -> Result<TrainedMember> {
                let (mut model, opt, _) =
                    trainer::fit(&m.model, cache, &train_items, &m.train, scaler)?;
                let val_indices: Vec<usize> = val_items.iter().map(|it| it.input).collect();
                let preds = trainer::predict(&mut model, cache, &val_indices, scaler)?;
                let mut mse = 0.0;
                let mut mean = 0.0;
                for (p, it) in preds.iter().zip(&val_items) {
                    let d2 = (p[0] - it.target[0]).powi(2) + (p[1] - it.target[1]).powi(2);
                    mse += d2;
                    mean += d2.sqrt();
                }
                mse /= val_items.len() as f64;
                mean /= val_items.len() as f64;
                let tag = format!("ensemble/{}", m.name);
                let checkpoint =
                    Checkpoint::from_sequential(&model, &tag, dataset_hash, scaler, Some(&opt));
                Ok(TrainedMember {
                    name: m.name.clone(),
                    checkpoint,
                    val_mse: mse,
                    val_mean_error: mean,
                })
            };
            run().map_err(|e| Error::Member { member: m.name.clone(), source: Box::new(e) })
        })
        .collect::<Result<_>>()?;

    Ok(Pool { members })
}

/// Combine one sample's member predictions into a single coordinate.
pub fn combine(
    predictions: &[[f64; 2]],
    combiner: Combiner,
    weights: Option<&[f64]>,
) -> Result<[f64; 2]> {
    if predictions.is_empty() {
        return Err(Error::Empty("combine over no predictions".into()));
    }
    match combiner {
        Combiner::UniformMean => {
            let n = predictions.len() as f64;
            let sum = predictions
                .iter()
                .fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
            Ok([sum[0] / n, sum[1] / n])
        }
        Combiner::InverseErrorWeighted => {
            let w = weights.ok_or_else(|| {
                Error::config("inverse-error combiner requires validation weights")
            })?;
            if w.len() != predictions.len() {
                return Err(Error::ShapeMismatch {
                    context: "combiner weights".into(),
                    expected: vec![predictions.len()],
                    actual: vec![w.len()],
                });
            }
            if w.iter().any(|&x| x < 0.0) {
                return Err(Error::config("combiner weights must be non-negative"));
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(Error::config("combiner weights must not all be zero"));
            }
            let mut out = [0.0, 0.0];
            for (p, &wi) in predictions.iter().zip(w) {
                out[0] += wi * p[0];
                out[1] += wi * p[1];
            }
            Ok([out[0] / total, out[1] / total])
        }
        Combiner::CoordinateMedian => {
            let median = |mut v: Vec<f64>| -> f64 {
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let n = v.len();
                if n % 2 == 1 {
                    v[n / 2]
                } else {
                    (v[n / 2 - 1] + v[n / 2]) / 2.0
                }
            };
            Ok([
                median(predictions.iter().map(|p| p[0]).collect()),
                median(predictions.iter().map(|p| p[1]).collect()),
            ])
        }
    }
}

/// Per-member predictions for a set of cache indices.
pub fn member_predictions(
    pool: &Pool,
    cache: &InputCache,
    indices: &[usize],
    scaler: CoordScaler,
) -> Result<Vec<Vec<[f64; 2]>>> {
    pool.members
        .par_iter()
        .map(|m| {
            let mut model: Sequential<f32> = m.checkpoint.to_sequential()?;
            trainer::predict(&mut model, cache, indices, scaler)
        })
        .collect()
}

/// Combined predictions for a set of cache indices.
pub fn predict_combined(
    pool: &Pool,
    cache: &InputCache,
    indices: &[usize],
    scaler: CoordScaler,
    combiner: Combiner,
) -> Result<Vec<[f64; 2]>> {
    let per_member = member_predictions(pool, cache, indices, scaler)?;
    let weights = pool.inverse_error_weights();
    let use_weights = matches!(combiner, Combiner::InverseErrorWeighted);
    (0..indices.len())
        .map(|i| {
            let preds: Vec<[f64; 2]> = per_member.iter().map(|m| m[i]).collect();
            combine(&preds, combiner, use_weights.then_some(weights.as_slice()))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EnsembleReport {
    pub member_mean_errors: Vec<(String, f64)>,
    pub combined_mean_error: f64,
    /// Largest violation of per-sample Jensen inequality under uniform
    /// averaging (should never exceed numerical noise).
    pub max_jensen_violation: f64,
    /// Fraction of samples where at least two members disagree.
    pub disagreement_fraction: f64,
}

/// Evaluate a pool on test samples with known truths. Asserts the Jensen
/// property of uniform averaging: the squared error of the mean prediction
/// never exceeds the mean of member squared errors.
pub fn evaluate_ensemble(
    pool: &Pool,
    combiner: Combiner,
    cache: &InputCache,
    indices: &[usize],
    truths: &[[f64; 2]],
    scaler: CoordScaler,
) -> Result<EnsembleReport> {
    if indices.len() != truths.len() {
        return Err(Error::ShapeMismatch {
            context: "evaluate_ensemble".into(),
            expected: vec![indices.len()],
            actual: vec![truths.len()],
        });
    }
    let per_member = member_predictions(pool, cache, indices, scaler)?;
    let weights = pool.inverse_error_weights();
    let use_weights = matches!(combiner, Combiner::InverseErrorWeighted);

    let mut member_err = vec![0.0f64; pool.members.len()];
    let mut combined_err = 0.0;
    let mut max_violation: f64 = 0.0;
    let mut disagreements = 0usize;
    for (i, &truth) in truths.iter().enumerate() {
        let preds: Vec<[f64; 2]> = per_member.iter().map(|m| m[i]).collect();
        let mut mean_sq = 0.0;
        for (k, p) in preds.iter().enumerate() {
            let d2 = (p[0] - truth[0]).powi(2) + (p[1] - truth[1]).powi(2);
            member_err[k] += d2.sqrt();
            mean_sq += d2;
        }
        mean_sq /= preds.len() as f64;

        let chosen = combine(&preds, combiner, use_weights.then_some(weights.as_slice()))?;
        combined_err +=
            f64::hypot(chosen[0] - truth[0], chosen[1] - truth[1]);

        let mean_pred = combine(&preds, Combiner::UniformMean, None)?;
        let mean_sq_err =
            (mean_pred[0] - truth[0]).powi(2) + (mean_pred[1] - truth[1]).powi(2);
        max_violation = max_violation.max(mean_sq_err - mean_sq);

        let first = preds[0];
        if preds.iter().any(|p| p[0] != first[0] || p[1] != first[1]) {
            disagreements += 1;
        }
    }
    let n = indices.len() as f64;
    Ok(EnsembleReport {
        member_mean_errors: pool
            .members
            .iter()
            .zip(&member_err)
            .map(|(m, &e)| (m.name.clone(), e / n))
            .collect(),
        combined_mean_error: combined_err / n,
        max_jensen_violation: max_violation,
        disagreement_fraction: disagreements as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_mean_of_two() {
        let p = combine(&[[0.0, 0.0], [2.0, 2.0]], Combiner::UniformMean, None).unwrap();
        assert_eq!(p, [1.0, 1.0]);
    }

    #[test]
    fn identical_predictions_are_fixed_points() {
        let preds = [[3.5, -2.0]; 4];
        for c in [Combiner::UniformMean, Combiner::CoordinateMedian] {
            assert_eq!(combine(&preds, c, None).unwrap(), [3.5, -2.0]);
        }
        let w = [0.1, 0.4, 0.3, 0.2];
        let wp = combine(&preds, Combiner::InverseErrorWeighted, Some(&w)).unwrap();
        assert!((wp[0] - 3.5).abs() < 1e-12 && (wp[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn median_rejects_outlier() {
        let p = combine(
            &[[0.0, 0.0], [0.0, 0.0], [9.0, 9.0]],
            Combiner::CoordinateMedian,
            None,
        )
        .unwrap();
        assert_eq!(p, [0.0, 0.0]);
    }

    #[test]
    fn single_prediction_passes_through() {
        let p = combine(&[[4.0, 5.0]], Combiner::UniformMean, None).unwrap();
        assert_eq!(p, [4.0, 5.0]);
        assert!(combine(&[], Combiner::UniformMean, None).is_err());
    }

    #[test]
    fn weighted_needs_matching_weights() {
        let preds = [[0.0, 0.0], [1.0, 1.0]];
        assert!(combine(&preds, Combiner::InverseErrorWeighted, Some(&[1.0])).is_err());
        assert!(combine(&preds, Combiner::InverseErrorWeighted, None).is_err());
        assert!(combine(&preds, Combiner::InverseErrorWeighted, Some(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn equal_weights_match_uniform_mean() {
        let preds = [[1.0, 5.0], [3.0, -1.0], [-2.0, 0.5]];
        let uniform = combine(&preds, Combiner::UniformMean, None).unwrap();
        let weighted =
            combine(&preds, Combiner::InverseErrorWeighted, Some(&[0.25, 0.25, 0.25])).unwrap();
        assert!((uniform[0] - weighted[0]).abs() < 1e-12);
        assert!((uniform[1] - weighted[1]).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        let base = TrainConfig::default();
        let spec = default_pool_spec([2, 8, 16], &base, Combiner::UniformMean);
        assert_eq!(spec.members.len(), 5);
        spec.ensure_valid().unwrap();
        let solo = EnsembleSpec {
            members: spec.members[..1].to_vec(),
            combiner: Combiner::UniformMean,
            validation_split: 0.1,
        };
        assert!(solo.ensure_valid().is_err());
    }

    proptest! {
        /// Member order never changes the combined output.
        #[test]
        fn permutation_invariance(
            preds in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 2..8),
            rot in 0usize..8,
        ) {
            let preds: Vec<[f64;2]> = preds.iter().map(|&(x, y)| [x, y]).collect();
            let mut shuffled = preds.clone();
            shuffled.rotate_left(rot % preds.len());
            for c in [Combiner::UniformMean, Combiner::CoordinateMedian] {
                let a = combine(&preds, c, None).unwrap();
                let b = combine(&shuffled, c, None).unwrap();
                prop_assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            }
        }

        /// Jensen: squared error of the mean prediction <= mean squared error.
        #[test]
        fn jensen_inequality_for_uniform_mean(
            preds in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 2..8),
            truth in (-100.0f64..100.0, -100.0f64..100.0),
        ) {
            let preds: Vec<[f64;2]> = preds.iter().map(|&(x, y)| [x, y]).collect();
            let mean = combine(&preds, Combiner::UniformMean, None).unwrap();
            let se_mean = (mean[0] - truth.0).powi(2) + (mean[1] - truth.1).powi(2);
            let mean_se = preds
                .iter()
                .map(|p| (p[0] - truth.0).powi(2) + (p[1] - truth.1).powi(2))
                .sum::<f64>() / preds.len() as f64;
            prop_assert!(se_mean <= mean_se + 1e-9 * mean_se.max(1.0));
        }
    }
}
