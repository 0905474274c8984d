//! Sector rotation and the decoupled-mapping-heads model.
//!
//! A three-sector deployment is symmetric under 120-degree rotation about
//! the BS. Rotating anchor coordinates from the other two sectors onto a
//! target sector triples the data each mapping head sees, while the CSI
//! itself is left untouched (propagation distances do not change). The
//! model shares one feature backbone across sectors and routes each sample
//! to the head of its serving sector.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    Checkpoint, CheckpointMeta, CoordScaler, Dense, DecoupledConfig, ArchConfig, LayerSpec,
    ModelConfig, Optimizer, Sequential,
};
use crate::trainer::{InputCache, TrainConfig, TrainItem, TrainReport};

/// Exact rotation angles available between sectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RotationAngle {
    Zero,
    Plus120,
    Minus120,
}

impl RotationAngle {
    pub fn degrees(self) -> f64 {
        match self {
            RotationAngle::Zero => 0.0,
            RotationAngle::Plus120 => 120.0,
            RotationAngle::Minus120 => -120.0,
        }
    }

    /// cos/sin at full f64 precision (cos 120 = -1/2 exactly).
    fn cos_sin(self) -> (f64, f64) {
        let half_sqrt3 = 3f64.sqrt() / 2.0;
        match self {
            RotationAngle::Zero => (1.0, 0.0),
            RotationAngle::Plus120 => (-0.5, half_sqrt3),
            RotationAngle::Minus120 => (-0.5, -half_sqrt3),
        }
    }

    pub fn inverse(self) -> RotationAngle {
        match self {
            RotationAngle::Zero => RotationAngle::Zero,
            RotationAngle::Plus120 => RotationAngle::Minus120,
            RotationAngle::Minus120 => RotationAngle::Plus120,
        }
    }
}

/// An isometry of the plane: rotation about a fixed center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectorRotation {
    pub center: [f64; 2],
    pub angle: RotationAngle,
}

/// Rotate a point about the rotation center.
pub fn rotate_coordinates(p: [f64; 2], rot: &SectorRotation) -> [f64; 2] {
    let (c, s) = rot.angle.cos_sin();
    let dx = p[0] - rot.center[0];
    let dy = p[1] - rot.center[1];
    [rot.center[0] + c * dx - s * dy, rot.center[1] + s * dx + c * dy]
}

/// The rotation carrying sector `from`'s boresight onto sector `to`'s.
pub fn rotation_between(from: u8, to: u8, boresights_deg: &[f64; 3]) -> Result<RotationAngle> {
    if from > 2 {
        return Err(Error::UnknownSector(from));
    }
    if to > 2 {
        return Err(Error::UnknownSector(to));
    }
    let gap = crate::scene::wrap_deg(boresights_deg[to as usize] - boresights_deg[from as usize]);
    if gap.abs() < 1e-9 {
        Ok(RotationAngle::Zero)
    } else if (gap - 120.0).abs() < 1e-9 {
        Ok(RotationAngle::Plus120)
    } else if (gap + 120.0).abs() < 1e-9 {
        Ok(RotationAngle::Minus120)
    } else {
        Err(Error::config(format!(
            "sectors {from} and {to} are {gap} degrees apart, not a multiple of 120"
        )))
    }
}

/// Rotate every sample of the two other sectors onto `target_sector`.
/// CSI is unchanged; labels (when present) rotate about the BS; the sector
/// tag is rewritten to the target and `origin_sector` keeps the source.
pub fn build_virtual_sector_dataset(ds: &Dataset, target_sector: u8) -> Result<Dataset> {
    if target_sector > 2 {
        return Err(Error::UnknownSector(target_sector));
    }
    let center = ds.config.bs_xy();
    let boresights = ds.config.sector_boresights_deg;
    let mut out = ds.clone();
    for s in &mut out.samples {
        let origin = s.sector;
        if origin > 2 {
            return Err(Error::UnknownSector(origin));
        }
        if origin != target_sector {
            let angle = rotation_between(origin, target_sector, &boresights)?;
            if let Some(p) = s.position {
                s.position = Some(rotate_coordinates(p, &SectorRotation { center, angle }));
            }
            s.origin_sector = origin;
            s.sector = target_sector;
        }
    }
    Ok(out)
}

/// How a sample's serving sector is determined at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectorPolicy {
    /// Use the sector tag carried by the sample; error when absent.
    KnownTag,
    /// Classify by mean CSI power against per-sector profiles recorded at
    /// training time.
    PowerProfile,
}

/// Shared backbone with three per-sector mapping heads.
#[derive(Debug, Clone)]
pub struct DecoupledHeadModel {
    pub config: DecoupledConfig,
    pub backbone: Sequential<f32>,
    pub heads: Vec<Dense<f32>>,
    pub scaler: CoordScaler,
    /// Mean log10 CSI power per sector, for the PowerProfile policy.
    pub sector_log_power: [f64; 3],
}

/// Default decoupled architecture: conv backbone ending in a feature
/// vector, three dense heads on top.
pub fn default_decoupled(input_dims: [usize; 3], init_seed: u64) -> DecoupledConfig {
    DecoupledConfig {
        backbone: ModelConfig {
            input_dims,
            layers: vec![
                LayerSpec::Conv2d { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { size: 2 },
                LayerSpec::Conv2d { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_features: 32 },
                LayerSpec::Relu,
            ],
            init_seed,
        },
        n_heads: 3,
    }
}

impl DecoupledHeadModel {
    pub fn new(config: DecoupledConfig, scaler: CoordScaler) -> Result<Self> {
        if config.n_heads != 3 {
            return Err(Error::config(format!(
                "decoupled model requires exactly 3 heads, got {}",
                config.n_heads
            )));
        }
        let feature_dim = config.backbone.output_dim()?;
        let backbone = Sequential::new(config.backbone.clone())?;
        let heads = (0..config.n_heads)
            .map(|k| {
                let mut d = Dense::new(feature_dim, 2);
                crate::nn::init_dense(&mut d, config.backbone.init_seed, 1000 + k as u64);
                d
            })
            .collect();
        Ok(DecoupledHeadModel {
            config,
            backbone,
            heads,
            scaler,
            sector_log_power: [0.0; 3],
        })
    }

    fn all_params_mut(&mut self) -> Vec<crate::nn::ParamMut<'_, f32>> {
        let mut params = self.backbone.params_mut();
        for (k, head) in self.heads.iter_mut().enumerate() {
            params.push(crate::nn::ParamMut {
                name: format!("head{k}.weight"),
                value: head.weight.view_mut().into_dyn(),
                grad: head.wgrad.view_mut().into_dyn(),
            });
            params.push(crate::nn::ParamMut {
                name: format!("head{k}.bias"),
                value: head.bias.view_mut().into_dyn(),
                grad: head.bgrad.view_mut().into_dyn(),
            });
        }
        params
    }

    fn zero_grad(&mut self) {
        self.backbone.zero_grad();
        for head in &mut self.heads {
            head.wgrad.fill(0.0);
            head.bgrad.fill(0.0);
        }
    }

    /// Predictions for a batch of inputs routed to the given heads; output
    /// in the head's own coordinate frame, descaled to meters.
    pub fn predict_routed(
        &mut self,
        x: &Array4<f32>,
        heads: &[u8],
    ) -> Result<Vec<[f64; 2]>> {
        if x.shape()[0] != heads.len() {
            return Err(Error::ShapeMismatch {
                context: "routing".into(),
                expected: vec![x.shape()[0]],
                actual: vec![heads.len()],
            });
        }
        let feats = self.backbone.forward(x, false)?;
        let mut out = vec![[0.0f64; 2]; heads.len()];
        for k in 0..self.heads.len() as u8 {
            let rows: Vec<usize> =
                (0..heads.len()).filter(|&i| heads[i] == k).collect();
            if rows.is_empty() {
                continue;
            }
            let sub = gather_rows(&feats, &rows);
            let pred = self.heads[k as usize].forward(sub, false)?;
            for (j, &row) in rows.iter().enumerate() {
                out[row] = self
                    .scaler
                    .to_world([pred[[j, 0]] as f64, pred[[j, 1]] as f64]);
            }
        }
        if let Some(&bad) = heads.iter().find(|&&h| h as usize >= self.heads.len()) {
            return Err(Error::UnknownSector(bad));
        }
        Ok(out)
    }

    /// Route one sample and predict its position.
    ///
    /// `csi_power` is the raw-sample mean |H|^2 needed by the PowerProfile
    /// policy. When routing to the sample's own serving sector no rotation
    /// correction is needed; [`predict_with_head`] exposes foreign-head
    /// prediction with the inverse rotation applied.
    pub fn route_and_predict(
        &mut self,
        input: &ndarray::Array3<f32>,
        sector: Option<u8>,
        csi_power: Option<f64>,
        policy: SectorPolicy,
    ) -> Result<[f64; 2]> {
        let head = match policy {
            SectorPolicy::KnownTag => sector.ok_or(Error::MissingSector)?,
            SectorPolicy::PowerProfile => {
                let p = csi_power.ok_or(Error::MissingSector)?;
                self.classify_by_power(p)
            }
        };
        if head > 2 {
            return Err(Error::UnknownSector(head));
        }
        let x = input
            .clone()
            .insert_axis(ndarray::Axis(0));
        Ok(self.predict_routed(&x, &[head])?[0])
    }

    /// Predict through an explicit head for a sample originating in
    /// `origin_sector`, rotating the output back into world coordinates.
    pub fn predict_with_head(
        &mut self,
        input: &ndarray::Array3<f32>,
        head: u8,
        origin_sector: u8,
        boresights_deg: &[f64; 3],
        center: [f64; 2],
    ) -> Result<[f64; 2]> {
        let x = input.clone().insert_axis(ndarray::Axis(0));
        let raw = self.predict_routed(&x, &[head])?[0];
        // training mapped origin->head coordinates; invert that rotation
        let angle = rotation_between(origin_sector, head, boresights_deg)?.inverse();
        Ok(rotate_coordinates(raw, &SectorRotation { center, angle }))
    }

    pub fn classify_by_power(&self, mean_power: f64) -> u8 {
        let lp = mean_power.max(1e-30).log10();
        let mut best = 0u8;
        let mut best_d = f64::INFINITY;
        for (k, &ref_lp) in self.sector_log_power.iter().enumerate() {
            let d = (lp - ref_lp).abs();
            if d < best_d {
                best_d = d;
                best = k as u8;
            }
        }
        best
    }

    pub fn to_checkpoint(
        &self,
        stage_tag: &str,
        dataset_hash: &str,
        optimizer: Option<&Optimizer<f32>>,
    ) -> Checkpoint {
        let mut blobs: Vec<(String, Vec<u64>, Vec<f32>)> = Vec::new();
        for p in self.backbone.params_ref() {
            let dims: Vec<u64> = p.value.shape().iter().map(|&d| d as u64).collect();
            blobs.push((format!("backbone.{}", p.name), dims, p.value.iter().cloned().collect()));
        }
        for (k, head) in self.heads.iter().enumerate() {
            blobs.push((
                format!("head{k}.weight"),
                vec![head.weight.shape()[0] as u64, head.weight.shape()[1] as u64],
                head.weight.iter().cloned().collect(),
            ));
            blobs.push((
                format!("head{k}.bias"),
                vec![head.bias.len() as u64],
                head.bias.iter().cloned().collect(),
            ));
        }
        blobs.push((
            "sector_log_power".into(),
            vec![3],
            self.sector_log_power.iter().map(|&v| v as f32).collect(),
        ));
        let (step_count, optim) = match optimizer {
            Some(o) => (o.step_count(), Some(o.spec)),
            None => (0, None),
        };
        Checkpoint::new(
            CheckpointMeta {
                arch: ArchConfig::Decoupled(self.config.clone()),
                stage_tag: stage_tag.to_string(),
                dataset_hash: dataset_hash.to_string(),
                step_count,
                optim,
                scaler: self.scaler,
            },
            blobs,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<DecoupledHeadModel> {
        let config = match &ckpt.meta.arch {
            ArchConfig::Decoupled(c) => c.clone(),
            ArchConfig::Sequential(_) => {
                return Err(Error::format(
                    "checkpoint holds a sequential model, not a decoupled one",
                ))
            }
        };
        let mut model = DecoupledHeadModel::new(config, ckpt.meta.scaler)?;
        ckpt.load_params_into(&mut model.backbone, "backbone.")?;
        for (k, head) in model.heads.iter_mut().enumerate() {
            let (_, _, w) = ckpt.get_blob(&format!("head{k}.weight"))?;
            for (dst, &src) in head.weight.iter_mut().zip(w) {
                *dst = src;
            }
            let (_, _, b) = ckpt.get_blob(&format!("head{k}.bias"))?;
            for (dst, &src) in head.bias.iter_mut().zip(b) {
                *dst = src;
            }
        }
        let (_, _, slp) = ckpt.get_blob("sector_log_power")?;
        for (dst, &src) in model.sector_log_power.iter_mut().zip(slp) {
            *dst = src as f64;
        }
        Ok(model)
    }
}

fn gather_rows(a: &Array2<f32>, rows: &[usize]) -> Array2<f32> {
    let mut out = Array2::zeros((rows.len(), a.shape()[1]));
    for (j, &r) in rows.iter().enumerate() {
        out.row_mut(j).assign(&a.row(r));
    }
    out
}

/// A training item with its routed head: target is already rotated into the
/// head's sector frame.
#[derive(Debug, Clone, Copy)]
pub struct RoutedItem {
    pub input: usize,
    pub head: u8,
    pub target: [f64; 2],
    pub weight: f32,
}

/// Build the coupled training set: every labeled item appears once per
/// head, with its label rotated from its origin sector onto the head's.
pub fn routed_items(ds: &Dataset, indices: &[usize]) -> Result<Vec<RoutedItem>> {
    let center = ds.config.bs_xy();
    let boresights = ds.config.sector_boresights_deg;
    let mut items = Vec::new();
    for target in 0..3u8 {
        for &i in indices {
            let s = &ds.samples[i];
            let Some(p) = s.position else { continue };
            let angle = rotation_between(s.sector, target, &boresights)?;
            let rotated = rotate_coordinates(p, &SectorRotation { center, angle });
            items.push(RoutedItem { input: i, head: target, target: rotated, weight: 1.0 });
        }
    }
    Ok(items)
}

/// Coupled training: batches mix all heads; each sample's loss reaches only
/// its routed head, while the backbone accumulates every gradient.
pub fn train_decoupled(
    model: &mut DecoupledHeadModel,
    optimizer: &mut Optimizer<f32>,
    cache: &InputCache,
    items: &[RoutedItem],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if items.is_empty() {
        return Err(Error::Empty("decoupled training over no items".into()));
    }
    let scaler = model.scaler;
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        let mut r = crate::rng::stream(cfg.seed, "shuffle", &[epoch as u64]);
        order.shuffle(&mut r);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<RoutedItem> = chunk.iter().map(|&i| items[i]).collect();
            let plain: Vec<TrainItem> = batch
                .iter()
                .map(|it| TrainItem { input: it.input, target: it.target, weight: it.weight })
                .collect();
            let x = {
                let [c, h, w] = cache.dims;
                let mut x = Array4::zeros((plain.len(), c, h, w));
                for (row, item) in plain.iter().enumerate() {
                    let input =
                        cache.augmented(item.input, cfg.augment_sigma, cfg.seed, epoch as u64)?;
                    x.index_axis_mut(ndarray::Axis(0), row).assign(&input);
                }
                x
            };

            model.zero_grad();
            let feats = model.backbone.forward(&x, true)?;
            let mut dfeat = Array2::<f32>::zeros(feats.raw_dim());
            let bsz = batch.len();
            let mut batch_loss = 0.0;
            for k in 0..3u8 {
                let rows: Vec<usize> =
                    (0..batch.len()).filter(|&i| batch[i].head == k).collect();
                if rows.is_empty() {
                    continue;
                }
                let sub = gather_rows(&feats, &rows);
                let pred = model.heads[k as usize].forward(sub, true)?;
                let mut t = Array2::zeros((rows.len(), 2));
                let mut weights = Vec::with_capacity(rows.len());
                for (j, &row) in rows.iter().enumerate() {
                    let m = scaler.to_model(batch[row].target);
                    t[[j, 0]] = m[0] as f32;
                    t[[j, 1]] = m[1] as f32;
                    weights.push(batch[row].weight);
                }
                // per-sample grads normalized by the FULL batch size
                let mut diff = &pred - &t;
                for (j, mut drow) in diff.rows_mut().into_iter().enumerate() {
                    let w = weights[j];
                    batch_loss += w as f64
                        * drow.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
                    let s = 2.0 / bsz as f32 * w;
                    drow.mapv_inplace(|v| v * s);
                }
                let dsub = model.heads[k as usize].backward(&diff)?;
                for (j, &row) in rows.iter().enumerate() {
                    dfeat.row_mut(row).assign(&dsub.row(j));
                }
            }
            let batch_loss = batch_loss / bsz as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite decoupled loss at epoch {epoch}"
                )));
            }
            model.backbone.backward(&dfeat)?;
            optimizer.step(model.all_params_mut())?;
            epoch_loss += batch_loss * bsz as f64;
            seen += bsz;
        }
        report.epoch_losses.push(epoch_loss / seen as f64);
    }
    model.backbone.clear_caches();
    Ok(report)
}

/// Record per-sector mean log power from training samples, used by the
/// PowerProfile routing policy.
pub fn record_sector_power(model: &mut DecoupledHeadModel, ds: &Dataset) {
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for s in &ds.samples {
        if s.origin_sector > 2 {
            continue;
        }
        let p = s.csi.iter().map(|v| v.norm_sqr()).sum::<f64>() / s.csi.len() as f64;
        sums[s.origin_sector as usize] += p.max(1e-30).log10();
        counts[s.origin_sector as usize] += 1;
    }
    for k in 0..3 {
        if counts[k] > 0 {
            // stored as f32 in checkpoints; quantize now so round trips are exact
            model.sector_log_power[k] = (sums[k] / counts[k] as f64) as f32 as f64;
        }
    }
}
