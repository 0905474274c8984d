//! Semi-supervised consistency pipeline.
//!
//! Stage 1 pretrains on the labeled subset — by default two structurally
//! divergent networks (the main backbone and a widened partner), so their
//! estimation errors decorrelate. Stage 2 fine-tunes each network on its
//! own pseudo dataset (interpolation variant A or B of the unlabeled CSI,
//! targeted at that network's own predictions), predicts every unlabeled
//! sample through its own variant view, and accepts a pseudo-label when
//! the two networks agree within the distance threshold `r` — the accepted
//! label is their midpoint. Agreement between independently trained
//! estimators marks low-variance predictions, which is what makes the
//! accepted labels better than either network alone. Stage 3 fine-tunes
//! the stage-1 models on the union of true and accepted pseudo labels.
//! Rounds accumulate: a sample accepted once stays in the pool, refreshed
//! whenever a later round re-accepts it.
//!
//! The single-model distance-threshold baseline (weak vs strong
//! augmentation agreement) lives here too for paired comparison.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{CsiTensor, Dataset};
use crate::error::{Error, Result};
use crate::eval::error_distance;
use crate::nn::{Checkpoint, CoordScaler, ModelConfig, Optimizer, Sequential};
use crate::rng;
use crate::trainer::{
    self, labeled_items, predict, predict_inputs, InputCache, TrainConfig, TrainItem, TrainReport,
};
use crate::transform::{interpolate_variant, InterpVariant};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemiConfig {
    /// Agreement radius in meters; predictions farther apart are rejected.
    pub r: f64,
    pub max_rounds: usize,
    /// Epochs for the stage-2 variant fine-tunes.
    pub finetune_epochs: usize,
    /// Epochs for the stage-3 combined fine-tune.
    pub stage3_epochs: usize,
    /// Fine-tuning runs at this fraction of the pretraining learning rate.
    pub finetune_lr_scale: f64,
    /// Loss weight of pseudo-labeled samples relative to true labels.
    pub pseudo_weight: f64,
    /// Stop iterating when the accepted set grows less than this fraction.
    pub min_accept_growth: f64,
    /// Train a structurally divergent partner network for the consistency
    /// pair; disabling falls back to two fine-tuned copies of one model.
    pub divergent_partner: bool,
}

impl Default for SemiConfig {
    fn default() -> Self {
        SemiConfig {
            r: 5.0,
            max_rounds: 2,
            finetune_epochs: 8,
            stage3_epochs: 16,
            finetune_lr_scale: 0.1,
            pseudo_weight: 1.0,
            min_accept_growth: 0.01,
            divergent_partner: true,
        }
    }
}

impl SemiConfig {
    pub fn diagnostics(&self) -> Vec<String> {
        let mut d = Vec::new();
        if !(self.r > 0.0) {
            d.push(format!("semi.r must be positive, got {}", self.r));
        }
        if self.max_rounds == 0 {
            d.push("semi.max_rounds must be at least 1".into());
        }
        if self.finetune_epochs == 0 || self.stage3_epochs == 0 {
            d.push("semi fine-tune epochs must be at least 1".into());
        }
        if !(self.finetune_lr_scale > 0.0) {
            d.push(format!(
                "semi.finetune_lr_scale must be positive, got {}",
                self.finetune_lr_scale
            ));
        }
        if self.pseudo_weight < 0.0 {
            d.push(format!("semi.pseudo_weight must be >= 0, got {}", self.pseudo_weight));
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

/// Outcome of the consistency check for one unlabeled sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabelRecord {
    pub sample_id: u64,
    pub pos_a: [f64; 2],
    pub pos_b: [f64; 2],
    pub agreement_m: f64,
    pub accepted: bool,
    /// Present iff accepted; always the midpoint of the two predictions.
    pub label: Option<[f64; 2]>,
    pub round: u32,
}

/// Pure acceptance rule: accept when the two predictions are within `r`,
/// labeling with their midpoint. `r = 0` accepts only exact agreement;
/// `r = +inf` accepts everything.
pub fn make_records(
    ids: &[u64],
    preds_a: &[[f64; 2]],
    preds_b: &[[f64; 2]],
    r: f64,
    round: u32,
) -> Result<Vec<PseudoLabelRecord>> {
    if ids.len() != preds_a.len() || ids.len() != preds_b.len() {
        return Err(Error::ShapeMismatch {
            context: "pseudo-label records".into(),
            expected: vec![ids.len(); 3],
            actual: vec![ids.len(), preds_a.len(), preds_b.len()],
        });
    }
    if r < 0.0 || r.is_nan() {
        return Err(Error::config(format!("threshold r must be >= 0, got {r}")));
    }
    let mut out = Vec::with_capacity(ids.len());
    for ((&id, &a), &b) in ids.iter().zip(preds_a).zip(preds_b) {
        let agreement = error_distance(a, b)?;
        let accepted = agreement <= r;
        out.push(PseudoLabelRecord {
            sample_id: id,
            pos_a: a,
            pos_b: b,
            agreement_m: agreement,
            accepted,
            label: accepted.then(|| [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]),
            round,
        });
    }
    Ok(out)
}

/// CSV export: {sample_id, ax, ay, bx, by, agreement, accepted, round}.
pub fn write_records_csv(path: &Path, records: &[PseudoLabelRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "sample_id,ax,ay,bx,by,agreement,accepted,round")?;
    for r in records {
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.sample_id,
            r.pos_a[0],
            r.pos_a[1],
            r.pos_b[0],
            r.pos_b[1],
            r.agreement_m,
            u8::from(r.accepted),
            r.round
        )?;
    }
    Ok(())
}

/// Shared state for one semi-supervised run over a dataset.
pub struct SemiContext<'a> {
    pub dataset: &'a Dataset,
    pub cache: &'a InputCache,
    pub labeled: Vec<usize>,
    /// Pseudo-label pool (unlabeled minus any held-out indices).
    pub unlabeled: Vec<usize>,
    /// Variant inputs, indexed parallel to `unlabeled`.
    pub variant_a: InputCache,
    pub variant_b: InputCache,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub scaler: CoordScaler,
    pub dataset_hash: String,
    index_of_id: BTreeMap<u64, usize>,
}

impl<'a> SemiContext<'a> {
    /// `exclude` marks dataset indices (e.g. a held-out test split) that
    /// must not participate in pseudo-labeling or training.
    pub fn new(
        dataset: &'a Dataset,
        cache: &'a InputCache,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        scaler: CoordScaler,
        exclude: &[usize],
        dataset_hash: String,
    ) -> Result<SemiContext<'a>> {
        let excluded: std::collections::BTreeSet<usize> = exclude.iter().copied().collect();
        let labeled: Vec<usize> = dataset
            .labeled_indices()
            .into_iter()
            .filter(|i| !excluded.contains(i))
            .collect();
        if labeled.is_empty() {
            return Err(Error::Empty("semi-supervised run needs labeled samples".into()));
        }
        let unlabeled: Vec<usize> = dataset
            .unlabeled_indices()
            .into_iter()
            .filter(|i| !excluded.contains(i))
            .collect();
        if unlabeled.is_empty() {
            return Err(Error::Empty("semi-supervised run needs unlabeled samples".into()));
        }

        let build_variant = |variant: InterpVariant| -> Result<InputCache> {
            let csis: Vec<CsiTensor> = unlabeled
                .iter()
                .map(|&i| interpolate_variant(&dataset.samples[i].csi, variant))
                .collect::<Result<_>>()?;
            let refs: Vec<&CsiTensor> = csis.iter().collect();
            InputCache::from_csis(&refs, cache.norm)
        };
        let variant_a = build_variant(InterpVariant::A)?;
        let variant_b = build_variant(InterpVariant::B)?;

        let index_of_id = dataset
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id, i))
            .collect();

        Ok(SemiContext {
            dataset,
            cache,
            labeled,
            unlabeled,
            variant_a,
            variant_b,
            model_cfg,
            train_cfg,
            scaler,
            dataset_hash,
            index_of_id,
        })
    }

    fn checkpoint(
        &self,
        model: &Sequential<f32>,
        opt: &Optimizer<f32>,
        tag: &str,
    ) -> Checkpoint {
        Checkpoint::from_sequential(model, tag, &self.dataset_hash, self.scaler, Some(opt))
    }
}

/// Stage 1: pretrain the backbone on the labeled subset.
pub fn stage1_pretrain(ctx: &SemiContext) -> Result<(Checkpoint, TrainReport)> {
    let items = labeled_items(ctx.dataset, &ctx.labeled);
    if items.is_empty() {
        return Err(Error::Empty("stage 1 requires at least one labeled sample".into()));
    }
    let cfg = ctx.train_cfg;
    let (model, opt, report) = trainer::fit(&ctx.model_cfg, ctx.cache, &items, &cfg, ctx.scaler)?;
    Ok((ctx.checkpoint(&model, &opt, "stage1"), report))
}

/// A structurally divergent sibling of the backbone: dense layers widened
/// by a third and a different init stream.
pub fn divergent_partner_config(cfg: &ModelConfig) -> ModelConfig {
    let mut out = cfg.clone();
    for layer in out.layers.iter_mut() {
        // widen hidden dense layers, leave the 2D coordinate head alone
        if let crate::nn::LayerSpec::Dense { out_features } = layer {
            if *out_features != 2 {
                *out_features = (*out_features * 4).div_ceil(3);
            }
        }
    }
    out.init_seed = rng::derive_seed(cfg.init_seed, "partner-init", &[]);
    out
}

/// Pretrain the partner network on the same labeled subset.
pub fn partner_pretrain(ctx: &SemiContext) -> Result<(Checkpoint, TrainReport)> {
    let items = labeled_items(ctx.dataset, &ctx.labeled);
    if items.is_empty() {
        return Err(Error::Empty("stage 1 requires at least one labeled sample".into()));
    }
    let partner_cfg = divergent_partner_config(&ctx.model_cfg);
    let cfg = TrainConfig {
        seed: rng::derive_seed(ctx.train_cfg.seed, "partner-train", &[]),
        ..ctx.train_cfg
    };
    let (model, opt, report) = trainer::fit(&partner_cfg, ctx.cache, &items, &cfg, ctx.scaler)?;
    Ok((ctx.checkpoint(&model, &opt, "stage1-partner"), report))
}

/// Stage 2: dual-network consistency pseudo-labeling.
///
/// Network A starts from `gen_a`, network B from `gen_b` (the divergent
/// partner; pass the same checkpoint twice for the two-copies fallback).
/// Each is fine-tuned on its own pseudo dataset — its interpolation
/// variant of the unlabeled CSI, targeted at its own predictions on the
/// clean inputs — and then predicts every unlabeled sample through its own
/// variant view. Fine-tunes run in parallel; records are merged by sample
/// id regardless of completion order.
pub fn stage2_pseudo_label(
    ctx: &SemiContext,
    gen_a: &Checkpoint,
    gen_b: &Checkpoint,
    cfg: &SemiConfig,
    round: u32,
) -> Result<Vec<PseudoLabelRecord>> {
    cfg.ensure_valid()?;
    let variant_indices: Vec<usize> = (0..ctx.unlabeled.len()).collect();
    let base_seed = ctx.train_cfg.seed;

    let run_side = |generator: &Checkpoint,
                    variant_cache: &InputCache,
                    label: &str|
     -> Result<Vec<[f64; 2]>> {
        let mut model = generator.to_sequential()?;
        let targets = predict(&mut model, ctx.cache, &ctx.unlabeled, ctx.scaler)?;
        let items: Vec<TrainItem> = variant_indices
            .iter()
            .map(|&i| TrainItem::new(i, targets[i]))
            .collect();
        let ft = ctx.train_cfg.fine_tune(
            cfg.finetune_epochs,
            cfg.finetune_lr_scale,
            rng::derive_seed(base_seed, label, &[u64::from(round)]),
        );
        let mut opt = Optimizer::new(ft.optim);
        trainer::train_supervised(&mut model, &mut opt, variant_cache, &items, &ft, ctx.scaler)?;
        predict(&mut model, variant_cache, &variant_indices, ctx.scaler)
    };

    let (preds_a, preds_b) = rayon::join(
        || run_side(gen_a, &ctx.variant_a, "stage2-a"),
        || run_side(gen_b, &ctx.variant_b, "stage2-b"),
    );
    let (preds_a, preds_b) = (preds_a?, preds_b?);

    let ids: Vec<u64> = ctx.unlabeled.iter().map(|&i| ctx.dataset.samples[i].id).collect();
    make_records(&ids, &preds_a, &preds_b, cfg.r, round)
}

/// Stage 3: fine-tune the stage-1 model on true labels plus accepted
/// pseudo-labels. With no accepted records this is exactly continued
/// fine-tuning on the labeled data alone.
pub fn stage3_finetune<'r>(
    ctx: &SemiContext,
    stage1: &Checkpoint,
    accepted: impl IntoIterator<Item = &'r PseudoLabelRecord>,
    cfg: &SemiConfig,
    round: u32,
) -> Result<(Checkpoint, TrainReport, usize)> {
    stage3_with_tag(ctx, stage1, accepted, cfg, round, &format!("stage3/round-{round}"), "stage3")
}

/// Stage 3 over an arbitrary base checkpoint (used for the partner too).
pub fn stage3_with_tag<'r>(
    ctx: &SemiContext,
    stage1: &Checkpoint,
    accepted: impl IntoIterator<Item = &'r PseudoLabelRecord>,
    cfg: &SemiConfig,
    round: u32,
    tag: &str,
    seed_label: &str,
) -> Result<(Checkpoint, TrainReport, usize)> {
    let mut items = labeled_items(ctx.dataset, &ctx.labeled);
    let n_labeled = items.len();
    let mut n_pseudo = 0usize;
    for rec in accepted {
        let label = rec.label.ok_or_else(|| {
            Error::config(format!("record for sample {} is not accepted", rec.sample_id))
        })?;
        let &input = ctx
            .index_of_id
            .get(&rec.sample_id)
            .ok_or_else(|| Error::config(format!("unknown sample id {}", rec.sample_id)))?;
        items.push(TrainItem { input, target: label, weight: cfg.pseudo_weight as f32 });
        n_pseudo += 1;
    }
    debug_assert_eq!(items.len(), n_labeled + n_pseudo);

    let mut model = stage1.to_sequential()?;
    let ft = ctx.train_cfg.fine_tune(
        cfg.stage3_epochs,
        cfg.finetune_lr_scale,
        rng::derive_seed(ctx.train_cfg.seed, seed_label, &[u64::from(round)]),
    );
    let mut opt = Optimizer::new(ft.optim);
    let report =
        trainer::train_supervised(&mut model, &mut opt, ctx.cache, &items, &ft, ctx.scaler)?;
    Ok((ctx.checkpoint(&model, &opt, tag), report, items.len()))
}

#[derive(Debug, Clone)]
pub struct RoundLog {
    pub round: u32,
    pub records: Vec<PseudoLabelRecord>,
    pub accepted_new: usize,
    pub accepted_total: usize,
    pub stage3_train_size: usize,
}

#[derive(Debug)]
pub struct SemiOutcome {
    pub stage1: Checkpoint,
    /// Stage-3 checkpoint of each executed round, in order.
    pub round_checkpoints: Vec<Checkpoint>,
    pub rounds: Vec<RoundLog>,
    /// Accumulated accepted records keyed by sample id (latest wins).
    pub accepted: BTreeMap<u64, PseudoLabelRecord>,
}

impl SemiOutcome {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.round_checkpoints.last().unwrap_or(&self.stage1)
    }
}

/// Run stage 1 once (two networks when the divergent partner is enabled),
/// then stages 2+3 iteratively. Each round's stage 2 uses the latest
/// checkpoints as pseudo-label generators; stage 3 always fine-tunes from
/// the corresponding stage-1 checkpoint on the accumulated accepted set.
/// Stops after `max_rounds` or when the accepted set grows less than
/// `min_accept_growth`.
pub fn iterate(ctx: &SemiContext, cfg: &SemiConfig) -> Result<SemiOutcome> {
    cfg.ensure_valid()?;
    let (stage1_res, partner_res) = rayon::join(
        || stage1_pretrain(ctx),
        || -> Result<Option<Checkpoint>> {
            if cfg.divergent_partner {
                Ok(Some(partner_pretrain(ctx)?.0))
            } else {
                Ok(None)
            }
        },
    );
    let (stage1, _) = stage1_res?;
    let partner = partner_res?;
    let partner_base = partner.clone().unwrap_or_else(|| stage1.clone());

    let mut accepted: BTreeMap<u64, PseudoLabelRecord> = BTreeMap::new();
    let mut gen_main = stage1.clone();
    let mut gen_partner = partner_base.clone();
    let mut round_checkpoints = Vec::new();
    let mut rounds = Vec::new();

    for round in 1..=cfg.max_rounds as u32 {
        let records = stage2_pseudo_label(ctx, &gen_main, &gen_partner, cfg, round)?;
        let before = accepted.len();
        for rec in records.iter().filter(|r| r.accepted) {
            accepted.insert(rec.sample_id, *rec);
        }
        let total = accepted.len();
        let (ck3, _, train_size) = stage3_finetune(ctx, &stage1, accepted.values(), cfg, round)?;
        gen_main = ck3.clone();
        round_checkpoints.push(ck3);
        rounds.push(RoundLog {
            round,
            records,
            accepted_new: total - before,
            accepted_total: total,
            stage3_train_size: train_size,
        });
        let stop = if before > 0 {
            ((total - before) as f64 / before as f64) < cfg.min_accept_growth
        } else {
            false
        };
        let more_rounds = !stop && (round as usize) < cfg.max_rounds;
        if more_rounds && cfg.divergent_partner {
            // partner follows the same combined fine-tune so the next
            // round's generators stay structurally divergent but current
            let (ckp, _, _) = stage3_with_tag(
                ctx,
                &partner_base,
                accepted.values(),
                cfg,
                round,
                &format!("stage3-partner/round-{round}"),
                "stage3-partner",
            )?;
            gen_partner = ckp;
        } else if more_rounds {
            gen_partner = gen_main.clone();
        }
        if stop {
            break;
        }
    }
    Ok(SemiOutcome { stage1, round_checkpoints, rounds, accepted })
}

/// Single-model distance-threshold baseline: predictions under weak
/// augmentation (training-level noise) and strong augmentation (variant-B
/// interpolation plus 3x noise) must agree within `r`; the weak prediction
/// becomes the pseudo-label and one combined fine-tune follows.
pub fn fixmatch_distance_baseline(
    ctx: &SemiContext,
    stage1: &Checkpoint,
    cfg: &SemiConfig,
) -> Result<(Checkpoint, usize)> {
    cfg.ensure_valid()?;
    let mut model = stage1.to_sequential()?;
    let seed = rng::derive_seed(ctx.train_cfg.seed, "fixmatch", &[]);
    let weak_sigma = ctx.train_cfg.augment_sigma;
    let strong_sigma = 3.0 * ctx.train_cfg.augment_sigma;

    let preds_weak = predict_inputs(&mut model, ctx.cache, &ctx.unlabeled, ctx.scaler, |c, i| {
        c.augmented(i, weak_sigma, seed, 0)
    })?;
    let variant_indices: Vec<usize> = (0..ctx.unlabeled.len()).collect();
    let preds_strong =
        predict_inputs(&mut model, &ctx.variant_b, &variant_indices, ctx.scaler, |c, i| {
            c.augmented(i, strong_sigma, seed, 1)
        })?;

    let mut items = labeled_items(ctx.dataset, &ctx.labeled);
    let mut accepted = 0usize;
    for (pos, (&w, &s)) in preds_weak.iter().zip(&preds_strong).enumerate() {
        if error_distance(w, s)? <= cfg.r {
            items.push(TrainItem {
                input: ctx.unlabeled[pos],
                target: w,
                weight: cfg.pseudo_weight as f32,
            });
            accepted += 1;
        }
    }

    let ft = ctx.train_cfg.fine_tune(
        cfg.stage3_epochs,
        cfg.finetune_lr_scale,
        rng::derive_seed(ctx.train_cfg.seed, "fixmatch-ft", &[]),
    );
    let mut tuned = stage1.to_sequential()?;
    let mut opt = Optimizer::new(ft.optim);
    trainer::train_supervised(&mut tuned, &mut opt, ctx.cache, &items, &ft, ctx.scaler)?;
    Ok((ctx.checkpoint(&tuned, &opt, "fixmatch"), accepted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejection_beyond_threshold() {
        let recs = make_records(&[1], &[[10.0, 10.0]], &[[10.0, 13.0]], 2.0, 1).unwrap();
        assert!(!recs[0].accepted);
        assert_eq!(recs[0].agreement_m, 3.0);
        assert_eq!(recs[0].label, None);
    }

    #[test]
    fn acceptance_takes_midpoint() {
        let recs = make_records(&[1], &[[10.0, 10.0]], &[[10.0, 13.0]], 4.0, 2).unwrap();
        assert!(recs[0].accepted);
        assert_eq!(recs[0].label, Some([10.0, 11.5]));
        assert_eq!(recs[0].round, 2);
    }

    #[test]
    fn boundary_thresholds() {
        let a = [[0.0, 0.0], [5.0, 5.0]];
        let b = [[1.0, 0.0], [5.0, 9.0]];
        let ids = [7u64, 8];
        let all = make_records(&ids, &a, &b, f64::INFINITY, 1).unwrap();
        assert!(all.iter().all(|r| r.accepted));
        let none = make_records(&ids, &a, &b, 0.0, 1).unwrap();
        assert!(none.iter().all(|r| !r.accepted));
        assert!(make_records(&ids, &a, &b, -1.0, 1).is_err());
    }

    #[test]
    fn exact_agreement_accepted_at_zero_radius() {
        let p = [[3.0, -4.0]];
        let recs = make_records(&[1], &p, &p, 0.0, 1).unwrap();
        assert!(recs[0].accepted);
        assert_eq!(recs[0].label, Some([3.0, -4.0]));
    }

    #[test]
    fn config_diagnostics() {
        let bad = SemiConfig { r: -1.0, max_rounds: 0, ..SemiConfig::default() };
        let d = bad.diagnostics();
        assert!(d.iter().any(|m| m.contains("semi.r")));
        assert!(d.iter().any(|m| m.contains("max_rounds")));
        assert!(SemiConfig::default().ensure_valid().is_ok());
    }

    #[test]
    fn records_csv_round_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let recs = make_records(
            &[4, 5],
            &[[0.0, 0.0], [1.0, 1.0]],
            &[[0.5, 0.0], [9.0, 9.0]],
            1.0,
            3,
        )
        .unwrap();
        write_records_csv(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().ends_with(",1,3"));
    }

    proptest! {
        /// Filter soundness and midpoint exactness over random predictions.
        #[test]
        fn soundness_and_midpoint(
            pairs in proptest::collection::vec(
                (( -100.0f64..100.0, -100.0f64..100.0), (-100.0f64..100.0, -100.0f64..100.0)),
                1..50,
            ),
            r in 0.0f64..50.0,
        ) {
            let ids: Vec<u64> = (0..pairs.len() as u64).collect();
            let a: Vec<[f64;2]> = pairs.iter().map(|p| [p.0.0, p.0.1]).collect();
            let b: Vec<[f64;2]> = pairs.iter().map(|p| [p.1.0, p.1.1]).collect();
            let recs = make_records(&ids, &a, &b, r, 1).unwrap();
            for rec in &recs {
                prop_assert_eq!(rec.accepted, rec.agreement_m <= r);
                match rec.label {
                    Some(l) => {
                        prop_assert!(rec.accepted);
                        prop_assert!((l[0] - (rec.pos_a[0] + rec.pos_b[0]) / 2.0).abs() < 1e-12);
                        prop_assert!((l[1] - (rec.pos_a[1] + rec.pos_b[1]) / 2.0).abs() < 1e-12);
                    }
                    None => prop_assert!(!rec.accepted),
                }
            }
        }

        /// Monotonicity: the accepted set at r1 <= r2 is a subset of r2's.
        #[test]
        fn acceptance_monotone_in_r(
            pairs in proptest::collection::vec(
                (( -50.0f64..50.0, -50.0f64..50.0), (-50.0f64..50.0, -50.0f64..50.0)),
                1..40,
            ),
            r1 in 0.0f64..30.0,
            dr in 0.0f64..30.0,
        ) {
            let r2 = r1 + dr;
            let ids: Vec<u64> = (0..pairs.len() as u64).collect();
            let a: Vec<[f64;2]> = pairs.iter().map(|p| [p.0.0, p.0.1]).collect();
            let b: Vec<[f64;2]> = pairs.iter().map(|p| [p.1.0, p.1.1]).collect();
            let small = make_records(&ids, &a, &b, r1, 1).unwrap();
            let large = make_records(&ids, &a, &b, r2, 1).unwrap();
            for (s, l) in small.iter().zip(&large) {
                prop_assert!(!s.accepted || l.accepted);
            }
        }
    }
}
