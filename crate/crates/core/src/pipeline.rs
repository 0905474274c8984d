//! End-to-end orchestration: generate, preprocess, train one of the
//! methods, evaluate, and record a manifest tying every artifact together.
//!
//! Each invocation creates a fresh run directory; manifests are never
//! rewritten. All artifact content is a pure function of (config, seed).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::generate_with_truth;
use crate::dataset::Dataset;
use crate::ensemble;
use crate::error::{Error, Result};
use crate::eval::{build_report, EvalReport, SampleMeta};
use crate::experiment::{ExperimentConfig, Method};
use crate::hashes::sha256_hex_file;
use crate::nn::{Checkpoint, Optimizer};
use crate::rng;
use crate::sector::{self, SectorPolicy};
use crate::semi::{self, SemiContext};
use crate::trainer::{self, InputCache, TrainConfig};
use crate::transform::{preprocess_dataset, NormMode};

pub const RUN_DIR_ENV: &str = "CELLPOS_RUN_DIR";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool_version: String,
    pub created_utc: String,
    pub seed: u64,
    pub method: String,
    pub dataset_hash: String,
    pub elapsed_s: f64,
    pub artifacts: Vec<ArtifactEntry>,
    pub summary: BTreeMap<String, String>,
    /// Full config snapshot for reproduction.
    pub config_toml: String,
}

#[derive(Debug)]
pub struct RunOutput {
    pub run_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: ExperimentManifest,
    pub report: EvalReport,
}

/// Resolve the run base directory: explicit flag, else env var, else ./runs.
pub fn resolve_base_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Ok(env) = std::env::var(RUN_DIR_ENV) {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("runs")
}

/// Create a unique run directory under the base; never reuses an existing
/// one, so earlier manifests stay untouched.
pub fn create_run_dir(base: &Path, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(base)?;
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    for attempt in 0u32.. {
        let name = if attempt == 0 {
            format!("run-{stamp}-seed{seed}")
        } else {
            format!("run-{stamp}-seed{seed}-{attempt}")
        };
        let dir = base.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::Io(e)),
        }
    }
    unreachable!()
}

/// Seeded held-out test split drawn from the unlabeled pool.
pub fn test_split(ds: &Dataset, fraction: f64, seed: u64) -> Vec<usize> {
    let mut pool = ds.unlabeled_indices();
    use rand::seq::SliceRandom;
    let mut r = rng::stream(seed, "test-split", &[]);
    pool.shuffle(&mut r);
    let want = ((ds.samples.len() as f64 * fraction).round() as usize).min(pool.len());
    let mut take: Vec<usize> = pool.into_iter().take(want).collect();
    take.sort_unstable();
    take
}

fn write_ids_csv(path: &Path, ids: &[u64]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "id")?;
    for id in ids {
        writeln!(f, "{id}")?;
    }
    Ok(())
}

pub fn read_ids_csv(path: &Path) -> Result<Vec<u64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let t = line.trim();
        if ln == 0 && t == "id" || t.is_empty() {
            continue;
        }
        out.push(
            t.parse()
                .map_err(|e| Error::format(format!("ids csv line {}: {e}", ln + 1)))?,
        );
    }
    Ok(out)
}

struct ArtifactLog<'a> {
    dir: &'a Path,
    entries: Vec<ArtifactEntry>,
}

impl<'a> ArtifactLog<'a> {
    fn record(&mut self, name: &str, path: &Path) -> Result<()> {
        self.entries.push(ArtifactEntry {
            name: name.to_string(),
            path: path
                .strip_prefix(self.dir)
                .unwrap_or(path)
                .to_string_lossy()
                .into_owned(),
            sha256: sha256_hex_file(path)?,
        });
        Ok(())
    }
}

/// Predictions of the chosen method's final model on the test indices.
fn method_predictions(
    method: Method,
    cfg: &ExperimentConfig,
    ds: &Dataset,
    cache: &InputCache,
    test_idx: &[usize],
    dataset_hash: &str,
    dir: &Path,
    log: &mut ArtifactLog,
    summary: &mut BTreeMap<String, String>,
) -> Result<Vec<[f64; 2]>> {
    let scaler = trainer::scaler_for_scene(&ds.config);
    let train_cfg = TrainConfig {
        seed: rng::derive_seed(ds.config.seed, "train", &[]),
        ..cfg.train
    };
    let model_cfg = cfg.resolved_model();

    match method {
        Method::Train => {
            let excluded: std::collections::BTreeSet<usize> = test_idx.iter().copied().collect();
            let labeled: Vec<usize> = ds
                .labeled_indices()
                .into_iter()
                .filter(|i| !excluded.contains(i))
                .collect();
            let items = trainer::labeled_items(ds, &labeled);
            let (model, opt, report) =
                trainer::fit(&model_cfg, cache, &items, &train_cfg, scaler)?;
            let ckpt =
                Checkpoint::from_sequential(&model, "supervised", dataset_hash, scaler, Some(&opt));
            let path = dir.join("model.cpnn");
            ckpt.save(&path)?;
            log.record("checkpoint/supervised", &path)?;
            summary.insert("train_final_loss".into(), format!("{:.6}", report.last_loss()));
            let mut model = ckpt.to_sequential()?;
            trainer::predict(&mut model, cache, test_idx, scaler)
        }
        Method::Semi => {
            let ctx = SemiContext::new(
                ds,
                cache,
                model_cfg,
                train_cfg,
                scaler,
                test_idx,
                dataset_hash.to_string(),
            )?;
            let outcome = semi::iterate(&ctx, &cfg.semi)?;
            let p = dir.join("stage1.cpnn");
            outcome.stage1.save(&p)?;
            log.record("checkpoint/stage1", &p)?;
            for (ck, round_log) in outcome.round_checkpoints.iter().zip(&outcome.rounds) {
                let p = dir.join(format!("stage3-round-{}.cpnn", round_log.round));
                ck.save(&p)?;
                log.record(&format!("checkpoint/stage3-round-{}", round_log.round), &p)?;
                let rp = dir.join(format!("records-round-{}.csv", round_log.round));
                semi::write_records_csv(&rp, &round_log.records)?;
                log.record(&format!("records/round-{}", round_log.round), &rp)?;
                summary.insert(
                    format!("semi_round{}_accepted_total", round_log.round),
                    round_log.accepted_total.to_string(),
                );
            }
            summary.insert("semi_rounds_run".into(), outcome.rounds.len().to_string());
            let mut model = outcome.final_checkpoint().to_sequential()?;
            trainer::predict(&mut model, cache, test_idx, scaler)
        }
        Method::Ensemble => {
            let spec = ensemble::default_pool_spec(
                [cache.dims[0], cache.dims[1], cache.dims[2]],
                &train_cfg,
                cfg.ensemble.combiner,
            );
            let spec = ensemble::EnsembleSpec {
                validation_split: cfg.ensemble.validation_split,
                ..spec
            };
            let pool = ensemble::train_pool(&spec, ds, cache, scaler, test_idx, dataset_hash)?;
            let weights = pool.inverse_error_weights();
            for (k, m) in pool.members.iter().enumerate() {
                let p = dir.join(format!("member-{k}-{}.cpnn", m.name));
                m.checkpoint.save(&p)?;
                log.record(&format!("checkpoint/member-{}", m.name), &p)?;
            }
            let pcsv = dir.join("pool.csv");
            {
                use std::io::Write;
                let mut f = std::io::BufWriter::new(std::fs::File::create(&pcsv)?);
                writeln!(f, "member,val_mse,val_mean_error,weight")?;
                for (m, w) in pool.members.iter().zip(&weights) {
                    writeln!(f, "{},{:.6},{:.6},{:.8}", m.name, m.val_mse, m.val_mean_error, w)?;
                }
            }
            log.record("ensemble/pool", &pcsv)?;
            summary.insert("ensemble_members".into(), pool.members.len().to_string());
            ensemble::predict_combined(&pool, cache, test_idx, scaler, cfg.ensemble.combiner)
        }
        Method::Decoupled => {
            let excluded: std::collections::BTreeSet<usize> = test_idx.iter().copied().collect();
            let train_indices: Vec<usize> = ds
                .labeled_indices()
                .into_iter()
                .filter(|i| !excluded.contains(i))
                .collect();
            let items = sector::routed_items(ds, &train_indices)?;
            let dcfg = sector::default_decoupled(
                [cache.dims[0], cache.dims[1], cache.dims[2]],
                rng::derive_seed(ds.config.seed, "decoupled-init", &[]),
            );
            let mut model = sector::DecoupledHeadModel::new(dcfg, scaler)?;
            let tc = TrainConfig {
                epochs: cfg.decoupled.epochs.unwrap_or(cfg.train.epochs),
                ..train_cfg
            };
            let mut opt = Optimizer::new(tc.optim);
            let report = sector::train_decoupled(&mut model, &mut opt, cache, &items, &tc)?;
            sector::record_sector_power(&mut model, ds);
            let ckpt = model.to_checkpoint("decoupled", dataset_hash, Some(&opt));
            let p = dir.join("decoupled.cpnn");
            ckpt.save(&p)?;
            log.record("checkpoint/decoupled", &p)?;
            summary.insert(
                "decoupled_final_loss".into(),
                format!("{:.6}", report.last_loss()),
            );
            test_idx
                .iter()
                .map(|&i| {
                    model.route_and_predict(
                        &cache.clean[i],
                        Some(ds.samples[i].sector),
                        None,
                        SectorPolicy::KnownTag,
                    )
                })
                .collect()
        }
    }
}

/// Run the full pipeline for one config into a fresh run directory.
pub fn run_pipeline(cfg: &ExperimentConfig, base_dir: &Path) -> Result<RunOutput> {
    cfg.ensure_valid()?;
    let started = Instant::now();
    let dir = create_run_dir(base_dir, cfg.scene.seed)?;
    let mut log = ArtifactLog { dir: &dir, entries: Vec::new() };
    let mut summary = BTreeMap::new();

    // config snapshot
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml())?;
    log.record("config", &cfg_path)?;

    // stage: generate
    let (ds, truth) = generate_with_truth(&cfg.scene)?;
    let data_path = dir.join("dataset.cplb");
    ds.save(&data_path)?;
    let dataset_hash = sha256_hex_file(&data_path)?;
    log.record("dataset", &data_path)?;
    let truth_path = dir.join("truth.csv");
    truth.write_csv(&truth_path)?;
    log.record("truth", &truth_path)?;
    summary.insert("samples".into(), ds.samples.len().to_string());
    summary.insert("labeled".into(), ds.labeled_indices().len().to_string());

    // reload from disk so downstream stages see exactly the stored values
    let ds = Dataset::load(&data_path)?;

    // stage: preprocess
    let pre = preprocess_dataset(&ds, NormMode::Unitary)?;
    let pre_path = dir.join("preprocessed.cplb");
    pre.save(&pre_path)?;
    log.record("preprocessed", &pre_path)?;
    drop(pre);

    let cache = InputCache::from_dataset(&ds, NormMode::Unitary)?;

    // stage: split
    let test_idx = test_split(&ds, cfg.evaluation.test_fraction, ds.config.seed);
    let ids: Vec<u64> = test_idx.iter().map(|&i| ds.samples[i].id).collect();
    let ids_path = dir.join("test_ids.csv");
    write_ids_csv(&ids_path, &ids)?;
    log.record("test-ids", &ids_path)?;
    summary.insert("test_samples".into(), test_idx.len().to_string());

    // stage: method
    let method = cfg.pipeline.method;
    let preds = method_predictions(
        method,
        cfg,
        &ds,
        &cache,
        &test_idx,
        &dataset_hash,
        &dir,
        &mut log,
        &mut summary,
    )?;

    // stage: evaluate
    let (truths, meta): (Vec<[f64; 2]>, Vec<SampleMeta>) = test_idx
        .iter()
        .map(|&i| {
            let s = &ds.samples[i];
            let t = truth.get(s.id).expect("truth covers every sample");
            (t.position, SampleMeta { id: s.id, sector: s.sector, is_los: s.is_los })
        })
        .unzip();
    let report = build_report(&preds, &truths, &meta)?;
    let report_path = dir.join("report.csv");
    report.write_report_csv(&report_path)?;
    log.record("eval/report", &report_path)?;
    let summary_path = dir.join("summary.csv");
    report.write_summary_csv(&summary_path)?;
    log.record("eval/summary", &summary_path)?;
    let cdf_path = dir.join("cdf.csv");
    report.write_cdf_csv(&cdf_path)?;
    log.record("eval/cdf", &cdf_path)?;

    summary.insert("mean_error_m".into(), format!("{:.6}", report.mean_error_m));
    summary.insert("p90_m".into(), format!("{:.6}", report.percentiles.p90));
    summary.insert("p50_m".into(), format!("{:.6}", report.percentiles.p50));

    let manifest = ExperimentManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        created_utc: chrono::Utc::now().to_rfc3339(),
        seed: cfg.scene.seed,
        method: method.to_string(),
        dataset_hash,
        elapsed_s: started.elapsed().as_secs_f64(),
        artifacts: log.entries,
        summary,
        config_toml: cfg.to_toml(),
    };
    let manifest_path = dir.join("manifest.toml");
    std::fs::write(
        &manifest_path,
        toml::to_string_pretty(&manifest)
            .map_err(|e| Error::format(format!("manifest serialization: {e}")))?,
    )?;

    Ok(RunOutput { run_dir: dir, manifest_path, manifest, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dirs_never_collide() {
        let tmp = tempfile::tempdir().unwrap();
        let a = create_run_dir(tmp.path(), 7).unwrap();
        let b = create_run_dir(tmp.path(), 7).unwrap();
        assert_ne!(a, b);
        assert!(a.exists() && b.exists());
    }

    #[test]
    fn test_split_is_seeded_and_unlabeled_only() {
        let cfg = crate::scene::SceneConfig {
            n_rx_per_sector: [20, 10, 10],
            rx_grid_spacing_m: 4.0,
            n_freq_bins: 16,
            bs_array_rows: 2,
            bs_array_cols: 2,
            n_scatterers: 3,
            n_buildings: 0,
            labeled_fraction: 0.3,
            seed: 5,
            ..Default::default()
        };
        let ds = crate::channel::generate_dataset(&cfg).unwrap();
        let a = test_split(&ds, 0.2, 5);
        let b = test_split(&ds, 0.2, 5);
        assert_eq!(a, b);
        assert_eq!(a.len(), 8); // round(0.2 * 40)
        assert!(a.iter().all(|&i| ds.samples[i].position.is_none()));
        let c = test_split(&ds, 0.2, 6);
        assert_ne!(a, c);
    }

    #[test]
    fn ids_csv_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("ids.csv");
        write_ids_csv(&p, &[3, 1, 4, 1, 5]).unwrap();
        assert_eq!(read_ids_csv(&p).unwrap(), vec![3, 1, 4, 1, 5]);
    }
}
