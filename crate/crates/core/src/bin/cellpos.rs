//! Command-line front end: dataset generation, preprocessing, training,
//! the semi-supervised / ensemble / decoupled methods, evaluation, and the
//! full pipeline.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use cellpos::channel;
use cellpos::dataset::{
    Container, ContainerMeta, ContainerWriter, Dataset, PayloadKind, TruthTable,
};
use cellpos::ensemble::{self, Combiner, EnsembleSpec};
use cellpos::error::Error;
use cellpos::eval::{build_report, SampleMeta};
use cellpos::experiment::ExperimentConfig;
use cellpos::hashes::sha256_hex_file;
use cellpos::nn::{ArchConfig, Checkpoint, ModelConfig, Optimizer};
use cellpos::pipeline::{self, read_ids_csv};
use cellpos::rng;
use cellpos::sector::{self, SectorPolicy};
use cellpos::semi::{self, SemiContext};
use cellpos::trainer::{self, InputCache, TrainConfig};
use cellpos::transform::{preprocess_dataset, NormMode};

#[derive(Parser)]
#[command(name = "cellpos", version, about = "Sectorized-CSI fingerprint positioning toolkit")]
struct Cli {
    /// Rayon worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print per-stage progress to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Unitary,
    None,
}

impl From<NormArg> for NormMode {
    fn from(n: NormArg) -> NormMode {
        match n {
            NormArg::Unitary => NormMode::Unitary,
            NormArg::None => NormMode::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CombinerArg {
    Mean,
    Weighted,
    Median,
}

impl From<CombinerArg> for Combiner {
    fn from(c: CombinerArg) -> Combiner {
        match c {
            CombinerArg::Mean => Combiner::UniformMean,
            CombinerArg::Weighted => Combiner::InverseErrorWeighted,
            CombinerArg::Median => Combiner::CoordinateMedian,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic sectorized dataset (plus ground-truth sidecar).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Ground-truth CSV path (default: <out>.truth.csv).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Transform a raw dataset into angle-delay magnitude tensors.
    Preprocess {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "unitary")]
        norm: NormArg,
    },
    /// Supervised training on the labeled samples of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML model config; omitted means the default backbone.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Semi-supervised consistency pipeline (stages 1-3, iterated).
    Semi {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Overrides semi.max_rounds.
        #[arg(long)]
        rounds: Option<usize>,
        /// Overrides semi.r (meters).
        #[arg(long)]
        r: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for per-round pseudo-label CSVs (default: out's parent).
        #[arg(long)]
        records_dir: Option<PathBuf>,
    },
    /// Train an ensemble pool.
    EnsembleTrain {
        /// TOML EnsembleSpec; omitted means the default 5-member pool.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a trained pool with a chosen combiner.
    EnsembleEval {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, value_enum)]
        combiner: CombinerArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        ids: Option<PathBuf>,
    },
    /// Train the shared-backbone / three-heads model with sector rotation.
    TrainDecoupled {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint against ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long)]
        cdf: Option<PathBuf>,
        /// CSV of sample ids to evaluate (default: all with truth).
        #[arg(long)]
        ids: Option<PathBuf>,
    },
    /// Full pipeline: generate, preprocess, train method, evaluate, manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Run base directory (default: $CELLPOS_RUN_DIR or ./runs).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Validate a config file and print all diagnostics.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("setting up thread pool")?;
    }
    let verbose = cli.verbose;
    let progress = |msg: &str| {
        if verbose {
            eprintln!("[cellpos] {msg}");
        }
    };

    match cli.cmd {
        Cmd::GenData { config, out, seed, truth } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.scene.seed = s;
            }
            cfg.ensure_valid()?;
            let scene = cfg.scene.clone();
            progress(&format!("generating {} receivers", scene.total_receivers()));
            let meta = ContainerMeta {
                payload: PayloadKind::CsiComplex,
                norm: None,
                scene: scene.clone(),
            };
            let dims = [scene.n_ue_ant, scene.n_bs_ports(), scene.n_freq_bins];
            let mut writer =
                ContainerWriter::create(&out, &meta, scene.total_receivers() as u64, dims)?;
            let mut truth_records = Vec::new();
            channel::generate_streaming(&scene, 512, |sample, rec| {
                writer.write_complex(&sample)?;
                truth_records.push(rec);
                Ok(())
            })?;
            writer.finish()?;
            let truth_path = truth.unwrap_or_else(|| out.with_extension("cplb.truth.csv"));
            TruthTable { records: truth_records }.write_csv(&truth_path)?;
            println!("dataset: {}", out.display());
            println!("truth:   {}", truth_path.display());
            println!("sha256:  {}", sha256_hex_file(&out)?);
        }

        Cmd::Preprocess { input, out, norm } => {
            let ds = Dataset::load(&input)?;
            progress(&format!("transforming {} samples", ds.samples.len()));
            let set = preprocess_dataset(&ds, norm.into())?;
            set.save(&out)?;
            println!("preprocessed: {}", out.display());
            println!("sha256:       {}", sha256_hex_file(&out)?);
        }

        Cmd::Train { data, model_config, out, epochs, lr, seed } => {
            let (cache, labeled, scene) = load_training_inputs(&data)?;
            let scaler = trainer::scaler_for_scene(&scene);
            let model_cfg = match model_config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)?;
                    toml::from_str::<ModelConfig>(&text)
                        .map_err(|e| Error::config(format!("model config rejected: {e}")))?
                }
                None => cellpos::nn::default_backbone(
                    cache.dims,
                    rng::derive_seed(seed, "model-init", &[]),
                ),
            };
            let mut tc = TrainConfig {
                epochs,
                seed: rng::derive_seed(seed, "train", &[]),
                ..TrainConfig::default()
            };
            tc.optim = tc.optim.with_lr(lr);
            if !cache.supports_augmentation() {
                tc.augment_sigma = 0.0;
                progress("magnitude input: augmentation disabled");
            }
            progress(&format!("training on {} labeled samples", labeled.len()));
            let (model, opt, report) = trainer::fit(&model_cfg, &cache, &labeled, &tc, scaler)?;
            let hash = sha256_hex_file(&data)?;
            Checkpoint::from_sequential(&model, "supervised", &hash, scaler, Some(&opt))
                .save(&out)?;
            println!("checkpoint: {}", out.display());
            println!("final loss: {:.6}", report.last_loss());
        }

        Cmd::Semi { data, config, rounds, r, out, seed, records_dir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(n) = rounds {
                cfg.semi.max_rounds = n;
            }
            if let Some(radius) = r {
                cfg.semi.r = radius;
            }
            if let Some(s) = seed {
                cfg.scene.seed = s;
            }
            let semi_cfg = cfg.semi;
            semi_cfg.ensure_valid()?;
            let ds = Dataset::load(&data)?;
            let hash = sha256_hex_file(&data)?;
            progress("preprocessing");
            let cache = InputCache::from_dataset(&ds, NormMode::Unitary)?;
            let scaler = trainer::scaler_for_scene(&ds.config);
            let model_cfg = resolve_model_for(&cfg, &cache);
            let train_cfg = TrainConfig {
                seed: rng::derive_seed(cfg.scene.seed, "train", &[]),
                ..cfg.train
            };
            let ctx = SemiContext::new(&ds, &cache, model_cfg, train_cfg, scaler, &[], hash)?;
            progress("running stages");
            let outcome = semi::iterate(&ctx, &semi_cfg)?;
            outcome.final_checkpoint().save(&out)?;
            let rec_dir = records_dir
                .or_else(|| out.parent().map(Path::to_path_buf))
                .unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&rec_dir)?;
            for round in &outcome.rounds {
                let p = rec_dir.join(format!("records-round-{}.csv", round.round));
                semi::write_records_csv(&p, &round.records)?;
                println!(
                    "round {}: accepted {} new (total {}), stage-3 train size {}",
                    round.round, round.accepted_new, round.accepted_total, round.stage3_train_size
                );
            }
            println!("checkpoint: {}", out.display());
        }

        Cmd::EnsembleTrain { spec, data, out_dir, seed } => {
            let ds = Dataset::load(&data)?;
            let hash = sha256_hex_file(&data)?;
            let cache = InputCache::from_dataset(&ds, NormMode::Unitary)?;
            let scaler = trainer::scaler_for_scene(&ds.config);
            let spec: EnsembleSpec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)?;
                    toml::from_str(&text)
                        .map_err(|e| Error::config(format!("ensemble spec rejected: {e}")))?
                }
                None => ensemble::default_pool_spec(
                    cache.dims,
                    &TrainConfig {
                        seed: rng::derive_seed(seed, "ensemble", &[]),
                        ..TrainConfig::default()
                    },
                    Combiner::UniformMean,
                ),
            };
            progress(&format!("training {} members", spec.members.len()));
            let pool = ensemble::train_pool(&spec, &ds, &cache, scaler, &[], &hash)?;
            std::fs::create_dir_all(&out_dir)?;
            let weights = pool.inverse_error_weights();
            for (k, m) in pool.members.iter().enumerate() {
                let p = out_dir.join(format!("member-{k}-{}.cpnn", m.name));
                m.checkpoint.save(&p)?;
            }
            use std::io::Write;
            let mut f =
                std::io::BufWriter::new(std::fs::File::create(out_dir.join("pool.csv"))?);
            writeln!(f, "member,val_mse,val_mean_error,weight")?;
            for (m, w) in pool.members.iter().zip(&weights) {
                writeln!(f, "{},{:.6},{:.6},{:.8}", m.name, m.val_mse, m.val_mean_error, w)?;
            }
            println!("pool written to {}", out_dir.display());
        }

        Cmd::EnsembleEval { pool, combiner, data, truth, report, ids } => {
            let ds = Dataset::load(&data)?;
            let cache = InputCache::from_dataset(&ds, NormMode::Unitary)?;
            let scaler = trainer::scaler_for_scene(&ds.config);
            let loaded = load_pool(&pool)?;
            let truth_table = TruthTable::read_csv(&truth)?;
            let indices = indices_for_eval(&ds, &truth_table, ids.as_deref())?;
            let preds =
                ensemble::predict_combined(&loaded, &cache, &indices, scaler, combiner.into())?;
            let rep = report_against_truth(&ds, &truth_table, &indices, &preds)?;
            rep.write_report_csv(&report)?;
            println!("combined mean error: {:.3} m over {} samples", rep.mean_error_m, rep.n);
        }

        Cmd::TrainDecoupled { data, out, epochs, seed } => {
            let ds = Dataset::load(&data)?;
            let hash = sha256_hex_file(&data)?;
            let cache = InputCache::from_dataset(&ds, NormMode::Unitary)?;
            let scaler = trainer::scaler_for_scene(&ds.config);
            let items = sector::routed_items(&ds, &ds.labeled_indices())?;
            let dcfg = sector::default_decoupled(
                cache.dims,
                rng::derive_seed(seed, "decoupled-init", &[]),
            );
            let mut model = sector::DecoupledHeadModel::new(dcfg, scaler)?;
            let tc = TrainConfig {
                epochs,
                seed: rng::derive_seed(seed, "train", &[]),
                ..TrainConfig::default()
            };
            progress(&format!("coupled training over {} routed items", items.len()));
            let mut opt = Optimizer::new(tc.optim);
            let rep = sector::train_decoupled(&mut model, &mut opt, &cache, &items, &tc)?;
            sector::record_sector_power(&mut model, &ds);
            model.to_checkpoint("decoupled", &hash, Some(&opt)).save(&out)?;
            println!("checkpoint: {}", out.display());
            println!("final loss: {:.6}", rep.last_loss());
        }

        Cmd::Eval { data, ckpt, truth, report, summary, cdf, ids } => {
            let ds = Dataset::load(&data)?;
            let cache = InputCache::from_dataset(&ds, NormMode::Unitary)?;
            let truth_table = TruthTable::read_csv(&truth)?;
            let indices = indices_for_eval(&ds, &truth_table, ids.as_deref())?;
            let checkpoint = Checkpoint::load(&ckpt)?;
            let scaler = checkpoint.meta.scaler;
            let preds = match &checkpoint.meta.arch {
                ArchConfig::Sequential(_) => {
                    let mut model = checkpoint.to_sequential()?;
                    trainer::predict(&mut model, &cache, &indices, scaler)?
                }
                ArchConfig::Decoupled(_) => {
                    let mut model = sector::DecoupledHeadModel::from_checkpoint(&checkpoint)?;
                    indices
                        .iter()
                        .map(|&i| {
                            model.route_and_predict(
                                &cache.clean[i],
                                Some(ds.samples[i].sector),
                                None,
                                SectorPolicy::KnownTag,
                            )
                        })
                        .collect::<Result<Vec<_>, _>>()?
                }
            };
            let rep = report_against_truth(&ds, &truth_table, &indices, &preds)?;
            rep.write_report_csv(&report)?;
            if let Some(p) = summary {
                rep.write_summary_csv(&p)?;
            }
            if let Some(p) = cdf {
                rep.write_cdf_csv(&p)?;
            }
            println!(
                "n={} mean={:.3} p90={:.3} p80={:.3} p67={:.3} p50={:.3}",
                rep.n,
                rep.mean_error_m,
                rep.percentiles.p90,
                rep.percentiles.p80,
                rep.percentiles.p67,
                rep.percentiles.p50
            );
        }

        Cmd::Run { config, seed, out_dir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.scene.seed = s;
            }
            let base = pipeline::resolve_base_dir(out_dir.as_deref());
            progress(&format!("method: {}", cfg.pipeline.method));
            let out = pipeline::run_pipeline(&cfg, &base)?;
            println!("run dir:  {}", out.run_dir.display());
            println!("manifest: {}", out.manifest_path.display());
            println!(
                "mean={:.3} p90={:.3} p50={:.3} ({} test samples, {:.1}s)",
                out.report.mean_error_m,
                out.report.percentiles.p90,
                out.report.percentiles.p50,
                out.report.n,
                out.manifest.elapsed_s
            );
        }

        Cmd::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let diags = cfg.diagnostics();
            if diags.is_empty() {
                println!("ok");
            } else {
                for d in &diags {
                    eprintln!("diagnostic: {d}");
                }
                bail!("{} diagnostic(s)", diags.len());
            }
        }
    }
    Ok(())
}

fn resolve_model_for(cfg: &ExperimentConfig, cache: &InputCache) -> ModelConfig {
    match &cfg.model {
        Some(m) => m.clone(),
        None => cellpos::nn::default_backbone(
            cache.dims,
            rng::derive_seed(cfg.scene.seed, "model-init", &[]),
        ),
    }
}

/// Load either a raw dataset or a preprocessed magnitude file for training.
fn load_training_inputs(
    path: &Path,
) -> anyhow::Result<(InputCache, Vec<trainer::TrainItem>, cellpos::scene::SceneConfig)> {
    match cellpos::dataset::read_container(path)? {
        Container::Dataset(ds) => {
            let cache = InputCache::from_dataset(&ds, NormMode::Unitary)?;
            let items = trainer::labeled_items(&ds, &ds.labeled_indices());
            Ok((cache, items, ds.config))
        }
        Container::Magnitudes(set) => {
            let cache = InputCache::from_magnitudes(&set)?;
            let items: Vec<trainer::TrainItem> = set
                .samples
                .iter()
                .enumerate()
                .filter_map(|(i, s)| s.position.map(|p| trainer::TrainItem::new(i, p)))
                .collect();
            Ok((cache, items, set.meta.scene))
        }
    }
}

fn load_pool(dir: &Path) -> anyhow::Result<ensemble::Pool> {
    let mut named: Vec<(String, PathBuf)> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "cpnn"))
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    named.sort();
    if named.is_empty() {
        bail!("no .cpnn members found in {}", dir.display());
    }
    let stats_path = dir.join("pool.csv");
    let text = std::fs::read_to_string(&stats_path)
        .with_context(|| format!("pool stats at {}", stats_path.display()))?;
    let mut mse_of = std::collections::BTreeMap::new();
    for line in text.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() >= 2 {
            mse_of.insert(parts[0].to_string(), parts[1].parse::<f64>().unwrap_or(f64::NAN));
        }
    }
    let members = named
        .into_iter()
        .map(|(_, path)| -> anyhow::Result<ensemble::TrainedMember> {
            let checkpoint = Checkpoint::load(&path)?;
            let name = checkpoint
                .meta
                .stage_tag
                .strip_prefix("ensemble/")
                .unwrap_or(&checkpoint.meta.stage_tag)
                .to_string();
            let val_mse = mse_of.get(&name).copied().unwrap_or(f64::NAN);
            if !val_mse.is_finite() {
                bail!("member '{name}' missing from pool.csv");
            }
            Ok(ensemble::TrainedMember {
                name,
                checkpoint,
                val_mse,
                val_mean_error: val_mse.sqrt(),
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(ensemble::Pool { members })
}

fn indices_for_eval(
    ds: &Dataset,
    truth: &TruthTable,
    ids: Option<&Path>,
) -> anyhow::Result<Vec<usize>> {
    let index_of: std::collections::BTreeMap<u64, usize> =
        ds.samples.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    let wanted: Vec<u64> = match ids {
        Some(p) => read_ids_csv(p)?,
        None => truth.records.iter().map(|r| r.id).collect(),
    };
    let mut out = Vec::with_capacity(wanted.len());
    for id in wanted {
        let &i = index_of
            .get(&id)
            .with_context(|| format!("sample id {id} not present in dataset"))?;
        if truth.get(id).is_none() {
            bail!("sample id {id} has no ground truth");
        }
        out.push(i);
    }
    Ok(out)
}

fn report_against_truth(
    ds: &Dataset,
    truth: &TruthTable,
    indices: &[usize],
    preds: &[[f64; 2]],
) -> anyhow::Result<cellpos::eval::EvalReport> {
    let (truths, meta): (Vec<[f64; 2]>, Vec<SampleMeta>) = indices
        .iter()
        .map(|&i| {
            let s = &ds.samples[i];
            let t = truth.get(s.id).expect("validated above");
            (t.position, SampleMeta { id: s.id, sector: s.sector, is_los: s.is_los })
        })
        .unzip();
    Ok(build_report(preds, &truths, &meta)?)
}
