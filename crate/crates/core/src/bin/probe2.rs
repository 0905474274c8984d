// temporary: fully-labeled learnability ceiling across channel settings
use std::time::Instant;

use cellpos::channel::generate_with_truth;
use cellpos::experiment::ExperimentConfig;
use cellpos::pipeline::test_split;
use cellpos::rng;
use cellpos::trainer::{self, InputCache, TrainConfig};
use cellpos::transform::NormMode;

fn main() -> anyhow::Result<()> {
    let base = ExperimentConfig::load(std::path::Path::new("configs/desk.toml"))?;
    if std::env::var("CURVE").is_ok() {
        return learning_curve(&base);
    }

    let variants: Vec<(&str, Box<dyn Fn(&mut ExperimentConfig)>)> = vec![
        ("A: baseline comb8 8ports", Box::new(|_c: &mut ExperimentConfig| {})),
        (
            "B: comb16 sc32 ta.05 snr25",
            Box::new(|c: &mut ExperimentConfig| {
                c.scene.comb_stride = 16;
                c.scene.n_scatterers = 32;
                c.scene.ta_max_s = 0.05e-6;
                c.scene.snr_db = 25.0;
            }),
        ),
        (
            "C: comb16 16ports sc32 ta.05 snr25",
            Box::new(|c: &mut ExperimentConfig| {
                c.scene.comb_stride = 16;
                c.scene.bs_array_rows = 4;
                c.scene.bs_array_cols = 4;
                c.scene.n_scatterers = 32;
                c.scene.ta_max_s = 0.05e-6;
                c.scene.snr_db = 25.0;
                if let Some(m) = &mut c.model {
                    m.input_dims = [2, 16, 64];
                }
            }),
        ),
        (
            "D: comb24 16ports sc32 ta0 snr25",
            Box::new(|c: &mut ExperimentConfig| {
                c.scene.comb_stride = 24;
                c.scene.bs_array_rows = 4;
                c.scene.bs_array_cols = 4;
                c.scene.n_scatterers = 32;
                c.scene.ta_max_s = 0.0;
                c.scene.snr_db = 25.0;
                if let Some(m) = &mut c.model {
                    m.input_dims = [2, 16, 64];
                }
            }),
        ),
    ];

    for (name, tweak) in variants {
        let mut cfg = base.clone();
        tweak(&mut cfg);
        cfg.scene.labeled_fraction = 1.0;
        cfg.scene.seed = 1;
        let t0 = Instant::now();
        let (ds, truth) = generate_with_truth(&cfg.scene)?;
        let cache = InputCache::from_dataset(&ds, NormMode::Unitary)?;
        let scaler = trainer::scaler_for_scene(&ds.config);
        let test_idx = test_split_labeled(&ds, 0.15, 1);
        let train_idx: Vec<usize> = (0..ds.samples.len())
            .filter(|i| !test_idx.contains(i))
            .collect();
        let items = trainer::labeled_items(&ds, &train_idx);
        let tc = TrainConfig {
            epochs: 40,
            seed: rng::derive_seed(1, "train", &[]),
            ..cfg.train
        };
        let model_cfg = cfg.resolved_model();
        let (mut model, _, rep) = trainer::fit(&model_cfg, &cache, &items, &tc, scaler)?;
        let preds = trainer::predict(&mut model, &cache, &test_idx, scaler)?;
        let err = trainer::mean_error(&preds, &test_idx, |i| {
            truth.get(ds.samples[i].id as u64).unwrap().position
        });
        let train_preds = trainer::predict(&mut model, &cache, &train_idx[..400.min(train_idx.len())].to_vec(), scaler)?;
        let train_err = trainer::mean_error(&train_preds, &train_idx[..400.min(train_idx.len())], |i| {
            truth.get(ds.samples[i].id as u64).unwrap().position
        });
        println!(
            "{name}: test {err:.2} m, train {train_err:.2} m, loss {:.4}->{:.4}, {:.0}s",
            rep.first_loss(),
            rep.last_loss(),
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

// fully labeled scene: hold out a seeded fraction as test
fn test_split_labeled(ds: &cellpos::dataset::Dataset, fraction: f64, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut pool: Vec<usize> = (0..ds.samples.len()).collect();
    let mut r = cellpos::rng::stream(seed, "ceiling-test", &[]);
    pool.shuffle(&mut r);
    let want = (ds.samples.len() as f64 * fraction).round() as usize;
    let mut take: Vec<usize> = pool.into_iter().take(want).collect();
    take.sort_unstable();
    take
}


// learning curve: test error vs number of true training labels
fn learning_curve(base: &ExperimentConfig) -> anyhow::Result<()> {
    use rand::seq::SliceRandom;
    let mut cfg = base.clone();
    cfg.scene.labeled_fraction = 1.0;
    cfg.scene.seed = 1;
    let (ds, truth) = generate_with_truth(&cfg.scene)?;
    let cache = InputCache::from_dataset(&ds, NormMode::Unitary)?;
    let scaler = trainer::scaler_for_scene(&ds.config);
    let test_idx = test_split_labeled(&ds, 0.15, 1);
    let mut pool: Vec<usize> = (0..ds.samples.len()).filter(|i| !test_idx.contains(i)).collect();
    let mut r = cellpos::rng::stream(7, "curve", &[]);
    pool.shuffle(&mut r);
    for &n in &[300usize, 600, 1200, 2400] {
        let train_idx: Vec<usize> = pool.iter().take(n).copied().collect();
        let items = trainer::labeled_items(&ds, &train_idx);
        let tc = TrainConfig {
            epochs: std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(40),
            seed: rng::derive_seed(1, "train", &[]),
            ..cfg.train
        };
        let (mut model, _, _) = trainer::fit(&cfg.resolved_model(), &cache, &items, &tc, scaler)?;
        let preds = trainer::predict(&mut model, &cache, &test_idx, scaler)?;
        let err = trainer::mean_error(&preds, &test_idx, |i| {
            truth.get(ds.samples[i].id as u64).unwrap().position
        });
        println!("n={n}: test err {err:.2} m");
    }
    Ok(())
}
