// temporary tuning probe; removed before ship
use std::time::Instant;

use cellpos::channel::generate_with_truth;
use cellpos::experiment::ExperimentConfig;
use cellpos::pipeline::test_split;
use cellpos::rng;
use cellpos::semi::{self, SemiContext};
use cellpos::trainer::{self, InputCache, TrainConfig};
use cellpos::transform::NormMode;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let config_path = args.get(1).map(String::as_str).unwrap_or("configs/desk.toml");
    let mut cfg = ExperimentConfig::load(std::path::Path::new(config_path))?;
    let envf = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let envu = |k: &str, d: usize| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    cfg.semi.r = envf("SEMI_R", cfg.semi.r);
    cfg.semi.finetune_lr_scale = envf("FT_SCALE", cfg.semi.finetune_lr_scale);
    cfg.semi.finetune_epochs = envu("FT_EPOCHS", cfg.semi.finetune_epochs);
    cfg.semi.stage3_epochs = envu("S3_EPOCHS", cfg.semi.stage3_epochs);
    cfg.train.epochs = envu("STAGE1_EPOCHS", cfg.train.epochs);
    cfg.train.augment_sigma = envf("AUG", cfg.train.augment_sigma);
    cfg.scene.ta_max_s = envf("TA", cfg.scene.ta_max_s);
    cfg.scene.snr_db = envf("SNR", cfg.scene.snr_db);
    cfg.semi.pseudo_weight = envf("PW", cfg.semi.pseudo_weight);
    eprintln!("r={} ft_scale={} ft_epochs={} s3_epochs={} stage1_epochs={}",
        cfg.semi.r, cfg.semi.finetune_lr_scale, cfg.semi.finetune_epochs, cfg.semi.stage3_epochs, cfg.train.epochs);
    let t_all = Instant::now();

    let seeds: Vec<u64> = std::env::var("SEEDS").unwrap_or("1,2,3".into())
        .split(',').map(|s| s.parse().unwrap()).collect();
    for seed in seeds {
        let t0 = Instant::now();
        let mut cfg = cfg.clone();
        cfg.scene.seed = seed;
        let (ds, truth) = generate_with_truth(&cfg.scene)?;
        let cache = InputCache::from_dataset(&ds, NormMode::Unitary)?;
        let scaler = trainer::scaler_for_scene(&ds.config);
        let test_idx = test_split(&ds, cfg.evaluation.test_fraction, seed);
        let model_cfg = cfg.resolved_model();
        let train_cfg = TrainConfig { seed: rng::derive_seed(seed, "train", &[]), ..cfg.train };
        let ctx = SemiContext::new(&ds, &cache, model_cfg, train_cfg, scaler, &test_idx, String::new())?;
        let gen_s = t0.elapsed().as_secs_f64();

        let eval_ckpt = |ck: &cellpos::nn::Checkpoint| -> anyhow::Result<f64> {
            let mut m = ck.to_sequential()?;
            let preds = trainer::predict(&mut m, &cache, &test_idx, scaler)?;
            Ok(trainer::mean_error(&preds, &test_idx, |i| {
                truth.get(ds.samples[i].id as u64).unwrap().position
            }))
        };

        let t1 = Instant::now();
        let outcome = semi::iterate(&ctx, &cfg.semi)?;
        let semi_s = t1.elapsed().as_secs_f64();

        let e1 = eval_ckpt(&outcome.stage1)?;
        let mut round_errs = Vec::new();
        for ck in &outcome.round_checkpoints {
            round_errs.push(eval_ckpt(ck)?);
        }
        let t2 = Instant::now();
        let (fix_ck, fix_accepted) = semi::fixmatch_distance_baseline(&ctx, &outcome.stage1, &cfg.semi)?;
        let fix_s = t2.elapsed().as_secs_f64();
        let ef = eval_ckpt(&fix_ck)?;

        // filter discrimination analysis on round 1
        if let Some(r1) = outcome.rounds.first() {
            let mut gen_model = outcome.stage1.to_sequential()?;
            let gen_preds = trainer::predict(&mut gen_model, &cache, &ctx.unlabeled, scaler)?;
            let truth_of = |id: u64| truth.get(id).unwrap().position;
            let mut acc_label_err = 0.0;
            let mut acc_gen_err = 0.0;
            let mut rej_gen_err = 0.0;
            let (mut n_acc, mut n_rej) = (0usize, 0usize);
            for (rec, (gp, &idx)) in r1.records.iter().zip(gen_preds.iter().zip(&ctx.unlabeled)) {
                let t = truth_of(ds.samples[idx].id);
                let ge = f64::hypot(gp[0] - t[0], gp[1] - t[1]);
                if let Some(l) = rec.label {
                    acc_label_err += f64::hypot(l[0] - t[0], l[1] - t[1]);
                    acc_gen_err += ge;
                    n_acc += 1;
                } else {
                    rej_gen_err += ge;
                    n_rej += 1;
                }
            }
            println!(
                "   [filter] accepted {}: label err {:.2}, gen err {:.2} | rejected {}: gen err {:.2}",
                n_acc,
                acc_label_err / n_acc.max(1) as f64,
                acc_gen_err / n_acc.max(1) as f64,
                n_rej,
                rej_gen_err / n_rej.max(1) as f64
            );
        }
        // oracle bound: stage 3 with ground-truth labels on the accepted set
        if std::env::var("ORACLE").is_ok() {
            if let Some(r1) = outcome.rounds.first() {
                let oracle_records: Vec<cellpos::semi::PseudoLabelRecord> = r1
                    .records
                    .iter()
                    .filter(|r| r.accepted)
                    .map(|r| {
                        let mut o = *r;
                        o.label = Some(truth.get(r.sample_id).unwrap().position);
                        o
                    })
                    .collect();
                let (ck, _, _) = cellpos::semi::stage3_finetune(&ctx, &outcome.stage1, oracle_records.iter(), &cfg.semi, 1)?;
                println!("   [oracle] stage3 with true labels on accepted: err {:.3} m", eval_ckpt(&ck)?);
            }
        }
        let los_frac = ds.samples.iter().filter(|s| s.is_los).count() as f64 / ds.samples.len() as f64;
        println!("== seed {seed} (gen {gen_s:.1}s, semi {semi_s:.1}s, fixmatch {fix_s:.1}s, los {los_frac:.2})");
        println!("   stage1 err {e1:.3} m");
        for (log, err) in outcome.rounds.iter().zip(&round_errs) {
            println!(
                "   round {}: err {:.3} m, accepted new {} total {} (pool {})",
                log.round, err, log.accepted_new, log.accepted_total, ctx.unlabeled.len()
            );
        }
        println!("   fixmatch err {ef:.3} m (accepted {fix_accepted})");
        if let Some(r1) = round_errs.first() {
            println!("   gain vs stage1: {:.1}%  (need >= 10%)", (1.0 - r1 / e1) * 100.0);
        }
        if round_errs.len() >= 2 {
            println!("   round2/round1: {:.3}  (need <= 1.05)", round_errs[1] / round_errs[0]);
        }
        if let Some(r1) = round_errs.first() {
            println!("   ours{:.3} <= fixmatch {ef:.3}: {}", r1, r1 <= &ef);
        }
    }
    println!("total {:.1}s", t_all.elapsed().as_secs_f64());
    Ok(())
}
