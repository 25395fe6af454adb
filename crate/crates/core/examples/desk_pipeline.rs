//! Synthetic data → pretraining → fine-tuning → held-out evaluation at desk scale.
//!
//! `cargo run --example desk_pipeline -- [samples]`

use std::time::Instant;

use gazekit::config::RunConfig;
use gazekit::data::{synth_generate, Dataset, SynthConfig};
use gazekit::evaluation::{evaluate, ModelPredictor, DEFAULT_RANGES};
use gazekit::pmn::{LabelScale, ModelBundle};
use gazekit::training::{finetune, pretrain, random_split, select, TRAIN_DTYPE};

fn main() -> gazekit::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = RunConfig::desk();
    if let Some(n) = std::env::args().nth(1) {
        cfg.data.synthetic_samples = n.parse().expect("sample count");
    }
    let t0 = Instant::now();
    let manifest = synth_generate(&SynthConfig::from_run(&cfg), cfg.seed)?;
    let data = Dataset::from_config(&manifest, &cfg);
    let split = random_split(&data, &cfg)?;
    let (train, val, test) = (
        select(&data.samples, &split.train),
        select(&data.samples, &split.val),
        select(&data.samples, &split.test),
    );
    println!("data: {} train / {} val / {} test ({:.1?})", train.len(), val.len(), test.len(), t0.elapsed());

    let scale = LabelScale::from_config(&cfg);
    let untrained = ModelBundle::new(&cfg, 99, TRAIN_DTYPE)?;
    let before = evaluate(&ModelPredictor { bundle: &untrained, scale, batch: 64 }, &test, &DEFAULT_RANGES, "")?;

    let t1 = Instant::now();
    let (encoder, pre) = pretrain(&cfg, &train)?;
    println!("pretrain {:.1?}: {:?}", t1.elapsed(), pre.epochs.iter().map(|e| e.mean_loss).collect::<Vec<_>>());

    let t2 = Instant::now();
    let (model, ft) = finetune(&cfg, &train, &val, Some(&encoder))?;
    println!("finetune {:.1?}: best epoch {:?}", t2.elapsed(), ft.best_epoch);

    let after = evaluate(&ModelPredictor { bundle: &model, scale, batch: 64 }, &test, &DEFAULT_RANGES, &cfg.hash())?;
    println!("untrained {:.2}°  trained {:.2}°", before.mean_error_deg, after.mean_error_deg);
    print!("{}", after.render_table());
    Ok(())
}
