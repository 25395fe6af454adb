//! Leave-one-subject-out fine-tuning over four synthetic subjects.
//!
//! `cargo run --example loso`

use gazekit::config::RunConfig;
use gazekit::data::{synth_generate, Dataset, SynthConfig};
use gazekit::training::run_loso;

fn main() -> gazekit::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.data.synthetic_samples = 240;
    cfg.data.synthetic_subjects = 4;
    cfg.finetune.epochs = 4;
    cfg.ablation.use_ssl_init = false;
    let data = Dataset::from_config(&synth_generate(&SynthConfig::from_run(&cfg), cfg.seed)?, &cfg);
    let r = run_loso(&cfg, &data, None)?;
    for f in &r.folds {
        println!("{:<8} {:?}", f.subject, f.test_error_deg);
    }
    println!("mean {:?}", r.mean_error_deg);
    Ok(())
}
