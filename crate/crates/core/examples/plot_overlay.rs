//! Gaze-arrow overlays for an untrained and a briefly trained model.
//!
//! `cargo run --example plot_overlay -- [out_dir]`

use gazekit::config::RunConfig;
use gazekit::data::{synth_generate, Dataset, SynthConfig};
use gazekit::evaluation::{ModelPredictor, Predictor};
use gazekit::plot::plot_predictions;
use gazekit::pmn::{LabelScale, ModelBundle};
use gazekit::training::{finetune, random_split, select, TRAIN_DTYPE};

fn main() -> gazekit::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "overlays".into()));
    let mut cfg = RunConfig::desk();
    cfg.data.synthetic_samples = 300;
    cfg.finetune.epochs = 5;
    cfg.ablation.use_ssl_init = false;
    let data = Dataset::from_config(&synth_generate(&SynthConfig::from_run(&cfg), cfg.seed)?, &cfg);
    let m = random_split(&data, &cfg)?;
    let test = select(&data.samples, &m.test[..6.min(m.test.len())]);
    let scale = LabelScale::from_config(&cfg);
    let untrained = ModelBundle::new(&cfg, 1, TRAIN_DTYPE)?;
    let (trained, _) = finetune(&cfg, &select(&data.samples, &m.train), &select(&data.samples, &m.val), None)?;
    for (name, bundle) in [("untrained", &untrained), ("trained", &trained)] {
        let preds = ModelPredictor { bundle, scale, batch: 64 }.predict(&test)?;
        let paths = plot_predictions(&test, &preds, &out.join(name))?;
        println!("{name}: {} overlays in {}", paths.len(), out.join(name).display());
    }
    Ok(())
}
