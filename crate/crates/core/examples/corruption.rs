//! Clean versus darkened and blurred evaluation, with the low-illumination subset.
//!
//! `cargo run --example corruption`

use gazekit::config::RunConfig;
use gazekit::data::{synth_generate, Dataset, SynthConfig};
use gazekit::evaluation::{corruption_eval, Corruption, ModelPredictor};
use gazekit::pmn::LabelScale;
use gazekit::training::{finetune, random_split, select};

fn main() -> gazekit::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.data.synthetic_samples = 400;
    cfg.data.dark_fraction = 0.15;
    cfg.finetune.epochs = 6;
    cfg.ablation.use_ssl_init = false;
    let data = Dataset::from_config(&synth_generate(&SynthConfig::from_run(&cfg), cfg.seed)?, &cfg);
    let m = random_split(&data, &cfg)?;
    let (model, _) = finetune(&cfg, &select(&data.samples, &m.train), &select(&data.samples, &m.val), None)?;
    let test = select(&data.samples, &m.test);
    let p = ModelPredictor { bundle: &model, scale: LabelScale::from_config(&cfg), batch: 64 };
    for c in [Corruption::Darken { gamma: 2.5 }, Corruption::Blur { sigma: 1.5 }] {
        let r = corruption_eval(&p, &test, c, Some(cfg.data.low_light_threshold), &cfg.hash())?;
        let low = r.low_light.as_ref().map_or("none".into(), |l| format!("{:.3}° over {}", l.mean_error_deg, l.count));
        println!("{c:?}: clean {:.3}°  corrupted {:.3}°  low-light {low}", r.clean.mean_error_deg, r.corrupted.mean_error_deg);
    }
    Ok(())
}
