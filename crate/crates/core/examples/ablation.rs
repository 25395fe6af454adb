//! A reduced ablation: three variants, one seed, small data.
//!
//! `cargo run --example ablation`

use gazekit::config::RunConfig;
use gazekit::data::{synth_generate, Dataset, SynthConfig};
use gazekit::evaluation::ablation_report;
use gazekit::training::{run_ablation, standard_variants};

fn main() -> gazekit::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.data.synthetic_samples = 300;
    cfg.pretrain.epochs = 2;
    cfg.finetune.epochs = 5;
    let data = Dataset::from_config(&synth_generate(&SynthConfig::from_run(&cfg), cfg.seed)?, &cfg);
    let variants: Vec<_> = standard_variants()
        .into_iter()
        .filter(|v| ["full", "w/o-PMN", "w/o-inv-EV"].contains(&v.name.as_str()))
        .collect();
    let runs = run_ablation(&cfg, &data, &variants, &[0], |r| println!("{:<12} {:.3}°", r.variant, r.test.mean_error_deg))?;
    let others: Vec<_> = runs[1..].iter().map(|r| (r.variant.as_str(), &r.test)).collect();
    print!("{}", ablation_report((&runs[0].variant, &runs[0].test), &others)?.render());
    Ok(())
}
