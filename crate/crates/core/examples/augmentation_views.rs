//! Writes a synthetic face next to eight augmented view pairs.
//!
//! `cargo run --example augmentation_views -- [out_dir]`

use gazekit::augment::{build_pipeline, generate_views};
use gazekit::config::RunConfig;
use gazekit::data::{synth_generate, SynthConfig};
use gazekit::training::pretrain_augmentation;

fn main() -> gazekit::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "views".into()));
    std::fs::create_dir_all(&out).map_err(|e| gazekit::Error::io(&out, e))?;
    let mut cfg = RunConfig::desk();
    cfg.data.synthetic_samples = 1;
    let face = &synth_generate(&SynthConfig::from_run(&cfg), 0)?.records[0].image;
    face.save_png(&out.join("source.png"))?;
    let pipeline = build_pipeline(&pretrain_augmentation(&cfg))?;
    for seed in 0..8 {
        let pair = generate_views(face, &pipeline, seed)?;
        pair.v.save_png(&out.join(format!("view-{seed}-a.png")))?;
        pair.v_prime.save_png(&out.join(format!("view-{seed}-b.png")))?;
    }
    println!("wrote 17 images to {}", out.display());
    Ok(())
}
