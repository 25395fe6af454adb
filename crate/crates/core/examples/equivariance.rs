//! Briefly trains a model, sweeps rotations of the test images and draws the error curve.
//!
//! `cargo run --example equivariance -- [out_dir]`

use gazekit::config::RunConfig;
use gazekit::data::{synth_generate, Dataset, SynthConfig};
use gazekit::evaluation::{equivariance_sweep, LabelOracle, ModelPredictor, DEFAULT_THETAS};
use gazekit::plot::equivariance_chart;
use gazekit::pmn::LabelScale;
use gazekit::training::{finetune, random_split, select};

fn main() -> gazekit::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "equivariance".into()));
    std::fs::create_dir_all(&out).map_err(|e| gazekit::Error::io(&out, e))?;
    let mut cfg = RunConfig::desk();
    cfg.data.synthetic_samples = 400;
    cfg.finetune.epochs = 6;
    cfg.ablation.use_ssl_init = false;
    let manifest = synth_generate(&SynthConfig::from_run(&cfg), cfg.seed)?;
    let data = Dataset::from_config(&manifest, &cfg);
    let m = random_split(&data, &cfg)?;
    let (model, _) = finetune(&cfg, &select(&data.samples, &m.train), &select(&data.samples, &m.val), None)?;
    let records: Vec<usize> = m.test.iter().map(|&i| data.record_index[i]).collect();
    let (face, margin) = (cfg.architecture.face_size, cfg.data.eye_margin);

    let p = ModelPredictor { bundle: &model, scale: LabelScale::from_config(&cfg), batch: 64 };
    let curve = equivariance_sweep(&p, &manifest, &records, &DEFAULT_THETAS, face, margin, &cfg.hash())?;
    let oracle = equivariance_sweep(&LabelOracle, &manifest, &records, &DEFAULT_THETAS, face, margin, "")?;
    println!("theta  model   oracle  excluded");
    for (a, b) in curve.points.iter().zip(&oracle.points) {
        let f = |e: Option<f64>| e.map_or("n/a".into(), |e| format!("{e:.3}"));
        println!("{:>5.0}  {:>6}  {:>6}  {}", a.theta_deg, f(a.mean_error_deg), f(b.mean_error_deg), a.excluded);
    }
    equivariance_chart(&curve, 360, 240)?.save_png(&out.join("curve.png"))?;
    Ok(())
}
