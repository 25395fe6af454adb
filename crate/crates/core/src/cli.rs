//! Command-line front end. `main` parses, resolves the run config, dispatches
//! and maps errors to documented exit codes:
//!
//! | code | meaning                                   |
//! |------|-------------------------------------------|
//! | 0    | success                                   |
//! | 1    | internal error (tensor backend, image IO) |
//! | 2    | usage error (bad flags or arguments)      |
//! | 3    | invalid configuration                     |
//! | 4    | dataset problem (load or eye extraction)  |
//! | 5    | checkpoint problem                        |
//! | 6    | non-finite training loss                  |
//! | 7    | filesystem error                          |
//! | 8    | report error, contract or domain error    |
//!
//! Environment: `GAZEKIT_SEED` overrides the seed and `GAZEKIT_DETERMINISTIC`
//! (`1`/`true`/`0`/`false`) the determinism flag; explicit flags win over both.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{load_dataset, synth_generate, write_dataset, Dataset, DatasetManifest, SynthConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    ablation_report, corruption_eval, equivariance_sweep, evaluate, report_file_name, Corruption, EquivarianceCurve,
    ModelPredictor, Predictor, DEFAULT_RANGES, DEFAULT_THETAS,
};
use crate::plot::{equivariance_chart, plot_predictions};
use crate::pmn::LabelScale;
use crate::training::{
    finetune, load_model, median_errors, model_checkpoint, random_split, run_ablation, run_loso, select,
    standard_variants, write_json, PretrainSession,
};

#[derive(Debug, Parser)]
#[command(name = "gazekit", version, about = "Gaze estimation: self-supervised pretraining, fine-tuning and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run config; defaults to the chosen preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Preset used when no config file is given: toy, desk or large.
    #[arg(long, global = true, default_value = "desk")]
    pub preset: String,
    /// Dotted override, e.g. `--set finetune.lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Force the deterministic mode on.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic face dataset to disk.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Self-supervised pretraining; writes the encoder checkpoint.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a session checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Supervised fine-tuning; writes the model checkpoint.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Encoder checkpoint, required when ablation.use_ssl_init is set.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Leave-one-subject-out fine-tuning and evaluation.
    Loso {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Angular-error report on one split.
    Eval(ModelArgs),
    /// Rotation sweep over θ (degrees).
    Equivariance {
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long, value_delimiter = ',')]
        thetas: Option<Vec<f64>>,
    },
    /// Clean versus corrupted evaluation.
    CorruptEval {
        #[command(flatten)]
        m: ModelArgs,
        /// Darkening gamma (> 1 darkens).
        #[arg(long, conflicts_with = "blur")]
        darken: Option<f64>,
        /// Gaussian blur sigma in pixels.
        #[arg(long)]
        blur: Option<f64>,
    },
    /// Train every ablation variant under several seeds and compare.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Restrict to these variant names (comma separated).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Gaze-arrow overlays, plus the equivariance chart when a curve is given.
    Plot {
        #[command(flatten)]
        m: ModelArgs,
        #[arg(long, default_value_t = 16)]
        limit: usize,
        /// Equivariance curve JSON written by the `equivariance` command.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Which split to score: train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
}

/// Exit code for an error, per the table above.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 3,
        Error::Load(_) | Error::Extraction(_) => 4,
        Error::Checkpoint(_) => 5,
        Error::NonFiniteLoss { .. } => 6,
        Error::Io { .. } => 7,
        Error::Report(_) | Error::Contract(_) | Error::Domain(_) | Error::Json(_) => 8,
        Error::Tensor(_) | Error::Image(_) => 1,
    }
}

fn category(e: &Error) -> &'static str {
    match exit_code(e) {
        3 => "config",
        4 => "data",
        5 => "checkpoint",
        6 => "training",
        7 => "filesystem",
        8 => "evaluation",
        _ => "internal",
    }
}

fn env_flag(name: &str) -> Result<Option<bool>> {
    match std::env::var(name) {
        Ok(v) => match v.trim().to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" | "on" => Ok(Some(true)),
            "0" | "false" | "no" | "off" | "" => Ok(Some(false)),
            other => Err(Error::Config(vec![format!("{name}={other:?} is not a boolean")])),
        },
        Err(_) => Ok(None),
    }
}

/// File or preset, then `--set` overrides, then environment, then flags.
pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(&g.preset)?,
    };
    let mut problems = Vec::new();
    for o in &g.overrides {
        if let Err(e) = cfg.set(o) {
            match e {
                Error::Config(v) => problems.extend(v),
                other => problems.push(other.to_string()),
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if let Ok(s) = std::env::var("GAZEKIT_SEED") {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(vec![format!("GAZEKIT_SEED={s:?} is not an unsigned integer")]))?;
    }
    if let Some(d) = env_flag("GAZEKIT_DETERMINISTIC")? {
        cfg.deterministic = d;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if g.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.save(&out.join("resolved-config.toml"))
}

fn load_data(root: &Path, cfg: &RunConfig) -> Result<(DatasetManifest, Dataset)> {
    let manifest = load_dataset(root)?;
    cfg.validate_for_data(manifest.has_landmarks())?;
    let data = Dataset::from_config(&manifest, cfg);
    if !data.excluded.is_empty() {
        log::warn!("{}", data.exclusion_summary());
    }
    if data.is_empty() {
        return Err(Error::Load(vec![format!("{}: no usable samples", root.display())]));
    }
    Ok((manifest, data))
}

fn split_indices(data: &Dataset, cfg: &RunConfig, which: &str) -> Result<Vec<usize>> {
    let m = random_split(data, cfg)?;
    Ok(match which {
        "train" => m.train,
        "val" => m.val,
        "test" => m.test,
        "all" => (0..data.len()).collect(),
        other => return Err(Error::Config(vec![format!("unknown split {other:?}; use train, val, test or all")])),
    })
}

/// Writes `<kind>-<hash>-<time>.json` and the matching `.txt` table.
fn write_report<T: serde::Serialize>(out: &Path, kind: &str, hash: &str, value: &T, table: &str) -> Result<PathBuf> {
    let json = out.join(report_file_name(kind, hash));
    write_json(&json, value)?;
    let txt = json.with_extension("txt");
    std::fs::write(&txt, table).map_err(|e| Error::io(&txt, e))?;
    print!("{table}");
    Ok(json)
}

struct Loaded {
    cfg: RunConfig,
    manifest: DatasetManifest,
    data: Dataset,
    indices: Vec<usize>,
    bundle: crate::pmn::ModelBundle,
}

fn load_for_eval(m: &ModelArgs) -> Result<Loaded> {
    let ck = Checkpoint::load(&m.model)?;
    let cfg = ck.config.clone();
    let bundle = load_model(&ck)?;
    let (manifest, data) = load_data(&m.data, &cfg)?;
    let indices = split_indices(&data, &cfg, &m.split)?;
    if indices.is_empty() {
        return Err(Error::Config(vec![format!("split {:?} is empty", m.split)]));
    }
    prepare_out(&m.out, &cfg)?;
    Ok(Loaded { cfg, manifest, data, indices, bundle })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { out, samples, subjects } => {
            let mut cfg = resolve_config(&cli.global)?;
            if let Some(n) = samples {
                cfg.data.synthetic_samples = n;
            }
            if let Some(n) = subjects {
                cfg.data.synthetic_subjects = n;
            }
            cfg.validate()?;
            let manifest = synth_generate(&SynthConfig::from_run(&cfg), cfg.seed)?;
            write_dataset(&manifest, &out)?;
            cfg.save(&out.join("resolved-config.toml"))?;
            println!("wrote {} images to {}", manifest.len(), out.display());
        }
        Command::Pretrain { data, out, resume } => {
            let cfg = resolve_config(&cli.global)?;
            let (_, ds) = load_data(&data, &cfg)?;
            let train = select(&ds.samples, &random_split(&ds, &cfg)?.train);
            prepare_out(&out, &cfg)?;
            let mut session = match &resume {
                Some(p) => PretrainSession::resume(&Checkpoint::load(p)?, &train)?,
                None => PretrainSession::new(&cfg, &train)?,
            }
            .with_dump_dir(out.join("diagnostics"));
            while !session.is_done() {
                session.run_epoch()?;
                session.checkpoint()?.save(&out.join("pretrain-session.safetensors"))?;
            }
            session.encoder_checkpoint()?.save(&out.join("encoder.safetensors"))?;
            write_json(&out.join("pretrain-log.json"), session.report())?;
            for e in &session.report().epochs {
                println!("epoch {:>3}  ssl loss {:.5}", e.epoch + 1, e.mean_loss);
            }
        }
        Command::Finetune { data, out, encoder } => {
            let cfg = resolve_config(&cli.global)?;
            let (_, ds) = load_data(&data, &cfg)?;
            let m = random_split(&ds, &cfg)?;
            let (train, val) = (select(&ds.samples, &m.train), select(&ds.samples, &m.val));
            let enc = encoder.as_deref().map(Checkpoint::load).transpose()?;
            prepare_out(&out, &cfg)?;
            let (bundle, report) = finetune(&cfg, &train, &val, enc.as_ref())?;
            model_checkpoint(&bundle, &cfg, &report)?.save(&out.join("model.safetensors"))?;
            write_json(&out.join("finetune-log.json"), &report)?;
            println!(
                "best epoch {:?}, validation {}",
                report.best_epoch.map(|e| e + 1),
                report.best_val_metric.map_or("n/a".into(), |v| format!("{v:.3}"))
            );
        }
        Command::Loso { data, out, encoder } => {
            let cfg = resolve_config(&cli.global)?;
            let (_, ds) = load_data(&data, &cfg)?;
            let enc = encoder.as_deref().map(Checkpoint::load).transpose()?;
            prepare_out(&out, &cfg)?;
            let r = run_loso(&cfg, &ds, enc.as_ref())?;
            let mut table = String::new();
            for f in &r.folds {
                let v = f.test_error_deg.map_or_else(|| format!("failed: {}", f.failure.clone().unwrap_or_default()), |e| format!("{e:.3}"));
                table.push_str(&format!("{:<8} {v}\n", f.subject));
            }
            table.push_str(&format!("mean     {}\n", r.mean_error_deg.map_or("n/a".into(), |e| format!("{e:.3}"))));
            write_report(&out, "loso", &r.config_hash, &r, &table)?;
        }
        Command::Eval(m) => {
            let l = load_for_eval(&m)?;
            let p = ModelPredictor { bundle: &l.bundle, scale: LabelScale::from_config(&l.cfg), batch: 64 };
            let samples = select(&l.data.samples, &l.indices);
            let r = evaluate(&p, &samples, &DEFAULT_RANGES, &l.cfg.hash())?;
            write_report(&m.out, "eval", &r.config_hash, &r, &r.render_table())?;
        }
        Command::Equivariance { m, thetas } => {
            let l = load_for_eval(&m)?;
            let p = ModelPredictor { bundle: &l.bundle, scale: LabelScale::from_config(&l.cfg), batch: 64 };
            let records: Vec<usize> = l.indices.iter().map(|&i| l.data.record_index[i]).collect();
            let thetas = thetas.unwrap_or_else(|| DEFAULT_THETAS.to_vec());
            let c = equivariance_sweep(
                &p,
                &l.manifest,
                &records,
                &thetas,
                l.cfg.architecture.face_size,
                l.cfg.data.eye_margin,
                &l.cfg.hash(),
            )?;
            let mut table = String::from("theta   count excluded  error (deg)\n");
            for pt in &c.points {
                let e = pt.mean_error_deg.map_or("n/a".into(), |e| format!("{e:.3}"));
                table.push_str(&format!("{:>5.1} {:>7} {:>8} {:>12}\n", pt.theta_deg, pt.count, pt.excluded, e));
            }
            write_report(&m.out, "equivariance", &c.config_hash, &c, &table)?;
        }
        Command::CorruptEval { m, darken, blur } => {
            let corruption = match (darken, blur) {
                (Some(g), None) => Corruption::Darken { gamma: g },
                (None, Some(s)) => Corruption::Blur { sigma: s },
                _ => return Err(Error::Config(vec!["give exactly one of --darken or --blur".into()])),
            };
            let l = load_for_eval(&m)?;
            let p = ModelPredictor { bundle: &l.bundle, scale: LabelScale::from_config(&l.cfg), batch: 64 };
            let samples = select(&l.data.samples, &l.indices);
            let r = corruption_eval(&p, &samples, corruption, Some(l.cfg.data.low_light_threshold), &l.cfg.hash())?;
            let mut table = format!("{corruption:?}\nclean:\n{}corrupted:\n{}", r.clean.render_table(), r.corrupted.render_table());
            if let Some(d) = &r.low_light {
                table.push_str(&format!("low illumination (< {}):\n{}", l.cfg.data.low_light_threshold, d.render_table()));
            }
            write_report(&m.out, "corrupt-eval", &r.clean.config_hash, &r, &table)?;
        }
        Command::Ablate { data, out, seeds, variants } => {
            let cfg = resolve_config(&cli.global)?;
            let (_, ds) = load_data(&data, &cfg)?;
            let mut chosen = standard_variants();
            if let Some(names) = &variants {
                let unknown: Vec<String> = names
                    .iter()
                    .filter(|n| !chosen.iter().any(|v| &v.name == *n))
                    .map(|n| format!("unknown variant {n:?}"))
                    .collect();
                if !unknown.is_empty() {
                    return Err(Error::Config(unknown));
                }
                chosen.retain(|v| names.contains(&v.name));
            }
            prepare_out(&out, &cfg)?;
            let runs = run_ablation(&cfg, &ds, &chosen, &seeds, |r| {
                println!("{:<12} seed {:<3} {:.3}°", r.variant, r.seed, r.test.mean_error_deg)
            })?;
            let medians = median_errors(&runs);
            let median_report = |name: &str| -> Option<crate::evaluation::EvalReport> {
                let med = medians.iter().find(|(n, _)| n == name)?.1;
                runs.iter().filter(|r| r.variant == name).min_by(|a, b| {
                    (a.test.mean_error_deg - med).abs().total_cmp(&(b.test.mean_error_deg - med).abs())
                }).map(|r| r.test.clone())
            };
            let reports: Vec<(String, crate::evaluation::EvalReport)> =
                chosen.iter().filter_map(|v| median_report(&v.name).map(|r| (v.name.clone(), r))).collect();
            let (first, rest) = reports.split_first().ok_or_else(|| Error::Report("no ablation runs".into()))?;
            let others: Vec<(&str, &crate::evaluation::EvalReport)> = rest.iter().map(|(n, r)| (n.as_str(), r)).collect();
            let table = ablation_report((&first.0, &first.1), &others)?;
            write_json(&out.join("ablation-runs.json"), &runs)?;
            write_report(&out, "ablation", &cfg.hash(), &table, &table.render())?;
        }
        Command::Plot { m, limit, curve } => {
            let l = load_for_eval(&m)?;
            let p = ModelPredictor { bundle: &l.bundle, scale: LabelScale::from_config(&l.cfg), batch: 64 };
            let idx: Vec<usize> = l.indices.iter().copied().take(limit).collect();
            let samples = select(&l.data.samples, &idx);
            let preds = p.predict(&samples)?;
            let paths = plot_predictions(&samples, &preds, &m.out)?;
            println!("wrote {} overlays to {}", paths.len(), m.out.display());
            if let Some(c) = curve {
                let text = std::fs::read_to_string(&c).map_err(|e| Error::io(&c, e))?;
                let curve: EquivarianceCurve = serde_json::from_str(&text)?;
                let path = m.out.join("equivariance.png");
                equivariance_chart(&curve, 360, 240)?.save_png(&path)?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first), runs, and returns the exit code.
pub fn main(argv: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error [{}]: {e}", category(&e));
            exit_code(&e)
        }
    }
}
