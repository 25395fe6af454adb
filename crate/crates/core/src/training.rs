//! Self-supervised pretraining and supervised fine-tuning loops, their
//! schedules, resumable session state, and the multi-run harnesses (LOSO
//! folds and ablation sweeps) built on top of them.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_pipeline, generate_views, AugmentationConfig, Pipeline};
use crate::checkpoint::Checkpoint;
use crate::config::{AblationFlags, EarlyStopConfig, PlateauConfig, RunConfig, Task, EYE_PATCH_SIZE};
use crate::data::{split, Dataset, Sample, SplitManifest, SplitScheme, LOSO_VALIDATION_TAIL};
use crate::error::{Error, Result};
use crate::evaluation::{encoder_input, evaluate, evaluate_classes, EvalReport, ModelPredictor, DEFAULT_RANGES};
use crate::image::Image;
use crate::losses::{balanced_class_weights, byol_loss, scalar, ssl_loss, sup_loss_tensor, weighted_cross_entropy, SslLossInputs};
use crate::networks::{batch_tensor, EncoderInput, NetworkPair};
use crate::nn::{Adam, AdamConfig, Mode, Optimizer, OptimizerState, Sgd, SgdConfig};
use crate::pmn::{LabelScale, ModelBundle};

/// Parameter dtype of every training run.
pub const TRAIN_DTYPE: DType = DType::F32;

const TAG_INIT: u64 = 0x1;
const TAG_SHUFFLE: u64 = 0x2;
const TAG_VIEWS: u64 = 0x3;
const TAG_DROPOUT: u64 = 0x4;

/// SplitMix64 finalizer over (seed, a, b): independent sub-seeds for every
/// (epoch, item) pair without threading an RNG through the loops.
pub fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed;
    for v in [a, b] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Shuffled batches of one epoch. A trailing batch of one sample is dropped
/// because batch statistics need at least two.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if n < 2 {
        return Err(Error::contract(format!("training needs at least 2 samples, got {n}")));
    }
    if batch_size < 2 {
        return Err(Error::contract(format!("batch size must be at least 2, got {batch_size}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, TAG_SHUFFLE)));
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.last().is_some_and(|b| b.len() < 2) {
        batches.pop();
    }
    Ok(batches)
}

// ---------------------------------------------------------------------------
// Schedules

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// observations fail to improve on the best by more than `min_delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrOnPlateau {
    pub cfg: PlateauConfig,
    pub lr: f64,
    pub best: Option<f64>,
    pub bad: usize,
}

impl LrOnPlateau {
    pub fn new(lr: f64, cfg: PlateauConfig) -> Self {
        Self { cfg, lr, best: None, bad: 0 }
    }

    pub fn observe(&mut self, metric: f64) -> Result<f64> {
        if !metric.is_finite() {
            return Err(Error::Domain(format!("plateau metric must be finite, got {metric}")));
        }
        match self.best {
            Some(b) if metric >= b - self.cfg.min_delta => {
                self.bad += 1;
                if self.bad >= self.cfg.patience.max(1) {
                    self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
                    self.bad = 0;
                }
            }
            _ => {
                self.best = Some(metric);
                self.bad = 0;
            }
        }
        Ok(self.lr)
    }
}

/// Signals a stop after exactly `patience` consecutive non-improving epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub cfg: EarlyStopConfig,
    pub best: Option<f64>,
    pub bad: usize,
}

impl EarlyStopping {
    pub fn new(cfg: EarlyStopConfig) -> Self {
        Self { cfg, best: None, bad: 0 }
    }

    pub fn observe(&mut self, metric: f64) -> bool {
        match self.best {
            Some(b) if metric >= b - self.cfg.min_delta => self.bad += 1,
            _ => {
                self.best = Some(metric);
                self.bad = 0;
            }
        }
        self.cfg.enabled && self.bad >= self.cfg.patience
    }
}

fn optimizer_checkpoint_parts(state: &OptimizerState) -> (serde_json::Value, Vec<(String, Tensor)>) {
    (serde_json::json!({ "step": state.step, "lr": state.lr }), state.tensors.clone())
}

fn optimizer_state_from(ck: &Checkpoint) -> Result<OptimizerState> {
    let o = &ck.state["optimizer"];
    Ok(OptimizerState {
        step: o["step"].as_u64().ok_or_else(|| Error::Checkpoint("optimizer step missing".into()))?,
        lr: o["lr"].as_f64().ok_or_else(|| Error::Checkpoint("optimizer lr missing".into()))?,
        tensors: ck.group("optim."),
    })
}

fn state_field<T: for<'de> Deserialize<'de>>(ck: &Checkpoint, key: &str) -> Result<T> {
    serde_json::from_value(ck.state[key].clone())
        .map_err(|e| Error::Checkpoint(format!("state field {key}: {e}")))
}

// ---------------------------------------------------------------------------
// Pretraining

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: Vec<PretrainEpoch>,
    /// τ before the first step, then the τ applied after every step.
    pub tau_trace: Vec<f64>,
}

/// The augmentation used for face views under `cfg`.
pub fn pretrain_augmentation(cfg: &RunConfig) -> AugmentationConfig {
    let size = (cfg.architecture.face_size, cfg.architecture.face_size);
    if cfg.ablation.use_mbyol_mods {
        AugmentationConfig { output_size: size, ..cfg.augmentation.clone() }
    } else {
        AugmentationConfig::byol_baseline(size)
    }
}

/// Resumable self-supervised pretraining over borrowed samples.
pub struct PretrainSession<'a> {
    cfg: RunConfig,
    samples: &'a [Sample],
    pair: NetworkPair,
    opt: Sgd,
    faces: Pipeline,
    patches: Option<Pipeline>,
    batches_per_epoch: usize,
    epoch: usize,
    report: PretrainReport,
    dump_dir: Option<PathBuf>,
}

impl<'a> PretrainSession<'a> {
    pub fn new(cfg: &RunConfig, samples: &'a [Sample]) -> Result<Self> {
        cfg.validate()?;
        let p = &cfg.pretrain;
        let batches_per_epoch = epoch_batches(samples.len(), p.batch_size.min(samples.len()).max(2), cfg.seed, 0)?.len();
        let total = (batches_per_epoch * p.epochs) as u64;
        let pair = NetworkPair::new(cfg, mix(cfg.seed, 0, TAG_INIT), TRAIN_DTYPE, total)?;
        let opt = Sgd::new(
            pair.online_params.trainable(),
            SgdConfig { lr: p.lr, momentum: p.momentum, weight_decay: p.weight_decay },
        );
        let faces = build_pipeline(&pretrain_augmentation(cfg))?;
        let patches = pair.online.encoder.uses_patches().then(|| faces.photometric(EYE_PATCH_SIZE));
        let report = PretrainReport { epochs: Vec::new(), tau_trace: vec![pair.current_tau()?] };
        Ok(Self { cfg: cfg.clone(), samples, pair, opt, faces, patches, batches_per_epoch, epoch: 0, report, dump_dir: None })
    }

    /// Where to write the offending batch when the loss turns non-finite.
    pub fn with_dump_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.dump_dir = Some(dir.into());
        self
    }

    pub fn pair(&self) -> &NetworkPair {
        &self.pair
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.pretrain.epochs
    }

    pub fn report(&self) -> &PretrainReport {
        &self.report
    }

    fn batch_size(&self) -> usize {
        self.cfg.pretrain.batch_size.min(self.samples.len()).max(2)
    }

    fn views(&self, batch: &[usize]) -> Result<(EncoderInput, EncoderInput)> {
        let mut v = (Vec::new(), Vec::new(), Vec::new());
        let mut vp = (Vec::new(), Vec::new(), Vec::new());
        for &i in batch {
            let s = &self.samples[i];
            let seed = mix(self.cfg.seed, self.epoch as u64, mix(i as u64, 0, TAG_VIEWS));
            let face = generate_views(&s.face, &self.faces, seed)?;
            let (l, r) = match &self.patches {
                Some(p) => (
                    generate_views(&s.left_patch, p, mix(seed, 1, 0))?,
                    generate_views(&s.right_patch, p, mix(seed, 2, 0))?,
                ),
                None => {
                    let same = |img: &Image| crate::augment::ViewPair { v: img.clone(), v_prime: img.clone() };
                    (same(&s.left_patch), same(&s.right_patch))
                }
            };
            v.0.push(face.v);
            vp.0.push(face.v_prime);
            v.1.push(l.v);
            vp.1.push(l.v_prime);
            v.2.push(r.v);
            vp.2.push(r.v_prime);
        }
        let stack = |imgs: &[Image]| batch_tensor(&imgs.iter().collect::<Vec<_>>(), TRAIN_DTYPE);
        Ok((
            EncoderInput { face: stack(&v.0)?, left: stack(&v.1)?, right: stack(&v.2)? },
            EncoderInput { face: stack(&vp.0)?, left: stack(&vp.1)?, right: stack(&vp.2)? },
        ))
    }

    fn dump_batch(&self, batch: &[usize], x: &EncoderInput) -> Option<PathBuf> {
        let dir = self.dump_dir.as_ref()?.join(format!("nonfinite-epoch{}", self.epoch));
        std::fs::create_dir_all(&dir).ok()?;
        let files: Vec<&str> = batch.iter().map(|&i| self.samples[i].file.as_str()).collect();
        std::fs::write(dir.join("files.txt"), files.join("\n")).ok()?;
        let faces = x.face.to_dtype(DType::F32).ok()?;
        for (k, &i) in batch.iter().enumerate() {
            let t = faces.get(k).ok()?;
            let (c, h, w) = t.dims3().ok()?;
            let data = t.flatten_all().ok()?.to_vec1::<f32>().ok()?;
            let img = Image::from_vec(c, h, w, data).ok()?;
            let _ = img.save_png(&dir.join(format!("view-{k:03}-{}.png", sanitize(&self.samples[i].file))));
        }
        Some(dir)
    }

    /// One optimizer step on `batch`; returns the loss.
    pub fn train_step(&mut self, batch: &[usize], step: usize) -> Result<f64> {
        let (v, vp) = self.views(batch)?;
        let on_v = self.pair.online.forward(&v, Mode::Train)?;
        let on_vp = self.pair.online.forward(&vp, Mode::Train)?;
        let tg_v = self.pair.target.forward(&v, Mode::Train)?;
        let tg_vp = self.pair.target.forward(&vp, Mode::Train)?;
        let (q_v, q_vp) = (on_v.q.as_ref().unwrap(), on_vp.q.as_ref().unwrap());
        let inputs = SslLossInputs {
            q_v,
            q_v_prime: q_vp,
            z_online_v: &on_v.z,
            z_online_v_prime: &on_vp.z,
            z_target_v: &tg_v.z,
            z_target_v_prime: &tg_vp.z,
        };
        let loss = if self.cfg.ablation.use_mbyol_mods { ssl_loss(&inputs)? } else { byol_loss(&inputs)? };
        let value = scalar(&loss)?;
        if !value.is_finite() {
            let files: Vec<&str> = batch.iter().map(|&i| self.samples[i].file.as_str()).collect();
            let dumped = self.dump_batch(batch, &v);
            let mut detail = format!("ssl loss {value}; batch files [{}]", files.join(", "));
            if let Some(d) = dumped {
                detail.push_str(&format!("; batch written to {}", d.display()));
            }
            return Err(Error::NonFiniteLoss { epoch: self.epoch, step, detail });
        }
        let grads = loss.backward()?;
        self.opt.step(&grads)?;
        let tau = self.pair.momentum_step()?;
        self.report.tau_trace.push(tau);
        Ok(value)
    }

    pub fn run_epoch(&mut self) -> Result<PretrainEpoch> {
        if self.is_done() {
            return Err(Error::contract("pretraining already finished"));
        }
        let batches = epoch_batches(self.samples.len(), self.batch_size(), self.cfg.seed, self.epoch)?;
        debug_assert_eq!(batches.len(), self.batches_per_epoch);
        let mut sum = 0.0;
        for (step, b) in batches.iter().enumerate() {
            sum += self.train_step(b, step)?;
        }
        let e = PretrainEpoch { epoch: self.epoch, mean_loss: sum / batches.len() as f64, steps: batches.len() };
        info!(
            "pretrain epoch {} loss {:.5} tau {:.6}",
            e.epoch + 1,
            e.mean_loss,
            self.report.tau_trace.last().copied().unwrap_or(f64::NAN)
        );
        self.report.epochs.push(e.clone());
        self.epoch += 1;
        Ok(e)
    }

    pub fn run(&mut self) -> Result<PretrainReport> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(self.report.clone())
    }

    /// The online encoder only; everything else is discarded.
    pub fn encoder_checkpoint(&self) -> Result<Checkpoint> {
        let state = serde_json::json!({ "epochs": self.epoch, "report": self.report });
        Ok(Checkpoint::new("encoder", self.pair.step, &self.cfg, state).with_tensors("", self.pair.encoder_tensors()?))
    }

    /// Full session state for resuming.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let (opt_state, opt_tensors) = optimizer_checkpoint_parts(&self.opt.state()?);
        let state = serde_json::json!({
            "epoch": self.epoch,
            "ema_step": self.pair.step,
            "report": self.report,
            "optimizer": opt_state,
        });
        Ok(Checkpoint::new("pretrain", self.pair.step, &self.cfg, state)
            .with_tensors("online.", self.pair.online_params.snapshot()?)
            .with_tensors("target.", self.pair.target_params.snapshot()?)
            .with_tensors("optim.", opt_tensors))
    }

    pub fn resume(ck: &Checkpoint, samples: &'a [Sample]) -> Result<Self> {
        ck.expect_kind("pretrain")?;
        let mut s = Self::new(&ck.config, samples)?;
        s.pair.online_params.load_named("online.", &ck.tensors)?;
        s.pair.target_params.load_named("target.", &ck.tensors)?;
        s.pair.step = state_field(ck, "ema_step")?;
        s.epoch = state_field(ck, "epoch")?;
        s.report = state_field(ck, "report")?;
        s.opt.load_state(&optimizer_state_from(ck)?)?;
        Ok(s)
    }
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

pub type PretrainResult = (Checkpoint, PretrainReport);

/// Runs pretraining to completion and returns the encoder checkpoint.
pub fn pretrain(cfg: &RunConfig, samples: &[Sample]) -> Result<PretrainResult> {
    let mut s = PretrainSession::new(cfg, samples)?;
    let report = s.run()?;
    Ok((s.encoder_checkpoint()?, report))
}

// ---------------------------------------------------------------------------
// Fine-tuning

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Angular error in degrees (gaze) or error rate in percent (expression).
    pub val_metric: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub epochs: Vec<FinetuneEpoch>,
    pub best_epoch: Option<usize>,
    pub best_val_metric: Option<f64>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Progress {
    epoch: usize,
    cursor: usize,
    loss_sum: f64,
    done: bool,
}

/// Resumable supervised fine-tuning over borrowed train and validation samples.
pub struct FinetuneSession<'a> {
    cfg: RunConfig,
    train: &'a [Sample],
    val: &'a [Sample],
    bundle: ModelBundle,
    opt: Adam,
    scale: LabelScale,
    class_weights: Vec<f64>,
    plateau: LrOnPlateau,
    early: EarlyStopping,
    progress: Progress,
    best: Option<Vec<(String, Tensor)>>,
    report: FinetuneReport,
}

impl<'a> FinetuneSession<'a> {
    /// `encoder` must be given exactly when `use_ssl_init` is set.
    pub fn new(cfg: &RunConfig, train: &'a [Sample], val: &'a [Sample], encoder: Option<&Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        let bundle = ModelBundle::new(cfg, mix(cfg.seed, 1, TAG_INIT), TRAIN_DTYPE)?;
        match (cfg.ablation.use_ssl_init, encoder) {
            (true, Some(ck)) => {
                ck.expect_kind("encoder")?;
                bundle.params.load_scoped("encoder.", &ck.tensors)?;
            }
            (true, None) => {
                return Err(Error::Config(vec![
                    "ablation.use_ssl_init is set but no pretrained encoder checkpoint was given".into(),
                ]))
            }
            (false, Some(_)) => warn!("use_ssl_init is off; ignoring the encoder checkpoint"),
            (false, None) => {}
        }
        let class_weights = match cfg.architecture.task {
            Task::Fer { classes } => {
                let labels = train
                    .iter()
                    .map(|s| s.label.class().ok_or_else(|| Error::contract(format!("{} has no class label", s.file))))
                    .collect::<Result<Vec<_>>>()?;
                balanced_class_weights(&labels, classes)
            }
            Task::Gaze => Vec::new(),
        };
        let ft = &cfg.finetune;
        let opt = Adam::new(bundle.optimized_vars(), AdamConfig { lr: ft.lr, ..AdamConfig::default() })?;
        Ok(Self {
            cfg: cfg.clone(),
            train,
            val,
            scale: LabelScale::from_config(cfg),
            class_weights,
            plateau: LrOnPlateau::new(ft.lr, ft.plateau.clone()),
            early: EarlyStopping::new(ft.early_stop.clone()),
            bundle,
            opt,
            progress: Progress { epoch: 0, cursor: 0, loss_sum: 0.0, done: false },
            best: None,
            report: FinetuneReport::default(),
        })
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn report(&self) -> &FinetuneReport {
        &self.report
    }

    pub fn is_done(&self) -> bool {
        self.progress.done
    }

    fn batch_size(&self) -> usize {
        self.cfg.finetune.batch_size.min(self.train.len()).max(2)
    }

    fn loss(&self, batch: &[&Sample], out: &Tensor) -> Result<Tensor> {
        match self.cfg.architecture.task {
            Task::Gaze => {
                let mut target = Vec::with_capacity(2 * batch.len());
                for s in batch {
                    let a = s.label.gaze().ok_or_else(|| Error::contract(format!("{} has no gaze label", s.file)))?;
                    target.extend([a.pitch, a.yaw]);
                }
                let target = Tensor::from_vec(target, (batch.len(), 2), &Device::Cpu)?.to_dtype(out.dtype())?;
                // Residuals are taken in radians, not in the head's normalized range.
                let scale = Tensor::new(&[self.scale.pitch, self.scale.yaw], &Device::Cpu)?.to_dtype(out.dtype())?;
                let pred = out.broadcast_mul(&scale)?;
                Ok(sup_loss_tensor(&pred, &target, &self.cfg.loss, self.cfg.ablation.use_inv_ev)?.0)
            }
            Task::Fer { .. } => {
                let labels: Vec<usize> = batch.iter().filter_map(|s| s.label.class()).collect();
                weighted_cross_entropy(out, &labels, &self.class_weights)
            }
        }
    }

    /// Validation metric of the current parameters.
    pub fn validation_metric(&self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        Ok(Some(match self.cfg.architecture.task {
            Task::Gaze => {
                let p = ModelPredictor { bundle: &self.bundle, scale: self.scale, batch: 64 };
                evaluate(&p, self.val, &[], "")?.mean_error_deg
            }
            Task::Fer { classes } => 100.0 * (1.0 - evaluate_classes(&self.bundle, self.val, classes, "")?.accuracy),
        }))
    }

    fn end_epoch(&mut self, batches: usize) -> Result<()> {
        let epoch = self.progress.epoch;
        let train_loss = self.progress.loss_sum / batches as f64;
        let val = self.validation_metric()?;
        let lr_used = self.opt.learning_rate();
        let metric = val.unwrap_or(train_loss);
        let new_lr = self.plateau.observe(metric)?;
        if new_lr != lr_used {
            info!("learning rate {lr_used:e} -> {new_lr:e}");
        }
        self.opt.set_learning_rate(new_lr);
        if let Some(v) = val {
            if self.report.best_val_metric.is_none_or(|b| v < b) {
                self.report.best_val_metric = Some(v);
                self.report.best_epoch = Some(epoch);
                self.best = Some(self.bundle.params.snapshot()?);
            }
        }
        let stop = val.is_some() && self.early.observe(metric);
        info!(
            "finetune epoch {} loss {:.5} val {} lr {:e}",
            epoch + 1,
            train_loss,
            val.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            lr_used
        );
        self.report.epochs.push(FinetuneEpoch { epoch, train_loss, val_metric: val, lr: lr_used });
        self.progress = Progress { epoch: epoch + 1, cursor: 0, loss_sum: 0.0, done: false };
        if stop {
            info!("early stop after epoch {}", epoch + 1);
            self.report.stopped_early = true;
        }
        if stop || self.progress.epoch >= self.cfg.finetune.epochs {
            self.progress.done = true;
        }
        Ok(())
    }

    /// One optimizer step; closes the epoch when its last batch is done.
    pub fn step(&mut self) -> Result<()> {
        if self.progress.done {
            return Err(Error::contract("fine-tuning already finished"));
        }
        let epoch = self.progress.epoch;
        let batches = epoch_batches(self.train.len(), self.batch_size(), self.cfg.seed, epoch)?;
        let cursor = self.progress.cursor;
        let batch: Vec<&Sample> = batches[cursor].iter().map(|&i| &self.train[i]).collect();
        let x = encoder_input(&batch, TRAIN_DTYPE)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, epoch as u64, mix(cursor as u64, 0, TAG_DROPOUT)));
        let out = self.bundle.model.forward(&x, Mode::Train, &mut rng)?;
        let loss = self.loss(&batch, &out)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            let files: Vec<&str> = batch.iter().map(|s| s.file.as_str()).collect();
            return Err(Error::NonFiniteLoss {
                epoch,
                step: cursor,
                detail: format!("loss {value}; batch files [{}]", files.join(", ")),
            });
        }
        let grads = loss.backward()?;
        self.opt.step(&grads)?;
        self.progress.loss_sum += value;
        self.progress.cursor += 1;
        if self.progress.cursor == batches.len() {
            self.end_epoch(batches.len())?;
        }
        Ok(())
    }

    /// Runs at most `n` steps; returns whether training has finished.
    pub fn run_steps(&mut self, n: usize) -> Result<bool> {
        for _ in 0..n {
            if self.progress.done {
                break;
            }
            self.step()?;
        }
        Ok(self.progress.done)
    }

    /// Trains to completion and restores the best-validation parameters.
    pub fn run(mut self) -> Result<(ModelBundle, FinetuneReport)> {
        while !self.progress.done {
            self.step()?;
        }
        if let Some(best) = &self.best {
            self.bundle.params.restore(best)?;
        }
        Ok((self.bundle, self.report))
    }

    /// Full session state for resuming mid-epoch.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let (opt_state, opt_tensors) = optimizer_checkpoint_parts(&self.opt.state()?);
        let state = serde_json::json!({
            "progress": self.progress,
            "plateau": self.plateau,
            "early": self.early,
            "report": self.report,
            "optimizer": opt_state,
            "has_best": self.best.is_some(),
        });
        let mut ck = Checkpoint::new("finetune", self.opt.state()?.step, &self.cfg, state)
            .with_tensors("model.", self.bundle.params.snapshot()?)
            .with_tensors("optim.", opt_tensors);
        if let Some(best) = &self.best {
            ck = ck.with_tensors("best.", best.clone());
        }
        Ok(ck)
    }

    pub fn resume(ck: &Checkpoint, train: &'a [Sample], val: &'a [Sample]) -> Result<Self> {
        ck.expect_kind("finetune")?;
        let mut cfg = ck.config.clone();
        // Parameters come from the checkpoint; the encoder source is irrelevant.
        cfg.ablation.use_ssl_init = false;
        let mut s = Self::new(&cfg, train, val, None)?;
        s.cfg = ck.config.clone();
        s.bundle.params.load_named("model.", &ck.tensors)?;
        s.opt.load_state(&optimizer_state_from(ck)?)?;
        s.progress = state_field(ck, "progress")?;
        s.plateau = state_field(ck, "plateau")?;
        s.early = state_field(ck, "early")?;
        s.report = state_field(ck, "report")?;
        if state_field::<bool>(ck, "has_best")? {
            s.best = Some(ck.group("best."));
        }
        Ok(s)
    }
}

/// Trained model checkpoint: parameters plus the resolved config.
pub fn model_checkpoint(bundle: &ModelBundle, cfg: &RunConfig, report: &FinetuneReport) -> Result<Checkpoint> {
    Ok(Checkpoint::new("model", report.epochs.len() as u64, cfg, serde_json::json!({ "report": report }))
        .with_tensors("model.", bundle.params.snapshot()?))
}

pub fn load_model(ck: &Checkpoint) -> Result<ModelBundle> {
    ck.expect_kind("model")?;
    let bundle = ModelBundle::new(&ck.config, 0, TRAIN_DTYPE)?;
    bundle.params.load_named("model.", &ck.tensors)?;
    Ok(bundle)
}

pub fn finetune(
    cfg: &RunConfig,
    train: &[Sample],
    val: &[Sample],
    encoder: Option<&Checkpoint>,
) -> Result<(ModelBundle, FinetuneReport)> {
    FinetuneSession::new(cfg, train, val, encoder)?.run()
}

// ---------------------------------------------------------------------------
// Experiments

/// Splits a dataset by the configured random fractions.
pub fn random_split(dataset: &Dataset, cfg: &RunConfig) -> Result<SplitManifest> {
    let subjects: Vec<String> = dataset.samples.iter().map(|s| s.subject.clone()).collect();
    split(
        &subjects,
        &SplitScheme::Random { val: cfg.data.val_fraction, test: cfg.data.test_fraction, seed: cfg.seed },
    )
}

pub fn select(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub subject: String,
    pub test_error_deg: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoReport {
    pub config_hash: String,
    pub folds: Vec<FoldResult>,
    /// Mean over completed folds.
    pub mean_error_deg: Option<f64>,
}

/// One fine-tune per held-out subject.
pub fn run_loso(cfg: &RunConfig, dataset: &Dataset, encoder: Option<&Checkpoint>) -> Result<LosoReport> {
    let subjects: Vec<String> = dataset.samples.iter().map(|s| s.subject.clone()).collect();
    let mut distinct = subjects.clone();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Config(vec![format!(
            "leave-one-subject-out needs at least 2 subjects, found {}",
            distinct.len()
        )]));
    }
    let hash = cfg.hash();
    let mut folds = Vec::with_capacity(distinct.len());
    for subject in &distinct {
        let scheme = SplitScheme::LeaveOneSubjectOut { subject: subject.clone(), val_tail: LOSO_VALIDATION_TAIL };
        let fold = split(&subjects, &scheme).and_then(|m| {
            let (train, val, test) =
                (select(&dataset.samples, &m.train), select(&dataset.samples, &m.val), select(&dataset.samples, &m.test));
            let (bundle, _) = finetune(cfg, &train, &val, encoder)?;
            let p = ModelPredictor { bundle: &bundle, scale: LabelScale::from_config(cfg), batch: 64 };
            Ok(evaluate(&p, &test, &[], &hash)?.mean_error_deg)
        });
        folds.push(match fold {
            Ok(e) => {
                info!("fold {subject}: {e:.3}°");
                FoldResult { subject: subject.clone(), test_error_deg: Some(e), failure: None }
            }
            Err(e) => {
                warn!("fold {subject} failed: {e}");
                FoldResult { subject: subject.clone(), test_error_deg: None, failure: Some(e.to_string()) }
            }
        });
    }
    let done: Vec<f64> = folds.iter().filter_map(|f| f.test_error_deg).collect();
    if done.len() < folds.len() {
        warn!("{} of {} folds failed; the mean covers completed folds only", folds.len() - done.len(), folds.len());
    }
    let mean_error_deg = (!done.is_empty()).then(|| done.iter().sum::<f64>() / done.len() as f64);
    Ok(LosoReport { config_hash: hash, folds, mean_error_deg })
}

/// A named set of ablation flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub flags: AblationFlags,
}

impl Variant {
    fn with(name: &str, f: impl FnOnce(&mut AblationFlags)) -> Self {
        let mut flags = AblationFlags::default();
        f(&mut flags);
        Self { name: name.to_string(), flags }
    }
}

/// The full method followed by its ablations.
pub fn standard_variants() -> Vec<Variant> {
    vec![
        Variant::with("full", |_| {}),
        Variant::with("w/o-PMN", |f| f.use_pmn = false),
        Variant::with("w/o-SSL", |f| f.use_ssl_init = false),
        Variant::with("w/o-inv-EV", |f| f.use_inv_ev = false),
        Variant::with("w/o-mBYOL", |f| f.use_mbyol_mods = false),
        Variant::with("w/o-local", |f| f.use_local = false),
        Variant::with("w/o-global", |f| f.use_global = false),
        Variant::with("basic-BYOL", |f| {
            f.use_mbyol_mods = false;
            f.use_pmn = false;
            f.use_inv_ev = false;
        }),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub test: EvalReport,
    pub finetune: FinetuneReport,
    pub pretrain: Option<PretrainReport>,
}

/// Trains every variant under every seed on one fixed split. Pretraining
/// runs are shared between variants with the same pretraining flags.
pub fn run_ablation(
    base: &RunConfig,
    dataset: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRun),
) -> Result<Vec<AblationRun>> {
    let m = random_split(dataset, base)?;
    let (train, val, test) = (select(&dataset.samples, &m.train), select(&dataset.samples, &m.val), select(&dataset.samples, &m.test));
    // Keyed by (seed, pretraining flags).
    let mut cache: HashMap<(u64, (bool, bool, bool)), PretrainResult> = HashMap::new();
    let mut runs = Vec::new();
    for &seed in seeds {
        for v in variants {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.ablation = v.flags;
            cfg.validate()?;
            let pre = if cfg.ablation.use_ssl_init {
                let key = (seed, cfg.ablation.pretrain_key());
                let entry = match cache.entry(key) {
                    std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                    std::collections::hash_map::Entry::Vacant(e) => e.insert(pretrain(&cfg, &train)?),
                };
                Some(entry.clone())
            } else {
                None
            };
            let (bundle, ft) = finetune(&cfg, &train, &val, pre.as_ref().map(|p| &p.0))?;
            let p = ModelPredictor { bundle: &bundle, scale: LabelScale::from_config(&cfg), batch: 64 };
            let run = AblationRun {
                variant: v.name.clone(),
                seed,
                test: evaluate(&p, &test, &DEFAULT_RANGES, &cfg.hash())?,
                finetune: ft,
                pretrain: pre.map(|p| p.1),
            };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(runs)
}

/// Median over seeds of each variant's overall test error, in variant order.
pub fn median_errors(runs: &[AblationRun]) -> Vec<(String, f64)> {
    let mut names: Vec<&str> = Vec::new();
    for r in runs {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let mut e: Vec<f64> = runs.iter().filter(|r| r.variant == n).map(|r| r.test.mean_error_deg).collect();
            e.sort_by(f64::total_cmp);
            let k = e.len();
            let med = if k % 2 == 1 { e[k / 2] } else { (e[k / 2 - 1] + e[k / 2]) / 2.0 };
            (n.to_string(), med)
        })
        .collect()
}

/// Writes `value` as pretty JSON, creating parent directories.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}
