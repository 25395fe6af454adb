//! Declarative run configuration: architecture, ablation flags, schedules, data.
//!
//! Every field has a default so partial TOML files are accepted. `validate`
//! reports every violated constraint at once.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentationConfig;
use crate::error::{Error, Result};
use crate::losses::WeightingConfig;

pub const EYE_PATCH_SIZE: (usize, usize) = (36, 60);
pub const LOCAL_OUT_DIM: usize = 52;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels of the stride-2 conv blocks; the last one is D_g.
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { channels: vec![32, 64, 128, 256], kernel: 3 }
    }
}

impl BackboneConfig {
    pub fn large() -> Self {
        Self { channels: vec![64, 128, 256, 512, 1536], kernel: 3 }
    }

    pub fn feature_dim(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalBranchConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_dim: usize,
}

impl Default for LocalBranchConfig {
    fn default() -> Self {
        Self { channels: vec![32, 64, 128], kernel: 3, stride: 2, padding: 1, out_dim: LOCAL_OUT_DIM }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BottleneckConfig {
    pub channels: Vec<usize>,
    pub stride: usize,
    pub out_dim: usize,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self { channels: vec![32, 64, 128], stride: 1, out_dim: 512 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Task {
    Gaze,
    Fer { classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Hidden widths between F_T and the output layer.
    pub hidden: Vec<usize>,
    /// Expected F_T width; derived from the other dims when absent.
    pub input_dim: Option<usize>,
    pub bounded: bool,
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: vec![1024, 256], input_dim: None, bounded: true, dropout: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Square face input side.
    pub face_size: usize,
    pub backbone: BackboneConfig,
    pub local: LocalBranchConfig,
    pub attention_heads: usize,
    /// (hidden-in, hidden, out) of the projection MLP.
    pub projection: Vec<usize>,
    /// (in, hidden, out) of the prediction MLP.
    pub prediction: Vec<usize>,
    pub bottleneck: BottleneckConfig,
    /// Width of the learned projection of the encoder output (F_f).
    pub face_feature_dim: usize,
    pub head: HeadConfig,
    pub task: Task,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            face_size: 112,
            backbone: BackboneConfig::default(),
            local: LocalBranchConfig::default(),
            attention_heads: 8,
            projection: vec![1536, 1024, 1024],
            prediction: vec![1024, 1024, 1024],
            bottleneck: BottleneckConfig::default(),
            face_feature_dim: 256,
            head: HeadConfig::default(),
            task: Task::Gaze,
        }
    }
}

/// Flags selecting the ablation variants. All true is the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub use_pmn: bool,
    pub use_ssl_init: bool,
    pub use_inv_ev: bool,
    /// Off means plain BYOL: global branch only, no attention, small
    /// augmentation stack, two-term loss.
    pub use_mbyol_mods: bool,
    pub use_local: bool,
    pub use_global: bool,
    pub freeze_backbone: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_pmn: true,
            use_ssl_init: true,
            use_inv_ev: true,
            use_mbyol_mods: true,
            use_local: true,
            use_global: true,
            freeze_backbone: false,
        }
    }
}

impl AblationFlags {
    pub fn local_active(&self) -> bool {
        self.use_local && self.use_mbyol_mods
    }

    pub fn attention_active(&self) -> bool {
        self.use_mbyol_mods
    }

    /// Whether two configs share the same pretraining run.
    pub fn pretrain_key(&self) -> (bool, bool, bool) {
        (self.use_mbyol_mods, self.use_local, self.use_global)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau_base: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { lr: 0.06, momentum: 0.9, weight_decay: 0.0, batch_size: 112, epochs: 100, tau_base: 0.996 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self { enabled: true, patience: 2, min_delta: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self { factor: 0.1, patience: 1, min_delta: 0.0, min_lr: 1e-7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stop: EarlyStopConfig,
    pub plateau: PlateauConfig,
    /// Pitch and yaw are divided by these before reaching the bounded head.
    pub pitch_scale: f64,
    pub yaw_scale: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 16,
            epochs: 50,
            early_stop: EarlyStopConfig::default(),
            plateau: PlateauConfig::default(),
            pitch_scale: std::f64::consts::FRAC_PI_2,
            yaw_scale: std::f64::consts::PI,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory; synthetic data is generated when absent.
    pub root: Option<String>,
    pub synthetic_samples: usize,
    pub synthetic_subjects: usize,
    /// Side of the rendered synthetic source images.
    pub source_size: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Eye crop padding as a fraction of the corner span, per side.
    pub eye_margin: f64,
    /// Mean-luma threshold below which a sample counts as low-illumination.
    pub low_light_threshold: f64,
    /// Fraction of synthetic images rendered very dark.
    pub dark_fraction: f64,
    /// Maximum |pitch| and |yaw| of synthetic labels, in degrees.
    pub max_pitch_deg: f64,
    pub max_yaw_deg: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            synthetic_samples: 2000,
            synthetic_subjects: 15,
            source_size: 96,
            val_fraction: 0.1,
            test_fraction: 0.1,
            eye_margin: 0.4,
            low_light_threshold: 0.12,
            dark_fraction: 0.05,
            max_pitch_deg: 30.0,
            max_yaw_deg: 45.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub architecture: ArchitectureConfig,
    pub ablation: AblationFlags,
    pub loss: WeightingConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub augmentation: AugmentationConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Resolved dimensions of one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub global: usize,
    pub local: usize,
    /// Width of the concatenated encoder representation y.
    pub representation: usize,
    pub projection_out: usize,
    pub prediction_out: usize,
    pub face_feature: usize,
    pub bottleneck: usize,
    /// Width of F_T.
    pub fused: usize,
    pub head_out: usize,
}

impl RunConfig {
    /// Toy backbone at 112×112 with full-width heads.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            deterministic: true,
            architecture: ArchitectureConfig::default(),
            ablation: AblationFlags::default(),
            loss: WeightingConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            augmentation: AugmentationConfig::extended((112, 112)),
            data: DataConfig::default(),
        }
    }

    /// Full-size dimensions: large backbone at 224×224.
    pub fn large() -> Self {
        let mut cfg = Self::toy();
        cfg.architecture.face_size = 224;
        cfg.architecture.backbone = BackboneConfig::large();
        cfg.augmentation = AugmentationConfig::extended((224, 224));
        cfg.data.source_size = 224;
        cfg.deterministic = false;
        cfg
    }

    /// Narrow variant sized for single-core CPU training in minutes.
    pub fn desk() -> Self {
        let mut cfg = Self::toy();
        let a = &mut cfg.architecture;
        a.face_size = 32;
        a.backbone.channels = vec![16, 32, 64, 64];
        a.local.channels = vec![8, 16, 32];
        a.projection = vec![128, 128, 64];
        a.prediction = vec![64, 128, 64];
        a.bottleneck = BottleneckConfig { channels: vec![8, 16, 32], stride: 2, out_dim: 64 };
        a.face_feature_dim = 64;
        a.head.hidden = vec![128, 64];
        cfg.augmentation = AugmentationConfig::extended((32, 32));
        for s in &mut cfg.augmentation.transforms {
            if let crate::augment::Transform::Cutout { size } = &mut s.transform {
                *size = 8;
            }
        }
        cfg.pretrain.batch_size = 32;
        cfg.pretrain.epochs = 5;
        cfg.pretrain.lr = 0.03;
        cfg.finetune.epochs = 20;
        cfg.finetune.early_stop.enabled = false;
        cfg.finetune.plateau.patience = 3;
        cfg.data.source_size = 64;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "large" => Ok(Self::large()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(vec![format!(
                "unknown preset {other:?} (expected toy, desk or large)"
            )])),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    /// Applies a dotted-path override such as `finetune.lr=1e-3`. The value
    /// is parsed as a TOML literal, falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(vec![format!("override {assignment:?} is not key=value")]))?;
        let key = key.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(vec![format!("override {key}: {part} is not inside a section")]))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![format!("override {key}: {e}")]))?;
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        let a = &self.architecture;
        let f = &self.ablation;
        let global = if f.use_global { a.backbone.feature_dim() } else { 0 };
        let local = if f.local_active() { a.local.out_dim } else { 0 };
        let bottleneck = if f.use_pmn { a.bottleneck.out_dim } else { 0 };
        Dims {
            global,
            local,
            representation: global + 2 * local,
            projection_out: a.projection.last().copied().unwrap_or(0),
            prediction_out: a.prediction.last().copied().unwrap_or(0),
            face_feature: a.face_feature_dim,
            bottleneck,
            fused: a.face_feature_dim + 2 * bottleneck,
            head_out: match a.task {
                Task::Gaze => 2,
                Task::Fer { classes } => classes,
            },
        }
    }

    /// Every violated constraint, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let a = &self.architecture;
        let f = &self.ablation;
        let d = self.dims();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                v.push(msg)
            }
        };
        need(a.face_size >= 16, format!("architecture.face_size {} must be at least 16", a.face_size));
        need(!a.backbone.channels.is_empty(), "architecture.backbone.channels must not be empty".into());
        need(a.backbone.channels.iter().all(|&c| c > 0), "architecture.backbone.channels must be positive".into());
        let blocks = a.backbone.channels.len() as u32;
        need(
            a.face_size >> blocks >= 1,
            format!("architecture.face_size {} too small for {blocks} stride-2 blocks", a.face_size),
        );
        need(a.local.channels.len() == 3, "architecture.local.channels must list three conv widths".into());
        need(a.local.out_dim > 0, "architecture.local.out_dim must be positive".into());
        need(a.local.stride >= 1 && a.local.kernel >= 1, "architecture.local kernel and stride must be positive".into());
        need(a.attention_heads > 0, "architecture.attention_heads must be positive".into());
        if a.attention_heads > 0 && f.attention_active() {
            if f.use_global {
                need(
                    a.backbone.feature_dim().is_multiple_of(a.attention_heads),
                    format!(
                        "attention heads {} do not divide the global feature width {}",
                        a.attention_heads,
                        a.backbone.feature_dim()
                    ),
                );
            }
            if f.local_active() {
                let c = a.local.channels.last().copied().unwrap_or(0);
                need(
                    c % a.attention_heads == 0,
                    format!("attention heads {} do not divide the local feature width {c}", a.attention_heads),
                );
            }
        }
        need(a.projection.len() == 3, "architecture.projection must list (hidden-in, hidden, out)".into());
        need(a.prediction.len() == 3, "architecture.prediction must list (in, hidden, out)".into());
        need(
            a.prediction.first() == a.projection.last(),
            format!(
                "prediction input {:?} must equal projection output {:?}",
                a.prediction.first(),
                a.projection.last()
            ),
        );
        need(
            a.prediction.last() == a.projection.last(),
            "prediction output must equal projection output".into(),
        );
        need(a.projection.iter().chain(&a.prediction).all(|&c| c > 0), "head widths must be positive".into());
        need(
            d.representation > 0,
            "ablation flags leave no encoder branch (need use_global, or use_local with use_mbyol_mods)".into(),
        );
        need(a.bottleneck.channels.len() == 3, "architecture.bottleneck.channels must list three conv widths".into());
        need(a.bottleneck.out_dim > 0 && a.bottleneck.stride >= 1, "architecture.bottleneck dims must be positive".into());
        need(a.face_feature_dim > 0, "architecture.face_feature_dim must be positive".into());
        if let Some(expected) = a.head.input_dim {
            need(
                expected == d.fused,
                format!("architecture.head.input_dim {expected} does not match the fused feature width {}", d.fused),
            );
        }
        need(a.head.hidden.iter().all(|&h| h > 0), "architecture.head.hidden widths must be positive".into());
        need((0.0..1.0).contains(&a.head.dropout), "architecture.head.dropout must lie in [0, 1)".into());
        if let Task::Fer { classes } = a.task {
            need(classes >= 2, format!("fer task needs at least 2 classes, got {classes}"));
        }
        let l = &self.loss;
        need(l.omega_max >= 0.0, "loss.omega_max must be non-negative".into());
        need(l.sst_epsilon >= 0.0, "loss.sst_epsilon must be non-negative".into());
        let p = &self.pretrain;
        need(p.lr > 0.0, "pretrain.lr must be positive".into());
        need((0.0..1.0).contains(&p.momentum), "pretrain.momentum must lie in [0, 1)".into());
        need(p.batch_size >= 2, "pretrain.batch_size must be at least 2".into());
        need(p.tau_base > 0.0 && p.tau_base < 1.0, "pretrain.tau_base must lie in (0, 1)".into());
        let t = &self.finetune;
        need(t.lr > 0.0, "finetune.lr must be positive".into());
        need(t.batch_size >= 2, "finetune.batch_size must be at least 2 (explained variance needs two samples)".into());
        need(t.epochs >= 1, "finetune.epochs must be at least 1".into());
        need(
            t.plateau.factor > 0.0 && t.plateau.factor < 1.0,
            "finetune.plateau.factor must lie in (0, 1)".into(),
        );
        need(t.pitch_scale > 0.0 && t.yaw_scale > 0.0, "finetune label scales must be positive".into());
        need(t.early_stop.min_delta >= 0.0, "finetune.early_stop.min_delta must be non-negative".into());
        let dc = &self.data;
        need(dc.synthetic_samples >= 1, "data.synthetic_samples must be at least 1".into());
        need(dc.synthetic_subjects >= 1, "data.synthetic_subjects must be at least 1".into());
        need(dc.source_size >= 32, "data.source_size must be at least 32".into());
        need(
            dc.val_fraction >= 0.0 && dc.test_fraction >= 0.0 && dc.val_fraction + dc.test_fraction < 1.0,
            "data.val_fraction + data.test_fraction must lie in [0, 1)".into(),
        );
        need(dc.eye_margin >= 0.0, "data.eye_margin must be non-negative".into());
        need((0.0..=1.0).contains(&dc.dark_fraction), "data.dark_fraction must lie in [0, 1]".into());
        need(
            dc.max_pitch_deg > 0.0 && dc.max_pitch_deg < 90.0 && dc.max_yaw_deg > 0.0 && dc.max_yaw_deg <= 180.0,
            "data label ranges must lie within the canonical angle ranges".into(),
        );
        let size = (a.face_size, a.face_size);
        need(
            self.augmentation.output_size == size,
            format!(
                "augmentation.output_size {:?} must equal the face input size {size:?}",
                self.augmentation.output_size
            ),
        );
        v.extend(self.augmentation.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Additional checks that depend on what the dataset provides.
    pub fn validate_for_data(&self, has_eye_landmarks: bool) -> Result<()> {
        let mut v = self.violations();
        if !has_eye_landmarks {
            if self.ablation.use_pmn {
                v.push("ablation.use_pmn requires eye patches but the dataset has no eye landmarks".into());
            }
            if self.ablation.local_active() {
                v.push("ablation.use_local requires eye patches but the dataset has no eye landmarks".into());
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}
