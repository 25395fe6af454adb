//! Fine-tuning network: SSL encoder plus the patch-module bottlenecks, feature
//! fusion, and the gaze / expression heads.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Task};
use crate::error::{Error, Result};
use crate::geometry::GazeAngles;
use crate::networks::{ConvBlock, Encoder, EncoderInput};
use crate::nn::layers::dropout;
use crate::nn::{BatchNorm, Init, Linear, Mode, ParamStore};

/// Three conv blocks (k3, p1), global average pool, FC.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    blocks: Vec<ConvBlock>,
    fc: Linear,
}

impl Bottleneck {
    pub fn new(init: &mut Init<'_>, channels: &[usize], stride: usize, out_dim: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(channels.len());
        let mut in_c = 3;
        for (i, &c) in channels.iter().enumerate() {
            blocks.push(ConvBlock::new(&mut init.sub(&format!("block{i}")), in_c, c, 3, stride)?);
            in_c = c;
        }
        Ok(Self { blocks, fc: Linear::new(&mut init.sub("fc"), in_c, out_dim)? })
    }

    pub fn out_dim(&self) -> usize {
        self.fc.out_dim()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match x.dims() {
            [_, 3, _, _] => {}
            dims => return Err(Error::contract(format!("bottleneck expects (N, 3, H, W), got {dims:?}"))),
        }
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h, mode)?;
        }
        self.fc.forward(&h.flatten_from(2)?.mean(2)?)
    }
}

/// F_e: elementwise mean of the two eye features.
pub fn fuse_eyes(left: &Tensor, right: &Tensor) -> Result<Tensor> {
    if left.dims() != right.dims() {
        return Err(Error::contract(format!(
            "eye features differ in shape: {:?} vs {:?}",
            left.dims(),
            right.dims()
        )));
    }
    Ok(((left + right)? * 0.5)?)
}

fn concat(a: &Tensor, b: &Tensor, what: &str) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dims()[0] != b.dims()[0] {
        return Err(Error::contract(format!("{what}: cannot concatenate {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok(Tensor::cat(&[a, b], 1)?)
}

/// F_F = F_f ⊕ F_fb.
pub fn fuse_face(f_f: &Tensor, f_fb: &Tensor) -> Result<Tensor> {
    concat(f_f, f_fb, "fuse_face")
}

/// F_T = F_F ⊕ F_e.
pub fn assemble(f_face: &Tensor, f_e: &Tensor) -> Result<Tensor> {
    concat(f_face, f_e, "assemble")
}

/// Intermediate vectors of one forward pass.
#[derive(Debug, Clone)]
pub struct FusedFeatures {
    pub f_el: Option<Tensor>,
    pub f_er: Option<Tensor>,
    pub f_e: Option<Tensor>,
    pub f_f: Tensor,
    pub f_fb: Option<Tensor>,
    pub f_face: Tensor,
    pub f_t: Tensor,
}

/// in → hidden₁ (+BN) → … → out, ReLU between, optional dropout and tanh.
#[derive(Debug, Clone)]
pub struct Head {
    layers: Vec<Linear>,
    bn: BatchNorm,
    dropout: f64,
    tanh: bool,
}

impl Head {
    pub fn new(init: &mut Init<'_>, in_dim: usize, hidden: &[usize], out_dim: usize, dropout: f64, tanh: bool) -> Result<Self> {
        let mut widths = vec![in_dim];
        widths.extend_from_slice(hidden);
        widths.push(out_dim);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut init.sub(&format!("fc{i}")), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        let bn = BatchNorm::new(&mut init.sub("bn"), widths[1])?;
        Ok(Self { layers, bn, dropout, tanh })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i == last {
                break;
            }
            if i == 0 && last > 0 {
                h = self.bn.forward(&h, mode)?;
            }
            h = h.relu()?;
            if mode == Mode::Train && self.dropout > 0.0 {
                h = dropout(&h, self.dropout, rng)?;
            }
        }
        if self.tanh {
            h = h.tanh()?;
        }
        Ok(h)
    }
}

/// Maps labels into the bounded head's (−1, 1)² range and back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelScale {
    pub pitch: f64,
    pub yaw: f64,
}

impl LabelScale {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self { pitch: cfg.finetune.pitch_scale, yaw: cfg.finetune.yaw_scale }
    }

    pub fn normalize(&self, a: GazeAngles) -> [f64; 2] {
        [a.pitch / self.pitch, a.yaw / self.yaw]
    }

    pub fn denormalize(&self, v: [f64; 2]) -> GazeAngles {
        GazeAngles { pitch: v[0] * self.pitch, yaw: v[1] * self.yaw }
    }
}

/// Encoder + face projection + optional bottlenecks + head.
#[derive(Debug, Clone)]
pub struct GazeModel {
    pub encoder: Encoder,
    face_proj: Linear,
    face_bottleneck: Option<Bottleneck>,
    left_bottleneck: Option<Bottleneck>,
    right_bottleneck: Option<Bottleneck>,
    head: Head,
    task: Task,
    freeze_backbone: bool,
}

impl GazeModel {
    pub fn new(init: &mut Init<'_>, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let a = &cfg.architecture;
        let encoder = Encoder::new(&mut init.sub("encoder"), cfg)?;
        let face_proj = Linear::new(&mut init.sub("face_proj"), encoder.out_dim(), a.face_feature_dim)?;
        let bottleneck = |init: &mut Init<'_>, name: &str| -> Result<Option<Bottleneck>> {
            if cfg.ablation.use_pmn {
                let b = &a.bottleneck;
                Ok(Some(Bottleneck::new(&mut init.sub(name), &b.channels, b.stride, b.out_dim)?))
            } else {
                Ok(None)
            }
        };
        let face_bottleneck = bottleneck(init, "pmn.face")?;
        let left_bottleneck = bottleneck(init, "pmn.left")?;
        let right_bottleneck = bottleneck(init, "pmn.right")?;
        let dims = cfg.dims();
        let bounded = matches!(a.task, Task::Gaze) && a.head.bounded;
        let head = Head::new(
            &mut init.sub("head"),
            dims.fused,
            &a.head.hidden,
            dims.head_out,
            if bounded { a.head.dropout } else { 0.0 },
            bounded,
        )?;
        Ok(Self {
            encoder,
            face_proj,
            face_bottleneck,
            left_bottleneck,
            right_bottleneck,
            head,
            task: a.task,
            freeze_backbone: cfg.ablation.freeze_backbone,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn uses_patches(&self) -> bool {
        self.encoder.uses_patches() || self.left_bottleneck.is_some()
    }

    pub fn features(&self, x: &EncoderInput, mode: Mode) -> Result<FusedFeatures> {
        let enc_mode = if self.freeze_backbone { Mode::Eval } else { mode };
        let mut y = self.encoder.forward(&x.face, &x.left, &x.right, enc_mode)?;
        if self.freeze_backbone {
            y = y.detach();
        }
        let f_f = self.face_proj.forward(&y)?;
        match (&self.face_bottleneck, &self.left_bottleneck, &self.right_bottleneck) {
            (Some(bf), Some(bl), Some(br)) => {
                let f_fb = bf.forward(&x.face, mode)?;
                let f_el = bl.forward(&x.left, mode)?;
                let f_er = br.forward(&x.right, mode)?;
                let f_e = fuse_eyes(&f_el, &f_er)?;
                let f_face = fuse_face(&f_f, &f_fb)?;
                let f_t = assemble(&f_face, &f_e)?;
                Ok(FusedFeatures {
                    f_el: Some(f_el),
                    f_er: Some(f_er),
                    f_e: Some(f_e),
                    f_f,
                    f_fb: Some(f_fb),
                    f_face,
                    f_t,
                })
            }
            _ => Ok(FusedFeatures {
                f_el: None,
                f_er: None,
                f_e: None,
                f_fb: None,
                f_face: f_f.clone(),
                f_t: f_f.clone(),
                f_f,
            }),
        }
    }

    /// (N, 2) normalized gaze or (N, C) logits.
    pub fn forward(&self, x: &EncoderInput, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let f = self.features(x, mode)?;
        self.head.forward(&f.f_t, mode, rng)
    }
}

/// A model together with the store owning its parameters.
pub struct ModelBundle {
    pub model: GazeModel,
    pub params: ParamStore,
}

impl ModelBundle {
    pub fn new(cfg: &RunConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut params = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = GazeModel::new(&mut Init::new(&mut params, &mut rng), cfg)?;
        Ok(Self { model, params })
    }

    /// Variables the fine-tuning optimizer updates.
    pub fn optimized_vars(&self) -> Vec<candle_core::Var> {
        let frozen = self.model.freeze_backbone;
        self.params
            .named_trainable()
            .filter(|(n, _)| !(frozen && n.starts_with("encoder.")))
            .map(|(_, v)| v.clone())
            .collect()
    }
}
