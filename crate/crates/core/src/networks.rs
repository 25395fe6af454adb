//! The self-supervised encoder, its projection/prediction heads, and the
//! online/target pair coupled by an exponential moving average.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, EYE_PATCH_SIZE};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{BatchNorm, Conv2d, Init, Linear, Mode, MultiHeadSelfAttention, ParamStore};
use crate::nn::layers::to_tokens;

/// Stacks images into an (N, C, H, W) tensor.
pub fn batch_tensor(images: &[&Image], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::contract("empty image batch"))?;
    let (c, h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.shape() != (c, h, w) {
            return Err(Error::contract(format!(
                "mixed image shapes in batch: {:?} vs {:?}",
                img.shape(),
                (c, h, w)
            )));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

fn expect_input(x: &Tensor, c: usize, h: usize, w: usize, what: &str) -> Result<()> {
    match x.dims() {
        [_, cc, hh, ww] if (*cc, *hh, *ww) == (c, h, w) => Ok(()),
        dims => Err(Error::contract(format!("{what} expects (N, {c}, {h}, {w}), got {dims:?}"))),
    }
}

/// conv → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBlock {
    pub fn new(init: &mut Init<'_>, in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut init.sub("conv"), in_c, out_c, kernel, stride, kernel / 2)?,
            bn: BatchNorm::new(&mut init.sub("bn"), out_c)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu()?)
    }
}

fn conv_stack(
    init: &mut Init<'_>,
    channels: &[usize],
    kernel: usize,
    stride: usize,
) -> Result<Vec<ConvBlock>> {
    let mut blocks = Vec::with_capacity(channels.len());
    let mut in_c = 3;
    for (i, &c) in channels.iter().enumerate() {
        blocks.push(ConvBlock::new(&mut init.sub(&format!("block{i}")), in_c, c, kernel, stride)?);
        in_c = c;
    }
    Ok(blocks)
}

/// Optional spatial self-attention (with residual) followed by average pooling.
fn attend_and_pool(h: &Tensor, attn: Option<&MultiHeadSelfAttention>) -> Result<Tensor> {
    match attn {
        Some(a) => {
            let tokens = to_tokens(h)?;
            let mixed = (&tokens + a.forward(&tokens)?)?;
            Ok(mixed.mean(1)?)
        }
        None => Ok(h.flatten_from(2)?.mean(D::Minus1)?),
    }
}

/// Eye branch: three conv blocks, spatial attention, pooling, FC to 52.
#[derive(Debug, Clone)]
pub struct LocalBranch {
    blocks: Vec<ConvBlock>,
    attn: Option<MultiHeadSelfAttention>,
    fc: Linear,
}

impl LocalBranch {
    pub fn new(init: &mut Init<'_>, cfg: &RunConfig) -> Result<Self> {
        let l = &cfg.architecture.local;
        let blocks = conv_stack(init, &l.channels, l.kernel, l.stride)?;
        let c = *l.channels.last().unwrap();
        let attn = if cfg.ablation.attention_active() {
            Some(MultiHeadSelfAttention::new(&mut init.sub("attn"), c, cfg.architecture.attention_heads)?)
        } else {
            None
        };
        Ok(Self { blocks, attn, fc: Linear::new(&mut init.sub("fc"), c, l.out_dim)? })
    }

    pub fn out_dim(&self) -> usize {
        self.fc.out_dim()
    }

    pub fn forward(&self, patch: &Tensor, mode: Mode) -> Result<Tensor> {
        expect_input(patch, 3, EYE_PATCH_SIZE.0, EYE_PATCH_SIZE.1, "local branch")?;
        let mut h = patch.clone();
        for b in &self.blocks {
            h = b.forward(&h, mode)?;
        }
        self.fc.forward(&attend_and_pool(&h, self.attn.as_ref())?)
    }
}

/// Face branch: stride-2 conv backbone, spatial attention, pooling.
#[derive(Debug, Clone)]
pub struct GlobalBranch {
    blocks: Vec<ConvBlock>,
    attn: Option<MultiHeadSelfAttention>,
    size: usize,
    dim: usize,
}

impl GlobalBranch {
    pub fn new(init: &mut Init<'_>, cfg: &RunConfig) -> Result<Self> {
        let a = &cfg.architecture;
        let blocks = conv_stack(init, &a.backbone.channels, a.backbone.kernel, 2)?;
        let dim = a.backbone.feature_dim();
        let attn = if cfg.ablation.attention_active() {
            Some(MultiHeadSelfAttention::new(&mut init.sub("attn"), dim, a.attention_heads)?)
        } else {
            None
        };
        Ok(Self { blocks, attn, size: a.face_size, dim })
    }

    pub fn out_dim(&self) -> usize {
        self.dim
    }

    pub fn forward(&self, face: &Tensor, mode: Mode) -> Result<Tensor> {
        expect_input(face, 3, self.size, self.size, "global branch")?;
        let mut h = face.clone();
        for b in &self.blocks {
            h = b.forward(&h, mode)?;
        }
        attend_and_pool(&h, self.attn.as_ref())
    }
}

/// y = global ⊕ left ⊕ right, with disabled branches omitted.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub global: Option<GlobalBranch>,
    pub left: Option<LocalBranch>,
    pub right: Option<LocalBranch>,
}

impl Encoder {
    pub fn new(init: &mut Init<'_>, cfg: &RunConfig) -> Result<Self> {
        let global = if cfg.ablation.use_global {
            Some(GlobalBranch::new(&mut init.sub("global"), cfg)?)
        } else {
            None
        };
        let (left, right) = if cfg.ablation.local_active() {
            (
                Some(LocalBranch::new(&mut init.sub("left"), cfg)?),
                Some(LocalBranch::new(&mut init.sub("right"), cfg)?),
            )
        } else {
            (None, None)
        };
        if global.is_none() && left.is_none() {
            return Err(Error::Config(vec!["encoder has no active branch".into()]));
        }
        Ok(Self { global, left, right })
    }

    pub fn global_dim(&self) -> usize {
        self.global.as_ref().map_or(0, |g| g.out_dim())
    }

    pub fn local_dim(&self) -> usize {
        self.left.as_ref().map_or(0, |l| l.out_dim())
    }

    pub fn out_dim(&self) -> usize {
        self.global_dim() + 2 * self.local_dim()
    }

    pub fn uses_patches(&self) -> bool {
        self.left.is_some()
    }

    pub fn forward(&self, face: &Tensor, left: &Tensor, right: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut parts = Vec::with_capacity(3);
        if let Some(g) = &self.global {
            parts.push(g.forward(face, mode)?);
        }
        if let (Some(l), Some(r)) = (&self.left, &self.right) {
            parts.push(l.forward(left, mode)?);
            parts.push(r.forward(right, mode)?);
        }
        Ok(Tensor::cat(&parts, 1)?)
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, widths: &[usize]) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut init.sub(&format!("fc{i}")), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.relu()?;
            }
            h = l.forward(&h)?;
        }
        Ok(h)
    }
}

/// Projection head: an input adapter to the configured hidden-in width
/// (only when the representation width differs) followed by a 2-layer MLP.
pub fn projection_widths(cfg: &RunConfig, in_dim: usize) -> Vec<usize> {
    let p = &cfg.architecture.projection;
    let mut widths = vec![in_dim];
    if in_dim != p[0] {
        widths.push(p[0]);
    }
    widths.extend_from_slice(&p[1..]);
    widths
}

/// Online side: encoder, projection, prediction.
#[derive(Debug, Clone)]
pub struct OnlineNetwork {
    pub encoder: Encoder,
    pub projection: Mlp,
    pub prediction: Mlp,
}

/// Target side: encoder and projection only.
#[derive(Debug, Clone)]
pub struct TargetNetwork {
    pub encoder: Encoder,
    pub projection: Mlp,
}

/// One batch of encoder inputs.
#[derive(Debug, Clone)]
pub struct EncoderInput {
    pub face: Tensor,
    pub left: Tensor,
    pub right: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub y: Tensor,
    pub z: Tensor,
    /// Absent on the target side.
    pub q: Option<Tensor>,
}

impl OnlineNetwork {
    pub fn forward(&self, x: &EncoderInput, mode: Mode) -> Result<EncoderOutput> {
        let y = self.encoder.forward(&x.face, &x.left, &x.right, mode)?;
        let z = self.projection.forward(&y)?;
        let q = self.prediction.forward(&z)?;
        Ok(EncoderOutput { y, z, q: Some(q) })
    }
}

impl TargetNetwork {
    /// Outputs are detached: the target side never receives gradient.
    pub fn forward(&self, x: &EncoderInput, mode: Mode) -> Result<EncoderOutput> {
        let y = self.encoder.forward(&x.face, &x.left, &x.right, mode)?.detach();
        let z = self.projection.forward(&y)?.detach();
        Ok(EncoderOutput { y, z, q: None })
    }
}

/// τ(k) = 1 − (1 − τ_base)·(cos(πk/K) + 1)/2.
pub fn tau_schedule(k: u64, total: u64, tau_base: f64) -> Result<f64> {
    if k > total {
        return Err(Error::contract(format!("step {k} exceeds total steps {total}")));
    }
    if !(0.0..=1.0).contains(&tau_base) {
        return Err(Error::contract(format!("tau_base {tau_base} outside [0, 1]")));
    }
    if total == 0 {
        return Ok(1.0);
    }
    let c = (std::f64::consts::PI * k as f64 / total as f64).cos();
    Ok(1.0 - (1.0 - tau_base) * (c + 1.0) / 2.0)
}

/// ξ ← τξ + (1 − τ)θ for every trainable target entry, matched by name.
pub fn ema_update(target: &ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::contract(format!("tau {tau} outside [0, 1]")));
    }
    for (name, xi) in target.named_trainable() {
        let theta = online
            .get(name)
            .ok_or_else(|| Error::contract(format!("online network has no parameter {name}")))?;
        if theta.dims() != xi.dims() {
            return Err(Error::contract(format!(
                "parameter {name}: target shape {:?}, online shape {:?}",
                xi.dims(),
                theta.dims()
            )));
        }
        let updated = if tau == 1.0 {
            continue;
        } else if tau == 0.0 {
            theta.as_tensor().copy()?
        } else {
            ((xi.as_tensor() * tau)? + (theta.as_tensor() * (1.0 - tau))?)?
        };
        xi.set(&updated)?;
    }
    Ok(())
}

/// Online and target networks with their parameter stores and EMA schedule.
pub struct NetworkPair {
    pub online: OnlineNetwork,
    pub target: TargetNetwork,
    pub online_params: ParamStore,
    pub target_params: ParamStore,
    pub tau_base: f64,
    pub step: u64,
    pub total_steps: u64,
}

impl NetworkPair {
    /// Builds both sides from `seed`; the target starts as an exact copy.
    pub fn new(cfg: &RunConfig, seed: u64, dtype: DType, total_steps: u64) -> Result<Self> {
        let mut online_params = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = {
            let mut init = Init::new(&mut online_params, &mut rng);
            let encoder = Encoder::new(&mut init.sub("encoder"), cfg)?;
            let projection = Mlp::new(&mut init.sub("projection"), &projection_widths(cfg, encoder.out_dim()))?;
            let prediction = Mlp::new(&mut init.sub("prediction"), &cfg.architecture.prediction)?;
            OnlineNetwork { encoder, projection, prediction }
        };
        let mut target_params = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = {
            let mut init = Init::new(&mut target_params, &mut rng);
            let encoder = Encoder::new(&mut init.sub("encoder"), cfg)?;
            let projection = Mlp::new(&mut init.sub("projection"), &projection_widths(cfg, encoder.out_dim()))?;
            TargetNetwork { encoder, projection }
        };
        target_params.copy_from(&online_params)?;
        Ok(Self {
            online,
            target,
            online_params,
            target_params,
            tau_base: cfg.pretrain.tau_base,
            step: 0,
            total_steps,
        })
    }

    pub fn current_tau(&self) -> Result<f64> {
        tau_schedule(self.step, self.total_steps, self.tau_base)
    }

    /// Applies the EMA with the scheduled τ for the next step and advances the counter.
    pub fn momentum_step(&mut self) -> Result<f64> {
        let next = (self.step + 1).min(self.total_steps);
        let tau = tau_schedule(next, self.total_steps, self.tau_base)?;
        ema_update(&self.target_params, &self.online_params, tau)?;
        self.step = next;
        Ok(tau)
    }

    /// Online encoder tensors, named `encoder.*`.
    pub fn encoder_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        Ok(self
            .online_params
            .snapshot()?
            .into_iter()
            .filter(|(n, _)| n.starts_with("encoder."))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn micro() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.architecture.face_size = 16;
        cfg.architecture.backbone.channels = vec![8, 8];
        cfg.architecture.local.channels = vec![4, 4, 8];
        cfg.architecture.projection = vec![16, 16, 8];
        cfg.architecture.prediction = vec![8, 16, 8];
        cfg
    }

    fn inputs(n: usize, face: usize, dtype: DType) -> EncoderInput {
        let dev = Device::Cpu;
        EncoderInput {
            face: Tensor::rand(0f32, 1f32, (n, 3, face, face), &dev).unwrap().to_dtype(dtype).unwrap(),
            left: Tensor::rand(0f32, 1f32, (n, 3, 36, 60), &dev).unwrap().to_dtype(dtype).unwrap(),
            right: Tensor::rand(0f32, 1f32, (n, 3, 36, 60), &dev).unwrap().to_dtype(dtype).unwrap(),
        }
    }

    #[test]
    fn tau_schedule_endpoints_and_midpoint() {
        assert_eq!(tau_schedule(0, 100, 0.996).unwrap(), 0.996);
        assert_eq!(tau_schedule(100, 100, 0.996).unwrap(), 1.0);
        assert!((tau_schedule(50, 100, 0.996).unwrap() - 0.998).abs() < 1e-12);
        assert!(tau_schedule(101, 100, 0.996).is_err());
        let mut prev = 0.0;
        for k in 0..=100 {
            let t = tau_schedule(k, 100, 0.996).unwrap();
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    fn ema_identities() {
        let cfg = micro();
        let pair = NetworkPair::new(&cfg, 1, DType::F64, 10).unwrap();
        for (_, v) in pair.online_params.named_trainable() {
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        for (_, v) in pair.target_params.named_trainable() {
            v.set(&v.as_tensor().ones_like().unwrap()).unwrap();
        }
        ema_update(&pair.target_params, &pair.online_params, 1.0).unwrap();
        assert!(pair.target_params.flat_values().unwrap().iter().all(|&x| x == 1.0 || x == 0.0));
        ema_update(&pair.target_params, &pair.online_params, 0.996).unwrap();
        for (_, v) in pair.target_params.named_trainable() {
            for x in crate::nn::layers::tensor_to_f64(v.as_tensor()).unwrap() {
                assert!((x - 0.996).abs() < 1e-15);
            }
        }
        ema_update(&pair.target_params, &pair.online_params, 0.0).unwrap();
        for (_, v) in pair.target_params.named_trainable() {
            assert!(crate::nn::layers::tensor_to_f64(v.as_tensor()).unwrap().iter().all(|&x| x == 0.0));
        }
        assert!(ema_update(&pair.target_params, &pair.online_params, 1.5).is_err());
    }

    #[test]
    fn target_starts_as_copy_without_prediction_head() {
        let pair = NetworkPair::new(&micro(), 3, DType::F32, 10).unwrap();
        for (name, v, _) in pair.target_params.named() {
            let o = pair.online_params.get(name).unwrap();
            assert_eq!(
                crate::nn::layers::tensor_to_f64(v.as_tensor()).unwrap(),
                crate::nn::layers::tensor_to_f64(o.as_tensor()).unwrap()
            );
        }
        assert!(pair.target_params.named().all(|(n, _, _)| !n.starts_with("prediction")));
    }

    #[test]
    fn encoder_layout_and_shapes() {
        let cfg = RunConfig::toy();
        let pair = NetworkPair::new(&cfg, 0, DType::F32, 1).unwrap();
        let x = inputs(2, 112, DType::F32);
        let out = pair.online.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out.y.dims(), &[2, 360]);
        assert_eq!(out.z.dims(), &[2, 1024]);
        assert_eq!(out.q.unwrap().dims(), &[2, 1024]);
        let enc = &pair.online.encoder;
        let g = enc.global.as_ref().unwrap().forward(&x.face, Mode::Eval).unwrap();
        let l = enc.left.as_ref().unwrap().forward(&x.left, Mode::Eval).unwrap();
        let r = enc.right.as_ref().unwrap().forward(&x.right, Mode::Eval).unwrap();
        let y = crate::nn::layers::tensor_to_f64(&out.y).unwrap();
        let expect: Vec<f64> = (0..2)
            .flat_map(|i| {
                let row = |t: &Tensor| crate::nn::layers::tensor_to_f64(&t.get(i).unwrap()).unwrap();
                [row(&g), row(&l), row(&r)].concat()
            })
            .collect();
        assert_eq!(y, expect);
    }

    #[test]
    fn local_branch_rejects_wrong_patch_shape() {
        let pair = NetworkPair::new(&micro(), 0, DType::F32, 1).unwrap();
        let bad = Tensor::zeros((1, 3, 30, 60), DType::F32, &Device::Cpu).unwrap();
        let enc = &pair.online.encoder;
        assert!(matches!(enc.left.as_ref().unwrap().forward(&bad, Mode::Eval), Err(Error::Contract(_))));
        let zeros = Tensor::zeros((4, 3, 36, 60), DType::F32, &Device::Cpu).unwrap();
        let out = enc.left.as_ref().unwrap().forward(&zeros, Mode::Eval).unwrap();
        assert_eq!(out.dims(), &[4, 52]);
        assert!(crate::nn::layers::tensor_to_f64(&out).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let pair = NetworkPair::new(&micro(), 5, DType::F64, 1).unwrap();
        let x = inputs(3, 16, DType::F64);
        let a = pair.online.forward(&x, Mode::Eval).unwrap();
        let b = pair.online.forward(&x, Mode::Eval).unwrap();
        assert_eq!(
            crate::nn::layers::tensor_to_f64(&a.q.unwrap()).unwrap(),
            crate::nn::layers::tensor_to_f64(&b.q.unwrap()).unwrap()
        );
    }

    #[test]
    fn plain_byol_drops_local_branches_and_attention() {
        let mut cfg = micro();
        cfg.ablation.use_mbyol_mods = false;
        let pair = NetworkPair::new(&cfg, 0, DType::F32, 1).unwrap();
        assert!(!pair.online.encoder.uses_patches());
        assert!(pair.online_params.named().all(|(n, _, _)| !n.contains("attn")));
        assert_eq!(pair.online.encoder.out_dim(), 8);
    }
}
