use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::conv::conv2d;
use super::params::Init;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, dropout active.
    Train,
    /// Running statistics, no dropout; forwards are pure.
    Eval,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Init<'_>,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_c * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: init.uniform("weight", &[out_c, in_c, kernel, kernel], bound)?,
            bias: init.uniform("bias", &[out_c], bound)?,
            stride,
            pad,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.dims()[2];
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.pad)?;
        let c = self.out_channels();
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: init.uniform("weight", &[out_dim, in_dim], bound)?,
            bias: init.uniform("bias", &[out_dim], bound)?,
        })
    }

    /// Glorot-uniform weights and zero bias, as used for attention projections.
    pub fn xavier(init: &mut Init<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Ok(Self {
            weight: init.uniform("weight", &[out_dim, in_dim], bound)?,
            bias: init.constant("bias", &[out_dim], 0.0, true)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Accepts (N, in) or (B, T, in).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().unwrap_or(&0);
        if in_dim != self.in_dim() {
            return Err(Error::contract(format!(
                "linear layer expects input dim {}, got {in_dim}",
                self.in_dim()
            )));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x
            .reshape((rows, in_dim))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// Batch normalization over the channel axis of (N, C) or (N, C, H, W) input.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(init: &mut Init<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant("gamma", &[channels], 1.0, true)?,
            beta: init.constant("beta", &[channels], 0.0, true)?,
            running_mean: init.constant("running_mean", &[channels], 0.0, false)?,
            running_var: init.constant("running_var", &[channels], 1.0, false)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let c = self.gamma.dims()[0];
        if dims.len() < 2 || dims[1] != c {
            return Err(Error::contract(format!(
                "batch norm over {c} channels got input {dims:?}"
            )));
        }
        let mut bshape = vec![1usize; dims.len()];
        bshape[1] = c;
        let (mean, var) = match mode {
            Mode::Train => {
                // (C, N·H·W) view for the per-channel statistics.
                let per_channel = x.transpose(0, 1)?.contiguous()?.reshape((c, ()))?;
                let count = per_channel.dims()[1];
                let mean = per_channel.mean_keepdim(1)?;
                let centered = per_channel.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(1)?;
                let unbiased = if count > 1 {
                    (var.detach() * (count as f64 / (count - 1) as f64))?
                } else {
                    var.detach()
                };
                let m = self.momentum;
                self.running_mean.set(
                    &((self.running_mean.as_tensor() * (1.0 - m))?
                        + (mean.detach().flatten_all()? * m)?)?,
                )?;
                self.running_var.set(
                    &((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.flatten_all()? * m)?)?,
                )?;
                (mean.reshape(bshape.as_slice())?, var.reshape(bshape.as_slice())?)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().reshape(bshape.as_slice())?,
                self.running_var.as_tensor().reshape(bshape.as_slice())?,
            ),
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape(bshape.as_slice())?)?
            .broadcast_add(&self.beta.reshape(bshape.as_slice())?)?)
    }
}

/// Multi-head self-attention over a token sequence (B, T, D).
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(init: &mut Init<'_>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(vec![format!(
                "attention dim {dim} is not divisible by {heads} heads"
            )]));
        }
        Ok(Self {
            q: Linear::xavier(&mut init.sub("q"), dim, dim)?,
            k: Linear::xavier(&mut init.sub("k"), dim, dim)?,
            v: Linear::xavier(&mut init.sub("v"), dim, dim)?,
            out: Linear::xavier(&mut init.sub("out"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()?
                .reshape((b * self.heads, t, hd))?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (hd as f64).sqrt())?;
        let weights = softmax_last(&scores)?;
        let ctx = weights
            .matmul(&v)?
            .reshape((b, self.heads, t, hd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, d))?;
        self.out.forward(&ctx)
    }
}

/// Numerically stable softmax along the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Log-softmax along the last axis.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Inverted dropout; identity for `p == 0`.
pub fn dropout(x: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.dims(), &Device::Cpu)?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// (B, C, H, W) → (B, H·W, C) token sequence.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

pub fn tensor_from_f64(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use rand::SeedableRng;

    fn store() -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(DType::F64), ChaCha8Rng::seed_from_u64(7))
    }

    #[test]
    fn batch_norm_normalizes_in_train_mode_and_tracks_running_stats() {
        let (mut s, mut rng) = store();
        let bn = BatchNorm::new(&mut Init::new(&mut s, &mut rng), 2).unwrap();
        let x = tensor_from_f64(vec![1.0, 10.0, 3.0, 20.0, 5.0, 30.0], &[3, 2], DType::F64).unwrap();
        let y = tensor_to_f64(&bn.forward(&x, Mode::Train).unwrap()).unwrap();
        let col0: Vec<f64> = y.iter().step_by(2).copied().collect();
        let mean: f64 = col0.iter().sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        let rm = tensor_to_f64(s.get("running_mean").unwrap().as_tensor()).unwrap();
        assert!((rm[0] - 0.3).abs() < 1e-12 && (rm[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_on_constant_input_is_finite() {
        let (mut s, mut rng) = store();
        let bn = BatchNorm::new(&mut Init::new(&mut s, &mut rng), 3).unwrap();
        let x = Tensor::zeros((2, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let y = tensor_to_f64(&bn.forward(&x, Mode::Train).unwrap()).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn attention_rows_sum_to_one_and_shape_is_kept() {
        let s = softmax_last(
            &tensor_from_f64(vec![1.0, 2.0, 3.0, 1000.0, 0.0, -1000.0], &[2, 3], DType::F64).unwrap(),
        )
        .unwrap();
        let v = tensor_to_f64(&s).unwrap();
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[3] - 1.0).abs() < 1e-12);

        let (mut st, mut rng) = store();
        let att = MultiHeadSelfAttention::new(&mut Init::new(&mut st, &mut rng), 16, 8).unwrap();
        let x = Tensor::ones((2, 5, 16), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(att.forward(&x).unwrap().dims(), &[2, 5, 16]);
        assert!(MultiHeadSelfAttention::new(&mut Init::new(&mut st, &mut rng), 12, 8).is_err());
    }

    #[test]
    fn dropout_zero_is_identity_and_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::ones((100, 100), DType::F64, &Device::Cpu).unwrap();
        let same = dropout(&x, 0.0, &mut rng).unwrap();
        assert_eq!(tensor_to_f64(&same).unwrap(), tensor_to_f64(&x).unwrap());
        let d = tensor_to_f64(&dropout(&x, 0.5, &mut rng).unwrap()).unwrap();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        assert!((mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn linear_accepts_token_batches() {
        let (mut s, mut rng) = store();
        let lin = Linear::new(&mut Init::new(&mut s, &mut rng), 4, 3).unwrap();
        let x = Tensor::ones((2, 5, 4), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(lin.forward(&x).unwrap().dims(), &[2, 5, 3]);
        let bad = Tensor::ones((2, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(lin.forward(&bad).is_err());
    }
}
