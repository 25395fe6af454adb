//! 2D convolution as im2col + GEMM, wired into candle's autograd.
//!
//! candle's own CPU convolution backward goes through a transposed
//! convolution that is several times slower than a direct im2col/col2im
//! formulation for the small feature maps used here.

use candle_core::{bail, CpuStorage, CustomOp2, Layout, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            bail!("conv2d expects 4d input and kernel, got {x:?} and {w:?}");
        }
        if x[1] != w[1] || w[2] != w[3] {
            bail!("conv2d channel/kernel mismatch: input {x:?}, kernel {w:?}");
        }
        let k = w[2];
        if x[2] + 2 * pad < k || x[3] + 2 * pad < k {
            bail!("conv2d kernel {k} larger than padded input {x:?}");
        }
        Ok(Self {
            batch: x[0],
            in_c: x[1],
            in_h: x[2],
            in_w: x[3],
            out_c: w[0],
            k,
            stride,
            pad,
            out_h: (x[2] + 2 * pad - k) / stride + 1,
            out_w: (x[3] + 2 * pad - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    /// Source pixel index for output position (oy, ox) and kernel tap, or
    /// `None` inside the zero padding.
    #[inline]
    fn source(&self, ci: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy as usize >= self.in_h || ix as usize >= self.in_w {
            None
        } else {
            Some((ci * self.in_h + iy as usize) * self.in_w + ix as usize)
        }
    }
}

trait Element: Copy + Default + std::ops::AddAssign {
    /// C = A·B + beta·C with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
    fn zero() -> Self {
        Self::default()
    }
    fn one() -> Self;
}

macro_rules! element {
    ($t:ty, $f:path) => {
        impl Element for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                beta: Self,
                c: &mut [Self],
                (rsc, csc): (isize, isize),
            ) {
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs)
                        as usize
                };
                assert!(a.len() > span(m, k, rsa, csa));
                assert!(b.len() > span(k, n, rsb, csb));
                assert!(c.len() > span(m, n, rsc, csc));
                // SAFETY: the asserts above keep every strided access in bounds.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
            fn one() -> Self {
                1.0
            }
        }
    };
}

element!(f32, matrixmultiply::sgemm);
element!(f64, matrixmultiply::dgemm);

/// cols is (positions × patch_len) for a single image.
fn im2col<T: Element>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let pl = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * pl..][..pl];
            let mut j = 0;
            for ci in 0..g.in_c {
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        row[j] = match g.source(ci, oy, ox, ky, kx) {
                            Some(i) => x[i],
                            None => T::zero(),
                        };
                        j += 1;
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &Geometry, cols: &[T], dx: &mut [T]) {
    let pl = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * pl..][..pl];
            let mut j = 0;
            for ci in 0..g.in_c {
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        if let Some(i) = g.source(ci, oy, ox, ky, kx) {
                            dx[i] += row[j];
                        }
                        j += 1;
                    }
                }
            }
        }
    }
}

fn forward<T: Element>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let (pl, hw) = (g.patch_len(), g.positions());
    let mut cols = vec![T::zero(); hw * pl];
    let mut out = vec![T::zero(); g.batch * g.out_c * hw];
    for b in 0..g.batch {
        im2col(g, &x[b * g.image_len()..][..g.image_len()], &mut cols);
        // out[o, p] = W[o, :] · cols[p, :]
        T::gemm(
            g.out_c,
            pl,
            hw,
            w,
            (pl as isize, 1),
            &cols,
            (1, pl as isize),
            T::zero(),
            &mut out[b * g.out_c * hw..][..g.out_c * hw],
            (hw as isize, 1),
        );
    }
    out
}

fn backward_input<T: Element>(g: &Geometry, grad: &[T], w: &[T]) -> Vec<T> {
    let (pl, hw) = (g.patch_len(), g.positions());
    let mut cols = vec![T::zero(); hw * pl];
    let mut dx = vec![T::zero(); g.batch * g.image_len()];
    for b in 0..g.batch {
        // cols[p, :] = Σ_o grad[o, p] · W[o, :]
        T::gemm(
            hw,
            g.out_c,
            pl,
            &grad[b * g.out_c * hw..][..g.out_c * hw],
            (1, hw as isize),
            w,
            (pl as isize, 1),
            T::zero(),
            &mut cols,
            (pl as isize, 1),
        );
        col2im(g, &cols, &mut dx[b * g.image_len()..][..g.image_len()]);
    }
    dx
}

fn backward_weight<T: Element>(g: &Geometry, x: &[T], grad: &[T]) -> Vec<T> {
    let (pl, hw) = (g.patch_len(), g.positions());
    let mut cols = vec![T::zero(); hw * pl];
    let mut dw = vec![T::zero(); g.out_c * pl];
    for b in 0..g.batch {
        im2col(g, &x[b * g.image_len()..][..g.image_len()], &mut cols);
        T::gemm(
            g.out_c,
            hw,
            pl,
            &grad[b * g.out_c * hw..][..g.out_c * hw],
            (hw as isize, 1),
            &cols,
            (pl as isize, 1),
            T::one(),
            &mut dw,
            (pl as isize, 1),
        );
    }
    dw
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("conv2d operands must be contiguous"),
    }
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        xs: &CpuStorage,
        xl: &Layout,
        ws: &CpuStorage,
        wl: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = Geometry::new(xl.dims(), wl.dims(), self.stride, self.pad)?;
        let shape = Shape::from((g.batch, g.out_c, g.out_h, g.out_w));
        let out = match (xs, ws) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                CpuStorage::F32(forward(&g, contiguous(x, xl)?, contiguous(w, wl)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                CpuStorage::F64(forward(&g, contiguous(x, xl)?, contiguous(w, wl)?))
            }
            _ => bail!("conv2d supports matching f32 or f64 operands"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _out: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(
            w,
            &InputGrad {
                stride: self.stride,
                pad: self.pad,
                x_dims: x.dims().to_vec(),
            },
        )?;
        let dw = x.apply_op2_no_bwd(
            &grad,
            &WeightGrad {
                stride: self.stride,
                pad: self.pad,
                w_dims: w.dims().to_vec(),
            },
        )?;
        Ok((Some(dx), Some(dw)))
    }
}

struct InputGrad {
    stride: usize,
    pad: usize,
    x_dims: Vec<usize>,
}

impl CustomOp2 for InputGrad {
    fn name(&self) -> &'static str {
        "im2col-conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        gs: &CpuStorage,
        gl: &Layout,
        ws: &CpuStorage,
        wl: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = Geometry::new(&self.x_dims, wl.dims(), self.stride, self.pad)?;
        let out = match (gs, ws) {
            (CpuStorage::F32(gr), CpuStorage::F32(w)) => {
                CpuStorage::F32(backward_input(&g, contiguous(gr, gl)?, contiguous(w, wl)?))
            }
            (CpuStorage::F64(gr), CpuStorage::F64(w)) => {
                CpuStorage::F64(backward_input(&g, contiguous(gr, gl)?, contiguous(w, wl)?))
            }
            _ => bail!("conv2d supports matching f32 or f64 operands"),
        };
        Ok((out, Shape::from(self.x_dims.clone())))
    }
}

struct WeightGrad {
    stride: usize,
    pad: usize,
    w_dims: Vec<usize>,
}

impl CustomOp2 for WeightGrad {
    fn name(&self) -> &'static str {
        "im2col-conv2d-weight-grad"
    }

    fn cpu_fwd(
        &self,
        xs: &CpuStorage,
        xl: &Layout,
        gs: &CpuStorage,
        gl: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = Geometry::new(xl.dims(), &self.w_dims, self.stride, self.pad)?;
        let out = match (xs, gs) {
            (CpuStorage::F32(x), CpuStorage::F32(gr)) => {
                CpuStorage::F32(backward_weight(&g, contiguous(x, xl)?, contiguous(gr, gl)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(gr)) => {
                CpuStorage::F64(backward_weight(&g, contiguous(x, xl)?, contiguous(gr, gl)?))
            }
            _ => bail!("conv2d supports matching f32 or f64 operands"),
        };
        Ok((out, Shape::from(self.w_dims.clone())))
    }
}

/// Square-kernel 2D convolution without bias. `x` is (B, C, H, W), `w` is (O, C, K, K).
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    x.contiguous()?
        .apply_op2(&w.contiguous()?, Conv2dOp { stride, pad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn matches_candle_reference_forward_and_backward() {
        for (stride, pad) in [(1, 1), (2, 1), (2, 0), (1, 0)] {
            let x = Var::from_tensor(&randn(&[2, 3, 9, 11], 1)).unwrap();
            let w = Var::from_tensor(&randn(&[4, 3, 3, 3], 2)).unwrap();
            let ours = conv2d(&x, &w, stride, pad).unwrap();
            let reference = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            let diff = (&ours - &reference).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);

            let probe = randn(ours.dims(), 3);
            let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w] {
                let d = (g1.get(v).unwrap() - g2.get(v).unwrap())
                    .unwrap()
                    .abs()
                    .unwrap()
                    .max_all()
                    .unwrap()
                    .to_scalar::<f64>()
                    .unwrap();
                assert!(d < 1e-10, "stride {stride} pad {pad}: {d}");
            }
        }
    }

    #[test]
    fn f32_path_runs() {
        let x = randn(&[1, 2, 5, 5], 4).to_dtype(DType::F32).unwrap();
        let w = randn(&[3, 2, 3, 3], 5).to_dtype(DType::F32).unwrap();
        let y = conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y.dims(), &[1, 3, 5, 5]);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = randn(&[1, 2, 5, 5], 4);
        let w = randn(&[3, 3, 3, 3], 5);
        assert!(conv2d(&x, &w, 1, 1).is_err());
    }
}
