//! Training objectives.
//!
//! Host-side functions (`mae`, `ev_weight`, `sup_loss`) work on plain
//! values and are the reference definitions. The tensor functions compute
//! the same quantities inside the autograd graph for training.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GazeVector2;
use crate::nn::layers::{log_softmax_last, tensor_to_f64};

/// Keeps the per-sample residual norm differentiable at zero.
const NORM_EPS: f64 = 1e-12;

/// Knobs of the inverse-explained-variance weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightingConfig {
    /// Upper clip applied to the batch weight.
    pub omega_max: f64,
    /// Total sum of squares below which a batch is treated as degenerate.
    pub sst_epsilon: f64,
    /// Let gradients flow through SSE/SST instead of treating the weight as a constant.
    pub omega_in_graph: bool,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self {
            omega_max: 10.0,
            sst_epsilon: 1e-12,
            omega_in_graph: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvWeight {
    pub omega: f64,
    pub v_ex: f64,
    pub sst: f64,
    pub sse: f64,
    /// SST fell below the epsilon; `omega` was forced to zero.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupLossBreakdown {
    pub mae: f64,
    pub sst: f64,
    pub sse: f64,
    pub v_ex: f64,
    pub omega: f64,
    pub total: f64,
    pub degenerate: bool,
}

fn check_batch(y: &[GazeVector2], y_hat: &[GazeVector2], min: usize) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::contract(format!(
            "target batch has {} rows, prediction batch {}",
            y.len(),
            y_hat.len()
        )));
    }
    if y.len() < min {
        return Err(Error::contract(format!(
            "batch needs at least {min} samples, got {}",
            y.len()
        )));
    }
    Ok(())
}

/// Mean Euclidean norm of the per-sample residuals.
pub fn mae(y: &[GazeVector2], y_hat: &[GazeVector2]) -> Result<f64> {
    check_batch(y, y_hat, 1)?;
    let total: f64 = y.iter().zip(y_hat).map(|(a, b)| a.sub(b).norm()).sum();
    Ok(total / y.len() as f64)
}

/// Batch weight omega = SSE / SST, clipped to `[0, omega_max]`.
pub fn ev_weight(y: &[GazeVector2], y_hat: &[GazeVector2], cfg: &WeightingConfig) -> Result<EvWeight> {
    check_batch(y, y_hat, 2)?;
    let n = y.len() as f64;
    let mean = GazeVector2::new(
        y.iter().map(|v| v.x).sum::<f64>() / n,
        y.iter().map(|v| v.y).sum::<f64>() / n,
    );
    let sst: f64 = y.iter().map(|v| v.sub(&mean).norm().powi(2)).sum();
    let sse: f64 = y.iter().zip(y_hat).map(|(a, b)| a.sub(b).norm().powi(2)).sum();
    Ok(weight_from_sums(sst, sse, cfg))
}

fn weight_from_sums(sst: f64, sse: f64, cfg: &WeightingConfig) -> EvWeight {
    if sst < cfg.sst_epsilon {
        return EvWeight {
            omega: 0.0,
            v_ex: 1.0,
            sst,
            sse,
            degenerate: true,
        };
    }
    let ratio = sse / sst;
    EvWeight {
        omega: ratio.clamp(0.0, cfg.omega_max),
        v_ex: 1.0 - ratio,
        sst,
        sse,
        degenerate: false,
    }
}

/// MAE scaled by (omega + 1).
pub fn sup_loss(y: &[GazeVector2], y_hat: &[GazeVector2], cfg: &WeightingConfig) -> Result<SupLossBreakdown> {
    let w = ev_weight(y, y_hat, cfg)?;
    let m = mae(y, y_hat)?;
    Ok(SupLossBreakdown {
        mae: m,
        sst: w.sst,
        sse: w.sse,
        v_ex: w.v_ex,
        omega: w.omega,
        total: m * (w.omega + 1.0),
        degenerate: w.degenerate,
    })
}

fn rows_as_vectors(t: &Tensor) -> Result<Vec<GazeVector2>> {
    let (n, d) = t.dims2()?;
    if d != 2 {
        return Err(Error::contract(format!("gaze batch must be (n, 2), got (n, {d})")));
    }
    let v = tensor_to_f64(t)?;
    Ok((0..n).map(|i| GazeVector2::new(v[2 * i], v[2 * i + 1])).collect())
}

/// Differentiable gaze loss on (n, 2) tensors.
///
/// With `weighted == false` the MAE alone is returned (the breakdown is
/// still filled in for logging). Unless `cfg.omega_in_graph` is set the
/// weight enters as a constant, so gradients only flow through the MAE.
pub fn sup_loss_tensor(
    prediction: &Tensor,
    target: &Tensor,
    cfg: &WeightingConfig,
    weighted: bool,
) -> Result<(Tensor, SupLossBreakdown)> {
    if prediction.dims() != target.dims() {
        return Err(Error::contract(format!(
            "prediction {:?} and target {:?} differ in shape",
            prediction.dims(),
            target.dims()
        )));
    }
    let y = rows_as_vectors(target)?;
    let y_hat = rows_as_vectors(prediction)?;
    let target = target.detach();
    let residual = (prediction - &target)?;
    let sq = residual.sqr()?.sum(D::Minus1)?;
    let mae_t = (sq.clone() + NORM_EPS)?.sqrt()?.mean_all()?;

    let breakdown = if y.len() >= 2 {
        sup_loss(&y, &y_hat, cfg)?
    } else {
        let m = mae(&y, &y_hat)?;
        SupLossBreakdown {
            mae: m,
            sst: 0.0,
            sse: 0.0,
            v_ex: 1.0,
            omega: 0.0,
            total: m,
            degenerate: true,
        }
    };
    if !weighted {
        return Ok((mae_t, SupLossBreakdown { total: breakdown.mae, ..breakdown }));
    }
    let total = if cfg.omega_in_graph && !breakdown.degenerate {
        let sse_t = sq.sum_all()?;
        let omega_t = (sse_t / breakdown.sst)?.clamp(0.0, cfg.omega_max)?;
        (&mae_t * (omega_t + 1.0)?)?
    } else {
        (&mae_t * (breakdown.omega + 1.0))?
    };
    Ok((total, breakdown))
}

/// Batch mean of −cos(a_i, b_i). Accepts (d) or (n, d) inputs.
pub fn negative_cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::contract(format!(
            "cosine operands differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (a, b) = if a.rank() == 1 {
        (a.unsqueeze(0)?, b.unsqueeze(0)?)
    } else {
        (a.clone(), b.clone())
    };
    let na = a.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min_norm = tensor_to_f64(&na)?
        .into_iter()
        .chain(tensor_to_f64(&nb)?)
        .fold(f64::INFINITY, f64::min);
    if !(min_norm > 0.0) {
        return Err(Error::contract("negative cosine of a zero-norm vector"));
    }
    let cos = (a.broadcast_div(&na)? * b.broadcast_div(&nb)?)?.sum(D::Minus1)?;
    Ok(cos.mean_all()?.neg()?)
}

/// The six vectors of the symmetrized self-supervised objective.
#[derive(Debug, Clone, Copy)]
pub struct SslLossInputs<'a> {
    /// Online predictions for views v and v′.
    pub q_v: &'a Tensor,
    pub q_v_prime: &'a Tensor,
    /// Online projections for views v and v′.
    pub z_online_v: &'a Tensor,
    pub z_online_v_prime: &'a Tensor,
    /// Target projections for views v and v′; treated as constants.
    pub z_target_v: &'a Tensor,
    pub z_target_v_prime: &'a Tensor,
}

impl SslLossInputs<'_> {
    fn check(&self) -> Result<()> {
        let dims = self.q_v.dims();
        for t in [
            self.q_v_prime,
            self.z_online_v,
            self.z_online_v_prime,
            self.z_target_v,
            self.z_target_v_prime,
        ] {
            if t.dims() != dims {
                return Err(Error::contract(format!(
                    "ssl loss inputs disagree in shape: {dims:?} vs {:?}",
                    t.dims()
                )));
            }
        }
        Ok(())
    }
}

/// Four-term loss: each online prediction and each online projection is
/// pulled toward the target projection of the opposite view.
pub fn ssl_loss(x: &SslLossInputs<'_>) -> Result<Tensor> {
    x.check()?;
    let zt_v = x.z_target_v.detach();
    let zt_vp = x.z_target_v_prime.detach();
    let sum = (negative_cosine(x.q_v, &zt_vp)?
        + negative_cosine(x.q_v_prime, &zt_v)?
        + negative_cosine(x.z_online_v, &zt_vp)?
        + negative_cosine(x.z_online_v_prime, &zt_v)?)?;
    Ok((sum * 0.25)?)
}

/// Plain BYOL two-term symmetrized objective (predictions only).
pub fn byol_loss(x: &SslLossInputs<'_>) -> Result<Tensor> {
    x.check()?;
    let sum = (negative_cosine(x.q_v, &x.z_target_v_prime.detach())?
        + negative_cosine(x.q_v_prime, &x.z_target_v.detach())?)?;
    Ok((sum * 0.5)?)
}

/// Cross-entropy where each sample counts with its class weight and the
/// sum is normalized by the total selected weight.
pub fn weighted_cross_entropy(logits: &Tensor, labels: &[usize], class_weights: &[f64]) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::contract(format!("{n} logit rows but {} labels", labels.len())));
    }
    if class_weights.len() != c {
        return Err(Error::contract(format!(
            "{c} classes but {} class weights",
            class_weights.len()
        )));
    }
    if let Some(w) = class_weights.iter().find(|w| !(**w > 0.0)) {
        return Err(Error::contract(format!("class weights must be positive, got {w}")));
    }
    if let Some(l) = labels.iter().find(|l| **l >= c) {
        return Err(Error::contract(format!("label {l} outside [0, {c})")));
    }
    let idx = Tensor::from_vec(
        labels.iter().map(|&l| l as u32).collect::<Vec<_>>(),
        (n, 1),
        &Device::Cpu,
    )?;
    let picked = log_softmax_last(logits)?.gather(&idx, 1)?.squeeze(1)?;
    let w: Vec<f64> = labels.iter().map(|&l| class_weights[l]).collect();
    let norm: f64 = w.iter().sum();
    let w = Tensor::from_vec(w, n, &Device::Cpu)?.to_dtype(logits.dtype())?;
    Ok(((picked * w)?.sum_all()?.neg()? / norm)?)
}

/// Balanced class weights n / (C · count_c); unseen classes get weight 1.
pub fn balanced_class_weights(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l < classes {
            counts[l] += 1;
        }
    }
    counts
        .iter()
        .map(|&k| {
            if k == 0 {
                1.0
            } else {
                labels.len() as f64 / (classes * k) as f64
            }
        })
        .collect()
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::tensor_from_f64;
    use proptest::prelude::*;

    fn v(x: f64, y: f64) -> GazeVector2 {
        GazeVector2::new(x, y)
    }

    fn t(rows: &[[f64; 2]]) -> Tensor {
        tensor_from_f64(rows.iter().flatten().copied().collect(), &[rows.len(), 2], DType::F64).unwrap()
    }

    #[test]
    fn negative_cosine_examples() {
        let a = t(&[[1.0, 0.0]]);
        assert!((scalar(&negative_cosine(&a, &a).unwrap()).unwrap() + 1.0).abs() < 1e-15);
        let b = t(&[[0.0, 3.0]]);
        assert!(scalar(&negative_cosine(&a, &b).unwrap()).unwrap().abs() < 1e-15);
        let c = t(&[[1.0, 1.0]]);
        let got = scalar(&negative_cosine(&a, &c).unwrap()).unwrap();
        assert!((got + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let zero = t(&[[0.0, 0.0]]);
        assert!(matches!(negative_cosine(&a, &zero), Err(Error::Contract(_))));
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[v(1.0, 2.0)], &[v(1.0, 2.0)]).unwrap(), 0.0);
        assert_eq!(mae(&[v(1.0, 0.0)], &[v(0.0, 0.0)]).unwrap(), 1.0);
        assert_eq!(mae(&[v(3.0, 4.0), v(0.0, 0.0)], &[v(0.0, 0.0), v(0.0, 0.0)]).unwrap(), 2.5);
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn ev_weight_examples() {
        let cfg = WeightingConfig::default();
        let y = [v(1.0, 0.0), v(-1.0, 0.0)];
        let w = ev_weight(&y, &y, &cfg).unwrap();
        assert_eq!((w.omega, w.v_ex), (0.0, 1.0));
        let mean = [v(0.0, 0.0), v(0.0, 0.0)];
        let w = ev_weight(&y, &mean, &cfg).unwrap();
        assert_eq!((w.omega, w.v_ex), (1.0, 0.0));
        let w = ev_weight(&y, &[v(0.5, 0.0), v(-0.5, 0.0)], &cfg).unwrap();
        assert_eq!((w.sst, w.sse, w.omega), (2.0, 0.5, 0.25));
        assert!(ev_weight(&y[..1], &y[..1], &cfg).is_err());
    }

    #[test]
    fn degenerate_batch_and_clip() {
        let cfg = WeightingConfig::default();
        let y = [v(0.2, 0.1), v(0.2, 0.1)];
        let w = ev_weight(&y, &[v(1.0, 1.0), v(0.0, 0.0)], &cfg).unwrap();
        assert!(w.degenerate);
        assert_eq!(w.omega, 0.0);
        let y = [v(0.01, 0.0), v(-0.01, 0.0)];
        let w = ev_weight(&y, &[v(5.0, 0.0), v(-5.0, 0.0)], &cfg).unwrap();
        assert_eq!(w.omega, cfg.omega_max);
    }

    #[test]
    fn sup_loss_examples() {
        let cfg = WeightingConfig::default();
        let y = [v(1.0, 0.0), v(-1.0, 0.0)];
        assert_eq!(sup_loss(&y, &y, &cfg).unwrap().total, 0.0);
        let b = sup_loss(&y, &[v(0.5, 0.0), v(-0.5, 0.0)], &cfg).unwrap();
        assert_eq!((b.mae, b.omega, b.total), (0.5, 0.25, 0.625));
        let mean_pred = [v(0.0, 0.0), v(0.0, 0.0)];
        let b = sup_loss(&y, &mean_pred, &cfg).unwrap();
        assert_eq!(b.total, 2.0 * b.mae);
    }

    #[test]
    fn tensor_sup_loss_agrees_with_host_version() {
        let cfg = WeightingConfig::default();
        let y = t(&[[1.0, 0.0], [-1.0, 0.0], [0.2, 0.4]]);
        let p = t(&[[0.5, 0.1], [-0.5, 0.0], [0.0, 0.3]]);
        let (loss, b) = sup_loss_tensor(&p, &y, &cfg, true).unwrap();
        assert!((scalar(&loss).unwrap() - b.total).abs() < 1e-9);
        let (plain, _) = sup_loss_tensor(&p, &y, &cfg, false).unwrap();
        assert!((scalar(&plain).unwrap() - b.mae).abs() < 1e-9);
        let in_graph = WeightingConfig { omega_in_graph: true, ..cfg };
        let (g, _) = sup_loss_tensor(&p, &y, &in_graph, true).unwrap();
        assert!((scalar(&g).unwrap() - b.total).abs() < 1e-9);
    }

    #[test]
    fn ssl_loss_extremes() {
        let u = t(&[[0.6, 0.8]]);
        let all_same = SslLossInputs {
            q_v: &u,
            q_v_prime: &u,
            z_online_v: &u,
            z_online_v_prime: &u,
            z_target_v: &u,
            z_target_v_prime: &u,
        };
        assert!((scalar(&ssl_loss(&all_same).unwrap()).unwrap() + 1.0).abs() < 1e-12);
        let (e1, e2) = (t(&[[1.0, 0.0]]), t(&[[0.0, 1.0]]));
        let orth = SslLossInputs {
            q_v: &e1,
            q_v_prime: &e2,
            z_online_v: &e1,
            z_online_v_prime: &e2,
            z_target_v: &e1,
            z_target_v_prime: &e2,
        };
        assert!(scalar(&ssl_loss(&orth).unwrap()).unwrap().abs() < 1e-15);
    }

    #[test]
    fn weighted_cross_entropy_examples() {
        let logits = tensor_from_f64(vec![50.0, -50.0, 0.0], &[1, 3], DType::F64).unwrap();
        assert!(scalar(&weighted_cross_entropy(&logits, &[0], &[1.0; 3]).unwrap()).unwrap() < 1e-20);
        let uniform = tensor_from_f64(vec![0.3; 7], &[1, 7], DType::F64).unwrap();
        let ce = scalar(&weighted_cross_entropy(&uniform, &[4], &[1.0; 7]).unwrap()).unwrap();
        assert!((ce - 7f64.ln()).abs() < 1e-12);
        // softmax of (1, 0): p0 = e/(e+1); −ln p0 = ln(1 + e⁻¹); weight 2 cancels in normalization
        let two = tensor_from_f64(vec![1.0, 0.0], &[1, 2], DType::F64).unwrap();
        let ce = scalar(&weighted_cross_entropy(&two, &[0], &[2.0, 1.0]).unwrap()).unwrap();
        assert!((ce - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!(weighted_cross_entropy(&two, &[2], &[2.0, 1.0]).is_err());
        assert!(weighted_cross_entropy(&two, &[0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn balanced_weights_upweight_rare_classes() {
        let w = balanced_class_weights(&[0, 0, 0, 1], 2);
        assert!(w[1] > w[0]);
        assert!((w[0] - 4.0 / 6.0).abs() < 1e-12 && (w[1] - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn omega_is_translation_invariant(
            pts in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 2..12),
            sx in -50.0f64..50.0, sy in -50.0f64..50.0
        ) {
            let cfg = WeightingConfig { omega_max: f64::INFINITY, ..Default::default() };
            let y: Vec<_> = pts.iter().map(|p| v(p.0, p.1)).collect();
            let yh: Vec<_> = pts.iter().map(|p| v(p.2, p.3)).collect();
            let ys: Vec<_> = y.iter().map(|a| v(a.x + sx, a.y + sy)).collect();
            let yhs: Vec<_> = yh.iter().map(|a| v(a.x + sx, a.y + sy)).collect();
            let a = ev_weight(&y, &yh, &cfg).unwrap();
            let b = ev_weight(&ys, &yhs, &cfg).unwrap();
            prop_assume!(!a.degenerate && a.sst > 1e-3);
            prop_assert!((a.omega - b.omega).abs() <= 1e-9 * a.omega.max(1.0));
        }

        #[test]
        fn total_never_below_mae(
            pts in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 2..12)
        ) {
            let y: Vec<_> = pts.iter().map(|p| v(p.0, p.1)).collect();
            let yh: Vec<_> = pts.iter().map(|p| v(p.2, p.3)).collect();
            let b = sup_loss(&y, &yh, &WeightingConfig::default()).unwrap();
            prop_assert!(b.total >= b.mae);
            prop_assert!(b.sst >= 0.0 && b.sse >= 0.0 && b.omega >= 0.0);
        }
    }
}
