#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use gazekit::config::RunConfig;
use gazekit::data::{synth_generate, Dataset, DatasetManifest, SynthConfig};
use gazekit::losses::{scalar, ssl_loss, sup_loss_tensor, SslLossInputs, WeightingConfig};
use gazekit::networks::{EncoderInput, NetworkPair};
use gazekit::nn::{Init, Linear, Mode, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tiny architecture for float64 gradient checks.
pub fn micro_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    let a = &mut cfg.architecture;
    a.face_size = 16;
    a.backbone.channels = vec![4, 8];
    a.local.channels = vec![2, 4, 4];
    a.attention_heads = 2;
    a.projection = vec![16, 16, 8];
    a.prediction = vec![8, 16, 8];
    a.bottleneck.channels = vec![2, 4, 4];
    a.bottleneck.out_dim = 8;
    a.face_feature_dim = 8;
    a.head.hidden = vec![16, 8];
    cfg.augmentation = gazekit::augment::AugmentationConfig::extended((16, 16));
    cfg
}

/// Desk config shrunk further for integration tests that train.
pub fn quick_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.data.synthetic_samples = 120;
    cfg.data.synthetic_subjects = 3;
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch_size = 16;
    cfg.finetune.epochs = 2;
    cfg
}

pub fn synth(cfg: &RunConfig) -> (DatasetManifest, Dataset) {
    let m = synth_generate(&SynthConfig::from_run(cfg), cfg.seed).unwrap();
    let d = Dataset::from_config(&m, cfg);
    (m, d)
}

// Finite-difference gradient checks

const EPS: f64 = 1e-6;

fn set_coord(v: &Var, i: usize, value: f64) {
    let mut flat = v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    flat[i] = value;
    v.set(&Tensor::from_vec(flat, v.dims(), &Device::Cpu).unwrap()).unwrap();
}

fn coord(v: &Var, i: usize) -> f64 {
    v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[i]
}

/// Max relative error over the checked coordinates.
pub fn check(vars: &[(String, Var)], coords_per_var: usize, loss: &dyn Fn() -> Tensor, rng: &mut ChaCha8Rng) -> f64 {
    let l = loss();
    let grads = l.backward().unwrap();
    let mut worst = 0.0f64;
    for (name, v) in vars {
        let g = grads
            .get(v)
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; v.elem_count()]);
        let n = v.elem_count();
        let picks: Vec<usize> = if n <= coords_per_var { (0..n).collect() } else { (0..coords_per_var).map(|_| rng.gen_range(0..n)).collect() };
        for i in picks {
            let x0 = coord(v, i);
            set_coord(v, i, x0 + EPS);
            let up = scalar(&loss()).unwrap();
            set_coord(v, i, x0 - EPS);
            let down = scalar(&loss()).unwrap();
            set_coord(v, i, x0);
            let numeric = (up - down) / (2.0 * EPS);
            let rel = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(1e-4);
            assert!(rel.is_finite(), "{name}[{i}]");
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn supervised_case(cfg: WeightingConfig, weighted: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new(DType::F64);
    let lin = {
        let mut init_rng = ChaCha8Rng::seed_from_u64(3);
        let mut init = Init::new(&mut store, &mut init_rng);
        Linear::new(&mut init.sub("fc"), 6, 2).unwrap()
    };
    let x = randn(&[12, 6], &mut rng);
    let y = (randn(&[12, 2], &mut rng) * 0.5).unwrap();
    let vars: Vec<(String, Var)> = store.named_trainable().map(|(n, v)| (n.to_string(), v.clone())).collect();
    let loss = || sup_loss_tensor(&lin.forward(&x).unwrap(), &y, &cfg, weighted).unwrap().0;
    check(&vars, 64, &loss, &mut rng)
}


/// Max relative error of the ssl-loss gradient over sampled online parameters.
pub fn ssl_case() -> f64 {
    let cfg = micro_config();
    let pair = NetworkPair::new(&cfg, 5, DType::F64, 10).unwrap();
    let n_params: usize = pair.online_params.trainable().iter().map(|v| v.elem_count()).sum();
    assert!(n_params <= 10_000, "{n_params} parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (v, vp) = (micro_input(4, &cfg, &mut rng), micro_input(4, &cfg, &mut rng));
    let tg_v = pair.target.forward(&v, Mode::Train).unwrap();
    let tg_vp = pair.target.forward(&vp, Mode::Train).unwrap();
    let loss = || {
        let a = pair.online.forward(&v, Mode::Train).unwrap();
        let b = pair.online.forward(&vp, Mode::Train).unwrap();
        ssl_loss(&SslLossInputs {
            q_v: a.q.as_ref().unwrap(),
            q_v_prime: b.q.as_ref().unwrap(),
            z_online_v: &a.z,
            z_online_v_prime: &b.z,
            z_target_v: &tg_v.z,
            z_target_v_prime: &tg_vp.z,
        })
        .unwrap()
    };
    let vars: Vec<(String, Var)> =
        pair.online_params.named_trainable().map(|(n, v)| (n.to_string(), v.clone())).collect();
    check(&vars, 6, &loss, &mut rng)
}

pub fn micro_input(n: usize, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> EncoderInput {
    let f = cfg.architecture.face_size;
    EncoderInput {
        face: randn(&[n, 3, f, f], rng),
        left: randn(&[n, 3, 36, 60], rng),
        right: randn(&[n, 3, 36, 60], rng),
    }
}

/// Largest |gradient| reaching any target parameter after one ssl backward
/// pass, and whether the online side received gradient at all.
pub fn target_gradient_max() -> (f64, bool) {
    let cfg = micro_config();
    let pair = NetworkPair::new(&cfg, 5, DType::F64, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (v, vp) = (micro_input(3, &cfg, &mut rng), micro_input(3, &cfg, &mut rng));
    let (a, b) = (pair.online.forward(&v, Mode::Train).unwrap(), pair.online.forward(&vp, Mode::Train).unwrap());
    let (ta, tb) = (pair.target.forward(&v, Mode::Train).unwrap(), pair.target.forward(&vp, Mode::Train).unwrap());
    let loss = ssl_loss(&SslLossInputs {
        q_v: a.q.as_ref().unwrap(),
        q_v_prime: b.q.as_ref().unwrap(),
        z_online_v: &a.z,
        z_online_v_prime: &b.z,
        z_target_v: &ta.z,
        z_target_v_prime: &tb.z,
    })
    .unwrap();
    let grads = loss.backward().unwrap();
    let mut worst = 0.0f64;
    for (_, v) in pair.target_params.named_trainable() {
        if let Some(g) = grads.get(v) {
            worst = worst.max(g.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap());
        }
    }
    let online = pair.online_params.named_trainable().any(|(_, v)| grads.get(v).is_some());
    (worst, online)
}
