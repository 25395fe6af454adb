//! Prints the self-supervised and weighted supervised losses on small hand-checkable inputs.
//!
//! `cargo run --example loss_values`

use candle_core::{Device, Tensor};
use gazekit::geometry::GazeVector2;
use gazekit::losses::{scalar, ssl_loss, sup_loss, SslLossInputs, WeightingConfig};

fn row(x: f64, y: f64) -> Tensor {
    Tensor::from_vec(vec![x, y], (1, 2), &Device::Cpu).unwrap()
}

fn main() -> gazekit::Result<()> {
    let (q, qp, zo, zop, zt, ztp) = (row(1., 0.), row(0., 1.), row(1., 1.), row(1., -1.), row(1., 0.), row(0., 1.));
    let l = ssl_loss(&SslLossInputs {
        q_v: &q,
        q_v_prime: &qp,
        z_online_v: &zo,
        z_online_v_prime: &zop,
        z_target_v: &zt,
        z_target_v_prime: &ztp,
    })?;
    println!("ssl loss {:.7}", scalar(&l)?);

    let y = [GazeVector2::new(1.0, 0.0), GazeVector2::new(-1.0, 0.0)];
    let cfg = WeightingConfig::default();
    for (name, pred) in [
        ("perfect", y),
        ("half", [GazeVector2::new(0.5, 0.0), GazeVector2::new(-0.5, 0.0)]),
        ("mean", [GazeVector2::new(0.0, 0.0); 2]),
    ] {
        let b = sup_loss(&y, &pred, &cfg)?;
        println!("{name:<8} mae {:.3}  omega {:.3}  v_ex {:.3}  total {:.3}", b.mae, b.omega, b.v_ex, b.total);
    }
    Ok(())
}
