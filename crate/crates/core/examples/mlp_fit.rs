//! Fits a small SiLU network to sin(x) on [-π, π] with plain minibatch SGD.
//!
//!     cargo run --release --example mlp_fit

use ndarray::Array2;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use olts::trainer::{sgd_step, Activation, Mlp, SgdConfig};

fn main() {
    let mut model = Mlp::new(&[1, 32, 32, 1], Activation::Silu, 0);
    let cfg = SgdConfig {
        lr0: 0.05,
        decay_gamma: 0.9999,
        batch_size: 16,
        max_batches: 20_000,
    };
    let mut rng = StdRng::seed_from_u64(1);
    let rmse = |m: &Mlp| {
        let xs: Vec<f64> = (0..200).map(|i| -std::f64::consts::PI + i as f64 * 0.0314).collect();
        (xs.iter().map(|&x| (m.forward(&[x])[0] - x.sin()).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
    };
    println!("{} parameters, initial rmse {:.4}", model.param_count(), rmse(&model));
    for step in 0..cfg.max_batches {
        let x = Array2::from_shape_fn((cfg.batch_size, 1), |_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        let t = x.mapv(f64::sin);
        let pass = model.backward_batch(x.view(), t.view());
        sgd_step(&mut model, &pass.grads, step, &cfg).expect("finite update");
        if (step + 1) % 5_000 == 0 {
            println!("step {:>6}: batch loss {:.2e}, rmse {:.4}", step + 1, pass.loss, rmse(&model));
        }
    }
}
