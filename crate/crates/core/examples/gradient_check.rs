//! The tape in a few lines: a gated adapter layer, its gradients, and a
//! central-difference check of the gate gradient.
//!
//! cargo run --example gradient_check

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use weightlora::adapters::{weighted_forward_var, AdapterConfig, AdapterState};
use weightlora::autograd::Tape;
use weightlora::Tensor;

fn loss(w: &Tensor, adapter: &AdapterState, omega: f64, x: &Tensor, y: &Tensor) -> weightlora::Result<f64> {
    let tape = Tape::new();
    let bound = adapter.bind(&tape);
    let out = weighted_forward_var(
        &tape.constant(w.clone()),
        &bound,
        &tape.scalar_param(omega),
        true,
        &tape.constant(x.clone()),
        None::<&mut ChaCha8Rng>,
    )?;
    Ok(out.tanh()?.mse(&tape.constant(y.clone()))?.item())
}

fn main() -> weightlora::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (d, k, r) = (6, 5, 2);
    let w = Tensor::randn(&[d, k], 0.5, &mut rng);
    let mut adapter = AdapterState::new(0, d, k, &AdapterConfig { dropout_p: 0.0, ..AdapterConfig::new(r) }, &mut rng)?;
    *adapter.b_mut() = Tensor::randn(&[r, k], 0.1, &mut rng);
    let x = Tensor::randn(&[k, 8], 1.0, &mut rng);
    let y = Tensor::randn(&[d, 8], 0.5, &mut rng);
    let omega = 0.7;

    let tape = Tape::new();
    let bound = adapter.bind(&tape);
    let gate = tape.scalar_param(omega);
    let out = weighted_forward_var(
        &tape.constant(w.clone()),
        &bound,
        &gate,
        true,
        &tape.constant(x.clone()),
        None::<&mut ChaCha8Rng>,
    )?;
    let l = out.tanh()?.mse(&tape.constant(y.clone()))?;
    println!("loss {:.6}", l.item());
    let grads = tape.backward(&l)?;
    let g_omega = grads.get(&gate).expect("gate is a parameter")[0];
    let g_a = grads.tensor(&bound.a).expect("A is a parameter");
    println!("dL/domega {g_omega:.10e}, ||dL/dA|| {:.6e}", g_a.frobenius_norm());

    let h = 1e-5;
    let fd = (loss(&w, &adapter, omega + h, &x, &y)? - loss(&w, &adapter, omega - h, &x, &y)?) / (2.0 * h);
    println!(
        "central difference {fd:.10e}, relative error {:.2e}",
        (fd - g_omega).abs() / g_omega.abs().max(fd.abs())
    );
    Ok(())
}
