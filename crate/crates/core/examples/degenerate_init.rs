//! With both K_r and V_r at zero the keys never receive gradient and the
//! value rows move in lockstep, so the branch collapses to one vector.
//! Random keys break the symmetry.

use adapterlab::attention::{adapter_grads, init_adapter, residual_forward, FrozenAttention};
use adapterlab::numkernel::{Mat, Rng};

fn main() -> adapterlab::Result<()> {
    let mut rng = Rng::seed(0);
    let (seq, l, d) = (2, 3, 3);
    let layer = FrozenAttention::random(d, 1.0, 1.0, 0.1, &mut rng);
    let x = Mat::from_fn(seq, d, |_, _| rng.normal());
    let target = Mat::from_fn(seq, d, |_, _| rng.normal());

    for (name, bound) in [("K_r = 0", 0.0), ("K_r random", 1.0)] {
        let mut a = init_adapter(l, d, bound, &mut rng);
        println!("{name}");
        for step in 0..5 {
            let diff = residual_forward(&x, &layer, &a, 1.0)?.sub(&target)?;
            let loss = 0.5 * diff.data().iter().map(|v| v * v).sum::<f64>();
            let (dk, dv) = adapter_grads(&x, &layer, &a, 1.0, &diff)?;
            a.sgd_step(0.1, &dk, &dv)?;
            let v = a.values();
            let spread = (1..l).flat_map(|i| v.row(0).iter().zip(v.row(i)).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max);
            println!("  step {step}: loss {loss:.5}  max|dK| {:.2e}  V row spread {spread:.2e}", dk.max_abs());
        }
    }
    Ok(())
}
