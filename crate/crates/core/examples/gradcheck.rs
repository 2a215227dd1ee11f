//! Analytic adapter gradients against central finite differences.

use adapterlab::bench::verify::{verify_gradcheck, LayerDims};
use adapterlab::numkernel::Rng;

fn main() -> adapterlab::Result<()> {
    let mut rng = Rng::seed(0);
    for dims in [LayerDims { seq_len: 3, adapter_len: 2, dim: 4 }, LayerDims { seq_len: 8, adapter_len: 4, dim: 16 }] {
        print!("{}", verify_gradcheck(dims, 50, &mut rng)?);
    }
    Ok(())
}
