//! A freshly initialized adapter leaves the frozen encoder untouched, at any
//! weight, while an adapter with random values does not.

use adapterlab::attention::{init_adapter, init_adapter_ablation};
use adapterlab::backbone::{encode, BackboneConfig, DualEncoder, TokenSeq};
use adapterlab::numkernel::Rng;

fn gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> adapterlab::Result<()> {
    let backbone = DualEncoder::new(&BackboneConfig::default())?;
    let mut rng = Rng::seed(7);
    let seq = TokenSeq::new(vec![3, 40, 41, 7, 90, 3, 12, 200])?;
    let frozen = encode(&seq, &backbone.image, None, 0.0)?;

    let fresh: Vec<_> = (0..backbone.depth()).map(|_| init_adapter(4, backbone.dim(), 0.02, &mut rng)).collect();
    let noisy: Vec<_> = (0..backbone.depth()).map(|_| init_adapter_ablation(4, backbone.dim(), 1.0, &mut rng)).collect();
    println!("{:>6}  {:>12}  {:>12}", "w", "zero V_r", "random V_r");
    for w in [0.0, 0.5, 1.0] {
        let a = encode(&seq, &backbone.image, Some(&fresh), w)?;
        let b = encode(&seq, &backbone.image, Some(&noisy), w)?;
        println!("{w:>6.2}  {:>12.3e}  {:>12.3e}", gap(&a, &frozen), gap(&b, &frozen));
    }
    Ok(())
}
