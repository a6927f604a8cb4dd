//! Variance-preserving noise gate against plain scaling. The VP mix keeps
//! unit variance for every gate value; scaling shrinks it to alpha^2.

use tokengate::gate::{sample_noise, scale_gate, vp_mix, TokenSequence};
use tokengate::numcore::{Rng, Tensor};
use tokengate::softtopk::GateWeights;

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

fn main() -> tokengate::Result<()> {
    let (rows, width) = (20_000, 4);
    let mut rng = Rng::new(7);
    let x = Tensor::new(vec![rows, width], rng.normals(rows * width))?;
    println!("alpha   vp-var   scale-var");
    for a in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let alpha = vec![a; rows];
        let noise = sample_noise(&x, &mut rng);
        let vp = vp_mix(&x, &alpha, &noise)?;
        let gate = GateWeights {
            alpha,
            budget_k: rows,
            tau: 1.0,
            threshold: None,
            residual: 0.0,
        };
        let scaled = scale_gate(&TokenSequence::from_grid(x.clone())?, &gate)?;
        println!("{a:<7} {:<8.4} {:.4}", variance(vp.data()), variance(scaled.tokens.data()));
    }
    Ok(())
}
