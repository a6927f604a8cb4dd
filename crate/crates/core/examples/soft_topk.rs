//! Soft top-k on a handful of scores: the budget holds at every temperature
//! and the weights sharpen toward the hard mask as tau shrinks.

use tokengate::gate::argtop_k;
use tokengate::softtopk::{soft_topk_backward, soft_topk_forward, zscore, AnnealSchedule};

fn main() -> tokengate::Result<()> {
    let raw = [0.3, 2.1, -0.4, 1.7, 0.9, -1.2, 0.0, 1.1];
    let s = zscore(&raw);
    let k = 3;
    println!("normalized scores {:.3?}", s);
    println!("hard top-{k}: {:?}", argtop_k(&s, k));
    for tau in [2.0, 0.5, 0.1, 0.01] {
        let g = soft_topk_forward(&s, k, tau)?;
        println!(
            "tau {tau:<5} threshold {:+.4} sum {:.8} alpha {:.3?}",
            g.threshold.unwrap(),
            g.sum(),
            g.alpha
        );
    }

    // A gradient that only touches one weight is redistributed so the
    // budget stays fixed: the score gradient sums to zero.
    let g = soft_topk_forward(&s, k, 0.5)?;
    let mut upstream = vec![0.0; s.len()];
    upstream[1] = 1.0;
    let grad = soft_topk_backward(&g, &upstream)?;
    println!("d alpha_1 / d s = {:.4?}", grad.grad);
    println!("sum = {:.2e}", grad.grad.iter().sum::<f64>());

    let schedule = AnnealSchedule::new(1.0, 0.05, 100)?;
    for step in [0, 25, 50, 75, 100, 150] {
        println!("step {step:>3}: tau {:.4}", schedule.tau_at(step).tau);
    }
    Ok(())
}
