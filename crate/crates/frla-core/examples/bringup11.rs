//! Logit-level simulation of the forgetting loss: start from predictions
//! equal to the stored rows and run SGD on −MI. If argmaxes drift, the
//! estimator's marginal-balancing force overpowers the correlation term.

use frla_core::losses::{joint_distribution, mutual_information};
use frla_core::tensor::{Tape, Tensor};
use frla_core::train::SgdMomentum;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let (b, k) = (16usize, 4usize);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // unbalanced batch mix, confident logits
    let classes: Vec<usize> = (0..b).map(|i| [0, 0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3][i]).collect();
    let mut logits = Tensor::new(
        vec![b, k],
        (0..b * k)
            .map(|i| {
                let (row, col) = (i / k, i % k);
                if classes[row] == col {
                    5.0 + rng.random_range(-0.3..0.3)
                } else {
                    rng.random_range(-0.5..0.5)
                }
            })
            .collect(),
    )
    .unwrap()
    .with_grad();

    // stored rows = softmax of the initial logits
    let stored: Vec<f64> = {
        let mut tape = Tape::new();
        let l = tape.watch(&logits);
        let p = tape.softmax_axis(l, 1).unwrap();
        tape.value(p).to_vec()
    };

    let mut opt = SgdMomentum::new(1e-3, 0.9);
    for step in 0..=750 {
        let mut tape = Tape::new();
        let l = tape.watch(&logits);
        let p = tape.softmax_axis(l, 1).unwrap();
        let q = tape.constant(stored.clone(), vec![b, k]).unwrap();
        let jd = joint_distribution(&mut tape, p, q).unwrap();
        let mi = mutual_information(&mut tape, &jd).unwrap();
        let loss = tape.mul_const(mi, -1.0);
        tape.backward(loss).unwrap();
        tape.export_grad(l, &mut logits);
        if step % 150 == 0 {
            let v = tape.value(p).to_vec();
            let drift = v
                .chunks(k)
                .zip(&classes)
                .filter(|(row, &c)| {
                    let mut best = 0;
                    for (i, x) in row.iter().enumerate() {
                        if *x > row[best] {
                            best = i;
                        }
                    }
                    best != c
                })
                .count();
            let sharp: f64 = v
                .chunks(k)
                .map(|r| r.iter().cloned().fold(0.0, f64::max))
                .sum::<f64>()
                / b as f64;
            let lmax = logits.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            println!(
                "step {step}: MI {:.4}, argmax flips {drift}/{b}, sharp {sharp:.3}, max logit {lmax:.2}",
                tape.scalar(mi).unwrap()
            );
        }
        let mut params = vec![&mut logits];
        opt.step(&mut params).unwrap();
    }
}
