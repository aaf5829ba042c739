//! Analytic backward rules vs central finite differences.
//!
//! The triangular solve ships a custom gradient (dC = solve(Bᵀ, G),
//! dB = -dC·Yᵀ on the lower triangle) instead of taping every substitution
//! step; this demo pits it — and a whole chain-summing attention head —
//! against the finite-difference oracle in double precision.
//!
//! ```bash
//! cargo run --release -p chacal --example gradient_check
//! ```

use chacal::attention::{multi_head_forward, AttentionConfig, AttentionVars, AttentionWeights};
use chacal::numcore::{finite_difference_gradient, max_relative_error, tensor, Tape, Tensor};
use chacal::rng::Rng;

fn main() {
    let mut rng = Rng::new(11);

    // triangular solve, gradients wrt both operands
    let n = 6;
    let mut b: Tensor<f64> = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..i {
            b.data_mut()[i * n + j] = rng.uniform(-0.5, 0.5);
        }
        b.data_mut()[i * n + i] = 1.0 + rng.uniform(0.0, 0.3);
    }
    let c: Tensor<f64> = Tensor::uniform(vec![n, 3], -1.0, 1.0, &mut rng);

    let mut tape = Tape::new();
    let bv = tape.leaf(b.clone());
    let cv = tape.leaf(c.clone());
    let y = tape.solve_lower_triangular(bv, cv).unwrap();
    let loss = tape.sum_all(y);
    tape.backward(loss).unwrap();

    let numeric_db = finite_difference_gradient(
        |probe| tensor::sum_all(&tensor::solve_lower_triangular(probe, &c).unwrap()).item(),
        &b,
        1e-6,
    );
    let numeric_dc = finite_difference_gradient(
        |probe| tensor::sum_all(&tensor::solve_lower_triangular(&b, probe).unwrap()).item(),
        &c,
        1e-6,
    );
    println!(
        "solve backward   dB error {:.2e}   dC error {:.2e}",
        max_relative_error(tape.grad(bv).unwrap(), &numeric_db),
        max_relative_error(tape.grad(cv).unwrap(), &numeric_dc),
    );

    // a full chain-summing head, gradient wrt the input sequence
    let cfg = AttentionConfig::chacal(8, 2, 0.9);
    let x: Tensor<f64> = Tensor::uniform(vec![5, 8], -1.0, 1.0, &mut rng);
    let w: AttentionWeights<f64> = AttentionWeights::init(8, 0.4, 0.4, &mut rng);
    let probe_weights: Tensor<f64> = Tensor::uniform(vec![5, 8], -1.0, 1.0, &mut rng);

    let run = |x0: &Tensor<f64>| -> (f64, Tensor<f64>) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x0.clone());
        let wv = AttentionVars::register(&mut tape, &w);
        let pv = tape.constant(probe_weights.clone());
        let (out, _) = multi_head_forward(&mut tape, xv, &wv, &cfg).unwrap();
        let weighted = tape.mul(out, pv).unwrap();
        let loss = tape.sum_all(weighted);
        tape.backward(loss).unwrap();
        (tape.value(loss).item(), tape.grad(xv).unwrap().clone())
    };
    let (_, analytic) = run(&x);
    let numeric = finite_difference_gradient(|probe| run(probe).0, &x, 1e-6);
    println!(
        "chacal head      dX error {:.2e}  (tolerance 1e-5)",
        max_relative_error(&analytic, &numeric)
    );
}
