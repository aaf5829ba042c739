//! The algebra behind the chain-summing head.
//!
//! Reads the causal attention matrix A as a weighted adjacency matrix and
//! sums every attention path with geometric decay:
//!
//!   Y = (1-γ)·A(I-γÂ)⁻¹V  =  (1-γ)·(AV + γÂ(AV) + γ²Â²(AV) + ...)
//!
//! computed as one lower-triangular solve. This example checks the solve
//! against the explicit series, shows the γ = 0 collapse to standard
//! attention, and verifies the fixed-point reading f(Y) = A(γY + (1-γ)V).
//!
//! ```bash
//! cargo run --release -p chacal --example chacal_algebra
//! ```

use chacal::attention::{
    attention_matrix, fixed_point_residual, head_output, AttentionConfig, AttentionVars,
    AttentionWeights,
};
use chacal::numcore::{tensor, Tape, Tensor};
use chacal::rng::Rng;

fn run_head(
    cfg: &AttentionConfig,
    x0: &Tensor<f64>,
    w0: &AttentionWeights<f64>,
) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let w = AttentionVars::register(&mut tape, w0);
    let a = attention_matrix(&mut tape, x, &w, 0, cfg).unwrap();
    let wv = tape.slice_cols(w.w_v, 0, cfg.head_dim()).unwrap();
    let v = tape.matmul(x, wv).unwrap();
    let y = head_output(&mut tape, a, v, cfg).unwrap();
    (
        tape.value(a).clone(),
        tape.value(v).clone(),
        tape.value(y).clone(),
    )
}

fn main() {
    let n = 10;
    let d = 16;
    let mut rng = Rng::new(7);
    let x: Tensor<f64> = Tensor::uniform(vec![n, d], -1.0, 1.0, &mut rng);
    let w: AttentionWeights<f64> = AttentionWeights::init(d, 0.4, 0.4, &mut rng);

    // γ = 0 collapses to plain A·V, bit for bit
    let std_cfg = AttentionConfig::standard(d, 2);
    let zero_cfg = AttentionConfig::chacal(d, 2, 0.0);
    let (_, _, y_std) = run_head(&std_cfg, &x, &w);
    let (_, _, y_zero) = run_head(&zero_cfg, &x, &w);
    println!("γ=0 equals standard attention exactly: {}", y_std == y_zero);

    // the closed form equals the path series; with the diagonal removed
    // Â is nilpotent so the series terminates after n terms
    let cfg = AttentionConfig::chacal(d, 2, 0.9);
    let (a, v, y) = run_head(&cfg, &x, &w);
    let a_hat = tensor::zero_diagonal(&a).unwrap();
    let av = tensor::matmul(&a, &v).unwrap();
    let mut term = av.clone();
    let mut series = av;
    for p in 1..=n {
        term = tensor::scale(&tensor::matmul(&a_hat, &term).unwrap(), 0.9);
        series = tensor::add(&series, &term).unwrap();
        let partial = tensor::scale(&series, 0.1);
        println!(
            "series up to path length {p:2}: max |closed-form - series| = {:.3e}",
            y.max_abs_diff(&partial)
        );
    }

    // fixed-point reading (diagonal kept): Y solves f(Z) = A(γZ + (1-γ)V)
    let mut fp_cfg = AttentionConfig::chacal(d, 2, 0.9);
    fp_cfg.remove_diagonal = false;
    let (a, v, y) = run_head(&fp_cfg, &x, &w);
    println!(
        "\nfixed-point residual at the solve output: {:.3e}",
        fixed_point_residual(&a, &v, &y, 0.9)
    );
    let mut noisy = y.clone();
    for val in noisy.data_mut().iter_mut().step_by(3) {
        *val += 0.1;
    }
    println!(
        "fixed-point residual after perturbing Y:   {:.3e}",
        fixed_point_residual(&a, &v, &noisy, 0.9)
    );
}
