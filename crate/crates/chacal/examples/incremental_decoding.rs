//! Batched solve vs per-token forward substitution.
//!
//! Prefill solves the prompt's triangular block in one shot; each decoded
//! token then costs a single substitution row against the cached solution.
//! The logits must match the full batched forward, and the per-step work
//! must grow linearly in the cached length.
//!
//! ```bash
//! cargo run --release -p chacal --example incremental_decoding
//! ```

use chacal::model::{Model, ModelConfig};
use chacal::numcore::tensor;
use chacal::rng::Rng;

fn main() {
    // standard layer below a chain-summing layer, as used on the boxes task
    let cfg = ModelConfig::standard_then_chacal(2, 32, 2, 64, 50, 96, 0.9);
    let model: Model<f32> = Model::init(cfg, 3).unwrap();

    let mut rng = Rng::new(4);
    let prompt: Vec<usize> = (0..12).map(|_| rng.below(50)).collect();
    let continuation: Vec<usize> = (0..20).map(|_| rng.below(50)).collect();

    let mut all = prompt.clone();
    all.extend(&continuation);
    let full = model.forward(&all).unwrap();

    let (mut logits, mut state) = model.prefill(&prompt).unwrap();
    let mut worst = 0.0f64;
    for (j, &tok) in continuation.iter().enumerate() {
        let reference = tensor::slice_rows(&full, prompt.len() + j - 1, 1).unwrap();
        worst = worst.max(logits.max_abs_diff(&reference));
        logits = model.decode_step(&mut state, tok).unwrap();
        if (j + 1) % 5 == 0 {
            println!(
                "decoded {:2} tokens  cache {:2}  per-step MACs {:6}",
                j + 1,
                state.len(),
                state.macs_last_step
            );
        }
    }
    let reference = tensor::slice_rows(&full, all.len() - 1, 1).unwrap();
    worst = worst.max(logits.max_abs_diff(&reference));
    println!("\nmax |batched - incremental| over every position: {worst:.3e}");
    assert!(worst < 1e-4);

    // greedy generation runs on the same machinery
    let generated = model.generate(&prompt, 8, None).unwrap();
    println!("greedy continuation of the prompt: {generated:?}");
}
