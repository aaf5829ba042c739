//! Layer-count lower bound, mechanized.
//!
//! Each attention layer lets a node on a dependency chain double the span
//! it knows about (plus one). The simulator below plays that argument out
//! move by move and agrees exactly with the closed form ⌈log₂(depth+1)⌉.
//!
//! ```bash
//! cargo run --release -p chacal --example theorem_check
//! ```

use chacal::graphs::{
    min_layers_by_simulation, min_layers_for_depth, simulate_receptive_field,
    theorem_counterexample, ComputationGraph,
};

fn main() {
    println!("receptive field of the chain head after L layers (chain depth 40):");
    for layers in 0..=6 {
        let reach = simulate_receptive_field(40, layers);
        println!("  L = {layers}:  knows {reach:2} steps back");
    }

    println!("\nminimum layers per chain depth (simulated vs formula):");
    for depth in [0usize, 1, 3, 7, 8, 15, 31, 100, 200] {
        let simulated = min_layers_by_simulation(depth);
        let formula = min_layers_for_depth(depth as u64);
        println!("  depth {depth:3}  ->  {simulated} layers (formula {formula})");
        assert_eq!(simulated, formula);
    }

    match theorem_counterexample(500) {
        None => println!("\nall chain depths up to 500 agree with ⌈log₂(depth+1)⌉"),
        Some(d) => println!("\ncounterexample at depth {d}!"),
    }

    // the bound is a property of the graph, not just of chains
    let diamond = ComputationGraph::new(6, vec![(0, 1), (0, 2), (1, 3), (2, 3), (3, 4), (4, 5)])
        .unwrap();
    println!(
        "\ndiamond-with-tail graph: depth {} -> at least {} layers",
        diamond.depth(),
        diamond.l_min()
    );
}
