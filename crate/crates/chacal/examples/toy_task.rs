//! Train one chain-summing layer on the permutation-chain task.
//!
//! Sequences of 4 blocks of 8: block 0 holds values, each later block holds
//! shuffled references into the block before it. Resolving a position in
//! the last block takes 3 hops, so a standard transformer needs
//! ⌈log₂(3+1)⌉ = 2 layers — but one ChaCAL layer suffices, because the
//! solve sums the whole reference chain in a single attention application.
//! Takes a minute or two on one CPU core.
//!
//! ```bash
//! cargo run --release -p chacal --example toy_task
//! ```

use chacal::attention::AttentionKind;
use chacal::datasets::toy::{toy_sample_graph, ToyConfig, ToyStream};
use chacal::datasets::{Sample, SampleSource};
use chacal::model::{Model, ModelConfig};
use chacal::training::{train, TrainConfig};

fn main() {
    let toy = ToyConfig { n: 32, k: 8, seed: 21 };
    let stream = ToyStream { cfg: toy };

    let sample = {
        let s = stream.sample(0);
        chacal::datasets::toy::ToySample {
            tokens: s.tokens,
            targets: s.targets,
            loss_mask: s.loss_mask,
        }
    };
    let graph = toy_sample_graph(&toy, &sample).unwrap();
    println!(
        "task: {} blocks of {}, dependency depth {}, layer bound {}",
        toy.blocks(),
        toy.k,
        graph.depth(),
        graph.l_min()
    );

    let eval: Vec<Sample> = {
        let eval_stream = ToyStream { cfg: ToyConfig { seed: 9_999, ..toy } };
        (0..48u64).map(|i| eval_stream.sample(i)).collect()
    };

    let model_cfg = ModelConfig::uniform(
        AttentionKind::Chacal,
        1,
        48,
        2,
        192,
        toy.vocab_size(),
        toy.n,
        0.9,
    );
    let mut model: Model<f32> = Model::init(model_cfg, 5).unwrap();
    println!("1-layer ChaCAL model, {} parameters\n", model.param_count());

    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 32,
        total_steps: 800,
        warmup_steps: 100,
        eval_interval: 50,
        eval_samples: 48,
        stop_at_accuracy: Some(0.9995),
        ..TrainConfig::default()
    };
    let out = train(&mut model, &stream, &eval, None, &cfg, None).unwrap();
    for r in &out.records {
        println!(
            "step {:4}  train loss {:.4}  eval loss {:.4}  token accuracy {:.4}",
            r.step, r.train_loss, r.eval_loss, r.token_accuracy
        );
    }
    match out.steps_to_target {
        Some(step) => println!("\nsolved (100% token accuracy) at step {step}"),
        None => println!("\nnot solved within the step budget"),
    }
}
