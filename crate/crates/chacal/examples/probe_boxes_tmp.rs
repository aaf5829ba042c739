use chacal::datasets::boxes::{BoxesConfig, BoxesStream, OpsCount};
use chacal::datasets::{GenerationCase, Sample, SampleSource};
use chacal::model::{Model, ModelConfig};
use chacal::training::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let chacal_stack = args.get(1).map(|s| s.as_str()) == Some("chacal");
    let d_model: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let heads: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let steps: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let batch: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(16);
    let max_ops: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(15);
    let seed: u64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0);

    let mut boxes = BoxesConfig::advanced_desk(4242 + seed);
    boxes.ops = OpsCount::LogUniform { max: max_ops };
    let stream = BoxesStream::new(boxes.clone());
    println!("vocab {}", stream.vocab_size());
    println!("max len over 500 samples: {}", stream.max_len_estimate(500));

    let eval_stream = BoxesStream::new(BoxesConfig { seed: 999_999 + seed, ..boxes.clone() });
    let eval: Vec<Sample> = (0..64u64).map(|i| eval_stream.sample(i)).collect();
    let cases: Vec<GenerationCase> = (0..96u64).map(|i| eval_stream.generation_case(i)).collect();

    let cfg = if chacal_stack {
        ModelConfig::standard_then_chacal(2, d_model, heads, d_model * 4, stream.vocab_size(), 256, 0.9)
    } else {
        ModelConfig::uniform(
            chacal::attention::AttentionKind::Standard,
            2, d_model, heads, d_model * 4, stream.vocab_size(), 256, 0.0,
        )
    };
    let mut model: Model<f32> = Model::init(cfg, 42 + seed).unwrap();
    println!("params {}", model.param_count());

    let tcfg = TrainConfig {
        learning_rate: lr,
        batch_size: batch,
        total_steps: steps,
        warmup_steps: 200,
        eval_interval: 200,
        eval_samples: 64,
        exact_match_samples: 96,
        seed,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &stream, &eval, Some(&cases), &tcfg, None).unwrap();
    for r in &out.records {
        println!(
            "step {:5}  train {:.4}  eval {:.4}  acc {:.4}  em {:.4}  ({:.0}s)",
            r.step, r.train_loss, r.eval_loss, r.token_accuracy,
            r.exact_match.unwrap_or(0.0), r.wall_clock_s
        );
    }
    println!(
        "DONE chacal_stack={chacal_stack} d={d_model} lr={lr} final_em={:.4} wall={:.0}s aborted={:?}",
        out.records.last().and_then(|r| r.exact_match).unwrap_or(0.0),
        out.wall_clock_s,
        out.aborted
    );
}
