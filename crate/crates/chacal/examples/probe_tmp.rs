use chacal::attention::AttentionKind;
use chacal::datasets::toy::{ToyConfig, ToyStream};
use chacal::datasets::{Sample, SampleSource};
use chacal::model::{Model, ModelConfig};
use chacal::training::{train, TrainConfig};
use serde_json;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind = if args.get(1).map(|s| s.as_str()) == Some("std") {
        AttentionKind::Standard
    } else {
        AttentionKind::Chacal
    };
    let layers: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let d_model: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);
    let heads: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2);
    let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let steps: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let batch: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(32);
    let seed: u64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0);
    let warmup: usize = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(150);
    let clip: f64 = args.get(10).and_then(|s| s.parse().ok()).unwrap_or(1.0);

    let toy = ToyConfig { n: 64, k: 8, seed: 7777 + seed };
    let stream = ToyStream { cfg: toy };
    let eval: Vec<Sample> = (0..64u64).map(|i| {
        let s = ToyStream { cfg: ToyConfig { seed: 99999 + seed, ..toy } };
        s.sample(i)
    }).collect();

    let cfg = ModelConfig::uniform(kind, layers, d_model, heads, d_model * 4, toy.vocab_size(), 64, 0.9);
    let mut model: Model<f32> = Model::init(cfg, 42 + seed).unwrap();
    println!("params: {}", model.param_count());

    let tcfg = TrainConfig {
        learning_rate: lr,
        batch_size: batch,
        total_steps: steps,
        warmup_steps: warmup,
        eval_interval: 50,
        eval_samples: 64,
        seed,
        stop_at_accuracy: Some(0.9995),
        grad_clip: (clip > 0.0).then_some(clip),
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let log_dir = std::path::PathBuf::from(format!("/tmp/probe_live_{kind:?}_{layers}_{d_model}_{seed}"));
    let _ = std::fs::remove_dir_all(&log_dir);
    let mut logger = chacal::training::RunLogger::create(
        &log_dir,
        &serde_json::to_value(&tcfg).unwrap(),
        "probe",
    )
    .unwrap();
    let out = train(&mut model, &stream, &eval, None, &tcfg, Some(&mut logger)).unwrap();
    for r in &out.records {
        println!("step {:5}  train {:.4}  eval {:.4}  acc {:.4}  ({:.1}s)", r.step, r.train_loss, r.eval_loss, r.token_accuracy, r.wall_clock_s);
    }
    println!(
        "DONE kind={kind:?} L={layers} d={d_model} lr={lr} steps_to_target={:?} final_acc={:.4} wall={:.1}s aborted={:?}",
        out.steps_to_target,
        out.records.last().map(|r| r.token_accuracy).unwrap_or(0.0),
        t0.elapsed().as_secs_f64(),
        out.aborted
    );
}
