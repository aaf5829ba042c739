use chacal::attention::AttentionKind;
use chacal::datasets::toy::{ToyConfig, ToyStream};
use chacal::datasets::SampleSource;
use chacal::model::{Model, ModelConfig};
use chacal::numcore::{Tape, Tensor};
use chacal::training::{adam_step, clip_global_norm, lr_at, AdamHyper, AdamState};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let layers: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let d_model: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(300);
    let clip: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let lr0: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let toy = ToyConfig { n: 64, k: 8, seed: 7777 };
    let stream = ToyStream { cfg: toy };
    let cfg = ModelConfig::uniform(AttentionKind::Standard, layers, d_model, d_model / 32, d_model * 4, 64, 64, 0.9);
    let mut model: Model<f32> = Model::init(cfg, 42).unwrap();
    let shapes: Vec<Vec<usize>> = {
        let mut v = Vec::new();
        model.for_each_param(|_, t| v.push(t.shape().to_vec()));
        v
    };
    let mut state = AdamState::for_shapes(&shapes);
    let hyper = AdamHyper::default();
    let batch = 32;

    for step in 1..=steps {
        let mut grads: Vec<Tensor<f32>> = shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
        let mut loss_sum = 0.0;
        for b in 0..batch {
            let sample = stream.sample(((step - 1) * batch + b) as u64);
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let loss = model
                .loss_graph(&mut tape, &vars, &sample.tokens, &sample.targets, &sample.loss_mask)
                .unwrap();
            loss_sum += tape.value(loss).item() as f64;
            tape.backward(loss).unwrap();
            for (acc, var) in grads.iter_mut().zip(vars.ordered()) {
                if let Some(g) = tape.take_grad(var) {
                    for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
        }
        for g in &mut grads {
            for v in g.data_mut() {
                *v /= batch as f32;
            }
        }
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if clip > 0.0 {
            clip_global_norm(&mut grads, clip);
        }
        let lr = lr_at(step, lr0, 150);
        let mut params = model.params_mut();
        adam_step(&mut params, &grads, &mut state, &hyper, lr, step).unwrap();
        if step % 20 == 0 || step <= 5 {
            println!(
                "step {step:4}  loss {:.4}  pre-clip grad norm {norm:.3}",
                loss_sum / batch as f64
            );
        }
    }
}
