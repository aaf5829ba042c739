//! Experiment runner CLI. Thin argument parsing over the library runners
//! in `chacal::experiments`; every study is equally reachable as a library
//! call or a runnable example.

use std::path::PathBuf;
use std::process::ExitCode;

use chacal::datasets::boxes::BoxesConfig;
use chacal::datasets::toy::ToyConfig;
use chacal::experiments::{
    all_passed, gen_data, run_boxes, run_eval, run_gamma_sweep, run_lm_smoke, run_theorem_check,
    run_toy_sweep, run_train, BoxesExpSpec, Check, GammaSweepSpec, LmSmokeSpec, Scale, TaskSpec,
    TheoremCheckSpec, ToySweepSpec, TrainRunSpec,
};

const USAGE: &str = "\
chacal — chain and causal attention experiments

USAGE:
    chacal <command> [flags]

COMMANDS:
    gen-data        write a dataset as JSON lines (+ vocab file for boxes)
    train           train one model from a JSON spec
    eval            score a checkpoint on a task
    sweep-toy       standard depths vs 1-layer chain-summing attention
    sweep-gamma     γ grid on the toy task
    boxes           boxes task: standard stacks vs standard+chacal
    theorem-check   layer-bound simulator vs the ceiling-log formula
    lm-smoke        character-level LM stability check

FLAGS:
    --config <path>    JSON spec (replaces the scale default)
    --seed <n>         base seed                     [default 0]
    --out <dir>        output directory
    --scale <s>        desk | paper                  [default desk]
    --repeats <n>      seeds per sweep point
    --count <n>        samples to generate (gen-data) [default 1000]
    --task <t>         toy | boxes-default | boxes-advanced (gen-data, eval)
    --max-depth <n>    theorem-check bound           [default 200]
    --corpus <path>    lm-smoke corpus file
    --checkpoint <p>   checkpoint to evaluate (eval)
";

struct Args {
    config: Option<PathBuf>,
    seed: u64,
    out: Option<PathBuf>,
    scale: Scale,
    repeats: Option<usize>,
    count: usize,
    task: String,
    max_depth: usize,
    corpus: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
}

fn parse_flags(argv: &[String]) -> Result<Args, String> {
    let mut args = Args {
        config: None,
        seed: 0,
        out: None,
        scale: Scale::Desk,
        repeats: None,
        count: 1000,
        task: "toy".into(),
        max_depth: 200,
        corpus: None,
        checkpoint: None,
    };
    let mut it = argv.iter();
    while let Some(flag) = it.next() {
        let mut value = |name: &str| {
            it.next()
                .cloned()
                .ok_or_else(|| format!("flag {name} needs a value"))
        };
        match flag.as_str() {
            "--config" => args.config = Some(PathBuf::from(value("--config")?)),
            "--seed" => {
                args.seed = value("--seed")?
                    .parse()
                    .map_err(|e| format!("--seed: {e}"))?
            }
            "--out" => args.out = Some(PathBuf::from(value("--out")?)),
            "--scale" => {
                args.scale = match value("--scale")?.as_str() {
                    "desk" => Scale::Desk,
                    "paper" => Scale::Paper,
                    other => return Err(format!("unknown scale '{other}'")),
                }
            }
            "--repeats" => {
                args.repeats = Some(
                    value("--repeats")?
                        .parse()
                        .map_err(|e| format!("--repeats: {e}"))?,
                )
            }
            "--count" => {
                args.count = value("--count")?
                    .parse()
                    .map_err(|e| format!("--count: {e}"))?
            }
            "--task" => args.task = value("--task")?,
            "--max-depth" => {
                args.max_depth = value("--max-depth")?
                    .parse()
                    .map_err(|e| format!("--max-depth: {e}"))?
            }
            "--corpus" => args.corpus = Some(PathBuf::from(value("--corpus")?)),
            "--checkpoint" => args.checkpoint = Some(PathBuf::from(value("--checkpoint")?)),
            other => return Err(format!("unknown flag '{other}'")),
        }
    }
    Ok(args)
}

fn load_spec<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("read {path:?}: {e}"))?;
    serde_json::from_str(&text).map_err(|e| format!("parse {path:?}: {e}"))
}

fn parse_task(name: &str, seed: u64) -> Result<TaskSpec, String> {
    match name {
        "toy" => Ok(TaskSpec::Toy(ToyConfig { n: 64, k: 8, seed })),
        "boxes-default" => Ok(TaskSpec::Boxes(BoxesConfig::default_variant(seed))),
        "boxes-advanced" => Ok(TaskSpec::Boxes(BoxesConfig::advanced_desk(seed))),
        other => Err(format!("unknown task '{other}'")),
    }
}

fn report_checks(checks: &[Check]) -> bool {
    for c in checks {
        println!(
            "[{}] {} — {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    all_passed(checks)
}

fn run(verb: &str, args: Args, command: &str) -> Result<bool, String> {
    match verb {
        "gen-data" => {
            let task = match args.config {
                Some(ref p) => load_spec(p)?,
                None => parse_task(&args.task, args.seed)?,
            };
            let out = args.out.unwrap_or_else(|| PathBuf::from("data"));
            let path = gen_data(&task, args.count, &out).map_err(|e| e.to_string())?;
            println!("wrote {} samples to {}", args.count, path.display());
            Ok(true)
        }
        "train" => {
            let spec: TrainRunSpec = match args.config {
                Some(ref p) => load_spec(p)?,
                None => {
                    let mut s = TrainRunSpec::desk(args.seed);
                    s.train.seed = args.seed;
                    s
                }
            };
            let out = run_train(&spec, args.out.as_deref(), command).map_err(|e| e.to_string())?;
            for r in &out.records {
                println!(
                    "step {:6}  train {:.4}  eval {:.4}  acc {:.4}{}",
                    r.step,
                    r.train_loss,
                    r.eval_loss,
                    r.token_accuracy,
                    r.exact_match
                        .map(|em| format!("  em {em:.4}"))
                        .unwrap_or_default()
                );
            }
            if let Some(reason) = &out.aborted {
                println!("aborted: {reason}");
                return Ok(false);
            }
            println!(
                "final: loss {:.4} acc {:.4}",
                out.final_eval.loss, out.final_eval.token_accuracy
            );
            Ok(true)
        }
        "eval" => {
            let checkpoint = args
                .checkpoint
                .ok_or_else(|| "eval needs --checkpoint".to_string())?;
            let task = match args.config {
                Some(ref p) => load_spec(p)?,
                None => parse_task(&args.task, args.seed)?,
            };
            let report =
                run_eval(&checkpoint, &task, args.count.min(512), 64).map_err(|e| e.to_string())?;
            println!(
                "{}",
                serde_json::json!({
                    "loss": report.loss,
                    "token_accuracy": report.token_accuracy,
                    "exact_match": report.exact_match,
                    "perplexity": report.perplexity,
                })
            );
            Ok(true)
        }
        "sweep-toy" => {
            let mut spec: ToySweepSpec = match (&args.config, args.scale) {
                (Some(p), _) => load_spec(p)?,
                (None, Scale::Desk) => ToySweepSpec::desk(args.seed),
                (None, Scale::Paper) => ToySweepSpec::paper(args.seed),
            };
            if let Some(r) = args.repeats {
                spec.repeats = r;
            }
            if args.out.is_some() {
                spec.out_dir = args.out.clone();
            }
            let results = run_toy_sweep(&spec, command).map_err(|e| e.to_string())?;
            for s in &results.summaries {
                println!(
                    "{:10} L={}  acc {:.4} (min {:.4}, max {:.4})  loss {:.4}",
                    s.attention, s.layers, s.mean_accuracy, s.min_accuracy, s.max_accuracy, s.mean_loss
                );
            }
            Ok(report_checks(&results.checks))
        }
        "sweep-gamma" => {
            let mut spec: GammaSweepSpec = match (&args.config, args.scale) {
                (Some(p), _) => load_spec(p)?,
                (None, Scale::Desk) => GammaSweepSpec::desk(args.seed),
                (None, Scale::Paper) => GammaSweepSpec::paper(args.seed),
            };
            if let Some(r) = args.repeats {
                spec.repeats = r;
            }
            if args.out.is_some() {
                spec.out_dir = args.out.clone();
            }
            let results = run_gamma_sweep(&spec, command).map_err(|e| e.to_string())?;
            for r in &results.rows {
                println!(
                    "γ={:4}  acc {:.4}  steps-to-solve {}",
                    r.gamma,
                    r.final_accuracy,
                    r.steps_to_solve
                        .map(|s| s.to_string())
                        .unwrap_or_else(|| "∞".into())
                );
            }
            Ok(report_checks(&results.checks))
        }
        "boxes" => {
            let mut spec: BoxesExpSpec = match (&args.config, args.scale) {
                (Some(p), _) => load_spec(p)?,
                (None, Scale::Desk) => BoxesExpSpec::desk(args.seed),
                (None, Scale::Paper) => BoxesExpSpec::paper(args.seed),
            };
            if let Some(r) = args.repeats {
                spec.repeats = r;
            }
            if args.out.is_some() {
                spec.out_dir = args.out.clone();
            }
            let results = run_boxes(&spec, command).map_err(|e| e.to_string())?;
            for r in &results.rows {
                println!(
                    "{:11} L={} seed={}  loss {:.4}  exact-match {:.4}  time ×{:.2}",
                    r.attention, r.layers, r.seed, r.final_loss, r.exact_match, r.time_ratio
                );
            }
            Ok(report_checks(&results.checks))
        }
        "theorem-check" => {
            let spec = match args.config {
                Some(ref p) => load_spec(p)?,
                None => TheoremCheckSpec { max_depth: args.max_depth, out_dir: args.out.clone() },
            };
            let report = run_theorem_check(&spec, command).map_err(|e| e.to_string())?;
            for (d, l) in &report.spot_values {
                println!("chain depth {d:4} -> {l} layers");
            }
            let ok = report_checks(&report.checks);
            println!("{}", if ok { "PASS" } else { "FAIL" });
            Ok(ok)
        }
        "lm-smoke" => {
            let mut spec: LmSmokeSpec = match args.config {
                Some(ref p) => load_spec(p)?,
                None => LmSmokeSpec::desk(args.seed),
            };
            if args.corpus.is_some() {
                spec.corpus_path = args.corpus.clone();
            }
            if args.out.is_some() {
                spec.out_dir = args.out.clone();
            }
            let results = run_lm_smoke(&spec, command).map_err(|e| e.to_string())?;
            println!("character vocabulary: {}", results.vocab_size);
            for r in &results.rows {
                println!("{:10} perplexity {:.2}", r.attention, r.perplexity);
            }
            Ok(report_checks(&results.checks))
        }
        other => Err(format!("unknown command '{other}'\n\n{USAGE}")),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    if argv.len() < 2 || argv[1] == "--help" || argv[1] == "-h" {
        print!("{USAGE}");
        return ExitCode::from(if argv.len() < 2 { 2 } else { 0 });
    }
    let command = argv.join(" ");
    let verb = argv[1].clone();
    match parse_flags(&argv[2..]).and_then(|args| run(&verb, args, &command)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}
