use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use metatune::augment::AugMagnitude;
use metatune::config::RunConfig;
use metatune::eval::{evaluate, read_detections, write_detections};
use metatune::losses::LossParams;
use metatune::pipeline::{
    ablation_csv, final_evaluate, pretrain_target, run_ablation, target_task, temperature_curve_csv,
};
use metatune::proxytask::{meta_tune, parse_learned_params};
use metatune::rng;
use metatune::synthbench::{generate, read_benchmark, write_benchmark, Benchmark, Pool, ProposalConfig};
use metatune::trainer::DetectorModel;

#[derive(Parser, Debug)]
#[command(name = "metatune", version, about = "Meta-tuned classification losses for few-shot detection")]
struct Cli {
    /// `key = value` run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set episodes=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark into the output directory.
    Gen,
    /// Train the base detector head on the pretrain pool.
    Pretrain,
    /// Search loss (and augmentation) parameters on a proxy task.
    Metatune,
    /// Fine-tune on a k-shot support draw with learned (or baseline) parameters.
    Finetune,
    /// Score a detections file against the query pool.
    Eval,
    /// Run the proxy-imitation / re-init / reward-normalization grid over several seeds.
    Ablate,
    /// Sample the temperature schedule of learned parameters.
    Curves,
}

/// Failures that are the caller's fault exit with 1, everything else with 2.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .map_err(usage)?;
        cfg.merge_text(&text, path).map_err(usage)?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(anyhow!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v).map_err(usage)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(anyhow!("{what} `{}` does not exist", path.display())))
    }
}

fn load_bench(cfg: &RunConfig) -> Result<Benchmark, Failure> {
    require(&cfg.benchmark, "benchmark")?;
    read_benchmark(&cfg.benchmark).with_context(|| format!("reading benchmark {}", cfg.benchmark.display()))
        .map_err(Failure::Runtime)
}

fn load_params(cfg: &RunConfig) -> Result<(LossParams, AugMagnitude), Failure> {
    match &cfg.params {
        None => Ok((LossParams::baseline(), AugMagnitude::new(0.0)?)),
        Some(p) => {
            require(p, "params file")?;
            let text = fs::read_to_string(p)?;
            Ok(parse_learned_params(&text, p)?)
        }
    }
}

fn load_or_pretrain(cfg: &RunConfig, bench: &Benchmark) -> Result<DetectorModel, Failure> {
    match &cfg.model {
        Some(p) => {
            require(p, "model checkpoint")?;
            Ok(DetectorModel::load(p)?)
        }
        None => {
            eprintln!("no model given; pretraining on the base classes");
            Ok(pretrain_target(bench, &cfg.pretrain, &ProposalConfig::default(), cfg.seed)?)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli)?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    let out = &cfg.out;
    let proposal = ProposalConfig::default();

    match cli.command {
        Command::Gen => {
            let bench = generate(&cfg.scene, cfg.seed)?;
            write_benchmark(&bench, out)?;
            eprintln!("wrote {} images to {}", bench.images.len(), out.display());
        }
        Command::Pretrain => {
            let bench = load_bench(&cfg)?;
            let model = pretrain_target(&bench, &cfg.pretrain, &proposal, cfg.seed)?;
            model.save(&out.join("model.txt"))?;
        }
        Command::Metatune => {
            let bench = load_bench(&cfg)?;
            let meta = cfg.meta_config();
            let outcome = meta_tune(&bench, &meta, cfg.seed, cfg.workers, |stage, row| {
                if row.episode % 10 == 0 || row.episode + 1 == meta.episodes {
                    eprintln!(
                        "[{}] episode {:>4}  sigma {:.4}  best reward {:.3}  mu {:?}",
                        stage.name(),
                        row.episode,
                        row.sigma,
                        row.best_reward_raw,
                        row.mu
                    );
                }
            })?;
            let mut csv = Vec::new();
            outcome.write_trajectory(&mut csv)?;
            fs::write(out.join("trajectory.csv"), csv)?;
            fs::write(out.join("learned_params.txt"), outcome.learned_params_text())?;
            for st in &outcome.stages {
                if st.failed_trials > 0 {
                    eprintln!("[{}] {} trials failed and were skipped", st.stage.name(), st.failed_trials);
                }
            }
            print!("{}", outcome.learned_params_text());
        }
        Command::Finetune => {
            let bench = load_bench(&cfg)?;
            let (loss, aug) = load_params(&cfg)?;
            let model = load_or_pretrain(&cfg, &bench)?;
            let task = target_task(&bench, model, &proposal);
            let mut stream = rng::stream(cfg.seed, "final", &[0]);
            let (tuned, report) = task.run_trial(&task.base_model, &loss, aug, &cfg.episode, &mut stream)?;
            tuned.save(&out.join("model_finetuned.txt"))?;
            write_detections(&out.join("detections.csv"), &task.eval.detect(&tuned))?;
            fs::write(out.join("report.txt"), report.to_text())?;
            fs::write(out.join("report.csv"), report.to_csv())?;
            print!("{}", report.to_text());
            if cfg.eval_repeats > 1 {
                let s = final_evaluate(&task, &loss, aug, &cfg.episode, cfg.seed, cfg.eval_repeats)?;
                println!(
                    "mean over {} support draws: base {:.4}  novel {:.4}  HM {:.4}",
                    cfg.eval_repeats, s.map_base, s.map_novel, s.hm
                );
            }
        }
        Command::Eval => {
            let path = cfg
                .detections
                .clone()
                .ok_or_else(|| usage(anyhow!("eval needs `detections = <path>` (config or --set)")))?;
            require(&path, "detections file")?;
            let bench = load_bench(&cfg)?;
            let dets = read_detections(&path)?;
            let kinds: Vec<_> = bench.classes.iter().map(|c| (c.id, c.kind)).collect();
            let report = evaluate(&dets, &bench.annotations, &bench.image_ids(Pool::Query), &kinds, 0.5);
            fs::write(out.join("report.txt"), report.to_text())?;
            fs::write(out.join("report.csv"), report.to_csv())?;
            print!("{}", report.to_text());
        }
        Command::Ablate => {
            let bench = load_bench(&cfg)?;
            let model = load_or_pretrain(&cfg, &bench)?;
            let task = target_task(&bench, model, &proposal);
            let seeds: Vec<u64> = (0..cfg.ablate_seeds as u64).map(|i| cfg.seed + i).collect();
            let results = run_ablation(&bench, &task, &cfg.meta_config(), &seeds, cfg.workers, cfg.eval_repeats, |arm, seed, hm| {
                eprintln!("{}  seed {seed}  HM {hm:.4}", arm.label());
            })?;
            fs::write(out.join("ablation.csv"), ablation_csv(&results))?;
            for r in &results {
                println!("{}  HM {:.4} ± {:.4}", r.arm.label(), r.mean_hm, r.ci);
            }
        }
        Command::Curves => {
            let (loss, _) = load_params(&cfg)?;
            fs::write(out.join("curve.csv"), temperature_curve_csv(&loss)?)?;
        }
    }
    Ok(())
}
