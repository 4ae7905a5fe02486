use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use dynmoe::harness::{baseline_config, evaluate, gen_task_with, sweep, train_loop, Model, RouterKind, RunConfig};
use dynmoe::telemetry::{find_runs, report_run, write_jsonl, MetricsLog, SimilaritySnapshot};
use dynmoe::{Combine, InitStrategy};

#[derive(Parser)]
#[command(name = "dynmoe", version, about = "Top-any gated MoE experiments on planted-skill tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with the configured router and write a run directory.
    Train(RunArgs),
    /// Train a fixed top-k baseline with K experts.
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "K", value_name = "K")]
        experts: usize,
        #[arg(long = "k", value_name = "k")]
        top_k: usize,
    },
    /// Evaluate a checkpoint on the held-out split of a task.
    Eval {
        checkpoint: PathBuf,
        /// Config file whose [task] section describes the task.
        task: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Aggregate run directories into plot-ready tables.
    Report { logdir: PathBuf },
    /// Run the (K, k) baseline grid plus one adaptive run.
    Sweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(value_name = "CONFIG")]
    config_pos: Option<PathBuf>,
    #[arg(long, conflicts_with = "config_pos")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Root directory for run outputs.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    max_experts: Option<usize>,
    #[arg(long)]
    check_interval: Option<usize>,
    #[arg(long, value_parser = parse_init)]
    init_strategy: Option<InitStrategy>,
    #[arg(long)]
    aux_weight: Option<f64>,
    #[arg(long, value_parser = parse_combine)]
    combine: Option<Combine>,
    #[arg(long, value_parser = parse_router)]
    router: Option<RouterKind>,
}

fn parse_init(s: &str) -> Result<InitStrategy, String> {
    s.parse().map_err(|e: dynmoe::Error| e.to_string())
}

fn parse_combine(s: &str) -> Result<Combine, String> {
    match s {
        "mean" => Ok(Combine::Mean),
        "weighted" => Ok(Combine::Weighted),
        other => Err(format!("unknown combine {other:?} (expected mean or weighted)")),
    }
}

fn parse_router(s: &str) -> Result<RouterKind, String> {
    s.parse().map_err(|e: dynmoe::Error| e.to_string())
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let path = self
            .config
            .as_ref()
            .or(self.config_pos.as_ref())
            .context("a config file is required (positional or --config)")?;
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = RunConfig::from_toml_str(&text).with_context(|| format!("bad config {}", path.display()))?;
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(m) = self.max_experts {
            cfg.train.adapt.max_experts = m;
        }
        if let Some(c) = self.check_interval {
            cfg.train.adapt.check_interval = c;
        }
        if let Some(i) = self.init_strategy {
            cfg.train.adapt.init_strategy = i;
        }
        if let Some(w) = self.aux_weight {
            cfg.train.aux_loss_weight = w;
        }
        if let Some(c) = self.combine {
            cfg.model.combine = c;
        }
        if let Some(r) = self.router {
            cfg.model.router = r;
        }
        cfg.validate().context("invalid configuration after command-line overrides")?;
        Ok(cfg)
    }
}

fn router_name(r: RouterKind) -> &'static str {
    match r {
        RouterKind::Dynmoe => "dynmoe",
        RouterKind::Topk => "topk",
    }
}

fn run_and_write(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let task = gen_task_with::<f64>(&cfg.task)?;
    let res = train_loop(&task, cfg)?;
    let summary = res.write_dir(dir, cfg)?;
    info!("wrote {}", dir.display());
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let name = format!("{}-seed{}", router_name(cfg.model.router), cfg.train.seed);
            run_and_write(&cfg, &args.out.join(name))
        }
        Command::Baseline { run, experts, top_k } => {
            let cfg = baseline_config(&run.load()?, experts, top_k)?;
            cfg.validate()?;
            let name = format!("topk-K{experts}-k{top_k}-seed{}", cfg.train.seed);
            run_and_write(&cfg, &run.out.join(name))
        }
        Command::Eval { checkpoint, task, out } => {
            if !checkpoint.is_file() {
                bail!("checkpoint {} not found", checkpoint.display());
            }
            let model = Model::<f64>::load(&checkpoint).with_context(|| format!("cannot load {}", checkpoint.display()))?;
            let cfg = RunConfig::load(&task).with_context(|| format!("bad task file {}", task.display()))?;
            let task = gen_task_with::<f64>(&cfg.task)?;
            if task.config.d != model.dim() {
                bail!("task dimension {} differs from checkpoint dimension {}", task.config.d, model.dim());
            }
            let summary = evaluate(&model, &task.eval_batch(), 0)?;
            let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
            let dir = out.join(format!("eval-{stem}"));
            fs::create_dir_all(&dir)?;
            let mut log = MetricsLog::new();
            summary.log_into(&mut log)?;
            log.write_csv(&dir.join("metrics.csv"))?;
            let sims: Vec<_> = summary
                .layers
                .iter()
                .enumerate()
                .map(|(l, e)| SimilaritySnapshot::new(0, l, &e.similarity))
                .collect();
            write_jsonl(&dir.join("similarity.jsonl"), &sims)?;
            println!("accuracy {:.4}", summary.accuracy);
            for (l, e) in summary.layers.iter().enumerate() {
                println!("layer {l}: K {} mean k {:.4}", e.experts, dynmoe::telemetry::ratio_to_f64(&e.mean_k));
            }
            println!("metrics written to {}", dir.display());
            Ok(())
        }
        Command::Report { logdir } => {
            if !logdir.is_dir() {
                bail!("no metrics found in {} (not a directory)", logdir.display());
            }
            let runs = find_runs(&logdir)?;
            if runs.is_empty() {
                bail!("no metrics found in {}", logdir.display());
            }
            for r in runs {
                let files = report_run(&r, &r.join("report")).with_context(|| format!("{}", r.display()))?;
                for f in files {
                    println!("{}", f.display());
                }
            }
            Ok(())
        }
        Command::Sweep(args) => {
            let cfg = args.load()?;
            let task = gen_task_with::<f64>(&cfg.task)?;
            let root = args.out.join(format!("sweep-seed{}", cfg.train.seed));
            let table = sweep(&task, &cfg, |name, c, res| {
                res.write_dir(&root.join(name), c)?;
                info!("{name}: accuracy {:.4}", res.final_accuracy);
                Ok(())
            })?;
            fs::write(root.join("sweep.csv"), table.to_csv())?;
            fs::write(root.join("sweep.json"), serde_json::to_vec_pretty(&table)?)?;
            print!("{}", table.to_csv());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DYNMOE_LOG_LEVEL", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
