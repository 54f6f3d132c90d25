use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use adaseg_core::data::{Dataset, SplitId};
use adaseg_core::model::load_checkpoint;
use adaseg_core::numerics::{run_suite, GradCheckConfig, SuiteConfig};
use adaseg_core::pipeline::{evaluate, load_dataset, Experiment, RunConfig};
use adaseg_core::{Error, ModelParams};
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

const DATA_ENV: &str = "LABOR_DATA_DIR";
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "adaseg", version, about = "Active domain adaptation for semantic segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set epochs.retrain=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Root for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic source/target dataset into the data directory.
    GenData {
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train the task model on the source domain.
    Pretrain,
    /// Run every configured stage with the simulated oracle.
    Run {
        /// Start from this task checkpoint instead of pretraining.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Generate the dataset first if it is missing.
        #[arg(long)]
        generate: bool,
    },
    /// Propose pixels for one stage from a task checkpoint.
    Select {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        stage: usize,
    },
    /// Per-class IoU of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "target/val")]
        split: SplitId,
    },
    /// Compare analytic and finite-difference gradients of every loss.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 50)]
        samples: usize,
    },
    /// Serve the annotation API for a human-in-the-loop run.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value_t = adaseg_service::DEFAULT_PORT)]
        port: u16,
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
}

fn resolve_config(common: &Common) -> adaseg_core::Result<RunConfig> {
    let base = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.set)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if cfg.data.dir.is_none() {
        let dir = std::env::var_os(DATA_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"));
        cfg.data.dir = Some(dir);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_dir(cfg: &RunConfig) -> &Path {
    cfg.data.dir.as_deref().expect("resolved config names a data directory")
}

fn load_data(cfg: &RunConfig) -> anyhow::Result<Arc<Dataset>> {
    let data = load_dataset(cfg)?;
    if data.manifest.spec != cfg.data.scene || data.manifest.counts != cfg.data.counts {
        log::warn!("dataset at {} was generated with a different scene spec than the config", data_dir(cfg).display());
    }
    Ok(Arc::new(data))
}

fn load_task(path: &Path) -> anyhow::Result<ModelParams> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn gen_data(cfg: &RunConfig, force: bool) -> anyhow::Result<()> {
    let dir = data_dir(cfg);
    if dir.join("dataset.json").is_file() && !force {
        bail!("{} already holds a dataset (use --force to replace it)", dir.display());
    }
    let data = Dataset::generate(&cfg.data.scene, &cfg.data.counts, cfg.execution)?;
    data.save(dir)?;
    let c = &data.manifest.counts;
    println!(
        "wrote {}: {}×{} px, {} classes, source {}+{}, target {}+{}",
        dir.display(),
        cfg.data.scene.width,
        cfg.data.scene.height,
        data.classes(),
        c.source_train,
        c.source_val,
        c.target_train,
        c.target_val
    );
    Ok(())
}

fn pretrain(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let mut exp = Experiment::new(cfg.clone(), load_data(cfg)?, Some(out))?;
    let record = exp.pretrain(None)?.clone();
    println!("source val mIoU {:.4}", record.source_val.miou);
    println!("target val mIoU {:.4}", record.target_val.miou);
    println!("checkpoint {}", exp.run_dir().expect("run dir").join("checkpoints/pretrain.bin").display());
    Ok(())
}

fn run(cfg: &RunConfig, out: &Path, pretrained: Option<&Path>, generate: bool) -> anyhow::Result<()> {
    if generate && !data_dir(cfg).join("dataset.json").is_file() {
        gen_data(cfg, false)?;
    }
    let data = load_data(cfg)?;
    let model = pretrained.map(load_task).transpose()?;
    let mut exp = Experiment::new(cfg.clone(), data, Some(out))?;
    exp.pretrain(model)?;
    let run_dir = exp.run_dir().expect("run dir").to_path_buf();
    let summary = exp.run()?;
    println!("stage  mIoU    annotated");
    println!("{:>5}  {:.4}  {:>9}", 0, summary.pretrain.target_val.miou, 0);
    for r in &summary.records {
        println!("{:>5}  {:.4}  {:>9}", r.stage, r.miou, r.budget.cumulative);
    }
    println!("summary {}", run_dir.join("summary.json").display());
    Ok(())
}

fn select(cfg: &RunConfig, out: &Path, checkpoint: &Path, stage: usize) -> anyhow::Result<()> {
    if stage == 0 {
        bail!("stages are numbered from 1");
    }
    let model = load_task(checkpoint)?;
    let mut exp = Experiment::new(cfg.clone(), load_data(cfg)?, Some(out))?;
    exp.pretrain(Some(model))?;
    let proposal = exp.propose(stage)?;
    let total: usize = proposal.selections.iter().map(|s| s.points.len()).sum();
    println!(
        "{} pixels proposed over {} images",
        total,
        proposal.selections.len()
    );
    if let Some(stats) = &proposal.selector {
        println!("inconsistent pixels {}", stats.mask_pixels);
    }
    println!(
        "selections {}",
        exp.run_dir().expect("run dir").join(format!("selections/stage{stage}.jsonl")).display()
    );
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: &Path, split: SplitId) -> anyhow::Result<()> {
    let data = load_data(cfg)?;
    let model = load_task(checkpoint)?;
    let images = data.split(split);
    if images.is_empty() {
        bail!("split {split} is empty");
    }
    let result = evaluate(&model, images, cfg.execution)?;
    println!("split {split}, {} images", images.len());
    print!("{}", result.table(&data.manifest.class_names));
    Ok(())
}

fn grad_check(cfg: &RunConfig, instances: usize, size: usize, samples: usize) -> anyhow::Result<bool> {
    let suite = SuiteConfig {
        instances,
        size,
        seed: cfg.seed,
        check: GradCheckConfig {
            samples,
            ..GradCheckConfig::default()
        },
        ..SuiteConfig::default()
    };
    let reports = run_suite(&suite)?;
    let mut ok = true;
    println!("loss     max rel error  checked  kinks");
    for r in &reports {
        let name = serde_json::to_value(r.objective)?;
        let pass = r.max_rel_error < GRAD_TOLERANCE;
        ok &= pass;
        println!(
            "{:<8} {:>13.3e}  {:>7}  {:>5}  {}",
            name.as_str().unwrap_or("?"),
            r.max_rel_error,
            r.checked,
            r.skipped_kinks,
            if pass { "ok" } else { "FAIL" }
        );
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("max relative error {worst:.3e} (tolerance {GRAD_TOLERANCE:e})");
    Ok(ok)
}

fn serve(cfg: &RunConfig, out: &Path, host: std::net::IpAddr, port: u16, pretrained: Option<&Path>) -> anyhow::Result<()> {
    let data = load_data(cfg)?;
    let model = pretrained.map(load_task).transpose()?;
    let session = adaseg_service::Session::start(cfg.clone(), data, model, Some(out))?;
    let state = adaseg_service::AppState::new(session);
    let addr = SocketAddr::new(host, port);
    let rt = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    rt.block_on(adaseg_service::serve(state, addr))
        .with_context(|| format!("serving on {addr}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match resolve_config(&cli.common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("see `adaseg --help` for usage");
            return ExitCode::from(2);
        }
    };
    log::info!("resolved config:\n{}", cfg.to_json_pretty());
    let out = cli.common.out.as_path();
    let result = match &cli.command {
        Command::GenData { force } => gen_data(&cfg, *force),
        Command::Pretrain => pretrain(&cfg, out),
        Command::Run { pretrained, generate } => run(&cfg, out, pretrained.as_deref(), *generate),
        Command::Select { checkpoint, stage } => select(&cfg, out, checkpoint, *stage),
        Command::Eval { checkpoint, split } => eval(&cfg, checkpoint, *split),
        Command::GradCheck {
            instances,
            size,
            samples,
        } => match grad_check(&cfg, *instances, *size, *samples) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check failed");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
        Command::Serve {
            host,
            port,
            pretrained,
        } => serve(&cfg, out, *host, *port, pretrained.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let config_error = e.downcast_ref::<Error>().is_some_and(|e| matches!(e, Error::Config(_)));
            eprintln!("error: {e:#}");
            if config_error {
                eprintln!("see `adaseg --help` for usage");
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
