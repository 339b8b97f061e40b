//! `dda`: pretrain, search, retrain and evaluate from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dda_core::augment::{finalize_policy, render_policy, DeployedPolicy};
use dda_core::contrastive::{Checkpoint, EpochLog, PretrainOutput};
use dda_core::eval::{make_toy_corpus, write_packed, MetricsLog};
use dda_core::lid::{estimate_points, median, LidEstimator};
use dda_core::search::{
    dda_search, evaluate_arm, pretrain_stage, retrain_stage, run_pipeline, selfaugment_search, ObjectiveKind,
    PipelineConfig,
};
use serde_json::json;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] dda_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Input(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "dda", version, about = "Differentiable augmentation search against an LID objective")]
struct Cli {
    /// Pipeline configuration (.toml or .json); defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Where artifacts, metrics and the config snapshot go. Default: runs/<run id>.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Contrastive pretraining with base views only.
    Pretrain,
    /// Policy search on a frozen pretrained encoder.
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Trains a fresh encoder with a deployed policy.
    Retrain {
        #[arg(long)]
        policy: PathBuf,
    },
    /// Pretrain, search, retrain and evaluate.
    Pipeline,
    /// Linear probe, kNN accuracy and representation LID of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-point LID estimates of a CSV matrix, one row per point.
    LidEstimate {
        input: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum)]
        estimator: Option<Estimator>,
    },
    /// Prints a policy JSON file as a table.
    RenderPolicy { policy: PathBuf },
    /// Writes the procedural toy corpus in the packed format.
    MakeToy {
        output: PathBuf,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Search { .. } => "search",
            Command::Retrain { .. } => "retrain",
            Command::Pipeline => "pipeline",
            Command::Eval { .. } => "eval",
            Command::LidEstimate { .. } => "lid-estimate",
            Command::RenderPolicy { .. } => "render-policy",
            Command::MakeToy { .. } => "make-toy",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Estimator {
    Mom,
    Mle,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Output directory plus the metrics stream and snapshot every command writes.
struct Run {
    dir: PathBuf,
    config: PipelineConfig,
    metrics: MetricsLog,
}

impl Run {
    fn new(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(p) => PipelineConfig::from_path(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = cli.seed {
            config.seed = s;
        }
        config.validate()?;
        let dir = cli
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(config.run_id()));
        fs::create_dir_all(&dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
        config.out_dir = Some(dir.clone());
        let metrics = MetricsLog::new(config.run_id())?;
        Ok(Self { dir, config, metrics })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn log_training(&mut self, stage: &str, log: &[EpochLog]) -> Result<()> {
        for e in log {
            self.metrics.push(stage, e.epoch, "loss", e.loss)?;
            self.metrics.push(stage, e.epoch, "mean_lid", e.mean_lid)?;
            self.metrics.push(stage, e.epoch, "median_lid", e.median_lid)?;
            self.metrics.push(stage, e.epoch, "collapse", f64::from(u8::from(e.collapsed)))?;
        }
        Ok(())
    }

    fn checkpoint(&self, name: &str, out: &PretrainOutput, epochs: usize, stage: &str) -> Result<()> {
        let mut ck = Checkpoint::new(out.model.clone(), epochs);
        ck.meta = json!({"config_hash": self.config.hash(), "seed": self.config.seed, "stage": stage});
        ck.save(&self.path(name))?;
        Ok(())
    }

    fn finish(&self, command: &str, args: serde_json::Value) -> Result<()> {
        let snapshot = serde_json::to_string_pretty(&self.config.resolved()).map_err(dda_core::Error::from)?;
        write(&self.path("config.json"), snapshot)?;
        let cmd = json!({"command": command, "args": args, "config_hash": self.config.hash()});
        write(&self.path("command.json"), format!("{cmd:#}"))?;
        self.metrics.write(&self.path("metrics.csv"))?;
        Ok(())
    }
}

fn parse_matrix(path: &Path) -> Result<(Vec<f64>, usize)> {
    let text = read(path)?;
    let mut values = Vec::new();
    let mut dim = None;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let row = match row {
            Ok(r) => r,
            Err(_) if line_no == 0 => continue,
            Err(e) => return Err(CliError::Input(format!("{}:{}: {e}", path.display(), line_no + 1))),
        };
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(CliError::Input(format!(
                    "{}:{}: expected {d} columns, found {}",
                    path.display(),
                    line_no + 1,
                    row.len()
                )))
            }
            Some(_) => {}
        }
        values.extend(row);
    }
    let dim = dim.ok_or_else(|| CliError::Input(format!("{}: no rows", path.display())))?;
    Ok((values, dim))
}

fn run(cli: &Cli) -> Result<()> {
    let mut run = Run::new(cli)?;
    let c = run.config.resolved();
    let command = cli.command.name();
    let args = match &cli.command {
        Command::Pretrain => {
            let corpus = c.data.load()?;
            let out = pretrain_stage(&corpus, &c)?;
            run.log_training("pretrain", &out.log)?;
            run.checkpoint("initial.ckpt", &out, c.pretrain.epochs, "pretrain")?;
            json!({})
        }
        Command::Search { checkpoint } => {
            let corpus = c.data.load()?;
            let ck = Checkpoint::load(checkpoint)?;
            let encoder = &ck.model.encoder;
            let search = match c.search.objective {
                ObjectiveKind::Dda => dda_search(encoder, &corpus.images, &c.search)?,
                ObjectiveKind::SelfAugment => {
                    let (out, obj) = selfaugment_search(encoder, &ck.model.projector, &corpus.images, &c.search)?;
                    run.metrics.push("rotation", 0, "held_out_accuracy", obj.head.accuracy)?;
                    out
                }
            };
            for e in &search.log {
                run.metrics.push("search", e.epoch, "loss", e.loss)?;
                run.metrics.push("search", e.epoch, "mean_lid", e.mean_lid)?;
                run.metrics.push("search", e.epoch, "collapse", f64::from(u8::from(e.collapsed)))?;
            }
            let policy = finalize_policy(&search.params, c.finalize, &c.search.augment)?;
            let params = json!({"config_hash": c.hash(), "seed": c.seed, "params": search.params.to_record()});
            write(&run.path("search_params.json"), format!("{params:#}"))?;
            write(&run.path("policy.json"), policy.to_json_pretty())?;
            write(&run.path("policy.txt"), render_policy(&policy))?;
            print!("{}", render_policy(&policy));
            json!({"checkpoint": checkpoint})
        }
        Command::Retrain { policy } => {
            let corpus = c.data.load()?;
            let policy_json = read(policy)?;
            let deployed = DeployedPolicy::from_json(&policy_json)?;
            let out = retrain_stage(&corpus, &deployed, &c)?;
            run.log_training("retrain", &out.log)?;
            run.checkpoint("final.ckpt", &out, c.retrain_config().epochs, "retrain")?;
            write(&run.path("policy.json"), deployed.to_json_pretty())?;
            json!({"policy": policy})
        }
        Command::Pipeline => {
            let corpus = c.data.load()?;
            let art = run_pipeline(&c, &corpus)?;
            print!("{}", art.report.summary());
            // the pipeline writes its own metrics; keep them rather than an empty stream
            run.metrics = art.metrics;
            json!({})
        }
        Command::Eval { checkpoint } => {
            let corpus = c.data.load()?;
            let ck = Checkpoint::load(checkpoint)?;
            let split = corpus.split(c.probe.train_fraction, c.seed)?;
            let arm = evaluate_arm("eval", &ck.model.encoder, &corpus, &split, &c, f64::NAN)?;
            run.metrics.push("eval", 0, "probe_accuracy", arm.probe_accuracy)?;
            run.metrics.push("eval", 0, "knn_accuracy", arm.knn_accuracy)?;
            run.metrics.push("eval", 0, "median_lid", arm.median_lid)?;
            run.metrics.push("eval", 0, "collapsed_fraction", arm.collapsed_fraction)?;
            println!(
                "probe {:.4}  knn {:.4}  median LID {:.3}  collapsed {:.3}",
                arm.probe_accuracy, arm.knn_accuracy, arm.median_lid, arm.collapsed_fraction
            );
            json!({"checkpoint": checkpoint})
        }
        Command::LidEstimate { input, k, estimator } => {
            let mut lid = c.eval_lid.clone();
            if let Some(k) = k {
                lid.k = *k;
            }
            if let Some(e) = estimator {
                lid.estimator = match e {
                    Estimator::Mom => LidEstimator::Mom,
                    Estimator::Mle => LidEstimator::Mle,
                };
            }
            let (points, dim) = parse_matrix(input)?;
            let est = estimate_points(&points, dim, &lid)?;
            let mut csv = String::from("query_index,estimate,collapse_flag\n");
            for e in &est {
                csv.push_str(&format!("{},{},{}\n", e.query, e.estimate, u8::from(e.collapsed)));
            }
            write(&run.path("estimates.csv"), &csv)?;
            print!("{csv}");
            let values: Vec<f64> = est.iter().map(|e| e.estimate).collect();
            let collapsed = est.iter().filter(|e| e.collapsed).count() as f64 / est.len() as f64;
            run.metrics.push("lid", 0, "median_estimate", median(&values))?;
            run.metrics.push("lid", 0, "collapsed_fraction", collapsed)?;
            run.metrics.push("lid", 0, "n_points", est.len() as f64)?;
            json!({"input": input, "k": lid.k, "estimator": lid.estimator})
        }
        Command::RenderPolicy { policy } => {
            let deployed = DeployedPolicy::from_json(&read(policy)?)?;
            let text = render_policy(&deployed);
            write(&run.path("policy.txt"), &text)?;
            print!("{text}");
            run.metrics.push("render", 0, "n_subpolicies", deployed.subpolicies.len() as f64)?;
            json!({"policy": policy})
        }
        Command::MakeToy {
            output,
            per_class,
            resolution,
        } => {
            let per_class = per_class.unwrap_or(c.data.toy_per_class);
            let resolution = resolution.unwrap_or(c.data.resolution);
            let seed = cli.seed.unwrap_or(c.data.toy_seed);
            let corpus = make_toy_corpus(seed, per_class, resolution)?;
            write_packed(&corpus, output)?;
            run.metrics.push("make-toy", 0, "n_images", corpus.len() as f64)?;
            run.metrics.push("make-toy", 0, "n_classes", corpus.n_classes() as f64)?;
            json!({"output": output, "per_class": per_class, "resolution": resolution, "seed": seed})
        }
    };
    run.finish(command, args)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {} failed: {e}", cli.command.name());
            ExitCode::from(2)
        }
    }
}
