//! `lorafed` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime or verification failure, 2 bad
//! configuration or usage.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lorafed::config::ExperimentConfig;
use lorafed::fedsim::{ablation_suite, prepare_data, run_experiment, RunOptions};
use lorafed::partition::partition_stats;
use lorafed::report::{self, MetricsReport, RunManifest};
use lorafed::verify::{self, Fault, SuiteOptions};
use lorafed::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "lorafed", version, about = "Federated continual fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment (or a placement sweep) and write its reports.
    Run(RunArgs),
    /// Check the aggregation identities and gradients on random instances.
    Verify(VerifyArgs),
    /// Write the client-by-class sample counts of every task.
    PartitionPreview(PreviewArgs),
    /// Compare all aggregation variants on shared seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML config file; built-in defaults are used when omitted.
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.rounds=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace the configured seeds. Repeatable.
    #[arg(long = "seed", value_name = "SEED")]
    seeds: Vec<u64>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut all = self.overrides.clone();
        all.extend_from_slice(extra);
        if !self.seeds.is_empty() {
            let list: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
            all.push(format!("seeds=[{}]", list.join(",")));
        }
        base.with_overrides(&all)
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Aggregation strategy, overriding the config.
    #[arg(long)]
    strategy: Option<String>,
    /// Worker threads for client training; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Expand the config's [sweep] lists into one run per combination.
    #[arg(long)]
    sweep: bool,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Random instances per identity.
    #[arg(long, default_value_t = 500)]
    trials: usize,
    /// Largest client count in random instances.
    #[arg(long, default_value_t = 16)]
    max_k: usize,
    /// Random model configurations for the composed gradient check.
    #[arg(long, default_value_t = 50)]
    model_configs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Debug, Args)]
struct PreviewArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "partitions")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                let e = match e.kind() {
                    std::io::ErrorKind::AlreadyExists => std::io::Error::new(
                        e.kind(),
                        "output directory is locked by another run; remove the lock file if that run is gone",
                    ),
                    _ => e,
                };
                Error::io(&path, e)
            })?;
        Ok(DirLock(path))
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn variant_dir_name(index: usize, cfg: &ExperimentConfig) -> String {
    let blocks: String = cfg
        .lora
        .blocks
        .to_string()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect();
    let matrices: Vec<&str> = cfg.lora.matrices.iter().map(|m| m.name()).collect();
    format!("{index:02}_{blocks}_{}", matrices.join("-"))
}

fn run_one(cfg: &ExperimentConfig, dir: &Path, workers: usize) -> Result<()> {
    let _lock = DirLock::acquire(dir)?;
    report::write_file(dir, report::CONFIG_FILE, &cfg.to_toml_string()?)?;
    report::write_file(dir, report::MANIFEST_FILE, &RunManifest::new(cfg, dir).to_json()?)?;
    let outcome = run_experiment(
        cfg,
        &RunOptions {
            workers,
            record_weights: false,
        },
    )?;
    let metrics = MetricsReport::from_outcome(&outcome)?;
    report::write_file(dir, report::METRICS_FILE, &metrics.to_json()?)?;
    report::write_file(dir, report::TRACE_FILE, &report::trace_csv(&outcome))?;
    report::write_file(dir, report::TIMING_FILE, &report::timing_json(&outcome)?)?;
    println!(
        "{}: FAA {:.4} ± {:.4}, AIA {:.4} ± {:.4} over {} seed(s) -> {}",
        metrics.strategy,
        metrics.mean.faa,
        metrics.std.faa,
        metrics.mean.aia,
        metrics.std.aia,
        outcome.seeds.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let extra: Vec<String> = args.strategy.iter().map(|s| format!("strategy=\"{s}\"")).collect();
    let cfg = args.config.load(&extra)?;
    let workers = args.workers.unwrap_or_else(default_workers);
    if !args.sweep {
        return run_one(&cfg, &args.out, workers);
    }
    if cfg.sweep.is_none() {
        return Err(Error::Config("--sweep needs a [sweep] section in the config".into()));
    }
    for (i, v) in cfg.sweep_variants().iter().enumerate() {
        run_one(v, &args.out.join(variant_dir_name(i, v)), workers)?;
    }
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    let opts = SuiteOptions {
        trials: args.trials,
        max_k: args.max_k,
        model_configs: args.model_configs,
        seed: args.seed,
        fault: args.inject_fault.then_some(Fault::FlipResidualSign),
    };
    if opts.trials == 0 || opts.max_k == 0 {
        return Err(Error::Usage("--trials and --max-k must be at least 1".into()));
    }
    let results = verify::run_suite(&opts)?;
    print!("{}", verify::format_table(&results));
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    for r in &failed {
        eprintln!(
            "FAILED {}: worst {:e} against tolerance {:e}",
            r.name, r.worst, r.tolerance
        );
    }
    Ok(failed.is_empty())
}

fn cmd_partition_preview(args: &PreviewArgs) -> Result<()> {
    let cfg = args.config.load(&[])?;
    let seed = cfg.seeds[0];
    let data = prepare_data(&cfg, seed)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    println!("seed {seed}, scheme {:?}", cfg.clients.scheme());
    for t in 0..data.tasks.num_tasks() {
        let path = report::write_file(&args.out, &report::partition_file(t + 1), &report::partition_csv(&data, t)?)?;
        let stats = partition_stats(&data.shards[t], &data.train.labels, data.train.num_classes)?;
        let entropy = stats.entropy.iter().sum::<f64>() / stats.entropy.len() as f64;
        println!(
            "task {}: classes {:?}, samples per client {:?}, mean label entropy {entropy:.4} -> {}",
            t + 1,
            data.tasks.tasks[t],
            stats.client_totals,
            path.display()
        );
    }
    Ok(())
}

const ABLATION_FILE: &str = "ablation.csv";

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let cfg = args.config.load(&[])?;
    let _lock = DirLock::acquire(&args.out)?;
    let outcomes = ablation_suite(
        &cfg,
        &RunOptions {
            workers: args.workers.unwrap_or_else(default_workers),
            record_weights: false,
        },
    )?;
    let mut csv = String::from("variant,seed,faa,aia\n");
    let mut means = String::new();
    for o in &outcomes {
        let m = MetricsReport::from_outcome(o)?;
        for (seed, s) in &m.per_seed {
            csv.push_str(&format!("{},{seed},{:?},{:?}\n", m.strategy, s.faa, s.aia));
        }
        means.push_str(&format!("{},mean,{:?},{:?}\n", m.strategy, m.mean.faa, m.mean.aia));
    }
    csv.push_str(&means);
    report::write_file(&args.out, ABLATION_FILE, &csv)?;
    print!("{csv}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(a) => cmd_run(a).map(|_| true),
        Command::Verify(a) => cmd_verify(a),
        Command::PartitionPreview(a) => cmd_partition_preview(a).map(|_| true),
        Command::Ablate(a) => cmd_ablate(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() || matches!(e, Error::Usage(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
