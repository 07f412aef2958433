//! `domrl`: train, evaluate, ablate and verify domain-aware GRPO policies.

mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use domrl::config::ExperimentConfig;
use domrl::policy::PolicySnapshot;
use domrl::task::{evaluate, generate_dataset};
use domrl::verify::{run_suite, Mutation};

use run::{Failure, RunManifest};

/// Environment variable naming the default run-directory root.
const RUN_ROOT_ENV: &str = "DOMRL_RUN_ROOT";

#[derive(Parser)]
#[command(
    name = "domrl",
    version,
    about = "Domain-aware GRPO on synthetic invariance tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy and write a run directory.
    Train(TrainArgs),
    /// Evaluate a policy snapshot on the test splits of a task.
    Eval(EvalArgs),
    /// Train every ablation arm for every seed and tabulate the results.
    Ablate(AblateArgs),
    /// Run the invariant suite on micro instances.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file, or the manifest.json of an earlier run.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key. Repeatable; applied in order after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training and dataset seed.
    #[arg(long, value_name = "N")]
    seed: Vec<u64>,
    /// Run directory. Defaults to a fresh directory under the run root.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Snapshot to evaluate. Defaults to snapshot.json next to a manifest.
    #[arg(long, value_name = "PATH")]
    snapshot: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Seeds to run. Repeatable; replaces `ablation.seeds`.
    #[arg(long, value_name = "N")]
    seed: Vec<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Runs trained concurrently.
    #[arg(long, value_name = "N", default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, hide = true)]
    mutate: Option<Mutation>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code())
        }
    }
}

/// Config file (or manifest) plus overrides. Fails before anything is written.
fn load_config(args: &ConfigArgs) -> Result<(ExperimentConfig, Option<PathBuf>), Failure> {
    let mut cfg = ExperimentConfig::default();
    let mut manifest_dir = None;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        if text.trim_start().starts_with('{') {
            let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| {
                Failure::Config(format!("malformed manifest {}: {e}", path.display()))
            })?;
            cfg = manifest.experiment_config()?;
            manifest_dir = path.parent().map(Path::to_path_buf);
        } else {
            cfg.apply_text(&text)?;
        }
    }
    for assignment in &args.overrides {
        cfg.apply_override(assignment)?;
    }
    cfg.validate()?;
    Ok((cfg, manifest_dir))
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let (mut cfg, _) = load_config(&args.config)?;
    match args.seed.as_slice() {
        [] => {}
        [seed] => {
            cfg.train.seed = *seed;
            cfg.task.seed = *seed;
        }
        _ => {
            return Err(Failure::Config(
                "train takes one --seed; use ablate for several".into(),
            ))
        }
    }
    let dir = match args.out {
        Some(dir) => dir,
        None => run::fresh_dir(&run_root(), "train", &cfg)?,
    };
    let summary = run::execute(&dir, &cfg, true)?;
    println!("run directory: {}", dir.display());
    print!("{}{}", run::SUMMARY_HEADER, run::summary_row(&summary));
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let (cfg, manifest_dir) = load_config(&args.config)?;
    let path = match (args.snapshot, manifest_dir) {
        (Some(p), _) => p,
        (None, Some(dir)) => dir.join(run::SNAPSHOT_FILE),
        (None, None) => {
            return Err(Failure::Config(
                "--snapshot is required unless --config is a manifest".into(),
            ))
        }
    };
    let snap = PolicySnapshot::load(&path)
        .map_err(|e| Failure::Config(format!("cannot load snapshot {}: {e}", path.display())))?;
    let expected = cfg.train.policy_config(&cfg.task);
    if snap.config() != &expected {
        return Err(Failure::Config(format!(
            "snapshot architecture {:?} does not match the config {:?}",
            snap.config(),
            expected
        )));
    }
    let dataset = generate_dataset(&cfg.task)?;
    let report = serde_json::json!({
        "snapshot": path.display().to_string(),
        "canonical_episodes": dataset.test_canonical.len(),
        "transformed_episodes": dataset.test_transformed.len(),
        "canonical_accuracy": evaluate(&snap, &dataset.test_canonical)?,
        "transformed_accuracy": evaluate(&snap, &dataset.test_transformed)?,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| Failure::Other(e.to_string()))?
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), Failure> {
    let (mut cfg, _) = load_config(&args.config)?;
    if !args.seed.is_empty() {
        cfg.seeds = args.seed.clone();
    }
    if args.jobs == 0 {
        return Err(Failure::Config("--jobs must be at least 1".into()));
    }
    let dir = match args.out {
        Some(dir) => dir,
        None => run::fresh_dir(&run_root(), "ablate", &cfg)?,
    };
    let table = run::ablate(&dir, &cfg, args.jobs)?;
    println!("run directory: {}", dir.display());
    print!("{}", table.to_csv());
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<(), Failure> {
    let results = run_suite(args.mutate);
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.to_string())
        .collect();
    println!(
        "{} of {} properties passed",
        results.len() - failed.len(),
        results.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(failed))
    }
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}
