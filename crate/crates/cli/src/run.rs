//! Run directories: manifests, metrics streams, snapshots and tables.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use domrl::config::ExperimentConfig;
use domrl::task::generate_dataset;
use domrl::trainer::{ablation_suite_with, run_trainer, AblationTable, RunSummary, Trainer};
use domrl::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.resolved";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const HALT_FILE: &str = "halt.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const RUNS_FILE: &str = "runs.csv";

pub const MANIFEST_FORMAT: &str = "domrl-run-manifest";
pub const MANIFEST_VERSION: u32 = 1;

pub const SUMMARY_HEADER: &str =
    "seed,steps,epochs,final_mean_reward,canonical_accuracy,transformed_accuracy\n";

/// Command failure, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Properties that failed verification.
    Verify(Vec<String>),
    Config(String),
    Numeric(String),
    Other(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Verify(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Other(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Verify(names) => write!(f, "verification failed: {}", names.join(", ")),
            Failure::Config(m) | Failure::Numeric(m) | Failure::Other(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            return Failure::Numeric(e.to_string());
        }
        match e {
            Error::Config { .. } | Error::Format(_) => Failure::Config(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: impl fmt::Display) -> Failure {
    Failure::Other(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetChecksum {
    pub file: String,
    pub sha256: String,
}

/// Self-describing record of a run. Re-running from it reproduces the run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub artifact_version: String,
    pub command: String,
    /// Every config key with its resolved value.
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub dataset: Option<DatasetChecksum>,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// `running`, `completed`, `halted` or `failed`.
    pub status: String,
}

impl RunManifest {
    fn new(
        command: &str,
        cfg: &ExperimentConfig,
        seeds: Vec<u64>,
        dataset: Option<DatasetChecksum>,
    ) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            artifact_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: cfg
                .pairs()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            seeds,
            dataset,
            started_at: now(),
            finished_at: None,
            status: "running".into(),
        }
    }

    pub fn experiment_config(&self) -> Result<ExperimentConfig, Failure> {
        if self.format != MANIFEST_FORMAT {
            return Err(Failure::Config(format!(
                "unexpected manifest format `{}`",
                self.format
            )));
        }
        if self.version != MANIFEST_VERSION {
            return Err(Failure::Config(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        let mut cfg = ExperimentConfig::default();
        for (k, v) in &self.config {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    fn finish(&mut self, status: &str, dir: &Path) -> Result<(), Failure> {
        self.finished_at = Some(now());
        self.status = status.into();
        self.write(dir)
    }

    fn write(&self, dir: &Path) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Failure::Other(e.to_string()))?;
        write_file(&dir.join(MANIFEST_FILE), text + "\n")
    }
}

/// A new directory under `root` named after the command, time and config.
pub fn fresh_dir(root: &Path, command: &str, cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
    let digest = hex::encode(Sha256::digest(cfg.render().as_bytes()));
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let base = format!("{command}-{stamp}-{}", &digest[..8]);
    let mut dir = root.join(&base);
    let mut n = 2;
    while dir.exists() {
        dir = root.join(format!("{base}-{n}"));
        n += 1;
    }
    Ok(dir)
}

pub fn summary_row(s: &RunSummary) -> String {
    format!(
        "{},{},{},{:.6},{:.6},{:.6}\n",
        s.seed,
        s.steps,
        s.epochs,
        s.final_mean_reward,
        s.canonical_accuracy,
        s.transformed_accuracy
    )
}

/// Trains one configuration into `dir`, streaming metrics as they arrive.
pub fn execute(dir: &Path, cfg: &ExperimentConfig, progress: bool) -> Result<RunSummary, Failure> {
    let dataset = generate_dataset(&cfg.task)?;
    let trainer = Trainer::with_dataset(&cfg.train, dataset)?;
    let mut dump = Vec::new();
    trainer.dataset().dump(&mut dump)?;

    create_dir(dir)?;
    write_file(&dir.join(DATASET_FILE), &dump)?;
    write_file(&dir.join(CONFIG_FILE), cfg.render())?;
    let checksum = DatasetChecksum {
        file: DATASET_FILE.into(),
        sha256: hex::encode(Sha256::digest(&dump)),
    };
    let mut manifest = RunManifest::new("train", cfg, vec![cfg.train.seed], Some(checksum));
    manifest.write(dir)?;

    let open = |name: &str| {
        let path = dir.join(name);
        File::create(&path)
            .map(BufWriter::new)
            .map_err(|e| io_failure(&path, e))
    };
    let mut metrics = open(METRICS_FILE)?;
    let mut timing = open(TIMING_FILE)?;
    let total = trainer.total_steps();
    let mut last_step = 0;
    let outcome = run_trainer(trainer, |rec| {
        last_step = rec.step;
        writeln!(metrics, "{}", serde_json::to_string(rec)?)?;
        metrics.flush()?;
        writeln!(
            timing,
            "{}",
            serde_json::json!({ "step": rec.step, "wall_clock_ms": rec.wall_clock_ms })
        )?;
        if progress {
            eprintln!(
                "step {:>6}/{total}  reward {:.3}  |A| {:.3}  D {:.4}  L_dom {:.4}  canonical {:.3}  transformed {:.3}",
                rec.step,
                rec.mean_reward,
                rec.mean_abs_advantage,
                rec.mean_divergence,
                rec.domain_loss,
                rec.canonical_accuracy,
                rec.transformed_accuracy
            );
        }
        Ok(())
    });
    timing
        .flush()
        .map_err(|e| io_failure(&dir.join(TIMING_FILE), e))?;

    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            let numeric = e.is_numeric();
            if numeric {
                let halt =
                    serde_json::json!({ "last_logged_step": last_step, "error": e.to_string() });
                write_file(&dir.join(HALT_FILE), format!("{halt:#}\n"))?;
            }
            manifest.finish(if numeric { "halted" } else { "failed" }, dir)?;
            return Err(e.into());
        }
    };
    outcome.policy.save(&dir.join(SNAPSHOT_FILE))?;
    write_file(
        &dir.join(SUMMARY_FILE),
        format!("{SUMMARY_HEADER}{}", summary_row(&outcome.summary)),
    )?;
    manifest.finish("completed", dir)?;
    Ok(outcome.summary)
}

/// Trains every (arm, seed) pair into `<dir>/<arm>/seed-<s>` and writes the
/// per-arm summaries, the combined table and the per-run table.
pub fn ablate(dir: &Path, cfg: &ExperimentConfig, jobs: usize) -> Result<AblationTable, Failure> {
    create_dir(dir)?;
    write_file(&dir.join(CONFIG_FILE), cfg.render())?;
    let mut manifest = RunManifest::new("ablate", cfg, cfg.seeds.clone(), None);
    manifest.write(dir)?;

    let failures = Mutex::new(Vec::new());
    let table = ablation_suite_with(
        &cfg.train,
        &cfg.task,
        &cfg.arms,
        &cfg.seeds,
        jobs,
        |arm, train, task| {
            let run_cfg = ExperimentConfig {
                train: train.clone(),
                task: task.clone(),
                arms: vec![arm],
                seeds: vec![train.seed],
            };
            let run_dir = dir
                .join(arm.to_string())
                .join(format!("seed-{}", train.seed));
            match execute(&run_dir, &run_cfg, false) {
                Ok(summary) => {
                    eprintln!(
                        "{arm} seed {}: canonical {:.3} transformed {:.3}",
                        train.seed, summary.canonical_accuracy, summary.transformed_accuracy
                    );
                    Ok(summary)
                }
                Err(f) => {
                    eprintln!("{arm} seed {}: {f}", train.seed);
                    let message = f.to_string();
                    failures.lock().unwrap().push(f);
                    Err(Error::Contract(message))
                }
            }
        },
    );
    let table = match table {
        Ok(t) => t,
        Err(e) => {
            manifest.finish("failed", dir)?;
            return Err(e.into());
        }
    };

    let mut runs = String::from(
        "arm,seed,status,steps,epochs,final_mean_reward,canonical_accuracy,transformed_accuracy\n",
    );
    for row in &table.rows {
        let mut arm_summary = String::from(SUMMARY_HEADER);
        for s in &row.runs {
            arm_summary.push_str(&summary_row(s));
            runs.push_str(&format!(
                "{},{},completed,{},{},{:.6},{:.6},{:.6}\n",
                row.arm,
                s.seed,
                s.steps,
                s.epochs,
                s.final_mean_reward,
                s.canonical_accuracy,
                s.transformed_accuracy
            ));
        }
        for (seed, _) in &row.failures {
            runs.push_str(&format!("{},{seed},failed,,,,,\n", row.arm));
        }
        write_file(&dir.join(&row.arm).join(SUMMARY_FILE), arm_summary)?;
    }
    write_file(&dir.join(ABLATION_FILE), table.to_csv())?;
    write_file(&dir.join(RUNS_FILE), runs)?;

    let failures = failures.into_inner().unwrap();
    if let Some(worst) = failures.iter().max_by_key(|f| f.code()) {
        manifest.finish("failed", dir)?;
        return Err(match worst {
            Failure::Numeric(_) => Failure::Numeric(format!(
                "{} run(s) halted; see {}",
                failures.len(),
                RUNS_FILE
            )),
            _ => Failure::Other(format!(
                "{} run(s) failed; see {}",
                failures.len(),
                RUNS_FILE
            )),
        });
    }
    manifest.finish("completed", dir)?;
    Ok(table)
}
