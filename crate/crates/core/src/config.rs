//! Flat `key = value` experiment configuration.
//!
//! Keys are dotted (`task.shots = 4`); a `[task]` line prefixes the keys that
//! follow it. `#` starts a comment. Unknown keys are rejected.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskSpec;
use crate::trainer::{Arm, TrainingConfig};

/// Everything a run or an ablation needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainingConfig,
    pub task: TaskSpec,
    /// Arms run by `ablate`.
    pub arms: Vec<Arm>,
    /// Seeds run by `ablate`.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainingConfig::default(),
            task: TaskSpec::default(),
            arms: Arm::all(),
            seeds: vec![0, 1, 2],
        }
    }
}

/// Every accepted key, in rendering order.
pub const KEYS: &[&str] = &[
    "seed",
    "group_size",
    "beta",
    "lr",
    "batch_size",
    "epochs",
    "repeat",
    "dc",
    "dr",
    "dc_divergence",
    "dr_divergence",
    "ratio_mode",
    "clip",
    "oc",
    "augment",
    "transform",
    "domain_weight",
    "stop_grad_support",
    "advantage_epsilon",
    "inner_updates",
    "log_interval",
    "adam.beta1",
    "adam.beta2",
    "adam.eps",
    "model.embed_dim",
    "model.hidden_dim",
    "model.max_len",
    "reward.accuracy_weight",
    "reward.format_weight",
    "task.family",
    "task.grid_size",
    "task.num_classes",
    "task.shots",
    "task.obs_values",
    "task.test_size",
    "task.noise",
    "task.seed",
    "ablation.arms",
    "ablation.seeds",
];

fn config_error(key: &str, detail: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        detail: detail.into(),
    }
}

fn parse<T>(key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| config_error(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        other => Err(config_error(
            key,
            format!("expected true or false, got `{other}`"),
        )),
    }
}

fn parse_optional<T>(key: &str, value: &str, none: &str) -> Result<Option<T>>
where
    T: FromStr,
    T::Err: Display,
{
    if value == none {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list<T>(key: &str, value: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    let items = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(config_error(key, "list must not be empty"));
    }
    Ok(items)
}

fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Defaults overridden by the assignments in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_error(
                    line,
                    format!("line {} is not a `key = value` assignment", lineno + 1),
                ));
            };
            let key = key.trim();
            let key = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            self.set(&key, value.trim())?;
        }
        Ok(())
    }

    /// Applies one `KEY=VALUE` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(config_error(
                assignment,
                "override must have the form KEY=VALUE",
            ));
        };
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let task = &mut self.task;
        match key {
            "seed" => t.seed = parse(key, value)?,
            "group_size" => t.group_size = parse(key, value)?,
            "beta" => t.beta = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse_optional(key, value, "auto")?,
            "repeat" => t.repeat = parse(key, value)?,
            "dc" => t.dc = parse_bool(key, value)?,
            "dr" => t.dr = parse_bool(key, value)?,
            "dc_divergence" => t.dc_divergence = parse(key, value)?,
            "dr_divergence" => t.dr_divergence = parse(key, value)?,
            "ratio_mode" => t.ratio_mode = parse(key, value)?,
            "clip" => t.clip = parse_optional(key, value, "none")?,
            "oc" => t.oc_arm = parse_bool(key, value)?,
            "augment" => t.augmentation_arm = parse_bool(key, value)?,
            "transform" => t.transform = parse_optional(key, value, "auto")?,
            "domain_weight" => t.domain_weight = parse(key, value)?,
            "stop_grad_support" => t.stop_grad_support = parse_bool(key, value)?,
            "advantage_epsilon" => t.advantage_epsilon = parse(key, value)?,
            "inner_updates" => t.inner_updates = parse(key, value)?,
            "log_interval" => t.log_interval = parse(key, value)?,
            "adam.beta1" => t.adam_beta1 = parse(key, value)?,
            "adam.beta2" => t.adam_beta2 = parse(key, value)?,
            "adam.eps" => t.adam_eps = parse(key, value)?,
            "model.embed_dim" => t.embed_dim = parse(key, value)?,
            "model.hidden_dim" => t.hidden_dim = parse(key, value)?,
            "model.max_len" => t.max_len = parse(key, value)?,
            "reward.accuracy_weight" => t.reward.accuracy_weight = parse(key, value)?,
            "reward.format_weight" => t.reward.format_weight = parse(key, value)?,
            "task.family" => task.family = parse(key, value)?,
            "task.grid_size" => task.grid_size = parse(key, value)?,
            "task.num_classes" => task.num_classes = parse(key, value)?,
            "task.shots" => task.shots = parse(key, value)?,
            "task.obs_values" => task.obs_values = parse(key, value)?,
            "task.test_size" => task.test_size = parse(key, value)?,
            "task.noise" => task.noise = parse(key, value)?,
            "task.seed" => task.seed = parse(key, value)?,
            "ablation.arms" => {
                self.arms = if value == "all" {
                    Arm::all()
                } else {
                    parse_list(key, value)?
                }
            }
            "ablation.seeds" => self.seeds = parse_list(key, value)?,
            other => return Err(config_error(other, "unknown key")),
        }
        Ok(())
    }

    /// The value of every key, in [`KEYS`] order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let task = &self.task;
        let opt = |v: Option<String>, none: &str| v.unwrap_or_else(|| none.to_string());
        let values = [
            t.seed.to_string(),
            t.group_size.to_string(),
            t.beta.to_string(),
            t.lr.to_string(),
            t.batch_size.to_string(),
            opt(t.epochs.map(|e| e.to_string()), "auto"),
            t.repeat.to_string(),
            t.dc.to_string(),
            t.dr.to_string(),
            t.dc_divergence.to_string(),
            t.dr_divergence.to_string(),
            t.ratio_mode.to_string(),
            opt(t.clip.map(|c| c.to_string()), "none"),
            t.oc_arm.to_string(),
            t.augmentation_arm.to_string(),
            opt(t.transform.map(|x| x.to_string()), "auto"),
            t.domain_weight.to_string(),
            t.stop_grad_support.to_string(),
            t.advantage_epsilon.to_string(),
            t.inner_updates.to_string(),
            t.log_interval.to_string(),
            t.adam_beta1.to_string(),
            t.adam_beta2.to_string(),
            t.adam_eps.to_string(),
            t.embed_dim.to_string(),
            t.hidden_dim.to_string(),
            t.max_len.to_string(),
            t.reward.accuracy_weight.to_string(),
            t.reward.format_weight.to_string(),
            task.family.to_string(),
            task.grid_size.to_string(),
            task.num_classes.to_string(),
            task.shots.to_string(),
            task.obs_values.to_string(),
            task.test_size.to_string(),
            task.noise.to_string(),
            task.seed.to_string(),
            join(&self.arms),
            join(&self.seeds),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    /// Every key with its value, one assignment per line.
    pub fn render(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.task
            .validate()
            .map_err(|e| config_error("task", e.to_string()))?;
        if self.arms.is_empty() {
            return Err(config_error("ablation.arms", "list must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(config_error("ablation.seeds", "list must not be empty"));
        }
        Ok(())
    }
}
