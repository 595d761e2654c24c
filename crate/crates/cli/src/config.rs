//! Training configuration from defaults, a flat `key = value` file and flags,
//! in increasing order of precedence.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use avgk_core::training::{LossKind, LrStep, TrainConfig};

use crate::error::{CliError, CliResult};

pub const KEYS: [&str; 13] = [
    "loss",
    "k",
    "alpha",
    "beta",
    "batch",
    "lr",
    "momentum",
    "weight_decay",
    "epochs",
    "patience",
    "lr_steps",
    "hidden",
    "seed",
];

#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainArgs {
    /// Flat `key = value` file; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// One of ce, an, epr, avgk, bce-pos
    #[arg(long)]
    pub loss: Option<String>,
    /// Target average set size
    #[arg(long)]
    pub k: Option<usize>,
    /// Weight of the candidate-class terms (avgk)
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Expected-positive penalty weight (epr)
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many epochs without improvement
    #[arg(long)]
    pub patience: Option<usize>,
    /// `epoch:divisor` pairs, e.g. `150:10,225:10`, or `none`
    #[arg(long)]
    pub lr_steps: Option<String>,
    /// Hidden layer widths, e.g. `64,64`
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainArgs {
    pub fn resolve(&self) -> CliResult<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            for (key, value) in read_config_file(path)? {
                set_key(&mut cfg, &key, &value)?;
            }
        }
        let flags: [(&str, Option<String>); 13] = [
            ("loss", self.loss.clone()),
            ("k", self.k.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("momentum", self.momentum.map(|v| v.to_string())),
            ("weight_decay", self.weight_decay.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("patience", self.patience.map(|v| v.to_string())),
            ("lr_steps", self.lr_steps.clone()),
            ("hidden", self.hidden.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                set_key(&mut cfg, key, &v)?;
            }
        }
        Ok(cfg)
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str, origin: &str) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key = value", n + 1)))?;
        let key = key.trim().replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!(
                "{origin}:{}: unknown key {key:?}; valid keys: {}",
                n + 1,
                KEYS.join(", ")
            )));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

fn read_config_file(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text, &path.display().to_string())
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value {value:?} for {key}")))
}

pub fn parse_lr_steps(value: &str) -> CliResult<Vec<LrStep>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|pair| {
            let (e, d) = pair
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("lr step {pair:?} is not epoch:divisor")))?;
            Ok(LrStep {
                epoch: parse_num("lr_steps", e.trim())?,
                divisor: parse_num("lr_steps", d.trim())?,
            })
        })
        .collect()
}

pub fn parse_usize_list(key: &str, value: &str) -> CliResult<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

pub fn set_key(cfg: &mut TrainConfig, key: &str, value: &str) -> CliResult<()> {
    match key {
        "loss" => cfg.loss = value.parse().map_err(|e: avgk_core::Error| CliError::Usage(e.to_string()))?,
        "k" => cfg.k_target = parse_num(key, value)?,
        "alpha" => cfg.alpha = parse_num(key, value)?,
        "beta" => cfg.beta = parse_num(key, value)?,
        "batch" => cfg.batch_size = parse_num(key, value)?,
        "lr" => cfg.learning_rate = parse_num(key, value)?,
        "momentum" => cfg.momentum = parse_num(key, value)?,
        "weight_decay" => cfg.weight_decay = parse_num(key, value)?,
        "epochs" => cfg.max_epochs = parse_num(key, value)?,
        "patience" => {
            cfg.patience = match value {
                "none" => None,
                v => Some(parse_num(key, v)?),
            }
        }
        "lr_steps" => cfg.lr_schedule = parse_lr_steps(value)?,
        "hidden" => cfg.hidden = parse_usize_list(key, value)?,
        "seed" => cfg.seed = parse_num(key, value)?,
        _ => {
            return Err(CliError::Usage(format!(
                "unknown key {key:?}; valid keys: {}",
                KEYS.join(", ")
            )))
        }
    }
    Ok(())
}

/// Loss names accepted on the command line.
pub fn loss_names() -> Vec<&'static str> {
    LossKind::ALL.iter().map(|k| k.name()).collect()
}
