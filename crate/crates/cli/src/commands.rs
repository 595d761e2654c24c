//! Command-line definitions and the subcommand implementations.

use std::collections::{BTreeMap, HashMap};
use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use avgk_core::calibration::{FrequencyGroups, Group, SetMetrics};
use avgk_core::data::{bayes_avgk_classifier, generate, ingest_table, read_split_dir, write_split_dir, DatasetSplit, SplitFractions, SyntheticSpec};
use avgk_core::model::Checkpoint;
use avgk_core::training::{evaluate_model, train_from_seed, Evaluation, TrainConfig};
use avgk_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{parse_usize_list, TrainArgs};
use crate::error::{CliError, CliResult};
use crate::record::{append_record, config_hash, dataset_hash, mean_ci, read_records, ExperimentRecord, Provenance, RecordMetrics, CODE_VERSION};

/// Relative output paths are placed under this directory (default `results`).
pub const RESULTS_ENV: &str = "AVGK_RESULTS_DIR";

#[derive(Debug, Parser)]
#[command(name = "avgk", version, about = "Average-K set-valued classification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic dataset, or split an external CSV table
    Generate(GenerateArgs),
    /// Train one model and evaluate it
    Train(TrainCmd),
    /// Evaluate a checkpoint on a dataset
    Evaluate(EvaluateArgs),
    /// Train over a grid of one hyperparameter and several seeds
    Sweep(SweepArgs),
    /// Aggregate records by configuration
    Summarize(SummarizeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GroupArgs {
    /// Classes with fewer training examples are few-shot
    #[arg(long, default_value_t = 20)]
    pub few_below: usize,
    /// Classes with more training examples are many-shot
    #[arg(long, default_value_t = 100)]
    pub many_above: usize,
}

impl GroupArgs {
    fn groups(&self) -> CliResult<FrequencyGroups> {
        if self.few_below > self.many_above + 1 {
            return Err(CliError::Usage(format!(
                "--few-below {} exceeds --many-above {} + 1",
                self.few_below, self.many_above
            )));
        }
        Ok(FrequencyGroups {
            few_below: self.few_below,
            many_above: self.many_above,
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    /// Split this table (features then an integer label per row) instead of sampling
    #[arg(long)]
    pub from_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 5)]
    pub superclasses: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Distance between neighbouring classes of a superclass, in units of sigma
    #[arg(long, default_value_t = 1.0)]
    pub sep: f64,
    /// Distance between neighbouring superclass centres, in units of sigma
    #[arg(long, default_value_t = 6.0)]
    pub between: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Class priors proportional to (j + 1)^-a
    #[arg(long, default_value_t = 0.0)]
    pub prior_exponent: f64,
    /// Training examples
    #[arg(long, default_value_t = 20000)]
    pub n: usize,
    /// Validation examples (default n / 10)
    #[arg(long)]
    pub n_val: Option<usize>,
    /// Test examples (default n / 4)
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

impl GenerateArgs {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            feature_dim: self.dim,
            superclasses: self.superclasses,
            within_sep: self.sep,
            between_sep: self.between,
            sigma: self.sigma,
            prior_exponent: self.prior_exponent,
            seed: self.seed,
            n_train: self.n,
            n_val: self.n_val.unwrap_or(self.n / 10),
            n_test: self.n_test.unwrap_or(self.n / 4),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainCmd {
    /// Directory written by `generate`
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Record file to append to (default `<results>/records.jsonl`)
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Store the wall-clock time in the record
    #[arg(long)]
    pub timestamp: bool,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub groups: GroupArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Target set size (default: the one stored in the checkpoint)
    #[arg(long)]
    pub k: Option<usize>,
    /// Also report the Bayes average-K classifier (synthetic data only)
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
    #[command(flatten)]
    pub groups: GroupArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Alpha,
    Beta,
    Batch,
    K,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated values of the swept hyperparameter
    #[arg(long)]
    pub values: String,
    #[arg(long, default_value = "1")]
    pub seeds: String,
    /// Worker threads (default: all cores)
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub timestamp: bool,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub groups: GroupArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Group by one config key instead of the full configuration minus the seed
    #[arg(long)]
    pub by: Option<String>,
    /// Also write the table to this CSV file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
        Command::Summarize(a) => cmd_summarize(&a).map(|_| ()),
    }
}

pub fn results_root() -> PathBuf {
    env::var_os(RESULTS_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("results"))
}

pub fn output_path(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        results_root().join(p)
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn pretty<T: Serialize>(value: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn load_data(dir: &Path) -> CliResult<DatasetSplit> {
    read_split_dir(dir).map_err(|e| match e {
        Error::Io(io) => CliError::io(dir, io),
        other => other.into(),
    })
}

pub fn cmd_generate(a: &GenerateArgs) -> CliResult<()> {
    let data = match &a.from_csv {
        Some(path) => {
            let fractions = SplitFractions {
                val: a.val_fraction,
                test: a.test_fraction,
            };
            ingest_table(path, None, fractions, a.seed)?
        }
        None => generate(&a.spec())?,
    };
    let out = output_path(&a.out);
    write_split_dir(&data, &out)?;
    println!(
        "wrote {} ({} train, {} val, {} test, {} classes, {} features)",
        out.display(),
        data.train.len(),
        data.val.len(),
        data.test.len(),
        data.classes,
        data.feature_dim()
    );
    Ok(())
}

/// Set-size histograms as `size,count` CSVs: overall and per frequency group.
fn write_histograms(dir: &Path, metrics: &SetMetrics) -> CliResult<()> {
    write_file(&dir.join("sizes_all.csv"), metrics.size_histogram.to_csv())?;
    if let Some(groups) = &metrics.group_accuracies {
        for g in [Group::Few, Group::Medium, Group::Many] {
            if let Some(stats) = groups.get(g) {
                write_file(&dir.join(format!("sizes_{}.csv", g.name())), stats.histogram.to_csv())?;
            }
        }
    }
    Ok(())
}

/// Trains, evaluates and writes `checkpoint.bin`, `log.jsonl`,
/// `metrics.json`, `record.json` and the histograms into `out`.
pub fn train_and_record(
    data: &DatasetSplit,
    dataset_sha256: &str,
    cfg: &TrainConfig,
    groups: FrequencyGroups,
    out: &Path,
    timestamp: bool,
) -> CliResult<ExperimentRecord> {
    let outcome = train_from_seed(data, cfg)?;
    let ckpt = &outcome.checkpoint;
    let eval = evaluate_model(&ckpt.model, data, cfg.k_target, groups)?;

    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    ckpt.save(&out.join("checkpoint.bin"))?;
    let mut log = String::new();
    for rec in &outcome.log {
        log.push_str(&serde_json::to_string(rec)?);
        log.push('\n');
    }
    write_file(&out.join("log.jsonl"), log)?;
    write_file(&out.join("metrics.json"), pretty(&eval)?)?;
    write_histograms(out, &eval.test)?;

    let record = ExperimentRecord {
        config_sha256: config_hash(cfg, dataset_sha256),
        config: cfg.clone(),
        metrics: RecordMetrics::new(&eval, ckpt.epoch),
        provenance: Provenance {
            dataset_sha256: dataset_sha256.to_string(),
            code_version: CODE_VERSION.to_string(),
            timestamp: timestamp.then(now),
        },
    };
    write_file(&out.join("record.json"), pretty(&record)?)?;
    Ok(record)
}

pub fn cmd_train(a: &TrainCmd) -> CliResult<ExperimentRecord> {
    let cfg = a.train.resolve()?;
    let groups = a.groups.groups()?;
    let data = load_data(&a.data)?;
    cfg.validate(data.classes)?;
    let hash = dataset_hash(&a.data)?;
    let out = output_path(&a.out);
    let record = train_and_record(&data, &hash, &cfg, groups, &out, a.timestamp)?;
    let records = a
        .records
        .as_deref()
        .map(output_path)
        .unwrap_or_else(|| results_root().join("records.jsonl"));
    append_record(&records, &record)?;
    let m = &record.metrics;
    println!(
        "{} K={} seed={}: test avg-{} accuracy {:.4}, mean set size {:.3}, val {:.4} (epoch {}), lambda {:.6}",
        cfg.loss, cfg.k_target, cfg.seed, cfg.k_target, m.test_avgk_accuracy, m.mean_set_size, m.val_avgk_accuracy, m.best_epoch, m.lambda_val
    );
    println!("wrote {}", out.display());
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub k_target: usize,
    pub bayes_avgk_accuracy: f64,
    pub bayes_accuracy_stderr: f64,
    pub bayes_lambda: f64,
    pub bayes_mean_set_size: f64,
    pub model_avgk_accuracy: f64,
    pub gap: f64,
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<Evaluation> {
    let groups = a.groups.groups()?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let arch = ckpt.model.architecture();
    if arch.input_dim != data.feature_dim() || arch.classes != data.classes {
        return Err(Error::Shape(format!(
            "checkpoint {} expects {} features and {} classes but dataset {} has {} features and {} classes",
            a.checkpoint.display(),
            arch.input_dim,
            arch.classes,
            a.data.display(),
            data.feature_dim(),
            data.classes
        ))
        .into());
    }
    let k = a.k.unwrap_or(ckpt.k_target);
    let eval = evaluate_model(&ckpt.model, &data, k, groups)?;
    let out = output_path(&a.out);
    write_file(&out.join("metrics.json"), pretty(&eval)?)?;
    write_histograms(&out, &eval.test)?;
    println!(
        "test avg-{k} accuracy {:.4}, mean set size {:.3}, val {:.4}, lambda {:.6}",
        eval.test.avg_k_accuracy, eval.test.mean_set_size, eval.val_avgk_accuracy, eval.lambda_val
    );

    if a.oracle {
        let spec = data
            .spec
            .as_ref()
            .ok_or_else(|| CliError::Usage("--oracle needs a synthetic dataset with a generator spec".into()))?;
        let bayes = bayes_avgk_classifier(&spec.oracle()?, &data.test.features, k)?;
        let report = OracleReport {
            k_target: k,
            bayes_avgk_accuracy: bayes.accuracy,
            bayes_accuracy_stderr: bayes.accuracy_stderr,
            bayes_lambda: bayes.threshold.lambda(),
            bayes_mean_set_size: bayes.sets.mean_size(),
            model_avgk_accuracy: eval.test.avg_k_accuracy,
            gap: bayes.accuracy - eval.test.avg_k_accuracy,
        };
        write_file(&out.join("oracle.json"), pretty(&report)?)?;
        println!(
            "Bayes avg-{k} accuracy {:.4} (stderr {:.4}), gap {:.4}",
            report.bayes_avgk_accuracy, report.bayes_accuracy_stderr, report.gap
        );
    }
    println!("wrote {}", out.display());
    Ok(eval)
}

fn apply_axis(base: &TrainConfig, axis: SweepAxis, value: &str) -> CliResult<TrainConfig> {
    let bad = || CliError::Usage(format!("invalid {axis:?} value {value:?}"));
    let mut cfg = base.clone();
    match axis {
        SweepAxis::Alpha => cfg.alpha = value.parse().map_err(|_| bad())?,
        SweepAxis::Beta => cfg.beta = value.parse().map_err(|_| bad())?,
        SweepAxis::K => cfg.k_target = value.parse().map_err(|_| bad())?,
        SweepAxis::Batch => {
            cfg.batch_size = value.parse().map_err(|_| bad())?;
            cfg.learning_rate = base.learning_rate * cfg.batch_size as f64 / base.batch_size as f64;
        }
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: String,
    pub n: usize,
    pub mean: f64,
    pub ci: f64,
    pub mean_set_size: f64,
}

/// Runs every (value, seed) cell not already in `<out>/records.jsonl`,
/// appends the new records in grid order and writes `summary_<axis>.csv`.
pub fn cmd_sweep(a: &SweepArgs) -> CliResult<Vec<SweepPoint>> {
    let base = a.train.resolve()?;
    let groups = a.groups.groups()?;
    let values: Vec<String> = a
        .values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(CliError::Usage("--values is empty".into()));
    }
    let seeds: Vec<u64> = parse_usize_list("seeds", &a.seeds)?
        .into_iter()
        .map(|s| s as u64)
        .collect();
    if seeds.is_empty() {
        return Err(CliError::Usage("--seeds is empty".into()));
    }
    let data = load_data(&a.data)?;
    let hash = dataset_hash(&a.data)?;
    let axis_name = format!("{:?}", a.axis).to_lowercase();

    let mut cells = Vec::new();
    for value in &values {
        for &seed in &seeds {
            let mut cfg = apply_axis(&base, a.axis, value)?;
            cfg.seed = seed;
            cfg.validate(data.classes)?;
            cells.push((value.clone(), cfg));
        }
    }

    let out = output_path(&a.out);
    let records_path = out.join("records.jsonl");
    let mut done: HashMap<String, ExperimentRecord> = read_records(&records_path)?
        .into_iter()
        .map(|r| (r.config_sha256.clone(), r))
        .collect();
    let todo: Vec<&(String, TrainConfig)> = cells
        .iter()
        .filter(|(_, cfg)| !done.contains_key(&config_hash(cfg, &hash)))
        .collect();

    let job = |(value, cfg): &&(String, TrainConfig)| {
        let dir = out.join("cells").join(format!("{axis_name}-{value}-seed{}", cfg.seed));
        train_and_record(&data, &hash, cfg, groups, &dir, a.timestamp)
    };
    let fresh: Vec<CliResult<ExperimentRecord>> = match a.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(|| todo.par_iter().map(job).collect()),
        None => todo.par_iter().map(job).collect(),
    };
    // Append in grid order so the file is identical across thread counts.
    for record in fresh {
        let record = record?;
        append_record(&records_path, &record)?;
        done.insert(record.config_sha256.clone(), record);
    }

    let mut points = Vec::new();
    for value in &values {
        let recs: Vec<&ExperimentRecord> = cells
            .iter()
            .filter(|(v, _)| v == value)
            .map(|(_, cfg)| &done[&config_hash(cfg, &hash)])
            .collect();
        let accs: Vec<f64> = recs.iter().map(|r| r.metrics.test_avgk_accuracy).collect();
        let (mean, ci) = mean_ci(&accs);
        let size = recs.iter().map(|r| r.metrics.mean_set_size).sum::<f64>() / recs.len() as f64;
        points.push(SweepPoint {
            value: value.clone(),
            n: accs.len(),
            mean,
            ci,
            mean_set_size: size,
        });
    }
    let mut csv = String::from("value,mean,ci\n");
    for p in &points {
        csv.push_str(&format!("{},{},{}\n", p.value, p.mean, p.ci));
    }
    write_file(&out.join(format!("summary_{axis_name}.csv")), &csv)?;
    println!("{axis_name:>10}  seeds  avg-K acc  +-95%    set size");
    for p in &points {
        println!("{:>10}  {:>5}  {:.4}     {:.4}   {:.3}", p.value, p.n, p.mean, p.ci, p.mean_set_size);
    }
    println!("wrote {}", out.display());
    Ok(points)
}

fn config_key(cfg: &TrainConfig, by: Option<&str>) -> CliResult<String> {
    let mut json = serde_json::to_value(cfg)?;
    let obj = json.as_object_mut().expect("config is an object");
    match by {
        None => {
            obj.remove("seed");
            Ok(serde_json::to_string(obj)?)
        }
        Some(key) => {
            let field = match key {
                "k" => "k_target",
                "batch" => "batch_size",
                "lr" => "learning_rate",
                "epochs" => "max_epochs",
                other => other,
            };
            let v = obj
                .get(field)
                .ok_or_else(|| CliError::Usage(format!("cannot group by unknown key {key:?}")))?;
            Ok(match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub key: String,
    pub n: usize,
    pub mean: f64,
    pub ci: f64,
    pub mean_set_size: f64,
}

pub fn cmd_summarize(a: &SummarizeArgs) -> CliResult<Vec<SummaryRow>> {
    let records = read_records(&a.records)?;
    if records.is_empty() {
        return Err(CliError::Usage(format!("{} has no records", a.records.display())));
    }
    let mut groups: BTreeMap<String, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry(config_key(&r.config, a.by.as_deref())?).or_default().push(r);
    }
    let rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|(key, recs)| {
            let accs: Vec<f64> = recs.iter().map(|r| r.metrics.test_avgk_accuracy).collect();
            let (mean, ci) = mean_ci(&accs);
            SummaryRow {
                key,
                n: recs.len(),
                mean,
                ci,
                mean_set_size: recs.iter().map(|r| r.metrics.mean_set_size).sum::<f64>() / recs.len() as f64,
            }
        })
        .collect();
    let mut csv = format!("{},n,mean,ci,mean_set_size\n", a.by.as_deref().unwrap_or("config"));
    for r in &rows {
        let key = if r.key.contains(',') || r.key.contains('"') {
            format!("\"{}\"", r.key.replace('"', "\"\""))
        } else {
            r.key.clone()
        };
        csv.push_str(&format!("{key},{},{},{},{}\n", r.n, r.mean, r.ci, r.mean_set_size));
    }
    print!("{csv}");
    if let Some(path) = &a.out {
        write_file(&output_path(path), &csv)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_axis_scales_learning_rate() {
        let base = TrainConfig {
            batch_size: 64,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let cfg = apply_axis(&base, SweepAxis::Batch, "128").unwrap();
        assert_eq!(cfg.batch_size, 128);
        assert!((cfg.learning_rate - 0.2).abs() < 1e-15);
        assert!(apply_axis(&base, SweepAxis::Alpha, "x").is_err());
    }

    #[test]
    fn summary_key_drops_seed() {
        let a = TrainConfig { seed: 1, ..TrainConfig::default() };
        let b = TrainConfig { seed: 2, ..TrainConfig::default() };
        assert_eq!(config_key(&a, None).unwrap(), config_key(&b, None).unwrap());
        assert_eq!(config_key(&a, Some("loss")).unwrap(), "avgk");
        assert!(config_key(&a, Some("nope")).is_err());
    }
}
