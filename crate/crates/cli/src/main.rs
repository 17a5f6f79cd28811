use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use koopnet::experiment::{self as exp, DatasetConfig, ExperimentConfig, RunDir};
use koopnet::pruning::PruneMethod;

#[derive(Parser)]
#[command(name = "koopnet", version, about = "Replace hidden layers of a trained classifier with a compressed Koopman matrix")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the network; writes network.bin and training.json.
    Train(ConfigArgs),
    /// Collect snapshot pairs from the trained network.
    Snapshots(ConfigArgs),
    /// Fit the uncompressed Koopman model from the snapshots.
    Fit(ConfigArgs),
    /// Truncate the fitted model to a rank and score it.
    Compress {
        #[command(flatten)]
        config: ConfigArgs,
        /// Rank kept; defaults to `svd.rank`, none keeps the dense map.
        #[arg(long)]
        rank: Option<usize>,
    },
    /// Prune the trained network's replaced layers.
    Prune(PruneArgs),
    /// Fine-tune a network written by `prune`.
    Finetune(PruneArgs),
    /// Grid over dictionary size and rank, with frontier and singular-value report.
    Sweep(ConfigArgs),
    /// Pruning baselines next to the frontier written by `sweep`.
    Compare(ConfigArgs),
    /// Summarize whatever the run directory holds.
    Report(ConfigArgs),
    /// Tensor-train predictor over the per-variable monomial dictionary.
    Tt(ConfigArgs),
    /// train, snapshots, fit, compress in one go.
    Run(ConfigArgs),
    /// train, snapshots, sweep, compare in one go.
    Study(ConfigArgs),
    /// Check that two run directories hold identical results.
    Audit { a: PathBuf, b: PathBuf },
    /// Print a complete configuration with every default filled in.
    InitConfig {
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
        #[arg(long, default_value = "mnist")]
        dataset: String,
        #[arg(long, default_value = "runs/mnist")]
        output_dir: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Directory with the four standard IDX files; replaces the dataset paths.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config field, e.g. `--set train.epochs=3` or `--set sweep.lens=[21,40]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum)]
    method: Method,
    /// Fraction of the replaced layers' parameters to keep.
    #[arg(long)]
    ratio: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Unstructured,
    Structured,
}

impl From<Method> for PruneMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Unstructured => PruneMethod::Unstructured,
            Method::Structured => PruneMethod::Structured,
        }
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut table: toml::Table = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => {
                let dir = self.data_dir.as_ref().context("either --config or --data-dir is required")?;
                let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into());
                toml::Table::try_from(ExperimentConfig::new(format!("runs/{name}"), DatasetConfig::standard(name, dir)))?
            }
        };
        if let (Some(dir), Some(_)) = (&self.data_dir, &self.config) {
            let name = table
                .get("dataset")
                .and_then(|d| d.get("name"))
                .and_then(|n| n.as_str())
                .unwrap_or("data")
                .to_owned();
            let mut standard = toml::Table::try_from(DatasetConfig::standard(name, dir))?;
            if let Some(old) = table.get("dataset").and_then(|d| d.as_table()) {
                for key in ["sha256", "val_fraction"] {
                    if let Some(v) = old.get(key) {
                        standard.insert(key.into(), v.clone());
                    }
                }
            }
            table.insert("dataset".into(), standard.into());
        }
        if let Some(dir) = &self.output_dir {
            table.insert("output_dir".into(), dir.to_string_lossy().into_owned().into());
        }
        if let Some(seed) = self.seed {
            table.insert("seed".into(), toml::Value::Integer(i64::try_from(seed).context("seed exceeds i64")?));
        }
        for item in &self.overrides {
            apply_override(&mut table, item)?;
        }
        let config = ExperimentConfig::from_toml_str(&toml::to_string(&table)?)?;
        Ok(config)
    }
}

/// Sets a dotted key; the value is parsed as TOML, falling back to a string.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item.split_once('=').with_context(|| format!("override `{item}` is not KEY=VALUE"))?;
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_owned()),
    };
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|p| !p.is_empty()).context("empty override key")?;
    let mut cursor = table;
    for part in parts {
        cursor = cursor
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("`{part}` in `{key}` is not a table"))?;
    }
    cursor.insert(last.into(), value);
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let config = args.resolve()?;
            let dir = RunDir::create(&config)?;
            let data = dir.stage("load", || exp::load_datasets(&config))?;
            let (_, report) = exp::stage_train(&config, &dir, &data)?;
            print_json(&report)
        }
        Command::Snapshots(args) => {
            let config = args.resolve()?;
            let dir = RunDir::create(&config)?;
            let data = dir.stage("load", || exp::load_datasets(&config))?;
            let net = dir.stage("snapshots", || exp::load_network(&dir))?;
            let snaps = exp::stage_snapshots(&config, &dir, &net, &data)?;
            println!("{} snapshot pairs of dimension {}", snaps.len(), snaps.dim());
            Ok(())
        }
        Command::Fit(args) => {
            let config = args.resolve()?;
            let dir = RunDir::create(&config)?;
            let snaps = dir.stage("fit", || exp::load_snapshots(&dir))?;
            let model = exp::stage_fit(&config, &dir, &snaps)?;
            println!("fitted {} with L = {}", model.dictionary().label(), model.lifted_len());
            Ok(())
        }
        Command::Compress { config: args, rank } => {
            let config = args.resolve()?;
            let dir = RunDir::create(&config)?;
            let data = dir.stage("load", || exp::load_datasets(&config))?;
            let (net, model) = dir.stage("compress", || Ok((exp::load_network(&dir)?, exp::load_model(&dir)?)))?;
            let (_, metrics) = exp::stage_compress(&config, &dir, &net, &model, &data, rank)?;
            print_json(&metrics)
        }
        Command::Prune(p) => {
            let config = p.config.resolve()?;
            let dir = RunDir::create(&config)?;
            let data = dir.stage("load", || exp::load_datasets(&config))?;
            let net = dir.stage("prune", || exp::load_network(&dir))?;
            print_json(&exp::stage_prune(&config, &dir, &net, &data, p.method.into(), p.ratio)?)
        }
        Command::Finetune(p) => {
            let config = p.config.resolve()?;
            let dir = RunDir::create(&config)?;
            let data = dir.stage("load", || exp::load_datasets(&config))?;
            print_json(&exp::stage_finetune(&config, &dir, &data, p.method.into(), p.ratio)?)
        }
        Command::Sweep(args) => {
            let config = args.resolve()?;
            let dir = RunDir::create(&config)?;
            let data = dir.stage("load", || exp::load_datasets(&config))?;
            let (net, snaps) = dir.stage("sweep", || Ok((exp::load_network(&dir)?, exp::load_snapshots(&dir)?)))?;
            let (result, frontier) = exp::stage_sweep(&config, &dir, &net, &snaps, &data)?;
            println!("{} cells, {} frontier points", result.rows.len(), frontier.len());
            Ok(())
        }
        Command::Compare(args) => {
            let config = args.resolve()?;
            let dir = RunDir::create(&config)?;
            let data = dir.stage("load", || exp::load_datasets(&config))?;
            let (net, frontier) = dir.stage("compare", || Ok((exp::load_network(&dir)?, exp::load_frontier(&dir)?)))?;
            let rows = exp::stage_compare(&config, &dir, &net, &data, &frontier)?;
            println!("{} comparison rows", rows.len());
            Ok(())
        }
        Command::Report(args) => {
            let config = args.resolve()?;
            let dir = RunDir::create(&config)?;
            let report = exp::stage_report(&dir)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Tt(args) => {
            let config = args.resolve()?;
            let dir = RunDir::create(&config)?;
            let data = dir.stage("load", || exp::load_datasets(&config))?;
            let net = dir.stage("tt", || exp::load_network(&dir))?;
            for row in exp::stage_tt(&config, &dir, &net, &data)? {
                println!(
                    "N_max = {}: mean error {:.4}, {} bytes, max ranks {}/{}, {:.1} s",
                    row.n_max, row.prediction_error, row.bytes, row.pinv_max_rank, row.output_max_rank, row.wall_time_s
                );
            }
            Ok(())
        }
        Command::Run(args) => print_json(&exp::run_pipeline(&args.resolve()?)?),
        Command::Study(args) => {
            let study = exp::run_study(&args.resolve()?)?;
            println!(
                "trained to {:.4}; {} sweep cells; {} frontier points; {} comparison rows",
                study.training.test_accuracy,
                study.sweep.rows.len(),
                study.frontier.len(),
                study.comparison.len()
            );
            Ok(())
        }
        Command::Audit { a, b } => {
            let n = exp::audit_determinism(&a, &b)?;
            println!("{n} files identical");
            Ok(())
        }
        Command::InitConfig {
            data_dir,
            dataset,
            output_dir,
        } => {
            let config = ExperimentConfig::new(output_dir, DatasetConfig::standard(dataset, data_dir));
            print!("{}", config.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_as_toml_or_string() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "train.epochs=3").unwrap();
        apply_override(&mut t, "sweep.lens=[21, 40]").unwrap();
        apply_override(&mut t, "dataset.name=fashion").unwrap();
        assert_eq!(t["train"]["epochs"].as_integer(), Some(3));
        assert_eq!(t["sweep"]["lens"].as_array().unwrap().len(), 2);
        assert_eq!(t["dataset"]["name"].as_str(), Some("fashion"));
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "train.epochs.x=1").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
