use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use longcast::competition::{
    artifact_stem, canonical_models, evaluate_probabilities, fit_model, predict_model, prepare_replication,
    read_probabilities, replication_seed, run_competition, simulation_seed, write_probabilities, CompetitionConfig,
    DataSource, FittedModel, ModelSpec, ReplicationData, Source,
};
use longcast::dataset::{load_csv, write_csv, write_schema, LongitudinalDataset, Schema};
use longcast::simgen::{SimConfig, Simulator};
use longcast::{Error, Result};

#[derive(Parser)]
#[command(name = "longcast", version, about = "Forecast multivariate longitudinal binary outcomes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate panels (CSV, schema and provenance per replication).
    Simulate(Opts),
    /// Prepare the first replication and fit every configured model family.
    Fit(Opts),
    /// Forecast with the fits written by `fit`.
    Forecast(Opts),
    /// Score the forecasts written by `forecast`.
    Evaluate(Opts),
    /// Run the full competition.
    Compete(Opts),
}

#[derive(Args)]
struct Opts {
    /// JSON config: a competition config, or a simulation config for `simulate`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Replications (overrides the config).
    #[arg(long)]
    reps: Option<usize>,
    /// Worker threads (overrides the config).
    #[arg(long)]
    jobs: Option<usize>,
}

/// Seeds of the replication prepared by `fit`.
#[derive(Serialize, Deserialize)]
struct ReplicationRecord {
    master_seed: u64,
    seed: u64,
}

fn load_config(opts: &Opts) -> Result<CompetitionConfig> {
    let mut cfg = match &opts.config {
        Some(path) => CompetitionConfig::from_json_file(path)?,
        None => CompetitionConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(r) = opts.reps {
        cfg.replications = r;
    }
    if let Some(j) = opts.jobs {
        cfg.jobs = Some(j);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_panel(ds: &LongitudinalDataset, dir: &Path, stem: &str) -> Result<()> {
    write_csv(ds, &dir.join(format!("{stem}.csv")))?;
    write_schema(ds, &dir.join(format!("{stem}.schema.json")))
}

fn read_panel(dir: &Path, stem: &str) -> Result<LongitudinalDataset> {
    let schema = Schema::from_json_file(&dir.join(format!("{stem}.schema.json")))?;
    load_csv(&dir.join(format!("{stem}.csv")), Some(&schema))
}

/// One model per family, in canonical order.
fn families(cfg: &CompetitionConfig) -> Vec<ModelSpec> {
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for spec in canonical_models(&cfg.models) {
        let key = spec.family_key();
        if !seen.contains(&key) {
            seen.push(key);
            out.push(spec);
        }
    }
    out
}

fn fit_path(dir: &Path, spec: ModelSpec) -> PathBuf {
    dir.join("fits").join(format!("{}.json", artifact_stem(&spec.family_key())))
}

fn cmd_simulate(opts: &Opts) -> Result<()> {
    let sim: SimConfig = match &opts.config {
        None => SimConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.clone()))?;
            let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            if value.get("data").is_some() {
                match CompetitionConfig::from_json_file(path)?.data {
                    DataSource::Simulate(sim) => sim,
                    DataSource::Csv { .. } => return Err(Error::Config("config does not describe a simulation".into())),
                }
            } else {
                serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?
            }
        }
    };
    sim.validate()?;
    let master = opts.seed.unwrap_or(0);
    let reps = opts.reps.unwrap_or(1);
    if reps == 0 {
        return Err(Error::Config("at least one replication is required".into()));
    }
    std::fs::create_dir_all(&opts.out)?;
    let simulator = Simulator::new(sim)?;
    for r in 0..reps {
        let seed = simulation_seed(replication_seed(master, r));
        let panel = simulator.generate(seed)?;
        let stem = format!("sim-{:04}", r + 1);
        write_panel(&panel.dataset, &opts.out, &stem)?;
        write_json(&opts.out.join(format!("{stem}.provenance.json")), &simulator.provenance(seed))?;
    }
    println!("wrote {reps} panel(s) to {}", opts.out.display());
    Ok(())
}

fn cmd_fit(opts: &Opts) -> Result<()> {
    let cfg = load_config(opts)?;
    let source = Source::new(&cfg)?;
    let seed = replication_seed(cfg.seed, 0);
    let data = prepare_replication(&source, &cfg, seed)?;
    std::fs::create_dir_all(opts.out.join("fits"))?;
    write_panel(&data.train, &opts.out, "train")?;
    write_panel(&data.horizon, &opts.out, "horizon")?;
    write_json(&opts.out.join("replication.json"), &ReplicationRecord { master_seed: cfg.seed, seed })?;
    for spec in families(&cfg) {
        let fit = fit_model(spec, &data.train, &cfg)?;
        let path = fit_path(&opts.out, spec);
        write_json(&path, &fit)?;
        println!("{}: {}", spec.family_key(), path.display());
    }
    Ok(())
}

fn cmd_forecast(opts: &Opts) -> Result<()> {
    let cfg = load_config(opts)?;
    let record: ReplicationRecord = read_json(&opts.out.join("replication.json"))?;
    let horizon = read_panel(&opts.out, "horizon")?;
    let data = ReplicationData { seed: record.seed, train: read_panel(&opts.out, "train")?, holdout: horizon.clone(), horizon };
    let mut out = Vec::new();
    for spec in canonical_models(&cfg.models) {
        let fit: FittedModel = read_json(&fit_path(&opts.out, spec))?;
        out.push((spec.to_string(), predict_model(spec, &fit, &data, &cfg)?));
    }
    let path = opts.out.join("forecasts.csv");
    write_probabilities(&path, &out)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_evaluate(opts: &Opts) -> Result<()> {
    let cfg = load_config(opts)?;
    let models = read_probabilities(&opts.out.join("forecasts.csv"))?;
    let report = evaluate_probabilities(&models, &cfg.split_spec()?)?;
    report.write_csv(&opts.out.join("responses.csv"))?;
    std::fs::write(opts.out.join("responses.txt"), report.pretty())?;
    print!("{}", report.pretty());
    Ok(())
}

fn cmd_compete(opts: &Opts) -> Result<()> {
    let cfg = load_config(opts)?;
    let result = run_competition(&cfg)?;
    result.write(&opts.out)?;
    for report in [&result.responses, &result.covariates].into_iter().flatten() {
        print!("{}", report.pretty());
    }
    if !result.failures.is_empty() {
        eprintln!("{} model fit(s) failed; see failures.csv", result.failures.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(o) => cmd_simulate(o),
        Command::Fit(o) => cmd_fit(o),
        Command::Forecast(o) => cmd_forecast(o),
        Command::Evaluate(o) => cmd_evaluate(o),
        Command::Compete(o) => cmd_compete(o),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
