use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use dta_core::dta::{embed_dataset, train, DtaCheckpoint, DtaHyper};
use dta_core::harness::{run_experiment_in, ExperimentConfig};
use dta_core::io::{
    read_dataset, read_embedding, read_requests, write_atomic, write_dataset, write_embedding, write_experiment,
    write_loss_history,
};
use dta_core::outcome::{
    fit_msm, fit_rmsn, CovariateSource, MsmConfig, OutcomeCheckpoint, OutcomeModel, RmsnHyper, SourceKind,
};
use dta_core::simgen::{simulate_with_counterfactuals, SimConfig};
use dta_core::Error;

const LOG_ENV: &str = "DTA_LOG";

#[derive(Parser)]
#[command(name = "dta", version, about = "Deconfounding temporal autoencoder toolkit")]
struct Cli {
    /// Worker threads for experiments (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Msm,
    Rmsn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Proxies,
    Embedding,
    Oracle,
}

impl From<Source> for SourceKind {
    fn from(s: Source) -> Self {
        match s {
            Source::Proxies => SourceKind::Proxies,
            Source::Embedding => SourceKind::Embedding,
            Source::Oracle => SourceKind::Oracle,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset with counterfactual outcomes.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the simulator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the autoencoder; writes a checkpoint and a loss history.
    TrainDta {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss history CSV (default: next to the checkpoint).
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the learned embedding of a dataset.
    Embed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit an outcome model on a covariate source.
    FitOutcome {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        model: Family,
        #[arg(long, value_enum)]
        source: Source,
        /// Embedding table, required for `--source embedding`.
        #[arg(long)]
        embedding: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        tau: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict outcomes for a JSON file of requests.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        requests: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the confounding-strength experiment.
    Experiment {
        /// Base settings: `desk` or `full`.
        #[arg(long, default_value = "desk")]
        profile: String,
        /// Overrides applied on top of the profile.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a dataset directory.
    Validate { data: PathBuf },
}

/// Sections of a run configuration file. Each is optional; missing keys
/// take their defaults.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    sim: Option<toml::Table>,
    dta: Option<toml::Table>,
    rmsn: Option<toml::Table>,
    msm: Option<toml::Table>,
    experiment: Option<toml::Table>,
}

fn read_config(path: Option<&Path>) -> anyhow::Result<RunConfigFile> {
    match path {
        None => Ok(RunConfigFile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", p.display())).into())
        }
    }
}

/// Overlays `user` onto `base`, logging every key left at its base value.
fn merge(section: &str, base: &mut toml::Table, user: &toml::Table) {
    for (key, value) in base.iter_mut() {
        match (value, user.get(key)) {
            (toml::Value::Table(b), Some(toml::Value::Table(u))) => merge(&format!("{section}.{key}"), b, u),
            (slot, Some(u)) => *slot = u.clone(),
            (slot, None) => log::info!("config [{section}]: `{key}` not set, using {slot}"),
        }
    }
    for (key, value) in user {
        if !base.contains_key(key) {
            base.insert(key.clone(), value.clone());
        }
    }
}

fn section<T: Serialize + DeserializeOwned>(name: &str, base: T, user: Option<&toml::Table>) -> anyhow::Result<T> {
    let Some(user) = user else {
        return Ok(base);
    };
    let mut table = toml::Table::try_from(&base).context("serializing defaults")?;
    merge(name, &mut table, user);
    table.try_into().map_err(|e: toml::de::Error| Error::Usage(format!("[{name}]: {e}")).into())
}

fn load_sim(cfg: &RunConfigFile) -> anyhow::Result<SimConfig> {
    let sim: SimConfig = section("sim", SimConfig::default(), cfg.sim.as_ref())?;
    sim.validate()?;
    Ok(sim)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(Error::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker pool")?;
    }
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let file = read_config(config.as_deref())?;
            let mut sim = load_sim(&file)?;
            if let Some(s) = seed {
                sim.seed = s;
            }
            let (ds, _) = simulate_with_counterfactuals(&sim)?;
            write_dataset(&ds, &out, Some(&sim))?;
            log::info!("wrote {} patients × {} steps to {}", ds.n_patients(), ds.n_steps(), out.display());
        }
        Command::TrainDta { data, config, out, history, seed } => {
            let file = read_config(config.as_deref())?;
            let mut hyper: DtaHyper = section("dta", DtaHyper::default(), file.dta.as_ref())?;
            if let Some(s) = seed {
                hyper.seed = s;
            }
            let ds = read_dataset(&data)?;
            let (model, hist) = train(&ds, &hyper)?;
            write_atomic(&out, DtaCheckpoint::new(model, hyper).to_json()?.as_bytes())?;
            let history = history.unwrap_or_else(|| out.with_extension("history.csv"));
            write_loss_history(&history, &hist)?;
            if let Some(last) = hist.last() {
                log::info!("final epoch: total {:.6}", last.total);
            }
        }
        Command::Embed { data, checkpoint, out } => {
            let ds = read_dataset(&data)?;
            let text = std::fs::read_to_string(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let ck = DtaCheckpoint::from_json(&text)?;
            let emb = embed_dataset(&ck.model, &ds)?;
            write_embedding(&out, &ds.ids, &emb)?;
        }
        Command::FitOutcome { data, model, source, embedding, tau, config, out } => {
            let file = read_config(config.as_deref())?;
            let ds = read_dataset(&data)?;
            let kind = SourceKind::from(source);
            let emb = match (kind, embedding) {
                (SourceKind::Embedding, Some(p)) => Some(read_embedding(&p, &ds)?),
                (SourceKind::Embedding, None) => bail!(Error::Usage("--source embedding needs --embedding".into())),
                _ => None,
            };
            let src = CovariateSource::from_dataset(kind, &ds, emb.as_ref())?;
            let fitted = match model {
                Family::Msm => {
                    let cfg: MsmConfig = section("msm", MsmConfig { tau, ..MsmConfig::default() }, file.msm.as_ref())?;
                    OutcomeModel::Msm(fit_msm(&ds, &src, &cfg)?)
                }
                Family::Rmsn => {
                    let hyper: RmsnHyper = section("rmsn", RmsnHyper::default(), file.rmsn.as_ref())?;
                    OutcomeModel::Rmsn(fit_rmsn(&ds, &src, tau, &hyper)?.0)
                }
            };
            write_atomic(&out, OutcomeCheckpoint::new(kind, fitted).to_json()?.as_bytes())?;
        }
        Command::Predict { model, requests, out } => {
            let text = std::fs::read_to_string(&model).with_context(|| format!("reading {}", model.display()))?;
            let ck = OutcomeCheckpoint::from_json(&text)?;
            let reqs = read_requests(&requests)?;
            let mut body = String::from("request,step,prediction\n");
            for (i, req) in reqs.iter().enumerate() {
                let path = ck.model.predict(req).with_context(|| format!("request {}", i + 1))?;
                let first = req.horizon() + 1 - path.len();
                for (j, v) in path.iter().enumerate() {
                    body.push_str(&format!("{},{},{v}\n", i + 1, first + j));
                }
            }
            write_atomic(&out, body.as_bytes())?;
        }
        Command::Experiment { profile, config, out } => {
            let file = read_config(config.as_deref())?;
            let base = ExperimentConfig::profile(&profile)?;
            let cfg: ExperimentConfig = section("experiment", base, file.experiment.as_ref())?;
            let result = run_experiment_in(&cfg, Some(&out.join("records")));
            let result = result?;
            write_experiment(&out, &cfg, &result)?;
            for c in &result.summary {
                log::info!("γ={} {}: {:.4} ± {:.4} ({} runs)", c.gamma, c.method, c.rmse_mean, c.rmse_sd, c.n_runs);
            }
        }
        Command::Validate { data } => {
            let ds = read_dataset(&data)?;
            println!(
                "ok: {} patients, {} steps, p={}, k={}, confounders {}, counterfactuals {}",
                ds.n_patients(),
                ds.n_steps(),
                ds.proxy_dim(),
                ds.treatment_dim(),
                if ds.z.is_some() { "yes" } else { "no" },
                if ds.has_counterfactuals() { "yes" } else { "no" }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Usage(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
