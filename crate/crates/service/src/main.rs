use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use xselector_core::selector::StrategyKind;
use xselector_core::sim::{run_experiment, ExperimentConfig, ScenarioSpec, UserPopulation};
use xselector_core::synth::{World, WorldConfig};
use xselector_core::user_model::{cross_validate, load_jsonl, train_user_model, write_jsonl, TrainConfig, UserModelConfig};
use xselector_service::config::ServiceConfig;
use xselector_service::data::{write_testbed, DataBundle};
use xselector_service::http::{router, AppState};

#[derive(Parser)]
#[command(name = "xselector", version, about = "Explanation selection testbed for stock trading")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the participant-facing HTTP service.
    Serve {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080", env = "XSELECTOR_BIND")]
        bind: SocketAddr,
    },
    /// Generate a synthetic testbed: prices, predictor, policy,
    /// explanations, RANDOM-strategy logs and a trained user model.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Simulated users per scenario window for the training logs.
        #[arg(long, default_value_t = 8)]
        users_per_window: usize,
        #[arg(long)]
        skip_user_model: bool,
    },
    /// Run simulated users through every scenario under each strategy.
    Experiment {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        users: usize,
        /// Comma-separated strategy names; defaults to all six.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<StrategyKind>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Fit a user model on JSONL interaction logs.
    TrainUserModel {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// k-fold cross-validation of the user model, folds split by session.
    CrossValidate {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long)]
        logs: PathBuf,
        #[arg(long, default_value_t = 4)]
        folds: usize,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn load_config(path: &PathBuf) -> anyhow::Result<ServiceConfig> {
    let mut cfg = ServiceConfig::load(path)?;
    cfg.apply_overrides(|k| std::env::var(k).ok());
    Ok(cfg)
}

fn train_config(epochs: Option<usize>) -> TrainConfig {
    let mut t = TrainConfig::default();
    if let Some(e) = epochs {
        t.epochs = e;
    }
    t
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Serve { config, bind } => serve(load_config(&config)?, bind),
        Command::Synth {
            out,
            seed,
            users_per_window,
            skip_user_model,
        } => {
            std::fs::create_dir_all(&out)?;
            let world = World::build(&out, WorldConfig { seed, ..WorldConfig::default() })?;
            log::info!(
                "scenarios: high {:?}, low {:?}",
                world.scenarios.high,
                world.scenarios.low
            );
            let records = world.training_logs(&UserPopulation::default(), users_per_window, seed)?;
            let logs = out.join("logs.jsonl");
            let mut w = BufWriter::new(File::create(&logs)?);
            write_jsonl(&records, &mut w)?;
            w.flush()?;
            let model = if skip_user_model {
                None
            } else {
                log::info!("training user model on {} records", records.len());
                Some(world.train_user_model(&records, &TrainConfig::default())?)
            };
            let cfg = write_testbed(&out, &world, model.as_ref())?;
            println!("wrote testbed to {}; serve with --config {}", out.display(), out.join("service.toml").display());
            log::debug!("{cfg:?}");
            Ok(())
        }
        Command::Experiment {
            config,
            out,
            users,
            strategies,
            seed,
        } => {
            let data = DataBundle::load(load_config(&config)?)?;
            let strategies = if strategies.is_empty() {
                StrategyKind::ALL_KINDS.to_vec()
            } else {
                strategies
            };
            let exp = ExperimentConfig {
                strategies,
                users_per_condition: users,
                scenarios: data
                    .config
                    .scenarios
                    .iter()
                    .map(|(id, &start)| ScenarioSpec { id: id.clone(), start })
                    .collect(),
                days: data.config.scenario_days,
                master_seed: seed,
                population: UserPopulation::default(),
            };
            let output = run_experiment(&data.environment(), &exp)?;
            output.write_to(&out)?;
            for s in &output.summaries {
                for t in &s.trajectories {
                    let last = t.mean.len() - 1;
                    println!("{}\t{}\t{:.0}\t{:.0}", s.scenario, t.strategy, t.mean[last], t.se[last]);
                }
            }
            Ok(())
        }
        Command::TrainUserModel {
            config,
            logs,
            out,
            epochs,
        } => {
            let data = DataBundle::load(load_config(&config)?)?;
            let records = load_jsonl(&logs)?;
            let model = train_user_model(
                &records,
                &data.store,
                UserModelConfig::new(data.series.len(), data.store.feature_dim()),
                &train_config(epochs),
            )?;
            model.save(&out).with_context(|| format!("writing {}", out.display()))?;
            Ok(())
        }
        Command::CrossValidate {
            config,
            logs,
            folds,
            epochs,
        } => {
            let data = DataBundle::load(load_config(&config)?)?;
            let records = load_jsonl(&logs)?;
            let cv = cross_validate(
                &records,
                &data.store,
                UserModelConfig::new(data.series.len(), data.store.feature_dim()),
                &train_config(epochs),
                folds,
            )?;
            for f in &cv.folds {
                println!("fold {}: r = {:.3} over {} records", f.fold, f.pearson, f.test_records);
            }
            println!("r = {:.3} ± {:.3}", cv.mean, cv.sd);
            Ok(())
        }
    }
}

fn serve(config: ServiceConfig, bind: SocketAddr) -> anyhow::Result<()> {
    let data = DataBundle::load(config)?;
    let state = AppState::open(data)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
