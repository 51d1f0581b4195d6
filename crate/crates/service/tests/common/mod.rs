#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use xselector_core::policy::PolicyHyperparams;
use xselector_core::predictor::PredictorHyperparams;
use xselector_core::synth::{World, WorldConfig};
use xselector_core::user_model::UserModel;
use xselector_service::config::ServiceConfig;
use xselector_service::data::{write_testbed, DataBundle};
use xselector_service::http::{router, AppState};

/// A small world on disk, built once per test binary. The user model is
/// untrained; sessions only need it to be deterministic.
pub fn small_testbed() -> &'static ServiceConfig {
    static CELL: OnceLock<(tempfile::TempDir, ServiceConfig)> = OnceLock::new();
    &CELL
        .get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let config = WorldConfig {
                seed: 99,
                train_instruments: 1,
                bars: 420,
                predictor: PredictorHyperparams {
                    epochs: 5,
                    ..PredictorHyperparams::default()
                },
                policy: PolicyHyperparams {
                    episodes: 40,
                    iterations: 10,
                    ..PolicyHyperparams::default()
                },
                ..WorldConfig::default()
            };
            let world = World::build(dir.path(), config).unwrap();
            let model = UserModel::initialized(world.user_model_config(), 5).unwrap();
            let cfg = write_testbed(dir.path(), &world, Some(&model)).unwrap();
            (dir, cfg)
        })
        .1
}

/// The shared testbed with a private session log directory.
pub fn config_with_logs(log_dir: &Path) -> ServiceConfig {
    let mut cfg = small_testbed().clone();
    cfg.log_dir = log_dir.to_path_buf();
    cfg
}

pub struct Server {
    pub base: String,
    pub state: Arc<AppState>,
    handle: tokio::task::JoinHandle<()>,
}

impl Server {
    pub async fn start(config: ServiceConfig) -> Server {
        let state = AppState::open(DataBundle::load(config).unwrap()).unwrap();
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let app = router(state.clone());
        let handle = tokio::spawn(async move {
            axum::serve(listener, app).await.unwrap();
        });
        Server { base, state, handle }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn stop(self) {
        self.handle.abort();
    }
}

pub fn log_file(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.jsonl"))
}
