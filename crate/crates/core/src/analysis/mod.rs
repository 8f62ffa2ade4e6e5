//! Studies built on top of training and evaluation: the γ sweep, the
//! vulnerability curves, the variant ablation and attention heatmaps.
//!
//! Training runs go through [`train_run`], which can consult a [`RunCache`]
//! so that studies sharing a configuration train it once.

pub mod ablation;
pub mod attention;
pub mod sweep;
pub mod vulnerability;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use ablation::{ablation_report, AblationReport, AblationRow, ABLATION_CSV_HEADER};
pub use attention::{export_attention, read_mask_csv, AttentionFiles, AttentionMap};
pub use sweep::{gamma_sweep, SweepResult, SweepRow, DEFAULT_SWEEP_GAMMAS, SWEEP_CSV_HEADER};
pub use vulnerability::{
    perturbed_accuracy, trapezoid_auc, vulnerability, VulnerabilityCurve, VulnerabilityRow,
    DEFAULT_PERTURBATIONS, VULNERABILITY_CSV_HEADER,
};

use crate::data::{sha256_hex, Dataset};
use crate::error::{Error, Result};
use crate::fewshot::{embed_split, evaluate_embedded, EpisodeSpec, EvalResult, DEFAULT_QUERIES};
use crate::model::{
    epoch_log_csv, load_checkpoint, save_checkpoint, train, EpochLog, Model, Preset, TrainConfig,
    TrainState,
};

/// Held-out evaluation settings shared by the studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub way: usize,
    pub shots: Vec<usize>,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            way: 5,
            shots: vec![1, 5],
            queries: DEFAULT_QUERIES,
            episodes: 1000,
            seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.way == 0 || self.shots.is_empty() || self.shots.contains(&0) || self.queries == 0 {
            return Err(Error::Config("way, shots and queries must be positive".into()));
        }
        if self.episodes < 2 {
            return Err(Error::Config("evaluation needs at least 2 episodes".into()));
        }
        Ok(())
    }

    /// Evaluates `model` on the test split once per shot count, embedding the
    /// split a single time.
    pub fn evaluate_test(&self, ds: &Dataset, model: &Model) -> Result<Vec<(usize, EvalResult)>> {
        self.validate()?;
        let emb = embed_split(model, &ds.test)?;
        self.shots
            .iter()
            .map(|&shot| {
                let spec = EpisodeSpec {
                    way: self.way,
                    shot,
                    queries: self.queries,
                    episodes: self.episodes,
                };
                Ok((shot, evaluate_embedded(&emb, spec, self.seed)?))
            })
            .collect()
    }
}

/// A finished training run: the selected state and its epoch log.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub state: TrainState,
    pub epochs: Vec<EpochLog>,
    /// True when the run was read back from a cache instead of trained.
    pub cached: bool,
}

/// Directory of finished runs keyed by everything that determines them.
#[derive(Debug, Clone)]
pub struct RunCache {
    dir: PathBuf,
}

const CACHE_FORMAT: &str = "run-cache-v1";

impl RunCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Hex key over the preset, the serialized config, the seed and the
    /// dataset digest.
    pub fn key(ds_digest: &str, preset: Preset, cfg: &TrainConfig, seed: u64) -> Result<String> {
        let cfg_text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
        let material = format!("{CACHE_FORMAT}\n{}\n{seed}\n{ds_digest}\n{cfg_text}", preset.tag());
        Ok(sha256_hex(material.as_bytes()))
    }

    fn entry(&self, key: &str) -> PathBuf {
        self.dir.join(key)
    }

    /// Returns the cached run, or `None` if absent or unreadable.
    pub fn load(&self, key: &str) -> Option<TrainedRun> {
        let dir = self.entry(key);
        let state = load_checkpoint(&dir.join("best.afck")).ok()?;
        let text = fs::read_to_string(dir.join("log.csv")).ok()?;
        let epochs = text
            .lines()
            .skip(1)
            .map(EpochLog::parse_csv_row)
            .collect::<Result<Vec<_>>>()
            .ok()?;
        Some(TrainedRun {
            state,
            epochs,
            cached: true,
        })
    }

    pub fn store(&self, key: &str, run: &TrainedRun) -> Result<()> {
        let dir = self.entry(key);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let log = dir.join("log.csv");
        fs::write(&log, epoch_log_csv(&run.epochs)).map_err(|e| Error::io(&log, e))?;
        // The checkpoint is written last: its presence marks a complete entry.
        save_checkpoint(&run.state, &dir.join("best.afck"))
    }
}

/// Trains one model, reusing a cached result when one matches exactly.
pub fn train_run(
    ds: &Dataset,
    preset: Preset,
    cfg: &TrainConfig,
    seed: u64,
    cache: Option<&RunCache>,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainedRun> {
    let key = match cache {
        Some(_) => Some(RunCache::key(&ds.digest(), preset, cfg, seed)?),
        None => None,
    };
    if let (Some(c), Some(k)) = (cache, &key) {
        if let Some(run) = c.load(k) {
            return Ok(run);
        }
    }
    let out = train(ds, preset, cfg, seed, on_epoch)?;
    let run = TrainedRun {
        state: out.best,
        epochs: out.epochs,
        cached: false,
    };
    if let (Some(c), Some(k)) = (cache, &key) {
        c.store(k, &run)?;
    }
    Ok(run)
}
