//! Accuracy as a function of the mask step size γ.

use std::fmt::Write as _;

use super::{train_run, EvalProtocol, RunCache};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{EpochLog, Preset, TrainConfig};

pub const DEFAULT_SWEEP_GAMMAS: [f32; 4] = [0.1, 0.2, 0.4, 0.8];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub gamma: f32,
    pub way: usize,
    pub shot: usize,
    pub mean_acc: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    /// Ordered by γ, then by shot.
    pub rows: Vec<SweepRow>,
    /// γ values whose run failed, with the error text.
    pub failures: Vec<(f32, String)>,
}

pub const SWEEP_CSV_HEADER: &str = "gamma,way,shot,mean_acc,ci95";

impl SweepResult {
    pub fn csv(&self) -> String {
        let mut out = format!("{SWEEP_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.6},{:.6}", r.gamma, r.way, r.shot, r.mean_acc, r.ci95);
        }
        out
    }

    /// `max − min` of the mean accuracy across γ for one shot count, or
    /// `None` without rows for it.
    pub fn spread(&self, shot: usize) -> Option<f64> {
        let accs = self.rows.iter().filter(|r| r.shot == shot).map(|r| r.mean_acc);
        let (lo, hi) = accs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| (lo.min(a), hi.max(a)));
        (lo <= hi).then_some(hi - lo)
    }
}

pub fn validate_gammas(gammas: &[f32]) -> Result<()> {
    if gammas.is_empty() {
        return Err(Error::Config("the γ grid is empty".into()));
    }
    if let Some(g) = gammas.iter().find(|g| !(**g > 0.0 && **g <= 1.0)) {
        return Err(Error::Config(format!("γ must lie in (0, 1], got {g}")));
    }
    if gammas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("the γ grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Trains one model per γ with everything else held fixed and evaluates each
/// on the test split. A failed run is recorded and the sweep continues.
#[allow(clippy::too_many_arguments)]
pub fn gamma_sweep(
    ds: &Dataset,
    preset: Preset,
    gammas: &[f32],
    cfg: &TrainConfig,
    seed: u64,
    protocol: &EvalProtocol,
    cache: Option<&RunCache>,
    mut on_epoch: impl FnMut(f32, &EpochLog),
) -> Result<SweepResult> {
    validate_gammas(gammas)?;
    protocol.validate()?;
    let mut result = SweepResult::default();
    for &gamma in gammas {
        let run_cfg = TrainConfig {
            adversarial: cfg.adversarial.with_gamma(gamma),
            ..cfg.clone()
        };
        let outcome = train_run(ds, preset, &run_cfg, seed, cache, |log| on_epoch(gamma, log))
            .and_then(|run| protocol.evaluate_test(ds, &run.state.model));
        match outcome {
            Ok(evals) => {
                for (shot, r) in evals {
                    result.rows.push(SweepRow {
                        gamma,
                        way: protocol.way,
                        shot,
                        mean_acc: r.mean,
                        ci95: r.ci95,
                    });
                }
            }
            Err(e) => result.failures.push((gamma, e.to_string())),
        }
    }
    Ok(result)
}
