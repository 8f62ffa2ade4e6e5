//! Variant × seed grid of held-out few-shot accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{train_run, EvalProtocol, RunCache, TrainedRun};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fewshot::mean_ci95;
use crate::model::{EpochLog, Preset, TrainConfig, Variant};

/// Held-out accuracy of one variant at one shot count, pooled over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotSummary {
    pub shot: usize,
    /// Mean over every episode of every successful seed.
    pub mean: f64,
    pub ci95: f64,
    /// Per-seed episode means, in seed order.
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub shots: Vec<ShotSummary>,
    pub seeds_ok: usize,
}

impl AblationRow {
    pub fn shot(&self, shot: usize) -> Option<&ShotSummary> {
        self.shots.iter().find(|s| s.shot == shot)
    }
}

#[derive(Debug, Clone, Default)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// `(variant, seed, error text)` of failed runs.
    pub failures: Vec<(Variant, u64, String)>,
    /// Selected state of every successful run, keyed by variant and seed.
    pub runs: BTreeMap<(Variant, u64), TrainedRun>,
}

pub const ABLATION_CSV_HEADER: &str = "variant,shot,mean_acc,ci95,seeds";

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// One line per variant and shot count; failed runs are listed after the
    /// table as `# failed` comment lines.
    pub fn csv(&self) -> String {
        let mut out = format!("{ABLATION_CSV_HEADER}\n");
        for r in &self.rows {
            for s in &r.shots {
                let _ = writeln!(out, "{},{},{:.6},{:.6},{}", r.variant, s.shot, s.mean, s.ci95, r.seeds_ok);
            }
        }
        for (v, seed, e) in &self.failures {
            let _ = writeln!(out, "# failed {v} seed {seed}: {e}");
        }
        out
    }
}

/// Trains every variant under every seed and evaluates each run on the test
/// split. Failed runs are recorded; the report covers the rest.
#[allow(clippy::too_many_arguments)]
pub fn ablation_report(
    ds: &Dataset,
    preset: Preset,
    variants: &[Variant],
    seeds: &[u64],
    cfg: &TrainConfig,
    protocol: &EvalProtocol,
    cache: Option<&RunCache>,
    mut on_epoch: impl FnMut(Variant, u64, &EpochLog),
) -> Result<AblationReport> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Config("the ablation needs at least one variant and one seed".into()));
    }
    protocol.validate()?;
    let mut report = AblationReport::default();
    for &variant in variants {
        let run_cfg = TrainConfig {
            variant,
            ..cfg.clone()
        };
        let mut episodes: Vec<Vec<f64>> = vec![Vec::new(); protocol.shots.len()];
        let mut per_seed: Vec<Vec<f64>> = vec![Vec::new(); protocol.shots.len()];
        let mut seeds_ok = 0;
        for &seed in seeds {
            let outcome = train_run(ds, preset, &run_cfg, seed, cache, |l| on_epoch(variant, seed, l))
                .and_then(|run| Ok((protocol.evaluate_test(ds, &run.state.model)?, run)));
            match outcome {
                Ok((evals, run)) => {
                    for (k, (_, r)) in evals.into_iter().enumerate() {
                        per_seed[k].push(r.mean);
                        episodes[k].extend(r.accuracies);
                    }
                    seeds_ok += 1;
                    report.runs.insert((variant, seed), run);
                }
                Err(e) => report.failures.push((variant, seed, e.to_string())),
            }
        }
        if seeds_ok == 0 {
            continue;
        }
        let shots = protocol
            .shots
            .iter()
            .zip(episodes.iter().zip(per_seed))
            .map(|(&shot, (eps, per_seed))| {
                let (mean, ci95) = mean_ci95(eps)?;
                Ok(ShotSummary {
                    shot,
                    mean,
                    ci95,
                    per_seed,
                })
            })
            .collect::<Result<_>>()?;
        report.rows.push(AblationRow {
            variant,
            shots,
            seeds_ok,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_lists_rows_and_failures() {
        let summary = |shot, mean| ShotSummary {
            shot,
            mean,
            ci95: 0.01,
            per_seed: vec![mean],
        };
        let report = AblationReport {
            rows: vec![AblationRow {
                variant: Variant::Full,
                shots: vec![summary(1, 0.5), summary(5, 0.7)],
                seeds_ok: 1,
            }],
            failures: vec![(Variant::C5Cls, 3, "diverged".into())],
            runs: BTreeMap::new(),
        };
        let csv = report.csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], ABLATION_CSV_HEADER);
        assert_eq!(lines[1], "full,1,0.500000,0.010000,1");
        assert_eq!(lines[3], "# failed c5_cls seed 3: diverged");
        assert_eq!(report.row(Variant::Full).unwrap().shot(5).unwrap().mean, 0.7);
    }
}
