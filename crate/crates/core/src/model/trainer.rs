//! Epoch loop: shuffling, flip augmentation, LR schedule and
//! validation-based model selection.

use rand::seq::SliceRandom;
use serde::Serialize;

use super::optim::learning_rate;
use super::train::{training_step, LossRecord, TrainConfig, TrainState};
use super::Preset;
use crate::data::{augment_flip, stack, Dataset};
use crate::error::{Error, Result};
use crate::fewshot::{evaluate, EpisodeSpec};
use crate::rng::{SeedStreams, STREAM_AUGMENT, STREAM_SHUFFLE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub l_h: f64,
    pub l_l: f64,
    pub l_ent: f64,
    pub lr: f32,
    /// 1-shot accuracy on the validation split, when selection is enabled.
    pub val_1shot_acc: Option<f64>,
    /// Fraction of training samples the low head classified correctly.
    pub train_acc: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,l_h,l_l,l_ent,lr,val_1shot_acc,train_acc";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let val = self.val_1shot_acc.map_or(String::new(), |v| format!("{v:.6}"));
        format!(
            "{},{:.6},{:.6},{:.6},{},{},{:.6}",
            self.epoch, self.l_h, self.l_l, self.l_ent, self.lr, val, self.train_acc
        )
    }

    /// Inverse of [`EpochLog::csv_row`] up to the printed precision.
    pub fn parse_csv_row(row: &str) -> Result<Self> {
        let bad = || Error::Format {
            path: "epoch log".into(),
            msg: format!("malformed row `{row}`"),
        };
        let f: Vec<&str> = row.trim_end().split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(EpochLog {
            epoch: f[0].parse().map_err(|_| bad())?,
            l_h: num(f[1])?,
            l_l: num(f[2])?,
            l_ent: num(f[3])?,
            lr: f[4].parse().map_err(|_| bad())?,
            val_1shot_acc: if f[5].is_empty() { None } else { Some(num(f[5])?) },
            train_acc: num(f[6])?,
        })
    }
}

/// The full log as CSV, header included.
pub fn epoch_log_csv(rows: &[EpochLog]) -> String {
    let mut out = format!("{EPOCH_LOG_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State after the last epoch.
    pub last: TrainState,
    /// State with the best validation accuracy, or the last one when
    /// validation is disabled.
    pub best: TrainState,
    pub best_epoch: u32,
    pub best_val: Option<f64>,
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimizer step, in order.
    pub steps: Vec<LossRecord>,
}

/// Validation episode settings for a split, or `None` if it cannot host
/// episodes with at least two classes.
fn validation_spec(ds: &Dataset, cfg: &TrainConfig) -> Option<EpisodeSpec> {
    if cfg.val_episodes == 0 || ds.val.len() < 2 {
        return None;
    }
    let smallest = ds.val.iter().map(|c| c.images.len()).min()?;
    if smallest < 2 {
        return None;
    }
    Some(EpisodeSpec {
        way: cfg.val_way.min(ds.val.len()),
        shot: 1,
        queries: cfg.val_queries.min(smallest - 1),
        episodes: cfg.val_episodes,
    })
}

/// Trains from scratch on the train split. `on_epoch` sees every log row as
/// soon as its epoch finishes.
pub fn train(
    ds: &Dataset,
    preset: Preset,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.image_size != preset.input_size() {
        return Err(Error::Data(format!(
            "dataset images are {0}×{0}, preset {1} expects {2}×{2}",
            ds.image_size,
            preset.tag(),
            preset.input_size()
        )));
    }
    if ds.train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let samples: Vec<(usize, usize)> = ds
        .train
        .iter()
        .enumerate()
        .flat_map(|(c, class)| (0..class.images.len()).map(move |i| (c, i)))
        .collect();
    let batch_size = cfg.batch_size_for(preset);
    let streams = SeedStreams::new(seed);
    let val_spec = validation_spec(ds, cfg);

    let mut state = TrainState::new(preset, ds.train.len(), cfg, seed)?;
    let mut best: Option<(TrainState, u32, f64)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs as usize);
    let mut steps = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg.learning_rate, cfg.halve_every, epoch);
        let mut order = samples.clone();
        order.shuffle(&mut streams.indexed(STREAM_SHUFFLE, epoch as u64));
        let mut aug = streams.indexed(STREAM_AUGMENT, epoch as u64);

        let mut sum = LossRecord::default();
        let (mut n_batches, mut seen, mut correct) = (0usize, 0usize, 0usize);
        for chunk in order.chunks(batch_size) {
            // Batch normalization needs two samples; a lone trailing sample
            // is dropped.
            if chunk.len() < 2 {
                continue;
            }
            let flipped: Vec<_> = if cfg.augment_flip {
                chunk.iter().map(|&(c, i)| augment_flip(&ds.train[c].images[i], &mut aug)).collect()
            } else {
                chunk.iter().map(|&(c, i)| ds.train[c].images[i].clone()).collect()
            };
            let refs: Vec<_> = flipped.iter().collect();
            let images = stack(&refs)?;
            let labels: Vec<usize> = chunk.iter().map(|&(c, _)| c).collect();
            let fp = training_step(&mut state, &images, &labels, cfg, lr)?;
            let l = fp.losses;
            sum.l_h += l.l_h;
            sum.l_l += l.l_l;
            sum.l_ent += l.l_ent;
            sum.total += l.total;
            n_batches += 1;
            seen += chunk.len();
            correct += fp.low_correct;
            steps.push(l);
        }
        state.epoch = epoch + 1;

        let val = match val_spec {
            Some(spec) => Some(evaluate(&ds.val, &state.model, spec, seed)?.mean),
            None => None,
        };
        let nb = n_batches.max(1) as f64;
        let log = EpochLog {
            epoch,
            l_h: sum.l_h / nb,
            l_l: sum.l_l / nb,
            l_ent: sum.l_ent / nb,
            lr,
            val_1shot_acc: val,
            train_acc: correct as f64 / seen.max(1) as f64,
        };
        on_epoch(&log);
        epochs.push(log);

        // Ties go to the later epoch: validation saturates on small splits.
        if let Some(v) = val {
            if best.as_ref().is_none_or(|(_, _, b)| v >= *b) {
                best = Some((state.clone(), epoch, v));
            }
        }
    }

    let (best, best_epoch, best_val) = match best {
        Some((s, e, v)) => (s, e, Some(v)),
        None => (state.clone(), cfg.epochs.saturating_sub(1), None),
    };
    Ok(TrainOutcome {
        last: state,
        best,
        best_epoch,
        best_val,
        epochs,
        steps,
    })
}
