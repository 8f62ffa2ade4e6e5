//! Episodic N-way K-shot evaluation with nearest-prototype cosine
//! classification.
//!
//! A split is embedded once; episodes then index into the cached
//! embeddings. Episode `e` of a run seeded with `seed` draws from its own
//! stream, so results do not depend on evaluation order or thread count.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClassImages;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::cosine::normalize;
use crate::nn::math::dot;
use crate::rng::{SeedStreams, STREAM_EPISODES};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_QUERIES: usize = 15;

/// Location of an image inside a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageRef {
    pub class: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    /// Split class index for each slot.
    pub classes: Vec<usize>,
    /// `(image, slot)`, grouped by slot.
    pub support: Vec<(ImageRef, usize)>,
    pub query: Vec<(ImageRef, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub vector: Vec<f32>,
    pub class_slot: usize,
}

/// Samples an episode given the number of images in each class.
pub fn sample_episode_sizes<R: Rng + ?Sized>(
    class_sizes: &[usize],
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    if way == 0 || shot == 0 || queries == 0 {
        return Err(Error::InvalidArgument(format!(
            "way, shot and queries must be positive (got {way}, {shot}, {queries})"
        )));
    }
    if class_sizes.len() < way {
        return Err(Error::Data(format!(
            "{way}-way episodes need {way} classes, split has {}",
            class_sizes.len()
        )));
    }
    let classes: Vec<usize> = sample(rng, class_sizes.len(), way).into_vec();
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries);
    for (slot, &class) in classes.iter().enumerate() {
        let n = class_sizes[class];
        if n < shot + queries {
            return Err(Error::Data(format!(
                "class {class} has {n} images, episode needs {}",
                shot + queries
            )));
        }
        let picks = sample(rng, n, shot + queries).into_vec();
        for (k, &index) in picks.iter().enumerate() {
            let entry = (ImageRef { class, index }, slot);
            if k < shot {
                support.push(entry);
            } else {
                query.push(entry);
            }
        }
    }
    Ok(Episode {
        way,
        shot,
        queries_per_class: queries,
        classes,
        support,
        query,
    })
}

pub fn sample_episode<R: Rng + ?Sized>(
    split: &[ClassImages],
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    let sizes: Vec<usize> = split.iter().map(|c| c.images.len()).collect();
    sample_episode_sizes(&sizes, way, shot, queries, rng)
}

/// Per-slot mean of the support features (the feature itself for K = 1).
pub fn prototypes(support: &[(&[f32], usize)], way: usize) -> Result<Vec<Prototype>> {
    let dim = support
        .first()
        .map(|(v, _)| v.len())
        .ok_or_else(|| Error::InvalidArgument("empty support set".into()))?;
    let mut sums = vec![vec![0f64; dim]; way];
    let mut counts = vec![0usize; way];
    for &(v, slot) in support {
        if slot >= way || v.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "support entry with slot {slot} and dim {} does not fit {way}-way, dim {dim}",
                v.len()
            )));
        }
        for (s, &x) in sums[slot].iter_mut().zip(v) {
            *s += x as f64;
        }
        counts[slot] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(slot, (sum, n))| {
            if n == 0 {
                return Err(Error::InvalidArgument(format!("slot {slot} has no support")));
            }
            Ok(Prototype {
                vector: sum.into_iter().map(|s| (s / n as f64) as f32).collect(),
                class_slot: slot,
            })
        })
        .collect()
}

fn unit(v: &[f32]) -> Vec<f64> {
    let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    normalize(&v).0
}

/// Slot of the prototype with the largest cosine similarity; ties go to the
/// lowest slot.
pub fn nearest_prototype(query: &[f32], protos: &[Prototype]) -> usize {
    let q = unit(query);
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for p in protos {
        let s = dot(&q, &unit(&p.vector));
        if s > best.0 || (s == best.0 && p.class_slot < best.1) {
            best = (s, p.class_slot);
        }
    }
    best.1
}

/// Cosine similarity, normalized with the classifier's `eps` convention.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    dot(&unit(a), &unit(b))
}

/// Fraction of queries assigned to their own slot.
pub fn classify_features(
    support: &[(&[f32], usize)],
    query: &[(&[f32], usize)],
    way: usize,
) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::InvalidArgument("empty query set".into()));
    }
    let protos = prototypes(support, way)?;
    let correct = query
        .iter()
        .filter(|(q, slot)| nearest_prototype(q, &protos) == *slot)
        .count();
    Ok(correct as f64 / query.len() as f64)
}

/// Embeddings of every image of a split, `[class][image][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitEmbeddings {
    pub classes: Vec<Vec<Vec<f32>>>,
}

impl SplitEmbeddings {
    pub fn class_sizes(&self) -> Vec<usize> {
        self.classes.iter().map(Vec::len).collect()
    }

    pub fn get(&self, r: ImageRef) -> &[f32] {
        &self.classes[r.class][r.index]
    }
}

pub fn embed_split(model: &Model, split: &[ClassImages]) -> Result<SplitEmbeddings> {
    let classes = split
        .iter()
        .map(|class| {
            let mut data = Vec::new();
            for img in &class.images {
                data.extend_from_slice(img.data());
            }
            let s = model.preset().input_size();
            let batch = Tensor::from_parts(Shape::new(vec![class.images.len(), 3, s, s])?, data);
            let e = model.embed(&batch)?;
            let d = e.shape()[1];
            Ok(e.data().chunks(d).map(<[f32]>::to_vec).collect())
        })
        .collect::<Result<_>>()?;
    Ok(SplitEmbeddings { classes })
}

pub fn classify_embedded(episode: &Episode, emb: &SplitEmbeddings) -> Result<f64> {
    let support: Vec<(&[f32], usize)> = episode.support.iter().map(|&(r, s)| (emb.get(r), s)).collect();
    let query: Vec<(&[f32], usize)> = episode.query.iter().map(|&(r, s)| (emb.get(r), s)).collect();
    classify_features(&support, &query, episode.way)
}

/// Embeds the episode's images with `model` and classifies the queries.
pub fn classify_episode(episode: &Episode, split: &[ClassImages], model: &Model) -> Result<f64> {
    let embed_one = |r: ImageRef| -> Result<Vec<f32>> {
        let img = &split[r.class].images[r.index];
        let s = img.shape();
        let batch = Tensor::from_vec(&[1, s[0], s[1], s[2]], img.data().to_vec())?;
        Ok(model.embed(&batch)?.into_data())
    };
    let support: Vec<(Vec<f32>, usize)> =
        episode.support.iter().map(|&(r, s)| Ok((embed_one(r)?, s))).collect::<Result<_>>()?;
    let query: Vec<(Vec<f32>, usize)> =
        episode.query.iter().map(|&(r, s)| Ok((embed_one(r)?, s))).collect::<Result<_>>()?;
    let support: Vec<(&[f32], usize)> = support.iter().map(|(v, s)| (v.as_slice(), *s)).collect();
    let query: Vec<(&[f32], usize)> = query.iter().map(|(v, s)| (v.as_slice(), *s)).collect();
    classify_features(&support, &query, episode.way)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    pub ci95: f64,
    pub accuracies: Vec<f64>,
}

/// Mean and `1.96 · s / √n` with the sample standard deviation `s`.
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 values, got {n}")));
    }
    // Shifted by the first value, so constant inputs give their value back
    // exactly and a zero interval.
    let shift = values[0];
    let mean = shift + values.iter().map(|v| v - shift).sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * (var / n as f64).sqrt()))
}

/// Runs `spec.episodes` episodes over cached embeddings.
pub fn evaluate_embedded(emb: &SplitEmbeddings, spec: EpisodeSpec, seed: u64) -> Result<EvalResult> {
    if spec.episodes < 2 {
        return Err(Error::InvalidArgument("evaluation needs at least 2 episodes".into()));
    }
    let sizes = emb.class_sizes();
    let streams = SeedStreams::new(seed);
    let accuracies = (0..spec.episodes)
        .into_par_iter()
        .map(|e| {
            let mut rng = streams.indexed(STREAM_EPISODES, e as u64);
            let ep = sample_episode_sizes(&sizes, spec.way, spec.shot, spec.queries, &mut rng)?;
            classify_embedded(&ep, emb)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, ci95) = mean_ci95(&accuracies)?;
    Ok(EvalResult {
        mean,
        ci95,
        accuracies,
    })
}

pub fn evaluate(
    split: &[ClassImages],
    model: &Model,
    spec: EpisodeSpec,
    seed: u64,
) -> Result<EvalResult> {
    evaluate_embedded(&embed_split(model, split)?, spec, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub way: usize,
    pub shot: usize,
    pub episodes: usize,
    pub mean_acc: f64,
    pub ci95: f64,
    pub seed: u64,
    pub checkpoint: String,
}

pub const EVAL_CSV_HEADER: &str = "way,shot,episodes,mean_acc,ci95,seed,checkpoint";

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = format!("{EVAL_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{},{}",
            r.way, r.shot, r.episodes, r.mean_acc, r.ci95, r.seed, r.checkpoint
        );
    }
    out
}
