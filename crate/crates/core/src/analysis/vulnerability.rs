//! Train-class accuracy when the pooled feature is pushed along the
//! entropy-ascent direction by a chosen step γ'.
//!
//! The classifier sees `x_a(γ')` in place of `x_l`. At `γ' = 0` the mask is
//! exactly `M₀`, so that row reproduces clean accuracy bit for bit.

use std::fmt::Write as _;

use crate::adversarial::{adversarial_batch, AdversarialConfig};
use crate::data::{stack, ClassImages};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Mode;
use crate::nn::cosine::CosineClassifier;
use crate::tensor::Tensor;

pub const DEFAULT_PERTURBATIONS: [f32; 6] = [0.0, 0.1, 0.2, 0.4, 0.8, 1.6];

const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct VulnerabilityRow {
    pub variant: String,
    pub perturbation_gamma: f32,
    pub train_class_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VulnerabilityCurve {
    /// Ordered by model, then by perturbation.
    pub rows: Vec<VulnerabilityRow>,
    /// Clean accuracy per model label, from the `M₀`-pooled features.
    pub clean: Vec<(String, f64)>,
}

pub const VULNERABILITY_CSV_HEADER: &str = "variant,perturbation_gamma,train_class_accuracy";

impl VulnerabilityCurve {
    pub fn csv(&self) -> String {
        let mut out = format!("{VULNERABILITY_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.6}", r.variant, r.perturbation_gamma, r.train_class_accuracy);
        }
        out
    }

    /// `(γ', accuracy)` points of one model, in grid order.
    pub fn points(&self, label: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.variant == label)
            .map(|r| (r.perturbation_gamma as f64, r.train_class_accuracy))
            .collect()
    }

    pub fn auc(&self, label: &str) -> Option<f64> {
        trapezoid_auc(&self.points(label))
    }
}

/// Trapezoid-rule area under `(x, y)` points sorted by `x`.
pub fn trapezoid_auc(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 || points.windows(2).any(|w| w[0].0 > w[1].0) {
        return None;
    }
    Some(points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum())
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn count_correct(clf: &CosineClassifier, feats: &Tensor, labels: &[usize]) -> Result<usize> {
    let out = clf.forward_batch(feats, clf.scale_train)?;
    Ok(labels.iter().enumerate().filter(|&(b, &y)| argmax_lowest(out.row(b)) == y).count())
}

/// Clean accuracy and accuracy at every `γ'` of `grid` over all images of
/// `split`, whose class order must match the classifier's.
pub fn perturbed_accuracy(
    model: &Model,
    split: &[ClassImages],
    grid: &[f32],
) -> Result<(f64, Vec<f64>)> {
    if split.len() != model.classifier.n_classes() {
        return Err(Error::Data(format!(
            "split has {} classes, classifier has {}",
            split.len(),
            model.classifier.n_classes()
        )));
    }
    if grid.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
        return Err(Error::Config("perturbation levels must be finite and non-negative".into()));
    }
    let samples: Vec<(&Tensor, usize)> = split
        .iter()
        .enumerate()
        .flat_map(|(c, class)| class.images.iter().map(move |img| (img, c)))
        .collect();
    if samples.is_empty() {
        return Err(Error::Data("split has no images".into()));
    }
    let clf = &model.classifier;
    let base = AdversarialConfig::from_scale(clf.scale_adv);
    let mut clean = 0usize;
    let mut correct = vec![0usize; grid.len()];
    for chunk in samples.chunks(CHUNK) {
        let imgs: Vec<&Tensor> = chunk.iter().map(|(t, _)| *t).collect();
        let labels: Vec<usize> = chunk.iter().map(|(_, c)| *c).collect();
        let maps = model.forward_low(&stack(&imgs)?, Mode::Eval)?;
        for (k, &g) in grid.iter().enumerate() {
            let batch = adversarial_batch(&maps, clf, &base.with_gamma(g))?;
            if k == 0 {
                clean += count_correct(clf, &batch.clean, &labels)?;
            }
            correct[k] += count_correct(clf, &batch.adversarial, &labels)?;
        }
    }
    let n = samples.len() as f64;
    Ok((clean as f64 / n, correct.into_iter().map(|c| c as f64 / n).collect()))
}

/// Builds the curves for labelled models on their common train split.
pub fn vulnerability(
    models: &[(String, &Model)],
    train_split: &[ClassImages],
    grid: &[f32],
) -> Result<VulnerabilityCurve> {
    if grid.is_empty() {
        return Err(Error::Config("the perturbation grid is empty".into()));
    }
    let mut curve = VulnerabilityCurve::default();
    for (label, model) in models {
        let (clean, accs) = perturbed_accuracy(model, train_split, grid)?;
        curve.clean.push((label.clone(), clean));
        for (&g, acc) in grid.iter().zip(accs) {
            curve.rows.push(VulnerabilityRow {
                variant: label.clone(),
                perturbation_gamma: g,
                train_class_accuracy: acc,
            });
        }
    }
    Ok(curve)
}
