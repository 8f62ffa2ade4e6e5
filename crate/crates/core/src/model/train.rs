//! One optimization step, split into a forward pass that records everything
//! the update needs and a backward pass that turns it into gradients.
//!
//! For the adversarial variants the forward pass computes, per sample,
//! `ΔM = ∂l_ent/∂M` at the uniform mask, `M_a = M₀ + γΔM` and
//! `x_a = Σ M_a·X`. The entropy itself is only a by-product: the backward
//! pass never reads it.

use serde::{Deserialize, Serialize};

use super::backbone::{squeeze_1x1, LayerCache};
use super::optim::{Optimizer, OptimizerKind};
use super::{Model, Preset, Variant};
use crate::adversarial::{adversarial_batch, second_order_terms, AdversarialBatch, AdversarialConfig};
use crate::error::{Error, Result};
use crate::nn::cosine::CosineBatch;
use crate::nn::loss::softmax_generic;
use crate::nn::{cross_entropy, CosineClassifier, Mode, ProbVector, DEFAULT_SCALE_TRAIN};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub halve_every: u32,
    pub epochs: u32,
    /// `None` selects the preset default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub scale_train: f32,
    pub adversarial: AdversarialConfig,
    pub augment_flip: bool,
    pub variant: Variant,
    pub optimizer: OptimizerKind,
    /// SGD momentum; ignored by Adam.
    pub momentum: f32,
    /// Validation episodes per epoch for model selection; 0 disables
    /// selection and keeps the last epoch.
    pub val_episodes: usize,
    pub val_way: usize,
    pub val_queries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            halve_every: 10,
            epochs: 50,
            batch_size: None,
            scale_train: DEFAULT_SCALE_TRAIN,
            adversarial: AdversarialConfig::default(),
            augment_flip: true,
            variant: Variant::Full,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            val_episodes: 200,
            val_way: 5,
            val_queries: 15,
        }
    }
}

impl TrainConfig {
    pub fn batch_size_for(&self, preset: Preset) -> usize {
        self.batch_size.unwrap_or_else(|| preset.default_batch_size())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.scale_train > 0.0 && self.scale_train.is_finite()) {
            return bad(format!("scale_train must be positive, got {}", self.scale_train));
        }
        if matches!(self.batch_size, Some(b) if b < 2) {
            return bad("batch_size must be at least 2 for batch normalization".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.val_episodes == 1 {
            return bad("val_episodes must be 0 or at least 2".into());
        }
        self.adversarial.validate()
    }
}

/// Per-step (or per-epoch mean) losses. `l_ent` is diagnostic only.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub l_h: f64,
    pub l_l: f64,
    pub l_ent: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn is_finite(&self) -> bool {
        self.l_h.is_finite() && self.l_l.is_finite() && self.total.is_finite()
    }
}

/// Model, optimizer and counters: everything a checkpoint restores.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub variant: Variant,
    pub optimizer: Optimizer,
    /// Completed epochs.
    pub epoch: u32,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(
        preset: Preset,
        n_classes: usize,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(
            preset,
            cfg.variant,
            n_classes,
            cfg.scale_train,
            cfg.adversarial.scale_adv,
            seed,
        )?;
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let optimizer = Optimizer::new(cfg.optimizer, cfg.momentum, &refs)?;
        Ok(TrainState {
            model,
            variant: cfg.variant,
            optimizer,
            epoch: 0,
            step: 0,
        })
    }
}

/// Gradients aligned with [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

/// A cross-entropy head: logits, probabilities and the mean loss.
#[derive(Debug, Clone)]
struct Head {
    fwd: CosineBatch,
    probs: Vec<f64>,
    loss: f64,
    correct: usize,
}

fn ce_head(clf: &CosineClassifier, feats: &Tensor, labels: &[usize], scale: f32) -> Result<Head> {
    let fwd = clf.forward_batch(feats, scale)?;
    let n = fwd.n_classes;
    let mut probs = Vec::with_capacity(fwd.logits.len());
    let mut total = 0f64;
    let mut correct = 0;
    for (b, &y) in labels.iter().enumerate() {
        let p = ProbVector::new(softmax_generic(fwd.row(b)))?;
        total += cross_entropy(&p, y)?;
        correct += usize::from(p.argmax() == y);
        probs.extend_from_slice(p.probs());
    }
    debug_assert_eq!(probs.len(), labels.len() * n);
    Ok(Head {
        fwd,
        probs,
        loss: total / labels.len() as f64,
        correct,
    })
}

/// Mean-loss gradients `(p - onehot) / B` pushed through the classifier.
fn ce_head_backward(clf: &CosineClassifier, head: &Head, labels: &[usize]) -> Result<(Tensor, Tensor)> {
    let n = head.fwd.n_classes;
    let inv_b = 1.0 / labels.len() as f64;
    let mut dz = head.probs.clone();
    for (b, &y) in labels.iter().enumerate() {
        dz[b * n + y] -= 1.0;
    }
    for v in &mut dz {
        *v *= inv_b;
    }
    clf.backward_batch(&head.fwd, &dz)
}

/// Everything recorded by [`forward_pass`].
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub variant: Variant,
    pub losses: LossRecord,
    /// Per-sample masks, pooled features and entropies.
    pub adversarial: AdversarialBatch,
    /// Samples whose low-head prediction matched the label.
    pub low_correct: usize,
    adv_cfg: AdversarialConfig,
    labels: Vec<usize>,
    maps: Tensor,
    low_caches: Vec<LayerCache>,
    high_caches: Option<Vec<LayerCache>>,
    low_head: Head,
    high_head: Option<Head>,
}

/// Train-mode forward pass of one batch under `variant`.
///
/// The mask pipeline runs for every variant so that all of them report the
/// same diagnostic entropy; only the adversarial variants feed `x_a` to the
/// low head.
pub fn forward_pass(
    model: &Model,
    variant: Variant,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<ForwardPass> {
    model.backbone.check_images(images)?;
    let b = images.shape()[0];
    if labels.len() != b {
        return Err(Error::mismatch("labels", &[b], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.classifier.n_classes()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            model.classifier.n_classes()
        )));
    }
    if variant.uses_high() != model.has_high() {
        return Err(Error::Config(format!(
            "variant {variant} does not match the model's high stage allocation"
        )));
    }
    let clf = &model.classifier;
    let (maps, low_caches) = model.backbone.low.forward_cached(images.clone(), Mode::Train)?;
    maps.check_finite("conv5 maps")?;
    let adversarial = adversarial_batch(&maps, clf, &cfg.adversarial)?;

    let low_feats = if variant.uses_adversarial() {
        &adversarial.adversarial
    } else {
        &adversarial.clean
    };
    let low_head = ce_head(clf, low_feats, labels, cfg.scale_train)?;

    let (high_caches, high_head) = match &model.backbone.high {
        Some(high) => {
            let (out, caches) = high.forward_cached(maps.clone(), Mode::Train)?;
            let xh = squeeze_1x1(out)?;
            (Some(caches), Some(ce_head(clf, &xh, labels, cfg.scale_train)?))
        }
        None => (None, None),
    };

    let l_l = low_head.loss;
    let l_h = high_head.as_ref().map_or(0.0, |h| h.loss);
    let l_ent = adversarial.entropy.iter().sum::<f64>() / b as f64;
    Ok(ForwardPass {
        variant,
        losses: LossRecord {
            l_h,
            l_l,
            l_ent,
            total: l_h + l_l,
        },
        low_correct: low_head.correct,
        adversarial,
        adv_cfg: cfg.adversarial,
        labels: labels.to_vec(),
        maps,
        low_caches,
        high_caches,
        low_head,
        high_head,
    })
}

impl ForwardPass {
    /// Gradients of `l_l + l_h` with respect to every parameter of `model`,
    /// which must be the model the pass was run on.
    pub fn backward(&self, model: &Model) -> Result<Gradients> {
        let clf = &model.classifier;
        let (b, c, h, w) = match *self.maps.shape() {
            [b, c, h, w] => (b, c, h, w),
            _ => unreachable!("conv5 maps are NCHW"),
        };
        let hw = h * w;

        let (dfeat_low, mut dclf) = ce_head_backward(clf, &self.low_head, &self.labels)?;

        // Pooling backward: dX[b,c,ij] = dx[b,c]·M_b[ij], with M_b = M_a for
        // the adversarial variants and M₀ otherwise. ΔM is a constant here.
        let m0 = vec![1.0 / hw as f32; hw];
        let mut dmaps = vec![0f32; b * c * hw];
        for i in 0..b {
            let mask = if self.variant.uses_adversarial() {
                self.adversarial.adversarial_masks[i].values().data()
            } else {
                &m0[..]
            };
            for ch in 0..c {
                let g = dfeat_low.data()[i * c + ch];
                let dst = &mut dmaps[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                for (d, &m) in dst.iter_mut().zip(mask) {
                    *d = g * m;
                }
            }
        }

        if self.variant.uses_adversarial() && !self.adv_cfg.stop_gradient {
            let per = c * hw;
            let mut dw_extra = vec![0f64; clf.weight.numel()];
            for i in 0..b {
                let upstream: Vec<f64> =
                    dfeat_low.data()[i * c..(i + 1) * c].iter().map(|&v| v as f64).collect();
                let (dx, dw) = second_order_terms(
                    &self.maps.data()[i * per..(i + 1) * per],
                    (c, h, w),
                    clf,
                    &self.adv_cfg,
                    &self.adversarial.clean.data()[i * c..(i + 1) * c],
                    &self.adversarial.feature_grads[i],
                    &upstream,
                );
                for (d, e) in dmaps[i * per..(i + 1) * per].iter_mut().zip(dx) {
                    *d += e as f32;
                }
                for (acc, e) in dw_extra.iter_mut().zip(dw) {
                    *acc += e;
                }
            }
            for (g, e) in dclf.data_mut().iter_mut().zip(dw_extra) {
                *g += e as f32;
            }
        }

        let mut dmaps = Tensor::from_parts(self.maps.shape_obj().clone(), dmaps);
        let mut high_grads = Vec::new();
        if let (Some(high), Some(caches), Some(head)) =
            (&model.backbone.high, &self.high_caches, &self.high_head)
        {
            let (dxh, dclf_high) = ce_head_backward(clf, head, &self.labels)?;
            let c7 = dxh.shape()[1];
            let dxh = Tensor::from_parts(Shape::nchw(b, c7, 1, 1)?, dxh.into_data());
            let (dmaps_high, grads) = high.backward(dxh, caches)?;
            dmaps = dmaps.add(&dmaps_high)?;
            dclf = dclf.add(&dclf_high)?;
            high_grads = grads;
        }
        let (_, low_grads) = model.backbone.low.backward(dmaps, &self.low_caches)?;

        let mut tensors = Vec::with_capacity(4 * (low_grads.len() + high_grads.len()) + 1);
        for g in low_grads.into_iter().chain(high_grads) {
            tensors.push(g.conv_weight);
            tensors.push(g.conv_bias);
            tensors.push(g.bn_gamma);
            tensors.push(g.bn_beta);
        }
        tensors.push(dclf);
        Ok(Gradients { tensors })
    }

    /// Folds this pass's batch statistics into the model's BN running
    /// estimates.
    pub fn commit_running_stats(&self, model: &mut Model) {
        model.backbone.low.commit_running_stats(&self.low_caches);
        if let (Some(high), Some(caches)) = (model.backbone.high.as_mut(), &self.high_caches) {
            high.commit_running_stats(caches);
        }
    }
}

/// Forward, backward, BN commit and optimizer update for one batch.
/// Non-finite losses, gradients or parameters abort with
/// [`Error::Divergence`].
pub fn training_step(
    state: &mut TrainState,
    images: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    lr: f32,
) -> Result<ForwardPass> {
    let diverged = |state: &TrainState, detail: String| Error::Divergence {
        epoch: state.epoch as usize,
        step: state.step as usize,
        detail,
    };
    let fp = match forward_pass(&state.model, state.variant, images, labels, cfg) {
        Ok(fp) => fp,
        Err(Error::NonFinite(what)) => return Err(diverged(state, format!("non-finite {what}"))),
        Err(e) => return Err(e),
    };
    if !fp.losses.is_finite() {
        return Err(diverged(state, format!("non-finite loss {:?}", fp.losses)));
    }
    let grads = match fp.backward(&state.model) {
        Ok(g) => g,
        Err(Error::NonFinite(what)) => return Err(diverged(state, format!("non-finite {what}"))),
        Err(e) => return Err(e),
    };
    if !grads.is_finite() {
        return Err(diverged(state, format!("non-finite gradient at loss {:?}", fp.losses)));
    }
    fp.commit_running_stats(&mut state.model);
    state.optimizer.step(state.model.params_mut(), &grads.tensors, lr)?;
    if let Some((name, _)) = state
        .model
        .params()
        .into_iter()
        .find(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
    {
        return Err(diverged(state, format!("parameter {name} became non-finite")));
    }
    state.step += 1;
    Ok(fp)
}
