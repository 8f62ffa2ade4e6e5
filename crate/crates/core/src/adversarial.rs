//! Adversarial region attention over conv feature maps.
//!
//! Pooling a `C×H×W` block with a spatial mask `M` gives
//! `x[c] = Σ_ij X[c,i,j]·M[i,j]`; the uniform mask `M₀ = 1/(H·W)` is global
//! average pooling. One gradient-ascent step on the prediction entropy with
//! respect to the mask, taken from `M₀`, yields the adversarial mask
//! `M_a = M₀ + γ·ΔM`, and pooling with `M_a` yields the adversarial feature
//! `x_a = x_l + γ·Δx_l`.
//!
//! `ΔM[i,j] = g·X[:,i,j]` where `g` is the entropy gradient at the pooled
//! feature, computed analytically through the cosine/softmax/entropy chain.
//! Nothing here touches classifier or backbone parameters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::cosine::{entropy_with_grads, CosineClassifier};
use crate::nn::math::Dual;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Uniform,
    Gradient,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    values: Tensor,
    kind: MaskKind,
}

impl Mask {
    /// `M₀`: every element exactly `1/(H·W)`.
    pub fn uniform(h: usize, w: usize) -> Result<Self> {
        let v = 1.0 / (h * w) as f32;
        Ok(Mask {
            values: Tensor::full(&[h, w], v)?,
            kind: MaskKind::Uniform,
        })
    }

    pub fn from_values(values: Tensor, kind: MaskKind) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "mask must be rank 2, got {:?}",
                values.shape()
            )));
        }
        values.check_finite("mask")?;
        Ok(Mask { values, kind })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialConfig {
    /// Step size of the mask update.
    pub gamma: f32,
    /// Scale factor of the cosine classifier when computing the entropy.
    pub scale_adv: f32,
    /// Treat `ΔM` as a constant when back-propagating the adversarial loss.
    #[serde(default = "default_true")]
    pub stop_gradient: bool,
}

fn default_true() -> bool {
    true
}

impl AdversarialConfig {
    /// `γ = 1/s_adv`.
    pub fn from_scale(scale_adv: f32) -> Self {
        AdversarialConfig {
            gamma: 1.0 / scale_adv,
            scale_adv,
            stop_gradient: true,
        }
    }

    pub fn with_gamma(mut self, gamma: f32) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_adv > 0.0 && self.scale_adv.is_finite()) {
            return Err(Error::Config(format!("scale_adv must be positive, got {}", self.scale_adv)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        Ok(())
    }
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig::from_scale(crate::nn::DEFAULT_SCALE_ADV)
    }
}

fn chw(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::InvalidArgument(format!(
            "feature maps must be C×H×W, got {s:?}"
        ))),
    }
}

/// Pools raw CHW data with raw mask values, accumulating in `f64`.
pub(crate) fn pool_raw(x: &[f32], mask: &[f32], c: usize) -> Vec<f64> {
    let hw = mask.len();
    (0..c)
        .map(|ch| {
            x[ch * hw..(ch + 1) * hw]
                .iter()
                .zip(mask)
                .fold(0f64, |acc, (&v, &m)| acc + v as f64 * m as f64)
        })
        .collect()
}

/// `out[c] = Σ_ij X[c,i,j]·M[i,j]`
pub fn masked_pool(x: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (c, h, w) = chw(x)?;
    if mask.values.shape() != [h, w] {
        return Err(Error::mismatch("masked_pool", &[h, w], mask.values.shape()));
    }
    let pooled = pool_raw(x.data(), mask.values.data(), c);
    let out = Tensor::from_parts(
        Shape::new(vec![c])?,
        pooled.into_iter().map(|v| v as f32).collect(),
    );
    out.check_finite("masked_pool")?;
    Ok(out)
}

/// Everything produced while computing `ΔM` for one sample.
#[derive(Debug, Clone)]
pub struct MaskGradient {
    pub mask: Mask,
    /// Entropy of the prediction on `x_l` at `scale_adv`. Diagnostic only.
    pub entropy: f64,
    /// `∂l_ent/∂x_l`
    pub feature_grad: Vec<f64>,
    /// `x_l = masked_pool(X, M₀)`
    pub pooled: Tensor,
}

/// Computes `ΔM = ∂l_ent/∂M` at `M₀` together with the intermediate values.
pub fn mask_gradient_detailed(
    x: &Tensor,
    clf: &CosineClassifier,
    cfg: &AdversarialConfig,
) -> Result<MaskGradient> {
    let (c, h, w) = chw(x)?;
    if c != clf.feat_dim() {
        return Err(Error::mismatch("entropy_mask_gradient", &[clf.feat_dim(), h, w], x.shape()));
    }
    x.check_finite("entropy_mask_gradient input")?;
    let weights: Vec<f64> = clf.weight.data().iter().map(|&v| v as f64).collect();
    mask_gradient_raw(x.data(), c, h, w, &weights, clf.n_classes(), cfg.scale_adv as f64)
}

fn mask_gradient_raw(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    n_classes: usize,
    scale_adv: f64,
) -> Result<MaskGradient> {
    let hw = h * w;
    let m0 = Mask::uniform(h, w)?;
    let pooled = pool_raw(x, m0.values.data(), c);
    let pooled_f32: Vec<f32> = pooled.iter().map(|&v| v as f32).collect();
    // The chain is evaluated at the f32 pooled feature, i.e. the same x_l
    // the classifier sees everywhere else.
    let xl: Vec<f64> = pooled_f32.iter().map(|&v| v as f64).collect();
    let (entropy, g, _) = entropy_with_grads(&xl, weights, n_classes, scale_adv);

    let mut dm = vec![0f64; hw];
    for (ch, &gc) in g.iter().enumerate() {
        for (d, &v) in dm.iter_mut().zip(&x[ch * hw..(ch + 1) * hw]) {
            *d += gc * v as f64;
        }
    }
    let dm: Vec<f32> = dm.into_iter().map(|v| v as f32).collect();
    if !entropy.is_finite() || dm.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("entropy_mask_gradient"));
    }
    Ok(MaskGradient {
        mask: Mask {
            values: Tensor::from_parts(Shape::new(vec![h, w])?, dm),
            kind: MaskKind::Gradient,
        },
        entropy,
        feature_grad: g,
        pooled: Tensor::from_parts(Shape::new(vec![c])?, pooled_f32),
    })
}

/// `ΔM = ∂l_ent/∂M |_{M₀}`
pub fn entropy_mask_gradient(
    x: &Tensor,
    clf: &CosineClassifier,
    cfg: &AdversarialConfig,
) -> Result<Mask> {
    Ok(mask_gradient_detailed(x, clf, cfg)?.mask)
}

/// `M_a = M₀ + γ·ΔM`
pub fn adversarial_mask(grad: &Mask, cfg: &AdversarialConfig) -> Result<Mask> {
    if grad.kind != MaskKind::Gradient {
        return Err(Error::InvalidArgument(format!(
            "adversarial_mask expects a gradient mask, got {:?}",
            grad.kind
        )));
    }
    let m0 = 1.0 / (grad.height() * grad.width()) as f32;
    let gamma = cfg.gamma;
    let values: Vec<f32> = grad.values.data().iter().map(|&d| m0 + gamma * d).collect();
    let values = Tensor::from_parts(grad.values.shape_obj().clone(), values);
    values.check_finite("adversarial_mask")?;
    Ok(Mask {
        values,
        kind: MaskKind::Adversarial,
    })
}

/// `x_a = Σ_ij M_a[i,j]·X[:,i,j]`
pub fn adversarial_feature(x: &Tensor, adv_mask: &Mask) -> Result<Tensor> {
    if adv_mask.kind == MaskKind::Gradient {
        return Err(Error::InvalidArgument(
            "adversarial_feature expects an adversarial (or uniform) mask".into(),
        ));
    }
    masked_pool(x, adv_mask)
}

/// Per-sample adversarial quantities for a batch of feature maps.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    /// `[B, C]` pooled with `M₀`.
    pub clean: Tensor,
    /// `[B, C]` pooled with each sample's `M_a`.
    pub adversarial: Tensor,
    pub gradient_masks: Vec<Mask>,
    pub adversarial_masks: Vec<Mask>,
    pub feature_grads: Vec<Vec<f64>>,
    pub entropy: Vec<f64>,
}

/// Runs the mask pipeline independently on every sample of an NCHW batch.
pub fn adversarial_batch(
    x: &Tensor,
    clf: &CosineClassifier,
    cfg: &AdversarialConfig,
) -> Result<AdversarialBatch> {
    let (b, c, h, w) = match x.shape() {
        &[b, c, h, w] => (b, c, h, w),
        s => {
            return Err(Error::InvalidArgument(format!(
                "adversarial_batch expects NCHW, got {s:?}"
            )))
        }
    };
    if c != clf.feat_dim() {
        return Err(Error::mismatch("adversarial_batch", &[b, clf.feat_dim(), h, w], x.shape()));
    }
    let weights: Vec<f64> = clf.weight.data().iter().map(|&v| v as f64).collect();
    let sample = c * h * w;
    let per: Vec<Result<(MaskGradient, Mask, Vec<f32>)>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let xs = &x.data()[i * sample..(i + 1) * sample];
            let mg = mask_gradient_raw(xs, c, h, w, &weights, clf.n_classes(), cfg.scale_adv as f64)?;
            let ma = adversarial_mask(&mg.mask, cfg)?;
            let xa: Vec<f32> = pool_raw(xs, ma.values.data(), c)
                .into_iter()
                .map(|v| v as f32)
                .collect();
            Ok((mg, ma, xa))
        })
        .collect();

    let mut clean = Vec::with_capacity(b * c);
    let mut adversarial = Vec::with_capacity(b * c);
    let mut out = AdversarialBatch {
        clean: Tensor::zeros(&[1])?,
        adversarial: Tensor::zeros(&[1])?,
        gradient_masks: Vec::with_capacity(b),
        adversarial_masks: Vec::with_capacity(b),
        feature_grads: Vec::with_capacity(b),
        entropy: Vec::with_capacity(b),
    };
    for r in per {
        let (mg, ma, xa) = r?;
        clean.extend_from_slice(mg.pooled.data());
        adversarial.extend(xa);
        out.gradient_masks.push(mg.mask);
        out.adversarial_masks.push(ma);
        out.feature_grads.push(mg.feature_grad);
        out.entropy.push(mg.entropy);
    }
    out.clean = Tensor::from_parts(Shape::new(vec![b, c])?, clean);
    out.adversarial = Tensor::from_parts(Shape::new(vec![b, c])?, adversarial);
    out.adversarial.check_finite("adversarial features")?;
    Ok(out)
}

/// Extra gradient terms of `u·x_a` when `ΔM` is differentiated instead of
/// held constant, for one sample.
///
/// `x_a = x_l + γ·Σ_ij (g·X_ij)·X_ij` with `g = ∇ₓ l_ent(x_l, W)`. The
/// constant-mask path already contributes `u·M_a[i,j]` to `∂/∂X_ij`; this
/// returns the remainder `γ·(u·X_ij)·g + γ·H_xx(Gu)/(H·W)` for the feature
/// maps and `γ·H_Wx(Gu)` for the classifier weights, where `G = Σ X_ij X_ijᵀ`.
/// The Hessian-vector products come from running the analytic gradient
/// with dual numbers.
pub fn second_order_terms(
    x: &[f32],
    dims: (usize, usize, usize),
    clf: &CosineClassifier,
    cfg: &AdversarialConfig,
    pooled: &[f32],
    feature_grad: &[f64],
    upstream: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = dims;
    let hw = h * w;
    let gamma = cfg.gamma as f64;

    // u·X_ij for every position.
    let mut u_dot = vec![0f64; hw];
    for (ch, &uc) in upstream.iter().enumerate() {
        for (acc, &v) in u_dot.iter_mut().zip(&x[ch * hw..(ch + 1) * hw]) {
            *acc += uc * v as f64;
        }
    }
    // v = G u = Σ_ij (u·X_ij) X_ij
    let v: Vec<f64> = (0..c)
        .map(|ch| {
            x[ch * hw..(ch + 1) * hw]
                .iter()
                .zip(&u_dot)
                .fold(0f64, |acc, (&xv, &ud)| acc + xv as f64 * ud)
        })
        .collect();

    let x_dual: Vec<Dual> = pooled
        .iter()
        .zip(&v)
        .map(|(&p, &vi)| Dual::new(p as f64, vi))
        .collect();
    let w_dual: Vec<Dual> = clf
        .weight
        .data()
        .iter()
        .map(|&wv| Dual::new(wv as f64, 0.0))
        .collect();
    let (_, gx, gw) = entropy_with_grads(&x_dual, &w_dual, clf.n_classes(), cfg.scale_adv as f64);

    let mut dx = vec![0f64; c * hw];
    for ch in 0..c {
        let hvp = gx[ch].eps / hw as f64;
        for (ij, d) in dx[ch * hw..(ch + 1) * hw].iter_mut().enumerate() {
            *d = gamma * (u_dot[ij] * feature_grad[ch] + hvp);
        }
    }
    let dw = gw.iter().map(|g| gamma * g.eps).collect();
    (dx, dw)
}
