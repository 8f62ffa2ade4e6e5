//! Scaled cosine-similarity classifier.
//!
//! `logit_k = scale * <x / (|x| + eps), w_k / (|w_k| + eps)>`, so pre-scale
//! logits lie in `[-1, 1]`. One weight matrix is shared by every loss that
//! scores features; only the scale differs between uses.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::loss::{entropy_generic, entropy_logit_grad_generic, softmax_generic};
use crate::nn::math::{dot, Real};
use crate::tensor::{Shape, Tensor};

pub const COSINE_EPS: f64 = 1e-8;
pub const DEFAULT_SCALE_TRAIN: f32 = 20.0;
pub const DEFAULT_SCALE_ADV: f32 = 5.0;

#[derive(Debug, Clone)]
pub struct CosineClassifier {
    /// `[n_classes, feat_dim]`
    pub weight: Tensor,
    pub scale_train: f32,
    pub scale_adv: f32,
}

/// Unit-normalized weight rows, computed once and reused across a batch.
#[derive(Debug, Clone)]
pub struct NormalizedWeights {
    pub(crate) raw: Vec<f64>,
    pub(crate) unit: Vec<f64>,
    pub(crate) norms: Vec<f64>,
    pub(crate) n_classes: usize,
    pub(crate) dim: usize,
}

impl NormalizedWeights {
    pub(crate) fn row(&self, k: usize) -> &[f64] {
        &self.unit[k * self.dim..(k + 1) * self.dim]
    }
}

/// Forward state of a batch through the classifier.
#[derive(Debug, Clone)]
pub struct CosineBatch {
    pub logits: Vec<f64>,
    pub batch: usize,
    pub n_classes: usize,
    scale: f64,
    x: Vec<f64>,
    xhat: Vec<f64>,
    xnorm: Vec<f64>,
    weights: NormalizedWeights,
}

impl CosineBatch {
    pub fn row(&self, b: usize) -> &[f64] {
        &self.logits[b * self.n_classes..(b + 1) * self.n_classes]
    }
}

pub(crate) fn normalize<T: Real>(v: &[T]) -> (Vec<T>, T) {
    let norm = dot(v, v).sqrt();
    let denom = norm + T::cst(COSINE_EPS);
    (v.iter().map(|&x| x / denom).collect(), norm)
}

/// Pulls a gradient on `v / (|v| + eps)` back onto `v`.
pub(crate) fn normalize_backward<T: Real>(v: &[T], norm: T, g_unit: &[T]) -> Vec<T> {
    let denom = norm + T::cst(COSINE_EPS);
    if norm.value() == 0.0 {
        return g_unit.iter().map(|&g| g / denom).collect();
    }
    let proj = dot(v, g_unit) / (norm * denom * denom);
    v.iter()
        .zip(g_unit)
        .map(|(&x, &g)| g / denom - x * proj)
        .collect()
}

/// Entropy of the scaled cosine prediction for one feature vector, with its
/// gradients with respect to the feature and the raw weight matrix.
pub(crate) fn entropy_with_grads<T: Real>(
    x: &[T],
    weight: &[T],
    n_classes: usize,
    scale: f64,
) -> (T, Vec<T>, Vec<T>) {
    let d = x.len();
    let s = T::cst(scale);
    let (xhat, xnorm) = normalize(x);
    let rows: Vec<(Vec<T>, T)> = (0..n_classes)
        .map(|k| normalize(&weight[k * d..(k + 1) * d]))
        .collect();
    let logits: Vec<T> = rows.iter().map(|(w, _)| s * dot(&xhat, w)).collect();
    let p = softmax_generic(&logits);
    let h = entropy_generic(&p);
    let dz = entropy_logit_grad_generic(&p, h);

    let mut g_xhat = vec![T::cst(0.0); d];
    let mut gw = Vec::with_capacity(n_classes * d);
    for (k, (what, wnorm)) in rows.iter().enumerate() {
        let c = s * dz[k];
        for (g, &w) in g_xhat.iter_mut().zip(what) {
            *g += c * w;
        }
        let g_what: Vec<T> = xhat.iter().map(|&xh| c * xh).collect();
        gw.extend(normalize_backward(&weight[k * d..(k + 1) * d], *wnorm, &g_what));
    }
    let gx = normalize_backward(x, xnorm, &g_xhat);
    (h, gx, gw)
}

impl CosineClassifier {
    pub fn new(n_classes: usize, feat_dim: usize, scale_train: f32, scale_adv: f32) -> Result<Self> {
        if !(scale_train > 0.0 && scale_adv > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scale factors must be positive, got {scale_train} and {scale_adv}"
            )));
        }
        Ok(CosineClassifier {
            weight: Tensor::zeros(&[n_classes, feat_dim])?,
            scale_train,
            scale_adv,
        })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let std = (1.0 / self.feat_dim() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for w in self.weight.data_mut() {
            *w = normal.sample(rng) as f32;
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn feat_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn normalized(&self) -> NormalizedWeights {
        let (n, d) = (self.n_classes(), self.feat_dim());
        let raw: Vec<f64> = self.weight.data().iter().map(|&v| v as f64).collect();
        let mut unit = Vec::with_capacity(n * d);
        let mut norms = Vec::with_capacity(n);
        for k in 0..n {
            let (u, r) = normalize(&raw[k * d..(k + 1) * d]);
            unit.extend(u);
            norms.push(r);
        }
        NormalizedWeights {
            raw,
            unit,
            norms,
            n_classes: n,
            dim: d,
        }
    }

    /// Scaled cosine logits of a single feature vector.
    pub fn logits(&self, x: &[f32], scale: f32) -> Result<Vec<f32>> {
        if x.is_empty() {
            return Err(Error::InvalidArgument("zero-dimensional feature".into()));
        }
        let feats = Tensor::from_vec(&[1, x.len()], x.to_vec())?;
        let out = self.forward_batch(&feats, scale)?;
        Ok(out.logits.iter().map(|&v| v as f32).collect())
    }

    pub fn forward_batch(&self, feats: &Tensor, scale: f32) -> Result<CosineBatch> {
        let s = feats.shape();
        if s.len() != 2 || s[1] != self.feat_dim() {
            return Err(Error::mismatch("cosine features", &[s[0], self.feat_dim()], s));
        }
        let (b, d) = (s[0], s[1]);
        let weights = self.normalized();
        let x: Vec<f64> = feats.data().iter().map(|&v| v as f64).collect();
        let mut xhat = Vec::with_capacity(b * d);
        let mut xnorm = Vec::with_capacity(b);
        let mut logits = Vec::with_capacity(b * weights.n_classes);
        for i in 0..b {
            let (u, r) = normalize(&x[i * d..(i + 1) * d]);
            for k in 0..weights.n_classes {
                logits.push(scale as f64 * dot(&u, weights.row(k)));
            }
            xhat.extend(u);
            xnorm.push(r);
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cosine logits"));
        }
        Ok(CosineBatch {
            logits,
            batch: b,
            n_classes: weights.n_classes,
            scale: scale as f64,
            x,
            xhat,
            xnorm,
            weights,
        })
    }

    /// Given `dL/dlogits` (`[B, n_classes]`, row-major), returns
    /// `(dL/dfeatures [B, d], dL/dweight [n, d])`.
    pub fn backward_batch(&self, fwd: &CosineBatch, dlogits: &[f64]) -> Result<(Tensor, Tensor)> {
        let (b, n, d) = (fwd.batch, fwd.n_classes, fwd.weights.dim);
        if dlogits.len() != b * n {
            return Err(Error::mismatch("cosine dlogits", &[b, n], &[dlogits.len()]));
        }
        let mut dfeat = Vec::with_capacity(b * d);
        let mut g_what = vec![0f64; n * d];
        for i in 0..b {
            let dz = &dlogits[i * n..(i + 1) * n];
            let xhat = &fwd.xhat[i * d..(i + 1) * d];
            let mut g_xhat = vec![0f64; d];
            for k in 0..n {
                let c = fwd.scale * dz[k];
                if c == 0.0 {
                    continue;
                }
                for (g, &w) in g_xhat.iter_mut().zip(fwd.weights.row(k)) {
                    *g += c * w;
                }
                for (g, &xh) in g_what[k * d..(k + 1) * d].iter_mut().zip(xhat) {
                    *g += c * xh;
                }
            }
            dfeat.extend(
                normalize_backward(&fwd.x[i * d..(i + 1) * d], fwd.xnorm[i], &g_xhat)
                    .into_iter()
                    .map(|v| v as f32),
            );
        }
        let mut dweight = Vec::with_capacity(n * d);
        for k in 0..n {
            dweight.extend(
                normalize_backward(
                    &fwd.weights.raw[k * d..(k + 1) * d],
                    fwd.weights.norms[k],
                    &g_what[k * d..(k + 1) * d],
                )
                .into_iter()
                .map(|v| v as f32),
            );
        }
        let dfeat = Tensor::from_parts(Shape::new(vec![b, d])?, dfeat);
        let dweight = Tensor::from_parts(self.weight.shape_obj().clone(), dweight);
        dfeat.check_finite("cosine backward")?;
        dweight.check_finite("cosine backward")?;
        Ok((dfeat, dweight))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clf(rows: &[&[f32]]) -> CosineClassifier {
        let d = rows[0].len();
        let mut c = CosineClassifier::new(rows.len(), d, 20.0, 5.0).unwrap();
        c.weight = Tensor::from_vec(&[rows.len(), d], rows.concat()).unwrap();
        c
    }

    #[test]
    fn aligned_feature_scores_the_scale() {
        let c = clf(&[&[0.3, -1.2, 2.0], &[1.0, 0.0, 0.0]]);
        let l = c.logits(&[0.3, -1.2, 2.0], 20.0).unwrap();
        assert!((l[0] - 20.0).abs() < 1e-4);
    }

    #[test]
    fn orthogonal_feature_scores_zero() {
        let c = clf(&[&[0.0, 1.0]]);
        assert!(c.logits(&[3.0, 0.0], 20.0).unwrap()[0].abs() < 1e-6);
    }

    #[test]
    fn analytic_cosine() {
        let c = clf(&[&[1.0, 1.0]]);
        let l = c.logits(&[1.0, 0.0], 1.0).unwrap();
        assert!((l[0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-5);
    }

    #[test]
    fn zero_dimensional_feature_is_an_error() {
        let c = clf(&[&[1.0]]);
        assert!(c.logits(&[], 1.0).is_err());
        assert!(c.logits(&[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn logits_invariant_to_feature_rescaling() {
        let c = clf(&[&[0.2, -0.5, 1.0], &[-1.0, 0.3, 0.1]]);
        let x = [0.7f32, 1.1, -0.4];
        let base = c.logits(&x, 20.0).unwrap();
        for alpha in [0.1f32, 10.0] {
            let scaled: Vec<f32> = x.iter().map(|v| v * alpha).collect();
            for (a, b) in base.iter().zip(c.logits(&scaled, 20.0).unwrap()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_feature_is_finite() {
        let c = clf(&[&[1.0, 2.0]]);
        let l = c.logits(&[0.0, 0.0], 20.0).unwrap();
        assert_eq!(l, vec![0.0]);
        let fwd = c
            .forward_batch(&Tensor::zeros(&[1, 2]).unwrap(), 20.0)
            .unwrap();
        let (dx, dw) = c.backward_batch(&fwd, &[1.0]).unwrap();
        assert!(dx.data().iter().all(|v| v.is_finite()));
        assert!(dw.data().iter().all(|v| v.is_finite()));
    }
}
