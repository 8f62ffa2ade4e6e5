//! Layer backward passes and the mask gradient against central differences
//! of the `f64` reference implementations.

use advfeat::adversarial::{adversarial_mask, mask_gradient_detailed, second_order_terms, AdversarialConfig};
use advfeat::nn::cosine::CosineClassifier;
use advfeat::nn::loss::{cross_entropy_logit_grad, entropy_logit_grad, softmax};
use advfeat::nn::{leaky_relu, leaky_relu_backward, pool::maxpool2x2, pool::maxpool2x2_backward};
use advfeat::nn::{BatchNorm2d, Conv2d, Mode, LEAKY_SLOPE};
use advfeat::rng::{SeedStreams, StreamRng};
use advfeat::Tensor;
use rand::Rng;

use crate::reference as r;

pub const INSTANCES: usize = 50;
pub const TOL: f64 = 1e-4;
pub const TOL_BN: f64 = 1e-3;

fn up(t: &[f32]) -> Vec<f64> {
    t.iter().map(|&v| v as f64).collect()
}

fn uniform(rng: &mut StreamRng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform in `±[0.05, 1]`, away from the leaky-ReLU kink.
fn away_from_zero(rng: &mut StreamRng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m: f32 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn rng_for(name: &str, i: usize) -> StreamRng {
    SeedStreams::new(20_240_601).indexed(name, i as u64)
}

/// Worst relative error over all instances of one oracle.
pub struct OracleResult {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
    pub instances: usize,
}

impl OracleResult {
    pub fn pass(&self) -> bool {
        self.worst < self.tol
    }
}

fn run(name: &'static str, tol: f64, mut one: impl FnMut(usize) -> f64) -> OracleResult {
    let worst = (0..INSTANCES).map(&mut one).fold(0.0, f64::max);
    OracleResult {
        name,
        worst,
        tol,
        instances: INSTANCES,
    }
}

pub fn conv() -> OracleResult {
    run("conv2d", TOL, |i| {
        let mut g = rng_for("conv", i);
        let (b, ci, co) = (g.random_range(1..=2), g.random_range(1..=3), g.random_range(1..=3));
        let k = g.random_range(1..=3);
        let pad = g.random_range(0..=k / 2);
        let (h, w) = (g.random_range(k.max(2)..=5), g.random_range(k.max(2)..=5));
        let mut layer = Conv2d::new(ci, co, k, pad).unwrap();
        layer.weight = Tensor::from_vec(&[co, ci, k, k], uniform(&mut g, co * ci * k * k, -1.0, 1.0)).unwrap();
        layer.bias = Tensor::from_vec(&[co], uniform(&mut g, co, -1.0, 1.0)).unwrap();
        let x = Tensor::from_vec(&[b, ci, h, w], uniform(&mut g, b * ci * h * w, -1.0, 1.0)).unwrap();
        let y = layer.forward(&x).unwrap();
        let upstream = uniform(&mut g, y.numel(), -1.0, 1.0);
        let grads = layer.backward(&Tensor::from_vec(y.shape(), upstream.clone()).unwrap(), &x).unwrap();

        let (xs, ws, bs, us) = (up(x.data()), up(layer.weight.data()), up(layer.bias.data()), up(&upstream));
        let dims = (b, ci, h, w);
        let fx = r::numeric_grad(&xs, |v| r::dot(&us, &r::conv(v, dims, &ws, &bs, co, k, pad)));
        let fw = r::numeric_grad(&ws, |v| r::dot(&us, &r::conv(&xs, dims, v, &bs, co, k, pad)));
        let fb = r::numeric_grad(&bs, |v| r::dot(&us, &r::conv(&xs, dims, &ws, v, co, k, pad)));
        r::rel_error(&up(grads.input.data()), &fx)
            .max(r::rel_error(&up(grads.weight.data()), &fw))
            .max(r::rel_error(&up(grads.bias.data()), &fb))
    })
}

pub fn batchnorm_train() -> OracleResult {
    run("batchnorm (train)", TOL_BN, |i| {
        let mut g = rng_for("bn-train", i);
        let (b, c, h, w) = (g.random_range(2..=3), g.random_range(1..=3), g.random_range(1..=3), g.random_range(2..=3));
        let mut bn = BatchNorm2d::new(c).unwrap();
        bn.gamma = Tensor::from_vec(&[c], uniform(&mut g, c, 0.5, 1.5)).unwrap();
        bn.beta = Tensor::from_vec(&[c], uniform(&mut g, c, -0.5, 0.5)).unwrap();
        let x = Tensor::from_vec(&[b, c, h, w], uniform(&mut g, b * c * h * w, -2.0, 2.0)).unwrap();
        let (y, cache) = bn.forward(&x, Mode::Train).unwrap();
        let upstream = uniform(&mut g, y.numel(), -1.0, 1.0);
        let grads = bn.backward(&Tensor::from_vec(y.shape(), upstream.clone()).unwrap(), &cache).unwrap();

        let (xs, gs, bs, us) = (up(x.data()), up(bn.gamma.data()), up(bn.beta.data()), up(&upstream));
        let eps = bn.epsilon as f64;
        let dims = (b, c, h, w);
        let fx = r::numeric_grad(&xs, |v| r::dot(&us, &r::bn_train(v, dims, &gs, &bs, eps)));
        let fg = r::numeric_grad(&gs, |v| r::dot(&us, &r::bn_train(&xs, dims, v, &bs, eps)));
        let fb = r::numeric_grad(&bs, |v| r::dot(&us, &r::bn_train(&xs, dims, &gs, v, eps)));
        r::rel_error(&up(grads.input.data()), &fx)
            .max(r::rel_error(&up(grads.gamma.data()), &fg))
            .max(r::rel_error(&up(grads.beta.data()), &fb))
    })
}

pub fn batchnorm_eval() -> OracleResult {
    run("batchnorm (eval)", TOL_BN, |i| {
        let mut g = rng_for("bn-eval", i);
        let (b, c, h, w) = (g.random_range(1..=3), g.random_range(1..=3), g.random_range(1..=3), g.random_range(1..=3));
        let mut bn = BatchNorm2d::new(c).unwrap();
        bn.gamma = Tensor::from_vec(&[c], uniform(&mut g, c, 0.5, 1.5)).unwrap();
        bn.beta = Tensor::from_vec(&[c], uniform(&mut g, c, -0.5, 0.5)).unwrap();
        bn.running_mean = Tensor::from_vec(&[c], uniform(&mut g, c, -0.5, 0.5)).unwrap();
        bn.running_var = Tensor::from_vec(&[c], uniform(&mut g, c, 0.5, 2.0)).unwrap();
        let x = Tensor::from_vec(&[b, c, h, w], uniform(&mut g, b * c * h * w, -2.0, 2.0)).unwrap();
        let (y, cache) = bn.forward(&x, Mode::Eval).unwrap();
        let upstream = uniform(&mut g, y.numel(), -1.0, 1.0);
        let grads = bn.backward(&Tensor::from_vec(y.shape(), upstream.clone()).unwrap(), &cache).unwrap();

        let (xs, gs, bs, us) = (up(x.data()), up(bn.gamma.data()), up(bn.beta.data()), up(&upstream));
        let (rm, rv) = (up(bn.running_mean.data()), up(bn.running_var.data()));
        let eps = bn.epsilon as f64;
        let dims = (b, c, h, w);
        let fx = r::numeric_grad(&xs, |v| r::dot(&us, &r::bn_eval(v, dims, &gs, &bs, &rm, &rv, eps)));
        let fg = r::numeric_grad(&gs, |v| r::dot(&us, &r::bn_eval(&xs, dims, v, &bs, &rm, &rv, eps)));
        let fb = r::numeric_grad(&bs, |v| r::dot(&us, &r::bn_eval(&xs, dims, &gs, v, &rm, &rv, eps)));
        r::rel_error(&up(grads.input.data()), &fx)
            .max(r::rel_error(&up(grads.gamma.data()), &fg))
            .max(r::rel_error(&up(grads.beta.data()), &fb))
    })
}

pub fn leaky() -> OracleResult {
    run("leaky relu", TOL, |i| {
        let mut g = rng_for("leaky", i);
        let n = g.random_range(4..=40);
        let x = Tensor::from_vec(&[n], away_from_zero(&mut g, n)).unwrap();
        let upstream = uniform(&mut g, n, -1.0, 1.0);
        let dx = leaky_relu_backward(&Tensor::from_vec(&[n], upstream.clone()).unwrap(), &x).unwrap();
        assert_eq!(leaky_relu(&x).shape(), x.shape());
        let us = up(&upstream);
        let fx = r::numeric_grad(&up(x.data()), |v| r::dot(&us, &r::leaky(v, LEAKY_SLOPE as f64)));
        r::rel_error(&up(dx.data()), &fx)
    })
}

pub fn maxpool() -> OracleResult {
    run("maxpool 2x2", TOL, |i| {
        let mut g = rng_for("pool", i);
        let (b, c, h, w) = (g.random_range(1..=2), g.random_range(1..=3), 2 * g.random_range(1..=3), 2 * g.random_range(1..=3));
        let x = Tensor::from_vec(&[b, c, h, w], uniform(&mut g, b * c * h * w, -1.0, 1.0)).unwrap();
        let pooled = maxpool2x2(&x).unwrap();
        let upstream = uniform(&mut g, pooled.output.numel(), -1.0, 1.0);
        let dx = maxpool2x2_backward(&Tensor::from_vec(pooled.output.shape(), upstream.clone()).unwrap(), &pooled).unwrap();
        let us = up(&upstream);
        let fx = r::numeric_grad(&up(x.data()), |v| r::dot(&us, &r::maxpool(v, (b, c, h, w))));
        r::rel_error(&up(dx.data()), &fx)
    })
}

fn classifier(g: &mut StreamRng, n: usize, d: usize) -> CosineClassifier {
    let mut clf = CosineClassifier::new(n, d, 20.0, 5.0).unwrap();
    clf.weight = Tensor::from_vec(&[n, d], uniform(g, n * d, -1.0, 1.0)).unwrap();
    clf
}

pub fn cosine() -> OracleResult {
    run("cosine classifier", TOL, |i| {
        let mut g = rng_for("cosine", i);
        let (b, n, d) = (g.random_range(1..=3), g.random_range(2..=5), g.random_range(2..=8));
        let clf = classifier(&mut g, n, d);
        let scale: f32 = g.random_range(1.0..20.0);
        let x = Tensor::from_vec(&[b, d], uniform(&mut g, b * d, -1.0, 1.0)).unwrap();
        let fwd = clf.forward_batch(&x, scale).unwrap();
        let upstream: Vec<f64> = uniform(&mut g, b * n, -1.0, 1.0).into_iter().map(f64::from).collect();
        let (dx, dw) = clf.backward_batch(&fwd, &upstream).unwrap();
        let (xs, ws, s) = (up(x.data()), up(clf.weight.data()), scale as f64);
        let loss = |xv: &[f64], wv: &[f64]| -> f64 {
            (0..b)
                .map(|k| r::dot(&upstream[k * n..(k + 1) * n], &r::cosine_logits(&xv[k * d..(k + 1) * d], wv, n, s)))
                .sum()
        };
        let fx = r::numeric_grad(&xs, |v| loss(v, &ws));
        let fw = r::numeric_grad(&ws, |v| loss(&xs, v));
        r::rel_error(&up(dx.data()), &fx).max(r::rel_error(&up(dw.data()), &fw))
    })
}

pub fn softmax_losses() -> OracleResult {
    run("cross-entropy and entropy logits", TOL, |i| {
        let mut g = rng_for("losses", i);
        let n = g.random_range(2..=8);
        let z = uniform(&mut g, n, -5.0, 5.0);
        let y = g.random_range(0..n);
        let p = softmax(&z).unwrap();
        let zs = up(&z);
        let fce = r::numeric_grad(&zs, |v| r::cross_entropy(v, y));
        let fent = r::numeric_grad(&zs, r::entropy);
        r::rel_error(&cross_entropy_logit_grad(&p, y), &fce).max(r::rel_error(&entropy_logit_grad(&p), &fent))
    })
}

pub fn mask_gradient() -> OracleResult {
    run("entropy mask gradient", TOL, |i| {
        let mut g = rng_for("mask", i);
        let (n, c, h, w) = (g.random_range(2..=5), g.random_range(2..=8), g.random_range(1..=4), g.random_range(2..=4));
        let mut clf = classifier(&mut g, n, c);
        clf.scale_adv = g.random_range(1.0..10.0);
        let cfg = AdversarialConfig::from_scale(clf.scale_adv);
        let x = Tensor::from_vec(&[c, h, w], uniform(&mut g, c * h * w, -1.0, 1.0)).unwrap();
        let mg = mask_gradient_detailed(&x, &clf, &cfg).unwrap();
        let (xs, ws, s) = (up(x.data()), up(clf.weight.data()), clf.scale_adv as f64);
        let m0 = vec![1.0 / (h * w) as f64; h * w];
        let fm = r::numeric_grad(&m0, |m| r::entropy(&r::cosine_logits(&r::pool(&xs, m), &ws, n, s)));
        r::rel_error(&up(mg.mask.values().data()), &fm)
    })
}

pub fn mask_second_order() -> OracleResult {
    run("adversarial feature through the mask", TOL, |i| {
        let mut g = rng_for("second-order", i);
        let (n, c, h, w) = (g.random_range(2..=5), g.random_range(2..=6), g.random_range(1..=3), g.random_range(2..=3));
        let hw = h * w;
        let mut clf = classifier(&mut g, n, c);
        clf.scale_adv = g.random_range(1.0..10.0);
        let gamma: f32 = g.random_range(0.05..1.0);
        let cfg = AdversarialConfig::from_scale(clf.scale_adv).with_gamma(gamma);
        let x = Tensor::from_vec(&[c, h, w], uniform(&mut g, c * hw, -1.0, 1.0)).unwrap();
        let upstream: Vec<f64> = uniform(&mut g, c, -1.0, 1.0).into_iter().map(f64::from).collect();

        let mg = mask_gradient_detailed(&x, &clf, &cfg).unwrap();
        let ma = adversarial_mask(&mg.mask, &cfg).unwrap();
        let (rem_x, rem_w) =
            second_order_terms(x.data(), (c, h, w), &clf, &cfg, mg.pooled.data(), &mg.feature_grad, &upstream);
        let dx: Vec<f64> = (0..c * hw)
            .map(|k| upstream[k / hw] * ma.values().data()[k % hw] as f64 + rem_x[k])
            .collect();

        let (xs, ws, s, gm) = (up(x.data()), up(clf.weight.data()), clf.scale_adv as f64, gamma as f64);
        let fx = r::numeric_grad(&xs, |v| r::dot(&upstream, &r::adversarial_feature(v, c, hw, &ws, n, s, gm)));
        let fw = r::numeric_grad(&ws, |v| r::dot(&upstream, &r::adversarial_feature(&xs, c, hw, v, n, s, gm)));
        r::rel_error(&dx, &fx).max(r::rel_error(&rem_w, &fw))
    })
}

pub fn all() -> Vec<OracleResult> {
    vec![
        conv(),
        batchnorm_train(),
        batchnorm_eval(),
        leaky(),
        maxpool(),
        cosine(),
        softmax_losses(),
        mask_gradient(),
        mask_second_order(),
    ]
}
