//! Compares the analytic mask gradient `ΔM = ∂H/∂M` against central finite
//! differences of the prediction entropy, on random feature maps.
//!
//! ```text
//! cargo run --release --example gradient_check -- [trials]
//! ```

use advfeat::adversarial::{masked_pool, mask_gradient_detailed, AdversarialConfig, Mask, MaskKind};
use advfeat::nn::cosine::CosineClassifier;
use advfeat::nn::loss::{entropy, softmax};
use advfeat::rng::SeedStreams;
use advfeat::Tensor;
use rand_distr::{Distribution, StandardNormal};

const C: usize = 16;
const H: usize = 4;
const W: usize = 4;

fn entropy_at(x: &Tensor, mask: &[f32], clf: &CosineClassifier) -> anyhow::Result<f64> {
    let m = Mask::from_values(Tensor::from_vec(&[H, W], mask.to_vec())?, MaskKind::Uniform)?;
    let pooled = masked_pool(x, &m)?;
    Ok(entropy(&softmax(&clf.logits(pooled.data(), clf.scale_adv)?)?))
}

fn main() -> anyhow::Result<()> {
    let trials: u64 = std::env::args().nth(1).map_or(Ok(10), |s| s.parse())?;
    let cfg = AdversarialConfig::from_scale(5.0);
    let mut worst = 0f64;
    for t in 0..trials {
        let streams = SeedStreams::new(t);
        let mut clf = CosineClassifier::new(8, C, 20.0, cfg.scale_adv)?;
        clf.init(&mut streams.stream("classifier"));
        let mut rng = streams.stream("features");
        let data = (0..C * H * W).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Tensor::from_vec(&[C, H, W], data)?;

        let analytic = mask_gradient_detailed(&x, &clf, &cfg)?.mask;
        let m0 = vec![1.0 / (H * W) as f32; H * W];
        // f32 forward pass: the step trades truncation against rounding.
        let h = 1e-3f32;
        let mut num = Vec::with_capacity(H * W);
        for k in 0..H * W {
            let (mut plus, mut minus) = (m0.clone(), m0.clone());
            plus[k] += h;
            minus[k] -= h;
            num.push((entropy_at(&x, &plus, &clf)? - entropy_at(&x, &minus, &clf)?) / (2.0 * h as f64));
        }
        let diff: f64 = analytic.values().data().iter().zip(&num).map(|(&a, n)| (a as f64 - n).powi(2)).sum();
        let norm: f64 = num.iter().map(|n| n * n).sum();
        let rel = (diff / norm.max(1e-30)).sqrt();
        worst = worst.max(rel);
        println!("trial {t}: relative error {rel:.2e}");
    }
    println!("worst {worst:.2e}");
    Ok(())
}
