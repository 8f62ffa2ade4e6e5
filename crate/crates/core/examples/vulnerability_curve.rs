//! Trains a model with and without adversarial features and measures how
//! training-class accuracy degrades as the mask perturbation grows.
//!
//! ```text
//! cargo run --release --example vulnerability_curve -- [epochs] [cache_dir]
//! ```

use advfeat::analysis::{train_run, vulnerability, RunCache, DEFAULT_PERTURBATIONS};
use advfeat::data::{generate_synthetic, SynthSpec};
use advfeat::model::{Preset, TrainConfig, Variant};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: u32 = args.first().map_or(Ok(10), |s| s.parse())?;
    let cache = args.get(1).map(RunCache::new);

    let ds = generate_synthetic(&SynthSpec::default())?;
    let mut runs = Vec::new();
    for variant in [Variant::C5Cls, Variant::Full] {
        let cfg = TrainConfig { variant, epochs, ..TrainConfig::default() };
        let run = train_run(&ds, Preset::Desk, &cfg, 1, cache.as_ref(), |log| {
            eprintln!("{variant} epoch {:>2} train_acc {:.3}", log.epoch, log.train_acc)
        })?;
        runs.push((variant.to_string(), run));
    }

    let models: Vec<(String, _)> = runs.iter().map(|(l, r)| (l.clone(), &r.state.model)).collect();
    let curve = vulnerability(&models, &ds.train, &DEFAULT_PERTURBATIONS)?;
    print!("{}", curve.csv());
    for (label, clean) in &curve.clean {
        let auc = curve.auc(label).unwrap_or(f64::NAN);
        println!("# {label}: clean {clean:.4}, area under curve {auc:.4}");
    }
    Ok(())
}
