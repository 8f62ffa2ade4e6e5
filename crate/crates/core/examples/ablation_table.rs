//! Trains every variant under several seeds on the desk synthetic dataset and
//! prints the variant × shot accuracy table plus the vulnerability AUCs of
//! the selected models.
//!
//! ```text
//! cargo run --release --example ablation_table -- [epochs] [seeds] [cache_dir]
//! ```
//!
//! `seeds` is comma-separated (default `1,2,3`). Finished runs are stored in
//! `cache_dir` and reused by later invocations with identical settings.

use std::time::Instant;

use advfeat::analysis::{ablation_report, vulnerability, EvalProtocol, RunCache, DEFAULT_PERTURBATIONS};
use advfeat::data::{generate_synthetic, SynthSpec};
use advfeat::model::{Preset, TrainConfig, Variant};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: u32 = args.first().map_or(Ok(30), |s| s.parse())?;
    let seeds: Vec<u64> = args
        .get(1)
        .map_or("1,2,3", String::as_str)
        .split(',')
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    let cache = args.get(2).map(RunCache::new);

    let ds = generate_synthetic(&SynthSpec::default())?;
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let report = ablation_report(
        &ds,
        Preset::Desk,
        &Variant::ALL,
        &seeds,
        &cfg,
        &EvalProtocol::default(),
        cache.as_ref(),
        |v, seed, log| {
            eprintln!(
                "[{:>7.1?}] {v} seed {seed} epoch {:>2} l_h {:.4} l_l {:.4} train_acc {:.3} val {:?}",
                t0.elapsed(),
                log.epoch,
                log.l_h,
                log.l_l,
                log.train_acc,
                log.val_1shot_acc
            )
        },
    )?;
    print!("{}", report.csv());

    let models: Vec<(String, _)> = report
        .runs
        .iter()
        .map(|((v, seed), run)| (format!("{v}/{seed}"), &run.state.model))
        .collect();
    let curve = vulnerability(&models, &ds.train, &DEFAULT_PERTURBATIONS)?;
    println!("\nvariant/seed,auc,clean_train_acc");
    for (label, clean) in &curve.clean {
        println!("{label},{:.6},{clean:.6}", curve.auc(label).unwrap_or(f64::NAN));
    }
    Ok(())
}
