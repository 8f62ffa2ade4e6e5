//! Trains one variant on a freshly generated desk-scale synthetic dataset and
//! reports held-out 5-way accuracy.
//!
//! ```text
//! cargo run --release --example train_desk -- [variant] [epochs] [seed]
//! ```

use std::time::Instant;

use advfeat::data::{generate_synthetic, SynthSpec};
use advfeat::fewshot::{embed_split, evaluate_embedded, EpisodeSpec};
use advfeat::model::{train, Preset, TrainConfig, Variant};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant: Variant = args.first().map_or(Ok(Variant::Full), |s| s.parse())?;
    let epochs: u32 = args.get(1).map_or(Ok(10), |s| s.parse())?;
    let seed: u64 = args.get(2).map_or(Ok(1), |s| s.parse())?;

    let spec = SynthSpec::default();
    let t0 = Instant::now();
    let ds = generate_synthetic(&spec)?;
    println!("generated {:?} classes in {:.1?}", ds.split_sizes(), t0.elapsed());

    let cfg = TrainConfig {
        variant,
        epochs,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let outcome = train(&ds, Preset::Desk, &cfg, seed, |log| {
        println!(
            "epoch {:>2}  l_h {:.4}  l_l {:.4}  l_ent {:.4}  lr {:.2e}  train_acc {:.3}  val {:?}  ({:.1?})",
            log.epoch, log.l_h, log.l_l, log.l_ent, log.lr, log.train_acc, log.val_1shot_acc, t0.elapsed()
        );
    })?;
    println!("best epoch {} (val {:?})", outcome.best_epoch, outcome.best_val);

    let emb = embed_split(&outcome.best.model, &ds.test)?;
    for shot in [1, 5] {
        let spec = EpisodeSpec { way: 5, shot, queries: 15, episodes: 1000 };
        let r = evaluate_embedded(&emb, spec, seed)?;
        println!("test 5-way {shot}-shot: {:.4} ± {:.4}", r.mean, r.ci95);
    }
    Ok(())
}
