//! Trains the full model once per mask step size γ and reports held-out
//! accuracy for each.
//!
//! ```text
//! cargo run --release --example gamma_sweep -- [epochs] [gammas] [cache_dir]
//! ```
//!
//! `gammas` is comma-separated and defaults to `0.1,0.2,0.4,0.8`.

use advfeat::analysis::{gamma_sweep, EvalProtocol, RunCache, DEFAULT_SWEEP_GAMMAS};
use advfeat::data::{generate_synthetic, SynthSpec};
use advfeat::model::{Preset, TrainConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: u32 = args.first().map_or(Ok(10), |s| s.parse())?;
    let gammas: Vec<f32> = match args.get(1) {
        Some(list) => list.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => DEFAULT_SWEEP_GAMMAS.to_vec(),
    };
    let cache = args.get(2).map(RunCache::new);

    let ds = generate_synthetic(&SynthSpec::default())?;
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let result = gamma_sweep(&ds, Preset::Desk, &gammas, &cfg, 1, &EvalProtocol::default(), cache.as_ref(), |g, log| {
        eprintln!("γ {g} epoch {:>2} l_h {:.4} l_l {:.4} val {:?}", log.epoch, log.l_h, log.l_l, log.val_1shot_acc)
    })?;
    print!("{}", result.csv());
    for shot in [1, 5] {
        if let Some(spread) = result.spread(shot) {
            println!("# {shot}-shot spread across γ: {spread:.4}");
        }
    }
    for (gamma, e) in &result.failures {
        println!("# γ {gamma} failed: {e}");
    }
    Ok(())
}
