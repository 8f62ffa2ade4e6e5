//! Writes `ΔM` heatmaps and adversarial masks for one test image per class.
//! Positive cells mark where the features push the prediction toward
//! uncertainty; they render brighter than the mid-gray zero level.
//!
//! ```text
//! cargo run --release --example attention_heatmaps -- [checkpoint.afck] [out_dir] [classes]
//! ```
//!
//! Without a checkpoint the full model is trained for a few epochs first.

use std::path::PathBuf;

use advfeat::adversarial::AdversarialConfig;
use advfeat::analysis::export_attention;
use advfeat::data::{generate_synthetic, SynthSpec};
use advfeat::model::{load_checkpoint, train, Preset, TrainConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.get(1).map_or("attention", String::as_str));
    let classes: usize = args.get(2).map_or(Ok(4), |s| s.parse())?;

    let ds = generate_synthetic(&SynthSpec::default())?;
    let state = match args.first().filter(|s| !s.is_empty() && *s != "-") {
        Some(path) => load_checkpoint(path.as_ref())?,
        None => {
            let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
            train(&ds, Preset::Desk, &cfg, 1, |log| eprintln!("epoch {} l_h {:.4}", log.epoch, log.l_h))?.best
        }
    };

    let images: Vec<(String, _)> = ds
        .test
        .iter()
        .take(classes)
        .map(|c| (c.name.clone(), c.images[0].clone()))
        .collect();
    let cfg = AdversarialConfig::from_scale(state.model.classifier.scale_adv);
    let files = export_attention(&state.model, &images, &cfg, &out, 16)?;
    for f in &files {
        println!("{} (peak |ΔM| {:.3e})", f.delta_pgm.display(), f.map.scale);
    }
    Ok(())
}
