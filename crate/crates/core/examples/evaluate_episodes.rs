//! Evaluates a checkpoint on N-way K-shot episodes drawn from the test split
//! of the synthetic dataset. Without a checkpoint an untrained model is used,
//! which shows how much the random features already separate the classes.
//!
//! ```text
//! cargo run --release --example evaluate_episodes -- [checkpoint.afck] [way] [episodes]
//! ```

use advfeat::data::{generate_synthetic, SynthSpec};
use advfeat::fewshot::{embed_split, evaluate_embedded, EpisodeSpec, DEFAULT_QUERIES};
use advfeat::model::{load_checkpoint, Model, Preset, Variant};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let way: usize = args.get(1).map_or(Ok(5), |s| s.parse())?;
    let episodes: usize = args.get(2).map_or(Ok(1000), |s| s.parse())?;

    let ds = generate_synthetic(&SynthSpec::default())?;
    let model = match args.first().filter(|s| !s.is_empty() && *s != "-") {
        Some(path) => load_checkpoint(path.as_ref())?.model,
        None => Model::new(Preset::Desk, Variant::Full, ds.train.len(), 20.0, 5.0, 1)?,
    };

    // Embedding the split once lets every shot count reuse the features.
    let emb = embed_split(&model, &ds.test)?;
    for shot in [1, 5] {
        let spec = EpisodeSpec { way, shot, queries: DEFAULT_QUERIES, episodes };
        let r = evaluate_embedded(&emb, spec, 0)?;
        println!("{way}-way {shot}-shot: {:.4} ± {:.4} over {episodes} episodes", r.mean, r.ci95);
    }
    Ok(())
}
