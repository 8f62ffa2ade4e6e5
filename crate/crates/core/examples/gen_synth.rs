//! Generates the synthetic few-shot dataset, writes it as PPM files and
//! reloads it to confirm the round trip.
//!
//! ```text
//! cargo run --release --example gen_synth -- [out_dir] [seed]
//! ```

use std::path::PathBuf;

use advfeat::data::{generate_synthetic, load_directory, SynthSpec};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("synth-data", String::as_str));
    let seed: u64 = args.get(1).map_or(Ok(SynthSpec::default().seed), |s| s.parse())?;

    let spec = SynthSpec { seed, ..SynthSpec::default() };
    let ds = generate_synthetic(&spec)?;
    ds.write(&out)?;
    let (train, val, test) = ds.split_sizes();
    println!("wrote {train}/{val}/{test} train/val/test classes to {}", out.display());
    for class in ds.train.iter().take(3) {
        println!("  {} ({} images)", class.name, class.images.len());
    }

    let back = load_directory(&out, spec.image_size)?;
    anyhow::ensure!(back.digest() == ds.digest(), "reloaded dataset differs");
    println!("digest {}", ds.digest());
    Ok(())
}
