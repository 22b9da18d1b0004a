//! Writes a randomly initialized VGG-19 weight file and an untrained
//! checkpoint, enough to run every subcommand without downloads.
//!
//! `cargo run --example synthetic_weights -- OUT_DIR [SEED]`

use std::collections::BTreeMap;
use std::path::PathBuf;

use palette_styler::{EncoderParams, StyleModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> palette_styler::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(dir) = args.next().map(PathBuf::from) else {
        eprintln!("usage: synthetic_weights OUT_DIR [SEED]");
        std::process::exit(1);
    };
    let seed: u64 = args
        .next()
        .map_or(0, |s| s.parse().expect("seed must be an integer"));
    std::fs::create_dir_all(&dir).expect("creating output directory");

    let encoder = EncoderParams::<f32>::synthetic(seed);
    encoder.to_store().save(dir.join("vgg19.safetensors"))?;
    let model = StyleModel::init(encoder, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut meta = BTreeMap::new();
    meta.insert("iteration".to_string(), "0".to_string());
    model
        .checkpoint(meta)
        .save(dir.join("untrained.safetensors"))?;
    println!("wrote {}", dir.display());
    Ok(())
}
