//! Dataset export: `out/train` and `out/eval`, each with `manifest.json` and
//! `images/NNNNN.ppm`.

use std::path::Path;

use super::{Result, RunConfig};
use crate::synth::{generate_split, write_split, AttributeDistribution, Manifest};

pub fn make_data(config: &RunConfig, out: &Path) -> Result<(Manifest, Manifest)> {
    let dist = AttributeDistribution::uniform(config.style);
    let mut written = Vec::new();
    for (name, size, seed) in [
        ("train", config.data.train_size, config.data.train_seed),
        ("eval", config.data.eval_size, config.data.eval_seed),
    ] {
        let (samples, manifest) = generate_split(size, seed, config.style, &dist)?;
        written.push(write_split(&out.join(name), &samples, &manifest)?);
        log::info!("wrote {size} {name} samples to {}", out.join(name).display());
    }
    let eval = written.pop().expect("two splits");
    let train = written.pop().expect("two splits");
    Ok((train, eval))
}
