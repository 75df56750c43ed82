//! Split manifests (JSON) and PPM image export.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::render::Image;
use super::{generate_sample, AttributeOverride, GroundTruth, SceneSample, SynthError, IMAGE_SIZE, TARGET_CLASSES};
use crate::reasoner::{DatasetStyle, SceneAttributes};

pub const MANIFEST_SCHEMA: &str = "langdet-manifest/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestObject {
    pub category: usize,
    pub category_name: String,
    /// Normalised `[cx, cy, w, h]`.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub id: usize,
    pub seed: u64,
    pub attributes: SceneAttributes,
    pub objects: Vec<ManifestObject>,
    /// Path of the exported PPM relative to the manifest, when written.
    pub image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    pub style: DatasetStyle,
    pub seed: u64,
    pub image_size: usize,
    pub samples: Vec<ManifestSample>,
}

impl Manifest {
    pub fn from_samples(samples: &[SceneSample], style: DatasetStyle, seed: u64) -> Self {
        let samples = samples
            .iter()
            .enumerate()
            .map(|(id, s)| ManifestSample {
                id,
                seed: s.seed,
                attributes: s.ground_truth.attributes,
                objects: s
                    .ground_truth
                    .boxes
                    .iter()
                    .zip(&s.ground_truth.categories)
                    .map(|(b, &c)| ManifestObject { category: c, category_name: TARGET_CLASSES[c].to_string(), bbox: *b })
                    .collect(),
                image: None,
            })
            .collect();
        Self { schema: MANIFEST_SCHEMA.to_string(), style, seed, image_size: IMAGE_SIZE, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample ids per attribute value, keyed `"weather=foggy"`, `"view=side"`, ...
    /// Every value of each attribute gets a key, possibly with an empty list.
    pub fn subsets(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for w in crate::reasoner::Weather::ALL {
            out.entry(format!("weather={}", w.name())).or_default();
        }
        for v in crate::reasoner::View::ALL {
            out.entry(format!("view={}", v.name())).or_default();
        }
        for a in crate::reasoner::Altitude::ALL {
            out.entry(format!("altitude={}", a.name())).or_default();
        }
        for s in &self.samples {
            let a = s.attributes;
            out.get_mut(&format!("weather={}", a.weather.name())).expect("seeded").push(s.id);
            out.get_mut(&format!("view={}", a.view.name())).expect("seeded").push(s.id);
            out.get_mut(&format!("altitude={}", a.altitude.name())).expect("seeded").push(s.id);
        }
        out
    }

    /// Rebuilds a sample from its seed and attributes and checks it against
    /// the recorded annotations.
    pub fn regenerate(&self, index: usize) -> Result<SceneSample, SynthError> {
        let rec = self.samples.get(index).ok_or_else(|| SynthError::Manifest(format!("no sample {index}")))?;
        let sample = generate_sample(rec.seed, self.style, AttributeOverride::all(rec.attributes));
        let gt = &sample.ground_truth;
        let matches = gt.len() == rec.objects.len()
            && gt.boxes.iter().zip(&gt.categories).zip(&rec.objects).all(|((b, &c), o)| *b == o.bbox && c == o.category);
        if !matches {
            return Err(SynthError::Manifest(format!("sample {index} does not regenerate to its recorded annotations")));
        }
        Ok(sample)
    }

    pub fn regenerate_all(&self) -> Result<Vec<SceneSample>, SynthError> {
        (0..self.samples.len()).map(|i| self.regenerate(i)).collect()
    }

    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.samples
            .iter()
            .map(|s| GroundTruth {
                boxes: s.objects.iter().map(|o| o.bbox).collect(),
                categories: s.objects.iter().map(|o| o.category).collect(),
                attributes: s.attributes,
            })
            .collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.display().to_string(), source }
}

/// Binary PPM (P6, 8 bits per channel).
pub fn write_ppm(image: &Image, path: &Path) -> Result<(), SynthError> {
    let s = image.size;
    let mut bytes = format!("P6\n{s} {s}\n255\n").into_bytes();
    for y in 0..s {
        for x in 0..s {
            for c in 0..3 {
                bytes.push((image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))
}

/// Writes `manifest.json` and `images/NNNNN.ppm` under `dir`.
pub fn write_split(dir: &Path, samples: &[SceneSample], manifest: &Manifest) -> Result<Manifest, SynthError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let mut manifest = manifest.clone();
    for (rec, sample) in manifest.samples.iter_mut().zip(samples) {
        let rel = format!("images/{:05}.ppm", rec.id);
        write_ppm(&sample.image, &dir.join(&rel))?;
        rec.image = Some(rel);
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|source| SynthError::Json { path: path.display().to_string(), source })?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest, SynthError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|source| SynthError::Json { path: path.display().to_string(), source })?;
    if m.schema != MANIFEST_SCHEMA {
        return Err(SynthError::Manifest(format!("unsupported schema {:?}", m.schema)));
    }
    Ok(m)
}
