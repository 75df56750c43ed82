//! Procedural aerial-style scenes.
//!
//! Three annotated target classes with distinct shape and hue (car: red
//! ellipse, truck: green rectangle, bus: blue diamond) sit on a textured
//! ground together with unannotated clutter drawn from the background
//! categories. Scene attributes drive the transform chain:
//!
//! | attribute | effect |
//! |-----------|--------|
//! | view      | aspect ratio of each object (side: elongated, front: compact, bird: nominal) |
//! | altitude  | object scale range and blur (low: none, medium: 2×2 block average, high: block average + 3×3 box blur) |
//! | weather   | night: brightness ×0.35; foggy: low-frequency haze with reduced contrast |

mod manifest;
pub mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use manifest::{load_manifest, write_split, Manifest, ManifestObject, ManifestSample, MANIFEST_SCHEMA};
use render::{Image, Mask, Shape};

use crate::reasoner::{Altitude, DatasetStyle, SceneAttributes, View, Weather};

pub const IMAGE_SIZE: usize = 64;
pub const TARGET_CLASSES: [&str; 3] = ["car", "truck", "bus"];
pub const NIGHT_BRIGHTNESS: f64 = 0.35;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("split size must be >= 1")]
    EmptySplit,
    #[error("invalid attribute distribution: {0}")]
    Distribution(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

/// Annotations for one image. Boxes are normalised `(cx, cy, w, h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<[f64; 4]>,
    pub categories: Vec<usize>,
    pub attributes: SceneAttributes,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Image,
    pub ground_truth: GroundTruth,
    pub seed: u64,
    /// Pixel masks of the annotated objects, in annotation order.
    pub masks: Vec<Mask>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeOverride {
    pub weather: Option<Weather>,
    pub view: Option<View>,
    pub altitude: Option<Altitude>,
}

impl AttributeOverride {
    pub fn all(a: SceneAttributes) -> Self {
        Self { weather: Some(a.weather), view: Some(a.view), altitude: Some(a.altitude) }
    }
}

/// Relative weights per attribute value, in enum order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeDistribution {
    pub weather: [f64; 3],
    pub view: [f64; 3],
    pub altitude: [f64; 3],
}

impl AttributeDistribution {
    pub fn uniform(style: DatasetStyle) -> Self {
        let weather = match style {
            DatasetStyle::UavdtLike => [1.0, 1.0, 1.0],
            DatasetStyle::VisdroneLike => [1.0, 1.0, 0.0],
        };
        Self { weather, view: [1.0; 3], altitude: [1.0; 3] }
    }

    fn validate(&self, style: DatasetStyle) -> Result<(), SynthError> {
        for (name, w) in [("weather", self.weather), ("view", self.view), ("altitude", self.altitude)] {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(SynthError::Distribution(format!("{name} weights must be >= 0 with a positive sum")));
            }
        }
        if style == DatasetStyle::VisdroneLike && self.weather[Weather::Foggy as usize] > 0.0 {
            return Err(SynthError::Distribution("visdrone-like splits have no foggy scenes".into()));
        }
        Ok(())
    }
}

fn pick<R: Rng>(rng: &mut R, weights: &[f64; 3]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn class_style(class: usize) -> (Shape, f64, [f64; 3]) {
    match class {
        0 => (Shape::Ellipse, 1.0, [0.85, 0.2, 0.15]),
        1 => (Shape::Rectangle, 1.7, [0.2, 0.75, 0.25]),
        _ => (Shape::Diamond, 2.2, [0.2, 0.35, 0.9]),
    }
}

fn jitter<R: Rng>(rng: &mut R, rgb: [f64; 3], amount: f64) -> [f64; 3] {
    rgb.map(|v| (v + rng.random_range(-amount..amount)).clamp(0.0, 1.0))
}

fn scale_range(altitude: Altitude) -> (f64, f64) {
    match altitude {
        Altitude::Low => (1.3, 2.0),
        Altitude::Medium => (0.8, 1.4),
        Altitude::High => (0.3, 0.9),
    }
}

fn aspect_factor<R: Rng>(rng: &mut R, view: View) -> f64 {
    match view {
        View::Side => rng.random_range(1.3..1.7),
        View::Front => rng.random_range(0.6..0.8),
        View::Bird => rng.random_range(0.9..1.1),
    }
}

fn overlaps(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> bool {
    a.0 < b.2 + 1 && b.0 < a.2 + 1 && a.1 < b.3 + 1 && b.1 < a.3 + 1
}

/// Renders one scene. The output is a pure function of `(seed, style, override)`;
/// attributes are always drawn from the seed stream before overrides are applied.
pub fn generate_sample(seed: u64, style: DatasetStyle, over: AttributeOverride) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = AttributeDistribution::uniform(style);
    let drawn = SceneAttributes {
        weather: Weather::ALL[pick(&mut rng, &dist.weather)],
        view: View::ALL[pick(&mut rng, &dist.view)],
        altitude: Altitude::ALL[pick(&mut rng, &dist.altitude)],
    };
    let attributes = SceneAttributes {
        weather: over.weather.unwrap_or(drawn.weather),
        view: over.view.unwrap_or(drawn.view),
        altitude: over.altitude.unwrap_or(drawn.altitude),
    };
    let size = IMAGE_SIZE;
    let mut image = background(&mut rng, size);
    clutter(&mut rng, &mut image);

    let count = rng.random_range(1..=8usize);
    let (lo, hi) = scale_range(attributes.altitude);
    let mut boxes = Vec::new();
    let mut categories = Vec::new();
    let mut masks = Vec::new();
    let mut taken: Vec<(usize, usize, usize, usize)> = Vec::new();
    for _ in 0..count {
        let class = rng.random_range(0..TARGET_CLASSES.len());
        let (shape, elongation, rgb) = class_style(class);
        let colour = jitter(&mut rng, rgb, 0.1);
        let mut placed = None;
        for _attempt in 0..20 {
            let scale = rng.random_range(lo..hi);
            let aspect = elongation * aspect_factor(&mut rng, attributes.view);
            let short = 2.6 * scale;
            let (mut hx, mut hy) = (short * aspect.sqrt(), short / aspect.sqrt());
            if rng.random_bool(0.5) {
                std::mem::swap(&mut hx, &mut hy);
            }
            let cx = rng.random_range(hx..size as f64 - hx);
            let cy = rng.random_range(hy..size as f64 - hy);
            let mask = render::rasterize(shape, size, cx, cy, hx, hy);
            let Some(b) = mask.bounds() else { continue };
            if mask.pixels.len() < 3 || taken.iter().any(|t| overlaps(*t, b)) {
                continue;
            }
            placed = Some((mask, b));
            break;
        }
        let Some((mask, b)) = placed else { continue };
        image.paint(&mask, colour);
        taken.push(b);
        let s = size as f64;
        let (x0, y0, x1, y1) = (b.0 as f64, b.1 as f64, b.2 as f64, b.3 as f64);
        boxes.push([(x0 + x1) / 2.0 / s, (y0 + y1) / 2.0 / s, (x1 - x0) / s, (y1 - y0) / s]);
        categories.push(class);
        masks.push(mask);
    }
    render::add_noise(&mut image, &mut rng, 0.02);
    image.clamp();
    apply_scene_transforms(&mut image, &mut rng, attributes);
    image.clamp();
    SceneSample { image, ground_truth: GroundTruth { boxes, categories, attributes }, seed, masks }
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let base = jitter(rng, [0.55, 0.5, 0.42], 0.05);
    let field = render::low_frequency_field(rng, size, 4);
    let mut img = Image::filled(size, base);
    let n = size * size;
    for c in 0..3 {
        for (k, f) in field.iter().enumerate() {
            img.data[c * n + k] += 0.15 * (f - 0.5);
        }
    }
    img
}

/// Unannotated background objects: buildings, trees, traffic signs, ground patches.
fn clutter(rng: &mut ChaCha8Rng, img: &mut Image) {
    let size = img.size as f64;
    for _ in 0..rng.random_range(0..=4usize) {
        let kind = rng.random_range(0..4);
        let (shape, half, rgb) = match kind {
            0 => (Shape::Rectangle, rng.random_range(4.0..8.0), [0.45, 0.45, 0.48]),
            1 => (Shape::Ellipse, rng.random_range(3.0..6.0), [0.15, 0.35, 0.12]),
            2 => (Shape::Diamond, rng.random_range(1.5..2.5), [0.9, 0.85, 0.2]),
            _ => (Shape::Ellipse, rng.random_range(6.0..10.0), [0.62, 0.56, 0.45]),
        };
        let colour = jitter(rng, rgb, 0.05);
        let cx = rng.random_range(0.0..size);
        let cy = rng.random_range(0.0..size);
        let mask = render::rasterize(shape, img.size, cx, cy, half, half * rng.random_range(0.7..1.3));
        img.paint(&mask, colour);
    }
}

fn apply_scene_transforms(img: &mut Image, rng: &mut ChaCha8Rng, a: SceneAttributes) {
    match a.altitude {
        Altitude::Low => {}
        Altitude::Medium => render::block_average(img, 2),
        Altitude::High => {
            render::block_average(img, 2);
            render::box_blur(img);
        }
    }
    match a.weather {
        Weather::Clean => {}
        Weather::Night => render::scale_brightness(img, NIGHT_BRIGHTNESS),
        Weather::Foggy => {
            let strength = rng.random_range(0.45..0.65);
            render::apply_haze(img, rng, strength);
        }
    }
}

/// Per-sample seed inside a split.
pub fn sample_seed(split_seed: u64, index: usize) -> u64 {
    split_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ 0x5eed
}

/// Exact per-value counts by largest remainder.
fn stratified_counts(size: usize, weights: &[f64; 3]) -> [usize; 3] {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| size as f64 * w / total).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = size - counts.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        if weights[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Weather is stratified exactly; view and altitude are drawn per sample.
pub fn generate_split(
    size: usize,
    seed: u64,
    style: DatasetStyle,
    dist: &AttributeDistribution,
) -> Result<(Vec<SceneSample>, Manifest), SynthError> {
    if size == 0 {
        return Err(SynthError::EmptySplit);
    }
    dist.validate(style)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5711_7000);
    let counts = stratified_counts(size, &dist.weather);
    let mut weathers: Vec<Weather> =
        counts.iter().enumerate().flat_map(|(i, &n)| std::iter::repeat_n(Weather::ALL[i], n)).collect();
    use rand::seq::SliceRandom;
    weathers.shuffle(&mut rng);
    let mut samples = Vec::with_capacity(size);
    for (index, weather) in weathers.into_iter().enumerate() {
        let attrs = SceneAttributes {
            weather,
            view: View::ALL[pick(&mut rng, &dist.view)],
            altitude: Altitude::ALL[pick(&mut rng, &dist.altitude)],
        };
        samples.push(generate_sample(sample_seed(seed, index), style, AttributeOverride::all(attrs)));
    }
    let manifest = Manifest::from_samples(&samples, style, seed);
    Ok((samples, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = generate_sample(11, DatasetStyle::UavdtLike, AttributeOverride::default());
        let b = generate_sample(11, DatasetStyle::UavdtLike, AttributeOverride::default());
        assert_eq!(a, b);
    }

    #[test]
    fn boxes_tight_around_masks() {
        for seed in 0..50 {
            let s = generate_sample(seed, DatasetStyle::UavdtLike, AttributeOverride::default());
            assert!(!s.ground_truth.is_empty());
            for (b, m) in s.ground_truth.boxes.iter().zip(&s.masks) {
                let px = |v: f64| v * IMAGE_SIZE as f64;
                let (x0, x1) = (px(b[0] - b[2] / 2.0), px(b[0] + b[2] / 2.0));
                let (y0, y1) = (px(b[1] - b[3] / 2.0), px(b[1] + b[3] / 2.0));
                for &(y, x) in &m.pixels {
                    assert!(x as f64 >= x0 - 1.0 && x as f64 + 1.0 <= x1 + 1.0);
                    assert!(y as f64 >= y0 - 1.0 && y as f64 + 1.0 <= y1 + 1.0);
                }
            }
        }
    }

    #[test]
    fn clean_low_is_untransformed() {
        let over = AttributeOverride { weather: Some(Weather::Clean), altitude: Some(Altitude::Low), view: None };
        let s = generate_sample(5, DatasetStyle::UavdtLike, over);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut again = s.image.clone();
        apply_scene_transforms(&mut again, &mut rng, s.ground_truth.attributes);
        assert_eq!(again, s.image);
    }

    #[test]
    fn stratified_counts_exact() {
        assert_eq!(stratified_counts(300, &[1.0, 1.0, 1.0]), [100, 100, 100]);
        assert_eq!(stratified_counts(10, &[1.0, 1.0, 0.0]), [5, 5, 0]);
        assert_eq!(stratified_counts(7, &[1.0, 1.0, 1.0]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn visdrone_rejects_fog() {
        let mut d = AttributeDistribution::uniform(DatasetStyle::VisdroneLike);
        assert!(generate_split(4, 0, DatasetStyle::VisdroneLike, &d).is_ok());
        d.weather[2] = 1.0;
        assert!(generate_split(4, 0, DatasetStyle::VisdroneLike, &d).is_err());
        assert!(generate_split(0, 0, DatasetStyle::UavdtLike, &AttributeDistribution::uniform(DatasetStyle::UavdtLike)).is_err());
    }
}
