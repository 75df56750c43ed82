//! Rasterisation and image-level transforms. Images are `[3, H, W]`, row major.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(size: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * size * size);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, size * size));
        }
        Self { size, data }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.size + y) * self.size + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.size + y) * self.size + x] = v;
    }

    pub fn paint(&mut self, mask: &Mask, rgb: [f64; 3]) {
        for &(y, x) in &mask.pixels {
            for (c, v) in rgb.iter().enumerate() {
                self.set(c, y, x, *v);
            }
        }
    }

    pub fn clamp(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Mean over channels of the per-channel standard deviation.
    pub fn contrast(&self) -> f64 {
        let n = self.size * self.size;
        self.data
            .chunks(n)
            .map(|ch| {
                let m = ch.iter().sum::<f64>() / n as f64;
                (ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt()
            })
            .sum::<f64>()
            / 3.0
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Pixels covered by one shape.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Mask {
    pub pixels: Vec<(usize, usize)>,
}

impl Mask {
    /// Tight pixel bounds `(x0, y0, x1, y1)`, exclusive at the far edges.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let x0 = self.pixels.iter().map(|p| p.1).min()?;
        let x1 = self.pixels.iter().map(|p| p.1).max()? + 1;
        let y0 = self.pixels.iter().map(|p| p.0).min()?;
        let y1 = self.pixels.iter().map(|p| p.0).max()? + 1;
        Some((x0, y0, x1, y1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Ellipse,
    Rectangle,
    Diamond,
}

/// Rasterises an axis-aligned shape centred at `(cx, cy)` with half extents
/// `(hx, hy)`, sampling at pixel centres.
pub fn rasterize(shape: Shape, size: usize, cx: f64, cy: f64, hx: f64, hy: f64) -> Mask {
    let mut pixels = Vec::new();
    let y_lo = ((cy - hy).floor().max(0.0)) as usize;
    let y_hi = ((cy + hy).ceil().min(size as f64)) as usize;
    let x_lo = ((cx - hx).floor().max(0.0)) as usize;
    let x_hi = ((cx + hx).ceil().min(size as f64)) as usize;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let dx = (x as f64 + 0.5 - cx) / hx;
            let dy = (y as f64 + 0.5 - cy) / hy;
            let inside = match shape {
                Shape::Ellipse => dx * dx + dy * dy <= 1.0,
                Shape::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
                Shape::Diamond => dx.abs() + dy.abs() <= 1.0,
            };
            if inside {
                pixels.push((y, x));
            }
        }
    }
    Mask { pixels }
}

/// Smooth random field in roughly `[0, 1]` built from a few low-frequency waves.
pub fn low_frequency_field(rng: &mut ChaCha8Rng, size: usize, waves: usize) -> Vec<f64> {
    let params: Vec<(f64, f64, f64, f64)> = (0..waves)
        .map(|_| {
            (
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut field = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            let s: f64 = params
                .iter()
                .map(|(fx, fy, px, py)| (std::f64::consts::TAU * fx * u + px).sin() * (std::f64::consts::TAU * fy * v + py).cos())
                .sum();
            field.push(0.5 + 0.5 * s / waves as f64);
        }
    }
    field
}

pub fn add_noise(img: &mut Image, rng: &mut ChaCha8Rng, std: f64) {
    let d = Normal::new(0.0, std).expect("valid std");
    img.data.iter_mut().for_each(|v| *v += d.sample(rng));
}

/// Replaces each aligned `block`×`block` tile by its mean.
pub fn block_average(img: &mut Image, block: usize) {
    let s = img.size;
    for c in 0..3 {
        for by in (0..s).step_by(block) {
            for bx in (0..s).step_by(block) {
                let ys = by..(by + block).min(s);
                let xs = bx..(bx + block).min(s);
                let n = (ys.len() * xs.len()) as f64;
                let mean = ys.clone().flat_map(|y| xs.clone().map(move |x| (y, x))).map(|(y, x)| img.get(c, y, x)).sum::<f64>() / n;
                for y in ys.clone() {
                    for x in xs.clone() {
                        img.set(c, y, x, mean);
                    }
                }
            }
        }
    }
}

/// 3×3 box filter with edge replication.
pub fn box_blur(img: &mut Image) {
    let s = img.size as isize;
    let src = img.clone();
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let yy = (y + dy).clamp(0, s - 1) as usize;
                        let xx = (x + dx).clamp(0, s - 1) as usize;
                        acc += src.get(c, yy, xx);
                    }
                }
                img.set(c, y as usize, x as usize, acc / 9.0);
            }
        }
    }
}

pub fn scale_brightness(img: &mut Image, factor: f64) {
    img.data.iter_mut().for_each(|v| *v *= factor);
}

/// `img * (1 - a) + a * haze`, with `haze` a bright low-frequency field.
pub fn apply_haze(img: &mut Image, rng: &mut ChaCha8Rng, strength: f64) {
    let field = low_frequency_field(rng, img.size, 3);
    let n = img.size * img.size;
    for c in 0..3 {
        for (k, f) in field.iter().enumerate() {
            let haze = 0.7 + 0.25 * f;
            let v = &mut img.data[c * n + k];
            *v = *v * (1.0 - strength) + strength * haze;
        }
    }
}
