//! Deterministic synthetic bitemporal scenes with known change.
//!
//! The first date is a smooth per-channel gradient background with a
//! mild periodic texture, overlaid with rectangles and ellipses. The second
//! date copies the first and then inserts new shapes, removes existing ones
//! (repainting the background) or recolors them, until roughly the requested
//! fraction of pixels differs. Recolors are often subtle, and many inserted
//! shapes are only a few pixels wide, so classical difference images make
//! both false alarms and misses once noise is added.
//!
//! The reference marks exactly the pixels where the two noiseless images
//! differ; independent Gaussian noise, clipped to `[0, 1]`, is added
//! afterwards.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::raster::{ChangeMap, RasterImage};

pub const CHANNELS: usize = 3;
/// Change fractions of the benchmark suite.
pub const BENCHMARK_FRACTIONS: [f64; 5] = [0.03, 0.05, 0.1, 0.15, 0.2];
pub const BENCHMARK_SIZE: usize = 224;
pub const BENCHMARK_NOISE: f64 = 0.05;
/// Minimum Euclidean color difference of a changed pixel.
pub const MIN_CONTRAST: f64 = 0.2;
/// Mean color difference above which a change counts as strong.
pub const STRONG_CONTRAST: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub x1: RasterImage,
    pub x2: RasterImage,
    pub reference: ChangeMap,
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    kind: Kind,
    top: f64,
    left: f64,
    height: f64,
    width: f64,
}

impl Shape {
    fn random(rng: &mut impl Rng, h: usize, w: usize, min: f64, max: f64) -> Self {
        let height = rng.gen_range(min..=max);
        let width = rng.gen_range(min..=max);
        Self {
            kind: if rng.gen_bool(0.5) {
                Kind::Rect
            } else {
                Kind::Ellipse
            },
            top: rng.gen_range(-height / 2.0..h as f64 - height / 2.0),
            left: rng.gen_range(-width / 2.0..w as f64 - width / 2.0),
            height,
            width,
        }
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        match self.kind {
            Kind::Rect => {
                y >= self.top
                    && y < self.top + self.height
                    && x >= self.left
                    && x < self.left + self.width
            }
            Kind::Ellipse => {
                let dy = (y - self.top - self.height / 2.0) / (self.height / 2.0);
                let dx = (x - self.left - self.width / 2.0) / (self.width / 2.0);
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    /// Pixel indices covered by the shape.
    fn pixels(&self, h: usize, w: usize) -> Vec<usize> {
        let r0 = self.top.floor().max(0.0) as usize;
        let c0 = self.left.floor().max(0.0) as usize;
        let r1 = ((self.top + self.height).ceil().max(0.0) as usize).min(h);
        let c1 = ((self.left + self.width).ceil().max(0.0) as usize).min(w);
        let mut out = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                if self.contains(r, c) {
                    out.push(r * w + c);
                }
            }
        }
        out
    }
}

/// Planar noiseless scene under construction.
struct Canvas {
    data: Vec<[f64; CHANNELS]>,
}

impl Canvas {
    fn paint(&mut self, pixels: &[usize], color: [f64; CHANNELS]) {
        for &p in pixels {
            self.data[p] = color;
        }
    }
}

fn color_distance(a: &[f64; CHANNELS], b: &[f64; CHANNELS]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn random_color(rng: &mut impl Rng) -> [f64; CHANNELS] {
    std::array::from_fn(|_| rng.gen_range(0.1..0.9))
}

/// Shift a color by a random vector of the given norm, folding back into
/// `[0, 1]`.
fn shifted_color(rng: &mut impl Rng, base: [f64; CHANNELS], norm: f64) -> [f64; CHANNELS] {
    let mut dir: [f64; CHANNELS] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let len = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-9);
    for d in &mut dir {
        *d *= norm / len;
    }
    std::array::from_fn(|k| {
        let v = base[k] + dir[k];
        if (0.0..=1.0).contains(&v) {
            v
        } else {
            (base[k] - dir[k]).clamp(0.0, 1.0)
        }
    })
}

fn background(rng: &mut impl Rng, h: usize, w: usize) -> Canvas {
    let base = random_color(rng);
    let gy: [f64; CHANNELS] = std::array::from_fn(|_| rng.gen_range(-0.15..0.15));
    let gx: [f64; CHANNELS] = std::array::from_fn(|_| rng.gen_range(-0.15..0.15));
    let period = rng.gen_range(6.0..14.0);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 / h as f64, c as f64 / w as f64);
            let tex = 0.02 * ((r as f64 / period).sin() * (c as f64 / period).cos());
            data.push(std::array::from_fn(|k| {
                (base[k] + gy[k] * (y - 0.5) + gx[k] * (x - 0.5) + tex).clamp(0.0, 1.0)
            }));
        }
    }
    Canvas { data }
}

/// Generate one scene pair and its reference change map.
pub fn gen_scene(
    h: usize,
    w: usize,
    change_fraction: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Scene> {
    if h < 64 || w < 64 || !h.is_multiple_of(16) || !w.is_multiple_of(16) {
        return Err(Error::Config(format!(
            "scene size {h}x{w} must be at least 64x64 and a multiple of 16"
        )));
    }
    if !(change_fraction > 0.0 && change_fraction < 0.5) {
        return Err(Error::Config(format!(
            "change fraction {change_fraction} outside (0, 0.5)"
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!(
            "noise sigma {noise_sigma} must be finite and >= 0"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h * w;
    let span = h.min(w) as f64;

    let bg = background(&mut rng, h, w);
    let mut first = Canvas {
        data: bg.data.clone(),
    };
    let mut shapes = Vec::new();
    let count = rng.gen_range(12..24);
    for _ in 0..count {
        let s = Shape::random(&mut rng, h, w, span * 0.04, span * 0.22);
        let px = s.pixels(h, w);
        let color = random_color(&mut rng);
        first.paint(&px, color);
        shapes.push((px, color));
    }

    let mut second = Canvas {
        data: first.data.clone(),
    };
    let target = (change_fraction * n as f64).round() as usize;
    let differs =
        |a: &Canvas, b: &Canvas| a.data.iter().zip(&b.data).filter(|(x, y)| x != y).count();
    let mut changed = 0;
    let mut attempts = 0;
    let (mut strong_px, mut subtle_px) = (0usize, 0usize);
    while changed < target * 95 / 100 && attempts < 20_000 {
        attempts += 1;
        let remaining = (target - changed) as f64;
        // strong changes are required while they cover under 75% of the
        // changed area, so every scene has clearly separable regions as well
        // as borderline ones
        let need_strong = strong_px <= subtle_px * 3;
        let norm = if need_strong {
            rng.gen_range(0.55..0.8)
        } else {
            rng.gen_range(0.2..0.35)
        };
        let mut trial = Canvas {
            data: second.data.clone(),
        };
        match rng.gen_range(0..10) {
            // removal: repaint a first-date shape with the background
            0 | 1 if !shapes.is_empty() => {
                let (px, _) = &shapes[rng.gen_range(0..shapes.len())];
                for &p in px {
                    trial.data[p] = bg.data[p];
                }
            }
            // recolor
            2..=4 if !shapes.is_empty() => {
                let (px, color) = &shapes[rng.gen_range(0..shapes.len())];
                let c = shifted_color(&mut rng, *color, norm);
                trial.paint(px, c);
            }
            // insertion, often tiny
            _ => {
                let max = (remaining.sqrt() * 1.2).clamp(3.0, span * 0.3);
                let min = if rng.gen_bool(0.4) {
                    2.0
                } else {
                    (max * 0.4).max(2.0)
                };
                let s = Shape::random(&mut rng, h, w, min.min(max), max);
                let px = s.pixels(h, w);
                let base = px.first().map_or([0.5; CHANNELS], |&p| trial.data[p]);
                let c = shifted_color(&mut rng, base, norm);
                trial.paint(&px, c);
            }
        }
        let mut faint = false;
        let (mut touched, mut contrast) = (0usize, 0.0);
        for ((t, s), f) in trial.data.iter().zip(&second.data).zip(&first.data) {
            if t != f {
                let d = color_distance(t, f);
                // every altered pixel must differ visibly from the first date
                faint |= d < MIN_CONTRAST;
                if t != s {
                    touched += 1;
                    contrast += d;
                }
            }
        }
        let strong = touched > 0 && contrast / touched as f64 >= STRONG_CONTRAST;
        let now = differs(&first, &trial);
        // keep changes that do not overshoot the target by more than 5%
        if faint || now <= changed || now > target + target / 20 || (need_strong && !strong) {
            continue;
        }
        if strong {
            strong_px += now - changed;
        } else {
            subtle_px += now - changed;
        }
        changed = now;
        second = trial;
    }

    let reference =
        ChangeMap::from_fn(h, w, |r, c| first.data[r * w + c] != second.data[r * w + c]);
    let noisy = |canvas: &Canvas, rng: &mut ChaCha8Rng| -> Result<RasterImage> {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let data = canvas
            .data
            .iter()
            .flat_map(|px| px.iter().copied())
            .map(|v| {
                if noise_sigma > 0.0 {
                    (v + normal.sample(rng)).clamp(0.0, 1.0)
                } else {
                    v
                }
            })
            .collect();
        RasterImage::new(h, w, CHANNELS, data)
    };
    let x1 = noisy(&first, &mut rng)?;
    let x2 = noisy(&second, &mut rng)?;
    Ok(Scene { x1, x2, reference })
}

/// The fixed five-scene suite: 224×224, change fractions
/// 0.03, 0.05, 0.1, 0.15 and 0.2, noise sigma 0.05.
pub fn gen_benchmark(seed: u64) -> Vec<Scene> {
    BENCHMARK_FRACTIONS
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let scene_seed = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(i as u64);
            gen_scene(
                BENCHMARK_SIZE,
                BENCHMARK_SIZE,
                f,
                BENCHMARK_NOISE,
                scene_seed,
            )
            .expect("benchmark parameters are valid")
        })
        .collect()
}
