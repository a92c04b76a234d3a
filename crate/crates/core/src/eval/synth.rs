//! Synthetic stand-ins for natural photographs and rendered images.
//!
//! Natural-like: smooth gradients, lattice value-noise texture at two scales,
//! fine pixel-scale detail, soft-edged occluding regions, a sub-pixel channel
//! offset and Gaussian sensor noise. CG-like: shaded ellipsoids with a specular
//! highlight, quantized into bands, with no noise at all.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::corpus::{CorpusEntry, CorpusMeta, ImageCorpus};
use crate::image::{round_half_up, PixelImage};
use crate::Label;

pub const SENSOR_NOISE_SIGMA: f64 = 4.0;

/// Generator settings; the three built-in profiles stand for three
/// independently sourced dataset pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthProfile {
    pub id: u32,
    /// Texture lattice period as a fraction of the image side.
    pub texture_period: f64,
    pub texture_amplitude: f64,
    /// Amplitude of the two-pixel-period detail layer.
    pub detail_amplitude: f64,
    /// Upper bound on soft-edged regions in a natural-like image.
    pub max_regions: usize,
    pub shading_levels: u32,
    pub max_ellipsoids: usize,
    pub grayscale: bool,
    /// Base hue range (R, G, B centers) for both classes.
    pub palette: [f64; 3],
}

impl SynthProfile {
    pub fn dataset(id: u32) -> SynthProfile {
        match id {
            2 => SynthProfile {
                id,
                texture_period: 1.0 / 6.0,
                texture_amplitude: 16.0,
                detail_amplitude: 42.0,
                max_regions: 4,
                shading_levels: 16,
                max_ellipsoids: 7,
                grayscale: false,
                palette: [150.0, 120.0, 110.0],
            },
            3 => SynthProfile {
                id,
                texture_period: 1.0 / 10.0,
                texture_amplitude: 14.0,
                detail_amplitude: 36.0,
                max_regions: 3,
                shading_levels: 20,
                max_ellipsoids: 5,
                grayscale: true,
                palette: [128.0, 128.0, 128.0],
            },
            _ => SynthProfile {
                id: 1,
                texture_period: 1.0 / 8.0,
                texture_amplitude: 20.0,
                detail_amplitude: 40.0,
                max_regions: 4,
                shading_levels: 24,
                max_ellipsoids: 5,
                grayscale: false,
                palette: [180.0, 140.0, 120.0],
            },
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise on a square lattice with smoothstep interpolation.
struct ValueNoise {
    cells: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let n = cells + 2;
        ValueNoise { cells, values: (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    /// `u`, `v` in image-side units `[0, 1]`.
    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells + 2;
        let (fx, fy) = (
            (u * self.cells as f64).clamp(0.0, self.cells as f64),
            (v * self.cells as f64).clamp(0.0, self.cells as f64),
        );
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (smoothstep(fx - ix as f64), smoothstep(fy - iy as f64));
        let g = |x: usize, y: usize| self.values[y * n + x];
        let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
        let bottom = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn to_u8(v: f64) -> u8 {
    round_half_up(v).clamp(0.0, 255.0) as u8
}

fn gray_if(profile: &SynthProfile, rgb: [f64; 3]) -> [f64; 3] {
    if profile.grayscale {
        let y = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
        [y; 3]
    } else {
        rgb
    }
}

pub fn natural_like(profile: &SynthProfile, size: usize, rng: &mut ChaCha8Rng) -> PixelImage {
    let base: [f64; 3] = std::array::from_fn(|c| profile.palette[c] + rng.random_range(-30.0..30.0));
    let slope: [[f64; 2]; 3] = std::array::from_fn(|_| [rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)]);
    let cells = ((1.0 / profile.texture_period).round() as usize).max(1);
    let coarse = ValueNoise::new(rng, cells);
    let fine = ValueNoise::new(rng, cells * 2);
    let detail = ValueNoise::new(rng, (size / 2).max(1));
    let regions: Vec<([f64; 3], f64, f64, f64)> = (0..rng.random_range(1..=profile.max_regions.max(1)))
        .map(|_| {
            let offset = std::array::from_fn(|_| rng.random_range(-60.0..60.0));
            (offset, rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.35))
        })
        .collect();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.8..1.2));
    // Lateral chromatic offset, in pixels, of the red and blue planes.
    let offsets =
        [(rng.random_range(0.3..0.8), 0.0), (0.0, 0.0), (rng.random_range(-0.8..-0.3), rng.random_range(-0.4..0.4))];
    let noise = Normal::new(0.0, SENSOR_NOISE_SIGMA).unwrap();
    let s = size as f64;
    let field = |c: usize, x: f64, y: f64| {
        let (u, v) = (x / s, y / s);
        let texture = profile.texture_amplitude * (coarse.at(u, v) + 0.5 * fine.at(u, v))
            + profile.detail_amplitude * detail.at(u, v);
        // Regions blend in over about one pixel at their boundary.
        let region: f64 = regions
            .iter()
            .map(|(offset, cx, cy, r)| {
                let d = (((u - cx).powi(2) + (v - cy).powi(2)).sqrt() - r) * s;
                offset[c] / (1.0 + d.exp())
            })
            .sum();
        base[c] + slope[c][0] * (u - 0.5) + slope[c][1] * (v - 0.5) + tint[c] * texture + region
    };
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let clean: [f64; 3] =
                std::array::from_fn(|c| field(c, x as f64 + 0.5 + offsets[c].0, y as f64 + 0.5 + offsets[c].1));
            let clean = gray_if(profile, clean);
            if profile.grayscale {
                let n = noise.sample(rng);
                pixels.extend([to_u8(clean[0] + n); 3]);
            } else {
                pixels.extend((0..3).map(|c| to_u8(clean[c] + noise.sample(rng))));
            }
        }
    }
    PixelImage::from_rgb(size, size, pixels).expect("sized buffer")
}

struct Ellipsoid {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
    shininess: f64,
}

pub fn cg_like(profile: &SynthProfile, size: usize, rng: &mut ChaCha8Rng) -> PixelImage {
    let s = size as f64;
    let levels = profile.shading_levels.max(2) as f64;
    let quantize = |v: f64| (v.clamp(0.0, 1.0) * (levels - 1.0)).round() / (levels - 1.0);
    let bg_top: [f64; 3] = std::array::from_fn(|c| profile.palette[c] * rng.random_range(0.6..1.0));
    let bg_bottom: [f64; 3] = std::array::from_fn(|c| profile.palette[c] * rng.random_range(0.6..1.0));
    let count = rng.random_range(2..=profile.max_ellipsoids.max(2));
    let mut shapes: Vec<Ellipsoid> = (0..count)
        .map(|_| Ellipsoid {
            cx: rng.random_range(0.2..0.8) * s,
            cy: rng.random_range(0.2..0.8) * s,
            rx: rng.random_range(0.12..0.4) * s,
            ry: rng.random_range(0.12..0.4) * s,
            color: std::array::from_fn(|c| (profile.palette[c] + rng.random_range(-40.0..40.0)).clamp(20.0, 235.0)),
            shininess: rng.random_range(8.0..40.0),
        })
        .collect();
    shapes.sort_by(|a, b| (b.rx * b.ry).total_cmp(&(a.rx * a.ry)));
    let light = {
        let (lx, ly) = (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.2));
        let lz = (1.0f64 - lx * lx - ly * ly).sqrt();
        [lx, ly, lz]
    };
    let half = {
        let h = [light[0], light[1], light[2] + 1.0];
        let n = (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt();
        [h[0] / n, h[1] / n, h[2] / n]
    };
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = quantize(py / s);
            let mut rgb: [f64; 3] = std::array::from_fn(|c| bg_top[c] * (1.0 - t) + bg_bottom[c] * t);
            for e in &shapes {
                let (dx, dy) = ((px - e.cx) / e.rx, (py - e.cy) / e.ry);
                let r2 = dx * dx + dy * dy;
                if r2 >= 1.0 {
                    continue;
                }
                let n = [dx, dy, (1.0 - r2).sqrt()];
                let diffuse = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
                let spec = (n[0] * half[0] + n[1] * half[1] + n[2] * half[2]).max(0.0).powf(e.shininess);
                let shade = quantize(0.5 + 0.5 * diffuse);
                let highlight = quantize(spec);
                rgb = std::array::from_fn(|c| e.color[c] * shade + 255.0 * 0.6 * highlight);
            }
            pixels.extend(gray_if(profile, rgb).map(to_u8));
        }
    }
    PixelImage::from_rgb(size, size, pixels).expect("sized buffer")
}

fn image_seed(seed: u64, label: Label, index: usize) -> u64 {
    let class = match label {
        Label::Natural => 0x4E41_5455,
        Label::Cg => 0x4347_4347,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ class ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// `count` images of one class; image `i` depends only on `(profile, seed, i)`.
pub fn synth_corpus(profile: &SynthProfile, kind: Label, count: usize, size: usize, seed: u64) -> ImageCorpus {
    let entries = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, kind, i));
            let image = match kind {
                Label::Natural => natural_like(profile, size, &mut rng),
                Label::Cg => cg_like(profile, size, &mut rng),
            };
            let prefix = match kind {
                Label::Natural => "nat",
                Label::Cg => "cg",
            };
            CorpusEntry { id: format!("{prefix}{:05}", i), label: kind, image }
        })
        .collect();
    ImageCorpus {
        meta: CorpusMeta { source: format!("synthetic-d{}-s{seed}", profile.id), size, grayscale: profile.grayscale },
        entries,
    }
}
