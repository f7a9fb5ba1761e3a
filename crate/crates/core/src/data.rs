//! Image datasets: a seeded synthetic shape generator and a directory loader.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::seed::{rng_for, stream};
use crate::tensor::{DType, Tensor};

pub const SHAPE_CLASSES: usize = 10;
pub const SHAPE_NAMES: [&str; SHAPE_CLASSES] = [
    "disk", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar", "x", "frame",
];

/// Images stored `[n, h, w, 3]` in `[0, 1]`, with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn image_len(&self) -> usize {
        self.h * self.w * 3
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let l = self.image_len();
        &self.pixels[i * l..(i + 1) * l]
    }

    pub fn image_tensor(&self, i: usize) -> Tensor {
        Tensor::new(vec![self.h, self.w, 3], self.image(i).to_vec(), DType::F64)
            .expect("dataset image shape")
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Batch {
            n: indices.len(),
            h: self.h,
            w: self.w,
            c: 3,
            data,
        }
    }

    pub fn all(&self) -> Batch {
        Batch {
            n: self.n,
            h: self.h,
            w: self.w,
            c: 3,
            data: self.pixels.clone(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            n: indices.len(),
            h: self.h,
            w: self.w,
            pixels: self.batch(indices).data,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("dataset has no labels".into()))
    }
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let d = (dx * dx + dy * dy).sqrt();
    let t = r * 0.3;
    match shape {
        0 => d <= r,
        1 => ax <= r * 0.8 && ay <= r * 0.8,
        2 => dy <= r * 0.7 && dy >= -r && ax <= (dy + r) * 0.6,
        3 => (ax <= t && ay <= r) || (ay <= t && ax <= r),
        4 => d <= r && d >= r * 0.55,
        5 => ax + ay <= r,
        6 => ay <= t && ax <= r,
        7 => ax <= t && ay <= r,
        8 => ((dx - dy).abs() <= t * 1.2 || (dx + dy).abs() <= t * 1.2) && ax <= r * 0.8 && ay <= r * 0.8,
        _ => ax <= r * 0.85 && ay <= r * 0.85 && (ax >= r * 0.55 || ay >= r * 0.55),
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn draw_shape(rng: &mut ChaCha8Rng, class: usize, h: usize, w: usize) -> Vec<f64> {
    let bg = color(rng);
    let bg2 = color(rng);
    let mut fg = color(rng);
    // keep the shape visible against the background
    let contrast: f64 = fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum();
    if contrast < 0.6 {
        fg = bg.map(|v| 1.0 - v);
    }
    let period = rng.random_range(3.0..8.0);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let size = h.min(w) as f64;
    let r = size * rng.random_range(0.22..0.34);
    let cx = w as f64 / 2.0 + rng.random_range(-0.12..0.12) * size;
    let cy = h as f64 / 2.0 + rng.random_range(-0.12..0.12) * size;
    let noise = 0.04;
    let mut px = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let stripe = ((fx * ca + fy * sa) / period).floor() as i64 % 2 == 0;
            let base = if inside(class, fx - cx, fy - cy, r) {
                fg
            } else if stripe {
                bg
            } else {
                bg2.map(|v| 0.7 * v + 0.3 * bg[0])
            };
            for v in base {
                px.push((v + rng.random_range(-noise..noise)).clamp(0.0, 1.0));
            }
        }
    }
    px
}

/// Colored shapes on striped, noisy backgrounds; labels cycle through the
/// ten shape classes so every class is equally represented.
pub fn synthetic_shapes(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || size < 8 {
        return Err(Error::InvalidArgument(format!(
            "synthetic set needs n >= 1 and size >= 8, got n={n}, size={size}"
        )));
    }
    let mut pixels = Vec::with_capacity(n * size * size * 3);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % SHAPE_CLASSES;
        let mut rng = rng_for(seed, &[stream::DATASET, i as u64]);
        pixels.extend(draw_shape(&mut rng, class, size, size));
        labels.push(class);
    }
    Ok(Dataset {
        n,
        h: size,
        w: size,
        pixels,
        labels: Some(labels),
    })
}

/// Decode every image file directly under `dir`, resized to `size`x`size`.
/// A file's parent-relative subdirectory is not used; labels are absent.
pub fn load_image_dir(dir: &Path, size: usize) -> Result<Dataset> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::NotFound(format!("no images in {}", dir.display())));
    }
    let mut pixels = Vec::with_capacity(paths.len() * size * size * 3);
    for p in &paths {
        let img = image::open(p)
            .map_err(|e| Error::Corrupt {
                path: p.clone(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let img = image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle);
        pixels.extend(img.as_raw().iter().map(|&v| v as f64 / 255.0));
    }
    Ok(Dataset {
        n: paths.len(),
        h: size,
        w: size,
        pixels,
        labels: None,
    })
}
