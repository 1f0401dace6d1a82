//! Seeded synthetic low-light patches: smooth gradients and ripples under a few
//! flat rectangles, darkened by a random exposure and gamma, plus sensor noise.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sci_core::imaging::{quantize, dequantize, save_image};
use sci_core::ImageBuffer;

pub fn dark_patch(rng: &mut ChaCha8Rng, size: usize) -> ImageBuffer {
    let mut planes = vec![vec![0.0f64; size * size]; 3];
    for plane in planes.iter_mut() {
        let (a, b, d): (f64, f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let fy: f64 = rng.random_range(0.0..3.0);
        for y in 0..size {
            for x in 0..size {
                let (xf, yf) = (x as f64 / size as f64, y as f64 / size as f64);
                plane[y * size + x] =
                    0.5 + 0.3 * (a * xf + b * yf) + 0.1 * (2.0 * PI * (d * 3.0 * xf + yf * fy)).sin();
            }
        }
    }
    for _ in 0..6 {
        let x0 = rng.random_range(0..size);
        let y0 = rng.random_range(0..size);
        let w = rng.random_range(size / 16..size * 3 / 8);
        let h = rng.random_range(size / 16..size * 3 / 8);
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        for y in y0..(y0 + h).min(size) {
            for x in x0..(x0 + w).min(size) {
                for (c, plane) in planes.iter_mut().enumerate() {
                    plane[y * size + x] = color[c];
                }
            }
        }
    }
    let exposure: f64 = rng.random_range(0.08..0.25);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut data = vec![0.0f32; size * size * 3];
    for i in 0..size * size {
        for c in 0..3 {
            let v = exposure * planes[c][i].clamp(0.0, 1.0).powf(1.3) + noise.sample(rng);
            // stored images are 8-bit, so keep the in-memory copy on that grid
            data[i * 3 + c] = dequantize(quantize(v.clamp(0.0, 1.0) as f32));
        }
    }
    ImageBuffer::new(size, size, 3, data).unwrap()
}

pub fn dark_corpus(seed: u64, count: usize, size: usize) -> Vec<ImageBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| dark_patch(&mut rng, size)).collect()
}

/// Writes `patch_NNN.png` files into `dir`.
pub fn write_corpus(dir: &Path, images: &[ImageBuffer]) -> Vec<PathBuf> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let p = dir.join(format!("patch_{i:03}.png"));
            save_image(img, &p).unwrap();
            p
        })
        .collect()
}
