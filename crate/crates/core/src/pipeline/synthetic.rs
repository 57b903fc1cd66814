//! Procedural images for the toy profile: shapes over gradients as content,
//! a periodic colour texture as style.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::substrate::{save_image, Image};

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// A gradient background with a few filled discs and rectangles.
pub fn content_image(size: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c0, c1) = (random_color(&mut rng), random_color(&mut rng));
    let angle: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let (dx, dy) = (angle.cos(), angle.sin());
    let n_shapes = rng.random_range(2..6);
    let shapes: Vec<(bool, f64, f64, f64, f64, [f64; 3])> = (0..n_shapes)
        .map(|_| {
            (
                rng.random_bool(0.5),
                rng.random::<f64>(),
                rng.random::<f64>(),
                0.08 + 0.25 * rng.random::<f64>(),
                0.08 + 0.25 * rng.random::<f64>(),
                random_color(&mut rng),
            )
        })
        .collect();
    let s = size as f64;
    Image::from_fn(size, size, |(c, y, x)| {
        let (u, v) = (x as f64 / s, y as f64 / s);
        let t = (0.5 + 0.5 * ((u - 0.5) * dx + (v - 0.5) * dy) * 1.4).clamp(0.0, 1.0);
        let mut value = c0[c] * (1.0 - t) + c1[c] * t;
        for &(disc, cx, cy, rx, ry, col) in &shapes {
            let inside = if disc {
                ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0
            } else {
                (u - cx).abs() <= rx && (v - cy).abs() <= ry
            };
            if inside {
                value = col[c];
            }
        }
        value
    })
}

/// Diagonal colour bands modulated by a fine checker; strongly textured.
pub fn style_image(size: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette: Vec<[f64; 3]> = (0..4).map(|_| random_color(&mut rng)).collect();
    let period = 6.0 + 6.0 * rng.random::<f64>();
    Image::from_fn(size, size, |(c, y, x)| {
        let band = (((x + y) as f64 / period) as usize) % palette.len();
        let checker = if (x / 3 + y / 3) % 2 == 0 { 1.0 } else { 0.7 };
        let wave = 0.15 * ((x as f64 * 0.7).sin() * (y as f64 * 0.4).cos());
        (palette[band][c] * checker + wave).clamp(0.0, 1.0)
    })
}

/// Writes `n` content images `content_00000.png …` into `dir`.
pub fn write_content_set(dir: &Path, n: usize, size: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..n {
        let img = content_image(size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
        save_image(&img, dir.join(format!("content_{i:05}.png")))?;
    }
    Ok(())
}
