//! Evaluation kit: SSIM, a feature-space distance, timing, and loss ablations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::TrainConfig;
use super::train::{train_fine, trailing_mean};
use crate::coarse::CoarseNetwork;
use crate::encoder::{Encoder, TapName};
use crate::error::{Error, Result};
use crate::fine::{stylize, FineNetwork};
use crate::losses::{perceptual_loss, LossBreakdown};
use crate::ssf::Fusion;
use crate::substrate::{load_image, resize, save_image, DatasetCursor, FeatureMap, Image};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    /// Normalized 1-D Gaussian; the 2-D window is its outer product.
    pub fn kernel(&self) -> Array1<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let k = Array1::from_shape_fn(self.window, |i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * self.sigma * self.sigma)).exp()
        });
        let sum = k.sum();
        k / sum
    }
}

/// Valid-mode separable filtering: rows, then columns.
fn filter_valid(x: &Array2<f64>, k: &Array1<f64>) -> Array2<f64> {
    let n = k.len();
    let (h, w) = x.dim();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            rows[[i, j]] = (0..n).map(|t| k[t] * x[[i, j + t]]).sum::<f64>();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[[i, j]] = (0..n).map(|t| k[t] * rows[[i + t, j]]).sum::<f64>();
        }
    }
    out
}

/// Mean SSIM of the luminance over every window that fits inside the image.
pub fn ssim(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::InvalidInput(format!(
            "ssim: shape mismatch {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    if a.height() < cfg.window || a.width() < cfg.window {
        return Err(Error::InvalidInput(format!(
            "ssim: images must be at least {0}x{0}",
            cfg.window
        )));
    }
    let (x, y) = (a.luminance(), b.luminance());
    let k = cfg.kernel();
    let mu_x = filter_valid(&x, &k);
    let mu_y = filter_valid(&y, &k);
    let xx = filter_valid(&(&x * &x), &k);
    let yy = filter_valid(&(&y * &y), &k);
    let xy = filter_valid(&(&x * &y), &k);
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let mut total = 0.0;
    for idx in 0..mu_x.len() {
        let (i, j) = (idx / mu_x.ncols(), idx % mu_x.ncols());
        let (mx, my) = (mu_x[[i, j]], mu_y[[i, j]]);
        let vx = xx[[i, j]] - mx * mx;
        let vy = yy[[i, j]] - my * my;
        let cov = xy[[i, j]] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// Unit-normalizes each position's channel vector.
fn normalize_positions(f: &FeatureMap) -> FeatureMap {
    let mut out = f.clone();
    {
        let mut m = out.as_matrix_mut();
        for mut col in m.axis_iter_mut(Axis(1)) {
            let norm = col.dot(&col).sqrt() + 1e-10;
            col.mapv_inplace(|v| v / norm);
        }
    }
    out
}

/// Mean over `ReLU_1_1 … ReLU_4_1` of the squared distance between
/// channel-normalized features.
///
/// A fixed-encoder stand-in for learned perceptual metrics. Its values are
/// not comparable with LPIPS.
pub fn perceptual_distance(a: &Image, b: &Image, enc: &Encoder) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::InvalidInput("perceptual distance: shape mismatch".into()));
    }
    let fa = enc.extract(a, &TapName::BLOCK_FIRSTS)?;
    let fb = enc.extract(b, &TapName::BLOCK_FIRSTS)?;
    let mut sum = 0.0;
    for t in TapName::BLOCK_FIRSTS {
        sum += perceptual_loss(&normalize_positions(&fa[&t]), &normalize_positions(&fb[&t]))?;
    }
    Ok(sum / TapName::BLOCK_FIRSTS.len() as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub n: usize,
    pub size: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub samples: Vec<f64>,
    pub hardware: String,
}

pub const WARMUP_RUNS: usize = 3;

fn hardware_note() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu}; {} {}; {threads} hardware threads, single-threaded run", std::env::consts::OS, std::env::consts::ARCH)
}

/// Wall-clock time of full stylization at `size × size` over `n` runs after the warm-up.
pub fn bench_stylize(coarse: &CoarseNetwork, fine: &FineNetwork, n: usize, size: usize, seed: u64) -> Result<BenchReport> {
    if n == 0 {
        return Err(Error::InvalidInput("bench needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = Image::from_fn(size, size, |_| rng.random())?;
    let style = Image::from_fn(size, size, |_| rng.random())?;
    for _ in 0..WARMUP_RUNS {
        stylize(coarse, fine, &content, &style)?;
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let start = Instant::now();
        let out = stylize(coarse, fine, &content, &style)?;
        samples.push(start.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(BenchReport {
        n,
        size,
        mean_seconds: mean,
        std_seconds: var.sqrt(),
        samples,
        hardware: hardware_note(),
    })
}

pub fn bench_checkpoints(coarse: &Path, fine: &Path, n: usize, size: usize) -> Result<BenchReport> {
    bench_stylize(&CoarseNetwork::load(coarse)?, &FineNetwork::load(fine)?, n, size, 0)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    /// Mean over the last (up to) 50 iterations.
    pub l_p: f64,
    pub l_r: f64,
    pub l_g: f64,
    pub l_m: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub grid: PathBuf,
    pub table: PathBuf,
}

/// Variant names with their configurations, in grid order.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let root = base.out_dir.join("ablate");
    let mut out = Vec::new();
    let mut push = |name: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c.out_dir = root.join(name);
        out.push((name.to_string(), c));
    };
    push("base", &|_| {});
    push("no_alpha", &|c| c.weights.alpha = 0.0);
    push("no_lambda1", &|c| c.weights.lambda1 = 0.0);
    push("no_lambda2", &|c| c.weights.lambda2 = 0.0);
    push("no_lambda3", &|c| c.weights.lambda3 = 0.0);
    push("concat", &|c| c.fusion = Fusion::Concat);
    push("no_coarse", &|c| c.use_coarse = false);
    out
}

fn tail_mean(history: &[LossBreakdown], pick: impl Fn(&LossBreakdown) -> f64) -> f64 {
    let values: Vec<f64> = history.iter().map(pick).collect();
    let window = values.len().min(50);
    trailing_mean(&values, values.len(), window).unwrap_or(0.0)
}

/// Side-by-side composition of equally tall images.
pub fn hstack(images: &[Image]) -> Result<Image> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidInput("hstack needs at least one image".into()));
    };
    let h = first.height();
    if images.iter().any(|i| i.height() != h) {
        return Err(Error::InvalidInput("hstack images must share a height".into()));
    }
    let total: usize = images.iter().map(|i| i.width()).sum();
    let mut data = Array3::zeros((3, h, total));
    let mut x = 0;
    for img in images {
        data.slice_mut(s![.., .., x..x + img.width()]).assign(img.data());
        x += img.width();
    }
    Image::new(data)
}

/// Trains every loss/fusion/coarse variant against the configured coarse
/// checkpoint and writes a loss table and an image grid.
pub fn ablate(cfg: &TrainConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let coarse_path = cfg
        .coarse_checkpoint
        .clone()
        .ok_or_else(|| Error::Config("ablate needs `coarse_checkpoint` in the config".into()))?;
    let coarse = CoarseNetwork::load(&coarse_path)?;
    let size = cfg.image_size;
    let mut cursor = DatasetCursor::open(&cfg.content_root, cfg.seed)?;
    let content = cursor.next_image(size)?;
    let style = resize(&load_image(&cfg.style_image)?, size, size)?;

    let mut rows = Vec::new();
    let mut panels = vec![content.clone(), style.clone()];
    for (name, variant) in ablation_variants(cfg) {
        log::info!("ablation variant {name}");
        let report = train_fine(&variant, &coarse_path)?;
        let fine = FineNetwork::load(&report.checkpoint)?;
        panels.push(stylize(&coarse, &fine, &content, &style)?);
        let h = &report.history;
        rows.push(AblationRow {
            variant: name,
            l_p: tail_mean(h, |b| b.l_p),
            l_r: tail_mean(h, |b| b.l_r),
            l_g: tail_mean(h, |b| b.l_g),
            l_m: tail_mean(h, |b| b.l_m),
            total: tail_mean(h, |b| b.total),
        });
    }
    let dir = cfg.out_dir.join("ablate");
    let grid = dir.join("grid.png");
    save_image(&hstack(&panels)?, &grid)?;
    let table = dir.join("table.csv");
    let mut w = csv::Writer::from_path(&table).map_err(|e| Error::io(&table, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::io(&table, e))?;
    }
    w.flush().map_err(|e| Error::io(&table, e))?;
    Ok(AblationReport { rows, grid, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderProfile;

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::from_fn(h, w, |_| rng.random()).unwrap()
    }

    /// Direct per-window evaluation with the 2-D weights.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let (x, y) = (a.luminance(), b.luminance());
        let (h, w) = x.dim();
        let mut weights = [[0.0; 11]; 11];
        let mut wsum = 0.0;
        for (i, row) in weights.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / 4.5).exp();
                wsum += *v;
            }
        }
        let (c1, c2) = (0.0001, 0.0009);
        let mut total = 0.0;
        let mut count = 0;
        for top in 0..=h - 11 {
            for left in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = weights[i][j] / wsum;
                        mx += wt * x[[top + i, left + j]];
                        my += wt * y[[top + i, left + j]];
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = weights[i][j] / wsum;
                        let dx = x[[top + i, left + j]] - mx;
                        let dy = y[[top + i, left + j]] - my;
                        vx += wt * dx * dx;
                        vy += wt * dy * dy;
                        cxy += wt * dx * dy;
                    }
                }
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn kernel_sums_to_one() {
        assert!((SsimConfig::default().kernel().sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ssim_self_symmetry_and_oracle() {
        let cfg = SsimConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let a = random_image(16, 16, &mut rng);
            let b = random_image(16, 16, &mut rng);
            assert_eq!(ssim(&a, &a, &cfg).unwrap(), 1.0);
            let ab = ssim(&a, &b, &cfg).unwrap();
            assert!((ab - ssim(&b, &a, &cfg).unwrap()).abs() < 1e-12);
            assert!((ab - ssim_oracle(&a, &b)).abs() < 1e-6);
        }
        let c = Image::constant(16, 16, 0.5).unwrap();
        let d = Image::constant(16, 16, 0.6).unwrap();
        let v = ssim(&c, &d, &cfg).unwrap();
        assert!((v - ssim_oracle(&c, &d)).abs() < 1e-6);
        // luminance term only: (2·0.3 + C1) / (0.25 + 0.36 + C1)
        assert!((v - (0.6 + 1e-4) / (0.61 + 1e-4)).abs() < 1e-9);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(100))]

        #[test]
        fn ssim_is_bounded_and_symmetric(seed in 0u64..100_000, h in 11usize..24, w in 11usize..24) {
            let cfg = SsimConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(h, w, &mut rng);
            let b = random_image(h, w, &mut rng);
            let ab = ssim(&a, &b, &cfg).unwrap();
            proptest::prop_assert!((-1.0..=1.0).contains(&ab));
            proptest::prop_assert!((ab - ssim(&b, &a, &cfg).unwrap()).abs() < 1e-12);
            proptest::prop_assert_eq!(ssim(&a, &a, &cfg).unwrap(), 1.0);
        }
    }

    #[test]
    fn ssim_rejects_mismatch_and_tiny_images() {
        let cfg = SsimConfig::default();
        let a = Image::constant(16, 16, 0.5).unwrap();
        assert!(matches!(ssim(&a, &Image::constant(16, 24, 0.5).unwrap(), &cfg), Err(Error::InvalidInput(_))));
        let small = Image::constant(8, 8, 0.5).unwrap();
        assert!(ssim(&small, &small, &cfg).is_err());
    }

    #[test]
    fn perceptual_distance_grows_with_noise() {
        let enc = Encoder::build(EncoderProfile::toy(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = Image::from_fn(32, 32, |(c, y, x)| 0.2 + 0.6 * ((x + 2 * y + c) % 7) as f64 / 7.0).unwrap();
        let noise = Array3::from_shape_fn((3, 32, 32), |_| rng.random::<f64>() - 0.5);
        assert_eq!(perceptual_distance(&base, &base, &enc).unwrap(), 0.0);
        let mut last = 0.0;
        for amp in [0.05, 0.15, 0.4] {
            let noisy = Image::from_clamped(base.data() + &(&noise * amp)).unwrap();
            let d = perceptual_distance(&base, &noisy, &enc).unwrap();
            assert!(d > last, "amp {amp}: {d} <= {last}");
            last = d;
        }
    }

    #[test]
    fn hstack_places_panels() {
        let a = Image::constant(8, 8, 0.0).unwrap();
        let b = Image::constant(8, 16, 1.0).unwrap();
        let s = hstack(&[a, b]).unwrap();
        assert_eq!(s.width(), 24);
        assert_eq!(s.data()[[0, 0, 7]], 0.0);
        assert_eq!(s.data()[[2, 7, 8]], 1.0);
    }

    #[test]
    fn ablation_variants_toggle_one_thing_each() {
        let base = TrainConfig::new(crate::encoder::ProfileKind::Toy, "d", "s");
        let v = ablation_variants(&base);
        assert_eq!(v.len(), 7);
        assert_eq!(v[2].1.weights.lambda1, 0.0);
        assert_eq!(v[2].1.weights.lambda2, 1000.0);
        assert_eq!(v[5].1.fusion, Fusion::Concat);
        assert!(!v[6].1.use_coarse);
        assert!(v[6].1.out_dir.ends_with("ablate/no_coarse"));
    }
}
