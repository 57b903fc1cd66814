//! RGB images in `[0, 1]`, stored channel-major like feature maps.

use std::path::Path;

use ndarray::Array3;

use super::tensor::FeatureMap;
use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 8;

/// A `3 × h × w` picture with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::InvalidInput(format!("images have 3 channels, got {c}")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::InvalidInput(format!(
                "images must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}"
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidInput("image values must be finite and in [0, 1]".into()));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    /// Clamps raw network output into `[0, 1]`. Non-finite values are rejected.
    pub fn from_clamped(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image output contains non-finite values".into()));
        }
        Self::new(data.mapv(|v| v.clamp(0.0, 1.0)))
    }

    pub fn from_fn(h: usize, w: usize, f: impl FnMut((usize, usize, usize)) -> f64) -> Result<Self> {
        Self::new(Array3::from_shape_fn((3, h, w), f))
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((3, h, w), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }

    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap::from_array_unchecked(self.data.clone())
    }

    /// Per-pixel Rec. 601 luma.
    pub fn luminance(&self) -> ndarray::Array2<f64> {
        let r = self.data.index_axis(ndarray::Axis(0), 0);
        let g = self.data.index_axis(ndarray::Axis(0), 1);
        let b = self.data.index_axis(ndarray::Axis(0), 2);
        &r * 0.299 + &g * 0.587 + &b * 0.114
    }

    /// 8-bit RGB encoding, rounding to nearest.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (self.data[[c, y as usize, x as usize]] * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Result<Self> {
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            (rgb.get_pixel(x as u32, y as u32)[c] as f64).clamp(0.0, 1.0)
        });
        Self::new(data)
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::io(path, e))?;
    Image::from_dynamic(&img)
}

/// Writes an 8-bit PNG.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.to_rgb8()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, e))
}

/// Bilinear resize with half-pixel sample centers.
pub fn resize(img: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidInput("resize target must be positive".into()));
    }
    let (h, w) = (img.height(), img.width());
    if (h, w) == (target_h, target_w) {
        return Ok(img.clone());
    }
    let src = &img.data;
    let axis = |out: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let pos = ((out as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let rows: Vec<_> = (0..target_h).map(|y| axis(y, target_h, h)).collect();
    let cols: Vec<_> = (0..target_w).map(|x| axis(x, target_w, w)).collect();
    let data = Array3::from_shape_fn((3, target_h, target_w), |(c, y, x)| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = src[[c, y0, x0]] * (1.0 - fx) + src[[c, y0, x1]] * fx;
        let bottom = src[[c, y1, x0]] * (1.0 - fx) + src[[c, y1, x1]] * fx;
        (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
    });
    Image::new(data)
}

/// Exact halving by non-overlapping 2×2 averaging.
pub fn downsample2(img: &Image) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "downsample2 needs even dimensions, got {h}x{w}"
        )));
    }
    let src = &img.data;
    let data = Array3::from_shape_fn((3, h / 2, w / 2), |(c, y, x)| {
        let (y, x) = (2 * y, 2 * x);
        0.25 * (src[[c, y, x]] + src[[c, y, x + 1]] + src[[c, y + 1, x]] + src[[c, y + 1, x + 1]])
    });
    // Images smaller than 16 px per side would halve below the minimum size.
    if h / 2 < MIN_SIDE || w / 2 < MIN_SIDE {
        return Err(Error::InvalidInput(format!(
            "downsample2 of {h}x{w} falls below the minimum image size"
        )));
    }
    Image::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn png_round_trip_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = random_image(16, 16, 9);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        let diff = img
            .data()
            .iter()
            .zip(back.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1.0 / 255.0);
    }

    #[test]
    fn grayscale_is_broadcast() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let gray = image::GrayImage::from_fn(10, 12, |x, y| image::Luma([(x * 20 + y) as u8]));
        gray.save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!((img.height(), img.width()), (12, 10));
        for y in 0..12 {
            for x in 0..10 {
                let v = img.data()[[0, y, x]];
                assert_eq!(v, img.data()[[1, y, x]]);
                assert_eq!(v, img.data()[[2, y, x]]);
            }
        }
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        save_image(&random_image(32, 32, 1), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_image(&path) {
            Err(Error::Io { path: p, .. }) => assert_eq!(p, path),
            other => panic!("expected I/O error, got {other:?}"),
        }
        assert!(matches!(load_image(dir.path().join("missing.png")), Err(Error::Io { .. })));
    }

    #[test]
    fn downsample_examples() {
        let half = downsample2(&Image::constant(16, 16, 0.5).unwrap()).unwrap();
        assert_eq!((half.height(), half.width()), (8, 8));
        assert!(half.data().iter().all(|&v| v == 0.5));

        // each 2x2 block holding (0, 0, 1, 1) averages to 0.5
        let striped = Image::from_fn(16, 16, |(_, y, _)| (y % 2) as f64).unwrap();
        assert!(downsample2(&striped).unwrap().data().iter().all(|&v| v == 0.5));

        let big = Image::constant(512, 512, 0.25).unwrap();
        let small = downsample2(&big).unwrap();
        assert_eq!((small.height(), small.width()), (256, 256));

        let odd = Image::constant(17, 16, 0.1).unwrap();
        assert!(matches!(downsample2(&odd), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn resize_keeps_constants_and_shape() {
        let img = Image::constant(20, 30, 0.3).unwrap();
        let r = resize(&img, 64, 48).unwrap();
        assert_eq!((r.height(), r.width()), (64, 48));
        assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
        assert!(resize(&img, 0, 4).is_err());
    }

    proptest::proptest! {
        #[test]
        fn downsample_preserves_channel_means(seed in 0u64..500) {
            let img = random_image(16, 24, seed);
            let half = downsample2(&img).unwrap();
            for c in 0..3 {
                let a = img.data().index_axis(ndarray::Axis(0), c).mean().unwrap();
                let b = half.data().index_axis(ndarray::Axis(0), c).mean().unwrap();
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
