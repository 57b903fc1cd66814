//! Single-level whitening and coloring transform on encoder features.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::{covariance, sym_eig, FeatureMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WctConfig {
    /// Lower bound applied to covariance eigenvalues before the inverse square root.
    pub eig_floor: f64,
}

impl Default for WctConfig {
    fn default() -> Self {
        Self { eig_floor: 1e-5 }
    }
}

impl WctConfig {
    fn validate(&self) -> Result<()> {
        if !(self.eig_floor > 0.0) {
            return Err(Error::Config(format!("eig_floor must be positive, got {}", self.eig_floor)));
        }
        Ok(())
    }
}

/// Mean and coloring matrix `E·Λ^½·Eᵀ` of a style feature.
///
/// Computing these once lets a fixed style be applied to many contents.
#[derive(Clone, Debug)]
pub struct StyleStats {
    pub mean: Array1<f64>,
    pub coloring: Array2<f64>,
}

impl StyleStats {
    pub fn from_feature(f_s: &FeatureMap) -> Result<Self> {
        let (mean, cov) = covariance(f_s);
        let eig = sym_eig(&cov)?;
        Ok(Self {
            mean,
            coloring: eig.spectral_map(|l| l.max(0.0).sqrt()),
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// ZCA whitening: `E·max(λ, floor)^(-½)·Eᵀ·(f − mean)`.
pub fn whiten(f_c: &FeatureMap, cfg: &WctConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    if f_c.positions() < 2 {
        return Err(Error::InvalidInput("whitening needs at least two spatial positions".into()));
    }
    let (mean, cov) = covariance(f_c);
    let eig = sym_eig(&cov)?;
    let floor = cfg.eig_floor;
    let w = eig.spectral_map(|l| 1.0 / l.max(floor).sqrt());
    let centered = &f_c.as_matrix() - &mean.view().insert_axis(Axis(1));
    let out = w.dot(&centered);
    let (c, h, wd) = f_c.shape();
    Ok(FeatureMap::from_array_unchecked(out.into_shape_with_order((c, h, wd)).unwrap()))
}

/// Coloring with precomputed style statistics.
pub fn color_with(f_white: &FeatureMap, style: &StyleStats) -> Result<FeatureMap> {
    if f_white.channels() != style.channels() {
        return Err(Error::InvalidInput(format!(
            "coloring channel mismatch: content has {}, style has {}",
            f_white.channels(),
            style.channels()
        )));
    }
    let out = style.coloring.dot(&f_white.as_matrix()) + &style.mean.view().insert_axis(Axis(1));
    let (c, h, w) = f_white.shape();
    Ok(FeatureMap::from_array_unchecked(out.into_shape_with_order((c, h, w)).unwrap()))
}

/// `E_s·max(λ_s, 0)^½·E_sᵀ·f_white + mean_s`.
pub fn color(f_white: &FeatureMap, f_s: &FeatureMap, cfg: &WctConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    if f_white.channels() != f_s.channels() {
        return Err(Error::InvalidInput(format!(
            "coloring channel mismatch: content has {}, style has {}",
            f_white.channels(),
            f_s.channels()
        )));
    }
    color_with(f_white, &StyleStats::from_feature(f_s)?)
}

/// Whitens the content feature and colors it with the style statistics.
pub fn wct_transform(f_c: &FeatureMap, f_s: &FeatureMap, cfg: &WctConfig) -> Result<FeatureMap> {
    if f_c.channels() != f_s.channels() {
        return Err(Error::InvalidInput(format!(
            "wct channel mismatch: content has {}, style has {}",
            f_c.channels(),
            f_s.channels()
        )));
    }
    color(&whiten(f_c, cfg)?, f_s, cfg)
}

pub fn wct_transform_with(f_c: &FeatureMap, style: &StyleStats, cfg: &WctConfig) -> Result<FeatureMap> {
    color_with(&whiten(f_c, cfg)?, style)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_feature(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // mixing gives correlated channels with a non-trivial covariance
        let base = FeatureMap::from_fn(c, h, w, |_| rng.random::<f64>() * 2.0);
        let mix = Array2::from_shape_fn((c, c), |_| rng.random::<f64>() - 0.3);
        let out = mix.dot(&base.as_matrix()).into_shape_with_order((c, h, w)).unwrap();
        FeatureMap::new(out).unwrap()
    }

    #[test]
    fn white_input_is_a_fixed_point() {
        let f = whiten(&random_feature(4, 8, 8, 1), &WctConfig::default()).unwrap();
        let again = whiten(&f, &WctConfig::default()).unwrap();
        assert!(f.max_abs_diff(&again) < 1e-4);
    }

    #[test]
    fn whitened_covariance_is_identity() {
        let f = whiten(&random_feature(16, 8, 8, 2), &WctConfig::default()).unwrap();
        let (mean, cov) = covariance(&f);
        assert!(mean.iter().all(|m| m.abs() < 1e-9));
        let eye = Array2::<f64>::eye(16);
        assert!(cov.iter().zip(eye.iter()).all(|(a, b)| (a - b).abs() < 1e-3));
    }

    #[test]
    fn degenerate_inputs() {
        let cfg = WctConfig::default();
        let constant = FeatureMap::from_fn(3, 4, 4, |(c, _, _)| c as f64 + 1.0);
        assert!(whiten(&constant, &cfg).unwrap().data().iter().all(|&v| v == 0.0));

        let style = random_feature(3, 5, 5, 3);
        let (mean_s, _) = covariance(&style);
        let out = color(&FeatureMap::zeros(3, 4, 4), &style, &cfg).unwrap();
        for ((c, _, _), v) in out.data().indexed_iter() {
            assert!((v - mean_s[c]).abs() < 1e-12);
        }

        let flat_style = FeatureMap::from_fn(3, 4, 4, |(c, _, _)| 2.0 * c as f64);
        let out = color(&random_feature(3, 4, 4, 4), &flat_style, &cfg).unwrap();
        for ((c, _, _), v) in out.data().indexed_iter() {
            assert!((v - 2.0 * c as f64).abs() < 1e-12);
        }

        let out = wct_transform(&constant, &style, &cfg).unwrap();
        for ((c, _, _), v) in out.data().indexed_iter() {
            assert!((v - mean_s[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn transfers_statistics_and_keeps_content_size() {
        let cfg = WctConfig::default();
        let fc = random_feature(8, 8, 8, 5);
        let fs = random_feature(8, 6, 6, 6);
        let out = wct_transform(&fc, &fs, &cfg).unwrap();
        assert_eq!(out.shape(), (8, 8, 8));
        let (m_out, c_out) = covariance(&out);
        let (m_s, c_s) = covariance(&fs);
        assert!(m_out.iter().zip(m_s.iter()).all(|(a, b)| (a - b).abs() < 1e-3));
        assert!(c_out.iter().zip(c_s.iter()).all(|(a, b)| (a - b).abs() < 1e-3));
    }

    #[test]
    fn self_transfer_is_identity() {
        let f = random_feature(12, 8, 8, 7);
        let out = wct_transform(&f, &f, &WctConfig::default()).unwrap();
        let num: f64 = f.data().iter().zip(out.data().iter()).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = f.data().iter().map(|a| a * a).sum();
        assert!((num / den).sqrt() < 1e-3);
    }

    #[test]
    fn errors() {
        let cfg = WctConfig::default();
        let a = random_feature(3, 4, 4, 0);
        let b = random_feature(4, 4, 4, 0);
        assert!(matches!(wct_transform(&a, &b, &cfg), Err(Error::InvalidInput(_))));
        assert!(matches!(color(&a, &b, &cfg), Err(Error::InvalidInput(_))));
        let single = FeatureMap::zeros(3, 1, 1);
        assert!(whiten(&single, &cfg).is_err());
        assert!(whiten(&a, &WctConfig { eig_floor: 0.0 }).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

        #[test]
        fn whitening_and_transfer_invariants(seed in 0u64..10_000, c in 2usize..10, side in 5usize..10) {
            let cfg = WctConfig::default();
            let fc = random_feature(c, side, side, seed);
            let fs = random_feature(c, side + 1, side - 1, seed ^ 0x5a5a);
            // the invariants are stated for full rank; random mixing is occasionally near singular
            let min_eig = |f: &FeatureMap| sym_eig(&covariance(f).1).unwrap().values.iter().cloned().fold(f64::INFINITY, f64::min);
            proptest::prop_assume!(min_eig(&fc) > 10.0 * cfg.eig_floor && min_eig(&fs) > 10.0 * cfg.eig_floor);
            let white = whiten(&fc, &cfg).unwrap();
            proptest::prop_assert!(white.max_abs_diff(&whiten(&white, &cfg).unwrap()) < 1e-3);

            let out = wct_transform(&fc, &fs, &cfg).unwrap();
            let (m_out, c_out) = covariance(&out);
            let (m_s, c_s) = covariance(&fs);
            proptest::prop_assert!(m_out.iter().zip(m_s.iter()).all(|(a, b)| (a - b).abs() < 1e-3));
            proptest::prop_assert!(c_out.iter().zip(c_s.iter()).all(|(a, b)| (a - b).abs() < 1e-3));

            let same = wct_transform(&fc, &fc, &cfg).unwrap();
            let num: f64 = fc.data().iter().zip(same.data().iter()).map(|(a, b)| (a - b).powi(2)).sum();
            let den: f64 = fc.data().iter().map(|a| a * a).sum();
            proptest::prop_assert!((num / den).sqrt() < 1e-3);
        }
    }
}
