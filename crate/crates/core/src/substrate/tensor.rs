use ndarray::{Array3, ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

/// A `c × h × w` activation tensor in channel-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Array3<f64>);

impl FeatureMap {
    /// Wraps an array, checking that every dimension is non-empty and every value finite.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!(
                "feature map dimensions must be positive, got {c}x{h}x{w}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature map contains non-finite values".into()));
        }
        Ok(Self(data.as_standard_layout().into_owned()))
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self(Array3::zeros((c, h, w)))
    }

    pub fn from_vec(c: usize, h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        let data = Array3::from_shape_vec((c, h, w), values)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        Self::new(data)
    }

    pub fn from_fn(c: usize, h: usize, w: usize, f: impl FnMut((usize, usize, usize)) -> f64) -> Self {
        Self(Array3::from_shape_fn((c, h, w), f))
    }

    /// Wraps without validation; used on values produced by internal kernels.
    pub(crate) fn from_array_unchecked(data: Array3<f64>) -> Self {
        Self(data.as_standard_layout().into_owned())
    }

    pub fn channels(&self) -> usize {
        self.0.dim().0
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    /// Number of spatial positions `h · w`.
    pub fn positions(&self) -> usize {
        self.height() * self.width()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    /// The map viewed as a `c × (h·w)` matrix.
    pub fn as_matrix(&self) -> ArrayView2<'_, f64> {
        let (c, h, w) = self.shape();
        self.0
            .view()
            .into_shape_with_order((c, h * w))
            .expect("feature maps are kept in standard layout")
    }

    pub fn as_matrix_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let (c, h, w) = self.shape();
        self.0
            .view_mut()
            .into_shape_with_order((c, h * w))
            .expect("feature maps are kept in standard layout")
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl From<FeatureMap> for Array3<f64> {
    fn from(f: FeatureMap) -> Self {
        f.0
    }
}
