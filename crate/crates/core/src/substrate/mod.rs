//! Numeric and I/O foundation shared by every network stage.

pub mod dataset;
pub mod gradcheck;
pub mod image;
pub mod linalg;
pub mod tensor;

pub use dataset::DatasetCursor;
pub use gradcheck::{finite_diff_grad, finite_diff_grad_array};
pub use image::{downsample2, load_image, resize, save_image, Image};
pub use linalg::{covariance, sym_eig, SymEig};
pub use tensor::FeatureMap;
