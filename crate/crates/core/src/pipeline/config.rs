use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderProfile, ProfileKind};
use crate::error::{Error, Result};
use crate::losses::{LayerAssignment, LossWeights};
use crate::nn::AdamConfig;
use crate::ssf::Fusion;

/// TOML keys as written; absent sizes and iteration counts follow the profile.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    profile: ProfileKind,
    content_root: PathBuf,
    style_image: PathBuf,
    image_size: Option<usize>,
    #[serde(default = "one")]
    batch_size: usize,
    #[serde(default)]
    adam: AdamConfig,
    coarse_iters: Option<usize>,
    fine_iters: Option<usize>,
    #[serde(default)]
    weights: LossWeights,
    #[serde(default)]
    layers: LayerAssignment,
    #[serde(default)]
    fusion: Fusion,
    #[serde(default = "yes")]
    use_coarse: bool,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_checkpoint_every")]
    checkpoint_every: usize,
    #[serde(default = "one")]
    log_every: usize,
    #[serde(default = "default_out_dir")]
    out_dir: PathBuf,
    #[serde(default = "default_remd_samples")]
    remd_max_samples: usize,
    coarse_checkpoint: Option<PathBuf>,
    encoder_weights: Option<PathBuf>,
    #[serde(default)]
    encoder_seed: u64,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_checkpoint_every() -> usize {
    1000
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_remd_samples() -> usize {
    1024
}

/// Validated training configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub profile: ProfileKind,
    pub content_root: PathBuf,
    pub style_image: PathBuf,
    /// Fine-stage side length; the coarse stage trains at half of it.
    pub image_size: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub coarse_iters: usize,
    pub fine_iters: usize,
    pub weights: LossWeights,
    pub layers: LayerAssignment,
    pub fusion: Fusion,
    pub use_coarse: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub out_dir: PathBuf,
    pub remd_max_samples: usize,
    pub coarse_checkpoint: Option<PathBuf>,
    /// Required by the full profile.
    pub encoder_weights: Option<PathBuf>,
    /// Seeds the toy encoder.
    pub encoder_seed: u64,
}

impl TrainConfig {
    /// Defaults for `profile` with everything else unset.
    pub fn new(profile: ProfileKind, content_root: impl Into<PathBuf>, style_image: impl Into<PathBuf>) -> Self {
        let (image_size, coarse_iters, fine_iters) = profile_defaults(profile);
        Self {
            profile,
            content_root: content_root.into(),
            style_image: style_image.into(),
            image_size,
            batch_size: 1,
            adam: AdamConfig::default(),
            coarse_iters,
            fine_iters,
            weights: LossWeights::default(),
            layers: LayerAssignment::default(),
            fusion: Fusion::Ssf,
            use_coarse: true,
            seed: 0,
            checkpoint_every: default_checkpoint_every(),
            log_every: 1,
            out_dir: default_out_dir(),
            remd_max_samples: default_remd_samples(),
            coarse_checkpoint: None,
            encoder_weights: None,
            encoder_seed: 0,
        }
    }

    /// Parses TOML; relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let (size, coarse, fine) = profile_defaults(raw.profile);
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base_dir.join(p) };
        let cfg = Self {
            profile: raw.profile,
            content_root: resolve(raw.content_root),
            style_image: resolve(raw.style_image),
            image_size: raw.image_size.unwrap_or(size),
            batch_size: raw.batch_size,
            adam: raw.adam,
            coarse_iters: raw.coarse_iters.unwrap_or(coarse),
            fine_iters: raw.fine_iters.unwrap_or(fine),
            weights: raw.weights,
            layers: raw.layers,
            fusion: raw.fusion,
            use_coarse: raw.use_coarse,
            seed: raw.seed,
            checkpoint_every: raw.checkpoint_every,
            log_every: raw.log_every,
            out_dir: resolve(raw.out_dir),
            remd_max_samples: raw.remd_max_samples,
            coarse_checkpoint: raw.coarse_checkpoint.map(resolve),
            encoder_weights: raw.encoder_weights.map(resolve),
            encoder_seed: raw.encoder_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!("batch_size must be 1, got {}", self.batch_size)));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::Config("checkpoint_every and log_every must be positive".into()));
        }
        if self.remd_max_samples == 0 {
            return Err(Error::Config("remd_max_samples must be positive".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("invalid adam settings {a:?}")));
        }
        self.weights.validate()?;
        if self.profile == ProfileKind::Full && self.encoder_weights.is_none() {
            return Err(Error::Config("the full profile needs `encoder_weights`".into()));
        }
        Ok(())
    }

    pub fn encoder_profile(&self) -> EncoderProfile {
        match (self.profile, &self.encoder_weights) {
            (ProfileKind::Full, Some(p)) => EncoderProfile::full(p.clone()),
            (ProfileKind::Full, None) => EncoderProfile::full_seeded(self.encoder_seed),
            (ProfileKind::Toy, _) => EncoderProfile::toy(self.encoder_seed),
        }
    }

    pub fn coarse_checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("coarse.nta")
    }

    pub fn fine_checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("fine.nta")
    }

    pub fn coarse_log_path(&self) -> PathBuf {
        self.out_dir.join("coarse_loss.csv")
    }

    pub fn fine_log_path(&self) -> PathBuf {
        self.out_dir.join("fine_loss.csv")
    }
}

/// `(image_size, coarse_iters, fine_iters)`.
fn profile_defaults(p: ProfileKind) -> (usize, usize, usize) {
    match p {
        ProfileKind::Full => (512, 40_000, 15_000),
        ProfileKind::Toy => (128, 2_000, 1_500),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toy_config_takes_profile_defaults() {
        let cfg = TrainConfig::from_toml_str(
            "profile = \"toy\"\ncontent_root = \"data\"\nstyle_image = \"s.png\"\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.image_size, 128);
        assert_eq!((cfg.coarse_iters, cfg.fine_iters), (2000, 1500));
        assert_eq!(cfg.content_root, PathBuf::from("/base/data"));
        assert_eq!(cfg.weights, LossWeights::default());
        assert_eq!(cfg.adam.lr, 1e-4);
        assert!(cfg.use_coarse);
        assert_eq!(cfg, TrainConfig { content_root: "/base/data".into(), style_image: "/base/s.png".into(), out_dir: "/base/runs".into(), ..TrainConfig::new(ProfileKind::Toy, "", "") });
    }

    #[test]
    fn full_config_overrides() {
        let text = r#"
profile = "full"
content_root = "/coco"
style_image = "/style.jpg"
encoder_weights = "vgg.nta"
fusion = "concat"
use_coarse = false
seed = 7

[adam]
lr = 2e-4

[weights]
lambda1 = 0.0

[layers]
gram = ["ReLU_1_2"]
"#;
        let cfg = TrainConfig::from_toml_str(text, Path::new("/b")).unwrap();
        assert_eq!(cfg.image_size, 512);
        assert_eq!(cfg.fine_iters, 15_000);
        assert_eq!(cfg.fusion, Fusion::Concat);
        assert!(!cfg.use_coarse);
        assert_eq!(cfg.adam.lr, 2e-4);
        assert_eq!(cfg.adam.beta2, 0.999);
        assert_eq!(cfg.weights.lambda1, 0.0);
        assert_eq!(cfg.weights.lambda2, 1000.0);
        assert_eq!(cfg.layers.gram.len(), 1);
        assert_eq!(cfg.encoder_weights, Some(PathBuf::from("/b/vgg.nta")));
    }

    #[test]
    fn rejects_bad_configs() {
        let base = "content_root = \"d\"\nstyle_image = \"s\"\n";
        for extra in [
            "profile = \"toy\"\nimage_size = 120\n",
            "profile = \"toy\"\nbatch_size = 4\n",
            "profile = \"toy\"\nunknown_key = 1\n",
            "profile = \"huge\"\n",
            "profile = \"full\"\n",
            "profile = \"toy\"\n[weights]\nalpha = -1.0\n",
        ] {
            let err = TrainConfig::from_toml_str(&format!("{extra}{base}"), Path::new(".")).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{extra}: {err}");
            assert_eq!(err.exit_code(), 2);
        }
    }
}
