//! Frozen VGG-19-topology feature extractor, truncated after `ReLU_4_1`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamSet, Var};
use crate::substrate::{FeatureMap, Image};

/// Named encoder activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TapName {
    #[serde(rename = "ReLU_1_1")]
    Relu1_1,
    #[serde(rename = "ReLU_1_2")]
    Relu1_2,
    #[serde(rename = "ReLU_2_1")]
    Relu2_1,
    #[serde(rename = "ReLU_2_2")]
    Relu2_2,
    #[serde(rename = "ReLU_3_1")]
    Relu3_1,
    #[serde(rename = "ReLU_3_3")]
    Relu3_3,
    #[serde(rename = "ReLU_4_1")]
    Relu4_1,
}

impl TapName {
    pub const ALL: [TapName; 7] = [
        TapName::Relu1_1,
        TapName::Relu1_2,
        TapName::Relu2_1,
        TapName::Relu2_2,
        TapName::Relu3_1,
        TapName::Relu3_3,
        TapName::Relu4_1,
    ];

    /// The `ReLU_X_1` taps.
    pub const BLOCK_FIRSTS: [TapName; 4] = [
        TapName::Relu1_1,
        TapName::Relu2_1,
        TapName::Relu3_1,
        TapName::Relu4_1,
    ];

    /// VGG block (1-based) the tap belongs to.
    pub fn block(self) -> usize {
        match self {
            TapName::Relu1_1 | TapName::Relu1_2 => 1,
            TapName::Relu2_1 | TapName::Relu2_2 => 2,
            TapName::Relu3_1 | TapName::Relu3_3 => 3,
            TapName::Relu4_1 => 4,
        }
    }

    /// The conv layer whose ReLU output this tap is.
    fn layer(self) -> &'static str {
        match self {
            TapName::Relu1_1 => "conv1_1",
            TapName::Relu1_2 => "conv1_2",
            TapName::Relu2_1 => "conv2_1",
            TapName::Relu2_2 => "conv2_2",
            TapName::Relu3_1 => "conv3_1",
            TapName::Relu3_3 => "conv3_3",
            TapName::Relu4_1 => "conv4_1",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TapName::Relu1_1 => "ReLU_1_1",
            TapName::Relu1_2 => "ReLU_1_2",
            TapName::Relu2_1 => "ReLU_2_1",
            TapName::Relu2_2 => "ReLU_2_2",
            TapName::Relu3_1 => "ReLU_3_1",
            TapName::Relu3_3 => "ReLU_3_3",
            TapName::Relu4_1 => "ReLU_4_1",
        }
    }
}

impl fmt::Display for TapName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TapName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TapName::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown tap `{s}`")))
    }
}

/// Width preset shared by the encoder and both generator networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Full,
    Toy,
}

impl ProfileKind {
    pub fn widths(self) -> [usize; 4] {
        match self {
            ProfileKind::Full => [64, 128, 256, 512],
            ProfileKind::Toy => [8, 16, 32, 64],
        }
    }

    /// Channels of the refined merge branch inside each fusion module.
    pub fn merge_channels(self) -> usize {
        match self {
            ProfileKind::Full => 64,
            ProfileKind::Toy => 16,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProfileKind::Full => "full",
            ProfileKind::Toy => "toy",
        }
    }
}

impl FromStr for ProfileKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ProfileKind::Full),
            "toy" => Ok(ProfileKind::Toy),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WeightSource {
    Seed(u64),
    Archive(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderProfile {
    pub kind: ProfileKind,
    pub source: WeightSource,
}

impl EncoderProfile {
    pub fn toy(seed: u64) -> Self {
        Self {
            kind: ProfileKind::Toy,
            source: WeightSource::Seed(seed),
        }
    }

    pub fn full(archive: impl Into<PathBuf>) -> Self {
        Self {
            kind: ProfileKind::Full,
            source: WeightSource::Archive(archive.into()),
        }
    }

    /// Full-width topology with seeded weights; for shape checks and timing only.
    pub fn full_seeded(seed: u64) -> Self {
        Self {
            kind: ProfileKind::Full,
            source: WeightSource::Seed(seed),
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        self.kind.widths()
    }

    /// Records the profile in checkpoint metadata.
    pub fn write_meta(&self, archive: &mut TensorArchive) {
        archive.set_meta("profile", self.kind.as_str());
        match &self.source {
            WeightSource::Seed(s) => archive.set_meta("encoder_seed", s),
            WeightSource::Archive(p) => archive.set_meta("encoder_archive", p.display()),
        }
    }

    pub fn from_meta(archive: &TensorArchive) -> Result<Self> {
        let kind: ProfileKind = archive
            .meta("profile")
            .ok_or_else(|| Error::Config("checkpoint has no `profile` metadata".into()))?
            .parse()?;
        let source = if let Some(seed) = archive.meta("encoder_seed") {
            WeightSource::Seed(
                seed.parse()
                    .map_err(|_| Error::Config(format!("bad encoder_seed `{seed}`")))?,
            )
        } else if let Some(path) = archive.meta("encoder_archive") {
            WeightSource::Archive(PathBuf::from(path))
        } else {
            return Err(Error::Config("checkpoint does not record its encoder weights".into()));
        };
        Ok(Self { kind, source })
    }
}

/// `(layer name, input channels, output channels)` in forward order.
fn layer_plan(widths: [usize; 4]) -> Vec<(&'static str, usize, usize)> {
    let [w1, w2, w3, w4] = widths;
    vec![
        ("conv1_1", 3, w1),
        ("conv1_2", w1, w1),
        ("conv2_1", w1, w2),
        ("conv2_2", w2, w2),
        ("conv3_1", w2, w3),
        ("conv3_2", w3, w3),
        ("conv3_3", w3, w3),
        ("conv3_4", w3, w3),
        ("conv4_1", w3, w4),
    ]
}

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Immutable feature extractor.
#[derive(Clone, Debug)]
pub struct Encoder {
    profile: EncoderProfile,
    params: ParamSet,
}

impl Encoder {
    pub fn build(profile: EncoderProfile) -> Result<Self> {
        let widths = profile.widths();
        let mut params = ParamSet::new();
        match &profile.source {
            WeightSource::Seed(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                for (name, cin, cout) in layer_plan(widths) {
                    params.init_conv(name, cout, cin, &mut rng);
                }
            }
            WeightSource::Archive(path) => {
                let archive = TensorArchive::read(path)?;
                for (name, cin, cout) in layer_plan(widths) {
                    params.insert(format!("{name}.weight"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[cout, cin, 3, 3])));
                    params.insert(format!("{name}.bias"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[cout])));
                }
                params.load_from(&archive).map_err(|e| match e {
                    Error::Load { layer, reason } => Error::Load {
                        layer: layer.trim_end_matches(".weight").trim_end_matches(".bias").to_string(),
                        reason,
                    },
                    other => other,
                })?;
            }
        }
        Ok(Self { profile, params })
    }

    pub fn profile(&self) -> &EncoderProfile {
        &self.profile
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn widths(&self) -> [usize; 4] {
        self.profile.widths()
    }

    pub fn tap_channels(&self, tap: TapName) -> usize {
        self.widths()[tap.block() - 1]
    }

    fn check_input(h: usize, w: usize) -> Result<()> {
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!(
                "encoder input must have sides divisible by 8, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Records the encoder on `g`, starting from a `3×h×w` variable.
    ///
    /// Only the layers up to the deepest requested tap are evaluated.
    pub fn forward_graph(&self, g: &mut Graph, input: Var, taps: &[TapName]) -> Result<BTreeMap<TapName, Var>> {
        let shape = g.value(input).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::InvalidInput(format!("encoder expects a 3×h×w input, got {shape:?}")));
        }
        Self::check_input(shape[1], shape[2])?;
        let deepest = taps.iter().map(|t| layer_index(t.layer())).max();
        let Some(deepest) = deepest else {
            return Ok(BTreeMap::new());
        };

        let bound = self.params.bind(g, false);
        let mut x = input;
        if self.profile.kind == ProfileKind::Full {
            let scale: Vec<f64> = IMAGENET_STD.iter().map(|s| 1.0 / s).collect();
            let shift: Vec<f64> = IMAGENET_MEAN.iter().zip(&IMAGENET_STD).map(|(m, s)| -m / s).collect();
            x = g.channel_affine(x, &scale, &shift);
        }
        let mut out = BTreeMap::new();
        for (i, (name, _, _)) in layer_plan(self.widths()).into_iter().enumerate() {
            if i > deepest {
                break;
            }
            if matches!(name, "conv2_1" | "conv3_1" | "conv4_1") {
                x = g.max_pool2(x);
            }
            let (w, b) = bound.weight_bias(name);
            x = g.conv2d(x, w, b, 1);
            x = g.relu(x);
            for &t in taps {
                if t.layer() == name {
                    out.insert(t, x);
                }
            }
        }
        Ok(out)
    }

    /// Features of an arbitrary `3×h×w` map (not necessarily in `[0, 1]`).
    pub fn extract_map(&self, input: &FeatureMap, taps: &[TapName]) -> Result<BTreeMap<TapName, FeatureMap>> {
        let mut g = Graph::new();
        let x = g.constant(input.data().clone().into_dyn());
        let vars = self.forward_graph(&mut g, x, taps)?;
        Ok(vars
            .into_iter()
            .map(|(t, v)| (t, FeatureMap::from_array_unchecked(g.value3(v))))
            .collect())
    }

    pub fn extract(&self, image: &Image, taps: &[TapName]) -> Result<BTreeMap<TapName, FeatureMap>> {
        self.extract_map(&image.to_feature_map(), taps)
    }

    pub fn extract_one(&self, image: &Image, tap: TapName) -> Result<FeatureMap> {
        Ok(self.extract(image, &[tap])?.remove(&tap).expect("requested tap"))
    }
}

fn layer_index(name: &str) -> usize {
    layer_plan([1, 1, 1, 1])
        .iter()
        .position(|(n, _, _)| *n == name)
        .expect("known layer")
}

/// Layer names the encoder expects in a weight archive.
pub fn expected_layers() -> Vec<&'static str> {
    layer_plan([1, 1, 1, 1]).into_iter().map(|(n, _, _)| n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn toy_shapes_follow_halving_law() {
        let enc = Encoder::build(EncoderProfile::toy(7)).unwrap();
        let img = random_image(32, 48, 1);
        let feats = enc.extract(&img, &TapName::ALL).unwrap();
        for (tap, f) in &feats {
            let scale = 1 << (tap.block() - 1);
            assert_eq!(f.shape(), (enc.tap_channels(*tap), 32 / scale, 48 / scale));
            assert!(f.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn full_profile_shapes() {
        let enc = Encoder::build(EncoderProfile::full_seeded(0)).unwrap();
        assert_eq!(enc.params().get("conv1_1.weight").unwrap().shape(), &[64, 3, 3, 3]);
        let img = random_image(256, 256, 2);
        let feats = enc.extract(&img, &[TapName::Relu2_1, TapName::Relu4_1]).unwrap();
        assert_eq!(feats[&TapName::Relu4_1].shape(), (512, 32, 32));
        assert_eq!(feats[&TapName::Relu2_1].shape(), (128, 128, 128));
    }

    #[test]
    fn deterministic_and_superset_consistent() {
        let a = Encoder::build(EncoderProfile::toy(7)).unwrap();
        let b = Encoder::build(EncoderProfile::toy(7)).unwrap();
        let img = random_image(16, 16, 3);
        let one = a.extract(&img, &[TapName::Relu2_1]).unwrap();
        let all = b.extract(&img, &TapName::ALL).unwrap();
        assert_eq!(one[&TapName::Relu2_1], all[&TapName::Relu2_1]);
        assert_eq!(a.extract(&img, &TapName::ALL).unwrap(), all);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let enc = Encoder::build(EncoderProfile::toy(1)).unwrap();
        let img = random_image(20, 16, 0);
        assert!(matches!(enc.extract(&img, &[TapName::Relu1_1]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn archive_missing_layer_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.nta");
        let enc = Encoder::build(EncoderProfile::full_seeded(3)).unwrap();
        let mut archive = TensorArchive::new();
        for (name, t) in enc.params().iter() {
            if !name.starts_with("conv3_1") {
                archive.insert(name, t.clone());
            }
        }
        archive.write(&path).unwrap();
        match Encoder::build(EncoderProfile::full(&path)) {
            Err(Error::Load { layer, .. }) => assert_eq!(layer, "conv3_1"),
            other => panic!("expected load error, got {other:?}"),
        }
        let mut archive = TensorArchive::new();
        enc.params().write_into(&mut archive);
        archive.write(&path).unwrap();
        let loaded = Encoder::build(EncoderProfile::full(&path)).unwrap();
        assert!(loaded.params().bit_identical(enc.params()));
    }
}
