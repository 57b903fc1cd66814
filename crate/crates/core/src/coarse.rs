//! Half-resolution stage: encoder, WCT at `ReLU_4_1`, and a mirrored
//! reconstruction decoder whose intermediate activations feed the fine stage.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::TensorArchive;
use crate::encoder::{Encoder, EncoderProfile, ProfileKind, TapName};
use crate::error::{Error, Result};
use crate::nn::{Bound, Graph, ParamSet, Var};
use crate::substrate::{FeatureMap, Image};
use crate::wct::{wct_transform_with, StyleStats, WctConfig};

pub const DECODER_LAYERS: usize = 9;

/// Where each decoder conv sits: `(input channels, output channels, upsample before it)`.
fn decoder_plan(widths: [usize; 4]) -> [(usize, usize, bool); DECODER_LAYERS] {
    let [w1, w2, w3, w4] = widths;
    [
        (w4, w3, false),
        (w3, w3, true),
        (w3, w3, false),
        (w3, w3, false),
        (w3, w2, false),
        (w2, w2, true),
        (w2, w1, false),
        (w1, w1, true),
        (w1, 3, false),
    ]
}

// The three taps are read after these layers (1-based), i.e. right before
// the second and third upsampling and after the final conv.
const TAP_AFTER: [usize; 3] = [5, 7, 9];

/// Multi-level reconstructed stylized features handed to the fine stage.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseTaps {
    /// `w2 × h/4 × w/4` for a coarse input of `h × w`.
    pub r1: FeatureMap,
    /// `w1 × h/2 × w/2`.
    pub r2: FeatureMap,
    /// `3 × h × w`.
    pub r3: FeatureMap,
}

impl CoarseTaps {
    pub fn as_array(&self) -> [&FeatureMap; 3] {
        [&self.r1, &self.r2, &self.r3]
    }
}

/// Reconstruction decoder mirroring the encoder from `ReLU_4_1` down to RGB.
#[derive(Clone, Debug)]
pub struct CoarseDecoder {
    kind: ProfileKind,
    params: ParamSet,
}

impl CoarseDecoder {
    pub fn new(kind: ProfileKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (k, (cin, cout, _)) in decoder_plan(kind.widths()).into_iter().enumerate() {
            params.init_conv(&format!("dec_conv{}", k + 1), cout, cin, &mut rng);
        }
        Self { kind, params }
    }

    pub fn kind(&self) -> ProfileKind {
        self.kind
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn tap_channels(&self) -> [usize; 3] {
        let [w1, w2, _, _] = self.kind.widths();
        [w2, w1, 3]
    }

    /// Records the decoder on `g`; returns the three tap variables.
    pub fn forward_graph(&self, g: &mut Graph, bound: &Bound, feature: Var) -> [Var; 3] {
        let mut x = feature;
        let mut taps = Vec::with_capacity(3);
        for (k, (_, _, upsample)) in decoder_plan(self.kind.widths()).into_iter().enumerate() {
            let layer = k + 1;
            if upsample {
                x = g.upsample2(x);
            }
            let (w, b) = bound.weight_bias(&format!("dec_conv{layer}"));
            x = g.conv2d(x, w, b, 1);
            if layer != DECODER_LAYERS {
                x = g.relu(x);
            }
            if TAP_AFTER.contains(&layer) {
                taps.push(x);
            }
        }
        [taps[0], taps[1], taps[2]]
    }

    /// Decodes a `ReLU_4_1` feature without recording gradients.
    pub fn decode(&self, feature: &FeatureMap) -> Result<CoarseTaps> {
        let [_, _, _, w4] = self.kind.widths();
        if feature.channels() != w4 {
            return Err(Error::InvalidInput(format!(
                "decoder expects {w4} channels, got {}",
                feature.channels()
            )));
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(feature.data().clone().into_dyn());
        let [a, b, c] = self.forward_graph(&mut g, &bound, x);
        Ok(CoarseTaps {
            r1: FeatureMap::from_array_unchecked(g.value3(a)),
            r2: FeatureMap::from_array_unchecked(g.value3(b)),
            r3: FeatureMap::from_array_unchecked(g.value3(c)),
        })
    }
}

fn check_coarse_input(img: &Image, what: &str) -> Result<()> {
    if img.height() % 8 != 0 || img.width() % 8 != 0 {
        return Err(Error::InvalidInput(format!(
            "coarse {what} image must have sides divisible by 8, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Encoder → WCT at `ReLU_4_1` → decoder, returning the three taps.
pub fn coarse_forward(
    enc: &Encoder,
    dec: &CoarseDecoder,
    content: &Image,
    style: &Image,
    cfg: &WctConfig,
) -> Result<CoarseTaps> {
    check_coarse_input(style, "style")?;
    let stats = StyleStats::from_feature(&enc.extract_one(style, TapName::Relu4_1)?)?;
    coarse_forward_with(enc, dec, content, &stats, cfg)
}

/// [`coarse_forward`] with the style statistics computed beforehand.
pub fn coarse_forward_with(
    enc: &Encoder,
    dec: &CoarseDecoder,
    content: &Image,
    style: &StyleStats,
    cfg: &WctConfig,
) -> Result<CoarseTaps> {
    check_coarse_input(content, "content")?;
    let f_c = enc.extract_one(content, TapName::Relu4_1)?;
    let f_cs = wct_transform_with(&f_c, style, cfg)?;
    dec.decode(&f_cs)
}

/// The coarse stylization as an image at the coarse input resolution.
pub fn coarse_stylize(
    enc: &Encoder,
    dec: &CoarseDecoder,
    content: &Image,
    style: &Image,
    cfg: &WctConfig,
) -> Result<Image> {
    let taps = coarse_forward(enc, dec, content, style, cfg)?;
    Image::from_clamped(taps.r3.into_inner())
}

/// Plain auto-encoding, the forward pass used while training the decoder.
pub fn reconstruct_only(enc: &Encoder, dec: &CoarseDecoder, x: &Image) -> Result<Image> {
    check_coarse_input(x, "content")?;
    let f = enc.extract_one(x, TapName::Relu4_1)?;
    Image::from_clamped(dec.decode(&f)?.r3.into_inner())
}

/// Frozen encoder plus trained decoder, loadable from one checkpoint.
#[derive(Clone, Debug)]
pub struct CoarseNetwork {
    pub encoder: Encoder,
    pub decoder: CoarseDecoder,
}

impl CoarseNetwork {
    pub fn new(encoder: Encoder, decoder: CoarseDecoder) -> Result<Self> {
        if encoder.profile().kind != decoder.kind() {
            return Err(Error::Config("encoder and decoder profiles differ".into()));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn kind(&self) -> ProfileKind {
        self.decoder.kind()
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut archive = TensorArchive::new();
        self.decoder.params.write_into(&mut archive);
        self.encoder.profile().write_meta(&mut archive);
        archive.set_meta("kind", "coarse");
        archive
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        if archive.meta("kind") != Some("coarse") {
            return Err(Error::Config("archive is not a coarse checkpoint".into()));
        }
        let profile = EncoderProfile::from_meta(archive)?;
        let encoder = Encoder::build(profile)?;
        let mut decoder = CoarseDecoder::new(encoder.profile().kind, 0);
        decoder.params.load_from(archive)?;
        Self::new(encoder, decoder)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&TensorArchive::read(path)?)
    }

    pub fn forward(&self, content: &Image, style: &Image, cfg: &WctConfig) -> Result<CoarseTaps> {
        coarse_forward(&self.encoder, &self.decoder, content, style, cfg)
    }

    pub fn style_stats(&self, style: &Image) -> Result<StyleStats> {
        check_coarse_input(style, "style")?;
        StyleStats::from_feature(&self.encoder.extract_one(style, TapName::Relu4_1)?)
    }

    pub fn stylize(&self, content: &Image, style: &Image, cfg: &WctConfig) -> Result<Image> {
        coarse_stylize(&self.encoder, &self.decoder, content, style, cfg)
    }

    pub fn reconstruct(&self, x: &Image) -> Result<Image> {
        reconstruct_only(&self.encoder, &self.decoder, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_| rng.random::<f64>()).unwrap()
    }

    fn toy() -> (Encoder, CoarseDecoder) {
        (Encoder::build(EncoderProfile::toy(1)).unwrap(), CoarseDecoder::new(ProfileKind::Toy, 2))
    }

    #[test]
    fn decoder_has_three_upsamplings() {
        let ups = decoder_plan(ProfileKind::Full.widths()).iter().filter(|l| l.2).count();
        assert_eq!(ups, 3);
        let d = CoarseDecoder::new(ProfileKind::Full, 0);
        assert_eq!(d.params().get("dec_conv1.weight").unwrap().shape(), &[256, 512, 3, 3]);
        assert_eq!(d.params().get("dec_conv9.weight").unwrap().shape(), &[3, 64, 3, 3]);
        assert_eq!(d.tap_channels(), [128, 64, 3]);
    }

    #[test]
    fn tap_shapes_and_determinism() {
        let (enc, dec) = toy();
        let c = random_image(64, 32, 1);
        let s = random_image(48, 40, 2);
        let cfg = WctConfig::default();
        let taps = coarse_forward(&enc, &dec, &c, &s, &cfg).unwrap();
        assert_eq!(taps.r1.shape(), (16, 16, 8));
        assert_eq!(taps.r2.shape(), (8, 32, 16));
        assert_eq!(taps.r3.shape(), (3, 64, 32));
        assert_eq!(taps, coarse_forward(&enc, &dec, &c, &s, &cfg).unwrap());
    }

    #[test]
    fn self_style_matches_plain_reconstruction() {
        let (enc, dec) = toy();
        // 64×64 gives 8×8 = 64 positions at ReLU_4_1 against 64 channels; use
        // 128 so the covariance is full rank.
        let x = random_image(128, 128, 3);
        let taps = coarse_forward(&enc, &dec, &x, &x, &WctConfig::default()).unwrap();
        let plain = dec.decode(&enc.extract_one(&x, TapName::Relu4_1).unwrap()).unwrap();
        for (a, b) in taps.as_array().iter().zip(plain.as_array()) {
            let num: f64 = a.data().iter().zip(b.data().iter()).map(|(x, y)| (x - y).powi(2)).sum();
            let den: f64 = b.data().iter().map(|y| y * y).sum();
            assert!((num / den).sqrt() < 1e-3);
        }
    }

    #[test]
    fn stylize_and_reconstruct_outputs_are_images() {
        let (enc, dec) = toy();
        let x = random_image(32, 32, 4);
        let out = coarse_stylize(&enc, &dec, &x, &random_image(32, 32, 5), &WctConfig::default()).unwrap();
        assert_eq!((out.height(), out.width()), (32, 32));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let r = reconstruct_only(&enc, &dec, &x).unwrap();
        assert_eq!(r, reconstruct_only(&enc, &dec, &x).unwrap());
        assert!(reconstruct_only(&enc, &dec, &random_image(36, 32, 0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (enc, dec) = toy();
        let net = CoarseNetwork::new(enc, dec).unwrap();
        let back = CoarseNetwork::from_archive(&TensorArchive::from_bytes(&net.to_archive().to_bytes()).unwrap()).unwrap();
        assert!(back.decoder.params().bit_identical(net.decoder.params()));
        let x = random_image(16, 16, 9);
        assert_eq!(net.reconstruct(&x).unwrap(), back.reconstruct(&x).unwrap());
    }
}
