//! Full-resolution stage: strided encoder, residual trunk, and a decoder that
//! fuses one coarse tap before each of its three upsamplings.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::TensorArchive;
use crate::coarse::{CoarseNetwork, CoarseTaps};
use crate::encoder::ProfileKind;
use crate::error::{Error, Result};
use crate::nn::{Bound, Graph, ParamSet, Var};
use crate::ssf::{fuse_graph, Fusion, SsfLayout};
use crate::substrate::{downsample2, FeatureMap, Image};
use crate::wct::WctConfig;

pub const RESIDUAL_BLOCKS: usize = 5;

#[derive(Clone, Debug)]
pub struct FineNetwork {
    kind: ProfileKind,
    fusion: Fusion,
    use_coarse: bool,
    params: ParamSet,
}

impl FineNetwork {
    pub fn new(kind: ProfileKind, fusion: Fusion, use_coarse: bool, seed: u64) -> Self {
        let [w1, w2, w3, w4] = kind.widths();
        let merge = kind.merge_channels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.init_conv("enc_conv1", w1, 3, &mut rng);
        params.init_conv("enc_conv2", w2, w1, &mut rng);
        params.init_conv("enc_conv3", w3, w2, &mut rng);
        params.init_conv("enc_conv4", w4, w3, &mut rng);
        for k in 1..=RESIDUAL_BLOCKS {
            params.init_conv(&format!("res{k}.conv1"), w4, w4, &mut rng);
            params.init_conv(&format!("res{k}.conv2"), w4, w4, &mut rng);
        }
        let stages = [(w4, w3), (w3, w2), (w2, 3)];
        let tap_channels = [w2, w1, 3];
        for (k, ((c_cs, c_out), c_r)) in stages.into_iter().zip(tap_channels).enumerate() {
            let stage = k + 1;
            let c_in = if use_coarse {
                let layout = SsfLayout::new(c_cs, c_r, merge);
                layout.init(&mut params, &format!("ssf{stage}"), &mut rng);
                layout.out_channels()
            } else {
                c_cs
            };
            params.init_conv(&format!("dec_conv{stage}"), c_out, c_in, &mut rng);
        }
        Self {
            kind,
            fusion,
            use_coarse,
            params,
        }
    }

    pub fn kind(&self) -> ProfileKind {
        self.kind
    }

    pub fn fusion(&self) -> Fusion {
        self.fusion
    }

    pub fn uses_coarse(&self) -> bool {
        self.use_coarse
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn check_content(h: usize, w: usize) -> Result<()> {
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::InvalidInput(format!(
                "fine input must have sides divisible by 8, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Checks that each tap matches the decoder stage it feeds.
    pub fn check_taps(&self, h: usize, w: usize, taps: &CoarseTaps) -> Result<()> {
        let [w1, w2, _, _] = self.kind.widths();
        let want = [(w2, h / 8, w / 8), (w1, h / 4, w / 4), (3, h / 2, w / 2)];
        for (stage, (tap, expected)) in taps.as_array().iter().zip(want).enumerate() {
            if tap.shape() != expected {
                return Err(Error::InvalidInput(format!(
                    "coarse tap for decoder stage {} has shape {:?}, expected {:?}",
                    stage + 1,
                    tap.shape(),
                    expected
                )));
            }
        }
        Ok(())
    }

    /// Records the network; `taps` must be given exactly when the network uses coarse features.
    pub fn forward_graph(&self, g: &mut Graph, bound: &Bound, x: Var, taps: Option<[Var; 3]>) -> Var {
        let conv = |g: &mut Graph, x: Var, layer: &str, stride: usize| {
            let (w, b) = bound.weight_bias(layer);
            g.conv2d(x, w, b, stride)
        };
        let mut h = conv(g, x, "enc_conv1", 1);
        h = g.relu(h);
        for (layer, stride) in [("enc_conv2", 2), ("enc_conv3", 2), ("enc_conv4", 2)] {
            h = conv(g, h, layer, stride);
            h = g.relu(h);
        }
        for k in 1..=RESIDUAL_BLOCKS {
            let mut r = conv(g, h, &format!("res{k}.conv1"), 1);
            r = g.relu(r);
            r = conv(g, r, &format!("res{k}.conv2"), 1);
            h = g.add(h, r);
        }
        for stage in 1..=3 {
            if let Some(t) = taps {
                h = fuse_graph(g, bound, &format!("ssf{stage}"), self.fusion, h, t[stage - 1]);
            }
            h = g.upsample2(h);
            h = conv(g, h, &format!("dec_conv{stage}"), 1);
            if stage < 3 {
                h = g.relu(h);
            }
        }
        h
    }

    /// Unclamped network output for a content image and (optional) taps.
    pub fn forward_raw(&self, content: &Image, taps: Option<&CoarseTaps>) -> Result<FeatureMap> {
        let (h, w) = (content.height(), content.width());
        Self::check_content(h, w)?;
        match (self.use_coarse, taps) {
            (true, None) => {
                return Err(Error::Config("network was built to fuse coarse taps but none were given".into()))
            }
            (false, Some(_)) => {
                return Err(Error::Config("network was built without coarse fusion but taps were given".into()))
            }
            _ => {}
        }
        if let Some(t) = taps {
            self.check_taps(h, w, t)?;
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(content.data().clone().into_dyn());
        let tap_vars = taps.map(|t| {
            let [a, b, c] = t.as_array();
            [
                g.constant(a.data().clone().into_dyn()),
                g.constant(b.data().clone().into_dyn()),
                g.constant(c.data().clone().into_dyn()),
            ]
        });
        let out = self.forward_graph(&mut g, &bound, x, tap_vars);
        Ok(FeatureMap::from_array_unchecked(g.value3(out)))
    }

    /// Final stylization, clamped to `[0, 1]`.
    pub fn fine_forward(&self, content: &Image, taps: &CoarseTaps) -> Result<Image> {
        Image::from_clamped(self.forward_raw(content, Some(taps))?.into_inner())
    }

    /// The variant built without coarse fusion.
    pub fn fine_forward_nocoarse(&self, content: &Image) -> Result<Image> {
        if self.use_coarse {
            return Err(Error::Config(
                "fine_forward_nocoarse needs a network built with use_coarse = false".into(),
            ));
        }
        Image::from_clamped(self.forward_raw(content, None)?.into_inner())
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut archive = TensorArchive::new();
        self.params.write_into(&mut archive);
        archive.set_meta("kind", "fine");
        archive.set_meta("profile", self.kind.as_str());
        archive.set_meta("fusion", self.fusion.as_str());
        archive.set_meta("use_coarse", self.use_coarse);
        archive
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        if archive.meta("kind") != Some("fine") {
            return Err(Error::Config("archive is not a fine checkpoint".into()));
        }
        let meta = |k: &str| {
            archive
                .meta(k)
                .ok_or_else(|| Error::Config(format!("fine checkpoint lacks `{k}` metadata")))
        };
        let kind: ProfileKind = meta("profile")?.parse()?;
        let fusion: Fusion = meta("fusion")?.parse()?;
        let use_coarse: bool = meta("use_coarse")?
            .parse()
            .map_err(|_| Error::Config("bad use_coarse metadata".into()))?;
        let mut net = Self::new(kind, fusion, use_coarse, 0);
        net.params.load_from(archive)?;
        Ok(net)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&TensorArchive::read(path)?)
    }
}

/// End-to-end stylization: both images are halved for the coarse stage.
pub fn stylize(coarse: &CoarseNetwork, fine: &FineNetwork, content: &Image, style: &Image) -> Result<Image> {
    if coarse.kind() != fine.kind() {
        return Err(Error::Config(format!(
            "coarse checkpoint is `{}` but fine checkpoint is `{}`",
            coarse.kind().as_str(),
            fine.kind().as_str()
        )));
    }
    for (what, img) in [("content", content), ("style", style)] {
        if img.height() % 16 != 0 || img.width() % 16 != 0 {
            return Err(Error::InvalidInput(format!(
                "{what} image sides must be divisible by 16, got {}x{}",
                img.height(),
                img.width()
            )));
        }
    }
    if !fine.uses_coarse() {
        return fine.fine_forward_nocoarse(content);
    }
    let taps = coarse.forward(&downsample2(content)?, &downsample2(style)?, &WctConfig::default())?;
    fine.fine_forward(content, &taps)
}

/// [`stylize`] with both networks read from checkpoints.
pub fn stylize_from_checkpoints(
    coarse_ckpt: impl AsRef<Path>,
    fine_ckpt: impl AsRef<Path>,
    content: &Image,
    style: &Image,
) -> Result<Image> {
    let coarse = CoarseNetwork::load(coarse_ckpt)?;
    let fine = FineNetwork::load(fine_ckpt)?;
    stylize(&coarse, &fine, content, style)
}
