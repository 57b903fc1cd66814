//! Two-stage training: coarse reconstruction, then fine stylization against a frozen coarse stage.

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::Serialize;

use super::config::TrainConfig;
use crate::coarse::{CoarseDecoder, CoarseNetwork, CoarseTaps};
use crate::encoder::{Encoder, TapName};
use crate::error::{Error, Result};
use crate::fine::FineNetwork;
use crate::losses::{
    encoder_backprop, reconstruction_loss_grad, total_loss_grad, LossBreakdown, RemdConfig, TapFeatures,
    RECON_TAPS,
};
use crate::nn::{Adam, Graph};
use crate::substrate::{downsample2, load_image, resize, DatasetCursor, FeatureMap, Image};
use crate::wct::WctConfig;

#[derive(Clone, Debug)]
pub struct CoarseReport {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Reconstruction loss of every iteration, first iteration at index 0.
    pub l_re: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FineReport {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Loss breakdown of every iteration, first iteration at index 0.
    pub history: Vec<LossBreakdown>,
}

#[derive(Serialize)]
struct CoarseRow {
    iter: usize,
    l_re: f64,
}

#[derive(Serialize)]
struct FineRow {
    iter: usize,
    l_p: f64,
    l_r: f64,
    l_g: f64,
    l_m: f64,
    total: f64,
}

struct LossLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl LossLog {
    fn create(path: PathBuf) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let writer = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, writer })
    }

    fn row(&mut self, row: impl Serialize) -> Result<()> {
        self.writer.serialize(row).map_err(|e| Error::io(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn check_finite(what: &str, iter: usize, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what} at iteration {iter}; last checkpoint kept")))
    }
}

fn check_finite_map(what: &str, iter: usize, f: &FeatureMap) -> Result<()> {
    if f.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what} at iteration {iter}; last checkpoint kept")))
    }
}

fn load_style(cfg: &TrainConfig, size: usize) -> Result<Image> {
    resize(&load_image(&cfg.style_image)?, size, size)
}

/// Trains the coarse decoder to reconstruct half-size content images.
pub fn train_coarse(cfg: &TrainConfig) -> Result<CoarseReport> {
    cfg.validate()?;
    let size = cfg.image_size / 2;
    let encoder = Encoder::build(cfg.encoder_profile())?;
    let mut net = CoarseNetwork::new(encoder, CoarseDecoder::new(cfg.profile, cfg.seed))?;
    let mut data = DatasetCursor::open(&cfg.content_root, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam);
    let ckpt = cfg.coarse_checkpoint_path();
    let mut log = LossLog::create(cfg.coarse_log_path())?;
    let lambda = cfg.weights.recon_lambda;
    let mut l_re = Vec::with_capacity(cfg.coarse_iters);

    for iter in 1..=cfg.coarse_iters {
        let content = data.next_image(size)?;
        let feature = net.encoder.extract_one(&content, TapName::Relu4_1)?;
        let target_feats = if lambda > 0.0 {
            net.encoder.extract(&content, &RECON_TAPS)?
        } else {
            TapFeatures::new()
        };

        let mut g = Graph::new();
        let bound = net.decoder.params().bind(&mut g, true);
        let x = g.constant(feature.into_inner().into_dyn());
        let out = net.decoder.forward_graph(&mut g, &bound, x)[2];
        let raw = FeatureMap::from_array_unchecked(g.value3(out));
        let (loss, grad) = reconstruction_loss_grad(&raw, &content, &target_feats, &net.encoder, lambda)?;
        check_finite("reconstruction loss", iter, &[loss])?;
        check_finite_map("reconstruction gradient", iter, &grad)?;
        let mut grads = g.backward(vec![(out, grad.into_inner().into_dyn())]);
        drop(g);
        adam.step(net.decoder.params_mut(), &bound, &mut grads);

        l_re.push(loss);
        if iter % cfg.log_every == 0 {
            log.row(CoarseRow { iter, l_re: loss })?;
            log::info!("coarse {iter}/{}: l_re {loss:.6}", cfg.coarse_iters);
        }
        if iter % cfg.checkpoint_every == 0 {
            net.to_archive().write(&ckpt)?;
        }
    }
    net.to_archive().write(&ckpt)?;
    Ok(CoarseReport {
        checkpoint: ckpt,
        log: log.path,
        l_re,
    })
}

// Datasets up to this many files keep their per-image frozen-stage outputs in memory.
const PREPARED_CACHE_FILES: usize = 512;

struct Prepared {
    content: Image,
    taps: Option<CoarseTaps>,
    content_feats: TapFeatures,
}

/// Trains the fine network; the coarse checkpoint is only read.
pub fn train_fine(cfg: &TrainConfig, coarse_ckpt: &Path) -> Result<FineReport> {
    cfg.validate()?;
    let coarse = CoarseNetwork::load(coarse_ckpt)?;
    if coarse.kind() != cfg.profile {
        return Err(Error::Config(format!(
            "coarse checkpoint profile `{}` does not match config profile `{}`",
            coarse.kind().as_str(),
            cfg.profile.as_str()
        )));
    }
    let size = cfg.image_size;
    let enc = &coarse.encoder;
    let wct = WctConfig::default();
    let weights = cfg.weights;
    let layers = &cfg.layers;

    // the style image is fixed for the whole run
    let style = load_style(cfg, size)?;
    let style_stats = if cfg.use_coarse {
        Some(coarse.style_stats(&downsample2(&style)?)?)
    } else {
        None
    };
    let style_feats = enc.extract(&style, &layers.style_taps(&weights))?;
    let content_taps = layers.content_taps(&weights);
    let stylized_taps = layers.stylized_taps(&weights);

    let mut fine = FineNetwork::new(cfg.profile, cfg.fusion, cfg.use_coarse, cfg.seed);
    let mut data = DatasetCursor::open(&cfg.content_root, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam);
    let ckpt = cfg.fine_checkpoint_path();
    let mut log = LossLog::create(cfg.fine_log_path())?;
    let mut history = Vec::with_capacity(cfg.fine_iters);

    // frozen-stage outputs depend only on the content file
    let cache_enabled = data.len() <= PREPARED_CACHE_FILES;
    let mut cache: HashMap<PathBuf, Rc<Prepared>> = HashMap::new();

    for iter in 1..=cfg.fine_iters {
        let path = data.peek_path().to_path_buf();
        let prepared = match cache.get(&path) {
            Some(p) => {
                data.next_path();
                Rc::clone(p)
            }
            None => {
                let (path, content) = data.next_image_with_path(size)?;
                let taps = match &style_stats {
                    Some(stats) => {
                        let small = downsample2(&content)?;
                        let t = crate::coarse::coarse_forward_with(enc, &coarse.decoder, &small, stats, &wct)?;
                        fine.check_taps(size, size, &t)
                            .map_err(|e| Error::Config(e.to_string()))?;
                        Some(t)
                    }
                    None => None,
                };
                let content_feats = enc.extract(&content, &content_taps)?;
                let p = Rc::new(Prepared {
                    content,
                    taps,
                    content_feats,
                });
                if cache_enabled {
                    cache.insert(path, Rc::clone(&p));
                }
                p
            }
        };
        let Prepared {
            content,
            taps,
            content_feats,
        } = &*prepared;

        let mut g = Graph::new();
        let bound = fine.params().bind(&mut g, true);
        let x = g.constant(content.data().clone().into_dyn());
        let tap_vars = taps.as_ref().map(|t| {
            let [a, b, c] = t.as_array();
            [
                g.constant(a.data().clone().into_dyn()),
                g.constant(b.data().clone().into_dyn()),
                g.constant(c.data().clone().into_dyn()),
            ]
        });
        let out = fine.forward_graph(&mut g, &bound, x, tap_vars);
        let raw = FeatureMap::from_array_unchecked(g.value3(out));
        let remd = RemdConfig {
            max_samples: cfg.remd_max_samples,
            seed: cfg.seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(iter as u64 * 1009),
        };
        let (breakdown, grad) = encoder_backprop(enc, &raw, &stylized_taps, |feats| {
            total_loss_grad(content_feats, &style_feats, feats, &weights, layers, &remd)
        })?;
        check_finite(
            "loss",
            iter,
            &[breakdown.l_p, breakdown.l_r, breakdown.l_g, breakdown.l_m, breakdown.total],
        )?;
        check_finite_map("gradient", iter, &grad)?;
        let mut grads = g.backward(vec![(out, grad.into_inner().into_dyn())]);
        drop(g);
        adam.step(fine.params_mut(), &bound, &mut grads);

        history.push(breakdown);
        if iter % cfg.log_every == 0 {
            log.row(FineRow {
                iter,
                l_p: breakdown.l_p,
                l_r: breakdown.l_r,
                l_g: breakdown.l_g,
                l_m: breakdown.l_m,
                total: breakdown.total,
            })?;
            log::info!("fine {iter}/{}: total {:.6}", cfg.fine_iters, breakdown.total);
        }
        if iter % cfg.checkpoint_every == 0 {
            fine.to_archive().write(&ckpt)?;
        }
    }
    fine.to_archive().write(&ckpt)?;
    Ok(FineReport {
        checkpoint: ckpt,
        log: log.path,
        history,
    })
}

/// Mean of the `window` values ending at 1-based iteration `iter`.
pub fn trailing_mean(values: &[f64], iter: usize, window: usize) -> Option<f64> {
    if iter == 0 || iter > values.len() || window == 0 || window > iter {
        return None;
    }
    let slice = &values[iter - window..iter];
    Some(slice.iter().sum::<f64>() / window as f64)
}
