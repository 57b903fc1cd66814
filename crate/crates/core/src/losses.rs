//! Training objectives. Every loss is a function of the stylized features only
//! through `F_cs`, and each `*_grad` variant returns `∂loss/∂F_cs`.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, TapName};
use crate::error::{Error, Result};
use crate::nn::Graph;
use crate::substrate::{FeatureMap, Image};

/// Norm offset in the cosine cost.
pub const COST_EPS: f64 = 1e-8;
/// Variance offset inside the standard deviation.
pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Weight of the feature term in the reconstruction loss.
    pub recon_lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda1: 20.0,
            lambda2: 1000.0,
            lambda3: 5.0,
            recon_lambda: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("recon_lambda", self.recon_lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight `{name}` must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Encoder taps each loss term is summed over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerAssignment {
    pub perceptual: Vec<TapName>,
    pub remd: Vec<TapName>,
    pub gram: Vec<TapName>,
    pub meanvar: Vec<TapName>,
}

impl Default for LayerAssignment {
    fn default() -> Self {
        use TapName::*;
        Self {
            perceptual: vec![Relu1_1, Relu2_1, Relu3_1, Relu4_1],
            remd: vec![Relu2_1, Relu3_1, Relu4_1],
            gram: vec![Relu1_2, Relu2_2, Relu3_3],
            meanvar: vec![Relu1_1, Relu2_1, Relu3_1, Relu4_1],
        }
    }
}

impl LayerAssignment {
    /// Taps needed from the stylized image under the given weights.
    pub fn stylized_taps(&self, w: &LossWeights) -> Vec<TapName> {
        let mut taps = BTreeSet::new();
        for (weight, list) in self.terms(w) {
            if weight > 0.0 {
                taps.extend(list.iter().copied());
            }
        }
        taps.into_iter().collect()
    }

    /// Taps needed from the content image.
    pub fn content_taps(&self, w: &LossWeights) -> Vec<TapName> {
        if w.alpha > 0.0 {
            self.perceptual.clone()
        } else {
            Vec::new()
        }
    }

    /// Taps needed from the style image.
    pub fn style_taps(&self, w: &LossWeights) -> Vec<TapName> {
        let mut taps = BTreeSet::new();
        for (weight, list) in self.terms(w).into_iter().skip(1) {
            if weight > 0.0 {
                taps.extend(list.iter().copied());
            }
        }
        taps.into_iter().collect()
    }

    fn terms(&self, w: &LossWeights) -> [(f64, &[TapName]); 4] {
        [
            (w.alpha, &self.perceptual),
            (w.lambda1, &self.remd),
            (w.lambda2, &self.gram),
            (w.lambda3, &self.meanvar),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemdConfig {
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for RemdConfig {
    fn default() -> Self {
        Self {
            max_samples: 1024,
            seed: 0,
        }
    }
}

fn check_same_shape(a: &FeatureMap, b: &FeatureMap, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidInput(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_same_channels(a: &FeatureMap, b: &FeatureMap, what: &str) -> Result<()> {
    if a.channels() != b.channels() {
        return Err(Error::InvalidInput(format!(
            "{what}: channel mismatch {} vs {}",
            a.channels(),
            b.channels()
        )));
    }
    Ok(())
}

/// `‖F_c − F_cs‖² / (c·h·w)`.
pub fn perceptual_loss(f_c: &FeatureMap, f_cs: &FeatureMap) -> Result<f64> {
    check_same_shape(f_c, f_cs, "perceptual loss")?;
    let n = f_c.data().len() as f64;
    Ok(f_c
        .data()
        .iter()
        .zip(f_cs.data().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

pub fn perceptual_loss_grad(f_c: &FeatureMap, f_cs: &FeatureMap) -> Result<(f64, FeatureMap)> {
    let value = perceptual_loss(f_c, f_cs)?;
    let n = f_c.data().len() as f64;
    let grad = (f_cs.data() - f_c.data()) * (2.0 / n);
    Ok((value, FeatureMap::from_array_unchecked(grad)))
}

/// Positions as rows (`n × c`), restricted to `idx`.
fn position_rows(f: &FeatureMap, idx: &[usize]) -> Array2<f64> {
    let m = f.as_matrix();
    let mut out = Array2::zeros((idx.len(), f.channels()));
    for (r, &p) in idx.iter().enumerate() {
        out.row_mut(r).assign(&m.column(p));
    }
    out
}

fn row_norms(rows: &Array2<f64>) -> Array1<f64> {
    rows.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}

fn cosine_cost(s: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    let ns = row_norms(s);
    let nx = row_norms(x);
    let mut c = s.dot(&x.t());
    for (mut row, a) in c.rows_mut().into_iter().zip(&ns) {
        for (v, b) in row.iter_mut().zip(&nx) {
            *v = 1.0 - *v / ((a + COST_EPS) * (b + COST_EPS));
        }
    }
    c
}

/// Cosine cost between every style position (rows) and stylized position (columns).
pub fn cost_matrix(f_s: &FeatureMap, f_cs: &FeatureMap) -> Result<Array2<f64>> {
    check_same_channels(f_s, f_cs, "cost matrix")?;
    let all_s: Vec<usize> = (0..f_s.positions()).collect();
    let all_x: Vec<usize> = (0..f_cs.positions()).collect();
    Ok(cosine_cost(&position_rows(f_s, &all_s), &position_rows(f_cs, &all_x)))
}

fn sample_positions(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Positions used by [`remd_loss`] on each side, sorted ascending.
///
/// Sides with at most `max_samples` positions are used whole.
pub fn remd_sample(n_s: usize, n_cs: usize, cfg: &RemdConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    if cfg.max_samples == 0 {
        return Err(Error::Config("remd max_samples must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = sample_positions(n_s, cfg.max_samples, &mut rng);
    let x = sample_positions(n_cs, cfg.max_samples, &mut rng);
    Ok((s, x))
}

/// Index of the first minimum.
fn argmin(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}

struct RemdEval {
    value: f64,
    rows_win: bool,
    row_arg: Vec<usize>,
    col_arg: Vec<usize>,
}

fn remd_eval(c: &Array2<f64>) -> RemdEval {
    let (ns, nx) = c.dim();
    let mut row_sum = 0.0;
    let mut row_arg = Vec::with_capacity(ns);
    for i in 0..ns {
        let (j, v) = argmin(c.row(i).iter().copied());
        row_sum += v;
        row_arg.push(j);
    }
    let mut col_sum = 0.0;
    let mut col_arg = Vec::with_capacity(nx);
    for j in 0..nx {
        let (i, v) = argmin(c.column(j).iter().copied());
        col_sum += v;
        col_arg.push(i);
    }
    let (r, k) = (row_sum / ns as f64, col_sum / nx as f64);
    // ties select the row term
    RemdEval {
        value: r.max(k),
        rows_win: r >= k,
        row_arg,
        col_arg,
    }
}

/// `max(mean_i min_j C_ij, mean_j min_i C_ij)` over the seeded position subsets.
pub fn remd_loss(f_s: &FeatureMap, f_cs: &FeatureMap, cfg: &RemdConfig) -> Result<f64> {
    check_same_channels(f_s, f_cs, "remd loss")?;
    let (is, ix) = remd_sample(f_s.positions(), f_cs.positions(), cfg)?;
    let c = cosine_cost(&position_rows(f_s, &is), &position_rows(f_cs, &ix));
    Ok(remd_eval(&c).value)
}

/// Subgradient through the achieved minima; ties go to the lowest index.
pub fn remd_loss_grad(f_s: &FeatureMap, f_cs: &FeatureMap, cfg: &RemdConfig) -> Result<(f64, FeatureMap)> {
    check_same_channels(f_s, f_cs, "remd loss")?;
    let (is, ix) = remd_sample(f_s.positions(), f_cs.positions(), cfg)?;
    let s = position_rows(f_s, &is);
    let x = position_rows(f_cs, &ix);
    let eval = remd_eval(&cosine_cost(&s, &x));

    // weight on each achieved C_ij
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    if eval.rows_win {
        let w = 1.0 / is.len() as f64;
        pairs.extend(eval.row_arg.iter().enumerate().map(|(i, &j)| (i, j, w)));
    } else {
        let w = 1.0 / ix.len() as f64;
        pairs.extend(eval.col_arg.iter().enumerate().map(|(j, &i)| (i, j, w)));
    }

    let ns = row_norms(&s);
    let nx = row_norms(&x);
    let mut grad_rows = Array2::<f64>::zeros(x.dim());
    for (i, j, w) in pairs {
        let a = ns[i] + COST_EPS;
        let b = nx[j] + COST_EPS;
        let dot = s.row(i).dot(&x.row(j));
        // ∂C/∂x = -(s / (a·b)) + (s·x)/(a·b²) · x/|x|
        let radial = if nx[j] > 0.0 { dot / (a * b * b * nx[j]) } else { 0.0 };
        let mut g = grad_rows.row_mut(j);
        g.scaled_add(-w / (a * b), &s.row(i));
        g.scaled_add(w * radial, &x.row(j));
    }

    let mut grad = FeatureMap::zeros(f_cs.channels(), f_cs.height(), f_cs.width());
    {
        let mut gm = grad.as_matrix_mut();
        for (r, &p) in ix.iter().enumerate() {
            gm.column_mut(p).assign(&grad_rows.row(r));
        }
    }
    Ok((eval.value, grad))
}

/// `F·Fᵀ / (c·h·w)` with `F` viewed as `c × hw`.
pub fn gram_matrix(f: &FeatureMap) -> Array2<f64> {
    let m = f.as_matrix();
    m.dot(&m.t()) / f.data().len() as f64
}

/// `‖G(F_s) − G(F_cs)‖²_F`; spatial sizes may differ.
pub fn gram_loss(f_s: &FeatureMap, f_cs: &FeatureMap) -> Result<f64> {
    check_same_channels(f_s, f_cs, "gram loss")?;
    Ok(gram_loss_from(&gram_matrix(f_s), f_cs))
}

fn gram_loss_from(g_s: &Array2<f64>, f_cs: &FeatureMap) -> f64 {
    let d = gram_matrix(f_cs) - g_s;
    d.iter().map(|v| v * v).sum()
}

pub fn gram_loss_grad(f_s: &FeatureMap, f_cs: &FeatureMap) -> Result<(f64, FeatureMap)> {
    check_same_channels(f_s, f_cs, "gram loss")?;
    let d = gram_matrix(f_cs) - gram_matrix(f_s);
    let value = d.iter().map(|v| v * v).sum();
    let n = f_cs.data().len() as f64;
    let g = d.dot(&f_cs.as_matrix()) * (4.0 / n);
    let (c, h, w) = f_cs.shape();
    Ok((value, FeatureMap::from_array_unchecked(g.into_shape_with_order((c, h, w)).unwrap())))
}

/// Per-channel spatial mean and population standard deviation.
pub fn channel_moments(f: &FeatureMap) -> (Array1<f64>, Array1<f64>) {
    let m = f.as_matrix();
    let mean = m.mean_axis(Axis(1)).unwrap();
    let n = f.positions() as f64;
    let std = Array1::from_shape_fn(f.channels(), |k| {
        let var = m.row(k).iter().map(|v| (v - mean[k]).powi(2)).sum::<f64>() / n;
        (var + STD_EPS).sqrt()
    });
    (mean, std)
}

pub fn meanvar_loss(f_s: &FeatureMap, f_cs: &FeatureMap) -> Result<f64> {
    check_same_channels(f_s, f_cs, "meanvar loss")?;
    let (ms, ss) = channel_moments(f_s);
    let (m, s) = channel_moments(f_cs);
    let c = f_s.channels() as f64;
    let dm: f64 = ms.iter().zip(m.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let ds: f64 = ss.iter().zip(s.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((dm + ds) / c)
}

pub fn meanvar_loss_grad(f_s: &FeatureMap, f_cs: &FeatureMap) -> Result<(f64, FeatureMap)> {
    let value = meanvar_loss(f_s, f_cs)?;
    let (ms, ss) = channel_moments(f_s);
    let (m, s) = channel_moments(f_cs);
    let c = f_cs.channels() as f64;
    let n = f_cs.positions() as f64;
    let mut grad = f_cs.clone();
    for (k, mut ch) in grad.data_mut().outer_iter_mut().enumerate() {
        let dmean = 2.0 * (m[k] - ms[k]) / (c * n);
        let dstd = 2.0 * (s[k] - ss[k]) / (c * n * s[k]);
        ch.mapv_inplace(|v| dmean + dstd * (v - m[k]));
    }
    Ok((value, grad))
}

/// Features per tap.
pub type TapFeatures = BTreeMap<TapName, FeatureMap>;

/// Unweighted per-term sums plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_p: f64,
    pub l_r: f64,
    pub l_g: f64,
    pub l_m: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(l_p: f64, l_r: f64, l_g: f64, l_m: f64, w: &LossWeights) -> Self {
        Self {
            l_p,
            l_r,
            l_g,
            l_m,
            total: w.alpha * l_p + w.lambda1 * l_r + w.lambda2 * l_g + w.lambda3 * l_m,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_p, self.l_r, self.l_g, self.l_m, self.total].iter().all(|v| v.is_finite())
    }
}

fn tap<'a>(set: &'a TapFeatures, t: TapName, role: &str) -> Result<&'a FeatureMap> {
    set.get(&t)
        .ok_or_else(|| Error::Config(format!("{role} features are missing tap {t}")))
}

/// Total objective and, per stylized tap, its gradient.
///
/// Terms with a zero weight are skipped and reported as 0.
pub fn total_loss_grad(
    content: &TapFeatures,
    style: &TapFeatures,
    stylized: &TapFeatures,
    weights: &LossWeights,
    assignment: &LayerAssignment,
    remd: &RemdConfig,
) -> Result<(LossBreakdown, TapFeatures)> {
    weights.validate()?;
    let mut grads: TapFeatures = BTreeMap::new();
    let mut add = |t: TapName, g: FeatureMap, w: f64| {
        let g = g.into_inner() * w;
        match grads.get_mut(&t) {
            Some(acc) => *acc.data_mut() += &g,
            None => {
                grads.insert(t, FeatureMap::from_array_unchecked(g));
            }
        }
    };
    let mut terms = [0.0; 4];
    if weights.alpha > 0.0 {
        for &t in &assignment.perceptual {
            let (v, g) = perceptual_loss_grad(tap(content, t, "content")?, tap(stylized, t, "stylized")?)?;
            terms[0] += v;
            add(t, g, weights.alpha);
        }
    }
    if weights.lambda1 > 0.0 {
        for (k, &t) in assignment.remd.iter().enumerate() {
            let cfg = RemdConfig {
                seed: remd.seed.wrapping_add(k as u64),
                ..*remd
            };
            let (v, g) = remd_loss_grad(tap(style, t, "style")?, tap(stylized, t, "stylized")?, &cfg)?;
            terms[1] += v;
            add(t, g, weights.lambda1);
        }
    }
    if weights.lambda2 > 0.0 {
        for &t in &assignment.gram {
            let (v, g) = gram_loss_grad(tap(style, t, "style")?, tap(stylized, t, "stylized")?)?;
            terms[2] += v;
            add(t, g, weights.lambda2);
        }
    }
    if weights.lambda3 > 0.0 {
        for &t in &assignment.meanvar {
            let (v, g) = meanvar_loss_grad(tap(style, t, "style")?, tap(stylized, t, "stylized")?)?;
            terms[3] += v;
            add(t, g, weights.lambda3);
        }
    }
    let [l_p, l_r, l_g, l_m] = terms;
    Ok((LossBreakdown::combine(l_p, l_r, l_g, l_m, weights), grads))
}

pub fn total_loss(
    content: &TapFeatures,
    style: &TapFeatures,
    stylized: &TapFeatures,
    weights: &LossWeights,
    assignment: &LayerAssignment,
    remd: &RemdConfig,
) -> Result<LossBreakdown> {
    Ok(total_loss_grad(content, style, stylized, weights, assignment, remd)?.0)
}

/// Runs the frozen encoder on `input`, lets `loss` score the requested taps,
/// and returns the loss value with its gradient with respect to `input`.
pub fn encoder_backprop<T>(
    enc: &Encoder,
    input: &FeatureMap,
    taps: &[TapName],
    loss: impl FnOnce(&TapFeatures) -> Result<(T, TapFeatures)>,
) -> Result<(T, FeatureMap)> {
    let mut g = Graph::new();
    let x = g.variable(input.data().clone().into_dyn());
    let vars = enc.forward_graph(&mut g, x, taps)?;
    let feats: TapFeatures = vars
        .iter()
        .map(|(&t, &v)| (t, FeatureMap::from_array_unchecked(g.value3(v))))
        .collect();
    let (value, tap_grads) = loss(&feats)?;
    let mut seeds = Vec::with_capacity(tap_grads.len());
    for (t, grad) in tap_grads {
        let v = *vars
            .get(&t)
            .ok_or_else(|| Error::Config(format!("loss produced a gradient for unrequested tap {t}")))?;
        seeds.push((v, grad.into_inner().into_dyn()));
    }
    let (c, h, w) = input.shape();
    let grad = if seeds.is_empty() {
        FeatureMap::zeros(c, h, w)
    } else {
        let mut grads = g.backward(seeds);
        match grads.take(x) {
            Some(t) => FeatureMap::from_array_unchecked(t.into_dimensionality().expect("rank-3 gradient")),
            None => FeatureMap::zeros(c, h, w),
        }
    };
    Ok((value, grad))
}

/// Feature taps of the reconstruction loss.
pub const RECON_TAPS: [TapName; 4] = TapName::BLOCK_FIRSTS;

/// Pixel MSE plus `λ` times the summed per-tap perceptual loss.
///
/// `output` may lie outside `[0, 1]`; `target_feats` must hold [`RECON_TAPS`] of `target`.
pub fn reconstruction_loss_grad(
    output: &FeatureMap,
    target: &Image,
    target_feats: &TapFeatures,
    enc: &Encoder,
    lambda: f64,
) -> Result<(f64, FeatureMap)> {
    let t = target.to_feature_map();
    check_same_shape(output, &t, "reconstruction loss")?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("reconstruction lambda must be finite and >= 0, got {lambda}")));
    }
    let n = t.data().len() as f64;
    let pixel: f64 = output.data().iter().zip(t.data().iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let pixel_grad = (output.data() - t.data()) * (2.0 / n);
    if lambda == 0.0 {
        return Ok((pixel, FeatureMap::from_array_unchecked(pixel_grad)));
    }
    let (feature, mut grad) = encoder_backprop(enc, output, &RECON_TAPS, |feats| {
        let mut total = 0.0;
        let mut grads = BTreeMap::new();
        for t in RECON_TAPS {
            let (v, g) = perceptual_loss_grad(tap(target_feats, t, "target")?, &feats[&t])?;
            total += v;
            grads.insert(t, FeatureMap::from_array_unchecked(g.into_inner() * lambda));
        }
        Ok((total, grads))
    })?;
    *grad.data_mut() += &pixel_grad;
    Ok((pixel + lambda * feature, grad))
}

/// Reconstruction loss between two images.
pub fn reconstruction_loss(i_o: &Image, i_i: &Image, enc: &Encoder, lambda: f64) -> Result<f64> {
    if (i_o.height(), i_o.width()) != (i_i.height(), i_i.width()) {
        return Err(Error::InvalidInput(format!(
            "reconstruction loss: shape mismatch {}x{} vs {}x{}",
            i_o.height(),
            i_o.width(),
            i_i.height(),
            i_i.width()
        )));
    }
    let feats = if lambda > 0.0 { enc.extract(i_i, &RECON_TAPS)? } else { BTreeMap::new() };
    Ok(reconstruction_loss_grad(&i_o.to_feature_map(), i_i, &feats, enc, lambda)?.0)
}
