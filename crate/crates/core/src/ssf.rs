//! Structural selective fusion: channel attention over the decoder feature,
//! concatenated with a convolutional refinement of the merged input.
//!
//! ```text
//! f_csr = [f_cs ; f_r]
//! M     = sigmoid(mlp2(relu(mlp1(avgpool(f_csr)))))      ∈ (0,1)^c_cs
//! out   = [M ⊗ f_cs ; relu(refine(f_csr))]
//! ```

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Graph, ParamSet, Var};
use crate::substrate::FeatureMap;

/// How coarse taps are merged into the fine decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Ssf,
    /// Attention replaced by the identity; the ablation baseline.
    Concat,
}

impl Fusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Ssf => "ssf",
            Fusion::Concat => "concat",
        }
    }
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssf" => Ok(Fusion::Ssf),
            "concat" => Ok(Fusion::Concat),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsfLayout {
    pub c_cs: usize,
    pub c_r: usize,
    pub hidden: usize,
    pub c_merge: usize,
}

impl SsfLayout {
    pub fn new(c_cs: usize, c_r: usize, c_merge: usize) -> Self {
        Self {
            c_cs,
            c_r,
            hidden: ((c_cs + c_r) / 8).max(4),
            c_merge,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.c_cs + self.c_merge
    }

    /// Adds `{prefix}.mlp1`, `{prefix}.mlp2` and `{prefix}.refine` to `params`.
    pub fn init(&self, params: &mut ParamSet, prefix: &str, rng: &mut impl Rng) {
        let merged = self.c_cs + self.c_r;
        params.init_linear(&format!("{prefix}.mlp1"), self.hidden, merged, rng);
        params.init_linear(&format!("{prefix}.mlp2"), self.c_cs, self.hidden, rng);
        params.init_conv(&format!("{prefix}.refine"), self.c_merge, merged, rng);
    }
}

/// Records `M_cs` for the merged feature.
pub fn attention_graph(g: &mut Graph, bound: &Bound, prefix: &str, merged: Var) -> Var {
    let pooled = g.global_avg_pool(merged);
    let (w1, b1) = bound.weight_bias(&format!("{prefix}.mlp1"));
    let (w2, b2) = bound.weight_bias(&format!("{prefix}.mlp2"));
    let hidden = g.linear(pooled, w1, b1);
    let hidden = g.relu(hidden);
    let logits = g.linear(hidden, w2, b2);
    g.sigmoid(logits)
}

/// Records one fusion module; `fusion` picks attention or plain concatenation.
pub fn fuse_graph(g: &mut Graph, bound: &Bound, prefix: &str, fusion: Fusion, f_cs: Var, f_r: Var) -> Var {
    let merged = g.concat(&[f_cs, f_r]);
    let selected = match fusion {
        Fusion::Ssf => {
            let m = attention_graph(g, bound, prefix, merged);
            g.scale_channels(f_cs, m)
        }
        Fusion::Concat => f_cs,
    };
    let (w, b) = bound.weight_bias(&format!("{prefix}.refine"));
    let refined = g.conv2d(merged, w, b, 1);
    let refined = g.relu(refined);
    g.concat(&[selected, refined])
}

/// A standalone fusion module.
#[derive(Clone, Debug)]
pub struct SsfParams {
    pub layout: SsfLayout,
    pub params: ParamSet,
}

const PREFIX: &str = "ssf";

impl SsfParams {
    pub fn new(layout: SsfLayout, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        layout.init(&mut params, PREFIX, rng);
        Self { layout, params }
    }

    pub fn set(&mut self, name: &str, value: crate::nn::Tensor) {
        self.params.insert(format!("{PREFIX}.{name}"), value);
    }

    fn check(&self, f_cs: &FeatureMap, f_r: &FeatureMap) -> Result<()> {
        if (f_cs.height(), f_cs.width()) != (f_r.height(), f_r.width()) {
            return Err(Error::InvalidInput(format!(
                "fusion inputs differ spatially: f_cs is {:?}, f_r is {:?}",
                f_cs.shape(),
                f_r.shape()
            )));
        }
        if f_cs.channels() != self.layout.c_cs || f_r.channels() != self.layout.c_r {
            return Err(Error::InvalidInput(format!(
                "fusion expects {} + {} channels, got {:?} and {:?}",
                self.layout.c_cs,
                self.layout.c_r,
                f_cs.shape(),
                f_r.shape()
            )));
        }
        Ok(())
    }

    fn run(&self, f_cs: &FeatureMap, f_r: &FeatureMap, fusion: Fusion) -> Result<FeatureMap> {
        self.check(f_cs, f_r)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let a = g.constant(f_cs.data().clone().into_dyn());
        let b = g.constant(f_r.data().clone().into_dyn());
        let out = fuse_graph(&mut g, &bound, PREFIX, fusion, a, b);
        Ok(FeatureMap::from_array_unchecked(g.value3(out)))
    }

    /// The per-channel attention vector `M_cs`.
    pub fn attention(&self, f_cs: &FeatureMap, f_r: &FeatureMap) -> Result<Array1<f64>> {
        self.check(f_cs, f_r)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let a = g.constant(f_cs.data().clone().into_dyn());
        let b = g.constant(f_r.data().clone().into_dyn());
        let merged = g.concat(&[a, b]);
        let m = attention_graph(&mut g, &bound, PREFIX, merged);
        Ok(g.value(m).clone().into_dimensionality().unwrap())
    }
}

/// `[M ⊗ f_cs ; relu(refine([f_cs ; f_r]))]`, `c_cs + c_merge` channels.
pub fn ssf_forward(params: &SsfParams, f_cs: &FeatureMap, f_r: &FeatureMap) -> Result<FeatureMap> {
    params.run(f_cs, f_r, Fusion::Ssf)
}

/// Fusion without attention: `[f_cs ; relu(refine([f_cs ; f_r]))]`.
pub fn concat_fusion(params: &SsfParams, f_cs: &FeatureMap, f_r: &FeatureMap) -> Result<FeatureMap> {
    params.run(f_cs, f_r, Fusion::Concat)
}
