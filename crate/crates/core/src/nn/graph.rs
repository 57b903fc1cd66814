//! Reverse-mode differentiation over a recorded sequence of tensor ops.
//!
//! A [`Graph`] is built fresh for every forward pass. Values live in the
//! graph; [`Graph::backward`] walks the nodes in reverse and returns the
//! gradients of every node that requires them.

use std::sync::Arc;

use ndarray::{s, Array1, Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis, Ix1, Ix2, Ix3, Ix4};

use super::conv;

pub type Tensor = ArrayD<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize },
    Relu(Var),
    MaxPool2 { input: Var, argmax: Vec<u32> },
    Upsample2(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    ChannelAffine { input: Var, scale: Vec<f64> },
    GlobalAvgPool(Var),
    Linear { input: Var, weight: Var, bias: Var },
    Sigmoid(Var),
    ScaleChannels { input: Var, scale: Var },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

fn view3(t: &Tensor) -> ArrayView3<'_, f64> {
    t.view().into_dimensionality::<Ix3>().expect("expected a rank-3 tensor")
}

fn view1(t: &Tensor) -> ArrayView1<'_, f64> {
    t.view().into_dimensionality::<Ix1>().expect("expected a rank-1 tensor")
}

fn view2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("expected a rank-2 tensor")
}

fn view4(t: &Tensor) -> ArrayView4<'_, f64> {
    t.view().into_dimensionality::<Ix4>().expect("expected a rank-4 tensor")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf sharing storage with a parameter.
    pub fn leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input that does receive a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value3(&self, v: Var) -> Array3<f64> {
        view3(self.value(v)).to_owned()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Var {
        let y = conv::forward(
            view3(self.value(input)),
            view4(self.value(weight)),
            view1(self.value(bias)),
            stride,
        );
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(y.into_dyn(), Op::Conv2d { input, weight, bias, stride }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = self.value(input).mapv(|v| v.max(0.0));
        let rg = self.needs(input);
        self.push(y, Op::Relu(input), rg)
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, input: Var) -> Var {
        let x = view3(self.value(input));
        let (c, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array3::<f64>::zeros((c, oh, ow));
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (yy, xx) = (2 * oy + dy, 2 * ox + dx);
                            let v = x[[ch, yy, xx]];
                            if v > best {
                                best = v;
                                best_idx = (ch * h + yy) * w + xx;
                            }
                        }
                    }
                    y[[ch, oy, ox]] = best;
                    argmax.push(best_idx as u32);
                }
            }
        }
        let rg = self.needs(input);
        self.push(y.into_dyn(), Op::MaxPool2 { input, argmax }, rg)
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, input: Var) -> Var {
        let x = view3(self.value(input));
        let (c, h, w) = x.dim();
        let y = Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, yy, xx)| x[[ch, yy / 2, xx / 2]]);
        let rg = self.needs(input);
        self.push(y.into_dyn(), Op::Upsample2(input), rg)
    }

    /// Channel-axis concatenation of rank-3 tensors with equal spatial size.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| view3(self.value(p))).collect();
        let y = ndarray::concatenate(Axis(0), &views).expect("concat needs equal spatial sizes");
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(y.into_dyn(), Op::Concat(parts.to_vec()), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        let rg = self.needs(a) || self.needs(b);
        self.push(y, Op::Add(a, b), rg)
    }

    /// `y[c] = x[c] · scale[c] + shift[c]` with fixed coefficients.
    pub fn channel_affine(&mut self, input: Var, scale: &[f64], shift: &[f64]) -> Var {
        let mut y = view3(self.value(input)).to_owned();
        for (c, mut plane) in y.outer_iter_mut().enumerate() {
            plane.mapv_inplace(|v| v * scale[c] + shift[c]);
        }
        let rg = self.needs(input);
        self.push(
            y.into_dyn(),
            Op::ChannelAffine {
                input,
                scale: scale.to_vec(),
            },
            rg,
        )
    }

    /// Spatial mean per channel: `c×h×w → c`.
    pub fn global_avg_pool(&mut self, input: Var) -> Var {
        let x = view3(self.value(input));
        let (c, h, w) = x.dim();
        let y = x
            .to_shape((c, h * w))
            .unwrap()
            .mean_axis(Axis(1))
            .expect("non-empty spatial extent");
        let rg = self.needs(input);
        self.push(y.into_dyn(), Op::GlobalAvgPool(input), rg)
    }

    /// `y = W x + b` for a vector `x`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let y = view2(self.value(weight)).dot(&view1(self.value(input))) + view1(self.value(bias));
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(y.into_dyn(), Op::Linear { input, weight, bias }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let y = self.value(input).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.needs(input);
        self.push(y, Op::Sigmoid(input), rg)
    }

    /// Broadcast multiply of a `c×h×w` tensor by a length-`c` vector.
    pub fn scale_channels(&mut self, input: Var, scale: Var) -> Var {
        let mut y = view3(self.value(input)).to_owned();
        let s = view1(self.value(scale));
        for (mut plane, &k) in y.outer_iter_mut().zip(s.iter()) {
            plane *= k;
        }
        let rg = self.needs(input) || self.needs(scale);
        self.push(y.into_dyn(), Op::ScaleChannels { input, scale }, rg)
    }

    /// Propagates the seed gradients back to every node that requires one.
    ///
    /// Several seeds may be given (one per loss tap); they are summed.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed gradient shape mismatch");
            if self.needs(v) {
                accumulate(&mut grads[v.0], g);
            }
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, g, &mut grads);
        }
        Gradients(grads)
    }

    fn backprop_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, stride } => {
                let need_params = self.needs(*weight) || self.needs(*bias);
                let r = conv::backward(
                    view3(self.value(*input)),
                    view4(self.value(*weight)),
                    view3(&g),
                    *stride,
                    self.needs(*input),
                    need_params,
                );
                if let Some(dx) = r.input {
                    accumulate(&mut grads[input.0], dx.into_dyn());
                }
                if self.needs(*weight) {
                    let shape = self.value(*weight).raw_dim();
                    let dw = r.weight.unwrap().into_dyn().into_shape_with_order(shape).unwrap();
                    accumulate(&mut grads[weight.0], dw);
                }
                if self.needs(*bias) {
                    accumulate(&mut grads[bias.0], r.bias.unwrap().into_dyn());
                }
            }
            Op::Relu(input) => {
                let mut dx = g;
                ndarray::Zip::from(&mut dx)
                    .and(&*node.value)
                    .for_each(|d, &y| {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    });
                accumulate(&mut grads[input.0], dx);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).raw_dim());
                {
                    let flat = dx.as_slice_mut().unwrap();
                    for (&src, &gv) in argmax.iter().zip(g.iter()) {
                        flat[src as usize] += gv;
                    }
                }
                accumulate(&mut grads[input.0], dx);
            }
            Op::Upsample2(input) => {
                let gv = view3(&g);
                let (c, h2, w2) = gv.dim();
                let mut dx = Array3::<f64>::zeros((c, h2 / 2, w2 / 2));
                for ((ch, y, x), &v) in gv.indexed_iter() {
                    dx[[ch, y / 2, x / 2]] += v;
                }
                accumulate(&mut grads[input.0], dx.into_dyn());
            }
            Op::Concat(parts) => {
                let gv = view3(&g);
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).shape()[0];
                    if self.needs(*p) {
                        let part = gv.slice(s![offset..offset + c, .., ..]).to_owned();
                        accumulate(&mut grads[p.0], part.into_dyn());
                    }
                    offset += c;
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::ChannelAffine { input, scale } => {
                let mut dx = view3(&g).to_owned();
                for (c, mut plane) in dx.outer_iter_mut().enumerate() {
                    plane *= scale[c];
                }
                accumulate(&mut grads[input.0], dx.into_dyn());
            }
            Op::GlobalAvgPool(input) => {
                let shape = self.value(*input).raw_dim();
                let (h, w) = (shape[1], shape[2]);
                let gv = view1(&g);
                let n = (h * w) as f64;
                let dx = Array3::from_shape_fn((shape[0], h, w), |(c, _, _)| gv[c] / n);
                accumulate(&mut grads[input.0], dx.into_dyn());
            }
            Op::Linear { input, weight, bias } => {
                let gv = view1(&g);
                if self.needs(*input) {
                    let dx = view2(self.value(*weight)).t().dot(&gv);
                    accumulate(&mut grads[input.0], dx.into_dyn());
                }
                if self.needs(*weight) {
                    let x = view1(self.value(*input));
                    let dw = ndarray::Array2::from_shape_fn((gv.len(), x.len()), |(o, i)| gv[o] * x[i]);
                    accumulate(&mut grads[weight.0], dw.into_dyn());
                }
                if self.needs(*bias) {
                    accumulate(&mut grads[bias.0], g.clone());
                }
            }
            Op::Sigmoid(input) => {
                let mut dx = g;
                ndarray::Zip::from(&mut dx)
                    .and(&*node.value)
                    .for_each(|d, &y| *d *= y * (1.0 - y));
                accumulate(&mut grads[input.0], dx);
            }
            Op::ScaleChannels { input, scale } => {
                let gv = view3(&g);
                let s = view1(self.value(*scale));
                if self.needs(*input) {
                    let mut dx = gv.to_owned();
                    for (mut plane, &k) in dx.outer_iter_mut().zip(s.iter()) {
                        plane *= k;
                    }
                    accumulate(&mut grads[input.0], dx.into_dyn());
                }
                if self.needs(*scale) {
                    let x = view3(self.value(*input));
                    let ds: Array1<f64> = gv
                        .outer_iter()
                        .zip(x.outer_iter())
                        .map(|(gp, xp)| (&gp * &xp).sum())
                        .collect();
                    accumulate(&mut grads[scale.0], ds.into_dyn());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::finite_diff_grad_array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_shape_fn(shape, |_| rng.random::<f64>() - 0.5)
    }

    /// Weighted sum of the output with fixed random weights, so every
    /// output coordinate contributes a distinct amount.
    fn probe_loss(out: &Tensor, weights: &Tensor) -> f64 {
        (out * weights).sum()
    }

    fn check_grad(
        build: impl Fn(&mut Graph, Var) -> Var,
        x0: Tensor,
        seed: u64,
    ) {
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let y = build(&mut g, x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(g.value(y).shape(), &mut rng);
        let grads = g.backward(vec![(y, w.clone())]);
        let analytic = grads.get(x).unwrap().clone();
        let numeric = finite_diff_grad_array(
            |a| {
                let mut g = Graph::new();
                let x = g.variable(a.clone());
                let y = build(&mut g, x);
                probe_loss(g.value(y), &w)
            },
            &x0,
            1e-6,
        )
        .unwrap();
        let scale = numeric.iter().fold(1e-8_f64, |m, v| m.max(v.abs()));
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() <= 1e-5 * scale, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn conv_input_and_weight_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        for stride in [1, 2] {
            let (w1, b1) = (w.clone(), b.clone());
            check_grad(
                move |g, x| {
                    let wv = g.constant(w1.clone());
                    let bv = g.constant(b1.clone());
                    g.conv2d(x, wv, bv, stride)
                },
                rand_tensor(&[2, 6, 4], &mut rng),
                3,
            );
        }
        let x = rand_tensor(&[2, 5, 4], &mut rng);
        check_grad(
            move |g, wv| {
                let xv = g.constant(x.clone());
                let bv = g.constant(Tensor::zeros(ndarray::IxDyn(&[3])));
                g.conv2d(xv, wv, bv, 1)
            },
            w,
            4,
        );
    }

    #[test]
    fn pooling_upsampling_and_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check_grad(|g, x| g.max_pool2(x), rand_tensor(&[2, 4, 6], &mut rng), 1);
        check_grad(|g, x| g.upsample2(x), rand_tensor(&[2, 3, 2], &mut rng), 2);
        check_grad(
            |g, x| {
                let p = g.global_avg_pool(x);
                let s = g.sigmoid(p);
                let r = g.relu(x);
                let sc = g.scale_channels(r, s);
                let cat = g.concat(&[sc, x]);
                g.channel_affine(cat, &[1.0, 2.0, -1.0, 0.5], &[0.0, 1.0, 2.0, 3.0])
            },
            rand_tensor(&[2, 3, 3], &mut rng),
            3,
        );
        let w = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        check_grad(
            move |g, x| {
                let wv = g.constant(w.clone());
                let bv = g.constant(b.clone());
                let y = g.linear(x, wv, bv);
                g.add(y, y)
            },
            rand_tensor(&[4], &mut rng),
            4,
        );
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::ones(ndarray::IxDyn(&[1, 2, 2])));
        let w = g.leaf(Arc::new(Tensor::ones(ndarray::IxDyn(&[1, 1, 3, 3]))), false);
        let b = g.constant(Tensor::zeros(ndarray::IxDyn(&[1])));
        let y = g.conv2d(x, w, b, 1);
        let seed = Tensor::ones(g.value(y).raw_dim());
        let grads = g.backward(vec![(y, seed)]);
        assert!(grads.get(w).is_none());
        assert!(grads.get(x).is_some());
    }
}
