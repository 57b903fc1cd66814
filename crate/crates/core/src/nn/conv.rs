//! 3×3 convolution with reflect padding of one pixel, via tiled im2col + GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayView4};

pub const KERNEL: usize = 3;

// Upper bound on im2col tile entries (~32 MiB of f64).
const TILE_ENTRIES: usize = 1 << 22;

/// Source index for padded coordinate `p - 1` under reflect padding.
///
/// Sides of length one have nothing to reflect and replicate instead.
#[inline]
fn reflect(p: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let i = if p < 0 {
        -p
    } else if p >= n {
        2 * (n - 1) - p
    } else {
        p
    };
    i as usize
}

pub fn output_size(n: usize, stride: usize) -> usize {
    (n + 2 - KERNEL) / stride + 1
}

/// For each kernel offset, the source index of every output coordinate.
fn index_maps(n_in: usize, n_out: usize, stride: usize) -> Vec<Vec<usize>> {
    (0..KERNEL)
        .map(|k| {
            (0..n_out)
                .map(|o| reflect((o * stride + k) as isize - 1, n_in))
                .collect()
        })
        .collect()
}

struct Geometry {
    channels: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    rows: Vec<Vec<usize>>,
    cols: Vec<Vec<usize>>,
    tile_rows: usize,
}

impl Geometry {
    fn new(channels: usize, h: usize, w: usize, stride: usize) -> Self {
        let out_h = output_size(h, stride);
        let out_w = output_size(w, stride);
        let k = channels * KERNEL * KERNEL;
        let tile_rows = (TILE_ENTRIES / (k * out_w)).clamp(1, out_h);
        Self {
            channels,
            stride,
            out_h,
            out_w,
            rows: index_maps(h, out_h, stride),
            cols: index_maps(w, out_w, stride),
            tile_rows,
        }
    }

    fn tiles(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.out_h)
            .step_by(self.tile_rows)
            .map(move |r0| (r0, (r0 + self.tile_rows).min(self.out_h)))
    }

    /// Fills `buf` with the `(C·9) × (rows · out_w)` patch matrix for output rows `r0..r1`.
    fn im2col(&self, x: &ArrayView3<f64>, r0: usize, r1: usize, buf: &mut Vec<f64>) {
        let n = (r1 - r0) * self.out_w;
        buf.clear();
        buf.resize(self.channels * KERNEL * KERNEL * n, 0.0);
        let mut row = 0;
        for c in 0..self.channels {
            let plane = x.index_axis(ndarray::Axis(0), c);
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let dst = &mut buf[row * n..(row + 1) * n];
                    let cmap = &self.cols[kx];
                    for (i, oy) in (r0..r1).enumerate() {
                        let src = plane.row(self.rows[ky][oy]);
                        let out = &mut dst[i * self.out_w..(i + 1) * self.out_w];
                        let w = self.out_w;
                        match (self.stride, src.as_slice()) {
                            // stride 1: only the two border columns are reflected
                            (1, Some(s)) if w >= 2 => {
                                out[0] = s[cmap[0]];
                                out[1..w - 1].copy_from_slice(&s[kx..kx + w - 2]);
                                out[w - 1] = s[cmap[w - 1]];
                            }
                            _ => {
                                for (o, &sx) in out.iter_mut().zip(cmap) {
                                    *o = src[sx];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adds the patch-matrix gradient back into `dx`.
    fn col2im(&self, dcols: &ArrayView2<f64>, r0: usize, r1: usize, dx: &mut Array3<f64>) {
        let mut row = 0;
        for c in 0..self.channels {
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let src = dcols.row(row);
                    let cmap = &self.cols[kx];
                    for (i, oy) in (r0..r1).enumerate() {
                        let sy = self.rows[ky][oy];
                        let mut dst = dx.slice_mut(s![c, sy, ..]);
                        for (ox, &sx) in cmap.iter().enumerate() {
                            dst[sx] += src[i * self.out_w + ox];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn weight_matrix<'a>(w: &'a ArrayView4<'a, f64>) -> ArrayView2<'a, f64> {
    let (o, i, kh, kw) = w.dim();
    w.view()
        .into_shape_with_order((o, i * kh * kw))
        .expect("conv weights are kept in standard layout")
}

/// `y = conv(x, w) + b` with `x: C×H×W`, `w: O×C×3×3`.
pub fn forward(x: ArrayView3<f64>, w: ArrayView4<f64>, b: ArrayView1<f64>, stride: usize) -> Array3<f64> {
    if use_direct(x.dim(), w.dim().0, stride) {
        forward_direct(x, w, b)
    } else {
        forward_gemm(x, w, b, stride)
    }
}

/// Gradients of a convolution given the upstream gradient `dy: O×Ho×Wo`.
///
/// The weight gradient is returned flattened to `O × (C·9)`.
pub fn backward(
    x: ArrayView3<f64>,
    w: ArrayView4<f64>,
    dy: ArrayView3<f64>,
    stride: usize,
    need_input: bool,
    need_params: bool,
) -> ConvGrads {
    if use_direct(x.dim(), w.dim().0, stride) {
        backward_direct(x, w, dy, need_input, need_params)
    } else {
        backward_gemm(x, w, dy, stride, need_input, need_params)
    }
}

// GEMM packing dominates when rows are long and channel counts small.
fn use_direct((c, _, w): (usize, usize, usize), out_ch: usize, stride: usize) -> bool {
    stride == 1 && w >= 32 && out_ch.min(c) <= 32
}

fn forward_gemm(
    x: ArrayView3<f64>,
    w: ArrayView4<f64>,
    b: ArrayView1<f64>,
    stride: usize,
) -> Array3<f64> {
    let (c, h, wd) = x.dim();
    let out_ch = w.dim().0;
    assert_eq!(w.dim().1, c, "conv input channel mismatch");
    let geo = Geometry::new(c, h, wd, stride);
    let wmat = weight_matrix(&w);
    let mut out = Array2::<f64>::zeros((out_ch, geo.out_h * geo.out_w));
    let mut buf = Vec::new();
    for (r0, r1) in geo.tiles() {
        geo.im2col(&x, r0, r1, &mut buf);
        let n = (r1 - r0) * geo.out_w;
        let cols = ArrayView2::from_shape((c * KERNEL * KERNEL, n), &buf).unwrap();
        let mut dst = out.slice_mut(s![.., r0 * geo.out_w..r1 * geo.out_w]);
        general_mat_mul(1.0, &wmat, &cols, 0.0, &mut dst);
    }
    for (mut row, &bias) in out.outer_iter_mut().zip(b.iter()) {
        row += bias;
    }
    out.into_shape_with_order((out_ch, geo.out_h, geo.out_w))
        .unwrap()
}

pub struct ConvGrads {
    pub input: Option<Array3<f64>>,
    pub weight: Option<Array2<f64>>,
    pub bias: Option<Array1<f64>>,
}

fn backward_gemm(
    x: ArrayView3<f64>,
    w: ArrayView4<f64>,
    dy: ArrayView3<f64>,
    stride: usize,
    need_input: bool,
    need_params: bool,
) -> ConvGrads {
    let (c, h, wd) = x.dim();
    let out_ch = w.dim().0;
    let geo = Geometry::new(c, h, wd, stride);
    let k = c * KERNEL * KERNEL;
    let dy2 = dy
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((out_ch, geo.out_h * geo.out_w))
        .unwrap();
    let wmat = weight_matrix(&w);

    let mut dx = need_input.then(|| Array3::<f64>::zeros((c, h, wd)));
    let mut dw = need_params.then(|| Array2::<f64>::zeros((out_ch, k)));
    let mut buf = Vec::new();
    let mut dcols = Array2::<f64>::zeros((0, 0));
    for (r0, r1) in geo.tiles() {
        let n = (r1 - r0) * geo.out_w;
        let dy_tile = dy2.slice(s![.., r0 * geo.out_w..r1 * geo.out_w]);
        if let Some(dw) = dw.as_mut() {
            geo.im2col(&x, r0, r1, &mut buf);
            let cols = ArrayView2::from_shape((k, n), &buf).unwrap();
            general_mat_mul(1.0, &dy_tile, &cols.t(), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            if dcols.dim() != (k, n) {
                dcols = Array2::zeros((k, n));
            }
            general_mat_mul(1.0, &wmat.t(), &dy_tile, 0.0, &mut dcols);
            geo.col2im(&dcols.view(), r0, r1, dx);
        }
    }
    let db = need_params.then(|| dy2.sum_axis(ndarray::Axis(1)));
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}


/// Reflect-padded copy, `C × (H+2) × (W+2)`, row-major.
fn pad(x: &ArrayView3<f64>) -> Vec<f64> {
    let (c, h, w) = x.dim();
    let (ph, pw) = (h + 2, w + 2);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut out = vec![0.0; c * ph * pw];
    let (left, right) = (reflect(-1, w), reflect(w as isize, w));
    for ci in 0..c {
        let plane = &mut out[ci * ph * pw..(ci + 1) * ph * pw];
        for py in 0..ph {
            let sy = reflect(py as isize - 1, h);
            let src = &xs[(ci * h + sy) * w..(ci * h + sy + 1) * w];
            let row = &mut plane[py * pw..(py + 1) * pw];
            row[1..w + 1].copy_from_slice(src);
            row[0] = src[left];
            row[w + 1] = src[right];
        }
    }
    out
}

/// `dst[i] += Σ k[3·r + t] · rows[r][i + t]` over the three rows and three taps.
#[inline(always)]
fn taps9(dst: &mut [f64], k: &[f64], r0: &[f64], r1: &[f64], r2: &[f64]) {
    let n = dst.len();
    let (r0, r1, r2) = (&r0[..n + 2], &r1[..n + 2], &r2[..n + 2]);
    for i in 0..n {
        dst[i] += k[0] * r0[i] + k[1] * r0[i + 1] + k[2] * r0[i + 2]
            + k[3] * r1[i] + k[4] * r1[i + 1] + k[5] * r1[i + 2]
            + k[6] * r2[i] + k[7] * r2[i + 1] + k[8] * r2[i + 2];
    }
}

/// Nine dot products `Σ_i g[i] · rows[r][i + t]` in one pass.
#[inline(always)]
fn dots9(acc: &mut [f64; 9], g: &[f64], r0: &[f64], r1: &[f64], r2: &[f64]) {
    let n = g.len();
    let rows = [&r0[..n + 2], &r1[..n + 2], &r2[..n + 2]];
    // eight lanes per tap keep the loop vectorizable
    let mut part = [[0.0f64; 8]; 9];
    let chunks = n / 8;
    for q in 0..chunks {
        let gq = &g[8 * q..8 * q + 8];
        for (t, p) in part.iter_mut().enumerate() {
            let src = &rows[t / 3][t % 3 + 8 * q..t % 3 + 8 * q + 8];
            for l in 0..8 {
                p[l] += gq[l] * src[l];
            }
        }
    }
    for (t, p) in part.iter().enumerate() {
        let mut tail = 0.0;
        for i in 8 * chunks..n {
            tail += g[i] * rows[t / 3][t % 3 + i];
        }
        acc[t] += ((p[0] + p[1]) + (p[2] + p[3])) + ((p[4] + p[5]) + (p[6] + p[7])) + tail;
    }
}

// The direct kernels are compiled once per instruction set; the widest one
// the CPU supports is picked at run time.
#[cfg(target_arch = "x86_64")]
#[derive(Clone, Copy, PartialEq)]
enum Simd {
    Avx512,
    Avx2,
    Generic,
}

#[cfg(target_arch = "x86_64")]
fn simd() -> Simd {
    use std::arch::is_x86_feature_detected as has;
    static LEVEL: std::sync::OnceLock<Simd> = std::sync::OnceLock::new();
    *LEVEL.get_or_init(|| {
        if has!("avx512f") && has!("fma") {
            Simd::Avx512
        } else if has!("avx2") && has!("fma") {
            Simd::Avx2
        } else {
            Simd::Generic
        }
    })
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,fma")]
fn forward_direct_avx512(x: ArrayView3<f64>, w: ArrayView4<f64>, b: ArrayView1<f64>) -> Array3<f64> {
    forward_direct_body(x, w, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
fn forward_direct_avx2(x: ArrayView3<f64>, w: ArrayView4<f64>, b: ArrayView1<f64>) -> Array3<f64> {
    forward_direct_body(x, w, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,fma")]
fn backward_direct_avx512(
    x: ArrayView3<f64>,
    w: ArrayView4<f64>,
    dy: ArrayView3<f64>,
    need_input: bool,
    need_params: bool,
) -> ConvGrads {
    backward_direct_body(x, w, dy, need_input, need_params)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
fn backward_direct_avx2(
    x: ArrayView3<f64>,
    w: ArrayView4<f64>,
    dy: ArrayView3<f64>,
    need_input: bool,
    need_params: bool,
) -> ConvGrads {
    backward_direct_body(x, w, dy, need_input, need_params)
}

fn forward_direct(x: ArrayView3<f64>, w: ArrayView4<f64>, b: ArrayView1<f64>) -> Array3<f64> {
    #[cfg(target_arch = "x86_64")]
    match simd() {
        // SAFETY: `simd` confirmed the features at run time
        Simd::Avx512 => return unsafe { forward_direct_avx512(x, w, b) },
        Simd::Avx2 => return unsafe { forward_direct_avx2(x, w, b) },
        Simd::Generic => {}
    }
    forward_direct_body(x, w, b)
}

fn backward_direct(
    x: ArrayView3<f64>,
    w: ArrayView4<f64>,
    dy: ArrayView3<f64>,
    need_input: bool,
    need_params: bool,
) -> ConvGrads {
    #[cfg(target_arch = "x86_64")]
    match simd() {
        // SAFETY: `simd` confirmed the features at run time
        Simd::Avx512 => return unsafe { backward_direct_avx512(x, w, dy, need_input, need_params) },
        Simd::Avx2 => return unsafe { backward_direct_avx2(x, w, dy, need_input, need_params) },
        Simd::Generic => {}
    }
    backward_direct_body(x, w, dy, need_input, need_params)
}

/// Stride-1 convolution as fused row updates over the padded input.
#[inline(always)]
fn forward_direct_body(x: ArrayView3<f64>, w: ArrayView4<f64>, b: ArrayView1<f64>) -> Array3<f64> {
    let (c, h, wd) = x.dim();
    let out_ch = w.dim().0;
    assert_eq!(w.dim().1, c, "conv input channel mismatch");
    let p = pad(&x);
    let pw = wd + 2;
    let plane = (h + 2) * pw;
    let w = w.as_standard_layout();
    let wf = w.as_slice().unwrap();
    let mut out = vec![0.0; out_ch * h * wd];
    for o in 0..out_ch {
        let dst = &mut out[o * h * wd..(o + 1) * h * wd];
        dst.fill(b[o]);
        for ci in 0..c {
            let src = &p[ci * plane..(ci + 1) * plane];
            let k = &wf[(o * c + ci) * 9..(o * c + ci + 1) * 9];
            for y in 0..h {
                taps9(
                    &mut dst[y * wd..(y + 1) * wd],
                    k,
                    &src[y * pw..],
                    &src[(y + 1) * pw..],
                    &src[(y + 2) * pw..],
                );
            }
        }
    }
    Array3::from_shape_vec((out_ch, h, wd), out).unwrap()
}

#[inline(always)]
fn backward_direct_body(
    x: ArrayView3<f64>,
    w: ArrayView4<f64>,
    dy: ArrayView3<f64>,
    need_input: bool,
    need_params: bool,
) -> ConvGrads {
    let (c, h, wd) = x.dim();
    let out_ch = w.dim().0;
    let dy = dy.as_standard_layout();
    let g = dy.as_slice().unwrap();
    let w = w.as_standard_layout();
    let wf = w.as_slice().unwrap();

    let weight = if need_params { Some(direct_dw(&x, g, out_ch)) } else { None };
    let input = if need_input { Some(direct_dx(g, wf, c, h, wd, out_ch)) } else { None };
    let bias = need_params.then(|| Array1::from_shape_fn(out_ch, |o| g[o * h * wd..(o + 1) * h * wd].iter().sum()));
    ConvGrads { input, weight, bias }
}

#[inline(always)]
fn direct_dw(x: &ArrayView3<f64>, g: &[f64], out_ch: usize) -> Array2<f64> {
    let (c, h, wd) = x.dim();
    let pw = wd + 2;
    let plane = (h + 2) * pw;
    let p = pad(x);
    let mut dw = Array2::<f64>::zeros((out_ch, c * 9));
    for o in 0..out_ch {
        let go = &g[o * h * wd..(o + 1) * h * wd];
        for ci in 0..c {
            let src = &p[ci * plane..(ci + 1) * plane];
            let mut acc = [0.0; 9];
            for y in 0..h {
                dots9(
                    &mut acc,
                    &go[y * wd..(y + 1) * wd],
                    &src[y * pw..],
                    &src[(y + 1) * pw..],
                    &src[(y + 2) * pw..],
                );
            }
            for (t, v) in acc.into_iter().enumerate() {
                dw[[o, ci * 9 + t]] = v;
            }
        }
    }
    dw
}

#[inline(always)]
fn direct_dx(g: &[f64], wf: &[f64], c: usize, h: usize, wd: usize, out_ch: usize) -> Array3<f64> {
    let pw = wd + 2;
    let plane = (h + 2) * pw;
    // dy zero-padded by two on every side; the padded-input gradient is a
    // correlation of it with the flipped kernel
    let (qh, qw) = (h + 4, wd + 4);
    let mut q = vec![0.0; out_ch * qh * qw];
    for o in 0..out_ch {
        for y in 0..h {
            let dst = &mut q[o * qh * qw + (y + 2) * qw + 2..o * qh * qw + (y + 2) * qw + 2 + wd];
            dst.copy_from_slice(&g[o * h * wd + y * wd..o * h * wd + (y + 1) * wd]);
        }
    }
    let mut gp = vec![0.0; c * plane];
    for ci in 0..c {
        let dst = &mut gp[ci * plane..(ci + 1) * plane];
        for o in 0..out_ch {
            let k = &wf[(o * c + ci) * 9..(o * c + ci + 1) * 9];
            let flipped = [k[8], k[7], k[6], k[5], k[4], k[3], k[2], k[1], k[0]];
            let src = &q[o * qh * qw..(o + 1) * qh * qw];
            for py in 0..h + 2 {
                taps9(
                    &mut dst[py * pw..(py + 1) * pw],
                    &flipped,
                    &src[py * qw..],
                    &src[(py + 1) * qw..],
                    &src[(py + 2) * qw..],
                );
            }
        }
    }
    // fold the padding border back onto the pixels it mirrors
    let mut dx = vec![0.0; c * h * wd];
    let (left, right) = (reflect(-1, wd), reflect(wd as isize, wd));
    for ci in 0..c {
        for py in 0..h + 2 {
            let sy = reflect(py as isize - 1, h);
            let src = &gp[ci * plane + py * pw..ci * plane + (py + 1) * pw];
            let row = &mut dx[(ci * h + sy) * wd..(ci * h + sy + 1) * wd];
            for (d, v) in row.iter_mut().zip(&src[1..wd + 1]) {
                *d += v;
            }
            row[left] += src[0];
            row[right] += src[wd + 1];
        }
    }
    let dx = Array3::from_shape_vec((c, h, wd), dx).unwrap();
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution over an explicitly padded input.
    fn naive(x: &Array3<f64>, w: &Array4<f64>, b: &Array1<f64>, stride: usize) -> Array3<f64> {
        let (c, h, wd) = x.dim();
        let o = w.dim().0;
        let (oh, ow) = (output_size(h, stride), output_size(wd, stride));
        let padded = Array3::from_shape_fn((c, h + 2, wd + 2), |(ci, py, px)| {
            x[[ci, reflect(py as isize - 1, h), reflect(px as isize - 1, wd)]]
        });
        Array3::from_shape_fn((o, oh, ow), |(oc, y, xx)| {
            let mut acc = b[oc];
            for ci in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        acc += w[[oc, ci, ky, kx]] * padded[[ci, y * stride + ky, xx * stride + kx]];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
        assert_eq!(reflect(-1, 1), 0);
        assert_eq!(reflect(1, 1), 0);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(c, o, h, w, stride) in &[(3, 4, 8, 6, 1), (2, 5, 8, 8, 2), (4, 2, 7, 5, 2), (1, 1, 1, 1, 1)] {
            let x = Array3::from_shape_fn((c, h, w), |_| rng.random::<f64>() - 0.5);
            let wt = Array4::from_shape_fn((o, c, 3, 3), |_| rng.random::<f64>() - 0.5);
            let b = Array1::from_shape_fn(o, |_| rng.random::<f64>());
            let want = naive(&x, &wt, &b, stride);
            let mut paths = vec![forward_gemm(x.view(), wt.view(), b.view(), stride)];
            if stride == 1 {
                paths.push(forward_direct(x.view(), wt.view(), b.view()));
            }
            for got in paths {
                assert_eq!(got.dim(), want.dim());
                for (a, b) in got.iter().zip(want.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn direct_and_gemm_backward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(c, o, h, w) in &[(3, 4, 8, 6), (5, 2, 1, 1), (2, 3, 2, 7), (4, 4, 9, 33)] {
            let x = Array3::from_shape_fn((c, h, w), |_| rng.random::<f64>() - 0.5);
            let wt = Array4::from_shape_fn((o, c, 3, 3), |_| rng.random::<f64>() - 0.5);
            let dy = Array3::from_shape_fn((o, h, w), |_| rng.random::<f64>() - 0.5);
            let a = backward_gemm(x.view(), wt.view(), dy.view(), 1, true, true);
            let b = backward_direct(x.view(), wt.view(), dy.view(), true, true);
            let close = |p: &[f64], q: &[f64]| p.iter().zip(q).all(|(u, v)| (u - v).abs() < 1e-12);
            assert!(close(a.input.unwrap().as_slice().unwrap(), b.input.unwrap().as_slice().unwrap()));
            assert!(close(a.weight.unwrap().as_slice().unwrap(), b.weight.unwrap().as_slice().unwrap()));
            assert!(close(a.bias.unwrap().as_slice().unwrap(), b.bias.unwrap().as_slice().unwrap()));
        }
    }

    #[test]
    fn stride_two_halves_even_sizes() {
        for n in [2, 8, 16, 64] {
            assert_eq!(output_size(n, 2), n / 2);
            assert_eq!(output_size(n, 1), n);
        }
    }
}
