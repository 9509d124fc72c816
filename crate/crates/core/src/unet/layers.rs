//! Convolution, pooling and upsampling kernels with their adjoints.
//!
//! Convolutions are lowered to a matrix product over an im2col buffer:
//! weights are stored as `(out, in·k·k)` row-major, the column buffer as
//! `(in·k·k, H·W)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// 3 for the body convolutions (padding 1), 1 for the output head.
    pub kernel: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels are supported");
        Self {
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.fan_in()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(spec: ConvSpec) -> Self {
        Self {
            spec,
            weight: vec![0.0; spec.weight_len()],
            bias: vec![0.0; spec.out_channels],
        }
    }

    /// He initialization: `N(0, sqrt(2 / fan_in))` weights, zero biases.
    pub fn he_init(spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let std = (2.0 / spec.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            spec,
            weight: (0..spec.weight_len()).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; spec.out_channels],
        }
    }

    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        let (c, h, w) = x.shape();
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let hw = h * w;
        let k = self.spec.fan_in();
        let cout = self.spec.out_channels;
        let mut out = vec![0.0; cout * hw];
        for (plane, &b) in out.chunks_mut(hw).zip(&self.bias) {
            plane.fill(b);
        }
        let mut buf = Vec::new();
        for (r0, r1) in row_bands(h, w) {
            let t = (r1 - r0) * w;
            let (cols, rs) = self.band_cols(x, r0, r1, &mut buf);
            gemm(cout, k, t, &self.weight, (k, 1), cols, (rs, 1), 1.0, &mut out[r0 * w..], (hw, 1));
        }
        Ok(Tensor3::from_raw(cout, h, w, out))
    }

    /// The im2col operand for output rows `[r0, r1)` and its row stride.
    fn band_cols<'a>(&self, x: &'a Tensor3, r0: usize, r1: usize, buf: &'a mut Vec<f64>) -> (&'a [f64], usize) {
        let (c, h, w) = x.shape();
        if self.spec.kernel == 1 {
            return (&x.values()[r0 * w..], h * w);
        }
        let t = (r1 - r0) * w;
        buf.resize(c * 9 * t, 0.0);
        im2col3(x, r0, r1, buf);
        (&buf[..], t)
    }

    /// Accumulates `dL/dW`, `dL/db` into `grad` and returns `dL/dx` when
    /// `want_input_grad` is set.
    pub fn backward(
        &self,
        x: &Tensor3,
        grad_out: &Tensor3,
        grad: &mut Conv2d,
        want_input_grad: bool,
    ) -> Result<Option<Tensor3>> {
        let (c, h, w) = x.shape();
        if c != self.spec.in_channels
            || grad_out.shape() != (self.spec.out_channels, h, w)
            || grad.spec != self.spec
        {
            return Err(Error::InvalidState(format!(
                "convolution backward shapes disagree: input {:?}, grad {:?}, layer {:?}",
                x.shape(),
                grad_out.shape(),
                self.spec
            )));
        }
        let hw = h * w;
        let k = self.spec.fan_in();
        let cout = self.spec.out_channels;
        let dout = grad_out.values();

        for (gb, plane) in grad.bias.iter_mut().zip(dout.chunks(hw)) {
            *gb += plane.iter().sum::<f64>();
        }

        let mut dx = if want_input_grad { vec![0.0; c * hw] } else { Vec::new() };
        let mut buf = Vec::new();
        let mut dcols = Vec::new();
        for (r0, r1) in row_bands(h, w) {
            let t = (r1 - r0) * w;
            let p0 = r0 * w;
            let (cols, rs) = self.band_cols(x, r0, r1, &mut buf);
            // dW (cout x k) += dout (cout x t) * cols^T (t x k)
            gemm(cout, t, k, &dout[p0..], (hw, 1), cols, (1, rs), 1.0, &mut grad.weight, (k, 1));
            if !want_input_grad {
                continue;
            }
            // dcols (k x t) = W^T (k x cout) * dout (cout x t)
            if self.spec.kernel == 1 {
                gemm(k, cout, t, &self.weight, (1, k), &dout[p0..], (hw, 1), 0.0, &mut dx[p0..], (hw, 1));
            } else {
                dcols.resize(k * t, 0.0);
                gemm(k, cout, t, &self.weight, (1, k), &dout[p0..], (hw, 1), 0.0, &mut dcols, (t, 1));
                col2im3(&dcols, r0, r1, (c, h, w), &mut dx);
            }
        }
        Ok(want_input_grad.then(|| Tensor3::from_raw(c, h, w, dx)))
    }
}

/// `c = a·b + beta·c` for row-major strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m == 0 || n == 0 || (m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Pixels per column tile; keeps the im2col buffer and the packed GEMM
/// operands cache resident.
const TILE_PIXELS: usize = 256;

/// Splits `h` rows of width `w` into bands of roughly [`TILE_PIXELS`] pixels.
fn row_bands(h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let step = (TILE_PIXELS / w.max(1)).max(1);
    (0..h).step_by(step).map(move |r0| (r0, (r0 + step).min(h)))
}

/// For output column `ox` and kernel column `kx`, the valid output range
/// `[ox0, ox1)` whose input column `ox + kx - 1` lies inside `[0, w)`.
fn valid_cols(kx: usize, w: usize) -> (usize, usize) {
    (1usize.saturating_sub(kx), (w + 1).saturating_sub(kx).min(w))
}

/// Column buffer of a 3x3, padding-1 convolution restricted to output rows
/// `[r0, r1)`: row `(ci·9 + ky·3 + kx)` holds the input plane `ci` shifted by
/// `(ky - 1, kx - 1)`, zero filled. `cols` must hold `c·9·(r1-r0)·w` values.
fn im2col3(x: &Tensor3, r0: usize, r1: usize, cols: &mut [f64]) {
    let (c, h, w) = x.shape();
    let t = (r1 - r0) * w;
    debug_assert_eq!(cols.len(), c * 9 * t);
    for ci in 0..c {
        let plane = x.plane(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * t..][..t];
                let (ox0, ox1) = valid_cols(kx, w);
                for oy in r0..r1 {
                    let dst = &mut row[(oy - r0) * w..(oy - r0 + 1) * w];
                    let sy = (oy + ky).wrapping_sub(1);
                    if sy >= h {
                        dst.fill(0.0);
                        continue;
                    }
                    dst[..ox0].fill(0.0);
                    dst[ox1..].fill(0.0);
                    let sx0 = ox0 + kx - 1;
                    dst[ox0..ox1].copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + (ox1 - ox0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatter-adds each shifted row of the band back
/// into `out`, a `(c, h, w)` buffer.
fn col2im3(cols: &[f64], r0: usize, r1: usize, (c, h, w): (usize, usize, usize), out: &mut [f64]) {
    let hw = h * w;
    let t = (r1 - r0) * w;
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * t..][..t];
                let (ox0, ox1) = valid_cols(kx, w);
                for oy in r0..r1 {
                    let sy = (oy + ky).wrapping_sub(1);
                    if sy >= h {
                        continue;
                    }
                    let src = &row[(oy - r0) * w + ox0..(oy - r0) * w + ox1];
                    let sx0 = ox0 + kx - 1;
                    for (d, s) in plane[sy * w + sx0..].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub fn relu_inplace(t: &mut Tensor3) {
    t.values_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes the gradient wherever the activation was clipped.
pub fn relu_backward_inplace(grad: &mut Tensor3, activation: &Tensor3) {
    for (g, &a) in grad.values_mut().iter_mut().zip(activation.values()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling; returns the pooled tensor and, per output element, the
/// flat input index of the selected maximum.
pub fn maxpool2(x: &Tensor3) -> (Tensor3, Vec<usize>) {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let src = x.values();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    (Tensor3::from_raw(c, oh, ow, out), argmax)
}

pub fn maxpool2_backward(grad: &Tensor3, argmax: &[usize], input_shape: (usize, usize, usize)) -> Tensor3 {
    let (c, h, w) = input_shape;
    let mut out = vec![0.0; c * h * w];
    for (&g, &idx) in grad.values().iter().zip(argmax) {
        out[idx] += g;
    }
    Tensor3::from_raw(c, h, w, out)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor3) -> Tensor3 {
    let (c, h, w) = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let src = x.values();
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            let src_row = &src[(ci * h + y / 2) * w..][..w];
            let dst_row = &mut out[(ci * oh + y) * ow..][..ow];
            for (x2, d) in dst_row.iter_mut().enumerate() {
                *d = src_row[x2 / 2];
            }
        }
    }
    Tensor3::from_raw(c, oh, ow, out)
}

/// Adjoint of [`upsample2`]: sums each 2x2 replication block.
pub fn upsample2_backward(grad: &Tensor3) -> Tensor3 {
    let (c, oh, ow) = grad.shape();
    let (h, w) = (oh / 2, ow / 2);
    let src = grad.values();
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            let src_row = &src[(ci * oh + y) * ow..][..ow];
            let dst_row = &mut out[(ci * h + y / 2) * w..][..w];
            for (x2, &g) in src_row.iter().enumerate() {
                dst_row[x2 / 2] += g;
            }
        }
    }
    Tensor3::from_raw(c, h, w, out)
}

/// Channel concatenation `[a; b]`.
pub fn concat(a: &Tensor3, b: &Tensor3) -> Result<Tensor3> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut values = Vec::with_capacity(a.values().len() + b.values().len());
    values.extend_from_slice(a.values());
    values.extend_from_slice(b.values());
    Ok(Tensor3::from_raw(a.channels() + b.channels(), a.height(), a.width(), values))
}

/// Splits a gradient of `[a; b]` into the parts for `a` (first
/// `a_channels`) and `b`.
pub fn split_channels(grad: &Tensor3, a_channels: usize) -> (Tensor3, Tensor3) {
    let (c, h, w) = grad.shape();
    let (left, right) = grad.values().split_at(a_channels * h * w);
    (
        Tensor3::from_raw(a_channels, h, w, left.to_vec()),
        Tensor3::from_raw(c - a_channels, h, w, right.to_vec()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct 7-loop cross-correlation with zero padding.
    fn naive_conv(layer: &Conv2d, x: &Tensor3) -> Vec<f64> {
        let (c, h, w) = x.shape();
        let k = layer.spec.kernel;
        let pad = (k / 2) as isize;
        let mut out = Vec::new();
        for co in 0..layer.spec.out_channels {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = layer.bias[co];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wt = layer.weight[((co * c + ci) * k + ky) * k + kx];
                                acc += wt * x.get(ci, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let mut layer = Conv2d::zeros(ConvSpec::new(1, 1, 3));
        layer.weight[4] = 1.0;
        let x = random_tensor(1, 6, 5, 1);
        assert_eq!(layer.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut layer = Conv2d::zeros(ConvSpec::new(2, 3, 3));
        layer.bias = vec![0.5, -1.0, 2.0];
        let y = layer.forward(&random_tensor(2, 4, 4, 2)).unwrap();
        for co in 0..3 {
            assert!(y.plane(co).iter().all(|&v| v == layer.bias[co]));
        }
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let mut layer = Conv2d::zeros(ConvSpec::new(1, 1, 3));
        layer.weight = vec![1.0; 9];
        let x = Tensor3::new(1, 3, 3, vec![1.0; 9]).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.values(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (cin, cout, k) in [(3, 4, 3), (5, 2, 3), (4, 1, 1)] {
            let layer = Conv2d::he_init(ConvSpec::new(cin, cout, k), &mut rng);
            let x = random_tensor(cin, 7, 9, 3);
            let fast = layer.forward(&x).unwrap();
            for (a, b) in fast.values().iter().zip(naive_conv(&layer, &x)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch() {
        let layer = Conv2d::zeros(ConvSpec::new(3, 1, 3));
        assert!(matches!(layer.forward(&Tensor3::zeros(2, 4, 4)), Err(Error::Shape(_))));
    }

    #[test]
    fn im2col_adjoint_identity() {
        // <im2col(x), y> == <x, col2im(y)>, for whole images and bands
        let x = random_tensor(2, 5, 6, 4);
        for (r0, r1) in [(0, 5), (1, 3), (4, 5)] {
            let mut cols = vec![f64::NAN; 18 * (r1 - r0) * 6];
            im2col3(&x, r0, r1, &mut cols);
            let y: Vec<f64> = random_tensor(18, r1 - r0, 6, 5).into_values();
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut back = vec![0.0; 60];
            col2im3(&y, r0, r1, (2, 5, 6), &mut back);
            let rhs: f64 = x.values().iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn banded_conv_matches_naive_on_tall_inputs() {
        // tall narrow images are split into several row bands
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = Conv2d::he_init(ConvSpec::new(2, 3, 3), &mut rng);
        let x = random_tensor(2, 300, 2, 9);
        let got = layer.forward(&x).unwrap();
        for (a, b) in got.values().iter().zip(naive_conv(&layer, &x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layer = Conv2d::he_init(ConvSpec::new(3, 2, 3), &mut rng);
        let x = random_tensor(3, 6, 6, 6);
        let g = random_tensor(2, 6, 6, 7);
        let mut grad = Conv2d::zeros(layer.spec);
        let dx = layer.backward(&x, &g, &mut grad, true).unwrap().unwrap();
        // linear part of the layer: y - b
        let mut no_bias = layer.clone();
        no_bias.bias = vec![0.0; 2];
        let y = no_bias.forward(&x).unwrap();
        let lhs: f64 = y.values().iter().zip(g.values()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.values().iter().zip(dx.values()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // and in the weights: <dW, W> == <y - b, g>
        let wdot: f64 = grad.weight.iter().zip(&layer.weight).map(|(a, b)| a * b).sum();
        assert!((wdot - lhs).abs() < 1e-10);
        for (co, gb) in grad.bias.iter().enumerate() {
            assert!((gb - g.plane(co).iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_and_upsample() {
        let x = Tensor3::new(1, 2, 4, vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 9.0, 0.0]).unwrap();
        let (p, idx) = maxpool2(&x);
        assert_eq!(p.values(), &[5.0, 9.0]);
        assert_eq!(idx, vec![1, 6]);
        let g = Tensor3::new(1, 1, 2, vec![0.5, -1.0]).unwrap();
        let back = maxpool2_backward(&g, &idx, x.shape());
        assert_eq!(back.values(), &[0.0, 0.5, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0]);

        let up = upsample2(&p);
        assert_eq!(up.values(), &[5.0, 5.0, 9.0, 9.0, 5.0, 5.0, 9.0, 9.0]);
        let down = upsample2_backward(&up);
        assert_eq!(down.values(), &[20.0, 36.0]);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = random_tensor(2, 3, 3, 1);
        let b = random_tensor(3, 3, 3, 2);
        let ab = concat(&a, &b).unwrap();
        assert_eq!(ab.shape(), (5, 3, 3));
        assert!(concat(&a, &random_tensor(1, 2, 3, 3)).is_err());
        let (a2, b2) = split_channels(&ab, 2);
        assert_eq!((a2, b2), (a, b));
    }
}
