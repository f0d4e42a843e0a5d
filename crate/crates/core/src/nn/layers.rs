//! Dense, 3D convolution and 3D transposed-convolution layers with explicit
//! backward passes.
//!
//! Activations are channel-major `[channels, d, h, w]` flat buffers. Both
//! convolution flavours share one `im2col` geometry: the "wide" grid is the
//! convolution input (and the transposed convolution output) and the
//! "narrow" grid is the convolution output.

use rand_distr::{Distribution, Normal};

use crate::rng::Rng;

/// `C = alpha * op(A) * op(B) + beta * C` with row-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // op(A) is m x k; stored as k x m when transposed.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub wide: [usize; 3],
    pub narrow: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(channels: usize, wide: [usize; 3], kernel: usize, stride: usize, pad: usize) -> Self {
        let narrow = wide.map(|n| (n + 2 * pad - kernel) / stride + 1);
        Self {
            channels,
            wide,
            narrow,
            kernel,
            stride,
            pad,
        }
    }

    pub fn wide_len(&self) -> usize {
        self.wide.iter().product()
    }

    pub fn narrow_len(&self) -> usize {
        self.narrow.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    /// Wide-grid source index per kernel offset `(k, o)` along one axis,
    /// `None` when the tap lands in padding.
    fn axis_table(&self, axis: usize) -> Vec<Option<usize>> {
        let (k, wide, narrow) = (self.kernel, self.wide[axis], self.narrow[axis]);
        let mut table = Vec::with_capacity(k * narrow);
        for kk in 0..k {
            for o in 0..narrow {
                let pos = (o * self.stride + kk) as isize - self.pad as isize;
                table.push((pos >= 0 && (pos as usize) < wide).then_some(pos as usize));
            }
        }
        table
    }

    /// Unfolds `wide` (`[channels, wide]`) into `[channels * k^3, narrow]`.
    pub fn im2col(&self, wide: &[f32], cols: &mut [f32]) {
        debug_assert_eq!(wide.len(), self.channels * self.wide_len());
        debug_assert_eq!(cols.len(), self.channels * self.taps() * self.narrow_len());
        let [td, th, tw] = [0, 1, 2].map(|a| self.axis_table(a));
        let [nd, nh, nw] = self.narrow;
        let [_, wh, ww] = self.wide;
        let k = self.kernel;
        let mut row = 0;
        for c in 0..self.channels {
            let src = &wide[c * self.wide_len()..(c + 1) * self.wide_len()];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let out = &mut cols[row * self.narrow_len()..(row + 1) * self.narrow_len()];
                        let mut i = 0;
                        for od in 0..nd {
                            let sd = td[kd * nd + od];
                            for oh in 0..nh {
                                let sh = th[kh * nh + oh];
                                for ow in 0..nw {
                                    out[i] = match (sd, sh, tw[kw * nw + ow]) {
                                        (Some(d), Some(h), Some(w)) => src[(d * wh + h) * ww + w],
                                        _ => 0.0,
                                    };
                                    i += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters-adds `cols` into `wide`.
    pub fn col2im(&self, cols: &[f32], wide: &mut [f32]) {
        debug_assert_eq!(wide.len(), self.channels * self.wide_len());
        let [td, th, tw] = [0, 1, 2].map(|a| self.axis_table(a));
        let [nd, nh, nw] = self.narrow;
        let [_, wh, ww] = self.wide;
        let k = self.kernel;
        let wide_len = self.wide_len();
        let mut row = 0;
        for c in 0..self.channels {
            let dst = &mut wide[c * wide_len..(c + 1) * wide_len];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let src = &cols[row * self.narrow_len()..(row + 1) * self.narrow_len()];
                        let mut i = 0;
                        for od in 0..nd {
                            let sd = td[kd * nd + od];
                            for oh in 0..nh {
                                let sh = th[kh * nh + oh];
                                for ow in 0..nw {
                                    if let (Some(d), Some(h), Some(w)) = (sd, sh, tw[kw * nw + ow]) {
                                        dst[(d * wh + h) * ww + w] += src[i];
                                    }
                                    i += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

fn he_normal(rng: &mut Rng, len: usize, fan_in: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| normal.sample(rng) as f32).collect()
}

/// `y = W x + b`, `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng, gain: f32) -> Self {
        let mut weight = he_normal(rng, in_features * out_features, in_features);
        weight.iter_mut().for_each(|w| *w *= gain);
        Self {
            in_features,
            out_features,
            weight,
            bias: vec![0.0; out_features],
        }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let mut y = self.bias.clone();
        gemm(self.out_features, self.in_features, 1, &self.weight, false, x, false, &mut y, true);
        y
    }

    /// Accumulates parameter gradients; returns `dL/dx` when requested.
    pub fn backward(
        &self,
        x: &[f32],
        grad_out: &[f32],
        grad_weight: &mut [f32],
        grad_bias: &mut [f32],
        need_input_grad: bool,
    ) -> Option<Vec<f32>> {
        gemm(self.out_features, 1, self.in_features, grad_out, false, x, false, grad_weight, true);
        for (gb, g) in grad_bias.iter_mut().zip(grad_out) {
            *gb += g;
        }
        need_input_grad.then(|| {
            let mut gx = vec![0.0; self.in_features];
            gemm(self.in_features, self.out_features, 1, &self.weight, true, grad_out, false, &mut gx, false);
            gx
        })
    }
}

/// Strided 3D convolution, weights `[out, in * k^3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub geometry: ConvGeometry,
    pub out_channels: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv3d {
    pub fn new(geometry: ConvGeometry, out_channels: usize, rng: &mut Rng) -> Self {
        let fan_in = geometry.channels * geometry.taps();
        Self {
            geometry,
            out_channels,
            weight: he_normal(rng, out_channels * fan_in, fan_in),
            bias: vec![0.0; out_channels],
        }
    }

    fn patch_len(&self) -> usize {
        self.geometry.channels * self.geometry.taps()
    }

    /// Returns `(output, unfolded input)`; the latter feeds `backward`.
    pub fn forward(&self, input: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let g = &self.geometry;
        let n = g.narrow_len();
        let mut cols = vec![0.0; self.patch_len() * n];
        g.im2col(input, &mut cols);
        let mut out = vec![0.0; self.out_channels * n];
        for (c, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(self.bias[c]);
        }
        gemm(self.out_channels, self.patch_len(), n, &self.weight, false, &cols, false, &mut out, true);
        (out, cols)
    }

    pub fn backward(
        &self,
        cols: &[f32],
        grad_out: &[f32],
        grad_weight: &mut [f32],
        grad_bias: &mut [f32],
        need_input_grad: bool,
    ) -> Option<Vec<f32>> {
        let g = &self.geometry;
        let n = g.narrow_len();
        gemm(self.out_channels, n, self.patch_len(), grad_out, false, cols, true, grad_weight, true);
        for (gb, chunk) in grad_bias.iter_mut().zip(grad_out.chunks(n)) {
            *gb += chunk.iter().sum::<f32>();
        }
        need_input_grad.then(|| {
            let mut dcols = vec![0.0; self.patch_len() * n];
            gemm(self.patch_len(), self.out_channels, n, &self.weight, true, grad_out, false, &mut dcols, false);
            let mut gx = vec![0.0; g.channels * g.wide_len()];
            g.col2im(&dcols, &mut gx);
            gx
        })
    }
}

/// Strided 3D transposed convolution: the adjoint of a [`Conv3d`] with the
/// same geometry. `geometry.channels` is the *output* channel count and
/// weights are stored `[in, out * k^3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose3d {
    pub geometry: ConvGeometry,
    pub in_channels: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvTranspose3d {
    pub fn new(geometry: ConvGeometry, in_channels: usize, rng: &mut Rng, gain: f32) -> Self {
        let patch = geometry.channels * geometry.taps();
        // Each output voxel sees about in * (k / stride)^3 inputs.
        let fan_in = (in_channels * geometry.taps() / geometry.stride.pow(3)).max(1);
        let mut weight = he_normal(rng, in_channels * patch, fan_in);
        weight.iter_mut().for_each(|w| *w *= gain);
        Self {
            geometry,
            in_channels,
            weight,
            bias: vec![0.0; geometry.channels],
        }
    }

    fn patch_len(&self) -> usize {
        self.geometry.channels * self.geometry.taps()
    }

    pub fn forward(&self, input: &[f32]) -> Vec<f32> {
        let g = &self.geometry;
        let n = g.narrow_len();
        let mut cols = vec![0.0; self.patch_len() * n];
        gemm(self.patch_len(), self.in_channels, n, &self.weight, true, input, false, &mut cols, false);
        let wide = g.wide_len();
        let mut out = vec![0.0; g.channels * wide];
        for (c, chunk) in out.chunks_mut(wide).enumerate() {
            chunk.fill(self.bias[c]);
        }
        g.col2im(&cols, &mut out);
        out
    }

    pub fn backward(
        &self,
        input: &[f32],
        grad_out: &[f32],
        grad_weight: &mut [f32],
        grad_bias: &mut [f32],
        need_input_grad: bool,
    ) -> Option<Vec<f32>> {
        let g = &self.geometry;
        let n = g.narrow_len();
        let wide = g.wide_len();
        for (gb, chunk) in grad_bias.iter_mut().zip(grad_out.chunks(wide)) {
            *gb += chunk.iter().sum::<f32>();
        }
        let mut dcols = vec![0.0; self.patch_len() * n];
        g.im2col(grad_out, &mut dcols);
        gemm(self.in_channels, n, self.patch_len(), input, false, &dcols, true, grad_weight, true);
        need_input_grad.then(|| {
            let mut gx = vec![0.0; self.in_channels * n];
            gemm(self.in_channels, self.patch_len(), n, &self.weight, false, &dcols, false, &mut gx, false);
            gx
        })
    }
}

pub fn leaky_relu(x: &mut [f32], slope: f32) {
    for v in x {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Multiplies `grad` by the leaky-ReLU derivative, read off the activated
/// output (the sign is preserved for positive slopes).
pub fn leaky_relu_backward(activated: &[f32], grad: &mut [f32], slope: f32) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a < 0.0 {
            *g *= slope;
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    fn random(rng: &mut Rng, n: usize) -> Vec<f32> {
        he_normal(rng, n, 2)
    }

    #[test]
    fn geometry_halves() {
        let g = ConvGeometry::new(3, [8, 6, 4], 4, 2, 1);
        assert_eq!(g.narrow, [4, 3, 2]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut r = rng::stream(1, 0);
        let g = ConvGeometry::new(2, [6, 4, 8], 4, 2, 1);
        let x = random(&mut r, 2 * g.wide_len());
        let y = random(&mut r, 2 * 64 * g.narrow_len());
        let mut cols = vec![0.0; y.len()];
        g.im2col(&x, &mut cols);
        let mut back = vec![0.0; x.len()];
        g.col2im(&y, &mut back);
        let (lhs, rhs) = (dot(&cols, &y), dot(&x, &back));
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut r = rng::stream(2, 0);
        let g = ConvGeometry::new(2, [4, 4, 4], 4, 2, 1);
        let conv = Conv3d::new(g, 3, &mut r);
        let x = random(&mut r, 2 * 64);
        let (y, _) = conv.forward(&x);
        // direct evaluation at output (oc=1, 1, 0, 1)
        let (oc, o) = (1, [1usize, 0, 1]);
        let mut expected = conv.bias[oc] as f64;
        for c in 0..2 {
            for kd in 0..4 {
                for kh in 0..4 {
                    for kw in 0..4 {
                        let p = [o[0] * 2 + kd, o[1] * 2 + kh, o[2] * 2 + kw].map(|v| v as isize - 1);
                        if p.iter().any(|&v| !(0..4).contains(&v)) {
                            continue;
                        }
                        let xi = c * 64 + ((p[0] * 4 + p[1]) * 4 + p[2]) as usize;
                        let wi = oc * 128 + c * 64 + (kd * 4 + kh) * 4 + kw;
                        expected += conv.weight[wi] as f64 * x[xi] as f64;
                    }
                }
            }
        }
        let got = y[oc * 8 + (o[0] * 2 + o[1]) * 2 + o[2]] as f64;
        assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        let mut r = rng::stream(3, 0);
        let g = ConvGeometry::new(2, [4, 8, 4], 4, 2, 1);
        let mut conv = Conv3d::new(g, 3, &mut r);
        let mut deconv = ConvTranspose3d::new(g, 3, &mut r, 1.0);
        conv.bias.fill(0.0);
        deconv.bias.fill(0.0);
        // share weights: conv [out=3, in=2*k^3] equals deconv [in=3, out=2*k^3]
        deconv.weight = conv.weight.clone();
        let x = random(&mut r, 2 * g.wide_len());
        let y = random(&mut r, 3 * g.narrow_len());
        let (cx, _) = conv.forward(&x);
        let ty = deconv.forward(&y);
        let (lhs, rhs) = (dot(&cx, &y), dot(&x, &ty));
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    /// Finite-difference check of every layer's backward pass on the scalar
    /// loss `sum(r * forward(x))` for a fixed random `r`.
    #[test]
    fn backward_passes_match_finite_differences() {
        let mut r = rng::stream(4, 0);
        let g = ConvGeometry::new(2, [4, 4, 4], 4, 2, 1);
        let conv = Conv3d::new(g, 3, &mut r);
        let deconv = ConvTranspose3d::new(g, 3, &mut r, 1.0);
        let lin = Linear::new(5, 4, &mut r, 1.0);

        let check = |analytic: &[f32], f: &dyn Fn(usize, f32) -> f64, idx: &[usize]| {
            for &i in idx {
                let h = 1e-2f32;
                let fd = (f(i, h) - f(i, -h)) / (2.0 * h as f64);
                let a = analytic[i] as f64;
                assert!((fd - a).abs() <= 2e-3 * fd.abs().max(1.0), "index {i}: fd {fd} vs {a}");
            }
        };

        // conv
        let x = random(&mut r, 2 * 64);
        let rw = random(&mut r, 3 * 8);
        let (_, cols) = conv.forward(&x);
        let mut gw = vec![0.0; conv.weight.len()];
        let mut gb = vec![0.0; 3];
        let gx = conv.backward(&cols, &rw, &mut gw, &mut gb, true).unwrap();
        check(&gx, &|i, h| {
            let mut xp = x.clone();
            xp[i] += h;
            dot(&conv.forward(&xp).0, &rw)
        }, &[0, 17, 63, 100]);
        check(&gw, &|i, h| {
            let mut c = conv.clone();
            c.weight[i] += h;
            dot(&c.forward(&x).0, &rw)
        }, &[0, 5, 130, 383]);
        check(&gb, &|i, h| {
            let mut c = conv.clone();
            c.bias[i] += h;
            dot(&c.forward(&x).0, &rw)
        }, &[0, 2]);

        // transposed conv
        let y = random(&mut r, 3 * 8);
        let rx = random(&mut r, 2 * 64);
        let mut gw = vec![0.0; deconv.weight.len()];
        let mut gb = vec![0.0; 2];
        let gy = deconv.backward(&y, &rx, &mut gw, &mut gb, true).unwrap();
        check(&gy, &|i, h| {
            let mut yp = y.clone();
            yp[i] += h;
            dot(&deconv.forward(&yp), &rx)
        }, &[0, 7, 23]);
        check(&gw, &|i, h| {
            let mut d = deconv.clone();
            d.weight[i] += h;
            dot(&d.forward(&y), &rx)
        }, &[0, 77, 200, 383]);
        check(&gb, &|i, h| {
            let mut d = deconv.clone();
            d.bias[i] += h;
            dot(&d.forward(&y), &rx)
        }, &[0, 1]);

        // linear
        let v = random(&mut r, 5);
        let ro = random(&mut r, 4);
        let mut gw = vec![0.0; 20];
        let mut gb = vec![0.0; 4];
        let gv = lin.backward(&v, &ro, &mut gw, &mut gb, true).unwrap();
        check(&gv, &|i, h| {
            let mut vp = v.clone();
            vp[i] += h;
            dot(&lin.forward(&vp), &ro)
        }, &[0, 4]);
        check(&gw, &|i, h| {
            let mut l = lin.clone();
            l.weight[i] += h;
            dot(&l.forward(&v), &ro)
        }, &[0, 9, 19]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-200.0) >= 0.0 && sigmoid(-200.0) < 1e-30);
        assert_eq!(sigmoid(200.0), 1.0);
    }
}
