//! Minimal CPU neural-network layers with hand-written backward passes.
//!
//! Activations are single-sample `(channels, height, width)` arrays.
//! Convolution goes through im2col and a gemm so the hot loops hit
//! matrixmultiply. Everything is generic over f32 (training/inference) and
//! f64 (finite-difference verification).

use ndarray::{Array1, Array2, Array3, Array4, Axis};

/// Element type of all network tensors.
pub trait Scalar: ndarray::NdFloat {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Largest divisor of `channels` not exceeding 8.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Unfold `x` (cin, h, w) into (cin*kh*kw, oh*ow) patches.
fn im2col<A: Scalar>(
    x: &Array3<A>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<A> {
    let (cin, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<A>::zeros((cin * kh * kw, oh * ow));
    let xs = x.as_slice().expect("contiguous input");
    let cs = cols.as_slice_mut().expect("contiguous cols");
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_base = ci * h * w + iy as usize * w;
                    let dst_base = base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cs[dst_base + ox] = xs[src_base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold patch gradients back onto the input grid (adjoint of [`im2col`]).
fn col2im<A: Scalar>(
    dcols: &Array2<A>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<A> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut dx = Array3::<A>::zeros((cin, h, w));
    let ds = dcols.as_slice().expect("contiguous dcols");
    let xs = dx.as_slice_mut().expect("contiguous dx");
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = ci * h * w + iy as usize * w;
                    let src_base = base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xs[dst_base + ix as usize] += ds[src_base + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Learnable 2D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<A> {
    pub weight: Array4<A>, // (cout, cin, kh, kw)
    pub bias: Array1<A>,
    pub stride: usize,
    pub pad: usize,
}

impl<A: Scalar> Conv2d<A> {
    pub fn forward(&self, x: &Array3<A>) -> Array3<A> {
        let (cout, cin, kh, kw) = self.weight.dim();
        debug_assert_eq!(cin, x.dim().0);
        let (_, h, w) = x.dim();
        let oh = conv_out_len(h, kh, self.stride, self.pad);
        let ow = conv_out_len(w, kw, self.stride, self.pad);
        let cols = im2col(x, kh, kw, self.stride, self.pad);
        let wmat = self
            .weight
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("weight reshape");
        let mut y2 = wmat.dot(&cols);
        for (mut row, b) in y2.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + *b);
        }
        y2.into_shape_with_order((cout, oh, ow)).expect("y reshape")
    }

    /// Returns `dx`; accumulates `dweight`/`dbias` into `grad`.
    pub fn backward(&self, x: &Array3<A>, dy: &Array3<A>, grad: &mut Conv2d<A>) -> Array3<A> {
        let (cout, cin, kh, kw) = self.weight.dim();
        let (_, h, w) = x.dim();
        let (_, oh, ow) = dy.dim();
        let cols = im2col(x, kh, kw, self.stride, self.pad);
        let dy2 = dy
            .view()
            .into_shape_with_order((cout, oh * ow))
            .expect("dy reshape");
        let dw = dy2.dot(&cols.t());
        grad.weight
            .view_mut()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("dw reshape")
            .zip_mut_with(&dw, |a, b| *a += *b);
        for (g, row) in grad.bias.iter_mut().zip(dy2.axis_iter(Axis(0))) {
            *g += row.sum();
        }
        let wmat = self
            .weight
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .expect("weight reshape");
        let dcols = wmat.t().dot(&dy2);
        col2im(&dcols, cin, h, w, kh, kw, self.stride, self.pad)
    }
}

/// Learnable affine group normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm<A> {
    pub gamma: Array1<A>,
    pub beta: Array1<A>,
    pub groups: usize,
}

pub struct GroupNormCache<A> {
    pub xhat: Array3<A>,
    pub inv_std: Vec<A>,
}

impl<A: Scalar> GroupNorm<A> {
    pub fn forward(&self, x: &Array3<A>) -> (Array3<A>, GroupNormCache<A>) {
        let (c, h, w) = x.dim();
        let cpg = c / self.groups;
        let n = A::from_f64((cpg * h * w) as f64);
        let eps = A::from_f64(GROUP_NORM_EPS);
        let mut xhat = Array3::<A>::zeros((c, h, w));
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let sl = ndarray::s![g * cpg..(g + 1) * cpg, .., ..];
            let xs = x.slice(sl);
            let mean = xs.sum() / n;
            let var = xs.mapv(|v| (v - mean) * (v - mean)).sum() / n;
            let istd = A::one() / (var + eps).sqrt();
            inv_std.push(istd);
            let mut dst = xhat.slice_mut(sl);
            dst.zip_mut_with(&xs, |d, &s| *d = (s - mean) * istd);
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let (ga, be) = (self.gamma[ci], self.beta[ci]);
            y.index_axis_mut(Axis(0), ci).mapv_inplace(|v| ga * v + be);
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &GroupNormCache<A>,
        dy: &Array3<A>,
        grad: &mut GroupNorm<A>,
    ) -> Array3<A> {
        let (c, h, w) = dy.dim();
        let cpg = c / self.groups;
        let n = A::from_f64((cpg * h * w) as f64);
        for ci in 0..c {
            let dyc = dy.index_axis(Axis(0), ci);
            let xc = cache.xhat.index_axis(Axis(0), ci);
            grad.gamma[ci] += dyc
                .iter()
                .zip(xc.iter())
                .fold(A::zero(), |acc, (&a, &b)| acc + a * b);
            grad.beta[ci] += dyc.sum();
        }
        let mut dx = Array3::<A>::zeros((c, h, w));
        for g in 0..self.groups {
            let sl = ndarray::s![g * cpg..(g + 1) * cpg, .., ..];
            let xh = cache.xhat.slice(sl);
            let dyg = dy.slice(sl);
            // dxhat = dy * gamma (per channel)
            let mut dxhat = dyg.to_owned();
            for (ci_local, mut plane) in dxhat.axis_iter_mut(Axis(0)).enumerate() {
                let ga = self.gamma[g * cpg + ci_local];
                plane.mapv_inplace(|v| v * ga);
            }
            let sum_dxhat = dxhat.sum();
            let sum_dxhat_xhat = dxhat
                .iter()
                .zip(xh.iter())
                .fold(A::zero(), |acc, (&a, &b)| acc + a * b);
            let istd = cache.inv_std[g];
            let mut dst = dx.slice_mut(sl);
            ndarray::Zip::from(&mut dst)
                .and(&dxhat)
                .and(&xh)
                .for_each(|d, &dh, &x| {
                    *d = istd / n * (n * dh - sum_dxhat - x * sum_dxhat_xhat);
                });
        }
        dx
    }
}

/// Learnable dense layer on vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<A> {
    pub weight: Array2<A>, // (out, in)
    pub bias: Array1<A>,
}

impl<A: Scalar> Linear<A> {
    pub fn forward(&self, x: &Array1<A>) -> Array1<A> {
        self.weight.dot(x) + &self.bias
    }

    pub fn backward(&self, x: &Array1<A>, dy: &Array1<A>, grad: &mut Linear<A>) -> Array1<A> {
        for (i, &d) in dy.iter().enumerate() {
            grad.bias[i] += d;
            for (j, &xv) in x.iter().enumerate() {
                grad.weight[(i, j)] += d * xv;
            }
        }
        self.weight.t().dot(dy)
    }
}

fn sigmoid<A: Scalar>(v: A) -> A {
    A::one() / (A::one() + (-v).exp())
}

/// Gated smooth activation `x * sigmoid(x)`.
pub fn silu<A: Scalar>(x: &Array3<A>) -> Array3<A> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward<A: Scalar>(x: &Array3<A>, dy: &Array3<A>) -> Array3<A> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = sigmoid(v);
        *d = *d * (s * (A::one() + v * (A::one() - s)));
    });
    dx
}

pub fn silu_vec<A: Scalar>(x: &Array1<A>) -> Array1<A> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_vec_backward<A: Scalar>(x: &Array1<A>, dy: &Array1<A>) -> Array1<A> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = sigmoid(v);
        *d = *d * (s * (A::one() + v * (A::one() - s)));
    });
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2<A: Scalar>(x: &Array3<A>) -> Array3<A> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<A>::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for r in 0..2 * h {
            for col in 0..2 * w {
                y[(ci, r, col)] = x[(ci, r / 2, col / 2)];
            }
        }
    }
    y
}

pub fn upsample2_backward<A: Scalar>(dy: &Array3<A>) -> Array3<A> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<A>::zeros((c, h, w));
    for ci in 0..c {
        for r in 0..h2 {
            for col in 0..w2 {
                dx[(ci, r / 2, col / 2)] += dy[(ci, r, col)];
            }
        }
    }
    dx
}

/// Stack two activations along the channel axis.
pub fn concat_channels<A: Scalar>(a: &Array3<A>, b: &Array3<A>) -> Array3<A> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("channel concat")
}

/// Split a channel gradient back into the two concatenated parts.
pub fn split_channels<A: Scalar>(d: &Array3<A>, first: usize) -> (Array3<A>, Array3<A>) {
    let a = d.slice(ndarray::s![..first, .., ..]).to_owned();
    let b = d.slice(ndarray::s![first.., .., ..]).to_owned();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};

    fn rand_array3(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn((c, h, w), |_| rng.random::<f64>() - 0.5)
    }

    fn rand_conv(cout: usize, cin: usize, k: usize, stride: usize, pad: usize, seed: u64) -> Conv2d<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Conv2d {
            weight: Array::from_shape_fn((cout, cin, k, k), |_| rng.random::<f64>() - 0.5),
            bias: Array::from_shape_fn(cout, |_| rng.random::<f64>() - 0.5),
            stride,
            pad,
        }
    }

    fn zeros_like_conv(c: &Conv2d<f64>) -> Conv2d<f64> {
        Conv2d {
            weight: Array4::zeros(c.weight.dim()),
            bias: Array1::zeros(c.bias.dim()),
            stride: c.stride,
            pad: c.pad,
        }
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 conv with unit weight passes the input through
        let conv = Conv2d {
            weight: Array4::from_elem((1, 1, 1, 1), 1.0),
            bias: Array1::zeros(1),
            stride: 1,
            pad: 0,
        };
        let x = rand_array3(1, 5, 5, 0);
        assert_eq!(conv.forward(&x), x);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = rand_array3(2, 6, 6, 1);
        let conv = rand_conv(3, 2, 3, 1, 1, 2);
        let dy = rand_array3(3, 6, 6, 3);
        let loss = |c: &Conv2d<f64>, x: &Array3<f64>| -> f64 {
            (c.forward(x) * &dy).sum()
        };
        let mut grad = zeros_like_conv(&conv);
        let dx = conv.backward(&x, &dy, &mut grad);
        let h = 1e-6;
        // weight coords
        for idx in [(0, 0, 0, 0), (1, 1, 2, 1), (2, 0, 1, 2)] {
            let mut cp = conv.clone();
            cp.weight[idx] += h;
            let mut cm = conv.clone();
            cm.weight[idx] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - grad.weight[idx]).abs() < 1e-6, "weight {:?}", idx);
        }
        // input coords
        for idx in [(0, 0, 0), (1, 3, 4), (0, 5, 5)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "input {:?}", idx);
        }
    }

    #[test]
    fn strided_conv_shapes() {
        let conv = rand_conv(4, 2, 3, 2, 1, 5);
        let x = rand_array3(2, 8, 8, 6);
        assert_eq!(conv.forward(&x).dim(), (4, 4, 4));
    }

    #[test]
    fn groupnorm_normalizes_and_backward_matches_fd() {
        let x = rand_array3(4, 3, 3, 7);
        let gn = GroupNorm {
            gamma: Array1::from_elem(4, 1.3),
            beta: Array1::from_elem(4, -0.2),
            groups: 2,
        };
        let (y, cache) = gn.forward(&x);
        // per-group mean ~ beta, since xhat has zero mean
        let mean = y.slice(ndarray::s![..2, .., ..]).sum() / 18.0;
        assert!((mean - -0.2).abs() < 1e-10);

        let dy = rand_array3(4, 3, 3, 8);
        let mut grad = GroupNorm {
            gamma: Array1::zeros(4),
            beta: Array1::zeros(4),
            groups: 2,
        };
        let dx = gn.backward(&cache, &dy, &mut grad);
        let h = 1e-6;
        let loss = |x: &Array3<f64>| (gn.forward(x).0 * &dy).sum();
        for idx in [(0, 0, 0), (2, 1, 2), (3, 2, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-5, "gn input {:?}", idx);
        }
    }

    #[test]
    fn silu_backward_matches_fd() {
        let x = rand_array3(2, 4, 4, 9);
        let dy = rand_array3(2, 4, 4, 10);
        let dx = silu_backward(&x, &dy);
        let h = 1e-6;
        let idx = (1, 2, 3);
        let mut xp = x.clone();
        xp[idx] += h;
        let mut xm = x.clone();
        xm[idx] -= h;
        let fd = ((silu(&xp) * &dy).sum() - (silu(&xm) * &dy).sum()) / (2.0 * h);
        assert!((fd - dx[idx]).abs() < 1e-8);
    }

    #[test]
    fn upsample_roundtrip_adjoint() {
        // <up(x), y> == <x, up^T(y)>
        let x = rand_array3(3, 4, 4, 11);
        let y = rand_array3(3, 8, 8, 12);
        let lhs = (upsample2(&x) * &y).sum();
        let rhs = (x * &upsample2_backward(&y)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = rand_array3(2, 3, 3, 13);
        let b = rand_array3(3, 3, 3, 14);
        let c = concat_channels(&a, &b);
        let (a2, b2) = split_channels(&c, 2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn norm_groups_divides() {
        assert_eq!(norm_groups(16), 8);
        assert_eq!(norm_groups(32), 8);
        assert_eq!(norm_groups(4), 4);
        assert_eq!(norm_groups(3), 3);
        assert_eq!(norm_groups(6), 6);
        assert_eq!(norm_groups(7), 7);
    }
}
