//! Complex 2D Fourier transforms, k-space zero padding, striped undersampling
//! masks, and root-sum-of-squares coil combination.
//!
//! Conventions, fixed once for the whole toolkit:
//! - centered spectrum: the DC component sits at index `n/2` on each axis;
//! - orthonormal scaling `1/sqrt(h*w)`, so `idft2(dft2(x)) == x` and the L2
//!   norm is preserved (Parseval) without extra constants;
//! - padding places the source block starting at `(target - source) / 2`;
//! - mask stripes run along rows (the row axis is the phase-encode axis).

use std::collections::BTreeSet;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// h×w complex-valued grid, row major. Represents either k-space samples or a
/// complex image-domain slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("ComplexGrid dimensions must be >= 1"));
        }
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "ComplexGrid data length {} != {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::invalid("ComplexGrid contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![Complex64::ZERO; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    /// Elementwise complex magnitude as a real image.
    pub fn magnitude(&self) -> RealImage {
        RealImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|z| z.norm()).collect(),
        }
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// h×w real-valued grid, row major. Magnitude slices are nonnegative;
/// diffusion states reuse the type and may carry signed values.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RealImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("RealImage dimensions must be >= 1"));
        }
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "RealImage data length {} != {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("RealImage contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Lift to a complex grid with zero imaginary part.
    pub fn to_complex(&self) -> ComplexGrid {
        ComplexGrid {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| Complex64::new(v, 0.0))
                .collect(),
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> RealImage {
        RealImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> RealImage {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Elementwise `a*self + b*other`. Shapes must match.
    pub fn affine(&self, a: f64, other: &RealImage, b: f64) -> Result<RealImage> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::invalid("RealImage shape mismatch"));
        }
        Ok(RealImage {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        })
    }
}

/// Row-selection mask for Cartesian undersampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingMask {
    height: usize,
    kept_rows: BTreeSet<usize>,
}

impl SamplingMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn kept_rows(&self) -> &BTreeSet<usize> {
        &self.kept_rows
    }

    pub fn keeps(&self, row: usize) -> bool {
        self.kept_rows.contains(&row)
    }

    /// Mask keeping every row (identity projection).
    pub fn full(height: usize) -> Result<Self> {
        if height == 0 {
            return Err(Error::invalid("mask height must be >= 1"));
        }
        Ok(Self {
            height,
            kept_rows: (0..height).collect(),
        })
    }
}

/// A set of same-shaped complex grids, one per receive coil.
#[derive(Debug, Clone)]
pub struct CoilStack {
    grids: Vec<ComplexGrid>,
}

impl CoilStack {
    pub fn new(grids: Vec<ComplexGrid>) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::invalid("CoilStack must contain at least one coil"))?;
        let (h, w) = (first.height, first.width);
        if grids.iter().any(|g| g.height != h || g.width != w) {
            return Err(Error::invalid("CoilStack grids must share dimensions"));
        }
        Ok(Self { grids })
    }

    pub fn n_coils(&self) -> usize {
        self.grids.len()
    }

    pub fn grids(&self) -> &[ComplexGrid] {
        &self.grids
    }
}

fn fft_axis(
    grid: &mut [Complex64],
    height: usize,
    width: usize,
    fft: &Arc<dyn Fft<f64>>,
    rows: bool,
) {
    if rows {
        for r in 0..height {
            fft.process(&mut grid[r * width..(r + 1) * width]);
        }
    } else {
        let mut col = vec![Complex64::ZERO; height];
        for c in 0..width {
            for r in 0..height {
                col[r] = grid[r * width + c];
            }
            fft.process(&mut col);
            for r in 0..height {
                grid[r * width + c] = col[r];
            }
        }
    }
}

/// Circular shift moving index `n/2` to 0 (inverse fftshift) when `inverse`,
/// or 0 to `n/2` (fftshift) otherwise, on both axes.
fn shift2(data: &[Complex64], height: usize, width: usize, inverse: bool) -> Vec<Complex64> {
    let (sh, sw) = if inverse {
        (height - height / 2, width - width / 2)
    } else {
        (height / 2, width / 2)
    };
    let mut out = vec![Complex64::ZERO; data.len()];
    for r in 0..height {
        let nr = (r + sh) % height;
        for c in 0..width {
            let nc = (c + sw) % width;
            out[nr * width + nc] = data[r * width + c];
        }
    }
    out
}

fn transform(grid: &ComplexGrid, forward: bool) -> ComplexGrid {
    let (h, w) = (grid.height, grid.width);
    let mut planner = FftPlanner::new();
    let (fft_w, fft_h) = if forward {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    } else {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    };
    // ifftshift -> FFT -> fftshift, with orthonormal scaling.
    let mut data = shift2(&grid.data, h, w, true);
    fft_axis(&mut data, h, w, &fft_w, true);
    fft_axis(&mut data, h, w, &fft_h, false);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for z in &mut data {
        *z *= scale;
    }
    let data = shift2(&data, h, w, false);
    ComplexGrid {
        height: h,
        width: w,
        data,
    }
}

/// Centered, orthonormal 2D discrete Fourier transform.
pub fn dft2(img: &ComplexGrid) -> ComplexGrid {
    transform(img, true)
}

/// Exact inverse of [`dft2`] under the same centering and scaling.
pub fn idft2(k: &ComplexGrid) -> ComplexGrid {
    transform(k, false)
}

/// Embed `k` centered in a `target_h`×`target_w` grid of zeros.
pub fn zero_pad_center(k: &ComplexGrid, target_h: usize, target_w: usize) -> Result<ComplexGrid> {
    if target_h < k.height || target_w < k.width {
        return Err(Error::invalid(format!(
            "pad target {}x{} smaller than source {}x{}",
            target_h, target_w, k.height, k.width
        )));
    }
    let r0 = (target_h - k.height) / 2;
    let c0 = (target_w - k.width) / 2;
    let mut data = vec![Complex64::ZERO; target_h * target_w];
    for r in 0..k.height {
        for c in 0..k.width {
            data[(r0 + r) * target_w + (c0 + c)] = k.data[r * k.width + c];
        }
    }
    Ok(ComplexGrid {
        height: target_h,
        width: target_w,
        data,
    })
}

/// Extract the centered `h`×`w` block; exact inverse of [`zero_pad_center`].
pub fn crop_center(k: &ComplexGrid, h: usize, w: usize) -> Result<ComplexGrid> {
    if h > k.height || w > k.width || h == 0 || w == 0 {
        return Err(Error::invalid("crop size out of range"));
    }
    let r0 = (k.height - h) / 2;
    let c0 = (k.width - w) / 2;
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            data.push(k.data[(r0 + r) * k.width + (c0 + c)]);
        }
    }
    Ok(ComplexGrid {
        height: h,
        width: w,
        data,
    })
}

/// Equispaced row mask: every `accel`-th row starting at row 0, plus a
/// centered autocalibration band of `acs_lines` consecutive rows.
pub fn make_striped_mask(height: usize, accel: usize, acs_lines: usize) -> Result<SamplingMask> {
    if height == 0 {
        return Err(Error::invalid("mask height must be >= 1"));
    }
    if accel == 0 || accel > height {
        return Err(Error::invalid(format!(
            "acceleration {} out of range for height {}",
            accel, height
        )));
    }
    if acs_lines > height {
        return Err(Error::invalid("acs_lines exceeds height"));
    }
    let mut kept: BTreeSet<usize> = (0..height).step_by(accel).collect();
    if acs_lines > 0 {
        let start = height / 2 - acs_lines / 2;
        kept.extend(start..start + acs_lines);
    }
    Ok(SamplingMask {
        height,
        kept_rows: kept,
    })
}

/// Scale the 512-reference ACS width (24 lines) to `height`.
pub fn default_acs_lines(height: usize) -> usize {
    ((height as f64) * 24.0 / 512.0).round() as usize
}

/// Zero every row not kept by the mask.
pub fn apply_mask(k: &ComplexGrid, m: &SamplingMask) -> Result<ComplexGrid> {
    if m.height != k.height {
        return Err(Error::invalid(format!(
            "mask height {} != grid height {}",
            m.height, k.height
        )));
    }
    let mut data = vec![Complex64::ZERO; k.data.len()];
    for &r in &m.kept_rows {
        let base = r * k.width;
        data[base..base + k.width].copy_from_slice(&k.data[base..base + k.width]);
    }
    Ok(ComplexGrid {
        height: k.height,
        width: k.width,
        data,
    })
}

/// Root-sum-of-squares combination of per-coil complex images into one
/// magnitude image.
pub fn rss(coils: &CoilStack) -> RealImage {
    let (h, w) = (coils.grids[0].height, coils.grids[0].width);
    let mut data = vec![0.0; h * w];
    for g in &coils.grids {
        for (acc, z) in data.iter_mut().zip(&g.data) {
            *acc += z.norm_sqr();
        }
    }
    for v in &mut data {
        *v = v.sqrt();
    }
    RealImage {
        height: h,
        width: w,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_grid(h: usize, w: usize, seed: u64) -> ComplexGrid {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w)
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        ComplexGrid::new(h, w, data).unwrap()
    }

    #[test]
    fn dft2_of_centered_impulse_is_flat() {
        let mut data = vec![Complex64::ZERO; 16];
        data[2 * 4 + 2] = Complex64::new(1.0, 0.0);
        let g = ComplexGrid::new(4, 4, data).unwrap();
        let k = dft2(&g);
        for z in k.data() {
            assert_abs_diff_eq!(z.norm(), 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn idft2_of_flat_quarter_is_impulse() {
        let g = ComplexGrid::new(4, 4, vec![Complex64::new(0.25, 0.0); 16]).unwrap();
        let img = idft2(&g);
        for r in 0..4 {
            for c in 0..4 {
                let expect = if (r, c) == (2, 2) { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(img.get(r, c).re, expect, epsilon = 1e-12);
                assert_abs_diff_eq!(img.get(r, c).im, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn idft2_of_zeros_is_zeros() {
        let z = ComplexGrid::zeros(5, 3).unwrap();
        let img = idft2(&z);
        assert!(img.data().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn zero_grid_dimension_rejected() {
        assert!(ComplexGrid::new(0, 4, vec![]).is_err());
        assert!(RealImage::new(3, 0, vec![]).is_err());
    }

    #[test]
    fn pad_2x2_to_4x4_placement() {
        let g = ComplexGrid::new(
            2,
            2,
            vec![
                Complex64::new(1.0, 0.0),
                Complex64::new(2.0, 0.0),
                Complex64::new(3.0, 0.0),
                Complex64::new(4.0, 0.0),
            ],
        )
        .unwrap();
        let p = zero_pad_center(&g, 4, 4).unwrap();
        assert_eq!(p.get(1, 1).re, 1.0);
        assert_eq!(p.get(1, 2).re, 2.0);
        assert_eq!(p.get(2, 1).re, 3.0);
        assert_eq!(p.get(2, 2).re, 4.0);
        let nonzero: usize = p.data().iter().filter(|z| z.norm() > 0.0).count();
        assert_eq!(nonzero, 4);
        assert_abs_diff_eq!(p.norm_l2(), g.norm_l2(), epsilon = 0.0);
    }

    #[test]
    fn pad_smaller_than_source_rejected() {
        let g = ComplexGrid::zeros(4, 4).unwrap();
        assert!(zero_pad_center(&g, 3, 4).is_err());
    }

    #[test]
    fn crop_inverts_pad() {
        let g = random_grid(5, 7, 3);
        let p = zero_pad_center(&g, 12, 9).unwrap();
        let c = crop_center(&p, 5, 7).unwrap();
        assert_eq!(c, g);
    }

    #[test]
    fn striped_mask_hand_case() {
        let m = make_striped_mask(16, 4, 2).unwrap();
        let expect: BTreeSet<usize> = [0usize, 4, 7, 8, 12].into_iter().collect();
        assert_eq!(*m.kept_rows(), expect);
    }

    #[test]
    fn striped_mask_no_acceleration_keeps_all() {
        let m = make_striped_mask(16, 1, 0).unwrap();
        assert_eq!(m.kept_rows().len(), 16);
    }

    #[test]
    fn striped_mask_512_fraction() {
        let m = make_striped_mask(512, 4, 24).unwrap();
        let frac = m.kept_rows().len() as f64 / 512.0;
        assert!(frac >= 0.25 && frac <= 0.25 + 24.0 / 512.0, "frac {}", frac);
    }

    #[test]
    fn mask_zero_accel_rejected() {
        assert!(make_striped_mask(16, 0, 0).is_err());
    }

    #[test]
    fn apply_full_mask_is_identity() {
        let g = random_grid(8, 8, 11);
        let m = SamplingMask::full(8).unwrap();
        assert_eq!(apply_mask(&g, &m).unwrap(), g);
    }

    #[test]
    fn apply_mask_row0_only() {
        let g = random_grid(2, 2, 5);
        let m = make_striped_mask(2, 2, 0).unwrap();
        let out = apply_mask(&g, &m).unwrap();
        assert_eq!(out.get(0, 0), g.get(0, 0));
        assert_eq!(out.get(0, 1), g.get(0, 1));
        assert_eq!(out.get(1, 0), Complex64::ZERO);
        assert_eq!(out.get(1, 1), Complex64::ZERO);
    }

    #[test]
    fn apply_mask_height_mismatch_rejected() {
        let g = random_grid(4, 4, 5);
        let m = SamplingMask::full(8).unwrap();
        assert!(apply_mask(&g, &m).is_err());
    }

    #[test]
    fn rss_three_four_five() {
        let a = ComplexGrid::new(1, 1, vec![Complex64::new(3.0, 0.0)]).unwrap();
        let b = ComplexGrid::new(1, 1, vec![Complex64::new(0.0, 4.0)]).unwrap();
        let out = rss(&CoilStack::new(vec![a, b]).unwrap());
        assert_abs_diff_eq!(out.get(0, 0), 5.0, epsilon = 0.0);
    }

    #[test]
    fn rss_single_coil_is_magnitude() {
        let g = random_grid(4, 4, 1);
        let out = rss(&CoilStack::new(vec![g.clone()]).unwrap());
        for (o, z) in out.data().iter().zip(g.data()) {
            assert_abs_diff_eq!(*o, z.norm(), epsilon = 1e-15);
        }
    }

    #[test]
    fn rss_empty_stack_rejected() {
        assert!(CoilStack::new(vec![]).is_err());
    }

    #[test]
    fn rss_monotone_in_coils() {
        let a = random_grid(6, 6, 2);
        let b = random_grid(6, 6, 3);
        let one = rss(&CoilStack::new(vec![a.clone()]).unwrap());
        let two = rss(&CoilStack::new(vec![a, b]).unwrap());
        for (x, y) in one.data().iter().zip(two.data()) {
            assert!(y >= x);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn roundtrip_identity(h in 2usize..33, w in 2usize..33, seed in 0u64..1000) {
            let g = random_grid(h, w, seed);
            let back = idft2(&dft2(&g));
            let err: f64 = g.data().iter().zip(back.data())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            prop_assert!(err < 1e-6 * g.norm_l2().max(1.0));
        }

        #[test]
        fn parseval(h in 2usize..33, w in 2usize..33, seed in 0u64..1000) {
            let g = random_grid(h, w, seed);
            let ratio = dft2(&g).norm_l2() / g.norm_l2();
            prop_assert!((ratio - 1.0).abs() < 1e-6);
        }

        #[test]
        fn dft_linearity(h in 2usize..17, w in 2usize..17, seed in 0u64..1000) {
            let x = random_grid(h, w, seed);
            let y = random_grid(h, w, seed + 7919);
            let (a, b) = (1.7, -0.3);
            let combo = ComplexGrid::new(h, w, x.data().iter().zip(y.data())
                .map(|(p, q)| a * p + b * q).collect()).unwrap();
            let lhs = dft2(&combo);
            let fx = dft2(&x);
            let fy = dft2(&y);
            let err: f64 = lhs.data().iter().zip(fx.data().iter().zip(fy.data()))
                .map(|(l, (p, q))| (l - (a * p + b * q)).norm())
                .fold(0.0, f64::max);
            prop_assert!(err < 1e-6 * lhs.norm_l2().max(1.0));
        }

        #[test]
        fn mask_fraction_bound(h in 4usize..129, accel in 1usize..5, acs in 0usize..17) {
            prop_assume!(acs <= h && accel <= h);
            let m = make_striped_mask(h, accel, acs).unwrap();
            let frac = m.kept_rows().len() as f64 / h as f64;
            // ceil(h/accel) rows from the stripes, at most acs more.
            let bound = (h as f64 / accel as f64).ceil() / h as f64 + acs as f64 / h as f64;
            prop_assert!(frac <= bound + 1e-12);
        }

        #[test]
        fn mask_projection(h in 2usize..33, w in 2usize..17, accel in 1usize..5, seed in 0u64..100) {
            prop_assume!(accel <= h);
            let g = random_grid(h, w, seed);
            let m = make_striped_mask(h, accel, 0).unwrap();
            let once = apply_mask(&g, &m).unwrap();
            let twice = apply_mask(&once, &m).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.norm_l2() <= g.norm_l2() + 1e-12);
        }
    }
}
