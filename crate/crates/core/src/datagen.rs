//! Procedural phantom generation and (under-sampled, fully-sampled) dataset
//! construction.
//!
//! Phantoms are sums of randomly placed soft-edged ellipses. Degradation runs
//! the Cartesian pipeline: FFT to k-space, striped row mask, inverse FFT,
//! magnitude (with per-coil sensitivities and RSS combination in multi-coil
//! mode). Everything is a deterministic function of the seeds involved.

use std::path::Path;

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::io::{
    write_real_image, CoilMode, DatasetManifest, ManifestEntry, Split,
};
use crate::kspace::{
    apply_mask, dft2, idft2, make_striped_mask, rss, CoilStack, ComplexGrid, RealImage,
    SamplingMask,
};
use crate::parallel::par_map_range;
use crate::rng::substream;

/// Parameters of the random ellipse phantom.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhantomParams {
    pub n_ellipses: usize,
    /// Per-ellipse intensity range, within [0, 1].
    pub intensity_range: (f64, f64),
    /// Semi-axis range as fractions of the smaller grid extent.
    pub size_range: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            n_ellipses: 6,
            intensity_range: (0.1, 1.0),
            size_range: (0.08, 0.35),
            seed: 0,
        }
    }
}

impl PhantomParams {
    fn validate(&self) -> Result<()> {
        let (ilo, ihi) = self.intensity_range;
        let (slo, shi) = self.size_range;
        if !(0.0..=1.0).contains(&ilo) || !(0.0..=1.0).contains(&ihi) || ilo > ihi {
            return Err(Error::invalid("intensity range must be within [0,1] and nonempty"));
        }
        if slo <= 0.0 || slo > shi {
            return Err(Error::invalid("size range must be positive and nonempty"));
        }
        Ok(())
    }
}

/// One training/evaluation example.
#[derive(Debug, Clone)]
pub struct SlicePair {
    pub under: RealImage,
    pub full: RealImage,
    pub accel: usize,
    pub coil_mode: CoilMode,
    pub seed: u64,
}

impl SlicePair {
    pub fn load(entry: &ManifestEntry, root: &Path) -> Result<Self> {
        let under = crate::io::read_real_image(&entry.under_path(root))?;
        let full = crate::io::read_real_image(&entry.full_path(root))?;
        if under.height() != full.height() || under.width() != full.width() {
            return Err(Error::Format(format!(
                "pair {}: under/full dimensions differ",
                entry.id
            )));
        }
        Ok(SlicePair {
            under,
            full,
            accel: entry.accel,
            coil_mode: entry.coil_mode,
            seed: entry.seed,
        })
    }
}

/// Deterministic soft-edged ellipse phantom with values in [0, 1].
pub fn generate_phantom(params: &PhantomParams, h: usize, w: usize) -> Result<RealImage> {
    if h < 8 || w < 8 {
        return Err(Error::invalid("phantom dimensions must be >= 8"));
    }
    params.validate()?;
    let mut rng = substream(params.seed, "phantom", 0);
    let extent = h.min(w) as f64;
    let mut data = vec![0.0f64; h * w];
    for _ in 0..params.n_ellipses {
        let cy = rng.random_range(0.18..0.82) * h as f64;
        let cx = rng.random_range(0.18..0.82) * w as f64;
        let a = rng.random_range(params.size_range.0..=params.size_range.1) * extent;
        let b = rng.random_range(params.size_range.0..=params.size_range.1) * extent;
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let intensity = rng.random_range(params.intensity_range.0..=params.intensity_range.1);
        let (sin_t, cos_t) = theta.sin_cos();
        // soft edge about 1.5 px wide in normalized ellipse coordinates
        let edge = 1.5 / a.min(b);
        for r in 0..h {
            for c in 0..w {
                let dy = r as f64 - cy;
                let dx = c as f64 - cx;
                let u = (dx * cos_t + dy * sin_t) / a;
                let v = (-dx * sin_t + dy * cos_t) / b;
                let d = (u * u + v * v).sqrt();
                let weight = ((1.0 - d) / edge + 1.0).clamp(0.0, 1.0);
                data[r * w + c] += intensity * weight;
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    RealImage::new(h, w, data)
}

/// Smooth positive sensitivity for coil `c` of `n_coils`: a 2D Gaussian
/// centered on the image border at angle `2*pi*c/n_coils` (plus a small
/// seeded jitter), width half the image extent.
pub fn coil_sensitivity(h: usize, w: usize, c: usize, n_coils: usize, seed: u64) -> RealImage {
    let mut rng = substream(seed, "coil-jitter", c as u64);
    let jitter: f64 = rng.random_range(-0.05..0.05);
    let theta = 2.0 * std::f64::consts::PI * (c as f64 / n_coils as f64 + jitter);
    let (cy0, cx0) = (h as f64 / 2.0, w as f64 / 2.0);
    let cy = cy0 + 0.5 * h as f64 * theta.sin();
    let cx = cx0 + 0.5 * w as f64 * theta.cos();
    let sigma = 0.5 * h.min(w) as f64;
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for col in 0..w {
            let d2 = (r as f64 - cy).powi(2) + (col as f64 - cx).powi(2);
            data.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    RealImage::new(h, w, data).expect("gaussian profile is finite")
}

/// Multiply the image by explicit per-coil sensitivity profiles.
pub fn simulate_coils_with(img: &RealImage, profiles: &[RealImage]) -> Result<CoilStack> {
    if profiles.is_empty() {
        return Err(Error::invalid("at least one sensitivity profile required"));
    }
    let mut grids = Vec::with_capacity(profiles.len());
    for p in profiles {
        if p.height() != img.height() || p.width() != img.width() {
            return Err(Error::invalid("sensitivity profile shape mismatch"));
        }
        let data = img
            .data()
            .iter()
            .zip(p.data())
            .map(|(&x, &s)| Complex64::new(x * s, 0.0))
            .collect();
        grids.push(ComplexGrid::new(img.height(), img.width(), data)?);
    }
    CoilStack::new(grids)
}

/// Simulate an `n_coils` acquisition of `img` with Gaussian border profiles.
pub fn simulate_coils(img: &RealImage, n_coils: usize, seed: u64) -> Result<CoilStack> {
    if n_coils == 0 {
        return Err(Error::invalid("n_coils must be >= 1"));
    }
    let profiles: Vec<RealImage> = (0..n_coils)
        .map(|c| coil_sensitivity(img.height(), img.width(), c, n_coils, seed))
        .collect();
    simulate_coils_with(img, &profiles)
}

fn degrade_grid(grid: &ComplexGrid, mask: &SamplingMask) -> Result<ComplexGrid> {
    Ok(idft2(&apply_mask(&dft2(grid), mask)?))
}

/// Run the undersampling pipeline on a fully-sampled magnitude image.
///
/// Single coil: `|idft2(mask . dft2(full))|`. Multi coil: per-coil
/// mask-and-invert followed by RSS.
pub fn degrade(
    full: &RealImage,
    mask: &SamplingMask,
    coil_mode: CoilMode,
    seed: u64,
) -> Result<RealImage> {
    if mask.height() != full.height() {
        return Err(Error::invalid("mask height does not match image"));
    }
    match coil_mode {
        CoilMode::Single => Ok(degrade_grid(&full.to_complex(), mask)?.magnitude()),
        CoilMode::Multi(n) => {
            let coils = simulate_coils(full, n, seed)?;
            let masked: Vec<ComplexGrid> = coils
                .grids()
                .iter()
                .map(|g| degrade_grid(g, mask))
                .collect::<Result<_>>()?;
            Ok(rss(&CoilStack::new(masked)?))
        }
    }
}

/// Fully-sampled reference in the same intensity frame as [`degrade`]'s
/// output: the image itself for single coil, the RSS of the unmasked coil
/// images for multi coil.
pub fn full_reference(full: &RealImage, coil_mode: CoilMode, seed: u64) -> Result<RealImage> {
    match coil_mode {
        CoilMode::Single => Ok(full.clone()),
        CoilMode::Multi(n) => Ok(rss(&simulate_coils(full, n, seed)?)),
    }
}

/// Build one normalized pair. The fully-sampled reference is scaled to max
/// 1.0 and the under-sampled image by the same factor (then clamped into
/// [0, 1] against small ringing overshoot).
pub fn make_pair(
    pair_seed: u64,
    accel: usize,
    coil_mode: CoilMode,
    h: usize,
    w: usize,
    acs_lines: usize,
    phantom: &PhantomParams,
) -> Result<SlicePair> {
    let params = PhantomParams {
        seed: pair_seed,
        ..phantom.clone()
    };
    let img = generate_phantom(&params, h, w)?;
    let mask = make_striped_mask(h, accel, acs_lines)?;
    let full_ref = full_reference(&img, coil_mode, pair_seed)?;
    let under_raw = degrade(&img, &mask, coil_mode, pair_seed)?;
    let peak = full_ref.max_value();
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let full = full_ref.map(|v| (v * scale).clamp(0.0, 1.0));
    let under = under_raw.map(|v| (v * scale).clamp(0.0, 1.0));
    Ok(SlicePair {
        under,
        full,
        accel,
        coil_mode,
        seed: pair_seed,
    })
}

/// Generate `n_pairs` phantom pairs under `out_dir` and write the manifest.
/// Per-pair seeds are `seed + index`, so datasets are reproducible and
/// extendable.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    n_pairs: usize,
    accel: usize,
    coil_mode: CoilMode,
    h: usize,
    w: usize,
    seed: u64,
    out_dir: &Path,
    split: Split,
    acs_lines: usize,
    phantom: &PhantomParams,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries: Vec<Result<ManifestEntry>> = par_map_range(n_pairs, |i| {
        let pair_seed = seed + i as u64;
        let pair = make_pair(pair_seed, accel, coil_mode, h, w, acs_lines, phantom)?;
        let id = format!("{}{:05}", split.as_str(), i);
        let entry = ManifestEntry {
            id: id.clone(),
            stem: id,
            accel,
            coil_mode,
            seed: pair_seed,
        };
        write_real_image(&entry.under_path(out_dir), &pair.under)?;
        write_real_image(&entry.full_path(out_dir), &pair.full)?;
        Ok(entry)
    });
    let manifest = DatasetManifest {
        split,
        root: out_dir.to_path_buf(),
        entries: entries.into_iter().collect::<Result<_>>()?,
    };
    manifest.save()?;
    Ok(manifest)
}

/// Bilinear resize with corner-aligned sampling.
pub fn resize_bilinear(img: &RealImage, h: usize, w: usize) -> Result<RealImage> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("resize target must be >= 1 per axis"));
    }
    let (sh, sw) = (img.height(), img.width());
    let ry = if h > 1 { (sh - 1) as f64 / (h - 1) as f64 } else { 0.0 };
    let rx = if w > 1 { (sw - 1) as f64 / (w - 1) as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        let y = r as f64 * ry;
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = y - y0 as f64;
        for c in 0..w {
            let x = c as f64 * rx;
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let fx = x - x0 as f64;
            let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
            let bot = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
            data.push(top * (1.0 - fy) + bot * fy);
        }
    }
    RealImage::new(h, w, data)
}
