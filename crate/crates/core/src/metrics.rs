//! PSNR, SSIM, NMSE and dataset-level evaluation.
//!
//! Adopted definitions (the source publications leave them unstated):
//! - PSNR = 10 log10(peak^2 / MSE) with peak = max(ref); infinite when x == ref.
//! - NMSE = ||x - ref||^2 / ||ref||^2.
//! - SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
//!   dynamic range L = max(ref) - min(ref), averaged over valid window
//!   positions only. L is taken from `ref`, which is the one documented
//!   asymmetry between the arguments.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_real_image, DatasetManifest};
use crate::kspace::RealImage;
use crate::parallel::par_map;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_shape(x: &RealImage, r: &RealImage) -> Result<()> {
    if x.height() != r.height() || x.width() != r.width() {
        return Err(Error::invalid("metric inputs must share dimensions"));
    }
    Ok(())
}

fn mse(x: &RealImage, r: &RealImage) -> f64 {
    let n = x.data().len() as f64;
    x.data()
        .iter()
        .zip(r.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when x equals ref.
pub fn psnr(x: &RealImage, r: &RealImage) -> Result<f64> {
    check_same_shape(x, r)?;
    let peak = r.max_value();
    if peak <= 0.0 {
        return Err(Error::invalid("psnr reference must have a positive peak"));
    }
    let e = mse(x, r);
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

/// Normalized mean squared error `||x - ref||^2 / ||ref||^2`.
pub fn nmse(x: &RealImage, r: &RealImage) -> Result<f64> {
    check_same_shape(x, r)?;
    let denom: f64 = r.data().iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return Err(Error::invalid("nmse reference must be nonzero"));
    }
    let num: f64 = x
        .data()
        .iter()
        .zip(r.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(num / denom)
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Structural similarity index in [-1, 1].
pub fn ssim(x: &RealImage, r: &RealImage) -> Result<f64> {
    check_same_shape(x, r)?;
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs both dimensions >= {}",
            SSIM_WINDOW
        )));
    }
    let mut range = r.max_value() - r.min_value();
    if range <= 0.0 {
        // constant reference; any positive range gives the stabilized 1.0
        // for an equal constant input
        range = 1.0;
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let kernel = gaussian_kernel();

    // separable weighted moments
    let row_filter = |img: &[f64]| -> Vec<f64> {
        let ow = w - SSIM_WINDOW + 1;
        let mut out = vec![0.0; h * ow];
        for row in 0..h {
            for c in 0..ow {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * img[row * w + c + k];
                }
                out[row * ow + c] = acc;
            }
        }
        out
    };
    let col_filter = |img: &[f64], ow: usize| -> Vec<f64> {
        let oh = h - SSIM_WINDOW + 1;
        let mut out = vec![0.0; oh * ow];
        for row in 0..oh {
            for c in 0..ow {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * img[(row + k) * ow + c];
                }
                out[row * ow + c] = acc;
            }
        }
        out
    };
    let filter = |img: &[f64]| col_filter(&row_filter(img), w - SSIM_WINDOW + 1);

    let xx: Vec<f64> = x.data().iter().map(|v| v * v).collect();
    let rr: Vec<f64> = r.data().iter().map(|v| v * v).collect();
    let xr: Vec<f64> = x.data().iter().zip(r.data()).map(|(a, b)| a * b).collect();

    let mu_x = filter(x.data());
    let mu_r = filter(r.data());
    let m_xx = filter(&xx);
    let m_rr = filter(&rr);
    let m_xr = filter(&xr);

    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, mr) = (mu_x[i], mu_r[i]);
        let var_x = m_xx[i] - mx * mx;
        let var_r = m_rr[i] - mr * mr;
        let cov = m_xr[i] - mx * mr;
        let num = (2.0 * mx * mr + c1) * (2.0 * cov + c2);
        let den = (mx * mx + mr * mr + c1) * (var_x + var_r + c2);
        total += num / den;
    }
    Ok(total / mu_x.len() as f64)
}

/// Metrics for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

/// Mean and standard deviation over a set of records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub nmse_mean: f64,
    pub nmse_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    if n == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate(records: &[MetricRecord]) -> Aggregate {
    let (psnr_mean, psnr_std) = mean_std(records.iter().map(|r| r.psnr));
    let (ssim_mean, ssim_std) = mean_std(records.iter().map(|r| r.ssim));
    let (nmse_mean, nmse_std) = mean_std(records.iter().map(|r| r.nmse));
    Aggregate {
        psnr_mean,
        psnr_std,
        ssim_mean,
        ssim_std,
        nmse_mean,
        nmse_std,
    }
}

/// Per-pair records for the reconstructions and for the raw under-sampled
/// inputs, with their aggregates.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
    pub raw_records: Vec<MetricRecord>,
    pub summary: Aggregate,
    pub raw_summary: Aggregate,
}

impl MetricReport {
    /// CSV table, reconstruction rows only: `id,psnr,ssim,nmse`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr,ssim,nmse\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.id, r.psnr, r.ssim, r.nmse));
        }
        out
    }

    /// Aligned text summary with a RAW comparison row.
    pub fn to_summary_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:>10} {:>10} {:>10}\n",
            "", "PSNR", "SSIM", "NMSE"
        ));
        out.push_str(&format!(
            "{:<8} {:>10.4} {:>10.4} {:>10.4}\n",
            "RAW",
            self.raw_summary.psnr_mean,
            self.raw_summary.ssim_mean,
            self.raw_summary.nmse_mean
        ));
        out.push_str(&format!(
            "{:<8} {:>10.4} {:>10.4} {:>10.4}\n",
            "recon",
            self.summary.psnr_mean,
            self.summary.ssim_mean,
            self.summary.nmse_mean
        ));
        out
    }
}

fn metrics_for(id: &str, x: &RealImage, r: &RealImage) -> Result<MetricRecord> {
    Ok(MetricRecord {
        id: id.to_string(),
        psnr: psnr(x, r)?,
        ssim: ssim(x, r)?,
        nmse: nmse(x, r)?,
    })
}

/// Evaluate reconstructions (one `<id>.cmrs` per manifest entry under
/// `recon_dir`) against the fully-sampled references, alongside the RAW row.
pub fn evaluate(manifest: &DatasetManifest, recon_dir: &Path) -> Result<MetricReport> {
    let missing: Vec<&str> = manifest
        .entries
        .iter()
        .filter(|e| !recon_dir.join(format!("{}.cmrs", e.id)).exists())
        .map(|e| e.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "missing reconstructions for ids: {}",
            missing.join(", ")
        )));
    }
    let results = par_map(manifest.entries.clone(), |entry| -> Result<_> {
        let full = read_real_image(&entry.full_path(&manifest.root))?;
        let under = read_real_image(&entry.under_path(&manifest.root))?;
        let recon = read_real_image(&recon_dir.join(format!("{}.cmrs", entry.id)))?;
        Ok((
            metrics_for(&entry.id, &recon, &full)?,
            metrics_for(&entry.id, &under, &full)?,
        ))
    });
    let mut records = Vec::new();
    let mut raw_records = Vec::new();
    for r in results {
        let (rec, raw) = r?;
        records.push(rec);
        raw_records.push(raw);
    }
    let summary = aggregate(&records);
    let raw_summary = aggregate(&raw_records);
    Ok(MetricReport {
        records,
        raw_records,
        summary,
        raw_summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_phantom, PhantomParams};
    use crate::io::{write_real_image, Split};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    fn noisy(img: &RealImage, sigma: f64, seed: u64) -> RealImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        img.map(|v| {
            let e: f64 = StandardNormal.sample(&mut rng);
            v + sigma * e
        })
    }

    #[test]
    fn psnr_known_values() {
        let r = RealImage::new(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        // MSE 0.01: each pixel off by 0.1
        let x = RealImage::new(1, 4, vec![0.9, 0.1, 0.1, -0.1]).unwrap();
        assert_abs_diff_eq!(psnr(&x, &r).unwrap(), 20.0, epsilon = 1e-10);
        let y = RealImage::new(1, 4, vec![0.99, 0.01, 0.01, -0.01]).unwrap();
        assert_abs_diff_eq!(psnr(&y, &r).unwrap(), 40.0, epsilon = 1e-10);
        assert!(psnr(&r, &r).unwrap().is_infinite());
    }

    #[test]
    fn nmse_known_values() {
        let r = RealImage::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(nmse(&r, &r).unwrap(), 0.0);
        let zero = RealImage::zeros(2, 2).unwrap();
        assert_abs_diff_eq!(nmse(&zero, &r).unwrap(), 1.0, epsilon = 1e-15);
        assert!(nmse(&r, &zero).is_err());
    }

    #[test]
    fn ssim_identity_and_constant() {
        let img = generate_phantom(&PhantomParams::default(), 32, 32).unwrap();
        assert_abs_diff_eq!(ssim(&img, &img).unwrap(), 1.0, epsilon = 1e-12);

        let c = RealImage::new(16, 16, vec![0.5; 256]).unwrap();
        assert_abs_diff_eq!(ssim(&c, &c).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_checkerboard_anticorrelation() {
        let n = 16;
        let a: Vec<f64> = (0..n * n)
            .map(|i| (((i / n) + (i % n)) % 2) as f64)
            .collect();
        let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        let x = RealImage::new(n, n, b).unwrap();
        let r = RealImage::new(n, n, a).unwrap();
        assert!(ssim(&x, &r).unwrap() < 0.0);
    }

    #[test]
    fn ssim_small_image_rejected() {
        let a = RealImage::zeros(8, 32).unwrap();
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn monotone_under_increasing_noise() {
        let img = generate_phantom(&PhantomParams::default(), 32, 32).unwrap();
        let mut last_psnr = f64::INFINITY;
        let mut last_ssim = f64::INFINITY;
        let mut last_nmse = -1.0;
        for (i, sigma) in [0.02, 0.08, 0.3].iter().enumerate() {
            let x = noisy(&img, *sigma, i as u64);
            let p = psnr(&x, &img).unwrap();
            let s = ssim(&x, &img).unwrap();
            let n = nmse(&x, &img).unwrap();
            assert!(p < last_psnr);
            assert!(s < last_ssim);
            assert!(n > last_nmse);
            last_psnr = p;
            last_ssim = s;
            last_nmse = n;
        }
    }

    #[test]
    fn psnr_nmse_duality() {
        let img = generate_phantom(&PhantomParams::default(), 32, 32).unwrap();
        // rescale so the peak is exactly 1
        let peak = img.max_value();
        let r = img.map(|v| v / peak);
        let x = noisy(&r, 0.05, 7);
        let n = x.data().len() as f64;
        let p = r.data().iter().map(|v| v * v).sum::<f64>() / n;
        let expect = 10.0 * (1.0 / (nmse(&x, &r).unwrap() * p)).log10();
        assert_abs_diff_eq!(psnr(&x, &r).unwrap(), expect, epsilon = 1e-9);
    }

    #[test]
    fn evaluate_ground_truth_and_raw_copies() {
        let dir = tempfile::tempdir().unwrap();
        let recon_dir = dir.path().join("recon");
        std::fs::create_dir_all(&recon_dir).unwrap();
        let m = crate::datagen::build_dataset(
            3,
            4,
            crate::io::CoilMode::Single,
            32,
            32,
            5,
            dir.path(),
            Split::Valid,
            2,
            &PhantomParams::default(),
        )
        .unwrap();
        // reconstructions = ground truth
        for e in &m.entries {
            let full = read_real_image(&e.full_path(dir.path())).unwrap();
            write_real_image(&recon_dir.join(format!("{}.cmrs", e.id)), &full).unwrap();
        }
        let report = evaluate(&m, &recon_dir).unwrap();
        for r in &report.records {
            assert_eq!(r.nmse, 0.0);
            assert_abs_diff_eq!(r.ssim, 1.0, epsilon = 1e-12);
        }
        // reconstructions = the raw inputs: recon rows equal the RAW rows
        for e in &m.entries {
            let under = read_real_image(&e.under_path(dir.path())).unwrap();
            write_real_image(&recon_dir.join(format!("{}.cmrs", e.id)), &under).unwrap();
        }
        let report = evaluate(&m, &recon_dir).unwrap();
        assert_eq!(report.records, report.raw_records);
        // aggregate self-consistency
        let hand_mean =
            report.records.iter().map(|r| r.psnr).sum::<f64>() / report.records.len() as f64;
        assert_abs_diff_eq!(report.summary.psnr_mean, hand_mean, epsilon = 1e-12);
    }

    #[test]
    fn evaluate_missing_recon_lists_ids() {
        let dir = tempfile::tempdir().unwrap();
        let recon_dir = dir.path().join("recon");
        std::fs::create_dir_all(&recon_dir).unwrap();
        let m = crate::datagen::build_dataset(
            2,
            4,
            crate::io::CoilMode::Single,
            16,
            16,
            5,
            dir.path(),
            Split::Valid,
            0,
            &PhantomParams::default(),
        )
        .unwrap();
        match evaluate(&m, &recon_dir) {
            Err(Error::InvalidInput(msg)) => assert!(msg.contains("valid00000")),
            other => panic!("expected missing-recon error, got {:?}", other),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn nmse_scaling_invariance(c in 0.1f64..10.0, seed in 0u64..100) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let r = RealImage::new(4, 4, (0..16).map(|_| rng.random::<f64>() + 0.1).collect()).unwrap();
            let x = RealImage::new(4, 4, (0..16).map(|_| rng.random::<f64>()).collect()).unwrap();
            let base = nmse(&x, &r).unwrap();
            let scaled = nmse(&x.map(|v| c * v), &r.map(|v| c * v)).unwrap();
            prop_assert!((base - scaled).abs() < 1e-12 * base.max(1.0));
        }
    }
}
