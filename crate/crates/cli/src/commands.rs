//! Subcommand implementations.

use std::path::{Path, PathBuf};

use mridiff_core::datagen::{build_dataset, PhantomParams, SlicePair};
use mridiff_core::denoiser::{array_to_image, image_to_array, init_params, ParamSet};
use mridiff_core::error::{Error, Result};
use mridiff_core::io::{write_atomic, write_real_image, DatasetManifest, Split};
use mridiff_core::metrics::{evaluate, MetricReport};
use mridiff_core::sampler::{ensemble_sample, SampleConfig};
use mridiff_core::schedule::build_schedule;
use mridiff_core::trainer::{
    check_config_compatible, fit, load_checkpoint, save_checkpoint, Checkpoint,
};

use crate::config::RunConfig;

/// Create `dir` if needed; refuse to reuse a nonempty one without `--force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let nonempty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if nonempty && !force {
            return Err(Error::Format(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())
}

fn phantom_params(cfg: &RunConfig) -> PhantomParams {
    PhantomParams {
        n_ellipses: cfg.datagen.n_ellipses,
        ..PhantomParams::default()
    }
}

/// Build the train and valid datasets under `out`.
pub fn cmd_phantom(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let coil_mode = cfg.datagen.coil_mode()?;
    prepare_out_dir(out, force)?;
    echo_config(cfg, out)?;
    let params = phantom_params(cfg);
    for (split, n, seed_tag) in [
        (Split::Train, cfg.datagen.n_train, 0u64),
        (Split::Valid, cfg.datagen.n_valid, 1u64),
    ] {
        let manifest = build_dataset(
            n,
            cfg.datagen.accel,
            coil_mode,
            cfg.datagen.h,
            cfg.datagen.w,
            cfg.seed ^ (seed_tag << 32),
            out,
            split,
            cfg.datagen.acs_lines(),
            &params,
        )?;
        println!("{}: {} pairs", split.as_str(), manifest.len());
    }
    Ok(())
}

fn load_pairs(data: &Path, split: Split) -> Result<Vec<SlicePair>> {
    let manifest = DatasetManifest::load(data, split)?;
    manifest
        .entries
        .iter()
        .map(|e| SlicePair::load(e, data))
        .collect()
}

/// Train on the `train` split; writes checkpoints and a loss log.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, force: bool) -> Result<()> {
    prepare_out_dir(out, force)?;
    echo_config(cfg, out)?;
    let pairs = load_pairs(data, Split::Train)?;
    let sched = build_schedule(cfg.trainer.t_steps)?;
    let mut params: ParamSet<f32> = init_params(&cfg.denoiser_config(), cfg.seed)?;

    if cfg.trainer.epochs == 0 {
        // nothing to optimize; still leave a usable checkpoint behind
        let ck = Checkpoint {
            params,
            opt: None,
            epoch: 0,
            seed: cfg.seed,
        };
        save_checkpoint(&out.join("latest.mrdf"), &ck)?;
        write_atomic(&out.join("loss_log.csv"), b"step,epoch,loss\n")?;
        println!("epochs = 0: wrote initial checkpoint only");
        return Ok(());
    }

    let batches_per_epoch = pairs.len().div_ceil(cfg.trainer.batch_size);
    let mut log = String::from("step,epoch,loss\n");
    let mut rows: Vec<String> = Vec::new();
    let report = fit(
        &mut params,
        &sched,
        &pairs,
        &cfg.train_config(),
        Some(out),
        |epoch, loss| {
            let step = (epoch + 1) * batches_per_epoch;
            println!("epoch {:>4}  loss {loss:.6}", epoch + 1);
            rows.push(format!("{step},{},{loss}\n", epoch + 1));
        },
    )?;
    for row in rows {
        log.push_str(&row);
    }
    write_atomic(&out.join("loss_log.csv"), log.as_bytes())?;
    if report.stopped_early {
        println!("stopped early after {} epochs (loss plateau)", report.epoch_losses.len());
    }
    Ok(())
}

/// Deterministic per-slice seed derived from the root seed.
fn slice_seed(root: u64, idx: usize) -> u64 {
    root ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(idx as u64 + 1)
}

/// Run ensembled reconstruction over one split; one output file per id.
pub fn run_inference(
    cfg: &RunConfig,
    params: &ParamSet<f32>,
    sample_cfg: &SampleConfig,
    data: &Path,
    split: Split,
    out: &Path,
) -> Result<usize> {
    let manifest = DatasetManifest::load(data, split)?;
    let sched = build_schedule(sample_cfg.t_infer)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (idx, entry) in manifest.entries.iter().enumerate() {
        let pair = SlicePair::load(entry, data)?;
        let cond = image_to_array::<f32>(&pair.under);
        let recon = ensemble_sample(params, &sched, &cond, sample_cfg, slice_seed(cfg.seed, idx))?;
        write_real_image(&out.join(format!("{}.cmrs", entry.id)), &array_to_image(&recon)?)?;
    }
    Ok(manifest.len())
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<ParamSet<f32>> {
    if !checkpoint.exists() {
        return Err(Error::io(
            checkpoint,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    let ck = load_checkpoint::<f32>(checkpoint)?;
    check_config_compatible(&cfg.denoiser_config(), &ck.params.config)?;
    Ok(ck.params)
}

pub fn cmd_infer(
    cfg: &RunConfig,
    data: &Path,
    split: Split,
    checkpoint: &Path,
    out: &Path,
    force: bool,
) -> Result<()> {
    prepare_out_dir(out, force)?;
    echo_config(cfg, out)?;
    let params = load_model(cfg, checkpoint)?;
    let n = run_inference(cfg, &params, &cfg.sample_config(), data, split, out)?;
    println!("reconstructed {n} slices -> {}", out.display());
    Ok(())
}

fn write_report(cfg: &RunConfig, report: &MetricReport, out: &Path) -> Result<()> {
    if cfg.metrics.write_csv {
        write_atomic(&out.join("metrics.csv"), report.to_csv().as_bytes())?;
    }
    if cfg.metrics.write_summary {
        write_atomic(&out.join("summary.txt"), report.to_summary_text().as_bytes())?;
    }
    Ok(())
}

pub fn cmd_eval(
    cfg: &RunConfig,
    data: &Path,
    split: Split,
    recon: &Path,
    out: &Path,
    force: bool,
) -> Result<()> {
    prepare_out_dir(out, force)?;
    echo_config(cfg, out)?;
    let manifest = DatasetManifest::load(data, split)?;
    let report = evaluate(&manifest, recon)?;
    write_report(cfg, &report, out)?;
    print!("{}", report.to_summary_text());
    Ok(())
}

/// Inference-time grid: vary the step count at fixed rounds, then the round
/// count at fixed steps, evaluating each cell on the valid split.
pub fn cmd_ablate(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    force: bool,
    t_grid: &[usize],
    r_grid: &[usize],
) -> Result<()> {
    if t_grid.is_empty() || r_grid.is_empty() {
        return Err(Error::invalid("ablation grids must be nonempty"));
    }
    prepare_out_dir(out, force)?;
    echo_config(cfg, out)?;
    let params = load_model(cfg, checkpoint)?;
    let manifest = DatasetManifest::load(data, Split::Valid)?;

    let cell = |t: usize, r: usize, dir: PathBuf| -> Result<(f64, f64, f64)> {
        let sample_cfg = SampleConfig {
            t_infer: t,
            rounds: r,
            ..cfg.sample_config()
        };
        run_inference(cfg, &params, &sample_cfg, data, Split::Valid, &dir)?;
        let report = evaluate(&manifest, &dir)?;
        Ok((
            report.summary.psnr_mean,
            report.summary.ssim_mean,
            report.summary.nmse_mean,
        ))
    };

    let mut text = String::new();
    let mut csv_t = String::from("t_infer,psnr,ssim,nmse\n");
    text.push_str(&format!(
        "(a) inference steps (rounds = {})\n{:>8} {:>10} {:>10} {:>10}\n",
        cfg.sampler.rounds, "T", "PSNR", "SSIM", "NMSE"
    ));
    for &t in t_grid {
        let (p, s, n) = cell(t, cfg.sampler.rounds, out.join(format!("recon_t{t}")))?;
        csv_t.push_str(&format!("{t},{p},{s},{n}\n"));
        text.push_str(&format!("{t:>8} {p:>10.4} {s:>10.4} {n:>10.4}\n"));
    }
    let mut csv_r = String::from("rounds,psnr,ssim,nmse\n");
    text.push_str(&format!(
        "\n(b) ensemble rounds (steps = {})\n{:>8} {:>10} {:>10} {:>10}\n",
        cfg.sampler.t_infer, "R", "PSNR", "SSIM", "NMSE"
    ));
    for &r in r_grid {
        let (p, s, n) = cell(cfg.sampler.t_infer, r, out.join(format!("recon_r{r}")))?;
        csv_r.push_str(&format!("{r},{p},{s},{n}\n"));
        text.push_str(&format!("{r:>8} {p:>10.4} {s:>10.4} {n:>10.4}\n"));
    }

    write_atomic(&out.join("ablate_t.csv"), csv_t.as_bytes())?;
    write_atomic(&out.join("ablate_r.csv"), csv_r.as_bytes())?;
    write_atomic(&out.join("ablate.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}
