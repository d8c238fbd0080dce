//! Reverse (generation) process.
//!
//! Starting from Gaussian noise, each step removes the predicted noise and
//! re-injects the posterior variance. Several independent rounds can be
//! averaged into one ensemble reconstruction; rounds run in parallel and are
//! seeded as `seed + round` so results do not depend on scheduling.

use ndarray::Array2;
use rand_distr::Distribution;

use crate::denoiser::{self, ParamSet};
use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::parallel::par_map;
use crate::rng::substream;
use crate::schedule::DiffusionSchedule;

/// Which mean coefficient the update uses.
///
/// The standard derivation divides by the square root of the per-step
/// retention factor. `Literal` multiplies instead, reproducing a variant
/// sometimes seen in print; it is kept selectable for comparison and is not
/// the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    Corrected,
    Literal,
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::Corrected
    }
}

/// Inference settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleConfig {
    /// Number of reverse steps; may differ from the training step count.
    pub t_infer: usize,
    /// Ensemble rounds averaged into the final output.
    pub rounds: usize,
    #[serde(default)]
    pub step_rule: StepRule,
    /// Clamp the ensemble mean to `[0, 1]` before returning.
    #[serde(default = "default_true")]
    pub clamp_output: bool,
}

fn default_true() -> bool {
    true
}

impl SampleConfig {
    pub fn new(t_infer: usize, rounds: usize) -> Self {
        Self {
            t_infer,
            rounds,
            step_rule: StepRule::Corrected,
            clamp_output: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_infer == 0 || self.rounds == 0 {
            return Err(Error::invalid("t_infer and rounds must be >= 1"));
        }
        Ok(())
    }
}

/// Anything that can estimate the injected noise at a given reverse step.
///
/// `t` counts in inference steps, `1..=t_infer`.
pub trait NoisePredictor<A: Scalar>: Sync {
    fn predict(
        &self,
        x_t: &Array2<A>,
        cond: &Array2<A>,
        t: usize,
        t_infer: usize,
    ) -> Result<Array2<A>>;
}

impl<A: Scalar> NoisePredictor<A> for ParamSet<A> {
    fn predict(
        &self,
        x_t: &Array2<A>,
        cond: &Array2<A>,
        t: usize,
        t_infer: usize,
    ) -> Result<Array2<A>> {
        let tt = denoiser::map_timestep(t, t_infer, self.config.t_max);
        denoiser::forward(self, x_t, cond, tt)
    }
}

/// One reverse update `x_t -> x_{t-1}` given the noise estimate.
///
/// `noise` must be standard Gaussian when `t > 1` and is ignored at `t = 1`
/// (the last step is deterministic).
pub fn reverse_step<A: Scalar>(
    sched: &DiffusionSchedule,
    rule: StepRule,
    x_t: &Array2<A>,
    eps_hat: &Array2<A>,
    t: usize,
    noise: Option<&Array2<A>>,
) -> Result<Array2<A>> {
    if x_t.dim() != eps_hat.dim() {
        return Err(Error::invalid("x_t and eps_hat shapes differ"));
    }
    let alpha = sched.alpha(t)?;
    let coeff = match rule {
        StepRule::Corrected => 1.0 / alpha.sqrt(),
        StepRule::Literal => alpha.sqrt(),
    };
    let eps_scale = sched.beta(t)? / (1.0 - sched.alpha_bar(t)?).sqrt();
    let c = A::from_f64(coeff);
    let e = A::from_f64(eps_scale);
    let mut out = x_t - &eps_hat.mapv(|v| v * e);
    out.mapv_inplace(|v| v * c);
    if t > 1 {
        let z = noise.ok_or_else(|| Error::invalid("noise required for steps with t > 1"))?;
        if z.dim() != x_t.dim() {
            return Err(Error::invalid("noise shape differs from x_t"));
        }
        let sigma = A::from_f64(sched.posterior_var(t)?.sqrt());
        out += &z.mapv(|v| v * sigma);
    }
    Ok(out)
}

fn gaussian_image<A: Scalar>(h: usize, w: usize, rng: &mut impl rand::Rng) -> Array2<A> {
    Array2::from_shape_fn((h, w), |_| {
        let z: f64 = rand_distr::StandardNormal.sample(rng);
        A::from_f64(z)
    })
}

fn check_finite<A: Scalar>(x: &Array2<A>, t: usize, what: &str) -> Result<()> {
    if x.iter().any(|&v| !v.to_f64().is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite {what} at reverse step t = {t}"
        )));
    }
    Ok(())
}

/// One full reverse trajectory from pure noise; optionally records every
/// intermediate state (from `x_T` down to `x_0`) into `trajectory`.
pub fn sample_one_traced<A: Scalar>(
    predictor: &dyn NoisePredictor<A>,
    sched: &DiffusionSchedule,
    cond: &Array2<A>,
    cfg: &SampleConfig,
    seed: u64,
    mut trajectory: Option<&mut Vec<Array2<A>>>,
) -> Result<Array2<A>> {
    cfg.validate()?;
    if sched.total_steps() != cfg.t_infer {
        return Err(Error::invalid(format!(
            "schedule has {} steps but config asks for {}",
            sched.total_steps(),
            cfg.t_infer
        )));
    }
    let (h, w) = cond.dim();
    let mut rng = substream(seed, "sample", 0);
    let mut x = gaussian_image::<A>(h, w, &mut rng);
    if let Some(tr) = trajectory.as_deref_mut() {
        tr.push(x.clone());
    }
    for t in (1..=cfg.t_infer).rev() {
        let eps_hat = predictor.predict(&x, cond, t, cfg.t_infer)?;
        check_finite(&eps_hat, t, "noise estimate")?;
        let noise = (t > 1).then(|| gaussian_image::<A>(h, w, &mut rng));
        x = reverse_step(sched, cfg.step_rule, &x, &eps_hat, t, noise.as_ref())?;
        check_finite(&x, t, "state")?;
        if let Some(tr) = trajectory.as_deref_mut() {
            tr.push(x.clone());
        }
    }
    Ok(x)
}

/// One reverse trajectory without trajectory recording.
pub fn sample_one<A: Scalar>(
    predictor: &dyn NoisePredictor<A>,
    sched: &DiffusionSchedule,
    cond: &Array2<A>,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<Array2<A>> {
    sample_one_traced(predictor, sched, cond, cfg, seed, None)
}

/// Mean of `cfg.rounds` independent trajectories, seeded `seed + round`
/// for `round` in `1..=rounds`. Rounds run in parallel; the mean is taken
/// in round order so the result is deterministic.
pub fn ensemble_sample<A: Scalar>(
    predictor: &dyn NoisePredictor<A>,
    sched: &DiffusionSchedule,
    cond: &Array2<A>,
    cfg: &SampleConfig,
    seed: u64,
) -> Result<Array2<A>> {
    cfg.validate()?;
    let rounds: Vec<u64> = (1..=cfg.rounds as u64).collect();
    let results = par_map(rounds, |r| sample_one(predictor, sched, cond, cfg, seed + r));
    let (h, w) = cond.dim();
    let mut mean = Array2::<A>::zeros((h, w));
    for res in results {
        mean += &res?;
    }
    let inv = A::from_f64(1.0 / cfg.rounds as f64);
    mean.mapv_inplace(|v| v * inv);
    if cfg.clamp_output {
        let one = A::one();
        let zero = A::zero();
        mean.mapv_inplace(|v| v.max(zero).min(one));
    }
    Ok(mean)
}
