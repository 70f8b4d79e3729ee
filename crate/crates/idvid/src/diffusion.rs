//! Noise schedule, forward noising, guidance, and deterministic sampling.
//!
//! The schedule is a standard linear-beta ramp with cumulative products
//! alpha_bar. Sampling runs DDIM-style deterministic updates over a
//! uniformly strided sub-schedule; requesting more steps than the schedule
//! length simply revisits timesteps (an exact identity update), so step
//! sweeps above the schedule length remain well-defined.

use rand::Rng;

use crate::error::{IdvidError, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub t_diffusion: usize,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_diffusion: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_diffusion < 2 {
            return Err(IdvidError::Config("schedule needs at least 2 steps".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(IdvidError::Config(format!(
                "betas out of range: {beta_start}..{beta_end}"
            )));
        }
        let mut betas = Vec::with_capacity(t_diffusion);
        let mut alpha_bars = Vec::with_capacity(t_diffusion);
        let mut prod = 1.0;
        for i in 0..t_diffusion {
            let b = beta_start + (beta_end - beta_start) * i as f64 / (t_diffusion - 1) as f64;
            prod *= 1.0 - b;
            betas.push(b);
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            t_diffusion,
            betas,
            alpha_bars,
        })
    }

    pub fn default_scale() -> Self {
        Self::linear(100, 1e-4, 2e-2).expect("default schedule is valid")
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.t_diffusion {
            return Err(IdvidError::InvalidArgument(format!(
                "timestep {t} outside schedule of length {}",
                self.t_diffusion
            )));
        }
        Ok(())
    }

    /// sqrt(alpha_bar_t) and sqrt(1 - alpha_bar_t).
    pub fn mix_coeffs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bars[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

/// Forward noising: x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps.
pub fn q_sample(sched: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(IdvidError::InvalidArgument(format!(
            "x0 shape {:?} != eps shape {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let (a, b) = sched.mix_coeffs(t);
    Ok(x0.zip(eps, |x, e| a * x + b * e))
}

/// Classifier-free guidance: linear extrapolation from the unconditional
/// prediction toward the conditional one.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, w: f64) -> Tensor {
    eps_uncond.zip(eps_cond, |u, c| u + w * (c - u))
}

pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "mse shape mismatch");
    let n = a.numel() as f64;
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Standard-normal tensor from a named stream.
pub fn noise_like(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng::normal(rng);
    }
    t
}

/// The base denoising objective for one draw: sample t and eps, noise x0,
/// and score the model's eps prediction by mean squared error.
pub fn training_loss(
    sched: &NoiseSchedule,
    x0: &Tensor,
    model: &mut dyn FnMut(&Tensor, usize) -> Result<Tensor>,
    rng: &mut impl Rng,
) -> Result<f64> {
    let t = rng.gen_range(0..sched.t_diffusion);
    let eps = noise_like(x0.rows(), x0.cols(), rng);
    let x_t = q_sample(sched, x0, t, &eps)?;
    let pred = model(&x_t, t)?;
    if !pred.is_finite() {
        return Err(IdvidError::NumericDivergence {
            step: t as u64,
            msg: "model produced non-finite noise prediction".into(),
        });
    }
    Ok(mse(&eps, &pred))
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            guidance_scale: 6.0,
            seed: 0,
        }
    }
}

/// The strided timestep ladder, ascending. Always ends at T-1; lengths
/// beyond the schedule revisit timesteps.
pub fn stride_timesteps(t_diffusion: usize, steps: usize) -> Vec<usize> {
    (0..steps)
        .map(|i| ((i + 1) * t_diffusion).div_ceil(steps) - 1)
        .collect()
}

/// Deterministic reverse process. `model` maps (x_t, t) to an eps
/// prediction (guidance already folded in by the caller).
pub fn sample(
    sched: &NoiseSchedule,
    shape: (usize, usize),
    cfg: &SamplerConfig,
    model: &mut dyn FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    if cfg.steps < 1 {
        return Err(IdvidError::InvalidArgument("sampler needs >= 1 step".into()));
    }
    let mut r = rng::stream(cfg.seed, "sampler-init", &[]);
    let mut x = noise_like(shape.0, shape.1, &mut r);
    let ladder = stride_timesteps(sched.t_diffusion, cfg.steps);
    for i in (0..ladder.len()).rev() {
        let t = ladder[i];
        let ab_t = sched.alpha_bars[t];
        let ab_prev = if i == 0 {
            1.0
        } else {
            sched.alpha_bars[ladder[i - 1]]
        };
        let eps = model(&x, t)?;
        if eps.shape() != x.shape() {
            return Err(IdvidError::InvalidArgument(format!(
                "model output shape {:?} != latent shape {:?}",
                eps.shape(),
                x.shape()
            )));
        }
        let sa = ab_t.sqrt();
        let sb = (1.0 - ab_t).sqrt();
        let pa = ab_prev.sqrt();
        let pb = (1.0 - ab_prev).sqrt();
        // x0 estimate, then the deterministic posterior-mean update
        x = x.zip(&eps, |xt, e| {
            let x0 = (xt - sb * e) / sa;
            pa * x0 + pb * e
        });
        if !x.is_finite() {
            return Err(IdvidError::NumericDivergence {
                step: i as u64,
                msg: format!("non-finite latent during sampling at ladder index {i} (t={t})"),
            });
        }
    }
    Ok(x)
}
