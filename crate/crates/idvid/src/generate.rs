//! Video generation with a trained model: conditioning assembly, guided
//! denoising, and decoding back to frames.

use crate::backbone::{dit_forward, text_encode, unpatchify, DiTConfig};
use crate::diffusion::{cfg_combine, sample, NoiseSchedule, SamplerConfig};
use crate::error::{IdvidError, Result};
use crate::extractors::{gfe_encode, lfe_encode};
use crate::injection::{apply_low_freq, zero_kps_image, InjectionPlan};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Tensor;
use crate::trainer::ModelConfig;

/// Identity conditioning evaluated once per reference; constant across
/// denoising steps.
pub struct Conditioning {
    pub gfe_map: Option<Tensor>,
    pub id_tokens: Option<Tensor>,
}

/// Run the extractors once for a reference crop. `kps_image` is required
/// when the plan consumes keypoints; a zero image substitutes when the plan
/// has the keypoint channel disabled.
pub fn build_conditioning(
    params: &ParamStore,
    model: &ModelConfig,
    plan: &InjectionPlan,
    ref_face: &Tensor,
    kps_image: Option<&Tensor>,
) -> Result<Conditioning> {
    let dit = model.resolved_dit(plan);
    let gfe_map = if plan.low_freq {
        let zero;
        let kps = if plan.keypoints {
            kps_image.ok_or_else(|| {
                IdvidError::InvalidArgument(
                    "this plan conditions on keypoints; provide a keypoint image".into(),
                )
            })?
        } else {
            zero = zero_kps_image(model.extract.s);
            &zero
        };
        let mut ctx = Ctx::new(params);
        let id = gfe_encode(&mut ctx, &model.extract, ref_face, kps, dit.grid_h())?;
        Some(ctx.g.value(id).clone())
    } else {
        None
    };
    let id_tokens = if plan.uses_id_tokens() {
        let mut ctx = Ctx::new(params);
        let id = lfe_encode(&mut ctx, &model.extract, ref_face, None)?;
        Some(ctx.g.value(id).clone())
    } else {
        None
    };
    Ok(Conditioning { gfe_map, id_tokens })
}

/// One denoiser forward pass at inference time.
pub fn predict_eps(
    params: &ParamStore,
    dit: &DiTConfig,
    plan: &InjectionPlan,
    cond: &Conditioning,
    x_t: &Tensor,
    t: usize,
    caption: &[u16],
) -> Result<Tensor> {
    let mut ctx = Ctx::new(params);
    let mut latent = ctx.leaf(x_t.clone());
    if let Some(map) = &cond.gfe_map {
        let map_id = ctx.leaf(map.clone());
        latent = apply_low_freq(&mut ctx, latent, map_id, dit.frames)?;
    }
    let id_tokens = cond.id_tokens.as_ref().map(|f| ctx.leaf(f.clone()));
    let text = text_encode(&mut ctx, dit, caption)?;
    let out = dit_forward(&mut ctx, dit, plan, latent, text, t, id_tokens)?;
    Ok(ctx.g.value(out).clone())
}

/// Generate one clip. Returns `frames` image tensors clamped to [0, 1].
pub fn generate_video(
    params: &ParamStore,
    model: &ModelConfig,
    plan: &InjectionPlan,
    ref_face: &Tensor,
    kps_image: Option<&Tensor>,
    caption: &[u16],
    sampler: &SamplerConfig,
) -> Result<Vec<Tensor>> {
    let dit = model.resolved_dit(plan);
    dit.validate()?;
    let sched = NoiseSchedule::default_scale();
    let cond = build_conditioning(params, model, plan, ref_face, kps_image)?;
    let w = sampler.guidance_scale;
    let mut model_fn = |x_t: &Tensor, t: usize| -> Result<Tensor> {
        let cond_eps = predict_eps(params, &dit, plan, &cond, x_t, t, caption)?;
        if (w - 1.0).abs() < 1e-12 {
            return Ok(cond_eps);
        }
        let uncond_eps = predict_eps(params, &dit, plan, &cond, x_t, t, &[])?;
        Ok(cfg_combine(&uncond_eps, &cond_eps, w))
    };
    let latent = sample(
        &sched,
        (dit.n_vision_tokens(), dit.base_channels()),
        sampler,
        &mut model_fn,
    )?;
    let mut frames = unpatchify(&latent, dit.frames, dit.height, dit.width, dit.patch)?;
    for f in &mut frames {
        for v in f.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(frames)
}
