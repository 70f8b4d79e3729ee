//! Two-phase training loop: a coarse pass that learns the low-frequency
//! pathway with identity tokens absent, then a fine pass that unlocks them.
//! Per-step randomness is drawn up front into a plan so a step's loss is a
//! pure function of the parameters, which keeps it finite-difference
//! checkable.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{dit_forward, patchify, register_dit, text_encode, DiTConfig};
use crate::checkpoint::save_checkpoint;
use crate::diffusion::{noise_like, q_sample, NoiseSchedule};
use crate::error::{IdvidError, Result};
use crate::extractors::{
    gfe_encode, lfe_encode, register_gfe, register_lfe, ExtractorConfig, TOWER_PREFIXES,
};
use crate::graph::VarId;
use crate::injection::{apply_low_freq, zero_kps_image, HfSite, InjectionPlan};
use crate::nn::{
    clip_grads, global_grad_norm, lr_cosine_restarts, AdamW, Ctx, ParamBuilder, ParamStore,
};
use crate::rng::{normal, stream, uniform};
use crate::synthdata::{crop_align, map_keypoints_to_crop, render_keypoints_rgb, VideoSample};
use crate::tensor::Tensor;

fn dtrue() -> bool {
    true
}

/// Ablation switches for the conditioning pathways and training mechanisms.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentFlags {
    /// Low-frequency pathway (coarse facial map concatenated to the latent).
    #[serde(default = "dtrue")]
    pub gfe: bool,
    /// High-frequency pathway (identity tokens via cross-attention).
    #[serde(default = "dtrue")]
    pub lfe: bool,
    /// Coarse-to-fine phase schedule.
    #[serde(default = "dtrue")]
    pub cft: bool,
    /// Dynamic mask loss.
    #[serde(default = "dtrue")]
    pub dml: bool,
    /// Dynamic cross-face reference selection (and its reference noise).
    #[serde(default = "dtrue")]
    pub dcl: bool,
}

impl Default for ComponentFlags {
    fn default() -> Self {
        ComponentFlags {
            gfe: true,
            lfe: true,
            cft: true,
            dml: true,
            dcl: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dynamic-mask threshold: the masked loss is used when a uniform draw
    /// exceeds this value.
    pub alpha: f64,
    /// Probability of selecting an out-of-window reference frame.
    pub beta: f64,
    /// Std of the additive noise applied to reference crops.
    pub zeta_sigma: f64,
    /// Probability of dropping the caption to train the unconditional branch.
    pub null_text_ratio: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub lr_cycles: u64,
    pub lr_floor_frac: f64,
    /// Fraction of total steps spent in the coarse phase.
    pub coarse_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub max_grad_norm: f64,
    /// Gradient norms above this for five consecutive steps flag divergence.
    pub divergence_grad_threshold: f64,
    pub components: ComponentFlags,
    /// Fault hook for tests: poison one weight with NaN at this step.
    pub inject_nan_step: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            beta: 0.5,
            zeta_sigma: 0.05,
            null_text_ratio: 0.1,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            total_steps: 2000,
            warmup_steps: 100,
            lr_cycles: 2,
            lr_floor_frac: 0.05,
            coarse_fraction: 0.5,
            batch_size: 8,
            seed: 0,
            max_grad_norm: 1.0,
            divergence_grad_threshold: 1e3,
            components: ComponentFlags::default(),
            inject_nan_step: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("null_text_ratio", self.null_text_ratio),
            ("coarse_fraction", self.coarse_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(IdvidError::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.zeta_sigma < 0.0 {
            return Err(IdvidError::Config("zeta_sigma must be >= 0".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(IdvidError::Config("learning_rate must be positive".into()));
        }
        if self.total_steps == 0 {
            return Err(IdvidError::Config("total_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(IdvidError::Config("batch_size must be >= 1".into()));
        }
        if self.max_grad_norm <= 0.0 {
            return Err(IdvidError::Config("max_grad_norm must be positive".into()));
        }
        if self.divergence_grad_threshold <= 0.0 {
            return Err(IdvidError::Config(
                "divergence_grad_threshold must be positive".into(),
            ));
        }
        if self.lr_floor_frac < 0.0 || self.lr_floor_frac > 1.0 {
            return Err(IdvidError::Config("lr_floor_frac must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Number of leading steps spent in the coarse phase.
    pub fn coarse_steps(&self) -> u64 {
        if !self.components.cft {
            return 0;
        }
        let raw = self.coarse_fraction * self.total_steps as f64;
        (raw.round() as u64).min(self.total_steps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Coarse,
    Fine,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Coarse => "coarse",
            Phase::Fine => "fine",
        }
    }
}

pub fn phase_of(cfg: &TrainConfig, step: u64) -> Phase {
    if step < cfg.coarse_steps() {
        Phase::Coarse
    } else {
        Phase::Fine
    }
}

/// Full model shape: backbone, extractors, and the injection plan.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dit: DiTConfig,
    pub extract: ExtractorConfig,
    pub plan: InjectionPlan,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dit: DiTConfig::default(),
            extract: ExtractorConfig::default(),
            plan: InjectionPlan::named('c').expect("plan c"),
        }
    }
}

impl ModelConfig {
    /// The plan actually trained once component switches are applied.
    pub fn effective_plan(&self, flags: &ComponentFlags) -> InjectionPlan {
        let mut p = self.plan;
        if !flags.gfe {
            p.low_freq = false;
            p.keypoints = false;
        }
        if !flags.lfe {
            p.hf_site = HfSite::None;
        }
        p
    }

    /// Backbone config with the conditioning channel count matching the plan.
    pub fn resolved_dit(&self, plan: &InjectionPlan) -> DiTConfig {
        let mut d = self.dit.clone();
        d.cond_channels = if plan.low_freq { self.extract.c_g } else { 0 };
        d
    }

    pub fn validate(&self, flags: &ComponentFlags) -> Result<()> {
        let plan = self.effective_plan(flags);
        let dit = self.resolved_dit(&plan);
        dit.validate()?;
        self.extract.validate()?;
        if plan.uses_id_tokens() && self.extract.dim != self.dit.dim {
            return Err(IdvidError::Config(format!(
                "identity token dim {} must match backbone dim {}",
                self.extract.dim, self.dit.dim
            )));
        }
        if plan.low_freq && dit.grid_h() != dit.grid_w() {
            return Err(IdvidError::Config(format!(
                "low-frequency map needs a square latent grid, got {}x{}",
                dit.grid_h(),
                dit.grid_w()
            )));
        }
        Ok(())
    }

    /// Register every parameter the effective plan can touch.
    pub fn register(&self, b: &mut ParamBuilder, flags: &ComponentFlags) {
        let plan = self.effective_plan(flags);
        let dit = self.resolved_dit(&plan);
        register_dit(b, &dit, &plan);
        if plan.low_freq {
            register_gfe(b, &self.extract, dit.grid_h());
        }
        if plan.uses_id_tokens() {
            register_lfe(b, &self.extract);
        }
    }
}

/// Which reference-selection branch a sample took.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefBranch {
    InWindow,
    CrossFace,
    /// Cross-face was drawn but no out-of-window frame exists.
    InWindowFallback,
}

impl RefBranch {
    pub fn as_str(self) -> &'static str {
        match self {
            RefBranch::InWindow => "in",
            RefBranch::CrossFace => "cross",
            RefBranch::InWindowFallback => "in_fallback",
        }
    }
}

/// Draw a reference frame index: out-of-window with probability `beta`,
/// otherwise from inside the window. Falls back to in-window when the clip
/// has no frames outside the window.
pub fn select_reference(
    total_frames: usize,
    window_start: usize,
    window_len: usize,
    beta: f64,
    rng: &mut impl Rng,
) -> (usize, RefBranch) {
    let want_cross = uniform(rng, 0.0, 1.0) <= beta;
    let n_outside = total_frames - window_len;
    if want_cross && n_outside > 0 {
        let k = rng.gen_range(0..n_outside);
        let frame = if k < window_start { k } else { k + window_len };
        (frame, RefBranch::CrossFace)
    } else {
        let frame = window_start + rng.gen_range(0..window_len);
        let tag = if want_cross {
            RefBranch::InWindowFallback
        } else {
            RefBranch::InWindow
        };
        (frame, tag)
    }
}

/// Pre-drawn randomness for one sample of one step. Everything stochastic is
/// fixed here (or derived from the stored seeds), so building the loss twice
/// with the same plan gives the same graph.
#[derive(Clone, Debug)]
pub struct SamplePlan {
    pub dataset_index: usize,
    pub window_start: usize,
    /// Dynamic-mask draw: use the masked loss for this sample.
    pub use_masked: bool,
    pub ref_frame: usize,
    pub branch: RefBranch,
    pub null_text: bool,
    pub t: usize,
    pub eps_seed: u64,
    pub zeta_seed: u64,
    /// Seed for in-graph stochastic parts (token dropping, ffn dropout).
    pub graph_seed: u64,
}

/// Draw the whole batch's randomness for a step.
pub fn sample_step_plan(
    cfg: &TrainConfig,
    model_frames: usize,
    dataset: &[VideoSample],
    sched: &NoiseSchedule,
    step: u64,
) -> Vec<SamplePlan> {
    let mut batch_rng = stream(cfg.seed, "batch", &[step]);
    let mut plans = Vec::with_capacity(cfg.batch_size);
    for slot in 0..cfg.batch_size {
        let dataset_index = batch_rng.gen_range(0..dataset.len());
        let sample = &dataset[dataset_index];
        let mut r = stream(cfg.seed, "plan", &[step, slot as u64]);
        let window_start = r.gen_range(0..=sample.t - model_frames);
        let use_masked = cfg.components.dml && uniform(&mut r, 0.0, 1.0) > cfg.alpha;
        let (ref_frame, branch) = if cfg.components.dcl {
            select_reference(sample.t, window_start, model_frames, cfg.beta, &mut r)
        } else {
            let frame = window_start + r.gen_range(0..model_frames);
            (frame, RefBranch::InWindow)
        };
        let null_text = uniform(&mut r, 0.0, 1.0) < cfg.null_text_ratio;
        let t = r.gen_range(0..sched.t_diffusion);
        plans.push(SamplePlan {
            dataset_index,
            window_start,
            use_masked,
            ref_frame,
            branch,
            null_text,
            t,
            eps_seed: r.gen(),
            zeta_seed: r.gen(),
            graph_seed: r.gen(),
        });
    }
    plans
}

/// Trilinear resample of a binary per-frame mask onto the latent token grid,
/// broadcast across `channels`. Output rows follow token order
/// (frame, grid_y, grid_x); values stay in [0, 1].
pub fn mask_to_latent(
    mask: &[Vec<u8>],
    h: usize,
    w: usize,
    gh: usize,
    gw: usize,
    channels: usize,
) -> Result<Tensor> {
    let t = mask.len();
    if t == 0 || h == 0 || w == 0 || gh == 0 || gw == 0 || channels == 0 {
        return Err(IdvidError::InvalidArgument(
            "mask_to_latent requires nonzero dims".into(),
        ));
    }
    for (fi, m) in mask.iter().enumerate() {
        if m.len() != h * w {
            return Err(IdvidError::InvalidArgument(format!(
                "mask frame {fi} has {} cells, expected {}",
                m.len(),
                h * w
            )));
        }
    }
    // Half-pixel-center taps along one axis, clamped at the edges.
    let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let src = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
                let lo = src.floor().clamp(0.0, (n_in - 1) as f64);
                let frac = (src - lo).clamp(0.0, 1.0);
                let lo = lo as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, frac)
            })
            .collect()
    };
    let tt = taps(t, t); // identity, kept for symmetry of the three axes
    let ty = taps(gh, h);
    let tx = taps(gw, w);
    let mut out = Tensor::zeros(t * gh * gw, channels);
    for (fi, &(f0, f1, ff)) in tt.iter().enumerate() {
        for (gy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (gx, &(x0, x1, fx)) in tx.iter().enumerate() {
                let at = |f: usize, y: usize, x: usize| mask[f][y * w + x] as f64;
                let c00 = at(f0, y0, x0) * (1.0 - fx) + at(f0, y0, x1) * fx;
                let c01 = at(f0, y1, x0) * (1.0 - fx) + at(f0, y1, x1) * fx;
                let c10 = at(f1, y0, x0) * (1.0 - fx) + at(f1, y0, x1) * fx;
                let c11 = at(f1, y1, x0) * (1.0 - fx) + at(f1, y1, x1) * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                let v = c0 * (1.0 - ff) + c1 * ff;
                let row = (fi * gh + gy) * gw + gx;
                for c in 0..channels {
                    out.set(row, c, v);
                }
            }
        }
    }
    Ok(out)
}

/// Masked squared error: sum(M * (eps - eps_hat)^2) / max(sum(M), 1).
pub fn masked_loss(ctx: &mut Ctx, eps: VarId, eps_hat: VarId, m: &Tensor) -> VarId {
    let diff = ctx.g.sub(eps, eps_hat);
    let sq = ctx.g.square(diff);
    let weighted = ctx.g.mul_mask(sq, m.clone());
    let total = ctx.g.sum_all(weighted);
    let denom = m.data().iter().sum::<f64>().max(1.0);
    ctx.g.scale(total, 1.0 / denom)
}

/// Plain squared error averaged over every element. Reduced as a sum scaled
/// by the reciprocal count, the same shape as the masked reduction, so an
/// all-ones mask reproduces this value bit for bit.
pub fn plain_loss(ctx: &mut Ctx, eps: VarId, eps_hat: VarId) -> VarId {
    let diff = ctx.g.sub(eps, eps_hat);
    let sq = ctx.g.square(diff);
    let total = ctx.g.sum_all(sq);
    let (rows, cols) = ctx.g.value(sq).shape();
    ctx.g.scale(total, 1.0 / (rows * cols) as f64)
}

/// Pick between the masked and plain losses per the sample's dynamic-mask
/// draw (already recorded in the plan).
pub fn dynamic_mask_loss(
    ctx: &mut Ctx,
    eps: VarId,
    eps_hat: VarId,
    m: Option<&Tensor>,
) -> VarId {
    match m {
        Some(mask) => masked_loss(ctx, eps, eps_hat, mask),
        None => plain_loss(ctx, eps, eps_hat),
    }
}

/// Constant (non-differentiated) inputs for one sample, fully determined by
/// the dataset, the plan, and the configs.
struct PreparedSample {
    x_t: Tensor,
    eps: Tensor,
    mask: Option<Tensor>,
    ref_face: Tensor,
    kps_image: Option<Tensor>,
    caption: Vec<u16>,
    t: usize,
    graph_seed: u64,
}

fn prepare_sample(
    model: &ModelConfig,
    eff: &InjectionPlan,
    dit: &DiTConfig,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    sample: &VideoSample,
    plan: &SamplePlan,
) -> Result<PreparedSample> {
    let f = dit.frames;
    if sample.t < f {
        return Err(IdvidError::InvalidArgument(format!(
            "clip has {} frames but the model consumes {f}",
            sample.t
        )));
    }
    if sample.h != dit.height || sample.w != dit.width {
        return Err(IdvidError::InvalidArgument(format!(
            "clip is {}x{} but the model expects {}x{}",
            sample.h, sample.w, dit.height, dit.width
        )));
    }
    let window = &sample.frames[plan.window_start..plan.window_start + f];
    let x0 = patchify(window, sample.h, sample.w, dit.patch)?;
    let mask = if plan.use_masked {
        Some(mask_to_latent(
            &sample.mask[plan.window_start..plan.window_start + f],
            sample.h,
            sample.w,
            dit.grid_h(),
            dit.grid_w(),
            dit.base_channels(),
        )?)
    } else {
        None
    };

    let s = model.extract.s;
    let kps = &sample.keypoints[plan.ref_frame];
    let mut ref_face = crop_align(&sample.frames[plan.ref_frame], sample.h, sample.w, kps, s)?;
    let sigma = if cfg.components.dcl { cfg.zeta_sigma } else { 0.0 };
    if sigma > 0.0 {
        let mut zr = stream(plan.zeta_seed, "ref-noise", &[]);
        for v in ref_face.data_mut() {
            *v = (*v + sigma * normal(&mut zr)).clamp(0.0, 1.0);
        }
    }
    let kps_image = if eff.low_freq {
        Some(if eff.keypoints {
            let mapped = map_keypoints_to_crop(kps, s)?;
            render_keypoints_rgb(&mapped, s)?
        } else {
            zero_kps_image(s)
        })
    } else {
        None
    };

    let mut er = stream(plan.eps_seed, "train-eps", &[]);
    let eps = noise_like(x0.rows(), x0.cols(), &mut er);
    let x_t = q_sample(sched, &x0, plan.t, &eps)?;
    let caption = if plan.null_text {
        Vec::new()
    } else {
        sample.caption.clone()
    };
    Ok(PreparedSample {
        x_t,
        eps,
        mask,
        ref_face,
        kps_image,
        caption,
        t: plan.t,
        graph_seed: plan.graph_seed,
    })
}

/// Build the averaged batch loss on a fresh tape. Identity tokens are built
/// only in the fine phase; in the coarse phase the fine pathway's parameters
/// are never bound, so they receive no gradient at all.
pub fn build_batch_loss<'p>(
    params: &'p ParamStore,
    model: &ModelConfig,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    dataset: &[VideoSample],
    plans: &[SamplePlan],
    phase: Phase,
) -> Result<(Ctx<'p>, VarId)> {
    if plans.is_empty() {
        return Err(IdvidError::InvalidArgument("empty step plan".into()));
    }
    let eff = model.effective_plan(&cfg.components);
    let dit = model.resolved_dit(&eff);
    let mut ctx = Ctx::new(params);
    let mut acc: Option<VarId> = None;
    for plan in plans {
        let sample = dataset.get(plan.dataset_index).ok_or_else(|| {
            IdvidError::InvalidArgument(format!(
                "plan references clip {} of {}",
                plan.dataset_index,
                dataset.len()
            ))
        })?;
        let prep = prepare_sample(model, &eff, &dit, cfg, sched, sample, plan)?;
        let mut latent = ctx.leaf(prep.x_t);
        if eff.low_freq {
            let kps_img = prep.kps_image.as_ref().expect("kps image built with low_freq");
            let gfe_map =
                gfe_encode(&mut ctx, &model.extract, &prep.ref_face, kps_img, dit.grid_h())?;
            latent = apply_low_freq(&mut ctx, latent, gfe_map, dit.frames)?;
        }
        let id_tokens = if eff.uses_id_tokens() && phase == Phase::Fine {
            let mut gr = stream(prep.graph_seed, "graph-drop", &[]);
            Some(lfe_encode(
                &mut ctx,
                &model.extract,
                &prep.ref_face,
                Some(&mut gr),
            )?)
        } else {
            None
        };
        let text = text_encode(&mut ctx, &dit, &prep.caption)?;
        let eps_hat = dit_forward(&mut ctx, &dit, &eff, latent, text, prep.t, id_tokens)?;
        let eps = ctx.leaf(prep.eps);
        let li = dynamic_mask_loss(&mut ctx, eps, eps_hat, prep.mask.as_ref());
        let scaled = ctx.g.scale(li, 1.0 / plans.len() as f64);
        acc = Some(match acc {
            Some(a) => ctx.g.add(a, scaled),
            None => scaled,
        });
    }
    Ok((ctx, acc.expect("nonempty batch")))
}

fn is_trainable(name: &str) -> bool {
    !TOWER_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: String,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub branch_tags: Vec<String>,
}

/// Mutable training state threaded through steps.
pub struct TrainState {
    pub params: ParamStore,
    pub opt: AdamW,
    pub step: u64,
    pub high_grad_streak: u32,
    pub diverged: Option<String>,
}

pub const DIVERGENCE_STREAK: u32 = 5;

/// Run one optimizer step. Returns the step record; on divergence the state's
/// `diverged` flag is set and parameters are left untouched.
pub fn train_step(
    state: &mut TrainState,
    model: &ModelConfig,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    dataset: &[VideoSample],
) -> Result<StepRecord> {
    let step = state.step;
    let phase = phase_of(cfg, step);
    if cfg.inject_nan_step == Some(step) {
        state.params.get_mut("dit.in.w").data_mut()[0] = f64::NAN;
    }
    let eff = model.effective_plan(&cfg.components);
    let dit = model.resolved_dit(&eff);
    let plans = sample_step_plan(cfg, dit.frames, dataset, sched, step);
    let branch_tags: Vec<String> = plans.iter().map(|p| p.branch.as_str().to_string()).collect();
    let (ctx, loss_id) = build_batch_loss(&state.params, model, cfg, sched, dataset, &plans, phase)?;
    let loss = ctx.g.value(loss_id).item();
    let mut record = StepRecord {
        step,
        phase: phase.as_str().to_string(),
        loss,
        grad_norm: f64::NAN,
        lr: 0.0,
        branch_tags,
    };
    if !loss.is_finite() {
        state.diverged = Some(format!("non-finite loss at step {step}"));
        state.step += 1;
        return Ok(record);
    }
    let grads = ctx.g.backward(loss_id);
    let mut by_name: BTreeMap<String, Tensor> = ctx
        .param_grads(&grads)
        .into_iter()
        .filter(|(name, _)| is_trainable(name))
        .collect();
    drop(ctx);
    let grad_norm = global_grad_norm(&by_name);
    record.grad_norm = grad_norm;
    if !grad_norm.is_finite() {
        state.diverged = Some(format!("non-finite gradient at step {step}"));
        state.step += 1;
        return Ok(record);
    }
    if grad_norm > cfg.divergence_grad_threshold {
        state.high_grad_streak += 1;
        if state.high_grad_streak >= DIVERGENCE_STREAK {
            state.diverged = Some(format!(
                "gradient norm {grad_norm:.3e} above {:.3e} for {} consecutive steps (step {step})",
                cfg.divergence_grad_threshold, DIVERGENCE_STREAK
            ));
            state.step += 1;
            return Ok(record);
        }
    } else {
        state.high_grad_streak = 0;
    }
    clip_grads(&mut by_name, cfg.max_grad_norm);
    let lr = lr_cosine_restarts(
        step,
        cfg.total_steps,
        cfg.warmup_steps,
        cfg.lr_cycles,
        cfg.learning_rate,
        cfg.lr_floor_frac,
    );
    record.lr = lr;
    state.opt.step(&mut state.params, &by_name, lr);
    state.step += 1;
    Ok(record)
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub records: Vec<StepRecord>,
    pub diverged: Option<String>,
    pub steps_run: u64,
}

/// Initialize model parameters and copy in the frozen tower weights.
pub fn init_model_params(
    model: &ModelConfig,
    flags: &ComponentFlags,
    towers: &ParamStore,
    seed: u64,
) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut b = ParamBuilder::new(&mut store, seed);
    model.register(&mut b, flags);
    let eff = model.effective_plan(flags);
    if eff.uses_id_tokens() {
        let mut found = [false; 2];
        for (name, t) in towers.iter() {
            for (i, p) in TOWER_PREFIXES.iter().enumerate() {
                if name.starts_with(p) {
                    found[i] = true;
                }
            }
            if TOWER_PREFIXES.iter().any(|p| name.starts_with(p)) {
                store.insert(name, t.clone());
            }
        }
        if !found.iter().all(|&f| f) {
            return Err(IdvidError::Config(
                "identity tokens need pretrained face and semantic towers".into(),
            ));
        }
    }
    Ok(store)
}

/// Full training run: phase schedule, metrics log, checkpoints at the phase
/// boundary and the end. Divergence sets the outcome flag rather than
/// erroring so callers can keep partial results.
pub fn run_training(
    model: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &[VideoSample],
    towers: &ParamStore,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate(&cfg.components)?;
    if dataset.is_empty() {
        return Err(IdvidError::InvalidArgument("empty dataset".into()));
    }
    let eff = model.effective_plan(&cfg.components);
    let dit = model.resolved_dit(&eff);
    for (i, s) in dataset.iter().enumerate() {
        if s.t < dit.frames || s.h != dit.height || s.w != dit.width {
            return Err(IdvidError::InvalidArgument(format!(
                "clip {i} is {}x{}x{}, model needs >= {} frames at {}x{}",
                s.t, s.h, s.w, dit.frames, dit.height, dit.width
            )));
        }
    }
    let sched = NoiseSchedule::default_scale();
    let params = init_model_params(model, &cfg.components, towers, cfg.seed)?;
    let mut state = TrainState {
        params,
        opt: AdamW::new(cfg.weight_decay),
        step: 0,
        high_grad_streak: 0,
        diverged: None,
    };

    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| IdvidError::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            Some((
                std::fs::File::create(&path).map_err(|e| IdvidError::io(&path, e))?,
                path,
            ))
        }
        None => None,
    };
    let meta = |phase: &str, step: u64, diverged: bool| -> Result<String> {
        Ok(serde_json::to_string(&serde_json::json!({
            "kind": "model-checkpoint",
            "format_version": 1,
            "phase": phase,
            "step": step,
            "diverged": diverged,
            "model": model,
            "train": cfg,
        }))?)
    };

    let coarse_steps = cfg.coarse_steps();
    let mut records = Vec::with_capacity(cfg.total_steps as usize);
    while state.step < cfg.total_steps && state.diverged.is_none() {
        let record = train_step(&mut state, model, cfg, &sched, dataset)?;
        if let Some((f, path)) = log.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(f, "{line}").map_err(|e| IdvidError::io(&*path, e))?;
        }
        records.push(record);
        // Boundary checkpoint once the coarse phase has fully run.
        if state.step == coarse_steps
            && coarse_steps > 0
            && coarse_steps < cfg.total_steps
            && state.diverged.is_none()
        {
            if let Some(dir) = out_dir {
                let path = dir.join("phase-coarse.ckpt");
                let opt_state = state.opt.export_state();
                save_checkpoint(
                    &path,
                    &meta("coarse", state.step, false)?,
                    state
                        .params
                        .iter()
                        .chain(opt_state.iter().map(|(n, t)| (n, t))),
                )?;
            }
        }
    }
    let diverged = state.diverged.clone();
    if let Some(dir) = out_dir {
        let path = dir.join("final.ckpt");
        let phase = phase_of(cfg, state.step.saturating_sub(1)).as_str();
        let opt_state = state.opt.export_state();
        save_checkpoint(
            &path,
            &meta(phase, state.step, diverged.is_some())?,
            state
                .params
                .iter()
                .chain(opt_state.iter().map(|(n, t)| (n, t))),
        )?;
    }
    Ok(TrainOutcome {
        params: state.params,
        records,
        diverged,
        steps_run: state.step,
    })
}
