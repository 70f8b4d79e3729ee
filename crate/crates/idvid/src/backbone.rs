//! The toy video diffusion transformer.
//!
//! The latent space is an exact space-to-depth rearrangement (patch factor
//! p), so "encoding" is invertible and testable bit-exactly. Text enters as
//! learned token embeddings concatenated with vision tokens in self-
//! attention; identity tokens enter through per-block residual cross-
//! attention at the site selected by the active injection plan. The final
//! projection is zero-initialized, so a fresh model predicts zero noise.

use crate::error::{IdvidError, Result};
use crate::graph::VarId;
use crate::injection::{HfSite, InjectionPlan};
use crate::nn::{attention, ffn, layer_norm, linear, Ctx, ParamBuilder};
use crate::tensor::Tensor;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiTConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub text_vocab: usize,
    pub max_text_tokens: usize,
    pub patch: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Extra conditioning channels concatenated onto each latent token
    /// (0 when the low-frequency pathway is off).
    pub cond_channels: usize,
    pub timestep_dim: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        DiTConfig {
            depth: 4,
            dim: 128,
            heads: 4,
            text_vocab: crate::synthdata::VOCAB_SIZE,
            max_text_tokens: 8,
            patch: 4,
            frames: 4,
            height: 32,
            width: 32,
            cond_channels: 0,
            timestep_dim: 32,
        }
    }
}

impl DiTConfig {
    pub fn base_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn in_channels(&self) -> usize {
        self.base_channels() + self.cond_channels
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch
    }

    pub fn n_vision_tokens(&self) -> usize {
        self.frames * self.grid_h() * self.grid_w()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(IdvidError::Config(format!(
                "model dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(IdvidError::Config(format!(
                "frame dims {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.depth == 0 || self.frames == 0 || self.text_vocab == 0 {
            return Err(IdvidError::Config(
                "depth, frames, and text_vocab must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Space-to-depth: frames [3, H*W] become tokens [T*(H/p)*(W/p), 3p^2].
/// Token order is frame-major then row-major over the patch grid; within a
/// token, channel k = (dy*p + dx)*3 + rgb.
pub fn patchify(frames: &[Tensor], h: usize, w: usize, p: usize) -> Result<Tensor> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(IdvidError::InvalidArgument(format!(
            "dims {h}x{w} not divisible by patch {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Tensor::zeros(frames.len() * gh * gw, 3 * p * p);
    for (fi, frame) in frames.iter().enumerate() {
        if frame.shape() != (3, h * w) {
            return Err(IdvidError::InvalidArgument(format!(
                "frame {fi} has shape {:?}, expected (3, {})",
                frame.shape(),
                h * w
            )));
        }
        for gy in 0..gh {
            for gx in 0..gw {
                let token = (fi * gh + gy) * gw + gx;
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..3 {
                            let v = frame.get(c, (gy * p + dy) * w + (gx * p + dx));
                            out.set(token, (dy * p + dx) * 3 + c, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of `patchify`.
pub fn unpatchify(tokens: &Tensor, t: usize, h: usize, w: usize, p: usize) -> Result<Vec<Tensor>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(IdvidError::InvalidArgument(format!(
            "dims {h}x{w} not divisible by patch {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    if tokens.shape() != (t * gh * gw, 3 * p * p) {
        return Err(IdvidError::InvalidArgument(format!(
            "token tensor shape {:?} does not match t={t} h={h} w={w} p={p}",
            tokens.shape()
        )));
    }
    let mut frames = vec![Tensor::zeros(3, h * w); t];
    for fi in 0..t {
        for gy in 0..gh {
            for gx in 0..gw {
                let token = (fi * gh + gy) * gw + gx;
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..3 {
                            let v = tokens.get(token, (dy * p + dx) * 3 + c);
                            frames[fi].set(c, (gy * p + dy) * w + (gx * p + dx), v);
                        }
                    }
                }
            }
        }
    }
    Ok(frames)
}

pub fn register_dit(b: &mut ParamBuilder, cfg: &DiTConfig, plan: &InjectionPlan) {
    let d = cfg.dim;
    b.linear("dit.in", cfg.in_channels(), d);
    b.table("dit.vpos", cfg.n_vision_tokens(), d, 0.02);
    b.table("dit.tpos", cfg.max_text_tokens, d, 0.02);
    b.table("dit.temb", cfg.text_vocab, d, 0.02);
    b.linear("dit.tmlp1", cfg.timestep_dim, d);
    b.linear("dit.tmlp2", d, d);
    for i in 0..cfg.depth {
        b.layer_norm(&format!("dit.blk{i}.ln1"), d);
        b.attention(&format!("dit.blk{i}.attn"), d, false);
        b.layer_norm(&format!("dit.blk{i}.ln2"), d);
        b.ffn(&format!("dit.blk{i}.ffn"), d, 4);
        if matches!(plan.hf_site, HfSite::Inner | HfSite::Output | HfSite::Input) {
            b.layer_norm(&format!("dit.blk{i}.idln"), d);
            b.attention(&format!("dit.blk{i}.id"), d, true);
        }
    }
    if plan.hf_site == HfSite::Pre {
        b.layer_norm("dit.pre.idln", d);
        b.attention("dit.pre.id", d, true);
    }
    b.layer_norm("dit.lnf", d);
    b.linear_zero("dit.out", d, cfg.base_channels());
}

/// Sinusoidal timestep features (constant w.r.t. parameters).
pub fn timestep_features(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(1, dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half.max(1) as f64);
        out.data_mut()[i] = (t as f64 * freq).sin();
        out.data_mut()[half + i] = (t as f64 * freq).cos();
    }
    out
}

/// Embed a caption: learned token rows plus learned positions. An empty
/// caption yields the single null row (token 0, no position), the
/// classifier-free-guidance unconditional path.
pub fn text_encode(ctx: &mut Ctx, cfg: &DiTConfig, caption: &[u16]) -> Result<VarId> {
    let table = ctx.p("dit.temb");
    if caption.is_empty() {
        return Ok(ctx.g.gather_rows(table, &[0]));
    }
    if caption.len() > cfg.max_text_tokens {
        return Err(IdvidError::InvalidArgument(format!(
            "caption length {} exceeds max {}",
            caption.len(),
            cfg.max_text_tokens
        )));
    }
    let mut idx = Vec::with_capacity(caption.len());
    for &tok in caption {
        if tok as usize >= cfg.text_vocab {
            return Err(IdvidError::InvalidArgument(format!(
                "caption token {tok} outside vocabulary of {}",
                cfg.text_vocab
            )));
        }
        idx.push(tok as usize);
    }
    let emb = ctx.g.gather_rows(table, &idx);
    let pos_table = ctx.p("dit.tpos");
    let pos = ctx
        .g
        .gather_rows(pos_table, &(0..caption.len()).collect::<Vec<_>>());
    Ok(ctx.g.add(emb, pos))
}

fn id_sublayer(ctx: &mut Ctx, prefix: &str, vision: VarId, f: VarId, heads: usize) -> VarId {
    let zn = layer_norm(ctx, &format!("{prefix}.idln"), vision);
    let a = attention(ctx, &format!("{prefix}.id"), zn, f, heads);
    ctx.g.add(vision, a)
}

/// One denoiser evaluation: predicts the noise for every vision token.
///
/// `latent` is [n_vision, in_channels]; `text` is [L, dim]; `id_tokens` are
/// the fused identity tokens or absent (coarse phase / plans without token
/// injection). Output is [n_vision, base_channels].
pub fn dit_forward(
    ctx: &mut Ctx,
    cfg: &DiTConfig,
    plan: &InjectionPlan,
    latent: VarId,
    text: VarId,
    t: usize,
    id_tokens: Option<VarId>,
) -> Result<VarId> {
    let (n_vis, in_ch) = ctx.g.value(latent).shape();
    if n_vis != cfg.n_vision_tokens() || in_ch != cfg.in_channels() {
        return Err(IdvidError::InvalidArgument(format!(
            "latent shape ({n_vis}, {in_ch}) does not match config ({}, {})",
            cfg.n_vision_tokens(),
            cfg.in_channels()
        )));
    }
    let n_text = ctx.g.value(text).rows();
    if ctx.g.value(text).cols() != cfg.dim {
        return Err(IdvidError::InvalidArgument(
            "text embedding dim mismatch".into(),
        ));
    }
    if id_tokens.is_some() && plan.hf_site == HfSite::None {
        return Err(IdvidError::InvalidArgument(
            "identity tokens supplied but the plan has no injection site".into(),
        ));
    }
    if let Some(f) = id_tokens {
        if ctx.g.value(f).cols() != cfg.dim {
            return Err(IdvidError::InvalidArgument(
                "identity token dim mismatch".into(),
            ));
        }
    }

    let mut vision = linear(ctx, "dit.in", latent);
    let vpos = ctx.p("dit.vpos");
    vision = ctx.g.add(vision, vpos);

    let tfeat = ctx.leaf(timestep_features(t, cfg.timestep_dim));
    let temb = linear(ctx, "dit.tmlp1", tfeat);
    let temb = ctx.g.gelu(temb);
    let temb = linear(ctx, "dit.tmlp2", temb);
    vision = ctx.g.add_row_bias(vision, temb);
    let text = ctx.g.add_row_bias(text, temb);

    if let (HfSite::Pre, Some(f)) = (plan.hf_site, id_tokens) {
        vision = id_sublayer(ctx, "dit.pre", vision, f, cfg.heads);
    }

    let mut x = ctx.g.concat_rows(&[text, vision]);
    for i in 0..cfg.depth {
        let prefix = format!("dit.blk{i}");
        if let (HfSite::Input, Some(f)) = (plan.hf_site, id_tokens) {
            let v = ctx.g.slice_rows(x, n_text, n_vis);
            let v = id_sublayer(ctx, &prefix, v, f, cfg.heads);
            let tx = ctx.g.slice_rows(x, 0, n_text);
            x = ctx.g.concat_rows(&[tx, v]);
        }
        let xn = layer_norm(ctx, &format!("{prefix}.ln1"), x);
        let a = attention(ctx, &format!("{prefix}.attn"), xn, xn, cfg.heads);
        x = ctx.g.add(x, a);
        if let (HfSite::Inner, Some(f)) = (plan.hf_site, id_tokens) {
            let v = ctx.g.slice_rows(x, n_text, n_vis);
            let v = id_sublayer(ctx, &prefix, v, f, cfg.heads);
            let tx = ctx.g.slice_rows(x, 0, n_text);
            x = ctx.g.concat_rows(&[tx, v]);
        }
        let xn = layer_norm(ctx, &format!("{prefix}.ln2"), x);
        let h = ffn(ctx, &format!("{prefix}.ffn"), xn);
        x = ctx.g.add(x, h);
        if let (HfSite::Output, Some(f)) = (plan.hf_site, id_tokens) {
            let v = ctx.g.slice_rows(x, n_text, n_vis);
            let v = id_sublayer(ctx, &prefix, v, f, cfg.heads);
            let tx = ctx.g.slice_rows(x, 0, n_text);
            x = ctx.g.concat_rows(&[tx, v]);
        }
    }
    let xn = layer_norm(ctx, "dit.lnf", x);
    let v = ctx.g.slice_rows(xn, n_text, n_vis);
    Ok(linear(ctx, "dit.out", v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::nn::ParamStore;
    use crate::rng;
    use proptest::prelude::*;

    fn random_frames(t: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
        let mut r = rng::stream(seed, "test-frames", &[]);
        (0..t)
            .map(|_| {
                let mut f = Tensor::zeros(3, h * w);
                for v in f.data_mut() {
                    *v = rng::uniform(&mut r, 0.0, 1.0);
                }
                f
            })
            .collect()
    }

    fn tiny_config() -> DiTConfig {
        DiTConfig {
            depth: 1,
            dim: 16,
            heads: 2,
            text_vocab: crate::synthdata::VOCAB_SIZE,
            max_text_tokens: 4,
            patch: 4,
            frames: 1,
            height: 8,
            width: 8,
            cond_channels: 0,
            timestep_dim: 8,
        }
    }

    #[test]
    fn patchify_round_trip_is_exact() {
        let frames = random_frames(4, 16, 16, 3);
        let tokens = patchify(&frames, 16, 16, 4).unwrap();
        assert_eq!(tokens.shape(), (4 * 4 * 4, 48));
        let back = unpatchify(&tokens, 4, 16, 16, 4).unwrap();
        assert_eq!(back, frames);
    }

    #[test]
    fn patchify_is_linear_and_maps_pixels_to_known_slots() {
        let zero = vec![Tensor::zeros(3, 16 * 16); 2];
        let tokens = patchify(&zero, 16, 16, 4).unwrap();
        assert!(tokens.data().iter().all(|&v| v == 0.0));

        // one lit pixel: frame 1, channel 2, x=9, y=6 with p=4
        let mut frames = zero;
        frames[1].set(2, 6 * 16 + 9, 0.625);
        let tokens = patchify(&frames, 16, 16, 4).unwrap();
        let (gy, gx, dy, dx) = (6 / 4, 9 / 4, 6 % 4, 9 % 4);
        let row = (1 * 4 + gy) * 4 + gx;
        let col = (dy * 4 + dx) * 3 + 2;
        let lit: Vec<usize> = tokens
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(lit, vec![row * tokens.cols() + col]);
        assert_eq!(tokens.get(row, col), 0.625);
    }

    #[test]
    fn patchify_rejects_indivisible_dims() {
        let frames = random_frames(1, 15, 16, 0);
        assert!(matches!(
            patchify(&frames, 15, 16, 4),
            Err(IdvidError::InvalidArgument(_))
        ));
        let ok = patchify(&random_frames(1, 16, 16, 0), 16, 16, 4).unwrap();
        assert!(unpatchify(&ok, 2, 16, 16, 4).is_err()); // wrong frame count
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn patchify_round_trip_for_arbitrary_dims(
            t in 1usize..4,
            gh in 1usize..5,
            gw in 1usize..5,
            p in 1usize..5,
            seed in 0u64..1_000,
        ) {
            let (h, w) = (gh * p, gw * p);
            let frames = random_frames(t, h, w, seed);
            let tokens = patchify(&frames, h, w, p).unwrap();
            prop_assert_eq!(tokens.shape(), (t * gh * gw, 3 * p * p));
            let back = unpatchify(&tokens, t, h, w, p).unwrap();
            prop_assert_eq!(back, frames);
        }
    }

    #[test]
    fn text_encoding_is_deterministic_and_position_sensitive() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 5);
        register_dit(&mut b, &cfg, &InjectionPlan::named('b').unwrap());

        let run = |tokens: &[u16]| -> Result<Tensor> {
            let mut ctx = Ctx::new(&store);
            let id = text_encode(&mut ctx, &cfg, tokens)?;
            Ok(ctx.g.value(id).clone())
        };
        assert_eq!(run(&[1, 2, 3]).unwrap(), run(&[1, 2, 3]).unwrap());
        // positions are live: permuting the tokens moves the embeddings
        let fwd = run(&[1, 2]).unwrap();
        let rev = run(&[2, 1]).unwrap();
        assert_ne!(fwd, rev);

        let null = run(&[]).unwrap();
        assert_eq!(null.rows(), 1);
        let row0: Vec<f64> = (0..cfg.dim).map(|j| store.get("dit.temb").get(0, j)).collect();
        for (j, want) in row0.iter().enumerate() {
            assert_eq!(null.get(0, j), *want);
        }

        assert!(matches!(
            run(&[crate::synthdata::VOCAB_SIZE as u16]),
            Err(IdvidError::InvalidArgument(_))
        ));
        assert!(run(&[1; 5]).is_err()); // longer than max_text_tokens
    }

    #[test]
    fn fresh_denoiser_predicts_exactly_zero() {
        let cfg = tiny_config();
        let plan = InjectionPlan::named('b').unwrap();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 9);
        register_dit(&mut b, &cfg, &plan);

        let mut ctx = Ctx::new(&store);
        let mut latent = Tensor::zeros(cfg.n_vision_tokens(), cfg.in_channels());
        let mut r = rng::stream(2, "t", &[]);
        for v in latent.data_mut() {
            *v = rng::normal(&mut r);
        }
        let latent = ctx.leaf(latent);
        let text = text_encode(&mut ctx, &cfg, &[1, 2]).unwrap();
        let out = dit_forward(&mut ctx, &cfg, &plan, latent, text, 7, None).unwrap();
        let out = ctx.g.value(out);
        assert_eq!(out.shape(), (cfg.n_vision_tokens(), cfg.base_channels()));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_validates_wiring() {
        let cfg = tiny_config();
        let plan = InjectionPlan::named('c').unwrap();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 4);
        register_dit(&mut b, &cfg, &plan);
        // make the output layer live so determinism is not trivially zero
        let mut r = rng::stream(40, "out-rand", &[]);
        for v in store.get_mut("dit.out.w").data_mut() {
            *v = rng::normal(&mut r) * 0.1;
        }

        let run = || -> Tensor {
            let mut ctx = Ctx::new(&store);
            let mut latent = Tensor::zeros(cfg.n_vision_tokens(), cfg.in_channels());
            let mut r = rng::stream(8, "latent", &[]);
            for v in latent.data_mut() {
                *v = rng::normal(&mut r);
            }
            let latent = ctx.leaf(latent);
            let mut f = Tensor::zeros(3, cfg.dim);
            for (i, v) in f.data_mut().iter_mut().enumerate() {
                *v = (i as f64 * 0.37).sin();
            }
            let f = ctx.leaf(f);
            let text = text_encode(&mut ctx, &cfg, &[2, 4]).unwrap();
            let out = dit_forward(&mut ctx, &cfg, &plan, latent, text, 3, Some(f)).unwrap();
            ctx.g.value(out).clone()
        };
        assert_eq!(run(), run());

        // latent with the wrong channel count is refused
        let mut ctx = Ctx::new(&store);
        let bad = ctx.leaf(Tensor::zeros(cfg.n_vision_tokens(), cfg.in_channels() + 1));
        let text = text_encode(&mut ctx, &cfg, &[2]).unwrap();
        assert!(dit_forward(&mut ctx, &cfg, &plan, bad, text, 3, None).is_err());

        // identity tokens are rejected when the plan has no site for them
        let none_plan = InjectionPlan::named('b').unwrap();
        let mut ctx = Ctx::new(&store);
        let latent = ctx.leaf(Tensor::zeros(cfg.n_vision_tokens(), cfg.in_channels()));
        let text = text_encode(&mut ctx, &cfg, &[2]).unwrap();
        let f = ctx.leaf(Tensor::zeros(2, cfg.dim));
        assert!(matches!(
            dit_forward(&mut ctx, &cfg, &none_plan, latent, text, 3, Some(f)),
            Err(IdvidError::InvalidArgument(_))
        ));
    }

    #[test]
    fn denoiser_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let plan = InjectionPlan::named('c').unwrap();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 21);
        register_dit(&mut b, &cfg, &plan);
        // zero-init layers would silence upstream gradients; give them values
        let mut r = rng::stream(77, "degenerate-breaker", &[]);
        for name in ["dit.out.w", "dit.blk0.id.o.w"] {
            for v in store.get_mut(name).data_mut() {
                *v = rng::normal(&mut r) * 0.2;
            }
        }

        let mut latent = Tensor::zeros(cfg.n_vision_tokens(), cfg.in_channels());
        let mut r = rng::stream(13, "gc-latent", &[]);
        for v in latent.data_mut() {
            *v = rng::normal(&mut r);
        }
        let mut ftok = Tensor::zeros(2, cfg.dim);
        for v in ftok.data_mut() {
            *v = rng::normal(&mut r) * 0.5;
        }
        let mut target = Tensor::zeros(cfg.n_vision_tokens(), cfg.base_channels());
        for v in target.data_mut() {
            *v = rng::normal(&mut r);
        }

        let run = |s: &ParamStore| -> (f64, Option<std::collections::BTreeMap<String, Tensor>>) {
            let mut ctx = Ctx::new(s);
            let lv = ctx.leaf(latent.clone());
            let fv = ctx.leaf(ftok.clone());
            let tv = ctx.leaf(target.clone());
            let text = text_encode(&mut ctx, &cfg, &[1, 3]).unwrap();
            let out = dit_forward(&mut ctx, &cfg, &plan, lv, text, 5, Some(fv)).unwrap();
            let diff = ctx.g.sub(out, tv);
            let sq = ctx.g.square(diff);
            let loss = ctx.g.mean_all(sq);
            let grads = ctx.g.backward(loss);
            (ctx.g.value(loss).item(), Some(ctx.param_grads(&grads)))
        };
        let (_, grads) = run(&store);
        let grads = grads.unwrap();
        assert!(grads.contains_key("dit.in.w"));
        assert!(grads.contains_key("dit.blk0.id.q.w"));
        let mut loss_only = |s: &ParamStore| run(s).0;
        let rep = finite_diff_check(&store, &grads, &mut loss_only, 2, 123);
        assert!(
            rep.worst_rel < 1e-3,
            "worst {} rel {}",
            rep.worst_param,
            rep.worst_rel
        );
    }

    #[test]
    fn timestep_features_distinguish_steps() {
        let a = timestep_features(3, 16);
        let b = timestep_features(4, 16);
        assert_eq!(a.shape(), (1, 16));
        assert_ne!(a, b);
        assert_eq!(timestep_features(3, 16), a);
    }
}
