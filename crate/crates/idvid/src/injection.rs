//! Identity-signal wiring plans.
//!
//! A plan says where identity information enters the backbone: a coarse
//! spatial map concatenated onto the noise latent channels (with or without
//! the keypoint image), and fine identity tokens cross-attended at one of
//! several sites inside the transformer. The seven named plans a-g cover the
//! ablation grid.

use crate::error::{IdvidError, Result};
use crate::graph::VarId;
use crate::nn::{attention, Ctx};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HfSite {
    /// No token injection.
    None,
    /// Residual sub-layer between each block's self-attention and FFN.
    Inner,
    /// Residual sub-layer after each block's FFN.
    Output,
    /// Residual sub-layer before each block's self-attention.
    Input,
    /// One residual sub-layer before the first block.
    Pre,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionPlan {
    /// Concatenate the coarse facial map onto the latent channels.
    pub low_freq: bool,
    /// Feed the rendered keypoint image to the coarse extractor (otherwise a
    /// zero image takes its place).
    pub keypoints: bool,
    pub hf_site: HfSite,
}

impl InjectionPlan {
    pub fn named(letter: char) -> Result<InjectionPlan> {
        let (low_freq, keypoints, hf_site) = match letter {
            'a' => (false, false, HfSite::Inner),
            'b' => (true, true, HfSite::None),
            'c' => (true, true, HfSite::Inner),
            'd' => (true, false, HfSite::Inner),
            'e' => (true, true, HfSite::Output),
            'f' => (true, true, HfSite::Input),
            'g' => (false, false, HfSite::Pre),
            _ => {
                return Err(IdvidError::InvalidArgument(format!(
                    "unknown injection plan '{letter}' (expected a-g)"
                )))
            }
        };
        Ok(InjectionPlan {
            low_freq,
            keypoints,
            hf_site,
        })
    }

    pub fn uses_id_tokens(&self) -> bool {
        self.hf_site != HfSite::None
    }
}

/// Concatenate the coarse facial map onto every frame's latent channels.
///
/// `latent` is [T*gh*gw, base_ch]; `gfe_map` is [c_g, gh*gw]. Every frame
/// receives the identical map slice; base channels pass through untouched.
pub fn apply_low_freq(
    ctx: &mut Ctx,
    latent: VarId,
    gfe_map: VarId,
    frames: usize,
) -> Result<VarId> {
    let n_tokens = ctx.g.value(latent).rows();
    let spatial = ctx.g.value(gfe_map).cols();
    if n_tokens != frames * spatial {
        return Err(IdvidError::InvalidArgument(format!(
            "latent token count {n_tokens} != frames {frames} x map cells {spatial}"
        )));
    }
    let per_cell = ctx.g.transpose(gfe_map); // [gh*gw, c_g]
    let repeated = ctx.g.concat_rows(&vec![per_cell; frames]);
    Ok(ctx.g.concat_cols(&[latent, repeated]))
}

/// Residual cross-attention: queries from Z, keys/values from the identity
/// tokens F, added back onto Z. With a zero-initialized output projection
/// this is the identity map at init.
pub fn id_cross_attention(ctx: &mut Ctx, prefix: &str, z: VarId, f: VarId, heads: usize) -> VarId {
    let a = attention(ctx, prefix, z, f, heads);
    ctx.g.add(z, a)
}

/// Plain-data variant of the low-frequency concat shape rule, used by
/// shape-level checks without a tape.
pub fn low_freq_channel_count(base_ch: usize, c_g: usize, low_freq: bool) -> usize {
    if low_freq {
        base_ch + c_g
    } else {
        base_ch
    }
}

/// Zero keypoint image stand-in for plans with keypoints disabled.
pub fn zero_kps_image(s: usize) -> Tensor {
    Tensor::zeros(3, s * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{dit_forward, register_dit, text_encode, DiTConfig};
    use crate::nn::{ParamBuilder, ParamStore};
    use crate::rng;

    #[test]
    fn named_plans_match_the_ablation_grid() {
        let grid = [
            ('a', false, false, HfSite::Inner),
            ('b', true, true, HfSite::None),
            ('c', true, true, HfSite::Inner),
            ('d', true, false, HfSite::Inner),
            ('e', true, true, HfSite::Output),
            ('f', true, true, HfSite::Input),
            ('g', false, false, HfSite::Pre),
        ];
        for (letter, low, kps, site) in grid {
            let p = InjectionPlan::named(letter).unwrap();
            assert_eq!((p.low_freq, p.keypoints, p.hf_site), (low, kps, site));
            assert_eq!(p.uses_id_tokens(), site != HfSite::None);
        }
        assert!(InjectionPlan::named('h').is_err());
        assert!(InjectionPlan::named('A').is_err());
        assert_eq!(low_freq_channel_count(48, 4, true), 52);
        assert_eq!(low_freq_channel_count(48, 4, false), 48);
        assert_eq!(zero_kps_image(8).shape(), (3, 64));
        assert_eq!(zero_kps_image(8).frob_norm(), 0.0);
    }

    #[test]
    fn coarse_map_concat_broadcasts_across_frames() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store);
        let mut r = rng::stream(60, "lowfreq", &[]);
        let mut lat = Tensor::zeros(2 * 6, 5);
        let mut map = Tensor::zeros(3, 6);
        for v in lat.data_mut() {
            *v = rng::normal(&mut r);
        }
        for v in map.data_mut() {
            *v = rng::normal(&mut r);
        }
        let latent = ctx.leaf(lat.clone());
        let gfe = ctx.leaf(map.clone());
        let out = apply_low_freq(&mut ctx, latent, gfe, 2).unwrap();
        let out = ctx.g.value(out);
        assert_eq!(out.shape(), (12, 8));
        for row in 0..12 {
            for c in 0..5 {
                assert_eq!(out.get(row, c), lat.get(row, c));
            }
            let cell = row % 6;
            for ch in 0..3 {
                assert_eq!(out.get(row, 5 + ch), map.get(ch, cell));
            }
        }

        // frame count must divide the token count into map cells
        let latent = ctx.leaf(lat.clone());
        let gfe = ctx.leaf(map.clone());
        assert!(apply_low_freq(&mut ctx, latent, gfe, 4).is_err());

        // a zero map appends zero channels and leaves the base untouched
        let latent = ctx.leaf(lat.clone());
        let zero = ctx.leaf(Tensor::zeros(3, 6));
        let out = apply_low_freq(&mut ctx, latent, zero, 2).unwrap();
        let out = ctx.g.value(out);
        for row in 0..12 {
            for ch in 0..3 {
                assert_eq!(out.get(row, 5 + ch), 0.0);
            }
        }
    }

    #[test]
    fn residual_attention_is_inert_without_signal() {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 61);
        b.attention("xa", 8, true); // zero output projection
        let mut b2 = ParamBuilder::new(&mut store, 62);
        b2.attention("xb", 8, false); // live weights, zero biases

        let mut r = rng::stream(63, "inert", &[]);
        let mut z = Tensor::zeros(5, 8);
        let mut f = Tensor::zeros(3, 8);
        for v in z.data_mut() {
            *v = rng::normal(&mut r);
        }
        for v in f.data_mut() {
            *v = rng::normal(&mut r);
        }

        // zero-init output projection: Z' == Z for any tokens
        let mut ctx = Ctx::new(&store);
        let zi = ctx.leaf(z.clone());
        let fi = ctx.leaf(f.clone());
        let out = id_cross_attention(&mut ctx, "xa", zi, fi, 2);
        assert_eq!(ctx.g.value(out), &z);

        // zero identity tokens: values vanish, so Z' == Z even with live
        // projections (biases start at zero)
        let mut ctx = Ctx::new(&store);
        let zi = ctx.leaf(z.clone());
        let f0 = ctx.leaf(Tensor::zeros(3, 8));
        let out = id_cross_attention(&mut ctx, "xb", zi, f0, 2);
        let delta = ctx.g.value(out).zip(&z, |a, b| a - b).frob_norm();
        assert!(delta < 1e-12, "zero tokens moved z by {delta}");

        // live projections and live tokens do move z
        let mut ctx = Ctx::new(&store);
        let zi = ctx.leaf(z.clone());
        let fi = ctx.leaf(f.clone());
        let out = id_cross_attention(&mut ctx, "xb", zi, fi, 2);
        let delta = ctx.g.value(out).zip(&z, |a, b| a - b).frob_norm();
        assert!(delta > 1e-6);
    }

    #[test]
    fn residual_attention_matches_hand_arithmetic() {
        let d = 2;
        let mut store = ParamStore::new();
        let mut r = rng::stream(64, "hand", &[]);
        for p in ["q", "k", "v", "o"] {
            let mut w = Tensor::zeros(d, d);
            let mut bias = Tensor::zeros(1, d);
            for v in w.data_mut() {
                *v = rng::normal(&mut r);
            }
            for v in bias.data_mut() {
                *v = rng::normal(&mut r);
            }
            store.insert(&format!("xa.{p}.w"), w);
            store.insert(&format!("xa.{p}.b"), bias);
        }
        let mut z = Tensor::zeros(3, d);
        let mut f = Tensor::zeros(2, d);
        for v in z.data_mut() {
            *v = rng::normal(&mut r);
        }
        for v in f.data_mut() {
            *v = rng::normal(&mut r);
        }

        let mut ctx = Ctx::new(&store);
        let zi = ctx.leaf(z.clone());
        let fi = ctx.leaf(f.clone());
        let got = id_cross_attention(&mut ctx, "xa", zi, fi, 1);
        let got = ctx.g.value(got);

        // independent scalar computation
        let lin = |name: &str, x: &Tensor| -> Tensor {
            let w = store.get(&format!("{name}.w"));
            let bias = store.get(&format!("{name}.b"));
            let mut y = Tensor::zeros(x.rows(), d);
            for i in 0..x.rows() {
                for j in 0..d {
                    let mut acc = bias.get(0, j);
                    for k in 0..d {
                        acc += x.get(i, k) * w.get(k, j);
                    }
                    y.set(i, j, acc);
                }
            }
            y
        };
        let q = lin("xa.q", &z);
        let k = lin("xa.k", &f);
        let v = lin("xa.v", &f);
        let scale = 1.0 / (d as f64).sqrt();
        let mut mixed = Tensor::zeros(3, d);
        for i in 0..3 {
            let s0 = (q.get(i, 0) * k.get(0, 0) + q.get(i, 1) * k.get(0, 1)) * scale;
            let s1 = (q.get(i, 0) * k.get(1, 0) + q.get(i, 1) * k.get(1, 1)) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let p0 = e0 / (e0 + e1);
            let p1 = e1 / (e0 + e1);
            for j in 0..d {
                mixed.set(i, j, p0 * v.get(0, j) + p1 * v.get(1, j));
            }
        }
        let want = lin("xa.o", &mixed).zip(&z, |a, b| a + b);
        let delta = got.zip(&want, |a, b| (a - b).abs()).frob_norm();
        assert!(delta < 1e-12, "hand arithmetic disagrees by {delta}");
    }

    fn toy_dit() -> DiTConfig {
        DiTConfig {
            depth: 2,
            dim: 16,
            heads: 2,
            text_vocab: 23,
            max_text_tokens: 8,
            patch: 4,
            frames: 1,
            height: 8,
            width: 8,
            cond_channels: 4,
            timestep_dim: 16,
        }
    }

    fn randomize(store: &mut ParamStore, name: &str, seed: u64) {
        let mut r = rng::stream(seed, "rand-param", &[rng::fnv1a(name.as_bytes())]);
        let t = store.get_mut(name);
        for v in t.data_mut() {
            *v = 0.05 * rng::normal(&mut r);
        }
    }

    fn forward_with(
        store: &ParamStore,
        cfg: &DiTConfig,
        plan: &InjectionPlan,
        latent: &Tensor,
        id_tokens: Option<&Tensor>,
    ) -> Tensor {
        let mut ctx = Ctx::new(store);
        let lat = ctx.leaf(latent.clone());
        let text = text_encode(&mut ctx, cfg, &[3, 7]).unwrap();
        let f = id_tokens.map(|t| ctx.leaf(t.clone()));
        let out = dit_forward(&mut ctx, cfg, plan, lat, text, 11, f).unwrap();
        ctx.g.value(out).clone()
    }

    #[test]
    fn every_token_site_is_inert_at_zero_init() {
        let cfg = toy_dit();
        let base = InjectionPlan::named('b').unwrap();
        let mut r = rng::stream(70, "site-inputs", &[]);
        let mut latent = Tensor::zeros(cfg.n_vision_tokens(), cfg.in_channels());
        let mut id_tokens = Tensor::zeros(6, cfg.dim);
        for v in latent.data_mut() {
            *v = rng::normal(&mut r);
        }
        for v in id_tokens.data_mut() {
            *v = rng::normal(&mut r);
        }

        let mut none_store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut none_store, 71);
        register_dit(&mut b, &cfg, &base);
        randomize(&mut none_store, "dit.out.w", 72);
        let reference = forward_with(&none_store, &cfg, &base, &latent, None);
        assert_eq!(reference.shape(), (cfg.n_vision_tokens(), 48));

        for site in [HfSite::Inner, HfSite::Output, HfSite::Input, HfSite::Pre] {
            let plan = InjectionPlan {
                low_freq: true,
                keypoints: true,
                hf_site: site,
            };
            let mut store = ParamStore::new();
            let mut b = ParamBuilder::new(&mut store, 71);
            register_dit(&mut b, &cfg, &plan);
            randomize(&mut store, "dit.out.w", 72);
            let out = forward_with(&store, &cfg, &plan, &latent, Some(&id_tokens));
            let delta = out.zip(&reference, |a, b| (a - b).abs()).frob_norm();
            assert!(delta < 1e-9, "site {site:?} moved a fresh model by {delta}");
        }
    }

    #[test]
    fn token_sites_wire_into_different_places() {
        let cfg = toy_dit();
        let mut r = rng::stream(80, "site-inputs", &[]);
        let mut latent = Tensor::zeros(cfg.n_vision_tokens(), cfg.in_channels());
        let mut id_tokens = Tensor::zeros(6, cfg.dim);
        for v in latent.data_mut() {
            *v = rng::normal(&mut r);
        }
        for v in id_tokens.data_mut() {
            *v = rng::normal(&mut r);
        }

        let sites = [HfSite::Inner, HfSite::Output, HfSite::Input, HfSite::Pre];
        let mut outs = Vec::new();
        for site in sites {
            let plan = InjectionPlan {
                low_freq: true,
                keypoints: true,
                hf_site: site,
            };
            let mut store = ParamStore::new();
            let mut b = ParamBuilder::new(&mut store, 71);
            register_dit(&mut b, &cfg, &plan);
            randomize(&mut store, "dit.out.w", 72);
            // wake the injection path: same values for shared names, so any
            // output difference comes from where the sub-layer sits
            let names: Vec<String> = store
                .names()
                .filter(|n| n.ends_with(".id.o.w"))
                .map(|n| n.to_string())
                .collect();
            for n in names {
                randomize(&mut store, &n, 73);
            }
            outs.push(forward_with(&store, &cfg, &plan, &latent, Some(&id_tokens)));
        }
        for i in 0..sites.len() {
            for j in i + 1..sites.len() {
                let delta = outs[i].zip(&outs[j], |a, b| (a - b).abs()).frob_norm();
                assert!(
                    delta > 1e-6,
                    "{:?} and {:?} produced identical outputs",
                    sites[i],
                    sites[j]
                );
            }
        }
    }

    #[test]
    fn every_named_plan_drives_the_backbone() {
        let mut r = rng::stream(90, "plans", &[]);
        for letter in ['a', 'b', 'c', 'd', 'e', 'f', 'g'] {
            let plan = InjectionPlan::named(letter).unwrap();
            let cfg = DiTConfig {
                cond_channels: if plan.low_freq { 4 } else { 0 },
                ..toy_dit()
            };
            let mut store = ParamStore::new();
            let mut b = ParamBuilder::new(&mut store, 91);
            register_dit(&mut b, &cfg, &plan);
            let mut latent = Tensor::zeros(cfg.n_vision_tokens(), cfg.in_channels());
            for v in latent.data_mut() {
                *v = rng::normal(&mut r);
            }
            let id_tokens = if plan.uses_id_tokens() {
                let mut t = Tensor::zeros(6, cfg.dim);
                for v in t.data_mut() {
                    *v = rng::normal(&mut r);
                }
                Some(t)
            } else {
                None
            };
            let out = forward_with(&store, &cfg, &plan, &latent, id_tokens.as_ref());
            assert_eq!(out.shape(), (cfg.n_vision_tokens(), 48));
            assert!(out.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn id_tokens_are_refused_without_a_site() {
        let cfg = toy_dit();
        let plan = InjectionPlan::named('b').unwrap();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 95);
        register_dit(&mut b, &cfg, &plan);
        let mut ctx = Ctx::new(&store);
        let lat = ctx.leaf(Tensor::zeros(cfg.n_vision_tokens(), cfg.in_channels()));
        let text = text_encode(&mut ctx, &cfg, &[]).unwrap();
        let f = ctx.leaf(Tensor::zeros(4, cfg.dim));
        let err = dit_forward(&mut ctx, &cfg, &plan, lat, text, 0, Some(f));
        assert!(err.is_err());
    }
}
