//! Identity encoders.
//!
//! Two pathways produce the identity conditioning. The coarse pathway
//! (`gfe_encode`) downsamples the aligned reference face plus its keypoint
//! image into a latent-resolution map, so by construction it cannot carry
//! sub-patch detail. The fine pathway (`lfe_encode`) runs a face tower
//! (pretrained as an identity classifier) and a semantic tower (the image
//! side of the caption-contrastive model), fuses shallow multi-scale face
//! features with the semantic grid, and distills everything into a fixed set
//! of identity tokens through learnable-query cross-attention.

use rand::Rng;

use crate::error::{IdvidError, Result};
use crate::graph::VarId;
use crate::nn::{attention, conv2d, layer_norm, linear, Ctx, ParamBuilder};
use crate::tensor::Tensor;

/// Face tower channel plan (stages halve the side each time).
pub const FACE_S1_CH: usize = 8;
pub const FACE_S2_CH: usize = 16;
pub const FACE_S3_CH: usize = 32;
pub const FACE_PENULT_CH: usize = 32;
/// Semantic tower: fixed 32x32 working resolution down to a grid of tokens.
pub const SEM_INPUT_SIDE: usize = 32;
pub const SEM_CH: usize = 32;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Channels of the coarse facial map.
    pub c_g: usize,
    /// Number of learnable identity queries.
    pub nq: usize,
    pub qformer_layers: usize,
    pub qformer_heads: usize,
    /// Probability of dropping each semantic-origin token before fusion.
    pub drop_token: f64,
    /// Dropout inside the query-former FFN (training only).
    pub ffn_dropout: f64,
    /// Semantic token grid side g.
    pub grid: usize,
    /// Shared model dim with the backbone.
    pub dim: usize,
    /// Aligned reference face side.
    pub s: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            c_g: 8,
            nq: 16,
            qformer_layers: 2,
            qformer_heads: 4,
            drop_token: 0.1,
            ffn_dropout: 0.1,
            grid: 4,
            dim: 128,
            s: crate::synthdata::REF_FACE_SIZE,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s % 16 != 0 || self.s < 16 {
            return Err(IdvidError::Config(format!(
                "reference face side {} must be a multiple of 16",
                self.s
            )));
        }
        if !(0.0..=1.0).contains(&self.drop_token) || !(0.0..=1.0).contains(&self.ffn_dropout) {
            return Err(IdvidError::Config("dropout rates must be in [0,1]".into()));
        }
        if self.nq == 0 || self.qformer_layers == 0 || self.grid == 0 {
            return Err(IdvidError::Config(
                "nq, qformer_layers, grid must be positive".into(),
            ));
        }
        if self.dim % self.qformer_heads != 0 {
            return Err(IdvidError::Config(format!(
                "dim {} not divisible by qformer heads {}",
                self.dim, self.qformer_heads
            )));
        }
        if self.grid != self.s / 16 {
            return Err(IdvidError::Config(format!(
                "semantic grid {} must equal s/16 = {}",
                self.grid,
                self.s / 16
            )));
        }
        Ok(())
    }

    pub fn penult_side(&self) -> usize {
        self.s / 16
    }
}

/// Number of stride-2 stages needed to take `from` down to `to`.
fn halvings(from: usize, to: usize) -> Result<usize> {
    if to == 0 || from % to != 0 || !(from / to).is_power_of_two() {
        return Err(IdvidError::Config(format!(
            "cannot downsample {from} to {to} by stride-2 stages"
        )));
    }
    Ok((from / to).trailing_zeros() as usize)
}

pub fn register_gfe(b: &mut ParamBuilder, cfg: &ExtractorConfig, latent_side: usize) {
    let n = halvings(cfg.s, latent_side).expect("validated wiring");
    let mut cin = 6;
    for i in 0..n {
        let cout = (16 << i).min(32);
        b.conv(&format!("gfe.conv{i}"), cin, cout, 3);
        cin = cout;
    }
    b.conv("gfe.head", cin, cfg.c_g, 3);
}

/// Coarse facial map: channel-concatenated (face, keypoint image) through a
/// strided conv stack down to the latent grid. Output [c_g, side*side].
pub fn gfe_encode(
    ctx: &mut Ctx,
    cfg: &ExtractorConfig,
    ref_face: &Tensor,
    kps_image: &Tensor,
    latent_side: usize,
) -> Result<VarId> {
    let s = cfg.s;
    if ref_face.shape() != (3, s * s) || kps_image.shape() != (3, s * s) {
        return Err(IdvidError::InvalidArgument(format!(
            "extractor inputs must be (3, {}) each; got {:?} and {:?}",
            s * s,
            ref_face.shape(),
            kps_image.shape()
        )));
    }
    let n = halvings(s, latent_side)?;
    let rf = ctx.leaf(ref_face.clone());
    let kp = ctx.leaf(kps_image.clone());
    let mut x = ctx.g.concat_rows(&[rf, kp]);
    let mut side = s;
    for i in 0..n {
        let (y, oh, _) = conv2d(ctx, &format!("gfe.conv{i}"), x, side, side, 3, 2, 1);
        x = ctx.g.gelu(y);
        side = oh;
    }
    let (y, _, _) = conv2d(ctx, "gfe.head", x, side, side, 3, 1, 1);
    Ok(y)
}

pub fn register_face_tower(b: &mut ParamBuilder, n_identities: usize) {
    b.conv("face.s1", 3, FACE_S1_CH, 3);
    b.conv("face.s2", FACE_S1_CH, FACE_S2_CH, 3);
    b.conv("face.s3", FACE_S2_CH, FACE_S3_CH, 3);
    b.conv("face.s4", FACE_S3_CH, FACE_PENULT_CH, 3);
    b.linear("face.cls", FACE_PENULT_CH, n_identities);
}

pub struct FaceTowerOut {
    /// [FACE_PENULT_CH, (s/16)^2]
    pub penultimate: VarId,
    /// [FACE_S1_CH, (s/2)^2] and [FACE_S2_CH, (s/4)^2]
    pub shallow: [(VarId, usize); 2],
    pub penult_side: usize,
}

/// Face tower forward: four stride-2 stages; the map before the
/// classification head is the penultimate feature, and the first two stage
/// outputs are the shallow multi-scale features.
pub fn face_tower(ctx: &mut Ctx, cfg: &ExtractorConfig, ref_face: &Tensor) -> Result<FaceTowerOut> {
    let s = cfg.s;
    if ref_face.shape() != (3, s * s) {
        return Err(IdvidError::InvalidArgument(format!(
            "face tower input must be (3, {}), got {:?}",
            s * s,
            ref_face.shape()
        )));
    }
    let x = ctx.leaf(ref_face.clone());
    let (y1, s1, _) = conv2d(ctx, "face.s1", x, s, s, 3, 2, 1);
    let y1 = ctx.g.gelu(y1);
    let (y2, s2, _) = conv2d(ctx, "face.s2", y1, s1, s1, 3, 2, 1);
    let y2 = ctx.g.gelu(y2);
    let (y3, s3, _) = conv2d(ctx, "face.s3", y2, s2, s2, 3, 2, 1);
    let y3 = ctx.g.gelu(y3);
    let (y4, s4, _) = conv2d(ctx, "face.s4", y3, s3, s3, 3, 2, 1);
    let y4 = ctx.g.gelu(y4);
    Ok(FaceTowerOut {
        penultimate: y4,
        shallow: [(y1, s1), (y2, s2)],
        penult_side: s4,
    })
}

/// Identity logits from the face tower (pretraining head).
pub fn face_tower_logits(ctx: &mut Ctx, out: &FaceTowerOut) -> VarId {
    let pooled = ctx.g.mean_axis1(out.penultimate); // [C, 1]
    let row = ctx.g.transpose(pooled); // [1, C]
    linear(ctx, "face.cls", row)
}

/// L2-normalized face embedding (pooled penultimate features).
pub fn face_embedding(ctx: &mut Ctx, out: &FaceTowerOut) -> VarId {
    let pooled = ctx.g.mean_axis1(out.penultimate);
    let row = ctx.g.transpose(pooled);
    ctx.g.l2norm_rows(row, 1e-12)
}

pub fn register_semantic_tower(b: &mut ParamBuilder, embed_dim: usize) {
    b.conv("sem.c1", 3, 16, 3);
    b.conv("sem.c2", 16, SEM_CH, 3);
    b.conv("sem.c3", SEM_CH, SEM_CH, 3);
    b.linear("sem.proj", SEM_CH, embed_dim);
}

/// Semantic tower forward: any square input is resized to a fixed working
/// resolution, then three stride-2 stages produce the g-by-g token grid.
/// Returns ([SEM_CH, g*g], g).
pub fn semantic_tower(ctx: &mut Ctx, image: &Tensor, side: usize) -> Result<(VarId, usize)> {
    if image.rows() != 3 || image.cols() != side * side {
        return Err(IdvidError::InvalidArgument(format!(
            "semantic tower input must be (3, side^2), got {:?} for side {side}",
            image.shape()
        )));
    }
    let x = ctx.leaf(image.clone());
    let x = if side == SEM_INPUT_SIDE {
        x
    } else {
        ctx.g
            .bilinear_resize(x, side, side, SEM_INPUT_SIDE, SEM_INPUT_SIDE)
    };
    let (y1, s1, _) = conv2d(ctx, "sem.c1", x, SEM_INPUT_SIDE, SEM_INPUT_SIDE, 3, 2, 1);
    let y1 = ctx.g.gelu(y1);
    let (y2, s2, _) = conv2d(ctx, "sem.c2", y1, s1, s1, 3, 2, 1);
    let y2 = ctx.g.gelu(y2);
    let (y3, s3, _) = conv2d(ctx, "sem.c3", y2, s2, s2, 3, 2, 1);
    let y3 = ctx.g.gelu(y3);
    Ok((y3, s3))
}

/// Pooled, L2-normalized semantic embedding (contrastive image side).
pub fn semantic_embedding(ctx: &mut Ctx, image: &Tensor, side: usize) -> Result<VarId> {
    let (grid, _) = semantic_tower(ctx, image, side)?;
    let pooled = ctx.g.mean_axis1(grid);
    let row = ctx.g.transpose(pooled);
    let proj = linear(ctx, "sem.proj", row);
    Ok(ctx.g.l2norm_rows(proj, 1e-12))
}

pub fn register_lfe(b: &mut ParamBuilder, cfg: &ExtractorConfig) {
    let shallow_ch = FACE_S1_CH + FACE_S2_CH;
    b.linear("lfe.sem_proj", shallow_ch + SEM_CH, cfg.dim);
    b.linear("lfe.face_proj", FACE_PENULT_CH, cfg.dim);
    b.table("lfe.queries", cfg.nq, cfg.dim, 0.02);
    for i in 0..cfg.qformer_layers {
        b.layer_norm(&format!("lfe.qf{i}.ln1"), cfg.dim);
        b.attention(&format!("lfe.qf{i}.attn"), cfg.dim, false);
        b.layer_norm(&format!("lfe.qf{i}.ln2"), cfg.dim);
        b.ffn(&format!("lfe.qf{i}.ffn"), cfg.dim, 4);
    }
}

/// Which semantic-origin tokens survive the token drop. Always keeps at
/// least one (uniformly chosen when everything was dropped).
pub fn drop_token_keep(n: usize, drop_prob: f64, rng: &mut (impl Rng + ?Sized)) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..n)
        .filter(|_| rng.gen::<f64>() >= drop_prob)
        .collect();
    if keep.is_empty() && n > 0 {
        keep.push(rng.gen_range(0..n));
    }
    keep
}

/// Fuse tower features into the key/value token sequence.
///
/// Shallow face maps are resized to the semantic grid and channel-
/// concatenated with the semantic tokens, then projected to the model dim;
/// these semantic-origin tokens are subject to token drop. Penultimate face
/// features are projected separately and never dropped.
pub fn fuse_tokens(
    ctx: &mut Ctx,
    cfg: &ExtractorConfig,
    tower: &FaceTowerOut,
    semantic_grid: VarId,
    g: usize,
    drop_prob: f64,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<VarId> {
    let (s1, side1) = tower.shallow[0];
    let (s2, side2) = tower.shallow[1];
    let r1 = ctx.g.bilinear_resize(s1, side1, side1, g, g);
    let r2 = ctx.g.bilinear_resize(s2, side2, side2, g, g);
    let stacked = ctx.g.concat_rows(&[r1, r2, semantic_grid]); // [8+16+32, g*g]
    let tokens = ctx.g.transpose(stacked); // [g*g, 56]
    let sem_tokens = linear(ctx, "lfe.sem_proj", tokens); // [g*g, d]

    let pen = ctx.g.transpose(tower.penultimate); // [(s/16)^2, C]
    let face_tokens = linear(ctx, "lfe.face_proj", pen); // [(s/16)^2, d]

    let sem_kept = match rng {
        Some(r) if drop_prob > 0.0 => {
            let keep = drop_token_keep(g * g, drop_prob, r);
            ctx.g.gather_rows(sem_tokens, &keep)
        }
        _ => sem_tokens,
    };
    let _ = cfg;
    Ok(ctx.g.concat_rows(&[face_tokens, sem_kept]))
}

/// Learnable-query cross-attention stack distilling kv tokens into a fixed
/// set of identity tokens. No positional encoding on kv, so the output is
/// permutation-invariant in the kv order.
pub fn qformer(
    ctx: &mut Ctx,
    cfg: &ExtractorConfig,
    kv: VarId,
    ffn_drop_rng: Option<&mut dyn rand::RngCore>,
) -> Result<VarId> {
    if ctx.g.value(kv).rows() == 0 {
        return Err(IdvidError::InvalidArgument(
            "query-former needs at least one kv token".into(),
        ));
    }
    if ctx.g.value(kv).cols() != cfg.dim {
        return Err(IdvidError::InvalidArgument(format!(
            "kv token dim {} != model dim {}",
            ctx.g.value(kv).cols(),
            cfg.dim
        )));
    }
    let mut drop_rng = ffn_drop_rng;
    let mut q = ctx.p("lfe.queries");
    for i in 0..cfg.qformer_layers {
        let qn = layer_norm(ctx, &format!("lfe.qf{i}.ln1"), q);
        let a = attention(ctx, &format!("lfe.qf{i}.attn"), qn, kv, cfg.qformer_heads);
        q = ctx.g.add(q, a);
        let qn = layer_norm(ctx, &format!("lfe.qf{i}.ln2"), q);
        let h = linear(ctx, &format!("lfe.qf{i}.ffn.w1"), qn);
        let h = ctx.g.gelu(h);
        let h = match drop_rng.as_deref_mut() {
            Some(r) if cfg.ffn_dropout > 0.0 => {
                let (rows, cols) = ctx.g.value(h).shape();
                let keep = 1.0 - cfg.ffn_dropout;
                let mut mask = Tensor::zeros(rows, cols);
                for v in mask.data_mut() {
                    *v = if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
                }
                ctx.g.mul_mask(h, mask)
            }
            _ => h,
        };
        let h = linear(ctx, &format!("lfe.qf{i}.ffn.w2"), h);
        q = ctx.g.add(q, h);
    }
    Ok(q)
}

/// Full fine-pathway encode: towers, fusion, token drop, query-former.
/// `train_rng` enables the stochastic parts (token drop, FFN dropout).
pub fn lfe_encode(
    ctx: &mut Ctx,
    cfg: &ExtractorConfig,
    ref_face: &Tensor,
    mut train_rng: Option<&mut dyn rand::RngCore>,
) -> Result<VarId> {
    let tower = face_tower(ctx, cfg, ref_face)?;
    let (sem, g) = semantic_tower(ctx, ref_face, cfg.s)?;
    if g != cfg.grid {
        return Err(IdvidError::InternalConsistency(format!(
            "semantic grid {g} != configured {}",
            cfg.grid
        )));
    }
    let drop = if train_rng.is_some() { cfg.drop_token } else { 0.0 };
    let kv = fuse_tokens(
        ctx,
        cfg,
        &tower,
        sem,
        g,
        drop,
        train_rng.as_deref_mut().map(|r| r as &mut dyn rand::RngCore),
    )?;
    qformer(ctx, cfg, kv, train_rng)
}

/// Parameter-name prefixes of the fine pathway's trainable part (towers stay
/// frozen after their own pretraining).
pub const LFE_TRAINABLE_PREFIXES: [&str; 1] = ["lfe."];
/// Tower prefixes (frozen during denoiser training).
pub const TOWER_PREFIXES: [&str; 2] = ["face.", "sem."];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::nn::ParamStore;
    use crate::rng;
    use rand::seq::SliceRandom;

    fn small_cfg() -> ExtractorConfig {
        ExtractorConfig {
            c_g: 4,
            nq: 2,
            qformer_layers: 1,
            qformer_heads: 2,
            drop_token: 0.0,
            ffn_dropout: 0.0,
            grid: 4,
            dim: 8,
            s: 64,
        }
    }

    fn random_image(s: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "test-image", &[]);
        let mut t = Tensor::zeros(3, s * s);
        for v in t.data_mut() {
            *v = rng::uniform(&mut r, 0.0, 1.0);
        }
        t
    }

    #[test]
    fn coarse_map_lands_on_latent_dims_and_sees_the_keypoint_channel() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 3);
        register_gfe(&mut b, &cfg, 8);

        let face = random_image(64, 1);
        let kps = random_image(64, 2);
        let run = |kps: &Tensor| -> Tensor {
            let mut ctx = Ctx::new(&store);
            let id = gfe_encode(&mut ctx, &cfg, &face, kps, 8).unwrap();
            ctx.g.value(id).clone()
        };
        let out = run(&kps);
        assert_eq!(out.shape(), (cfg.c_g, 8 * 8));
        assert_eq!(out, run(&kps));

        // perturbing only the keypoint image moves the output
        let mut kps2 = kps.clone();
        kps2.set(0, 200, kps.get(0, 200) + 0.5);
        let moved = run(&kps2);
        let delta = out.zip(&moved, |a, b| a - b).frob_norm();
        assert!(delta > 0.0, "keypoint channel is dead");

        let mut ctx = Ctx::new(&store);
        let bad = Tensor::zeros(3, 32 * 32);
        assert!(gfe_encode(&mut ctx, &cfg, &face, &bad, 8).is_err());
    }

    #[test]
    fn face_tower_shallow_maps_are_larger_than_the_penultimate() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 5);
        register_face_tower(&mut b, 4);

        let face = random_image(64, 3);
        let mut ctx = Ctx::new(&store);
        let out = face_tower(&mut ctx, &cfg, &face).unwrap();
        let (s1, side1) = out.shallow[0];
        let (s2, side2) = out.shallow[1];
        assert_eq!(side1, 32);
        assert_eq!(side2, 16);
        assert_eq!(out.penult_side, 4);
        assert!(side1 > out.penult_side && side2 > out.penult_side);
        assert_eq!(ctx.g.value(s1).shape(), (FACE_S1_CH, 32 * 32));
        assert_eq!(ctx.g.value(s2).shape(), (FACE_S2_CH, 16 * 16));
        assert_eq!(
            ctx.g.value(out.penultimate).shape(),
            (FACE_PENULT_CH, 4 * 4)
        );

        // deterministic given weights
        let mut ctx2 = Ctx::new(&store);
        let out2 = face_tower(&mut ctx2, &cfg, &face).unwrap();
        assert_eq!(
            ctx.g.value(out.penultimate),
            ctx2.g.value(out2.penultimate)
        );
    }

    #[test]
    fn semantic_tower_grid_is_fixed_by_config() {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 6);
        register_semantic_tower(&mut b, 16);

        for side in [32usize, 64] {
            let img = random_image(side, side as u64);
            let mut ctx = Ctx::new(&store);
            let (grid, g) = semantic_tower(&mut ctx, &img, side).unwrap();
            assert_eq!(g, 4);
            assert_eq!(ctx.g.value(grid).shape(), (SEM_CH, 16));
            let mut ctx2 = Ctx::new(&store);
            let (grid2, _) = semantic_tower(&mut ctx2, &img, side).unwrap();
            assert_eq!(ctx.g.value(grid), ctx2.g.value(grid2));
        }
        let mut ctx = Ctx::new(&store);
        assert!(semantic_tower(&mut ctx, &random_image(32, 9), 16).is_err());
    }

    #[test]
    fn fused_token_count_follows_the_drop_rule() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 7);
        register_face_tower(&mut b, 4);
        register_semantic_tower(&mut b, 16);
        register_lfe(&mut b, &cfg);

        let face = random_image(64, 11);
        let count_at = |drop: f64| -> usize {
            let mut ctx = Ctx::new(&store);
            let tower = face_tower(&mut ctx, &cfg, &face).unwrap();
            let (sem, g) = semantic_tower(&mut ctx, &face, 64).unwrap();
            let mut r = rng::stream(50, "drop", &[]);
            let kv = fuse_tokens(&mut ctx, &cfg, &tower, sem, g, drop, Some(&mut r)).unwrap();
            ctx.g.value(kv).rows()
        };
        let penult_tokens = (64 / 16) * (64 / 16);
        assert_eq!(count_at(0.0), penult_tokens + 16);
        assert_eq!(count_at(1.0), penult_tokens + 1);
        let mid = count_at(0.5);
        assert!(mid > penult_tokens && mid < penult_tokens + 16);
    }

    #[test]
    fn drop_fraction_tracks_the_probability() {
        let mut r = rng::stream(4, "drop-mc", &[]);
        let kept = drop_token_keep(10_000, 0.3, &mut r).len();
        let frac_dropped = 1.0 - kept as f64 / 10_000.0;
        assert!((frac_dropped - 0.3).abs() < 0.03, "dropped {frac_dropped}");
        assert_eq!(drop_token_keep(100, 0.0, &mut r).len(), 100);
        assert_eq!(drop_token_keep(100, 1.0, &mut r).len(), 1);
    }

    #[test]
    fn uniform_attention_over_one_kv_token_copies_its_value() {
        // Zeroed queries and q/k projections make attention uniform; identity
        // value/output projections and a zeroed FFN then pass the single kv
        // token through untouched.
        let cfg = ExtractorConfig {
            nq: 2,
            qformer_layers: 1,
            qformer_heads: 1,
            dim: 2,
            ffn_dropout: 0.0,
            ..small_cfg()
        };
        let mut store = ParamStore::new();
        let eye = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        store.insert("lfe.queries", Tensor::zeros(2, 2));
        store.insert("lfe.qf0.ln1.g", Tensor::filled(1, 2, 1.0));
        store.insert("lfe.qf0.ln1.b", Tensor::zeros(1, 2));
        for p in ["q", "k"] {
            store.insert(&format!("lfe.qf0.attn.{p}.w"), Tensor::zeros(2, 2));
            store.insert(&format!("lfe.qf0.attn.{p}.b"), Tensor::zeros(1, 2));
        }
        for p in ["v", "o"] {
            store.insert(&format!("lfe.qf0.attn.{p}.w"), eye.clone());
            store.insert(&format!("lfe.qf0.attn.{p}.b"), Tensor::zeros(1, 2));
        }
        store.insert("lfe.qf0.ln2.g", Tensor::filled(1, 2, 1.0));
        store.insert("lfe.qf0.ln2.b", Tensor::zeros(1, 2));
        store.insert("lfe.qf0.ffn.w1.w", Tensor::zeros(2, 8));
        store.insert("lfe.qf0.ffn.w1.b", Tensor::zeros(1, 8));
        store.insert("lfe.qf0.ffn.w2.w", Tensor::zeros(8, 2));
        store.insert("lfe.qf0.ffn.w2.b", Tensor::zeros(1, 2));

        let mut ctx = Ctx::new(&store);
        let kv = ctx.leaf(Tensor::from_vec(1, 2, vec![0.3, -1.2]));
        let out = qformer(&mut ctx, &cfg, kv, None).unwrap();
        let out = ctx.g.value(out);
        assert_eq!(out.shape(), (2, 2));
        for row in 0..2 {
            assert!((out.get(row, 0) - 0.3).abs() < 1e-12);
            assert!((out.get(row, 1) + 1.2).abs() < 1e-12);
        }

        // empty kv and wrong dim are refused
        let mut ctx = Ctx::new(&store);
        let empty = ctx.leaf(Tensor::zeros(0, 2));
        assert!(qformer(&mut ctx, &cfg, empty, None).is_err());
        let mut ctx = Ctx::new(&store);
        let wide = ctx.leaf(Tensor::zeros(3, 5));
        assert!(qformer(&mut ctx, &cfg, wide, None).is_err());
    }

    #[test]
    fn query_former_ignores_kv_order() {
        let cfg = ExtractorConfig {
            nq: 3,
            qformer_layers: 2,
            qformer_heads: 2,
            dim: 16,
            ..small_cfg()
        };
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 15);
        register_lfe(&mut b, &cfg);

        let mut kv = Tensor::zeros(7, 16);
        let mut r = rng::stream(31, "kv", &[]);
        for v in kv.data_mut() {
            *v = rng::normal(&mut r);
        }
        let run = |t: &Tensor| -> Tensor {
            let mut ctx = Ctx::new(&store);
            let kv = ctx.leaf(t.clone());
            let out = qformer(&mut ctx, &cfg, kv, None).unwrap();
            ctx.g.value(out).clone()
        };
        let base = run(&kv);
        assert_eq!(base.shape(), (3, 16));
        let mut order: Vec<usize> = (0..7).collect();
        for _ in 0..100 {
            order.shuffle(&mut r);
            let mut shuffled = Tensor::zeros(7, 16);
            for (dst, &src) in order.iter().enumerate() {
                for c in 0..16 {
                    shuffled.set(dst, c, kv.get(src, c));
                }
            }
            let out = run(&shuffled);
            let delta = base.zip(&out, |a, b| (a - b).abs()).frob_norm();
            assert!(delta < 1e-9, "permutation changed the output by {delta}");
        }

        // shape contract for any kv length
        for len in [1usize, 5, 33] {
            let mut t = Tensor::zeros(len, 16);
            for v in t.data_mut() {
                *v = rng::normal(&mut r);
            }
            assert_eq!(run(&t).shape(), (3, 16));
        }
    }

    #[test]
    fn fine_pathway_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 17);
        register_gfe(&mut b, &cfg, 8);
        register_face_tower(&mut b, 4);
        register_semantic_tower(&mut b, 8);
        register_lfe(&mut b, &cfg);

        let face = random_image(64, 21);
        let kps = random_image(64, 22);
        let run = |s: &ParamStore| -> (f64, Option<std::collections::BTreeMap<String, Tensor>>) {
            let mut ctx = Ctx::new(s);
            let g = gfe_encode(&mut ctx, &cfg, &face, &kps, 8).unwrap();
            let f = lfe_encode(&mut ctx, &cfg, &face, None).unwrap();
            let gs = ctx.g.square(g);
            let fs = ctx.g.square(f);
            let lg = ctx.g.mean_all(gs);
            let lf = ctx.g.mean_all(fs);
            let loss = ctx.g.add(lg, lf);
            let grads = ctx.g.backward(loss);
            (ctx.g.value(loss).item(), Some(ctx.param_grads(&grads)))
        };
        let (_, grads) = run(&store);
        let grads = grads.unwrap();
        for must in ["gfe.head.w", "lfe.queries", "face.s1.w", "sem.c1.w"] {
            assert!(grads.contains_key(must), "no gradient for {must}");
        }
        let mut loss_only = |s: &ParamStore| run(s).0;
        let rep = finite_diff_check(&store, &grads, &mut loss_only, 1, 321);
        assert!(
            rep.worst_rel < 1e-3,
            "worst {} rel {}",
            rep.worst_param,
            rep.worst_rel
        );
    }

    #[test]
    fn identity_tokens_react_to_marker_bits() {
        use crate::synthdata::{crop_align, generate_identity, render_video, SceneScript};
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, 19);
        register_face_tower(&mut b, 4);
        register_semantic_tower(&mut b, 8);
        register_lfe(&mut b, &cfg);

        let mut spec = generate_identity(33);
        let script = SceneScript {
            background_id: 0,
            face_center: vec![(24.0, 24.0)],
            face_scale: vec![0.6],
            expression: vec![0.0],
            caption_tokens: vec![],
        };
        let crop_of = |spec: &crate::synthdata::IdentitySpec| -> Tensor {
            let v = render_video(spec, &script, 1, 48, 48).unwrap();
            crop_align(&v.frames[0], 48, 48, &v.keypoints[0], 64).unwrap()
        };
        let a = crop_of(&spec);
        spec.marker_bits ^= 0xff;
        let b2 = crop_of(&spec);
        assert_ne!(a, b2, "marker bits did not change the rendered face");

        let encode = |img: &Tensor| -> Tensor {
            let mut ctx = Ctx::new(&store);
            let f = lfe_encode(&mut ctx, &cfg, img, None).unwrap();
            ctx.g.value(f).clone()
        };
        let fa = encode(&a);
        let fb = encode(&b2);
        let delta = fa.zip(&fb, |x, y| x - y).frob_norm();
        assert!(delta > 0.0, "identity tokens blind to marker bits");
    }
}
