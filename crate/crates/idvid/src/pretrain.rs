//! Pretraining for the frozen pieces: the face recognition tower, the
//! semantic image tower with a paired text encoder, and two independent
//! metric encoders used only for evaluation. Everything here trains before
//! the diffusion model does and is never updated afterwards.

use std::collections::BTreeMap;

use rand::seq::index::sample as index_sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IdvidError, Result};
use crate::extractors::{
    face_tower, face_tower_logits, register_face_tower, register_semantic_tower,
    semantic_embedding, ExtractorConfig,
};
use crate::graph::VarId;
use crate::nn::{clip_grads, conv2d, global_grad_norm, linear, AdamW, Ctx, ParamBuilder, ParamStore};
use crate::rng::stream;
use crate::synthdata::{crop_align, VideoSample, VOCAB_SIZE};
use crate::tensor::Tensor;

/// A small stack of stride-2 convolutions with a pooled embedding, used for
/// the evaluation-only metric encoders.
#[derive(Clone, Debug)]
pub struct ConvNetSpec {
    pub prefix: &'static str,
    pub channels: Vec<usize>,
    pub input_side: usize,
}

impl ConvNetSpec {
    pub fn embed_dim(&self) -> usize {
        *self.channels.last().expect("nonempty channel list")
    }
}

/// First metric encoder; also the feature source for distribution metrics.
pub fn met_a_spec() -> ConvNetSpec {
    ConvNetSpec {
        prefix: "metA",
        channels: vec![12, 24, 32],
        input_side: 64,
    }
}

/// Second metric encoder, deliberately a different depth and width.
pub fn met_b_spec() -> ConvNetSpec {
    ConvNetSpec {
        prefix: "metB",
        channels: vec![10, 20, 40, 40],
        input_side: 64,
    }
}

pub fn register_convnet(b: &mut ParamBuilder, spec: &ConvNetSpec, n_classes: usize) {
    let mut cin = 3;
    for (i, &ch) in spec.channels.iter().enumerate() {
        b.conv(&format!("{}.c{i}", spec.prefix), cin, ch, 3);
        cin = ch;
    }
    b.linear(&format!("{}.cls", spec.prefix), cin, n_classes);
}

fn convnet_pooled(ctx: &mut Ctx, spec: &ConvNetSpec, image: &Tensor) -> Result<VarId> {
    let side = spec.input_side;
    if image.shape() != (3, side * side) {
        return Err(IdvidError::InvalidArgument(format!(
            "metric encoder {} expects (3, {}), got {:?}",
            spec.prefix,
            side * side,
            image.shape()
        )));
    }
    let mut x = ctx.leaf(image.clone());
    let mut h = side;
    let mut w = side;
    for i in 0..spec.channels.len() {
        let (y, oh, ow) = conv2d(ctx, &format!("{}.c{i}", spec.prefix), x, h, w, 3, 2, 1);
        x = ctx.g.gelu(y);
        h = oh;
        w = ow;
    }
    let pooled = ctx.g.mean_axis1(x); // [ch, 1]
    Ok(ctx.g.transpose(pooled)) // [1, ch]
}

/// Unit-norm embedding of an image.
pub fn convnet_embed(ctx: &mut Ctx, spec: &ConvNetSpec, image: &Tensor) -> Result<VarId> {
    let pooled = convnet_pooled(ctx, spec, image)?;
    Ok(ctx.g.l2norm_rows(pooled, 1e-8))
}

pub fn convnet_logits(ctx: &mut Ctx, spec: &ConvNetSpec, image: &Tensor) -> Result<VarId> {
    let pooled = convnet_pooled(ctx, spec, image)?;
    Ok(linear(ctx, &format!("{}.cls", spec.prefix), pooled))
}

/// Value-level embedding without keeping a tape around.
pub fn embed_with(params: &ParamStore, spec: &ConvNetSpec, image: &Tensor) -> Result<Tensor> {
    let mut ctx = Ctx::new(params);
    let id = convnet_embed(&mut ctx, spec, image)?;
    Ok(ctx.g.value(id).clone())
}

const TEXT_WIDTH: usize = 32;

/// Caption-side encoder paired with the semantic tower for the image-text
/// agreement score.
pub fn register_text_encoder(b: &mut ParamBuilder, embed_dim: usize) {
    b.table("clipt.emb", VOCAB_SIZE, TEXT_WIDTH, 0.02);
    b.linear("clipt.proj", TEXT_WIDTH, embed_dim);
}

pub fn text_embed(ctx: &mut Ctx, caption: &[u16]) -> Result<VarId> {
    if caption.is_empty() {
        return Err(IdvidError::InvalidArgument(
            "text embedding needs at least one token".into(),
        ));
    }
    if let Some(&bad) = caption.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
        return Err(IdvidError::InvalidArgument(format!(
            "caption token {bad} outside vocabulary"
        )));
    }
    let table = ctx.p("clipt.emb");
    let idx: Vec<usize> = caption.iter().map(|&t| t as usize).collect();
    let rows = ctx.g.gather_rows(table, &idx);
    let pooled = ctx.g.mean_axis0(rows); // [1, width]
    let proj = linear(ctx, "clipt.proj", pooled);
    Ok(ctx.g.l2norm_rows(proj, 1e-8))
}

/// Value-level image embedding from the semantic tower.
pub fn semantic_embed_value(params: &ParamStore, image: &Tensor, side: usize) -> Result<Tensor> {
    let mut ctx = Ctx::new(params);
    let id = semantic_embedding(&mut ctx, image, side)?;
    Ok(ctx.g.value(id).clone())
}

/// Value-level caption embedding.
pub fn text_embed_value(params: &ParamStore, caption: &[u16]) -> Result<Tensor> {
    let mut ctx = Ctx::new(params);
    let id = text_embed(&mut ctx, caption)?;
    Ok(ctx.g.value(id).clone())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub face_steps: u64,
    pub contrastive_steps: u64,
    pub metric_steps: u64,
    pub probe_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Shared embedding width of the semantic tower and text encoder.
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            face_steps: 300,
            contrastive_steps: 300,
            metric_steps: 250,
            probe_steps: 400,
            batch_size: 8,
            learning_rate: 3e-3,
            weight_decay: 0.01,
            embed_dim: 32,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(IdvidError::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(IdvidError::Config("learning_rate must be positive".into()));
        }
        if self.embed_dim == 0 {
            return Err(IdvidError::Config("embed_dim must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PretrainReport {
    pub n_identities: usize,
    pub face_final_loss: f64,
    /// Held-out identity accuracy of the face tower head.
    pub face_accuracy: f64,
    /// Matched minus mismatched mean cosine between image and caption
    /// embeddings on held-out clips.
    pub contrastive_margin: f64,
    pub metric_a_accuracy: f64,
    pub metric_b_accuracy: f64,
    /// Held-out accuracy of a linear probe predicting the background class
    /// from the semantic embedding.
    pub background_probe_accuracy: f64,
}

/// An aligned face crop with its labels.
pub struct CropItem {
    pub crop: Tensor,
    pub identity: usize,
    pub dataset_index: usize,
    pub held_out: bool,
}

/// Aligned crops from the first and middle frame of every clip. The last
/// clip of each identity is marked held-out for accuracy measurements.
pub fn build_crop_pool(dataset: &[VideoSample], s: usize) -> Result<Vec<CropItem>> {
    if dataset.is_empty() {
        return Err(IdvidError::InvalidArgument("empty dataset".into()));
    }
    let mut last_of_identity: BTreeMap<u32, usize> = BTreeMap::new();
    for (i, sample) in dataset.iter().enumerate() {
        last_of_identity.insert(sample.identity.identity_id, i);
    }
    let mut pool = Vec::new();
    for (i, sample) in dataset.iter().enumerate() {
        let held_out = last_of_identity[&sample.identity.identity_id] == i;
        for &fi in &[0usize, sample.t / 2] {
            let crop = crop_align(&sample.frames[fi], sample.h, sample.w, &sample.keypoints[fi], s)?;
            pool.push(CropItem {
                crop,
                identity: sample.identity.identity_id as usize,
                dataset_index: i,
                held_out,
            });
        }
    }
    Ok(pool)
}

/// Consume the tape, returning the loss and clipped gradients so the caller
/// can update the store after the borrow ends.
fn grads_from(
    ctx: Ctx,
    loss_id: VarId,
    what: &str,
    step: u64,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let loss = ctx.g.value(loss_id).item();
    if !loss.is_finite() {
        return Err(IdvidError::NumericDivergence {
            step,
            msg: format!("non-finite {what} pretraining loss"),
        });
    }
    let grads = ctx.g.backward(loss_id);
    let mut by_name = ctx.param_grads(&grads);
    if !global_grad_norm(&by_name).is_finite() {
        return Err(IdvidError::NumericDivergence {
            step,
            msg: format!("non-finite {what} pretraining gradient"),
        });
    }
    clip_grads(&mut by_name, 5.0);
    Ok((loss, by_name))
}

fn argmax_row(t: &Tensor) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for c in 0..t.cols() {
        let v = t.get(0, c);
        if v > best_v {
            best_v = v;
            best = c;
        }
    }
    best
}

/// Generic classifier loop over a crop pool.
fn train_classifier(
    store: &mut ParamStore,
    pool: &[CropItem],
    steps: u64,
    batch: usize,
    lr: f64,
    weight_decay: f64,
    seed: u64,
    label: &str,
    logits_fn: &dyn Fn(&mut Ctx, &Tensor) -> Result<VarId>,
) -> Result<f64> {
    let train_items: Vec<&CropItem> = pool.iter().filter(|c| !c.held_out).collect();
    if train_items.is_empty() {
        return Err(IdvidError::InvalidArgument(
            "crop pool has no training items".into(),
        ));
    }
    let mut opt = AdamW::new(weight_decay);
    let mut last = f64::NAN;
    for step in 0..steps {
        let mut r = stream(seed, label, &[step]);
        let mut rows = Vec::with_capacity(batch);
        let mut targets = Vec::with_capacity(batch);
        let mut ctx = Ctx::new(store);
        for _ in 0..batch {
            let item = train_items[r.gen_range(0..train_items.len())];
            rows.push(logits_fn(&mut ctx, &item.crop)?);
            targets.push(item.identity);
        }
        let logits = ctx.g.concat_rows(&rows);
        let loss_id = ctx.g.cross_entropy_mean(logits, &targets);
        let (loss, by_name) = grads_from(ctx, loss_id, label, step)?;
        opt.step(store, &by_name, lr);
        last = loss;
    }
    Ok(last)
}

fn classifier_accuracy(
    store: &ParamStore,
    pool: &[CropItem],
    logits_fn: &dyn Fn(&mut Ctx, &Tensor) -> Result<VarId>,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for item in pool.iter().filter(|c| c.held_out) {
        let mut ctx = Ctx::new(store);
        let id = logits_fn(&mut ctx, &item.crop)?;
        if argmax_row(ctx.g.value(id)) == item.identity {
            hits += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(IdvidError::InvalidArgument("no held-out crops".into()));
    }
    Ok(hits as f64 / total as f64)
}

const CONTRASTIVE_TEMP: f64 = 0.07;

fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let dot = a.dot(b);
    let na = a.frob_norm().max(1e-12);
    let nb = b.frob_norm().max(1e-12);
    dot / (na * nb)
}

/// Pretrain all frozen components on a clip dataset and report the quality
/// gates. The returned store holds the face tower (with its identity head),
/// the semantic tower and text encoder, and both metric encoders.
pub fn pretrain_towers(
    extract: &ExtractorConfig,
    dataset: &[VideoSample],
    cfg: &PretrainConfig,
) -> Result<(ParamStore, PretrainReport)> {
    cfg.validate()?;
    extract.validate()?;
    if let Some(s) = dataset.iter().find(|s| s.h != s.w) {
        return Err(IdvidError::InvalidArgument(format!(
            "semantic tower needs square frames, got {}x{}",
            s.h, s.w
        )));
    }
    let pool = build_crop_pool(dataset, extract.s)?;
    let n_identities = pool.iter().map(|c| c.identity).max().unwrap_or(0) + 1;

    let mut store = ParamStore::new();
    {
        let mut b = ParamBuilder::new(&mut store, cfg.seed);
        register_face_tower(&mut b, n_identities);
        register_semantic_tower(&mut b, cfg.embed_dim);
        register_text_encoder(&mut b, cfg.embed_dim);
    }
    {
        let mut b = ParamBuilder::new(&mut store, cfg.seed.wrapping_add(101));
        register_convnet(&mut b, &met_a_spec(), n_identities);
    }
    {
        let mut b = ParamBuilder::new(&mut store, cfg.seed.wrapping_add(202));
        register_convnet(&mut b, &met_b_spec(), n_identities);
    }

    let mut report = PretrainReport {
        n_identities,
        ..PretrainReport::default()
    };

    // Face tower: identity classification on aligned crops.
    let ext = extract.clone();
    let face_logits = move |ctx: &mut Ctx, crop: &Tensor| -> Result<VarId> {
        let out = face_tower(ctx, &ext, crop)?;
        Ok(face_tower_logits(ctx, &out))
    };
    report.face_final_loss = train_classifier(
        &mut store,
        &pool,
        cfg.face_steps,
        cfg.batch_size,
        cfg.learning_rate,
        cfg.weight_decay,
        cfg.seed,
        "face-cls",
        &face_logits,
    )?;
    report.face_accuracy = classifier_accuracy(&store, &pool, &face_logits)?;

    // Metric encoders: same task, different nets and seeds.
    for (spec, steps, label, acc_slot) in [
        (met_a_spec(), cfg.metric_steps, "metric-a", 0usize),
        (met_b_spec(), cfg.metric_steps, "metric-b", 1usize),
    ] {
        let sp = spec.clone();
        let logits_fn =
            move |ctx: &mut Ctx, crop: &Tensor| -> Result<VarId> { convnet_logits(ctx, &sp, crop) };
        train_classifier(
            &mut store,
            &pool,
            steps,
            cfg.batch_size,
            cfg.learning_rate,
            cfg.weight_decay,
            cfg.seed.wrapping_add(7 + acc_slot as u64),
            label,
            &logits_fn,
        )?;
        let acc = classifier_accuracy(&store, &pool, &logits_fn)?;
        if acc_slot == 0 {
            report.metric_a_accuracy = acc;
        } else {
            report.metric_b_accuracy = acc;
        }
    }

    // Semantic tower + text encoder: symmetric contrastive loss pairing a
    // clip's first frame with its caption.
    let held_out: Vec<usize> = (0..dataset.len())
        .filter(|&i| pool.iter().any(|c| c.dataset_index == i && c.held_out))
        .collect();
    let train_clips: Vec<usize> = (0..dataset.len()).filter(|i| !held_out.contains(i)).collect();
    if train_clips.len() < cfg.batch_size {
        return Err(IdvidError::InvalidArgument(format!(
            "contrastive pretraining needs at least {} training clips, have {}",
            cfg.batch_size,
            train_clips.len()
        )));
    }
    {
        let mut opt = AdamW::new(cfg.weight_decay);
        for step in 0..cfg.contrastive_steps {
            let mut r = stream(cfg.seed, "contrastive", &[step]);
            let picks = index_sample(&mut r, train_clips.len(), cfg.batch_size);
            let mut ctx = Ctx::new(&store);
            let mut img_rows = Vec::with_capacity(cfg.batch_size);
            let mut txt_rows = Vec::with_capacity(cfg.batch_size);
            for k in picks.iter() {
                let sample = &dataset[train_clips[k]];
                img_rows.push(semantic_embedding(&mut ctx, &sample.frames[0], sample.h)?);
                txt_rows.push(text_embed(&mut ctx, &sample.caption)?);
            }
            let imgs = ctx.g.concat_rows(&img_rows);
            let txts = ctx.g.concat_rows(&txt_rows);
            let txts_t = ctx.g.transpose(txts);
            let sims = ctx.g.matmul(imgs, txts_t);
            let logits = ctx.g.scale(sims, 1.0 / CONTRASTIVE_TEMP);
            let diag: Vec<usize> = (0..cfg.batch_size).collect();
            let li = ctx.g.cross_entropy_mean(logits, &diag);
            let logits_t = ctx.g.transpose(logits);
            let lt = ctx.g.cross_entropy_mean(logits_t, &diag);
            let sum = ctx.g.add(li, lt);
            let loss_id = ctx.g.scale(sum, 0.5);
            let (_, by_name) = grads_from(ctx, loss_id, "contrastive", step)?;
            opt.step(&mut store, &by_name, cfg.learning_rate);
        }
    }

    // Contrastive gate: matched vs mismatched cosine on held-out clips.
    {
        let mut matched = Vec::new();
        let mut mismatched = Vec::new();
        let embeds: Vec<(Tensor, Tensor)> = held_out
            .iter()
            .map(|&i| {
                let s = &dataset[i];
                Ok((
                    semantic_embed_value(&store, &s.frames[0], s.h)?,
                    text_embed_value(&store, &s.caption)?,
                ))
            })
            .collect::<Result<_>>()?;
        for (i, (img, _)) in embeds.iter().enumerate() {
            for (j, (_, txt)) in embeds.iter().enumerate() {
                let c = cosine(img, txt);
                if i == j {
                    matched.push(c);
                } else {
                    mismatched.push(c);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        report.contrastive_margin = mean(&matched) - mean(&mismatched);
    }

    // Background linear probe on frozen semantic embeddings.
    report.background_probe_accuracy =
        background_probe(&store, dataset, &held_out, cfg)?;

    Ok((store, report))
}

/// Train a linear probe from frozen semantic embeddings to the background
/// class encoded by the caption's first token; returns held-out accuracy.
fn background_probe(
    store: &ParamStore,
    dataset: &[VideoSample],
    held_out: &[usize],
    cfg: &PretrainConfig,
) -> Result<f64> {
    let n_bg = crate::synthdata::NUM_BACKGROUNDS;
    let embed = |i: usize| -> Result<(Tensor, usize)> {
        let s = &dataset[i];
        let e = semantic_embed_value(store, &s.frames[0], s.h)?;
        let label = (s.caption[0] as usize)
            .checked_sub(1)
            .filter(|&l| l < n_bg)
            .ok_or_else(|| {
                IdvidError::InvalidArgument("caption does not start with a background token".into())
            })?;
        Ok((e, label))
    };
    let mut train_x = Vec::new();
    let mut train_y = Vec::new();
    let mut test_x = Vec::new();
    let mut test_y = Vec::new();
    for i in 0..dataset.len() {
        let (e, l) = embed(i)?;
        if held_out.contains(&i) {
            test_x.push(e);
            test_y.push(l);
        } else {
            train_x.push(e);
            train_y.push(l);
        }
    }
    let dim = train_x[0].cols();
    let stack = |rows: &[Tensor]| {
        let mut m = Tensor::zeros(rows.len(), dim);
        for (r, t) in rows.iter().enumerate() {
            for c in 0..dim {
                m.set(r, c, t.get(0, c));
            }
        }
        m
    };
    let train_m = stack(&train_x);
    let test_m = stack(&test_x);

    let mut probe = ParamStore::new();
    {
        let mut b = ParamBuilder::new(&mut probe, cfg.seed.wrapping_add(909));
        b.linear("probe", dim, n_bg);
    }
    let mut opt = AdamW::new(0.0);
    for step in 0..cfg.probe_steps {
        let mut ctx = Ctx::new(&probe);
        let x = ctx.leaf(train_m.clone());
        let logits = linear(&mut ctx, "probe", x);
        let loss_id = ctx.g.cross_entropy_mean(logits, &train_y);
        let (_, by_name) = grads_from(ctx, loss_id, "background probe", step)?;
        opt.step(&mut probe, &by_name, 0.05);
    }
    let mut hits = 0usize;
    for (r, &want) in test_y.iter().enumerate() {
        let mut ctx = Ctx::new(&probe);
        let x = ctx.leaf(test_m.clone());
        let logits = linear(&mut ctx, "probe", x);
        let row = ctx.g.value(logits);
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..n_bg {
            if row.get(r, c) > best_v {
                best_v = row.get(r, c);
                best = c;
            }
        }
        if best == want {
            hits += 1;
        }
    }
    Ok(hits as f64 / test_y.len().max(1) as f64)
}
