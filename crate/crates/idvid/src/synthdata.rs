//! Procedural identity-labeled face videos.
//!
//! Identities are parameterized sprites: an ellipse whose hue, proportions,
//! and skin tone carry coarse identity, and an 8-bit marker pattern rendered
//! as fine checkerboard patches that carries high-frequency identity. Scenes
//! add a structured background, a motion path, a size class, and an
//! expression, all named by the caption tokens. Everything is a pure
//! function of seeds, so samples are bit-reproducible.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{IdvidError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Canonical aligned-face side length.
pub const REF_FACE_SIZE: usize = 64;
/// Canonical eye centers inside the aligned face, as fractions of S.
pub const CANON_LEFT_EYE: (f64, f64) = (0.35, 0.4);
pub const CANON_RIGHT_EYE: (f64, f64) = (0.65, 0.4);

/// Caption vocabulary. Token 0 is reserved for the classifier-free-guidance
/// null embedding and never appears in captions.
pub const VOCAB_NULL: u16 = 0;
pub const NUM_BACKGROUNDS: usize = 8;
pub const NUM_ACTIONS: usize = 8;
pub const NUM_SIZES: usize = 3;
pub const NUM_EXPRESSIONS: usize = 3;
pub const VOCAB_SIZE: usize = 1 + NUM_BACKGROUNDS + NUM_ACTIONS + NUM_SIZES + NUM_EXPRESSIONS;

pub fn background_token(id: usize) -> u16 {
    assert!(id < NUM_BACKGROUNDS);
    (1 + id) as u16
}

pub fn action_token(id: usize) -> u16 {
    assert!(id < NUM_ACTIONS);
    (1 + NUM_BACKGROUNDS + id) as u16
}

pub fn size_token(id: usize) -> u16 {
    assert!(id < NUM_SIZES);
    (1 + NUM_BACKGROUNDS + NUM_ACTIONS + id) as u16
}

pub fn expression_token(id: usize) -> u16 {
    assert!(id < NUM_EXPRESSIONS);
    (1 + NUM_BACKGROUNDS + NUM_ACTIONS + NUM_SIZES + id) as u16
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySpec {
    pub identity_id: u32,
    pub face_hue: f64,
    pub eye_spacing: f64,
    pub face_aspect: f64,
    pub skin_tone: f64,
    pub marker_bits: u8,
}

#[derive(Clone, Debug)]
pub struct SceneScript {
    pub background_id: usize,
    pub face_center: Vec<(f64, f64)>,
    pub face_scale: Vec<f64>,
    pub expression: Vec<f64>,
    pub caption_tokens: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// One [3, h*w] tensor per frame, values in [0,1].
    pub frames: Vec<Tensor>,
    /// Per frame: (x, y) for left eye, right eye, left ear, right ear, nose.
    pub keypoints: Vec<[[f64; 2]; 5]>,
    /// Per frame: one byte per pixel, 1 inside the face ellipse.
    pub mask: Vec<Vec<u8>>,
    pub caption: Vec<u16>,
    pub identity: IdentitySpec,
}

/// Deterministic identity parameters from a seed. Fields are snapped to f32
/// so disk round trips are exact.
pub fn generate_identity(seed: u64) -> IdentitySpec {
    let mut r = rng::stream(seed, "identity", &[]);
    let f32snap = |x: f64| x as f32 as f64;
    IdentitySpec {
        identity_id: seed as u32,
        face_hue: f32snap(rng::uniform(&mut r, 0.0, 1.0)),
        // Lower bound keeps the inter-eye distance above the crop aligner's
        // 2 px degeneracy threshold even for the smallest rendered faces.
        eye_spacing: f32snap(rng::uniform(&mut r, 0.3, 0.45)),
        face_aspect: f32snap(rng::uniform(&mut r, 0.7, 1.3)),
        skin_tone: f32snap(rng::uniform(&mut r, 0.0, 1.0)),
        marker_bits: (r.gen::<u32>() & 0xff) as u8,
    }
}

/// Identity for roster position `index` under a dataset seed; identity_id is
/// the roster index so reports stay readable.
pub fn identity_for_index(dataset_seed: u64, index: u32) -> IdentitySpec {
    let mut r = rng::stream(dataset_seed, "identity-roster", &[index as u64]);
    let sub_seed: u64 = r.gen();
    let mut spec = generate_identity(sub_seed);
    spec.identity_id = index;
    spec
}

/// Relative keypoint offsets within the face ellipse, in units of
/// (semi_x, semi_y). Eyes use the identity's eye_spacing for x.
fn keypoint_offsets(spec: &IdentitySpec) -> [[f64; 2]; 5] {
    [
        [-spec.eye_spacing, -0.2], // left eye
        [spec.eye_spacing, -0.2],  // right eye
        [-0.75, 0.0],              // left ear
        [0.75, 0.0],               // right ear
        [0.0, 0.15],               // nose
    ]
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i64 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn paint_background(frame: &mut Tensor, background_id: usize, h: usize, w: usize) {
    let px = |frame: &mut Tensor, x: usize, y: usize, c: (f64, f64, f64)| {
        frame.set(0, y * w + x, c.0);
        frame.set(1, y * w + x, c.1);
        frame.set(2, y * w + x, c.2);
    };
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / (w - 1).max(1) as f64;
            let fy = y as f64 / (h - 1).max(1) as f64;
            let c = match background_id % NUM_BACKGROUNDS {
                0 => (0.1 + 0.5 * fx, 0.2 + 0.4 * fx, 0.6 + 0.3 * fx),
                1 => (0.1, 0.25 + 0.55 * fy, 0.15),
                2 => {
                    if ((x + y) / 4) % 2 == 0 {
                        (0.75, 0.15, 0.15)
                    } else {
                        (0.95, 0.9, 0.9)
                    }
                }
                3 => {
                    if (x / 4 + y / 4) % 2 == 0 {
                        (0.35, 0.35, 0.35)
                    } else {
                        (0.65, 0.65, 0.65)
                    }
                }
                4 => (0.85, 0.55, 0.25),
                5 => (0.1, 0.5, 0.55),
                6 => {
                    if (x / 3) % 2 == 0 {
                        (0.5, 0.2, 0.7)
                    } else {
                        (0.9, 0.85, 0.3)
                    }
                }
                _ => {
                    let r = ((fx - 0.5).powi(2) + (fy - 0.5).powi(2)).sqrt();
                    (0.8 - 0.6 * r, 0.2, 0.5 + 0.4 * r)
                }
            };
            px(frame, x, y, c);
        }
    }
}

fn paint_disk(frame: &mut Tensor, w: usize, h: usize, cx: f64, cy: f64, r: f64, c: (f64, f64, f64)) {
    let x0 = ((cx - r).floor().max(0.0)) as usize;
    let x1 = ((cx + r).ceil().min((w - 1) as f64)) as usize;
    let y0 = ((cy - r).floor().max(0.0)) as usize;
    let y1 = ((cy + r).ceil().min((h - 1) as f64)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                frame.set(0, y * w + x, c.0);
                frame.set(1, y * w + x, c.1);
                frame.set(2, y * w + x, c.2);
            }
        }
    }
}

/// Render one video. Fails if the script length disagrees with T, if dims are
/// under 8, or if the scripted face would be too small to carry keypoints and
/// marker texture (either semi-axis < 3 px) or would leave the frame.
pub fn render_video(
    spec: &IdentitySpec,
    script: &SceneScript,
    t: usize,
    h: usize,
    w: usize,
) -> Result<VideoSample> {
    if t < 1 || h < 8 || w < 8 {
        return Err(IdvidError::InvalidArgument(format!(
            "video dims too small: t={t} h={h} w={w}"
        )));
    }
    if script.face_center.len() != t || script.face_scale.len() != t || script.expression.len() != t
    {
        return Err(IdvidError::InvalidArgument(format!(
            "script length {} does not match frame count {t}",
            script.face_center.len()
        )));
    }
    let (fr, fg, fb) = hsv_to_rgb(spec.face_hue, 0.55, 0.5 + 0.45 * spec.skin_tone);
    let mut frames = Vec::with_capacity(t);
    let mut keypoints = Vec::with_capacity(t);
    let mut masks = Vec::with_capacity(t);
    for fi in 0..t {
        let (cx, cy) = script.face_center[fi];
        let scale = script.face_scale[fi];
        if !(0.3..=0.8).contains(&scale) {
            return Err(IdvidError::InvalidArgument(format!(
                "face_scale {scale} outside [0.3, 0.8] at frame {fi}"
            )));
        }
        let semi_y = scale * h as f64 / 2.0;
        let semi_x = semi_y * spec.face_aspect;
        if semi_x < 3.0 || semi_y < 3.0 {
            return Err(IdvidError::InvalidArgument(format!(
                "face too small at frame {fi}: semi axes {semi_x:.2}x{semi_y:.2} (need >= 3 px)"
            )));
        }
        let mut frame = Tensor::zeros(3, h * w);
        paint_background(&mut frame, script.background_id, h, w);

        // face ellipse fill; the mask is exactly the painted pixel set
        let mut mask = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let nx = (x as f64 + 0.5 - cx) / semi_x;
                let ny = (y as f64 + 0.5 - cy) / semi_y;
                if nx * nx + ny * ny <= 1.0 {
                    mask[y * w + x] = 1;
                    frame.set(0, y * w + x, fr);
                    frame.set(1, y * w + x, fg);
                    frame.set(2, y * w + x, fb);
                }
            }
        }

        // keypoints and the features drawn at them
        let offs = keypoint_offsets(spec);
        let mut kps = [[0.0f64; 2]; 5];
        for (ki, off) in offs.iter().enumerate() {
            let kx = cx + off[0] * semi_x;
            let ky = cy + off[1] * semi_y;
            if kx < 0.0 || kx >= w as f64 || ky < 0.0 || ky >= h as f64 {
                return Err(IdvidError::InvalidArgument(format!(
                    "keypoint {ki} leaves the frame at frame {fi} ({kx:.1},{ky:.1})"
                )));
            }
            kps[ki] = [kx as f32 as f64, ky as f32 as f64];
        }
        let dark = (0.08, 0.08, 0.12);
        let ear_c = (fr * 0.8, fg * 0.8, fb * 0.8);
        let nose_c = (fr * 0.85, fg * 0.85, fb * 0.82);
        paint_disk(&mut frame, w, h, kps[0][0], kps[0][1], (0.12 * semi_y).max(1.0), dark);
        paint_disk(&mut frame, w, h, kps[1][0], kps[1][1], (0.12 * semi_y).max(1.0), dark);
        paint_disk(&mut frame, w, h, kps[2][0], kps[2][1], (0.1 * semi_y).max(1.0), ear_c);
        paint_disk(&mut frame, w, h, kps[3][0], kps[3][1], (0.1 * semi_y).max(1.0), ear_c);
        paint_disk(&mut frame, w, h, kps[4][0], kps[4][1], (0.08 * semi_y).max(1.0), nose_c);

        // mouth: fixed corners, curvature set by expression
        let expr = script.expression[fi].clamp(-1.0, 1.0);
        let mouth_y = cy + 0.5 * semi_y;
        let half = 0.45 * semi_x;
        let steps = (2.0 * half).ceil() as usize * 2 + 1;
        for si in 0..steps {
            let u = -1.0 + 2.0 * si as f64 / (steps - 1).max(1) as f64;
            let mx = cx + u * half;
            let my = mouth_y + expr * 0.18 * semi_y * (1.0 - u * u);
            paint_disk(&mut frame, w, h, mx, my, 0.7, (0.45, 0.1, 0.12));
        }

        // identity marker patches: 1-px-period checkerboards on a ring,
        // one patch per set bit; drawn last so they are never occluded
        let ring = 0.45;
        for bit in 0..8u8 {
            if spec.marker_bits & (1 << bit) == 0 {
                continue;
            }
            let ang = -std::f64::consts::FRAC_PI_2 + bit as f64 * std::f64::consts::PI / 4.0;
            let mx = cx + ring * semi_x * ang.cos();
            let my = cy + ring * semi_y * ang.sin();
            let px0 = (mx - 1.0).round() as i64;
            let py0 = (my - 1.0).round() as i64;
            for dy in 0..2i64 {
                for dx in 0..2i64 {
                    let (x, y) = (px0 + dx, py0 + dy);
                    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        continue;
                    }
                    let v = if (dx + dy) % 2 == 0 { 0.98 } else { 0.02 };
                    let idx = y as usize * w + x as usize;
                    frame.set(0, idx, v);
                    frame.set(1, idx, v);
                    frame.set(2, idx, v);
                }
            }
        }

        frame.snap_f32();
        frames.push(frame);
        keypoints.push(kps);
        masks.push(mask);
    }
    Ok(VideoSample {
        t,
        h,
        w,
        frames,
        keypoints,
        mask: masks,
        caption: script.caption_tokens.clone(),
        identity: spec.clone(),
    })
}

/// Bilinear sample of a [3, h*w] frame at a float position with edge clamp.
fn sample_bilinear(frame: &Tensor, h: usize, w: usize, x: f64, y: f64, c: usize) -> f64 {
    let cx = (x - 0.5).max(0.0).min((w - 1) as f64);
    let cy = (y - 0.5).max(0.0).min((h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    let v00 = frame.get(c, y0 * w + x0);
    let v01 = frame.get(c, y0 * w + x1);
    let v10 = frame.get(c, y1 * w + x0);
    let v11 = frame.get(c, y1 * w + x1);
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
}

/// Similarity-align a face crop: the eye midpoint and inter-eye axis land at
/// canonical positions in an S-by-S output, bilinearly resampled.
pub fn crop_align(
    frame: &Tensor,
    h: usize,
    w: usize,
    keypoints: &[[f64; 2]; 5],
    s: usize,
) -> Result<Tensor> {
    let (elx, ely) = (keypoints[0][0], keypoints[0][1]);
    let (erx, ery) = (keypoints[1][0], keypoints[1][1]);
    let dx = erx - elx;
    let dy = ery - ely;
    let dist = (dx * dx + dy * dy).sqrt();
    if dist <= 2.0 {
        return Err(IdvidError::DegenerateGeometry(format!(
            "inter-eye distance {dist:.3} px <= 2"
        )));
    }
    let (cos_t, sin_t) = (dx / dist, dy / dist);
    let canon_dist = (CANON_RIGHT_EYE.0 - CANON_LEFT_EYE.0) * s as f64;
    let scale = canon_dist / dist;
    let mid_src = ((elx + erx) / 2.0, (ely + ery) / 2.0);
    let mid_canon = (
        (CANON_LEFT_EYE.0 + CANON_RIGHT_EYE.0) / 2.0 * s as f64,
        (CANON_LEFT_EYE.1 + CANON_RIGHT_EYE.1) / 2.0 * s as f64,
    );
    let mut out = Tensor::zeros(3, s * s);
    for v in 0..s {
        for u in 0..s {
            let du = u as f64 + 0.5 - mid_canon.0;
            let dv = v as f64 + 0.5 - mid_canon.1;
            let sx = mid_src.0 + (cos_t * du - sin_t * dv) / scale;
            let sy = mid_src.1 + (sin_t * du + cos_t * dv) / scale;
            for c in 0..3 {
                out.set(c, v * s + u, sample_bilinear(frame, h, w, sx, sy, c));
            }
        }
    }
    out.snap_f32();
    Ok(out)
}

/// Map source-frame keypoints into aligned-crop coordinates (the forward
/// similarity transform used by `crop_align`).
pub fn map_keypoints_to_crop(keypoints: &[[f64; 2]; 5], s: usize) -> Result<[[f64; 2]; 5]> {
    let (elx, ely) = (keypoints[0][0], keypoints[0][1]);
    let (erx, ery) = (keypoints[1][0], keypoints[1][1]);
    let dx = erx - elx;
    let dy = ery - ely;
    let dist = (dx * dx + dy * dy).sqrt();
    if dist <= 2.0 {
        return Err(IdvidError::DegenerateGeometry(format!(
            "inter-eye distance {dist:.3} px <= 2"
        )));
    }
    let (cos_t, sin_t) = (dx / dist, dy / dist);
    let canon_dist = (CANON_RIGHT_EYE.0 - CANON_LEFT_EYE.0) * s as f64;
    let scale = canon_dist / dist;
    let mid_src = ((elx + erx) / 2.0, (ely + ery) / 2.0);
    let mid_canon = (
        (CANON_LEFT_EYE.0 + CANON_RIGHT_EYE.0) / 2.0 * s as f64,
        (CANON_LEFT_EYE.1 + CANON_RIGHT_EYE.1) / 2.0 * s as f64,
    );
    let mut out = [[0.0f64; 2]; 5];
    for (ki, kp) in keypoints.iter().enumerate() {
        let rx = kp[0] - mid_src.0;
        let ry = kp[1] - mid_src.1;
        // inverse rotation: source axis back to canonical axis
        out[ki] = [
            mid_canon.0 + scale * (cos_t * rx + sin_t * ry),
            mid_canon.1 + scale * (-sin_t * rx + cos_t * ry),
        ];
    }
    Ok(out)
}

const LANDMARK_COLORS: [(f64, f64, f64); 5] = [
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0),
];

/// Rasterize keypoints as fixed-radius disks in per-landmark colors on a
/// black S-by-S canvas. Out-of-bounds points are clamped to the border.
pub fn render_keypoints_rgb(keypoints: &[[f64; 2]], s: usize) -> Result<Tensor> {
    if s < 16 {
        return Err(IdvidError::InvalidArgument(format!(
            "keypoint canvas side {s} < 16"
        )));
    }
    if keypoints.len() != 5 {
        return Err(IdvidError::InvalidArgument(format!(
            "expected 5 keypoints, got {}",
            keypoints.len()
        )));
    }
    let mut out = Tensor::zeros(3, s * s);
    for (ki, kp) in keypoints.iter().enumerate() {
        let cx = kp[0].clamp(0.0, (s - 1) as f64);
        let cy = kp[1].clamp(0.0, (s - 1) as f64);
        paint_disk(&mut out, s, s, cx, cy, 2.0, LANDMARK_COLORS[ki]);
    }
    out.snap_f32();
    Ok(out)
}

/// Scene built from a caption: background, motion path, size class, and
/// expression come from the tokens; only the path phase is sampled.
pub fn script_from_caption(
    caption: &[u16],
    t: usize,
    h: usize,
    w: usize,
    aspect: f64,
    rng: &mut impl Rng,
) -> Result<SceneScript> {
    if caption.len() != 4 {
        return Err(IdvidError::InvalidArgument(format!(
            "caption must be 4 tokens (background, action, size, expression), got {}",
            caption.len()
        )));
    }
    let bg = caption[0] as usize;
    let act = caption[1] as usize;
    let size = caption[2] as usize;
    let expr = caption[3] as usize;
    let bg_ok = (1..=NUM_BACKGROUNDS).contains(&bg);
    let act_ok = (1 + NUM_BACKGROUNDS..=NUM_BACKGROUNDS + NUM_ACTIONS).contains(&act);
    let size_lo = 1 + NUM_BACKGROUNDS + NUM_ACTIONS;
    let size_ok = (size_lo..size_lo + NUM_SIZES).contains(&size);
    let expr_lo = size_lo + NUM_SIZES;
    let expr_ok = (expr_lo..expr_lo + NUM_EXPRESSIONS).contains(&expr);
    if !(bg_ok && act_ok && size_ok && expr_ok) {
        return Err(IdvidError::InvalidArgument(format!(
            "caption tokens out of vocabulary slots: {caption:?}"
        )));
    }
    let background_id = bg - 1;
    let action = act - 1 - NUM_BACKGROUNDS;
    let size_class = size - size_lo;
    let expr_class = expr - expr_lo;

    let scale = [0.32, 0.45, 0.58][size_class];
    let semi_y = scale * h as f64 / 2.0;
    let semi_x = semi_y * aspect;
    let margin_x = (w as f64 / 2.0 - semi_x - 1.0).max(0.0);
    let margin_y = (h as f64 / 2.0 - semi_y - 1.0).max(0.0);
    let amp_x = margin_x * 0.8;
    let amp_y = margin_y * 0.8;
    let jx = rng::uniform(rng, -0.15, 0.15) * margin_x;
    let jy = rng::uniform(rng, -0.15, 0.15) * margin_y;
    let phase = rng::uniform(rng, 0.0, std::f64::consts::TAU);
    let c0 = (w as f64 / 2.0 + jx, h as f64 / 2.0 + jy);

    let mut centers = Vec::with_capacity(t);
    for fi in 0..t {
        let prog = if t > 1 { fi as f64 / (t - 1) as f64 } else { 0.0 };
        let lin = 2.0 * prog - 1.0; // -1 .. 1
        let (ox, oy) = match action {
            0 => (-lin * amp_x * 0.8, 0.0),                  // drift left
            1 => (lin * amp_x * 0.8, 0.0),                   // drift right
            2 => (0.0, -lin * amp_y * 0.8),                  // drift up
            3 => (0.0, lin * amp_y * 0.8),                   // drift down
            4 => {
                let a = phase + prog * std::f64::consts::TAU;
                (0.7 * amp_x * a.cos(), 0.7 * amp_y * a.sin()) // circle
            }
            5 => {
                let tri = 2.0 * (2.0 * prog - (2.0 * prog + 0.5).floor()).abs() - 0.5;
                (tri * 1.4 * amp_x, 0.0)                     // zigzag
            }
            6 => (0.0, 0.0),                                 // still
            _ => (0.0, -(phase + prog * std::f64::consts::TAU).sin().abs() * amp_y * 0.8), // bounce
        };
        let cx = (c0.0 + ox).clamp(semi_x + 1.0, w as f64 - semi_x - 1.0);
        let cy = (c0.1 + oy).clamp(semi_y + 1.0, h as f64 - semi_y - 1.0);
        centers.push((cx, cy));
    }
    let expression = vec![[0.0, 0.8, -0.8][expr_class]; t];
    Ok(SceneScript {
        background_id,
        face_center: centers,
        face_scale: vec![scale; t],
        expression,
        caption_tokens: caption.to_vec(),
    })
}

pub fn random_caption(rng: &mut impl Rng) -> Vec<u16> {
    vec![
        background_token(rng.gen_range(0..NUM_BACKGROUNDS)),
        action_token(rng.gen_range(0..NUM_ACTIONS)),
        size_token(rng.gen_range(0..NUM_SIZES)),
        expression_token(rng.gen_range(0..NUM_EXPRESSIONS)),
    ]
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_identities: u32,
    pub videos_per_identity: u32,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_identities: 16,
            videos_per_identity: 8,
            frames_per_video: 8,
            height: 32,
            width: 32,
            seed: 0,
        }
    }
}

/// Build the full roster deterministically: one rng stream per (identity,
/// video) pair, so order of generation cannot matter.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Vec<VideoSample>> {
    let mut out = Vec::with_capacity((cfg.n_identities * cfg.videos_per_identity) as usize);
    for ident in 0..cfg.n_identities {
        let spec = identity_for_index(cfg.seed, ident);
        for vid in 0..cfg.videos_per_identity {
            let mut r = rng::stream(cfg.seed, "sample", &[ident as u64, vid as u64]);
            let caption = random_caption(&mut r);
            let script = script_from_caption(
                &caption,
                cfg.frames_per_video,
                cfg.height,
                cfg.width,
                spec.face_aspect,
                &mut r,
            )?;
            out.push(render_video(&spec, &script, cfg.frames_per_video, cfg.height, cfg.width)?);
        }
    }
    Ok(out)
}

const MAGIC: &[u8; 4] = b"CSID";
const VERSION: u32 = 1;

fn w_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn w_f32(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&(v as f32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(IdvidError::CorruptFile(format!(
                "truncated dataset: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
}

pub fn save_dataset(samples: &[VideoSample], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    w_u32(&mut buf, VERSION);
    w_u32(&mut buf, samples.len() as u32);
    for s in samples {
        w_u32(&mut buf, s.t as u32);
        w_u32(&mut buf, s.h as u32);
        w_u32(&mut buf, s.w as u32);
        for fr in &s.frames {
            for &v in fr.data() {
                w_f32(&mut buf, v);
            }
        }
        for kps in &s.keypoints {
            for kp in kps {
                w_f32(&mut buf, kp[0]);
                w_f32(&mut buf, kp[1]);
            }
        }
        for m in &s.mask {
            buf.extend_from_slice(m);
        }
        buf.extend_from_slice(&(s.caption.len() as u16).to_le_bytes());
        for &tok in &s.caption {
            buf.extend_from_slice(&tok.to_le_bytes());
        }
        w_u32(&mut buf, s.identity.identity_id);
        w_f32(&mut buf, s.identity.face_hue);
        w_f32(&mut buf, s.identity.eye_spacing);
        w_f32(&mut buf, s.identity.face_aspect);
        w_f32(&mut buf, s.identity.skin_tone);
        w_u32(&mut buf, s.identity.marker_bits as u32);
    }
    let mut f = std::fs::File::create(path).map_err(|e| IdvidError::io(path, e))?;
    f.write_all(&buf).map_err(|e| IdvidError::io(path, e))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<VideoSample>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| IdvidError::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| IdvidError::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(IdvidError::CorruptFile(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(IdvidError::CorruptFile(format!(
            "unsupported dataset version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let t = r.u32()? as usize;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        if t == 0 || h == 0 || w == 0 || t > 1 << 16 || h > 1 << 16 || w > 1 << 16 {
            return Err(IdvidError::CorruptFile(format!(
                "implausible sample dims t={t} h={h} w={w}"
            )));
        }
        let mut frames = Vec::with_capacity(t);
        for _ in 0..t {
            let mut fr = Tensor::zeros(3, h * w);
            for i in 0..3 * h * w {
                fr.data_mut()[i] = r.f32()?;
            }
            frames.push(fr);
        }
        let mut keypoints = Vec::with_capacity(t);
        for _ in 0..t {
            let mut kps = [[0.0f64; 2]; 5];
            for kp in &mut kps {
                kp[0] = r.f32()?;
                kp[1] = r.f32()?;
            }
            keypoints.push(kps);
        }
        let mut mask = Vec::with_capacity(t);
        for _ in 0..t {
            mask.push(r.take(h * w)?.to_vec());
        }
        let cap_len = r.u16()? as usize;
        let mut caption = Vec::with_capacity(cap_len);
        for _ in 0..cap_len {
            caption.push(r.u16()?);
        }
        let identity = IdentitySpec {
            identity_id: r.u32()?,
            face_hue: r.f32()?,
            eye_spacing: r.f32()?,
            face_aspect: r.f32()?,
            skin_tone: r.f32()?,
            marker_bits: {
                let v = r.u32()?;
                if v > 0xff {
                    return Err(IdvidError::CorruptFile(format!(
                        "marker_bits {v} exceeds 8 bits"
                    )));
                }
                v as u8
            },
        };
        out.push(VideoSample {
            t,
            h,
            w,
            frames,
            keypoints,
            mask,
            caption,
            identity,
        });
    }
    if r.pos != bytes.len() {
        return Err(IdvidError::CorruptFile(format!(
            "{} trailing bytes after last sample",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_script(t: usize) -> SceneScript {
        SceneScript {
            background_id: 3,
            face_center: vec![(16.0, 16.0); t],
            face_scale: vec![0.5; t],
            expression: vec![0.4; t],
            caption_tokens: vec![
                background_token(3),
                action_token(6),
                size_token(1),
                expression_token(1),
            ],
        }
    }

    #[test]
    fn identity_is_a_pure_function_of_seed() {
        assert_eq!(generate_identity(7), generate_identity(7));
        assert_eq!(identity_for_index(3, 12), identity_for_index(3, 12));
    }

    #[test]
    fn identity_specs_are_distinct_across_seeds() {
        let mut seen = HashSet::new();
        for seed in 0..100u64 {
            let s = generate_identity(seed);
            seen.insert((
                s.face_hue.to_bits(),
                s.eye_spacing.to_bits(),
                s.face_aspect.to_bits(),
                s.skin_tone.to_bits(),
                s.marker_bits,
            ));
        }
        assert!(seen.len() >= 99, "only {} distinct specs", seen.len());
    }

    #[test]
    fn identity_fields_stay_in_range() {
        for seed in 0..200u64 {
            let s = generate_identity(seed);
            assert!((0.0..1.0).contains(&s.face_hue));
            assert!((0.2..=0.45).contains(&s.eye_spacing));
            assert!((0.7..=1.3).contains(&s.face_aspect));
            assert!((0.0..=1.0).contains(&s.skin_tone));
        }
    }

    #[test]
    fn static_scene_renders_identical_frames() {
        let spec = generate_identity(11);
        let v = render_video(&spec, &small_script(4), 4, 32, 32).unwrap();
        for fi in 1..4 {
            assert_eq!(v.frames[fi], v.frames[0]);
            assert_eq!(v.mask[fi], v.mask[0]);
            assert_eq!(v.keypoints[fi], v.keypoints[0]);
        }
        for fr in &v.frames {
            assert!(fr.data().iter().all(|&x| (0.0..=1.0).contains(&x) && x.is_finite()));
        }
    }

    #[test]
    fn render_rejects_mismatched_script_and_small_dims() {
        let spec = generate_identity(1);
        assert!(matches!(
            render_video(&spec, &small_script(3), 4, 32, 32),
            Err(IdvidError::InvalidArgument(_))
        ));
        assert!(render_video(&spec, &small_script(2), 2, 4, 32).is_err());
    }

    #[test]
    fn mask_matches_the_analytic_ellipse_pixel_set() {
        let spec = generate_identity(23);
        let script = small_script(2);
        let v = render_video(&spec, &script, 2, 40, 48).unwrap();
        // Recount from the ellipse equation at pixel centers, independently of
        // the renderer's loop.
        let semi_y = script.face_scale[0] * 40.0 / 2.0;
        let semi_x = semi_y * spec.face_aspect;
        let (cx, cy) = script.face_center[0];
        let mut want = 0usize;
        for y in 0..40 {
            for x in 0..48 {
                let nx = (x as f64 + 0.5 - cx) / semi_x;
                let ny = (y as f64 + 0.5 - cy) / semi_y;
                let inside = nx * nx + ny * ny <= 1.0;
                if inside {
                    want += 1;
                }
                assert_eq!(v.mask[0][y * 48 + x] == 1, inside, "pixel ({x},{y})");
            }
        }
        let got: usize = v.mask[0].iter().map(|&m| m as usize).sum();
        assert_eq!(got, want);
        assert!(want > 0);
    }

    #[test]
    fn keypoints_lie_inside_frame_and_mask() {
        let ds = build_dataset(&DatasetConfig {
            n_identities: 4,
            videos_per_identity: 2,
            ..DatasetConfig::default()
        })
        .unwrap();
        for v in &ds {
            for fi in 0..v.t {
                for kp in &v.keypoints[fi] {
                    assert!(kp[0] >= 0.0 && kp[0] < v.w as f64);
                    assert!(kp[1] >= 0.0 && kp[1] < v.h as f64);
                    let (x, y) = (kp[0] as usize, kp[1] as usize);
                    assert_eq!(v.mask[fi][y * v.w + x], 1, "keypoint {kp:?} off the face");
                }
            }
        }
    }

    #[test]
    fn canonical_pose_crop_is_a_window_copy() {
        // Eyes horizontal with inter-eye distance exactly 0.3 * s and the
        // window offset integral, so the similarity transform degenerates to
        // a pixel-for-pixel copy of an axis-aligned window.
        let s = 64usize;
        let (h, w) = (96usize, 96usize);
        let mut frame = Tensor::zeros(3, h * w);
        for c in 0..3 {
            for i in 0..h * w {
                frame.set(c, i, ((i * 131 + c * 57) % 97) as f64 / 96.0);
            }
        }
        frame.snap_f32();
        // canonical midpoint is (32, 25.6); source midpoint (40, 33.6) puts
        // the window at offset (+8, +8)
        let kps = [
            [30.4, 33.6],
            [49.6, 33.6],
            [25.0, 50.0],
            [55.0, 50.0],
            [40.0, 44.0],
        ];
        let crop = crop_align(&frame, h, w, &kps, s).unwrap();
        for v in 0..s {
            for u in 0..s {
                for c in 0..3 {
                    let want = frame.get(c, (v + 8) * w + (u + 8));
                    let got = crop.get(c, v * s + u);
                    assert!(
                        (got - want).abs() < 1e-9,
                        "({u},{v},{c}): got {got}, want {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn rotated_face_crop_puts_eyes_at_canonical_positions() {
        // Draw the landmark disks, rotate the whole constellation by 10
        // degrees, and verify the aligned crop moves the eye disks to the
        // canonical eye coordinates within a pixel.
        let canvas = 96usize;
        let base: [[f64; 2]; 5] = [
            [38.0, 48.0],
            [58.0, 48.0],
            [20.0, 20.0],
            [76.0, 20.0],
            [48.0, 78.0],
        ];
        let ang = 10f64.to_radians();
        let (cx, cy) = (48.0, 48.0);
        let rot: Vec<[f64; 2]> = base
            .iter()
            .map(|kp| {
                let (dx, dy) = (kp[0] - cx, kp[1] - cy);
                [
                    cx + ang.cos() * dx - ang.sin() * dy,
                    cy + ang.sin() * dx + ang.cos() * dy,
                ]
            })
            .collect();
        let img = render_keypoints_rgb(&rot, canvas).unwrap();
        let eyes: [[f64; 2]; 5] = [rot[0], rot[1], rot[2], rot[3], rot[4]];
        let s = REF_FACE_SIZE;
        let crop = crop_align(&img, canvas, canvas, &eyes, s).unwrap();

        // centroid of a channel that is high only for one landmark color
        let centroid = |pick: &dyn Fn(f64, f64, f64) -> f64| -> (f64, f64) {
            let (mut sx, mut sy, mut m) = (0.0, 0.0, 0.0);
            for y in 0..s {
                for x in 0..s {
                    let i = y * s + x;
                    let wgt = pick(crop.get(0, i), crop.get(1, i), crop.get(2, i));
                    sx += (x as f64 + 0.5) * wgt;
                    sy += (y as f64 + 0.5) * wgt;
                    m += wgt;
                }
            }
            (sx / m, sy / m)
        };
        let red = centroid(&|r, g, b| if r > 0.3 && g < 0.3 && b < 0.3 { r } else { 0.0 });
        let green = centroid(&|r, g, b| if g > 0.3 && r < 0.3 && b < 0.3 { g } else { 0.0 });
        let want_l = (CANON_LEFT_EYE.0 * s as f64, CANON_LEFT_EYE.1 * s as f64);
        let want_r = (CANON_RIGHT_EYE.0 * s as f64, CANON_RIGHT_EYE.1 * s as f64);
        assert!(
            (red.0 - want_l.0).abs() < 1.0 && (red.1 - want_l.1).abs() < 1.0,
            "left eye at {red:?}, want {want_l:?}"
        );
        assert!(
            (green.0 - want_r.0).abs() < 1.0 && (green.1 - want_r.1).abs() < 1.0,
            "right eye at {green:?}, want {want_r:?}"
        );
    }

    #[test]
    fn keypoint_mapping_matches_crop_transform_exactly() {
        // The forward map must send the eyes to the canonical coordinates for
        // any rotation, not just small ones.
        for deg in [0.0, 10.0, 45.0, 133.0, -70.0] {
            let ang = (deg as f64).to_radians();
            let d = 11.0;
            let kps = [
                [50.0 - d * ang.cos(), 50.0 - d * ang.sin()],
                [50.0 + d * ang.cos(), 50.0 + d * ang.sin()],
                [30.0, 30.0],
                [70.0, 30.0],
                [50.0, 65.0],
            ];
            let s = 64;
            let mapped = map_keypoints_to_crop(&kps, s).unwrap();
            assert!((mapped[0][0] - 0.35 * 64.0).abs() < 1e-9);
            assert!((mapped[0][1] - 0.4 * 64.0).abs() < 1e-9);
            assert!((mapped[1][0] - 0.65 * 64.0).abs() < 1e-9);
            assert!((mapped[1][1] - 0.4 * 64.0).abs() < 1e-9);
        }
    }

    #[test]
    fn coincident_eyes_are_degenerate() {
        let frame = Tensor::zeros(3, 32 * 32);
        let kps = [[5.0, 5.0], [5.0, 5.0], [1.0, 1.0], [9.0, 1.0], [5.0, 9.0]];
        assert!(matches!(
            crop_align(&frame, 32, 32, &kps, 64),
            Err(IdvidError::DegenerateGeometry(_))
        ));
        // exactly at the 2 px threshold is still degenerate
        let kps2 = [[5.0, 5.0], [7.0, 5.0], [1.0, 1.0], [9.0, 1.0], [5.0, 9.0]];
        assert!(crop_align(&frame, 32, 32, &kps2, 64).is_err());
        assert!(map_keypoints_to_crop(&kps, 64).is_err());
    }

    #[test]
    fn keypoint_disks_land_at_exact_pixels_with_fixed_colors() {
        let kps = [[8.5, 8.5], [24.5, 8.5], [8.5, 24.5], [24.5, 24.5], [16.5, 16.5]];
        let img = render_keypoints_rgb(&kps, 32).unwrap();
        let colors = [
            (1.0, 0.0, 0.0),
            (0.0, 1.0, 0.0),
            (0.0, 0.0, 1.0),
            (1.0, 1.0, 0.0),
            (1.0, 0.0, 1.0),
        ];
        for (kp, col) in kps.iter().zip(colors) {
            let i = kp[1] as usize * 32 + kp[0] as usize;
            assert_eq!((img.get(0, i), img.get(1, i), img.get(2, i)), col);
        }
        // a radius-2 disk at a pixel center covers exactly 13 pixels
        let red: usize = (0..32 * 32)
            .filter(|&i| img.get(0, i) == 1.0 && img.get(1, i) == 0.0 && img.get(2, i) == 0.0)
            .count();
        assert_eq!(red, 13);
        // far from every landmark the canvas stays black
        assert_eq!(img.get(0, 0), 0.0);
        assert_eq!(img.get(1, 31 * 32 + 31), 0.0);
    }

    #[test]
    fn out_of_bounds_keypoints_clip_to_the_border() {
        let kps = [[-5.0, -5.0], [30.0, 8.0], [8.0, 30.0], [20.0, 20.0], [26.0, 26.0]];
        let img = render_keypoints_rgb(&kps, 32).unwrap();
        // clamped to (0,0): the in-bounds quarter of the disk is drawn
        assert_eq!(img.get(0, 0), 1.0);
        for i in 0..32 * 32 {
            if img.get(0, i) == 1.0 && img.get(1, i) == 0.0 && img.get(2, i) == 0.0 {
                let (x, y) = (i % 32, i / 32);
                assert!(x <= 1 && y <= 1, "red pixel escaped the corner at ({x},{y})");
            }
        }

        let zeros = [[0.0, 0.0]; 5];
        let img = render_keypoints_rgb(&zeros, 32).unwrap();
        let mut any = false;
        for i in 0..32 * 32 {
            let lit = img.get(0, i) != 0.0 || img.get(1, i) != 0.0 || img.get(2, i) != 0.0;
            if lit {
                any = true;
                let (x, y) = (i % 32, i / 32);
                assert!(x <= 2 && y <= 2, "pixel ({x},{y}) lit far from the origin");
            }
        }
        assert!(any);
    }

    #[test]
    fn render_keypoints_rejects_bad_inputs() {
        assert!(render_keypoints_rgb(&[[1.0, 1.0]; 4], 32).is_err());
        assert!(render_keypoints_rgb(&[[1.0, 1.0]; 5], 8).is_err());
    }

    #[test]
    fn dataset_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        let cfg = DatasetConfig {
            n_identities: 2,
            videos_per_identity: 2,
            frames_per_video: 3,
            height: 32,
            width: 32,
            seed: 5,
        };
        let ds = build_dataset(&cfg).unwrap();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);

        // deterministic rebuild
        let again = build_dataset(&cfg).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn corrupt_dataset_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        let ds = build_dataset(&DatasetConfig {
            n_identities: 1,
            videos_per_identity: 1,
            frames_per_video: 2,
            height: 32,
            width: 32,
            seed: 1,
        })
        .unwrap();
        save_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let trunc = dir.path().join("trunc.bin");
        std::fs::write(&trunc, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_dataset(&trunc), Err(IdvidError::CorruptFile(_))));

        let bad = dir.path().join("bad.bin");
        let mut b2 = bytes.clone();
        b2[0] = b'X';
        std::fs::write(&bad, &b2).unwrap();
        assert!(matches!(load_dataset(&bad), Err(IdvidError::CorruptFile(_))));

        let empty = dir.path().join("empty.bin");
        save_dataset(&[], &empty).unwrap();
        assert_eq!(load_dataset(&empty).unwrap().len(), 0);
    }

    #[test]
    fn identities_are_linearly_separable_from_mean_crops() {
        // Nearest-centroid (a linear classifier) on per-video mean aligned
        // crops must fit the roster nearly perfectly, otherwise identity
        // metrics downstream would be meaningless.
        let cfg = DatasetConfig::default(); // 16 identities x 8 videos
        let ds = build_dataset(&cfg).unwrap();
        let s = 32usize;
        let feats: Vec<(u32, Vec<f64>)> = ds
            .iter()
            .map(|v| {
                let mut acc = vec![0.0f64; 3 * s * s];
                for fi in 0..v.t {
                    let crop = crop_align(&v.frames[fi], v.h, v.w, &v.keypoints[fi], s).unwrap();
                    for (a, &x) in acc.iter_mut().zip(crop.data()) {
                        *a += x;
                    }
                }
                for a in &mut acc {
                    *a /= v.t as f64;
                }
                (v.identity.identity_id, acc)
            })
            .collect();
        // One-vs-all ridge regression fit in dual form: a linear classifier
        // in pixel space, solved through the n-by-n gram matrix.
        let n = feats.len();
        let n_id = cfg.n_identities as usize;
        let k = nalgebra::DMatrix::from_fn(n, n, |i, j| {
            feats[i].1.iter().zip(&feats[j].1).map(|(a, b)| a * b).sum::<f64>()
        });
        let lambda = 1e-6 * k.diagonal().mean().max(1e-12);
        let reg = &k + nalgebra::DMatrix::identity(n, n) * lambda;
        let y = nalgebra::DMatrix::from_fn(n, n_id, |i, c| {
            if feats[i].0 as usize == c {
                1.0
            } else {
                0.0
            }
        });
        let alpha = reg.lu().solve(&y).expect("gram matrix solvable");
        let pred = &k * &alpha;
        let mut correct = 0usize;
        for (i, (id, _)) in feats.iter().enumerate() {
            let best = (0..n_id)
                .max_by(|&a, &b| pred[(i, a)].partial_cmp(&pred[(i, b)]).unwrap())
                .unwrap();
            if best == *id as usize {
                correct += 1;
            }
        }
        let acc = correct as f64 / n as f64;
        assert!(acc > 0.9, "identity train accuracy {acc:.3} <= 0.9");
    }
}
