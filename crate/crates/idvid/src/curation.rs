//! Detection-stream curation: multi-view completeness filtering and
//! identity assignment by IoU propagation over pre-computed per-frame
//! detections. Detection itself (face/head/person boxes, keypoints) happens
//! upstream; this consumes its output as line-delimited records.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{IdvidError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Face,
    Head,
    Person,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedPoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Detection {
    pub category: Category,
    /// (x1, y1, x2, y2) in pixels, x1 < x2 and y1 < y2.
    pub bbox: [f64; 4],
    pub confidence: f64,
    #[serde(default)]
    pub keypoints: Vec<NamedPoint>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipDetections {
    pub clip_id: String,
    /// (height, width) in pixels.
    pub frame_dims: [usize; 2],
    pub frames: Vec<Vec<Detection>>,
}

impl ClipDetections {
    /// Invariant check used before any filtering: well-ordered boxes,
    /// confidences in range, positive frame dims.
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.frame_dims;
        if h == 0 || w == 0 {
            return Err(IdvidError::InvalidArgument(format!(
                "clip {}: frame dims {h}x{w}",
                self.clip_id
            )));
        }
        for (fi, frame) in self.frames.iter().enumerate() {
            for (di, det) in frame.iter().enumerate() {
                let [x1, y1, x2, y2] = det.bbox;
                if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite())
                    || x1 >= x2
                    || y1 >= y2
                {
                    return Err(IdvidError::InvalidArgument(format!(
                        "clip {}: frame {fi} detection {di} bbox not well-ordered: {:?}",
                        self.clip_id, det.bbox
                    )));
                }
                if !(0.0..=1.0).contains(&det.confidence) {
                    return Err(IdvidError::InvalidArgument(format!(
                        "clip {}: frame {fi} detection {di} confidence {} outside [0,1]",
                        self.clip_id, det.confidence
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationParams {
    /// A clip survives only if fewer than this many frames are incomplete.
    pub tolerance_frames: usize,
    /// Discard when a retained frame's largest face covers less than this
    /// fraction of the frame.
    pub min_face_area_frac: f64,
    /// A frame needs at least one face carrying this many valid keypoints.
    pub min_keypoint_count: usize,
    /// Minimum IoU for linking boxes across frames.
    pub iou_match_threshold: f64,
}

impl Default for CurationParams {
    fn default() -> Self {
        CurationParams {
            tolerance_frames: 5,
            min_face_area_frac: 0.06,
            min_keypoint_count: 3,
            iou_match_threshold: 0.1,
        }
    }
}

impl CurationParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_face_area_frac) {
            return Err(IdvidError::Config(format!(
                "min_face_area_frac {} outside [0,1]",
                self.min_face_area_frac
            )));
        }
        if !(0.0..=1.0).contains(&self.iou_match_threshold) {
            return Err(IdvidError::Config(format!(
                "iou_match_threshold {} outside [0,1]",
                self.iou_match_threshold
            )));
        }
        Ok(())
    }
}

fn box_area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection over union of two axis-aligned boxes. Degenerate
/// (zero-area) boxes score 0 against anything.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let area_a = box_area(a);
    let area_b = box_area(b);
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    inter / (area_a + area_b - inter)
}

/// Verdict of the multi-view completeness filter, with the statistics the
/// decision was based on.
#[derive(Clone, Debug, Serialize)]
pub struct FilterOutcome {
    pub accept: bool,
    pub reason: Option<String>,
    /// Frames missing a category or enough valid keypoints.
    pub missing_count: usize,
    /// Smallest largest-face area fraction over complete frames.
    pub min_face_area_frac: Option<f64>,
}

fn valid_keypoints(det: &Detection, h: usize, w: usize) -> usize {
    det.keypoints
        .iter()
        .filter(|p| {
            p.x.is_finite() && p.y.is_finite() && (0.0..=w as f64).contains(&p.x) && (0.0..=h as f64).contains(&p.y)
        })
        .count()
}

/// Keep clips where nearly every frame shows a face, head, and person box
/// plus enough keypoints, and no complete frame's largest face falls under
/// the area floor.
pub fn multi_view_filter(clip: &ClipDetections, params: &CurationParams) -> FilterOutcome {
    if clip.frames.is_empty() {
        return FilterOutcome {
            accept: false,
            reason: Some("empty clip".into()),
            missing_count: 0,
            min_face_area_frac: None,
        };
    }
    let [h, w] = clip.frame_dims;
    let frame_area = (h * w) as f64;
    let mut missing = 0usize;
    let mut min_face_frac: Option<f64> = None;
    let mut small_face_frame: Option<(usize, f64)> = None;
    for (fi, frame) in clip.frames.iter().enumerate() {
        let has = |cat: Category| frame.iter().any(|d| d.category == cat);
        let kp_ok = frame
            .iter()
            .any(|d| d.category == Category::Face && valid_keypoints(d, h, w) >= params.min_keypoint_count);
        let complete = has(Category::Face) && has(Category::Head) && has(Category::Person) && kp_ok;
        if !complete {
            missing += 1;
            continue;
        }
        let largest = frame
            .iter()
            .filter(|d| d.category == Category::Face)
            .map(|d| box_area(&d.bbox) / frame_area)
            .fold(0.0f64, f64::max);
        if min_face_frac.is_none_or(|m| largest < m) {
            min_face_frac = Some(largest);
        }
        if largest < params.min_face_area_frac && small_face_frame.is_none() {
            small_face_frame = Some((fi, largest));
        }
    }
    if missing >= params.tolerance_frames {
        return FilterOutcome {
            accept: false,
            reason: Some(format!(
                "{missing} incomplete frames, tolerance {}",
                params.tolerance_frames
            )),
            missing_count: missing,
            min_face_area_frac: min_face_frac,
        };
    }
    if let Some((fi, frac)) = small_face_frame {
        return FilterOutcome {
            accept: false,
            reason: Some(format!(
                "frame {fi} largest face covers {:.4} of the frame, floor {}",
                frac, params.min_face_area_frac
            )),
            missing_count: missing,
            min_face_area_frac: min_face_frac,
        };
    }
    FilterOutcome {
        accept: true,
        reason: None,
        missing_count: missing,
        min_face_area_frac: min_face_frac,
    }
}

/// One propagated identity: an id in [1, m] and an optional box per frame.
#[derive(Clone, Debug, Serialize)]
pub struct Track {
    pub track_id: usize,
    pub category: Category,
    pub boxes: Vec<Option<[f64; 4]>>,
}

/// Greedy descending-IoU matching between one frame's boxes and the
/// previous frame's boxes. Ties break toward the lower current box index,
/// then the lower previous box index.
fn match_to_prev(
    prev: &[[f64; 4]],
    cur: &[[f64; 4]],
    threshold: f64,
) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (j, cb) in cur.iter().enumerate() {
        for (i, pb) in prev.iter().enumerate() {
            let v = iou(cb, pb);
            if v > threshold {
                pairs.push((v, j, i));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut cur_matched = vec![None; cur.len()];
    let mut prev_taken = vec![false; prev.len()];
    for (_, j, i) in pairs {
        if cur_matched[j].is_none() && !prev_taken[i] {
            cur_matched[j] = Some(i);
            prev_taken[i] = true;
        }
    }
    cur_matched
}

/// Assign each face box a persistent id not exceeding m, the maximum
/// simultaneous face count. Forward pass links frame n to n-1 by greedy
/// descending IoU; a backward sweep then re-examines ids that first appear
/// mid-clip and merges them with tracks that ended earlier when the
/// reappearing box still overlaps the pre-gap position.
pub fn assign_ids(faces: &[Vec<[f64; 4]>], iou_match_threshold: f64) -> Result<Vec<Track>> {
    if faces.is_empty() {
        return Err(IdvidError::InvalidArgument("no frames".into()));
    }
    let n_frames = faces.len();
    let m = faces.iter().map(|f| f.len()).max().unwrap_or(0);
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut ids: Vec<Vec<usize>> = vec![Vec::new(); n_frames];
    let mut used_anywhere: BTreeSet<usize> = BTreeSet::new();

    // fresh id: a never-before-seen id from [1, m] when one is left, else
    // the smallest id absent from this frame (the cap forces reuse)
    let fresh = |frame_ids: &[usize], used: &BTreeSet<usize>| -> usize {
        for cand in 1..=m {
            if !used.contains(&cand) {
                return cand;
            }
        }
        (1..=m)
            .find(|c| !frame_ids.contains(c))
            .expect("frame holds at most m boxes, so some id in 1..=m is free")
    };

    for (k, _) in faces[0].iter().enumerate() {
        ids[0].push(k + 1);
        used_anywhere.insert(k + 1);
    }
    for n in 1..n_frames {
        let matched = match_to_prev(&faces[n - 1], &faces[n], iou_match_threshold);
        let mut frame_ids = Vec::with_capacity(faces[n].len());
        for slot in matched {
            let id = match slot {
                Some(prev_idx) => ids[n - 1][prev_idx],
                None => {
                    let id = fresh(&frame_ids, &used_anywhere);
                    used_anywhere.insert(id);
                    id
                }
            };
            frame_ids.push(id);
        }
        ids[n] = frame_ids;
    }

    // first frame each id appears in
    let first_seen = |ids: &[Vec<usize>], id: usize| -> usize {
        ids.iter().position(|f| f.contains(&id)).unwrap_or(usize::MAX)
    };

    // backward sweep: a box whose id first appears at frame n (n > 0) may
    // really be a track that ended before n and skipped some frames
    for n in (1..n_frames).rev() {
        for bi in 0..faces[n].len() {
            let id = ids[n][bi];
            if first_seen(&ids, id) != n {
                continue;
            }
            // candidate: a track whose last appearance is before n
            let mut best: Option<(f64, usize)> = None;
            for cand in 1..=m {
                if cand == id {
                    continue;
                }
                let last = ids
                    .iter()
                    .rposition(|f| f.contains(&cand));
                let Some(last) = last else { continue };
                if last >= n {
                    continue;
                }
                let prev_idx = ids[last].iter().position(|&x| x == cand).unwrap();
                let v = iou(&faces[n][bi], &faces[last][prev_idx]);
                if v > iou_match_threshold && best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, cand));
                }
            }
            if let Some((_, old_id)) = best {
                for frame in ids.iter_mut().skip(n) {
                    for x in frame.iter_mut() {
                        if *x == id {
                            *x = old_id;
                        }
                    }
                }
            }
        }
    }

    // invariant re-check before building tracks
    for (n, frame_ids) in ids.iter().enumerate() {
        let set: BTreeSet<usize> = frame_ids.iter().copied().collect();
        if set.len() != frame_ids.len() {
            return Err(IdvidError::InternalConsistency(format!(
                "duplicate ids in frame {n}: {frame_ids:?}"
            )));
        }
        if frame_ids.iter().any(|&id| id == 0 || id > m) {
            return Err(IdvidError::InternalConsistency(format!(
                "id outside [1, {m}] in frame {n}: {frame_ids:?}"
            )));
        }
    }

    let all_ids: BTreeSet<usize> = ids.iter().flatten().copied().collect();
    let mut tracks = Vec::new();
    for id in all_ids {
        let mut boxes = vec![None; n_frames];
        for n in 0..n_frames {
            if let Some(bi) = ids[n].iter().position(|&x| x == id) {
                boxes[n] = Some(faces[n][bi]);
            }
        }
        tracks.push(Track {
            track_id: id,
            category: Category::Face,
            boxes,
        });
    }
    Ok(tracks)
}

#[derive(Clone, Debug, Serialize)]
pub struct ClipStats {
    pub m: usize,
    pub missing_count: usize,
    pub min_face_area_frac: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClipVerdict {
    pub clip_id: String,
    pub verdict: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub tracks: Vec<Track>,
    pub stats: ClipStats,
}

/// Process one validated clip: filter verdict plus propagated tracks.
pub fn curate_clip(clip: &ClipDetections, params: &CurationParams) -> Result<ClipVerdict> {
    clip.validate()?;
    let outcome = multi_view_filter(clip, params);
    let faces: Vec<Vec<[f64; 4]>> = clip
        .frames
        .iter()
        .map(|f| {
            f.iter()
                .filter(|d| d.category == Category::Face)
                .map(|d| d.bbox)
                .collect()
        })
        .collect();
    let m = faces.iter().map(|f| f.len()).max().unwrap_or(0);
    let tracks = if clip.frames.is_empty() {
        Vec::new()
    } else {
        assign_ids(&faces, params.iou_match_threshold)?
    };
    Ok(ClipVerdict {
        clip_id: clip.clip_id.clone(),
        verdict: if outcome.accept { "accept" } else { "reject" },
        reason: outcome.reason,
        tracks,
        stats: ClipStats {
            m,
            missing_count: outcome.missing_count,
            min_face_area_frac: outcome.min_face_area_frac,
        },
    })
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CurateSummary {
    pub clips: usize,
    pub accepted: usize,
    pub errors: usize,
}

/// Stream curation: one clip record per input line, one verdict record per
/// output line. A malformed line becomes an error record and the stream
/// continues; output order follows input order.
pub fn curate(
    input: impl BufRead,
    output: &mut impl Write,
    params: &CurationParams,
) -> Result<CurateSummary> {
    params.validate()?;
    let mut summary = CurateSummary::default();
    for (ln, line) in input.lines().enumerate() {
        let line = line.map_err(|e| IdvidError::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        summary.clips += 1;
        let record = serde_json::from_str::<ClipDetections>(&line)
            .map_err(|e| format!("line {}: {e}", ln + 1))
            .and_then(|clip| {
                curate_clip(&clip, params).map_err(|e| format!("line {}: {e}", ln + 1))
            });
        let rendered = match record {
            Ok(verdict) => {
                if verdict.verdict == "accept" {
                    summary.accepted += 1;
                }
                serde_json::to_string(&verdict)?
            }
            Err(msg) => {
                summary.errors += 1;
                serde_json::to_string(&serde_json::json!({ "error": msg }))?
            }
        };
        writeln!(output, "{rendered}").map_err(|e| IdvidError::io("<stdout>", e))?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, uniform};

    fn det(cat: Category, bbox: [f64; 4]) -> Detection {
        Detection {
            category: cat,
            bbox,
            confidence: 0.9,
            keypoints: (0..5)
                .map(|i| NamedPoint {
                    name: format!("p{i}"),
                    x: bbox[0] + 1.0 + i as f64,
                    y: bbox[1] + 1.0,
                })
                .collect(),
        }
    }

    fn full_frame(face: [f64; 4]) -> Vec<Detection> {
        vec![
            det(Category::Face, face),
            det(Category::Head, [face[0] - 2.0, face[1] - 2.0, face[2] + 2.0, face[3] + 2.0]),
            det(Category::Person, [0.0, 0.0, 40.0, 90.0]),
        ]
    }

    #[test]
    fn iou_matches_hand_arithmetic() {
        let a = [0.0, 0.0, 10.0, 10.0];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[20.0, 20.0, 30.0, 30.0]), 0.0);
        let b = [5.0, 5.0, 15.0, 15.0];
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&a, &b), iou(&b, &a));
        // degenerate box scores zero even against itself
        let flat = [3.0, 3.0, 3.0, 9.0];
        assert_eq!(iou(&flat, &flat), 0.0);
        assert_eq!(iou(&a, &flat), 0.0);
    }

    #[test]
    fn filter_boundaries_are_strict() {
        let params = CurationParams {
            tolerance_frames: 2,
            ..CurationParams::default()
        };
        // 100x100 frame; 0.06 of it is 600 px^2; a 30x20 face is exactly 6%
        let exact = [10.0, 10.0, 40.0, 30.0];
        let clip = ClipDetections {
            clip_id: "c0".into(),
            frame_dims: [100, 100],
            frames: vec![full_frame(exact); 4],
        };
        let out = multi_view_filter(&clip, &params);
        assert!(out.accept, "exactly 6% face area is retained: {:?}", out.reason);
        assert_eq!(out.missing_count, 0);
        assert!((out.min_face_area_frac.unwrap() - 0.06).abs() < 1e-12);

        // one frame under the floor
        let small = [10.0, 10.0, 20.0, 20.0]; // 1%
        let mut frames = vec![full_frame(exact); 3];
        frames.push(full_frame(small));
        let clip = ClipDetections {
            clip_id: "c1".into(),
            frame_dims: [100, 100],
            frames,
        };
        assert!(!multi_view_filter(&clip, &params).accept);

        // missing_count == tolerance rejects (strict less-than)
        let mut frames = vec![full_frame(exact); 4];
        frames[1].retain(|d| d.category != Category::Head);
        frames[3].retain(|d| d.category != Category::Person);
        let clip = ClipDetections {
            clip_id: "c2".into(),
            frame_dims: [100, 100],
            frames,
        };
        let out = multi_view_filter(&clip, &params);
        assert!(!out.accept);
        assert_eq!(out.missing_count, 2);

        // one below tolerance passes
        let mut frames = vec![full_frame(exact); 4];
        frames[1].retain(|d| d.category != Category::Head);
        let clip = ClipDetections {
            clip_id: "c3".into(),
            frame_dims: [100, 100],
            frames,
        };
        assert!(multi_view_filter(&clip, &params).accept);

        // empty clip rejects
        let clip = ClipDetections {
            clip_id: "c4".into(),
            frame_dims: [100, 100],
            frames: vec![],
        };
        let out = multi_view_filter(&clip, &params);
        assert!(!out.accept);
        assert_eq!(out.reason.as_deref(), Some("empty clip"));

        // too few keypoints counts as incomplete
        let mut frames = vec![full_frame(exact); 4];
        for _ in 0..3 {
            frames[2][0].keypoints.pop();
        }
        let clip = ClipDetections {
            clip_id: "c5".into(),
            frame_dims: [100, 100],
            frames,
        };
        assert_eq!(multi_view_filter(&clip, &params).missing_count, 1);
    }

    #[test]
    fn stationary_box_keeps_one_id() {
        let b = [10.0, 10.0, 30.0, 30.0];
        let faces = vec![vec![b]; 10];
        let tracks = assign_ids(&faces, 0.1).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].track_id, 1);
        assert!(tracks[0].boxes.iter().all(|x| x.is_some()));
    }

    #[test]
    fn backward_sweep_bridges_a_one_frame_gap() {
        let a = [10.0, 10.0, 30.0, 30.0];
        let b = [60.0, 10.0, 80.0, 30.0];
        let a_back = [12.0, 10.0, 32.0, 30.0]; // IoU 0.8-ish with a
        // two people; one vanishes for a frame and returns near its old spot
        let faces = vec![vec![a, b], vec![b], vec![a_back, b]];
        let tracks = assign_ids(&faces, 0.1).unwrap();
        assert_eq!(tracks.len(), 2);
        let t1 = tracks.iter().find(|t| t.track_id == 1).unwrap();
        assert!(t1.boxes[0].is_some());
        assert!(t1.boxes[1].is_none());
        assert_eq!(t1.boxes[2], Some(a_back), "reappearing box rejoins its track");
        let t2 = tracks.iter().find(|t| t.track_id == 2).unwrap();
        assert!(t2.boxes.iter().all(|x| x.is_some()));
    }

    /// Exhaustive max-total-IoU assignment between consecutive frames;
    /// oracle for the greedy matcher.
    fn exhaustive_ids(faces: &[Vec<[f64; 4]>], threshold: f64) -> Vec<Vec<usize>> {
        let n_frames = faces.len();
        let m = faces.iter().map(|f| f.len()).max().unwrap_or(0);
        let mut ids: Vec<Vec<usize>> = vec![Vec::new(); n_frames];
        ids[0] = (1..=faces[0].len()).collect();
        let mut used: BTreeSet<usize> = ids[0].iter().copied().collect();
        for n in 1..n_frames {
            let cur = &faces[n];
            let prev = &faces[n - 1];
            // enumerate injective partial mappings cur -> prev above the
            // threshold, maximizing total IoU
            let mut best: (f64, Vec<Option<usize>>) = (f64::NEG_INFINITY, vec![None; cur.len()]);
            let mut assign = vec![None; cur.len()];
            fn rec(
                j: usize,
                cur: &[[f64; 4]],
                prev: &[[f64; 4]],
                threshold: f64,
                taken: &mut Vec<bool>,
                assign: &mut Vec<Option<usize>>,
                total: f64,
                best: &mut (f64, Vec<Option<usize>>),
            ) {
                if j == cur.len() {
                    if total > best.0 {
                        *best = (total, assign.clone());
                    }
                    return;
                }
                rec(j + 1, cur, prev, threshold, taken, assign, total, best);
                for i in 0..prev.len() {
                    if taken[i] {
                        continue;
                    }
                    let v = iou(&cur[j], &prev[i]);
                    if v > threshold {
                        taken[i] = true;
                        assign[j] = Some(i);
                        rec(j + 1, cur, prev, threshold, taken, assign, total + v, best);
                        assign[j] = None;
                        taken[i] = false;
                    }
                }
            }
            let mut taken = vec![false; prev.len()];
            rec(0, cur, prev, threshold, &mut taken, &mut assign, 0.0, &mut best);
            let mut frame_ids = Vec::with_capacity(cur.len());
            for j in 0..cur.len() {
                let id = match best.1[j] {
                    Some(i) => ids[n - 1][i],
                    None => {
                        let id = (1..=m)
                            .find(|c| !used.contains(c))
                            .unwrap_or_else(|| (1..=m).find(|c| !frame_ids.contains(c)).unwrap());
                        used.insert(id);
                        id
                    }
                };
                frame_ids.push(id);
            }
            ids[n] = frame_ids;
        }
        ids
    }

    fn ids_of(tracks: &[Track], faces: &[Vec<[f64; 4]>]) -> Vec<Vec<usize>> {
        let n_frames = faces.len();
        let mut ids = vec![Vec::new(); n_frames];
        for (n, frame) in faces.iter().enumerate() {
            for b in frame {
                let t = tracks
                    .iter()
                    .find(|t| t.boxes[n] == Some(*b))
                    .expect("every box belongs to a track");
                ids[n].push(t.track_id);
            }
        }
        ids
    }

    #[test]
    fn greedy_matches_exhaustive_on_smooth_motion() {
        let mut rng = stream(77, "curation-oracle", &[]);
        for case in 0..200u64 {
            let n_obj = 1 + (uniform(&mut rng, 0.0, 3.0) as usize).min(2);
            let n_frames = 2 + (uniform(&mut rng, 0.0, 9.0) as usize).min(8);
            // well-separated starting boxes on a 300-wide lane each
            let mut centers: Vec<(f64, f64)> = (0..n_obj)
                .map(|k| {
                    (
                        150.0 + 300.0 * k as f64 + uniform(&mut rng, -40.0, 40.0),
                        150.0 + uniform(&mut rng, -40.0, 40.0),
                    )
                })
                .collect();
            let size = uniform(&mut rng, 30.0, 60.0);
            let mut faces: Vec<Vec<[f64; 4]>> = Vec::new();
            for _ in 0..n_frames {
                let mut frame = Vec::new();
                for c in centers.iter_mut() {
                    // displacement under a quarter of the box size
                    c.0 += uniform(&mut rng, -0.24, 0.24) * size;
                    c.1 += uniform(&mut rng, -0.24, 0.24) * size;
                    frame.push([
                        c.0 - size / 2.0,
                        c.1 - size / 2.0,
                        c.0 + size / 2.0,
                        c.1 + size / 2.0,
                    ]);
                }
                faces.push(frame);
            }
            let tracks = assign_ids(&faces, 0.1).unwrap();
            let got = ids_of(&tracks, &faces);
            let want = exhaustive_ids(&faces, 0.1);
            assert_eq!(got, want, "case {case}: greedy diverged from the oracle");
        }
    }

    #[test]
    fn curate_stream_isolates_malformed_lines() {
        let good = serde_json::json!({
            "clip_id": "ok-1",
            "frame_dims": [100, 100],
            "frames": [[
                {"category": "face", "bbox": [10.0, 10.0, 40.0, 40.0], "confidence": 0.95,
                 "keypoints": [{"name":"a","x":12.0,"y":12.0},{"name":"b","x":20.0,"y":12.0},{"name":"c","x":16.0,"y":20.0}]},
                {"category": "head", "bbox": [8.0, 8.0, 42.0, 42.0], "confidence": 0.9},
                {"category": "person", "bbox": [0.0, 0.0, 90.0, 99.0], "confidence": 0.9}
            ]]
        });
        let input = format!("{good}\nnot json at all\n{good}\n");
        let mut out = Vec::new();
        let params = CurationParams {
            tolerance_frames: 1,
            ..CurationParams::default()
        };
        let summary = curate(input.as_bytes(), &mut out, &params).unwrap();
        assert_eq!(summary.clips, 3);
        assert_eq!(summary.accepted, 2);
        assert_eq!(summary.errors, 1);
        let lines: Vec<&str> = std::str::from_utf8(&out).unwrap().trim().lines().collect();
        assert_eq!(lines.len(), 3);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["verdict"], "accept");
        assert_eq!(first["stats"]["m"], 1);
        let second: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert!(second["error"].as_str().unwrap().contains("line 2"));

        // empty input: empty output, success
        let mut out = Vec::new();
        let summary = curate(&b""[..], &mut out, &params).unwrap();
        assert_eq!(summary.clips, 0);
        assert!(out.is_empty());
    }

    #[test]
    fn track_ids_never_exceed_m() {
        let mut rng = stream(31, "curation-ids", &[]);
        for _ in 0..50 {
            let n_frames = 1 + (uniform(&mut rng, 0.0, 8.0) as usize);
            let mut faces = Vec::new();
            for _ in 0..n_frames {
                let k = (uniform(&mut rng, 0.0, 4.0) as usize).min(3);
                let mut frame = Vec::new();
                for _ in 0..k {
                    let x = uniform(&mut rng, 0.0, 200.0);
                    let y = uniform(&mut rng, 0.0, 200.0);
                    frame.push([x, y, x + uniform(&mut rng, 5.0, 40.0), y + uniform(&mut rng, 5.0, 40.0)]);
                }
                faces.push(frame);
            }
            let m = faces.iter().map(|f: &Vec<[f64; 4]>| f.len()).max().unwrap();
            let tracks = assign_ids(&faces, 0.1).unwrap();
            for t in &tracks {
                assert!(t.track_id >= 1 && t.track_id <= m.max(1));
            }
        }
    }
}
