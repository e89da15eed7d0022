//! Independent naive re-implementations used to verify the fast paths.
//!
//! Everything here is written as directly as possible — loops, enumeration,
//! Monte-Carlo sampling, central finite differences — and deliberately shares
//! no code with the implementations it checks.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::geom::{FrameBox, SpatioTemporalTube};

/// Monte-Carlo estimate of box IoU by uniform point sampling over the union's
/// bounding rectangle.
pub fn mc_box_iou(a: &FrameBox, b: &FrameBox, samples: usize, seed: u64) -> f64 {
    let x0 = a.x_min.min(b.x_min);
    let y0 = a.y_min.min(b.y_min);
    let x1 = a.x_max.max(b.x_max);
    let y1 = a.y_max.max(b.y_max);
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let inside = |bx: &FrameBox, x: f64, y: f64| {
        x >= bx.x_min && x <= bx.x_max && y >= bx.y_min && y <= bx.y_max
    };
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..samples {
        let x = rng.gen_range(x0..x1);
        let y = rng.gen_range(y0..y1);
        let (ia, ib) = (inside(a, x, y), inside(b, x, y));
        if ia && ib {
            inter += 1;
        }
        if ia || ib {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Direct-loop evaluation of the masked attention formula:
/// `out = (softmax(QK^T / sqrt(d)) ⊙ M) V` where `⊙` multiplies each softmax
/// row elementwise by `m`. Shapes: `q` is `n×d`, `k`/`v` are `mk×d`, `m` is `mk`.
pub fn naive_mask_attention(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    m: &[f64],
) -> Vec<Vec<f64>> {
    let d = q[0].len();
    let n = q.len();
    let mk = k.len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        let mut scores = vec![0.0; mk];
        for j in 0..mk {
            let mut dot = 0.0;
            for c in 0..d {
                dot += q[i][c] * k[j][c];
            }
            scores[j] = dot * scale;
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut exps = vec![0.0; mk];
        let mut denom = 0.0;
        for j in 0..mk {
            exps[j] = (scores[j] - mx).exp();
            denom += exps[j];
        }
        for j in 0..mk {
            let weight = (exps[j] / denom) * m[j];
            for c in 0..d {
                out[i][c] += weight * v[j][c];
            }
        }
    }
    out
}

/// Direct evaluation of the peak-normalized 1D Gaussian over frame centers.
pub fn naive_gaussian_1d(c: f64, w: f64, t_len: usize, alpha: f64) -> Vec<f64> {
    let sigma = alpha * w;
    let raw: Vec<f64> = (0..t_len)
        .map(|t| {
            let pos = (t as f64 + 0.5) / t_len as f64;
            (-((pos - c) * (pos - c)) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let peak = raw.iter().cloned().fold(f64::MIN, f64::max);
    raw.into_iter().map(|v| v / peak).collect()
}

/// Direct evaluation of the peak-normalized separable 2D Gaussian over grid
/// cell centers; returns `h*w` values, row-major (`cell = y*w + x`).
pub fn naive_gaussian_2d(b: &FrameBox, h: usize, w: usize, alpha: f64) -> Vec<f64> {
    let (cx, cy) = b.center();
    let sx = alpha * b.width();
    let sy = alpha * b.height();
    let mut raw = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let px = (x as f64 + 0.5) / w as f64;
            let py = (y as f64 + 0.5) / h as f64;
            let ex = -((px - cx) * (px - cx)) / (2.0 * sx * sx);
            let ey = -((py - cy) * (py - cy)) / (2.0 * sy * sy);
            raw[y * w + x] = (ex + ey).exp();
        }
    }
    let peak = raw.iter().cloned().fold(f64::MIN, f64::max);
    raw.into_iter().map(|v| v / peak).collect()
}

/// Direct evaluation of the 3D mask: product of the 1D temporal factor and a
/// per-frame 2D spatial factor, peak-normalized globally. Returns `t_len`
/// rows of `h*w` values.
pub fn naive_gaussian_3d(
    c: f64,
    w_norm: f64,
    boxes: &[FrameBox],
    h: usize,
    w: usize,
    alpha: f64,
) -> Vec<Vec<f64>> {
    let t_len = boxes.len();
    let mt = naive_gaussian_1d(c, w_norm, t_len, alpha);
    let mut vals: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            naive_gaussian_2d(&boxes[t], h, w, alpha)
                .into_iter()
                .map(|v| v * mt[t])
                .collect::<Vec<f64>>()
        })
        .collect();
    let peak = vals
        .iter()
        .flat_map(|r| r.iter().cloned())
        .fold(f64::MIN, f64::max);
    for row in vals.iter_mut() {
        for v in row.iter_mut() {
            *v /= peak;
        }
    }
    vals
}

/// Central finite differences of `f` at `x`.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = f(&probe);
        probe[i] = orig - eps;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Relative error between an analytic and a finite-difference gradient entry,
/// floored so that near-zero pairs compare absolutely.
pub fn grad_rel_err(analytic: f64, fd: f64) -> f64 {
    let denom = analytic.abs().max(fd.abs());
    if denom < 1e-7 {
        (analytic - fd).abs()
    } else {
        (analytic - fd).abs() / denom
    }
}

/// Brute-force vIoU: enumerate the intersection/union frame sets and average
/// per-frame box IoU over the union size.
pub fn brute_viou(pred: &SpatioTemporalTube, gt: &SpatioTemporalTube) -> f64 {
    let all_frames: Vec<usize> = (0..=pred.interval.end_frame.max(gt.interval.end_frame)).collect();
    let inter: Vec<usize> = all_frames
        .iter()
        .copied()
        .filter(|&t| pred.interval.contains(t) && gt.interval.contains(t))
        .collect();
    let union: Vec<usize> = all_frames
        .iter()
        .copied()
        .filter(|&t| pred.interval.contains(t) || gt.interval.contains(t))
        .collect();
    let mut s = 0.0;
    for &t in &inter {
        s += naive_point_box_iou(pred.box_at(t).unwrap(), gt.box_at(t).unwrap());
    }
    s / union.len() as f64
}

/// Brute-force sIoU: same sum, divided by the ground-truth frame count.
pub fn brute_siou(pred: &SpatioTemporalTube, gt: &SpatioTemporalTube) -> f64 {
    let mut s = 0.0;
    for t in gt.interval.frames() {
        if let (Some(pb), Some(gb)) = (pred.box_at(t), gt.box_at(t)) {
            s += naive_point_box_iou(pb, gb);
        }
    }
    s / gt.interval.len() as f64
}

/// Brute-force tIoU over explicit frame sets.
pub fn brute_tiou(pred: &SpatioTemporalTube, gt: &SpatioTemporalTube) -> f64 {
    let hi = pred.interval.end_frame.max(gt.interval.end_frame);
    let mut inter = 0usize;
    let mut union = 0usize;
    for t in 0..=hi {
        let (a, b) = (pred.interval.contains(t), gt.interval.contains(t));
        if a && b {
            inter += 1;
        }
        if a || b {
            union += 1;
        }
    }
    inter as f64 / union as f64
}

/// Independent corner-arithmetic box IoU (kept separate from `geom::box_iou`).
pub fn naive_point_box_iou(a: &FrameBox, b: &FrameBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min);
    let area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

// ---------------------------------------------------------------------------
// Event re-detection from object trajectories
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum ParsedEvent {
    MoveDir((i32, i32)),
    Stops,
    Approaches { color: usize, shape: usize },
}

/// Re-detects the captioned event from raw object trajectories and verifies
/// that exactly one object satisfies (subject appearance ∧ event), that this
/// object is the clip's target, and that its detected interval and boxes
/// reproduce the stored ground-truth tube exactly.
pub fn check_clip_event(clip: &crate::synth::SyntheticClip) -> crate::error::Result<()> {
    use crate::caption::TokenRole;
    use crate::error::Error;

    let lex = &clip.config.lexicon;
    let vocab = clip.vocabulary();
    let word = |id: u32| vocab.token(id).unwrap_or("<?>").to_string();

    // Parse the caption from roles + word lists.
    let cap = &clip.caption;
    let mut subject_color = None;
    let mut subject_shape = None;
    let mut verb = None;
    let mut predicate_nouns = Vec::new();
    for (i, role) in cap.roles.iter().enumerate() {
        let wtok = word(cap.tokens[i]);
        match role {
            TokenRole::Adjective => {
                subject_color = lex.colors.iter().position(|c| *c == wtok);
            }
            TokenRole::SubjectNoun => {
                subject_shape = lex.shapes.iter().position(|s| *s == wtok);
            }
            TokenRole::PredicateVerb => verb = Some(wtok),
            TokenRole::PredicateNoun => predicate_nouns.push(wtok),
            TokenRole::Other => {}
        }
    }
    let subject_color = subject_color.ok_or_else(|| Error::Other("no subject color".into()))?;
    let subject_shape = subject_shape.ok_or_else(|| Error::Other("no subject shape".into()))?;
    let verb = verb.ok_or_else(|| Error::Other("no verb".into()))?;

    let event = if lex.move_verbs.contains(&verb) {
        let dir_word = predicate_nouns
            .iter()
            .find(|wtok| lex.directions.contains(wtok))
            .ok_or_else(|| Error::Other("movement caption without direction".into()))?;
        let delta = match lex.directions.iter().position(|d| d == dir_word).unwrap() {
            0 => (-1, 0),
            1 => (1, 0),
            2 => (0, -1),
            _ => (0, 1),
        };
        ParsedEvent::MoveDir(delta)
    } else if lex.stop_verbs.contains(&verb) {
        ParsedEvent::Stops
    } else if lex.approach_verbs.contains(&verb) {
        let color = predicate_nouns
            .iter()
            .find_map(|wtok| lex.colors.iter().position(|c| c == wtok))
            .ok_or_else(|| Error::Other("approach caption without color".into()))?;
        let shape = predicate_nouns
            .iter()
            .find_map(|wtok| lex.shapes.iter().position(|s| s == wtok))
            .ok_or_else(|| Error::Other("approach caption without shape".into()))?;
        ParsedEvent::Approaches { color, shape }
    } else {
        return Err(Error::Other(format!("unknown verb {verb:?}")));
    };

    // Per-object event detection.
    let t_len = clip.config.t;
    let detect = |obj: &crate::synth::ObjectTrack| -> Vec<(usize, usize)> {
        // Transition t covers frames t -> t+1; None breaks every run.
        let trans: Vec<Option<(i32, i32)>> = (0..t_len - 1)
            .map(|t| match (obj.states[t], obj.states[t + 1]) {
                (Some(a), Some(b)) => Some((b.0 - a.0, b.1 - a.1)),
                _ => None,
            })
            .collect();
        match &event {
            ParsedEvent::MoveDir(d) => maximal_runs(&trans, |x| x == Some(*d)),
            ParsedEvent::Stops => {
                // A stop needs observed motion immediately before the halt.
                maximal_runs(&trans, |x| x == Some((0, 0)))
                    .into_iter()
                    .filter(|&(a, _)| a > 0 && matches!(trans[a - 1], Some(dlt) if dlt != (0, 0)))
                    .collect()
            }
            ParsedEvent::Approaches { color, shape } => {
                let refs: Vec<&crate::synth::ObjectTrack> = clip
                    .objects
                    .iter()
                    .filter(|o| o.color == *color && o.shape == *shape)
                    .collect();
                if refs.len() != 1 {
                    return Vec::new();
                }
                let r = refs[0];
                let shrink: Vec<Option<bool>> = (0..t_len - 1)
                    .map(|t| {
                        match (obj.states[t], obj.states[t + 1], r.states[t], r.states[t + 1]) {
                            (Some(a0), Some(a1), Some(b0), Some(b1)) => {
                                let d0 = (a0.0 - b0.0).abs() + (a0.1 - b0.1).abs();
                                let d1 = (a1.0 - b1.0).abs() + (a1.1 - b1.1).abs();
                                Some(d1 < d0)
                            }
                            _ => None,
                        }
                    })
                    .collect();
                maximal_runs(&shrink, |x| x == Some(true))
            }
        }
    };

    // Uniqueness of (appearance ∧ event).
    let mut satisfying = Vec::new();
    for (i, obj) in clip.objects.iter().enumerate() {
        let appearance = obj.color == subject_color && obj.shape == subject_shape;
        let runs = detect(obj);
        if appearance && !runs.is_empty() {
            satisfying.push((i, runs));
        }
    }
    if satisfying.len() != 1 {
        return Err(Error::Other(format!(
            "{} objects satisfy appearance ∧ event",
            satisfying.len()
        )));
    }
    let (idx, runs) = &satisfying[0];
    if *idx != 0 {
        return Err(Error::Other(format!("satisfying object {idx} is not the target")));
    }
    if runs.len() != 1 {
        return Err(Error::Other(format!(
            "target performs the event {} times",
            runs.len()
        )));
    }
    // Transition run [a, b] covers frames [a, b+1].
    let (a, b) = runs[0];
    let detected = crate::geom::TemporalInterval::new(a, b + 1)?;
    if detected != clip.gt_tube.interval {
        return Err(Error::Other(format!(
            "detected interval {detected:?} != gt {:?}",
            clip.gt_tube.interval
        )));
    }
    // Ground-truth boxes must coincide with the target's true boxes.
    let (h, w) = (clip.config.h, clip.config.w);
    for t in clip.gt_tube.interval.frames() {
        let truth = clip.objects[0]
            .true_box(t, h, w)
            .ok_or_else(|| Error::Other(format!("target absent inside gt at {t}")))?;
        let stored = *clip.gt_tube.box_at(t).unwrap();
        if truth != stored {
            return Err(Error::Other(format!("gt box mismatch at frame {t}")));
        }
    }
    Ok(())
}

/// Maximal runs of indices where `pred` holds, as inclusive (start, end).
fn maximal_runs<T: Copy>(xs: &[T], pred: impl Fn(T) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &x) in xs.iter().enumerate() {
        if pred(x) {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            out.push((s, i - 1));
        }
    }
    if let Some(s) = start {
        out.push((s, xs.len() - 1));
    }
    out
}

// ---------------------------------------------------------------------------
// Naive loss evaluations (hand loops over the printed formulas)
// ---------------------------------------------------------------------------

/// Mean cross-entropy of probability rows against target ids.
pub fn naive_cross_entropy(dist: &[Vec<f64>], targets: &[u32]) -> f64 {
    let mut s = 0.0;
    for (row, &t) in dist.iter().zip(targets.iter()) {
        s += -(row[t as usize].ln());
    }
    s / dist.len() as f64
}

/// Sum of the three per-strategy mean cross-entropies.
pub fn naive_reconstruction_loss(
    d_s: (&[Vec<f64>], &[u32]),
    d_t: (&[Vec<f64>], &[u32]),
    d_g: (&[Vec<f64>], &[u32]),
) -> f64 {
    naive_cross_entropy(d_s.0, d_s.1) + naive_cross_entropy(d_t.0, d_t.1)
        + naive_cross_entropy(d_g.0, d_g.1)
}

/// Hinge sum over positives (excluding k*) and all negatives.
pub fn naive_inter_proposal(ce_pos: &[f64], ce_neg: &[f64], b1: f64, b2: f64) -> f64 {
    let k_star = ce_pos
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    let mut s = 0.0;
    for (i, &ce) in ce_pos.iter().enumerate() {
        if i != k_star {
            s += (ce_pos[k_star] - ce + b1).max(0.0);
        }
    }
    for &ce in ce_neg {
        s += (ce_pos[k_star] - ce + b2).max(0.0);
    }
    s
}

/// Two hinges against the hard and easy negatives.
pub fn naive_intra_video(ce_pos: f64, ce_hard: f64, ce_easy: f64, b3: f64, b4: f64) -> f64 {
    (ce_pos - ce_hard + b3).max(0.0) + (ce_pos - ce_easy + b4).max(0.0)
}

/// Soft IoU of two continuous `(center, width)` intervals.
pub fn naive_soft_interval_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (a0, a1) = (a.0 - a.1 / 2.0, a.0 + a.1 / 2.0);
    let (b0, b1) = (b.0 - b.1 / 2.0, b.0 + b.1 / 2.0);
    let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
    let union = (a1 - a0) + (b1 - b0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Mean pairwise soft IoU among positives plus mean over (pos, neg) pairs.
pub fn naive_space_to_time(pos: &[(f64, f64)], neg: &[(f64, f64)]) -> f64 {
    let mut pp = 0.0;
    let mut n_pp = 0usize;
    for i in 0..pos.len() {
        for j in (i + 1)..pos.len() {
            pp += naive_soft_interval_iou(pos[i], pos[j]);
            n_pp += 1;
        }
    }
    let mut pn = 0.0;
    let mut n_pn = 0usize;
    for &p in pos {
        for &n in neg {
            pn += naive_soft_interval_iou(p, n);
            n_pn += 1;
        }
    }
    let a = if n_pp == 0 { 0.0 } else { pp / n_pp as f64 };
    let b = if n_pn == 0 { 0.0 } else { pn / n_pn as f64 };
    a + b
}

/// Mean adjacent-frame IoU hinge inside each positive interval. A frame is
/// inside `(c, w)` when its center `(t+0.5)/T` lies within `[c-w/2, c+w/2]`.
pub fn naive_time_to_space(
    boxes: &[FrameBox],
    positives: &[(f64, f64)],
    tau: f64,
) -> f64 {
    let t_len = boxes.len();
    let mut s = 0.0;
    let mut pairs = 0usize;
    for &(c, w) in positives {
        let inside: Vec<usize> = (0..t_len)
            .filter(|&t| {
                let pos = (t as f64 + 0.5) / t_len as f64;
                pos >= c - w / 2.0 && pos <= c + w / 2.0
            })
            .collect();
        for win in inside.windows(2) {
            if win[1] == win[0] + 1 {
                s += (tau - naive_point_box_iou(&boxes[win[0]], &boxes[win[1]])).max(0.0);
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        s / pairs as f64
    }
}

/// Random-tube Monte-Carlo estimate of mean vIoU against a set of ground
/// truths: intervals sampled uniformly over valid (start, end) pairs, boxes
/// taken from the provided per-clip candidates.
pub fn random_tube_mean_viou(
    gts: &[SpatioTemporalTube],
    boxes_per_clip: &[Vec<FrameBox>],
    t_len: usize,
    samples_per_clip: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for (gt, boxes) in gts.iter().zip(boxes_per_clip.iter()) {
        for _ in 0..samples_per_clip {
            let s = rng.gen_range(0..t_len);
            let e = rng.gen_range(s..t_len);
            let iv = crate::geom::TemporalInterval::new(s, e).unwrap();
            let tube = SpatioTemporalTube::new(iv, iv.frames().map(|t| boxes[t]).collect())
                .unwrap();
            total += brute_viou(&tube, gt);
            count += 1;
        }
    }
    total / count as f64
}
