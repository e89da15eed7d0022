//! Frame-wise grounding oracle with controllable noise, plus the zero-shot
//! baseline that turns frame scores into a tube without any training.
//!
//! The oracle stands in for a frozen pretrained grounding model: it scores
//! each visible object's appearance compatibility with the caption subject,
//! perturbs boxes and scores per [`NoiseConfig`], and emits deterministic
//! random-projection embeddings of grid cells and tokens. Anything that maps
//! `(clip, caption)` to `(detections, embeddings)` can replace it behind
//! [`FrameGrounder`].

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::caption::{TokenRole, TokenizedCaption};
use crate::error::{Error, Result};
use crate::geom::{
    tube_from_detections, Candidate, FrameBox, ScoredFrameDetections, SpatioTemporalTube,
    TemporalInterval,
};
use crate::seeds;
use crate::synth::SyntheticClip;

/// Failure-mode knobs emulating a frozen detector under domain shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Per-frame probability that the selected box flips to a distractor.
    pub identity_swap_prob: f64,
    /// Std of Gaussian noise on box centers/extents (normalized units).
    pub jitter_std: f64,
    /// Std of Gaussian noise on confidence scores.
    pub score_noise_std: f64,
    /// Score ceiling on frames where the target is absent.
    pub invisible_low_score: f64,
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        NoiseConfig {
            identity_swap_prob: 0.0,
            jitter_std: 0.0,
            score_noise_std: 0.0,
            invisible_low_score: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("identity_swap_prob", self.identity_swap_prob),
            ("jitter_std", self.jitter_std),
            ("score_noise_std", self.score_noise_std),
            ("invisible_low_score", self.invisible_low_score),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.identity_swap_prob > 1.0 {
            return Err(Error::Config("identity_swap_prob > 1".into()));
        }
        Ok(())
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            identity_swap_prob: 0.1,
            jitter_std: 0.02,
            score_noise_std: 0.02,
            invisible_low_score: 0.25,
        }
    }
}

/// Frozen per-frame visual and per-token text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddings {
    pub t_len: usize,
    pub hw: usize,
    pub l_len: usize,
    pub d: usize,
    /// Row-major `(t_len*hw) x d`.
    pub visual: Vec<f64>,
    /// Row-major `l_len x d`.
    pub text: Vec<f64>,
}

impl FrameEmbeddings {
    pub fn validate(&self) -> Result<()> {
        if self.visual.len() != self.t_len * self.hw * self.d
            || self.text.len() != self.l_len * self.d
        {
            return Err(Error::Shape("embedding buffer sizes".into()));
        }
        if !self.visual.iter().chain(self.text.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("frame embeddings".into()));
        }
        Ok(())
    }
}

/// Anything that grounds a caption frame-by-frame.
pub trait FrameGrounder: Send + Sync {
    fn ground(
        &self,
        clip: &SyntheticClip,
        caption: &TokenizedCaption,
        seed: u64,
    ) -> Result<(ScoredFrameDetections, FrameEmbeddings)>;
}

/// The built-in noisy oracle.
#[derive(Debug, Clone)]
pub struct OracleGrounder {
    pub noise: NoiseConfig,
    pub embed_dim: usize,
}

impl FrameGrounder for OracleGrounder {
    fn ground(
        &self,
        clip: &SyntheticClip,
        caption: &TokenizedCaption,
        seed: u64,
    ) -> Result<(ScoredFrameDetections, FrameEmbeddings)> {
        ground_frames(clip, caption, &self.noise, self.embed_dim, seed)
    }
}

const SCORE_BOTH: f64 = 0.95;
const SCORE_ONE: f64 = 0.55;
const SCORE_NONE: f64 = 0.15;

/// Subject (color, shape) indices parsed from caption roles.
fn subject_appearance(clip: &SyntheticClip, caption: &TokenizedCaption) -> Result<(usize, usize)> {
    let lex = &clip.config.lexicon;
    let vocab = clip.vocabulary();
    let mut color = None;
    let mut shape = None;
    for (i, role) in caption.roles.iter().enumerate() {
        let tok = vocab
            .token(caption.tokens[i])
            .ok_or_else(|| Error::InvalidCaption(format!("token {} not in vocab", caption.tokens[i])))?;
        match role {
            TokenRole::Adjective => color = color.or_else(|| lex.colors.iter().position(|c| c == tok)),
            TokenRole::SubjectNoun => shape = lex.shapes.iter().position(|s| s == tok),
            _ => {}
        }
    }
    match (color, shape) {
        (Some(c), Some(s)) => Ok((c, s)),
        _ => Err(Error::InvalidCaption("caption has no subject appearance".into())),
    }
}

/// Per-frame grounding: one candidate per visible object, scored by
/// appearance compatibility with the caption subject, perturbed per `noise`.
/// The selected box per frame is the score argmax. Deterministic in
/// `(clip, caption, noise, seed)`.
pub fn ground_frames(
    clip: &SyntheticClip,
    caption: &TokenizedCaption,
    noise: &NoiseConfig,
    embed_dim: usize,
    seed: u64,
) -> Result<(ScoredFrameDetections, FrameEmbeddings)> {
    noise.validate()?;
    if embed_dim == 0 {
        return Err(Error::Config("embed_dim must be positive".into()));
    }
    let vocab = clip.vocabulary();
    if caption.tokens.iter().any(|&t| vocab.token(t).is_none()) {
        return Err(Error::InvalidCaption("caption token outside clip vocab".into()));
    }
    let (subj_color, subj_shape) = subject_appearance(clip, caption)?;
    let (t_len, h, w, _) = clip.dims();

    // Noise stream is salted by the clip id so one grounder seed covers a
    // whole dataset while projections below stay shared across clips.
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive_indexed(seed, "grounder-noise", clip.id));

    let mut frames: Vec<Vec<Candidate>> = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut cands = Vec::new();
        let mut target_slot: Option<usize> = None;
        for obj in &clip.objects {
            if let Some(true_box) = obj.true_box(t, h, w) {
                let base = if obj.color == subj_color && obj.shape == subj_shape {
                    SCORE_BOTH
                } else if obj.color == subj_color || obj.shape == subj_shape {
                    SCORE_ONE
                } else {
                    SCORE_NONE
                };
                let frame_box = if noise.jitter_std > 0.0 {
                    let (cx, cy) = true_box.center();
                    let jit = |rng: &mut ChaCha12Rng| {
                        let u: f64 = rng.sample(rand_distr::StandardNormal);
                        u * noise.jitter_std
                    };
                    FrameBox::from_center(
                        cx + jit(&mut rng),
                        cy + jit(&mut rng),
                        (true_box.width() + jit(&mut rng)).max(0.0),
                        (true_box.height() + jit(&mut rng)).max(0.0),
                    )
                } else {
                    true_box
                };
                if obj.object_id == 0 {
                    target_slot = Some(cands.len());
                }
                cands.push(Candidate {
                    frame_box,
                    object_id: obj.object_id,
                    score: base,
                });
            }
        }
        if cands.is_empty() {
            // Empty scene: emit a zero-area placeholder so the frame still
            // has a selected box; callers see it as IoU 0.
            cands.push(Candidate {
                frame_box: FrameBox::empty(),
                object_id: u32::MAX,
                score: 0.01,
            });
        }

        // Identity swap: exchange the target's score with a random distractor.
        if let Some(ts) = target_slot {
            if noise.identity_swap_prob > 0.0 && cands.len() > 1 {
                let roll: f64 = rng.gen();
                if roll < noise.identity_swap_prob {
                    let mut other = rng.gen_range(0..cands.len() - 1);
                    if other >= ts {
                        other += 1;
                    }
                    let (a, b) = (cands[ts].score, cands[other].score);
                    cands[ts].score = b;
                    cands[other].score = a;
                }
            }
        }

        // Score noise, then the hard ceiling on target-absent frames.
        for c in cands.iter_mut() {
            if noise.score_noise_std > 0.0 {
                let u: f64 = rng.sample(rand_distr::StandardNormal);
                c.score = (c.score + u * noise.score_noise_std).clamp(0.0, 1.0);
            }
            if target_slot.is_none() {
                c.score = c.score.min(noise.invisible_low_score);
            }
        }
        frames.push(cands);
    }
    let detections = ScoredFrameDetections::new(frames)?;
    let embeddings = embed(clip, caption, embed_dim, seed)?;
    Ok((detections, embeddings))
}

/// Fixed random-projection embeddings: cell content projected by a seeded
/// matrix plus a per-cell positional code; tokens via a seeded table plus a
/// positional code. Projections depend only on `seed`, never on the clip.
fn embed(
    clip: &SyntheticClip,
    caption: &TokenizedCaption,
    d: usize,
    seed: u64,
) -> Result<FrameEmbeddings> {
    let (t_len, h, w, c) = clip.dims();
    let hw = h * w;
    let vocab = clip.vocabulary();
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "grounder-embed"));
    let mut randn = |n: usize, scale: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let u: f64 = rng.sample(rand_distr::StandardNormal);
                u * scale
            })
            .collect()
    };
    let proj = randn(c * d, 1.0 / (c as f64).sqrt()); // [c, d]
    let pos_cell = randn(hw * d, 0.3);
    let token_table = randn((vocab.len() as usize + 1) * d, 1.0);
    let pos_tok = randn(crate::caption::TokenizedCaption::MAX_LEN * d, 0.3);

    let mut visual = vec![0.0f64; t_len * hw * d];
    for t in 0..t_len {
        for cell in 0..hw {
            let (y, x) = (cell / w, cell % w);
            let row = &mut visual[(t * hw + cell) * d..(t * hw + cell + 1) * d];
            row.copy_from_slice(&pos_cell[cell * d..(cell + 1) * d]);
            for ch in 0..c {
                if clip.feature(t, y, x, ch) != 0 {
                    for j in 0..d {
                        row[j] += proj[ch * d + j];
                    }
                }
            }
        }
    }
    let mut text = vec![0.0f64; caption.len() * d];
    for (i, &tok) in caption.tokens.iter().enumerate() {
        let row = &mut text[i * d..(i + 1) * d];
        row.copy_from_slice(&token_table[tok as usize * d..(tok as usize + 1) * d]);
        for j in 0..d {
            row[j] += pos_tok[i * d + j];
        }
    }
    let e = FrameEmbeddings {
        t_len,
        hw,
        l_len: caption.len(),
        d,
        visual,
        text,
    };
    e.validate()?;
    Ok(e)
}

/// MDETR-Zero style baseline: the temporal interval is the longest contiguous
/// run of frames with selected score ≥ threshold (earliest run on ties), the
/// boxes are the selected boxes inside it, and the whole video is the
/// fallback when no frame passes.
pub fn zero_shot_baseline(
    d: &ScoredFrameDetections,
    threshold: f64,
) -> Result<SpatioTemporalTube> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0,1)")));
    }
    let t_len = d.num_frames();
    let scores = d.selected_scores();
    let mut best: Option<(usize, usize)> = None;
    let mut run_start: Option<usize> = None;
    for t in 0..=t_len {
        let passing = t < t_len && scores[t] >= threshold;
        if passing && run_start.is_none() {
            run_start = Some(t);
        }
        if !passing {
            if let Some(s) = run_start.take() {
                let (len, e) = (t - s, t - 1);
                let better = match best {
                    None => true,
                    Some((bs, be)) => len > (be - bs + 1),
                };
                if better {
                    best = Some((s, e));
                }
            }
        }
    }
    let iv = match best {
        Some((s, e)) => TemporalInterval::new(s, e)?,
        None => TemporalInterval::new(0, t_len - 1)?,
    };
    tube_from_detections(d, &iv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_clip, SceneConfig};

    fn noiseless_ground(
        clip: &SyntheticClip,
        seed: u64,
    ) -> (ScoredFrameDetections, FrameEmbeddings) {
        ground_frames(clip, &clip.caption, &NoiseConfig::noiseless(), 16, seed).unwrap()
    }

    #[test]
    fn noiseless_selects_target_box() {
        let cfg = SceneConfig::default();
        for seed in 0..20 {
            let clip = generate_clip(&cfg, seed).unwrap();
            let (d, _) = noiseless_ground(&clip, 7);
            let (h, w) = (cfg.h, cfg.w);
            for t in 0..cfg.t {
                if let Some(tb) = clip.target().true_box(t, h, w) {
                    assert_eq!(d.selected_at(t).frame_box, tb, "seed {seed} frame {t}");
                    assert_eq!(d.selected_at(t).object_id, 0);
                }
            }
        }
    }

    #[test]
    fn forced_swap_selects_distractor() {
        let cfg = SceneConfig {
            num_distractors: 1,
            target_absent_prob: 0.0,
            distractor_action_prob: 0.0,
            ..SceneConfig::default()
        };
        let clip = generate_clip(&cfg, 5).unwrap();
        let noise = NoiseConfig {
            identity_swap_prob: 1.0,
            ..NoiseConfig::noiseless()
        };
        let (d, _) = ground_frames(&clip, &clip.caption, &noise, 16, 3).unwrap();
        for t in 0..cfg.t {
            if clip.objects[1].visible(t) && clip.target().visible(t) {
                assert_eq!(d.selected_at(t).object_id, 1, "frame {t}");
            }
        }
    }

    #[test]
    fn invisible_frames_score_below_visible() {
        let cfg = SceneConfig {
            target_absent_prob: 1.0,
            ..SceneConfig::default()
        };
        let mut seen_invisible = 0;
        for seed in 0..100 {
            let clip = generate_clip(&cfg, seed).unwrap();
            let (d, _) = noiseless_ground(&clip, 11);
            let scores = d.selected_scores();
            let split: (Vec<f64>, Vec<f64>) = (0..cfg.t).map(|t| (t, scores[t])).fold(
                (vec![], vec![]),
                |(mut vis, mut invis), (t, s)| {
                    if clip.target().visible(t) {
                        vis.push(s);
                    } else {
                        invis.push(s);
                    }
                    (vis, invis)
                },
            );
            if !split.1.is_empty() {
                seen_invisible += 1;
                let vis_min = split.0.iter().cloned().fold(f64::MAX, f64::min);
                let invis_max = split.1.iter().cloned().fold(f64::MIN, f64::max);
                assert!(
                    invis_max < vis_min,
                    "seed {seed}: invisible {invis_max} !< visible {vis_min}"
                );
            }
        }
        assert!(seen_invisible > 50, "too few clips with absent frames");
    }

    #[test]
    fn grounding_is_deterministic() {
        let cfg = SceneConfig::default();
        let clip = generate_clip(&cfg, 9).unwrap();
        let noise = NoiseConfig::default();
        let a = ground_frames(&clip, &clip.caption, &noise, 24, 123).unwrap();
        let b = ground_frames(&clip, &clip.caption, &noise, 24, 123).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = ground_frames(&clip, &clip.caption, &noise, 24, 124).unwrap();
        assert!(a.0 != c.0 || a.1 != c.1);
    }

    #[test]
    fn projections_shared_across_clips() {
        // Same seed, different clips: text embedding of a shared token match.
        let cfg = SceneConfig::default();
        let c1 = generate_clip(&cfg, 1).unwrap();
        let c2 = generate_clip(&cfg, 2).unwrap();
        let (_, e1) = noiseless_ground(&c1, 77);
        let (_, e2) = noiseless_ground(&c2, 77);
        // token 0 of both captions is "the"
        assert_eq!(c1.caption.tokens[0], c2.caption.tokens[0]);
        assert_eq!(e1.text[..e1.d], e2.text[..e2.d]);
    }

    #[test]
    fn baseline_runs() {
        let mk = |scores: &[f64]| {
            ScoredFrameDetections::new(
                scores
                    .iter()
                    .map(|&s| {
                        vec![Candidate {
                            frame_box: FrameBox::new(0.0, 0.0, 0.5, 0.5).unwrap(),
                            object_id: 0,
                            score: s,
                        }]
                    })
                    .collect(),
            )
            .unwrap()
        };

        let all_pass = mk(&[1.0; 6]);
        let t = zero_shot_baseline(&all_pass, 0.5).unwrap();
        assert_eq!(t.interval, TemporalInterval::new(0, 5).unwrap());

        let runs = mk(&[0.1, 0.9, 0.9, 0.1, 0.9]);
        let t = zero_shot_baseline(&runs, 0.5).unwrap();
        assert_eq!(t.interval, TemporalInterval::new(1, 2).unwrap());

        let none = mk(&[0.2, 0.3, 0.1, 0.2]);
        let t = zero_shot_baseline(&none, 0.5).unwrap();
        assert_eq!(t.interval, TemporalInterval::new(0, 3).unwrap());

        assert!(zero_shot_baseline(&none, 0.0).is_err());
        assert!(zero_shot_baseline(&none, 1.0).is_err());
    }

    #[test]
    fn embeddings_shapes() {
        let cfg = SceneConfig::default();
        let clip = generate_clip(&cfg, 4).unwrap();
        let (_, e) = noiseless_ground(&clip, 2);
        assert_eq!(e.t_len, cfg.t);
        assert_eq!(e.hw, cfg.h * cfg.w);
        assert_eq!(e.l_len, clip.caption.len());
        assert_eq!(e.d, 16);
        e.validate().unwrap();
    }
}
