//! Procedural toy clips: colored shapes moving on a grid, templated captions
//! with role tags, and ground-truth tubes.
//!
//! Clips are symbolic rather than rendered: the feature grid stores one-hot
//! color/shape channels plus occupancy per cell. Exactly one object (the
//! target) matches the caption subject's color+shape, and it performs the
//! captioned event exactly within the ground-truth interval. Distractors may
//! share one appearance attribute or mimic the action, never both.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::Engine;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::caption::{TokenRole, TokenizedCaption, Vocabulary};
use crate::error::{Error, Result};
use crate::geom::{FrameBox, SpatioTemporalTube, TemporalInterval};

/// Objects occupy a square footprint of this many cells per side.
pub const FOOTPRINT: i32 = 2;

/// Dataset file schema version.
pub const SCHEMA_VERSION: &str = "tubermc-synth/1";

/// Word lists backing the caption grammar. The default lexicon has exactly
/// 50 tokens; `[MASK]` is reserved separately by [`Vocabulary`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    pub move_verbs: Vec<String>,
    pub stop_verbs: Vec<String>,
    pub approach_verbs: Vec<String>,
    pub directions: Vec<String>,
    pub function_words: Vec<String>,
    pub fillers: Vec<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Lexicon {
            colors: s(&[
                "red", "blue", "green", "yellow", "purple", "orange", "cyan", "magenta",
            ]),
            shapes: s(&[
                "square", "circle", "triangle", "diamond", "star", "cross", "ring", "hexagon",
            ]),
            move_verbs: s(&["moves", "slides"]),
            stop_verbs: s(&["stops", "halts"]),
            approach_verbs: s(&["approaches", "nears"]),
            directions: s(&["left", "right", "up", "down"]),
            function_words: s(&["the", "a", "toward", "near"]),
            fillers: s(&[
                "then", "while", "it", "and", "small", "big", "bright", "dark", "pale", "deep",
                "frame", "scene", "slowly", "quickly", "before", "after", "over", "under",
                "above", "below",
            ]),
        }
    }
}

impl Lexicon {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let mut tokens = Vec::new();
        for list in [
            &self.colors,
            &self.shapes,
            &self.move_verbs,
            &self.stop_verbs,
            &self.approach_verbs,
            &self.directions,
            &self.function_words,
            &self.fillers,
        ] {
            tokens.extend(list.iter().cloned());
        }
        Vocabulary::new(tokens)
    }
}

/// Clip generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Frames per clip.
    pub t: usize,
    /// Grid height in cells.
    pub h: usize,
    /// Grid width in cells.
    pub w: usize,
    pub num_distractors: usize,
    /// Event length as a fraction of `t`: `(lo, hi]`.
    pub event_length_range: (f64, f64),
    /// Base seed; per-clip seeds are passed to [`generate_clip`] explicitly.
    pub seed: u64,
    /// Probability that the target is absent for a short run at a clip edge.
    pub target_absent_prob: f64,
    /// Probability that one distractor mimics the captioned action at another time.
    pub distractor_action_prob: f64,
    pub lexicon: Lexicon,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            t: 16,
            h: 8,
            w: 8,
            num_distractors: 2,
            event_length_range: (0.25, 0.6),
            seed: 0,
            target_absent_prob: 0.5,
            distractor_action_prob: 0.5,
            lexicon: Lexicon::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t < 8 {
            return Err(Error::Config(format!("t = {} < 8", self.t)));
        }
        if self.h < 8 || self.w < 8 {
            return Err(Error::Config(format!("grid {}x{} below 8x8", self.h, self.w)));
        }
        let (lo, hi) = self.event_length_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "event_length_range ({lo},{hi}) not within (0,1]"
            )));
        }
        let combos = self.lexicon.colors.len() * self.lexicon.shapes.len();
        if self.num_distractors + 1 > combos {
            return Err(Error::Infeasible(format!(
                "{} objects need more appearance combos than the lexicon's {combos}",
                self.num_distractors + 1
            )));
        }
        // Rough packing bound: every object needs a footprint plus margin.
        let per_object = ((FOOTPRINT + 1) * (FOOTPRINT + 1)) as usize;
        if (self.num_distractors + 1) * per_object > self.h * self.w {
            return Err(Error::Infeasible(format!(
                "{} objects cannot be placed on a {}x{} grid",
                self.num_distractors + 1,
                self.h,
                self.w
            )));
        }
        if self.lexicon.directions.len() != 4 {
            return Err(Error::Config("lexicon needs the 4 directions".into()));
        }
        if self.lexicon.move_verbs.is_empty()
            || self.lexicon.stop_verbs.is_empty()
            || self.lexicon.approach_verbs.is_empty()
        {
            return Err(Error::Config("lexicon needs verbs for every event kind".into()));
        }
        self.lexicon.vocabulary()?;
        Ok(())
    }

    /// Feature channels: one-hot color, one-hot shape, occupancy.
    pub fn channels(&self) -> usize {
        self.lexicon.colors.len() + self.lexicon.shapes.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub fn delta(&self) -> (i32, i32) {
        match self {
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
        }
    }

    pub fn index(&self) -> usize {
        match self {
            Direction::Left => 0,
            Direction::Right => 1,
            Direction::Up => 2,
            Direction::Down => 3,
        }
    }

    pub fn from_index(i: usize) -> Direction {
        [
            Direction::Left,
            Direction::Right,
            Direction::Up,
            Direction::Down,
        ][i]
    }
}

/// Per-object trajectory: appearance plus a per-frame top-left cell (None
/// while the object is out of the scene).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub object_id: u32,
    pub color: usize,
    pub shape: usize,
    pub states: Vec<Option<(i32, i32)>>,
}

impl ObjectTrack {
    pub fn visible(&self, t: usize) -> bool {
        self.states[t].is_some()
    }

    /// Normalized true box at frame `t`, if visible.
    pub fn true_box(&self, t: usize, h: usize, w: usize) -> Option<FrameBox> {
        self.states[t].map(|(x, y)| cell_box(x, y, h, w))
    }
}

pub fn cell_box(x: i32, y: i32, h: usize, w: usize) -> FrameBox {
    FrameBox {
        x_min: x as f64 / w as f64,
        y_min: y as f64 / h as f64,
        x_max: (x + FOOTPRINT) as f64 / w as f64,
        y_max: (y + FOOTPRINT) as f64 / h as f64,
    }
}

/// A generated clip: symbolic feature grid, object tracks, caption, and the
/// evaluation-only ground-truth tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClip {
    pub id: u64,
    pub config: SceneConfig,
    /// Flat `t*h*w*c` grid of 0/1 values, index `((t*h + y)*w + x)*c + ch`.
    pub features: Vec<u8>,
    pub objects: Vec<ObjectTrack>,
    pub caption: TokenizedCaption,
    /// Ground truth. Training code must never read this; only the evaluator
    /// and test oracles may.
    pub gt_tube: SpatioTemporalTube,
}

impl SyntheticClip {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (
            self.config.t,
            self.config.h,
            self.config.w,
            self.config.channels(),
        )
    }

    pub fn feature(&self, t: usize, y: usize, x: usize, ch: usize) -> u8 {
        let (_, h, w, c) = self.dims();
        self.features[((t * h + y) * w + x) * c + ch]
    }

    pub fn vocabulary(&self) -> Vocabulary {
        self.config
            .lexicon
            .vocabulary()
            .expect("validated at generation")
    }

    /// The target is always object 0.
    pub fn target(&self) -> &ObjectTrack {
        &self.objects[0]
    }
}

#[derive(Debug, Clone, Copy)]
enum EventKind {
    MoveDir(Direction),
    Stops,
    /// Approaches the distractor at object index 1.
    Approaches,
}

fn overlaps(a: (i32, i32), b: (i32, i32)) -> bool {
    (a.0 - b.0).abs() < FOOTPRINT && (a.1 - b.1).abs() < FOOTPRINT
}

fn in_bounds(p: (i32, i32), h: usize, w: usize) -> bool {
    p.0 >= 0 && p.1 >= 0 && p.0 + FOOTPRINT <= w as i32 && p.1 + FOOTPRINT <= h as i32
}

/// Stationary-then-move-then-stationary trajectory for directional motion.
fn move_dir_track(
    p0: (i32, i32),
    d: Direction,
    s: usize,
    e: usize,
    t_len: usize,
) -> Vec<(i32, i32)> {
    let (dx, dy) = d.delta();
    let mut pos = p0;
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        out.push(pos);
        if t >= s && t < e {
            pos = (pos.0 + dx, pos.1 + dy);
        }
    }
    out
}

/// Horizontal zigzag starting right-first from `x`: x, x+1, x, x+1, ...
fn zigzag_x(x: i32, step: usize) -> i32 {
    if step % 2 == 0 {
        x
    } else {
        x + 1
    }
}

fn rng_range(rng: &mut ChaCha12Rng, lo: usize, hi_incl: usize) -> usize {
    if hi_incl <= lo {
        lo
    } else {
        rng.gen_range(lo..=hi_incl)
    }
}

/// Deterministic clip generation. Same `(cfg, seed)` gives a bit-identical
/// clip; infeasible configurations fail with a diagnostic.
pub fn generate_clip(cfg: &SceneConfig, seed: u64) -> Result<SyntheticClip> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for _attempt in 0..300 {
        if let Some(clip) = try_generate(cfg, seed, &mut rng) {
            return Ok(clip);
        }
    }
    Err(Error::Infeasible(format!(
        "could not place a valid scene in 300 attempts (cfg {}x{}x{}, {} distractors)",
        cfg.t, cfg.h, cfg.w, cfg.num_distractors
    )))
}

#[allow(clippy::too_many_lines)]
fn try_generate(cfg: &SceneConfig, seed: u64, rng: &mut ChaCha12Rng) -> Option<SyntheticClip> {
    let lex = &cfg.lexicon;
    let (t_len, h, w) = (cfg.t, cfg.h, cfg.w);
    let n_colors = lex.colors.len();
    let n_shapes = lex.shapes.len();

    // Target appearance; the (color, shape) pair is unique in the clip.
    let target_color = rng.gen_range(0..n_colors);
    let target_shape = rng.gen_range(0..n_shapes);

    // Event kind. Approaching needs a reference distractor.
    let kind_roll: f64 = rng.gen();
    let kind = if cfg.num_distractors >= 1 && kind_roll < 0.30 {
        EventKind::Approaches
    } else if kind_roll < 0.60 {
        EventKind::Stops
    } else {
        EventKind::MoveDir(Direction::from_index(rng.gen_range(0..4)))
    };

    // Event length within the configured range, capped by what the grid and
    // event kind admit.
    let lo = ((cfg.event_length_range.0 * t_len as f64).ceil() as usize).max(2);
    let hi_range = (cfg.event_length_range.1 * t_len as f64).floor() as usize;
    let cap = match kind {
        EventKind::MoveDir(d) => {
            let axis = match d {
                Direction::Left | Direction::Right => w,
                Direction::Up | Direction::Down => h,
            };
            axis - FOOTPRINT as usize + 1
        }
        EventKind::Stops => t_len - 2,
        // L1 travel is bounded by the grid diameter minus the standoff.
        EventKind::Approaches => (h + w - 2 * FOOTPRINT as usize).saturating_sub(3) + 1,
    };
    let hi = hi_range.min(cap);
    if hi < lo {
        return None;
    }
    let len = rng_range(rng, lo, hi);
    // Keep a margin frame on both sides when the clip allows it.
    let (s_min, s_max) = if t_len >= len + 2 {
        (1, t_len - len - 1)
    } else {
        (0, t_len - len)
    };
    let s = rng_range(rng, s_min, s_max);
    let e = s + len - 1;
    let steps = len - 1;

    // Target trajectory; approach events also fix the reference position.
    let mut ref_pos: Option<(i32, i32)> = None;
    let target_positions: Vec<(i32, i32)> = match kind {
        EventKind::MoveDir(d) => {
            let (dx, dy) = d.delta();
            let x_lo = if dx < 0 { steps as i32 } else { 0 };
            let x_hi = w as i32 - FOOTPRINT - if dx > 0 { steps as i32 } else { 0 };
            let y_lo = if dy < 0 { steps as i32 } else { 0 };
            let y_hi = h as i32 - FOOTPRINT - if dy > 0 { steps as i32 } else { 0 };
            if x_hi < x_lo || y_hi < y_lo {
                return None;
            }
            let p0 = (rng.gen_range(x_lo..=x_hi), rng.gen_range(y_lo..=y_hi));
            move_dir_track(p0, d, s, e, t_len)
        }
        EventKind::Stops => {
            // Zigzag horizontally before s, hold during [s, e], zigzag after.
            let x0 = rng.gen_range(0..=(w as i32 - FOOTPRINT - 1));
            let y0 = rng.gen_range(0..=(h as i32 - FOOTPRINT));
            (0..t_len)
                .map(|t| {
                    let x = if t <= s {
                        zigzag_x(x0, t)
                    } else if t <= e {
                        zigzag_x(x0, s)
                    } else {
                        zigzag_x(x0, s + (t - e))
                    };
                    (x, y0)
                })
                .collect()
        }
        EventKind::Approaches => {
            let p0 = (
                rng.gen_range(0..=(w as i32 - FOOTPRINT)),
                rng.gen_range(0..=(h as i32 - FOOTPRINT)),
            );
            // Reference placed exactly `steps + standoff` away (L1) so the
            // distance shrinks by one cell per event transition and never
            // reaches the overlap zone.
            let standoff = 3i32;
            let want = steps as i32 + standoff;
            let mut candidates = Vec::new();
            for rx in 0..=(w as i32 - FOOTPRINT) {
                for ry in 0..=(h as i32 - FOOTPRINT) {
                    if (rx - p0.0).abs() + (ry - p0.1).abs() == want {
                        candidates.push((rx, ry));
                    }
                }
            }
            if candidates.is_empty() {
                return None;
            }
            let rp = candidates[rng.gen_range(0..candidates.len())];
            ref_pos = Some(rp);
            let mut out = Vec::with_capacity(t_len);
            let mut pos = p0;
            for t in 0..t_len {
                out.push(pos);
                if t >= s && t < e {
                    // Reduce |dx| first, then |dy|: strictly shrinks L1 distance.
                    if pos.0 != rp.0 {
                        pos.0 += (rp.0 - pos.0).signum();
                    } else {
                        pos.1 += (rp.1 - pos.1).signum();
                    }
                }
            }
            out
        }
    };
    if target_positions.iter().any(|&p| !in_bounds(p, h, w)) {
        return None;
    }

    // Distractor appearances: share color or shape with the target, or
    // neither, but never the full pair; pairs are unique across objects so
    // an approach reference is identifiable by appearance.
    let mut used_pairs = vec![(target_color, target_shape)];
    let mut distractor_appearance = Vec::new();
    for _ in 0..cfg.num_distractors {
        let mut found = None;
        for _ in 0..50 {
            let mode = rng.gen_range(0..3);
            let (c, sh) = match mode {
                0 => (target_color, rng.gen_range(0..n_shapes)),
                1 => (rng.gen_range(0..n_colors), target_shape),
                _ => (rng.gen_range(0..n_colors), rng.gen_range(0..n_shapes)),
            };
            if !used_pairs.contains(&(c, sh)) {
                found = Some((c, sh));
                break;
            }
        }
        match found {
            Some(p) => {
                used_pairs.push(p);
                distractor_appearance.push(p);
            }
            None => return None,
        }
    }

    // Distractor trajectories: stationary, except an optional action mimic.
    let mut tracks: Vec<Vec<(i32, i32)>> = vec![target_positions];
    let mimic_idx = if cfg.num_distractors >= 1
        && ref_pos.is_none()
        && rng.gen::<f64>() < cfg.distractor_action_prob
    {
        Some(cfg.num_distractors - 1)
    } else {
        None
    };
    for di in 0..cfg.num_distractors {
        let cand: Option<Vec<(i32, i32)>> = if di == 0 && ref_pos.is_some() {
            let rp = ref_pos.unwrap();
            let cand = vec![rp; t_len];
            let clear = tracks
                .iter()
                .all(|other| (0..t_len).all(|t| !overlaps(cand[t], other[t])));
            clear.then_some(cand)
        } else if Some(di) == mimic_idx {
            let path: Box<dyn Fn((i32, i32)) -> Vec<(i32, i32)>> = match kind {
                EventKind::MoveDir(d) => {
                    let s2 = rng_range(rng, 0, t_len - len);
                    let e2 = s2 + len - 1;
                    Box::new(move |p| move_dir_track(p, d, s2, e2, t_len))
                }
                EventKind::Stops => {
                    let s2 = rng_range(rng, 1, (t_len - len).saturating_sub(1).max(1));
                    let e2 = (s2 + len - 1).min(t_len - 2);
                    Box::new(move |p: (i32, i32)| {
                        (0..t_len)
                            .map(|t| {
                                let x = if t <= s2 {
                                    zigzag_x(p.0, t)
                                } else if t <= e2 {
                                    zigzag_x(p.0, s2)
                                } else {
                                    zigzag_x(p.0, s2 + (t - e2))
                                };
                                (x, p.1)
                            })
                            .collect()
                    })
                }
                EventKind::Approaches => Box::new(move |p| vec![p; t_len]),
            };
            place_track(rng, &tracks, h, w, t_len, path.as_ref())
        } else {
            place_track(rng, &tracks, h, w, t_len, &|p| vec![p; t_len])
        };
        match cand {
            Some(c) => tracks.push(c),
            None => return None,
        }
    }

    // Target absence at a clip edge, never overlapping the event and always
    // leaving the frame just before a stop's onset visible.
    let mut target_states: Vec<Option<(i32, i32)>> = tracks[0].iter().map(|&p| Some(p)).collect();
    if rng.gen::<f64>() < cfg.target_absent_prob {
        let at_start = rng.gen::<bool>();
        let head_room = s.saturating_sub(1);
        let tail_room = (t_len - 1).saturating_sub(e);
        if at_start && head_room > 0 {
            let k = rng_range(rng, 1, head_room.min(3));
            for st in target_states.iter_mut().take(k) {
                *st = None;
            }
        } else if !at_start && tail_room > 1 {
            let k = rng_range(rng, 1, (tail_room - 1).min(3));
            for st in target_states.iter_mut().skip(t_len - k) {
                *st = None;
            }
        }
    }

    // Assemble objects.
    let mut objects = vec![ObjectTrack {
        object_id: 0,
        color: target_color,
        shape: target_shape,
        states: target_states,
    }];
    for (di, &(c, sh)) in distractor_appearance.iter().enumerate() {
        objects.push(ObjectTrack {
            object_id: di as u32 + 1,
            color: c,
            shape: sh,
            states: tracks[di + 1].iter().map(|&p| Some(p)).collect(),
        });
    }

    // Caption.
    let vocab = lex.vocabulary().ok()?;
    let id = |s: &str| vocab.id(s).expect("lexicon token in vocab");
    let the = id(&lex.function_words[0]);
    let mut tokens = vec![
        the,
        id(&lex.colors[target_color]),
        id(&lex.shapes[target_shape]),
    ];
    let mut roles = vec![
        TokenRole::Other,
        TokenRole::Adjective,
        TokenRole::SubjectNoun,
    ];
    match kind {
        EventKind::MoveDir(d) => {
            let verb = &lex.move_verbs[rng.gen_range(0..lex.move_verbs.len())];
            tokens.push(id(verb));
            roles.push(TokenRole::PredicateVerb);
            tokens.push(id(&lex.directions[d.index()]));
            roles.push(TokenRole::PredicateNoun);
        }
        EventKind::Stops => {
            let verb = &lex.stop_verbs[rng.gen_range(0..lex.stop_verbs.len())];
            tokens.push(id(verb));
            roles.push(TokenRole::PredicateVerb);
        }
        EventKind::Approaches => {
            let verb = &lex.approach_verbs[rng.gen_range(0..lex.approach_verbs.len())];
            tokens.push(id(verb));
            roles.push(TokenRole::PredicateVerb);
            tokens.push(the);
            roles.push(TokenRole::Other);
            let r = &objects[1];
            tokens.push(id(&lex.colors[r.color]));
            roles.push(TokenRole::PredicateNoun);
            tokens.push(id(&lex.shapes[r.shape]));
            roles.push(TokenRole::PredicateNoun);
        }
    }
    let caption = TokenizedCaption::new(tokens, roles, 2).ok()?;

    // Ground-truth tube over the event interval.
    let interval = TemporalInterval::new(s, e).ok()?;
    let boxes: Vec<FrameBox> = interval
        .frames()
        .map(|t| objects[0].true_box(t, h, w).expect("target visible in event"))
        .collect();
    let gt_tube = SpatioTemporalTube::new(interval, boxes).ok()?;

    // Feature grid.
    let c = cfg.channels();
    let mut features = vec![0u8; t_len * h * w * c];
    for obj in &objects {
        for (t, st) in obj.states.iter().enumerate() {
            if let Some((x, y)) = st {
                for dy in 0..FOOTPRINT {
                    for dx in 0..FOOTPRINT {
                        let (cx, cy) = ((x + dx) as usize, (y + dy) as usize);
                        let base = ((t * h + cy) * w + cx) * c;
                        features[base + obj.color] = 1;
                        features[base + n_colors + obj.shape] = 1;
                        features[base + n_colors + n_shapes] = 1;
                    }
                }
            }
        }
    }

    Some(SyntheticClip {
        id: seed,
        config: cfg.clone(),
        features,
        objects,
        caption,
        gt_tube,
    })
}

fn place_track(
    rng: &mut ChaCha12Rng,
    taken: &[Vec<(i32, i32)>],
    h: usize,
    w: usize,
    t_len: usize,
    path: &dyn Fn((i32, i32)) -> Vec<(i32, i32)>,
) -> Option<Vec<(i32, i32)>> {
    'outer: for _ in 0..80 {
        let p = (
            rng.gen_range(0..=(w as i32 - FOOTPRINT)),
            rng.gen_range(0..=(h as i32 - FOOTPRINT)),
        );
        let cand = path(p);
        if cand.iter().any(|&q| !in_bounds(q, h, w)) {
            continue;
        }
        for other in taken {
            for t in 0..t_len {
                if overlaps(cand[t], other[t]) {
                    continue 'outer;
                }
            }
        }
        return Some(cand);
    }
    None
}

#[derive(Serialize, Deserialize)]
struct ClipRecord {
    version: String,
    id: u64,
    config: SceneConfig,
    features_b64: String,
    objects: Vec<ObjectTrack>,
    caption: TokenizedCaption,
    gt_tube: SpatioTemporalTube,
}

/// Writes clips as line-delimited JSON records, one clip per line.
pub fn export_dataset(clips: &[SyntheticClip], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let b64 = base64::engine::general_purpose::STANDARD;
    for clip in clips {
        let rec = ClipRecord {
            version: SCHEMA_VERSION.to_string(),
            id: clip.id,
            config: clip.config.clone(),
            features_b64: b64.encode(&clip.features),
            objects: clip.objects.clone(),
            caption: clip.caption.clone(),
            gt_tube: clip.gt_tube.clone(),
        };
        serde_json::to_writer(&mut f, &rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a dataset written by [`export_dataset`]. Reports the offending line
/// on parse or version errors; an empty file is an empty dataset.
pub fn load_dataset(path: &Path) -> Result<Vec<SyntheticClip>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let b64 = base64::engine::general_purpose::STANDARD;
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClipRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.version != SCHEMA_VERSION {
            return Err(Error::Schema {
                line: i + 1,
                msg: format!("version {:?}, expected {SCHEMA_VERSION:?}", rec.version),
            });
        }
        let features = b64
            .decode(rec.features_b64.as_bytes())
            .map_err(|e| Error::Schema {
                line: i + 1,
                msg: format!("features: {e}"),
            })?;
        let expect = rec.config.t * rec.config.h * rec.config.w * rec.config.channels();
        if features.len() != expect {
            return Err(Error::Schema {
                line: i + 1,
                msg: format!("feature length {} != {expect}", features.len()),
            });
        }
        out.push(SyntheticClip {
            id: rec.id,
            config: rec.config,
            features,
            objects: rec.objects,
            caption: rec.caption,
            gt_tube: rec.gt_tube,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn deterministic_generation() {
        let cfg = SceneConfig::default();
        let a = generate_clip(&cfg, 42).unwrap();
        let b = generate_clip(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_clip(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_vocab_is_fifty_tokens() {
        let v = Lexicon::default().vocabulary().unwrap();
        assert_eq!(v.len(), 50);
        assert_eq!(v.mask_id(), 50);
    }

    #[test]
    fn no_distractors_strict_subset() {
        let cfg = SceneConfig {
            num_distractors: 0,
            ..SceneConfig::default()
        };
        for seed in 0..30 {
            let clip = generate_clip(&cfg, seed).unwrap();
            let iv = clip.gt_tube.interval;
            assert!(iv.len() < cfg.t, "gt interval should be strict subset");
        }
    }

    #[test]
    fn gt_length_within_configured_range() {
        let cfg = SceneConfig::default();
        let lo = (cfg.event_length_range.0 * cfg.t as f64).ceil() - 1.0;
        let hi = (cfg.event_length_range.1 * cfg.t as f64).floor() + 1.0;
        for seed in 0..50 {
            let clip = generate_clip(&cfg, seed).unwrap();
            let len = clip.gt_tube.interval.len() as f64;
            assert!(len >= lo && len <= hi, "len {len} outside [{lo},{hi}]");
        }
    }

    #[test]
    fn occupancy_matches_rasterized_tracks() {
        let cfg = SceneConfig::default();
        for seed in 100..120 {
            let clip = generate_clip(&cfg, seed).unwrap();
            let (t_len, h, w, _) = clip.dims();
            let occ_ch = cfg.lexicon.colors.len() + cfg.lexicon.shapes.len();
            for t in 0..t_len {
                for y in 0..h {
                    for x in 0..w {
                        let covered = clip.objects.iter().any(|o| {
                            o.states[t].is_some_and(|(ox, oy)| {
                                (x as i32) >= ox
                                    && (x as i32) < ox + FOOTPRINT
                                    && (y as i32) >= oy
                                    && (y as i32) < oy + FOOTPRINT
                            })
                        });
                        assert_eq!(clip.feature(t, y, x, occ_ch) == 1, covered);
                    }
                }
            }
        }
    }

    #[test]
    fn objects_never_overlap() {
        let cfg = SceneConfig {
            num_distractors: 3,
            ..SceneConfig::default()
        };
        for seed in 0..40 {
            let clip = generate_clip(&cfg, seed).unwrap();
            for t in 0..cfg.t {
                for i in 0..clip.objects.len() {
                    for j in (i + 1)..clip.objects.len() {
                        if let (Some(a), Some(b)) =
                            (clip.objects[i].states[t], clip.objects[j].states[t])
                        {
                            assert!(!overlaps(a, b), "seed {seed} t {t}: {a:?} vs {b:?}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn target_appearance_unique() {
        let cfg = SceneConfig {
            num_distractors: 3,
            ..SceneConfig::default()
        };
        for seed in 0..40 {
            let clip = generate_clip(&cfg, seed).unwrap();
            let t0 = &clip.objects[0];
            for d in &clip.objects[1..] {
                assert!(
                    (d.color, d.shape) != (t0.color, t0.shape),
                    "distractor shares full appearance"
                );
            }
        }
    }

    #[test]
    fn event_checker_validates_gt_tubes() {
        let cfg = SceneConfig::default();
        for seed in 0..100 {
            let clip = generate_clip(&cfg, seed).unwrap();
            crate::oracle::check_clip_event(&clip).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = SceneConfig::default();
        let clips: Vec<SyntheticClip> = (0..10).map(|s| generate_clip(&cfg, s).unwrap()).collect();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        export_dataset(&clips, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(clips, loaded);
    }

    #[test]
    fn truncated_file_reports_line() {
        let cfg = SceneConfig::default();
        let clips: Vec<SyntheticClip> = (0..3).map(|s| generate_clip(&cfg, s).unwrap()).collect();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        export_dataset(&clips, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        let cut = text.len() - 40;
        text.truncate(cut);
        std::fs::write(&path, text).unwrap();
        match load_dataset(&path) {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_diagnosed() {
        let cfg = SceneConfig::default();
        let clip = generate_clip(&cfg, 1).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        export_dataset(&[clip], &path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace(SCHEMA_VERSION, "tubermc-synth/9");
        std::fs::write(&path, text).unwrap();
        match load_dataset(&path) {
            Err(Error::Schema { msg, .. }) => assert!(msg.contains("tubermc-synth/9")),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn infeasible_configs_error() {
        let cfg = SceneConfig {
            num_distractors: 80,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_clip(&cfg, 0), Err(Error::Infeasible(_))));
    }
}
