//! Geometric domain types: boxes, temporal intervals, tubes, frame detections.
//!
//! Boxes live in normalized `[0,1]` corner coordinates; intervals are
//! inclusive frame-index ranges. Both are immutable value objects and all
//! operations here are pure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned bounding box in normalized corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl FrameBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = FrameBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.x_min, self.y_min, self.x_max, self.y_max];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidBox(format!("coordinates out of [0,1]: {self:?}")));
        }
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(Error::InvalidBox(format!("inverted corners: {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Box from center/extent form, clamped into the unit square.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        let w = w.max(0.0);
        let h = h.max(0.0);
        let x_min = (cx - 0.5 * w).clamp(0.0, 1.0);
        let x_max = (cx + 0.5 * w).clamp(0.0, 1.0);
        let y_min = (cy - 0.5 * h).clamp(0.0, 1.0);
        let y_max = (cy + 0.5 * h).clamp(0.0, 1.0);
        FrameBox {
            x_min,
            y_min,
            x_max: x_max.max(x_min),
            y_max: y_max.max(y_min),
        }
    }

    /// A zero-area placeholder box. Legal input everywhere; IoU against it is 0.
    pub fn empty() -> Self {
        FrameBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 0.0,
            y_max: 0.0,
        }
    }
}

/// Intersection-over-union of two boxes. Degenerate zero-area inputs yield 0.
pub fn box_iou(a: &FrameBox, b: &FrameBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Inclusive frame-index interval `[start_frame, end_frame]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalInterval {
    pub start_frame: usize,
    pub end_frame: usize,
}

impl TemporalInterval {
    pub fn new(start_frame: usize, end_frame: usize) -> Result<Self> {
        if start_frame > end_frame {
            return Err(Error::InvalidInterval(format!(
                "start {start_frame} > end {end_frame}"
            )));
        }
        Ok(TemporalInterval {
            start_frame,
            end_frame,
        })
    }

    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false // inclusive intervals always cover at least one frame
    }

    pub fn contains(&self, frame: usize) -> bool {
        frame >= self.start_frame && frame <= self.end_frame
    }

    pub fn frames(&self) -> impl Iterator<Item = usize> {
        self.start_frame..=self.end_frame
    }

    /// Normalized (center, width) view for a clip of `t_len` frames.
    pub fn to_normalized(&self, t_len: usize) -> (f64, f64) {
        let t = t_len as f64;
        let c = (self.start_frame + self.end_frame + 1) as f64 / (2.0 * t);
        let w = self.len() as f64 / t;
        (c, w)
    }

    /// Inverse of [`to_normalized`](Self::to_normalized); rounds to the nearest
    /// frame indices and clamps into `[0, t_len)`.
    pub fn from_normalized(c: f64, w: f64, t_len: usize) -> Result<Self> {
        if t_len == 0 {
            return Err(Error::InvalidInterval("t_len = 0".into()));
        }
        if !(c.is_finite() && w.is_finite()) || w <= 0.0 {
            return Err(Error::InvalidInterval(format!("bad (c,w) = ({c},{w})")));
        }
        let t = t_len as f64;
        let start = (c * t - w * t / 2.0).round().max(0.0) as usize;
        let end = (c * t + w * t / 2.0 - 1.0).round().max(0.0) as usize;
        let start = start.min(t_len - 1);
        let end = end.clamp(start, t_len - 1);
        TemporalInterval::new(start, end)
    }
}

/// tIoU: |intersection frame set| / |union frame set| over inclusive index sets.
pub fn interval_iou(a: &TemporalInterval, b: &TemporalInterval) -> f64 {
    let inter_start = a.start_frame.max(b.start_frame);
    let inter_end = a.end_frame.min(b.end_frame);
    let inter = if inter_start > inter_end {
        0
    } else {
        inter_end - inter_start + 1
    };
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// A temporal interval plus one bounding box per in-interval frame; the unit
/// of prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporalTube {
    pub interval: TemporalInterval,
    pub boxes: Vec<FrameBox>,
}

impl SpatioTemporalTube {
    pub fn new(interval: TemporalInterval, boxes: Vec<FrameBox>) -> Result<Self> {
        if boxes.len() != interval.len() {
            return Err(Error::Shape(format!(
                "tube has {} boxes for an interval of {} frames",
                boxes.len(),
                interval.len()
            )));
        }
        for b in &boxes {
            b.validate()?;
        }
        Ok(SpatioTemporalTube { interval, boxes })
    }

    /// Box at an absolute frame index, if the frame is inside the interval.
    pub fn box_at(&self, frame: usize) -> Option<&FrameBox> {
        if self.interval.contains(frame) {
            Some(&self.boxes[frame - self.interval.start_frame])
        } else {
            None
        }
    }
}

/// One candidate detection in a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub frame_box: FrameBox,
    pub object_id: u32,
    pub score: f64,
}

/// Per-frame candidate boxes with confidence scores, plus the selected
/// (highest-scoring) subject box per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredFrameDetections {
    candidates: Vec<Vec<Candidate>>,
    selected: Vec<usize>,
}

impl ScoredFrameDetections {
    /// Builds detections, selecting the argmax-score candidate per frame
    /// (ties broken by candidate order). Every frame must have at least one
    /// candidate.
    pub fn new(candidates: Vec<Vec<Candidate>>) -> Result<Self> {
        let mut selected = Vec::with_capacity(candidates.len());
        for (t, frame) in candidates.iter().enumerate() {
            if frame.is_empty() {
                return Err(Error::Shape(format!("frame {t} has no candidates")));
            }
            let mut best = 0usize;
            for (i, c) in frame.iter().enumerate() {
                c.frame_box.validate()?;
                if !(0.0..=1.0).contains(&c.score) {
                    return Err(Error::Config(format!(
                        "candidate score {} out of [0,1] at frame {t}",
                        c.score
                    )));
                }
                if c.score > frame[best].score {
                    best = i;
                }
            }
            selected.push(best);
        }
        Ok(ScoredFrameDetections {
            candidates,
            selected,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.candidates.len()
    }

    pub fn candidates_at(&self, frame: usize) -> &[Candidate] {
        &self.candidates[frame]
    }

    pub fn selected_at(&self, frame: usize) -> &Candidate {
        &self.candidates[frame][self.selected[frame]]
    }

    pub fn selected_boxes(&self) -> Vec<FrameBox> {
        (0..self.num_frames())
            .map(|t| self.selected_at(t).frame_box)
            .collect()
    }

    /// The paper's S: per-frame confidence of the selected box.
    pub fn selected_scores(&self) -> Vec<f64> {
        (0..self.num_frames())
            .map(|t| self.selected_at(t).score)
            .collect()
    }
}

/// Restricts the selected boxes of `d` to the frames of `iv`.
pub fn tube_from_detections(
    d: &ScoredFrameDetections,
    iv: &TemporalInterval,
) -> Result<SpatioTemporalTube> {
    if iv.end_frame >= d.num_frames() {
        return Err(Error::InvalidInterval(format!(
            "interval [{},{}] exceeds {} frames",
            iv.start_frame,
            iv.end_frame,
            d.num_frames()
        )));
    }
    let boxes = iv.frames().map(|t| d.selected_at(t).frame_box).collect();
    SpatioTemporalTube::new(*iv, boxes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> FrameBox {
        FrameBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn box_iou_identity() {
        let a = b(0.1, 0.2, 0.6, 0.9);
        assert_eq!(box_iou(&a, &a), 1.0);
    }

    #[test]
    fn box_iou_disjoint() {
        let a = b(0.0, 0.0, 0.2, 0.2);
        let c = b(0.5, 0.5, 0.9, 0.9);
        assert_eq!(box_iou(&a, &c), 0.0);
    }

    #[test]
    fn box_iou_quarter_overlap() {
        // Closed form: inter = 0.25^2, union = 2*0.25 - 0.0625 = 0.4375 -> 1/7.
        let a = b(0.0, 0.0, 0.5, 0.5);
        let c = b(0.25, 0.25, 0.75, 0.75);
        let got = box_iou(&a, &c);
        assert!((got - 1.0 / 7.0).abs() < 1e-12, "got {got}");
        // Cross-check with the Monte-Carlo point-sampling oracle.
        let mc = crate::oracle::mc_box_iou(&a, &c, 200_000, 7);
        assert!((got - mc).abs() < 5e-3, "analytic {got} vs mc {mc}");
    }

    #[test]
    fn box_iou_zero_area_convention() {
        let z = FrameBox::empty();
        let a = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(box_iou(&z, &a), 0.0);
        assert_eq!(box_iou(&z, &z), 0.0);
    }

    #[test]
    fn interval_iou_cases() {
        let a = TemporalInterval::new(10, 20).unwrap();
        assert_eq!(interval_iou(&a, &a), 1.0);
        let c = TemporalInterval::new(15, 25).unwrap();
        // {15..20} has 6 frames, {10..25} has 16.
        assert_eq!(interval_iou(&a, &c), 6.0 / 16.0);
        let d = TemporalInterval::new(0, 5).unwrap();
        let e = TemporalInterval::new(10, 15).unwrap();
        assert_eq!(interval_iou(&d, &e), 0.0);
    }

    #[test]
    fn interval_normalized_round_trip() {
        let t_len = 24;
        for s in 0..t_len {
            for e in s..t_len {
                let iv = TemporalInterval::new(s, e).unwrap();
                let (c, w) = iv.to_normalized(t_len);
                let back = TemporalInterval::from_normalized(c, w, t_len).unwrap();
                assert_eq!(back, iv);
                let (c2, _) = back.to_normalized(t_len);
                assert!((c - c2).abs() <= 0.5 / t_len as f64);
            }
        }
    }

    #[test]
    fn tube_from_detections_restricts_and_orders() {
        let frames: Vec<Vec<Candidate>> = (0..8)
            .map(|t| {
                vec![Candidate {
                    frame_box: b(0.1 * t as f64 / 8.0, 0.0, 0.5, 0.5),
                    object_id: 0,
                    score: 0.9,
                }]
            })
            .collect();
        let d = ScoredFrameDetections::new(frames).unwrap();

        let full = tube_from_detections(&d, &TemporalInterval::new(0, 7).unwrap()).unwrap();
        assert_eq!(full.boxes.len(), 8);

        let single = tube_from_detections(&d, &TemporalInterval::new(3, 3).unwrap()).unwrap();
        assert_eq!(single.boxes.len(), 1);

        let iv = TemporalInterval::new(3, 5).unwrap();
        let t = tube_from_detections(&d, &iv).unwrap();
        assert_eq!(t.boxes.len(), 3);
        for (i, frame) in iv.frames().enumerate() {
            assert_eq!(t.boxes[i], d.selected_at(frame).frame_box);
        }

        assert!(tube_from_detections(&d, &TemporalInterval::new(5, 9).unwrap()).is_err());
    }

    #[test]
    fn detections_select_argmax() {
        let frames = vec![vec![
            Candidate {
                frame_box: b(0.0, 0.0, 0.3, 0.3),
                object_id: 0,
                score: 0.4,
            },
            Candidate {
                frame_box: b(0.5, 0.5, 0.8, 0.8),
                object_id: 1,
                score: 0.7,
            },
        ]];
        let d = ScoredFrameDetections::new(frames).unwrap();
        assert_eq!(d.selected_at(0).object_id, 1);
    }
}
