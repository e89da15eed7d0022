//! Gaussian attention masks over frames and grid cells, and the
//! mask-attention primitive.
//!
//! Masks are built from interval/box parameters as differentiable graph ops
//! (so gradients reach proposal centers and box offsets); the plain functions
//! here evaluate those same ops on a scratch tape, so there is one formula in
//! the crate. σ is `alpha` times the interval width / box extent and every
//! mask is peak-normalized to 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::FrameBox;
use crate::graph::{Real, ScalarBinOp, Tape, Tensor, Var};

/// Default σ/extent ratio. `alpha = 1` recovers σ = extent.
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Temporal1d,
    Spatial2d,
    SpatioTemporal3d,
}

/// Soft attention mask with values in `(0, 1]`, peak exactly 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMask {
    pub kind: MaskKind,
    pub t_len: usize,
    pub h: usize,
    pub w: usize,
    /// Row-major values: `t_len` entries (1D), `h*w` entries (2D), or
    /// `t_len * h * w` entries frame-major (3D).
    pub values: Vec<f64>,
}

impl GaussianMask {
    /// Checks positivity, unit peak, and monotone decay away from the peak:
    /// along t for 1D masks, along x and y for 2D masks, and per-frame along
    /// x and y for 3D masks (a 3D mask built over moving boxes need not decay
    /// monotonically in t; its temporal factor does, which
    /// [`temporal_profile_argmax`](Self::temporal_profile_argmax) exposes).
    pub fn validate(&self) -> Result<()> {
        if self.values.iter().any(|&v| !(v > 0.0) || v > 1.0 + 1e-12) {
            return Err(Error::Config("mask values must lie in (0,1]".into()));
        }
        let peak = self.values.iter().cloned().fold(f64::MIN, f64::max);
        if (peak - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mask peak {peak} != 1")));
        }
        match self.kind {
            MaskKind::Temporal1d => monotone_from_peak(&self.values)?,
            MaskKind::Spatial2d => self.validate_grid(&self.values)?,
            MaskKind::SpatioTemporal3d => {
                for t in 0..self.t_len {
                    let slice = &self.values[t * self.h * self.w..(t + 1) * self.h * self.w];
                    self.validate_grid(slice)?;
                }
            }
        }
        Ok(())
    }

    fn validate_grid(&self, vals: &[f64]) -> Result<()> {
        let (h, w) = (self.h, self.w);
        let argmax = vals
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let (py, px) = (argmax / w, argmax % w);
        for y in 0..h {
            let row: Vec<f64> = (0..w).map(|x| vals[y * w + x]).collect();
            monotone_from_index(&row, px)?;
        }
        for x in 0..w {
            let col: Vec<f64> = (0..h).map(|y| vals[y * w + x]).collect();
            monotone_from_index(&col, py)?;
        }
        Ok(())
    }

    /// For 3D masks: argmax over t of the spatially-summed mask.
    pub fn temporal_profile_argmax(&self) -> usize {
        let hw = self.h * self.w;
        (0..self.t_len)
            .map(|t| self.values[t * hw..(t + 1) * hw].iter().sum::<f64>())
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0
    }
}

fn monotone_from_peak(vals: &[f64]) -> Result<()> {
    let argmax = vals
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    monotone_from_index(vals, argmax)
}

fn monotone_from_index(vals: &[f64], peak: usize) -> Result<()> {
    let tol = 1e-12;
    for i in (0..peak).rev() {
        if vals[i] > vals[i + 1] + tol {
            return Err(Error::Config(format!("not monotone left of peak at {i}")));
        }
    }
    for i in peak..vals.len().saturating_sub(1) {
        if vals[i + 1] > vals[i] + tol {
            return Err(Error::Config(format!("not monotone right of peak at {i}")));
        }
    }
    Ok(())
}

/// Graph builders shared by the plain operations below and the model.
pub mod node {
    use super::*;

    /// Row vector of cell-center positions `(i + 0.5) / n`.
    pub fn center_grid<F: Real>(tape: &mut Tape<F>, n: usize) -> Var {
        let data: Vec<F> = (0..n)
            .map(|i| F::from_f64((i as f64 + 0.5) / n as f64))
            .collect();
        tape.constant(Tensor::row_vec(data))
    }

    /// Unnormalized Gaussian over `grid` with mean `c` (1x1) and σ `sigma` (1x1).
    fn gaussian_over_grid<F: Real>(tape: &mut Tape<F>, grid: Var, c: Var, sigma: Var) -> Var {
        let diff = tape.bin_scalar(ScalarBinOp::Sub, grid, c);
        let sq = tape.square(diff);
        let s2 = tape.square(sigma);
        let denom = tape.mul_const(s2, 2.0);
        let scaled = tape.bin_scalar(ScalarBinOp::Div, sq, denom);
        let neg = tape.neg(scaled);
        tape.exp(neg)
    }

    /// Peak-normalized 1D temporal mask `[1, t_len]` from normalized interval
    /// center `c` and width `w` (both 1x1 nodes).
    pub fn gaussian_1d<F: Real>(
        tape: &mut Tape<F>,
        c: Var,
        w: Var,
        t_len: usize,
        alpha: f64,
    ) -> Var {
        let grid = center_grid(tape, t_len);
        let sigma = tape.mul_const(w, alpha);
        let raw = gaussian_over_grid(tape, grid, c, sigma);
        let peak = tape.max_all(raw);
        tape.bin_scalar(ScalarBinOp::Div, raw, peak)
    }

    /// Peak-normalized 2D spatial mask `[1, h*w]` (row-major, `cell = y*w+x`)
    /// from box center `(cx, cy)` and extents `(bw, bh)` (1x1 nodes each).
    /// Extents are floored at `min_extent` so degenerate boxes stay usable.
    #[allow(clippy::too_many_arguments)]
    pub fn gaussian_2d<F: Real>(
        tape: &mut Tape<F>,
        cx: Var,
        cy: Var,
        bw: Var,
        bh: Var,
        h: usize,
        w: usize,
        alpha: f64,
        min_extent: f64,
    ) -> Var {
        let floor = tape.constant(Tensor::scalar(F::from_f64(min_extent)));
        let bw = tape.max2(bw, floor);
        let bh = tape.max2(bh, floor);
        let gx = center_grid(tape, w);
        let gy = center_grid(tape, h);
        let sx = tape.mul_const(bw, alpha);
        let sy = tape.mul_const(bh, alpha);
        let mx = gaussian_over_grid(tape, gx, cx, sx);
        let my = gaussian_over_grid(tape, gy, cy, sy);
        let grid2 = tape.outer(my, mx);
        let flat = tape.reshape(grid2, 1, h * w);
        let peak = tape.max_all(flat);
        tape.bin_scalar(ScalarBinOp::Div, flat, peak)
    }

    /// Peak-normalized 3D mask `[t_len, h*w]` as the product of a temporal
    /// mask `[1, t_len]` and per-frame spatial masks `[t_len, h*w]`.
    pub fn gaussian_3d<F: Real>(tape: &mut Tape<F>, m_t: Var, m_b: Var) -> Var {
        let mb_t = tape.transpose(m_b); // [h*w, t_len]
        let scaled = tape.mul_row(mb_t, m_t);
        let prod = tape.transpose(scaled); // [t_len, h*w]
        let peak = tape.max_all(prod);
        tape.bin_scalar(ScalarBinOp::Div, prod, peak)
    }
}

fn check_1d_params(c: f64, w: f64) -> Result<()> {
    if !(c.is_finite() && w.is_finite()) || w <= 0.0 {
        return Err(Error::Config(format!(
            "gaussian_1d needs w > 0, got c={c}, w={w}"
        )));
    }
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::Config(format!("gaussian_1d center {c} out of [0,1]")));
    }
    Ok(())
}

/// 1D temporal Gaussian mask over `t_len` frame centers.
pub fn gaussian_1d(c: f64, w: f64, t_len: usize, alpha: f64) -> Result<GaussianMask> {
    check_1d_params(c, w)?;
    if t_len == 0 {
        return Err(Error::Config("gaussian_1d needs t_len > 0".into()));
    }
    let mut tape = Tape::<f64>::new();
    let cv = tape.constant(Tensor::scalar(c));
    let wv = tape.constant(Tensor::scalar(w));
    let m = node::gaussian_1d(&mut tape, cv, wv, t_len, alpha);
    Ok(GaussianMask {
        kind: MaskKind::Temporal1d,
        t_len,
        h: 1,
        w: 1,
        values: tape.value(m).data.clone(),
    })
}

/// 2D spatial Gaussian mask over `h*w` cell centers; zero-area boxes are
/// rejected.
pub fn gaussian_2d(b: &FrameBox, h: usize, w: usize, alpha: f64) -> Result<GaussianMask> {
    b.validate()?;
    if b.area() <= 0.0 {
        return Err(Error::InvalidBox(format!("zero-area box {b:?}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Config("gaussian_2d needs h, w > 0".into()));
    }
    let (cx, cy) = b.center();
    let mut tape = Tape::<f64>::new();
    let cxv = tape.constant(Tensor::scalar(cx));
    let cyv = tape.constant(Tensor::scalar(cy));
    let bwv = tape.constant(Tensor::scalar(b.width()));
    let bhv = tape.constant(Tensor::scalar(b.height()));
    let m = node::gaussian_2d(&mut tape, cxv, cyv, bwv, bhv, h, w, alpha, 0.0);
    Ok(GaussianMask {
        kind: MaskKind::Spatial2d,
        t_len: 1,
        h,
        w,
        values: tape.value(m).data.clone(),
    })
}

/// 3D spatio-temporal Gaussian mask: temporal factor from the normalized
/// interval `(c, w)`, spatial factor from one box per frame.
pub fn gaussian_3d(
    c: f64,
    w_norm: f64,
    boxes: &[FrameBox],
    h: usize,
    w: usize,
    alpha: f64,
) -> Result<GaussianMask> {
    check_1d_params(c, w_norm)?;
    if boxes.is_empty() {
        return Err(Error::Config("gaussian_3d needs at least one frame".into()));
    }
    let t_len = boxes.len();
    let mut tape = Tape::<f64>::new();
    let cv = tape.constant(Tensor::scalar(c));
    let wv = tape.constant(Tensor::scalar(w_norm));
    let m_t = node::gaussian_1d(&mut tape, cv, wv, t_len, alpha);
    let mut frame_masks = Vec::with_capacity(t_len);
    for b in boxes {
        b.validate()?;
        if b.area() <= 0.0 {
            return Err(Error::InvalidBox(format!("zero-area box {b:?}")));
        }
        let (cx, cy) = b.center();
        let cxv = tape.constant(Tensor::scalar(cx));
        let cyv = tape.constant(Tensor::scalar(cy));
        let bwv = tape.constant(Tensor::scalar(b.width()));
        let bhv = tape.constant(Tensor::scalar(b.height()));
        frame_masks.push(node::gaussian_2d(
            &mut tape, cxv, cyv, bwv, bhv, h, w, alpha, 0.0,
        ));
    }
    let m_b = tape.concat_rows(&frame_masks);
    let m3 = node::gaussian_3d(&mut tape, m_t, m_b);
    Ok(GaussianMask {
        kind: MaskKind::SpatioTemporal3d,
        t_len,
        h,
        w,
        values: tape.value(m3).data.clone(),
    })
}

/// Masked scaled dot-product attention (single head):
/// `out = (softmax(QK^T/sqrt(d)) ⊙ M) V`, each softmax row multiplied
/// elementwise by `m` with no renormalization afterwards.
pub fn mask_attention(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    m: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let d = q.first().map(|r| r.len()).unwrap_or(0);
    if d == 0 || q.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("mask_attention: ragged or empty Q".into()));
    }
    if k.len() != v.len() || k.len() != m.len() {
        return Err(Error::Shape(format!(
            "mask_attention: K has {} rows, V {}, M {}",
            k.len(),
            v.len(),
            m.len()
        )));
    }
    if k.iter().any(|r| r.len() != d) || v.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("mask_attention: K/V width mismatch".into()));
    }
    if m.iter().any(|&x| x < 0.0) {
        return Err(Error::Config(
            "mask_attention: mask must be nonnegative".into(),
        ));
    }
    let flat = |rows: &[Vec<f64>]| -> Vec<f64> { rows.iter().flatten().copied().collect() };
    let mut tape = Tape::<f64>::new();
    let qv = tape.constant(Tensor::from_vec(q.len(), d, flat(q)));
    let kv = tape.constant(Tensor::from_vec(k.len(), d, flat(k)));
    let vv = tape.constant(Tensor::from_vec(v.len(), d, flat(v)));
    let mv = tape.constant(Tensor::row_vec(m.to_vec()));
    let out = tape.attn_full(qv, kv, vv, Some(mv), 1);
    let t = tape.value(out);
    Ok((0..t.rows)
        .map(|r| t.data[r * t.cols..(r + 1) * t.cols].to_vec())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn gaussian_1d_symmetry_even_t() {
        let m = gaussian_1d(0.5, 0.4, 10, DEFAULT_ALPHA).unwrap();
        for t in 0..5 {
            assert!((m.values[t] - m.values[9 - t]).abs() < 1e-12);
        }
        // the two central frames share the peak
        assert!((m.values[4] - 1.0).abs() < 1e-12);
        assert!((m.values[5] - 1.0).abs() < 1e-12);
        m.validate().unwrap();
    }

    #[test]
    fn gaussian_1d_sigma_point() {
        // Place the center on a frame center and probe the frame exactly σ away.
        let t_len = 16;
        let c = 4.5 / t_len as f64;
        let alpha = 0.5;
        let w = (4.0 / t_len as f64) / alpha; // σ = alpha*w = 4 frames
        let m = gaussian_1d(c, w, t_len, alpha).unwrap();
        assert!((m.values[4] - 1.0).abs() < 1e-12);
        assert!(
            (m.values[8] - (-0.5f64).exp()).abs() < 1e-9,
            "got {}",
            m.values[8]
        );
    }

    #[test]
    fn gaussian_1d_wide_mask_floor() {
        let m = gaussian_1d(0.5, 1.0, 12, 0.5).unwrap();
        let min = m.values.iter().cloned().fold(f64::MAX, f64::min);
        let max = m.values.iter().cloned().fold(f64::MIN, f64::max);
        assert!(min / max >= (-0.5f64).exp() - 1e-12);
    }

    #[test]
    fn gaussian_1d_rejects_bad_width() {
        assert!(gaussian_1d(0.5, 0.0, 8, 0.5).is_err());
        assert!(gaussian_1d(0.5, -0.1, 8, 0.5).is_err());
    }

    #[test]
    fn gaussian_1d_matches_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t_len = rng.gen_range(4..32);
            let c = rng.gen_range(0.0..1.0);
            let w = rng.gen_range(0.05..1.0);
            let m = gaussian_1d(c, w, t_len, DEFAULT_ALPHA).unwrap();
            let o = oracle::naive_gaussian_1d(c, w, t_len, DEFAULT_ALPHA);
            for (a, b) in m.values.iter().zip(o.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gaussian_2d_unit_box_symmetry_and_separability() {
        let b = FrameBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let (h, w) = (6, 6);
        let m = gaussian_2d(&b, h, w, DEFAULT_ALPHA).unwrap();
        m.validate().unwrap();
        // corners equal by symmetry
        let corners = [
            m.values[0],
            m.values[w - 1],
            m.values[(h - 1) * w],
            m.values[h * w - 1],
        ];
        for c in &corners {
            assert!((c - corners[0]).abs() < 1e-12);
        }
        // separability: M[y,x] = M_row[y] * M_col[x] after peak normalization
        let o = oracle::naive_gaussian_2d(&b, h, w, DEFAULT_ALPHA);
        let row_peak: Vec<f64> = (0..h).map(|y| m.values[y * w + w / 2]).collect();
        let col_peak: Vec<f64> = (0..w).map(|x| m.values[(h / 2) * w + x]).collect();
        for y in 0..h {
            for x in 0..w {
                let sep = row_peak[y] * col_peak[x];
                assert!((m.values[y * w + x] - sep).abs() < 1e-9);
                assert!((m.values[y * w + x] - o[y * w + x]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gaussian_2d_sigma_point() {
        // 16-cell axis; box centered on a cell center with σ_x = 4 cells.
        let (h, w) = (16, 16);
        let alpha = 0.5;
        let bw = (4.0 / 16.0) / alpha;
        let b = FrameBox::from_center(4.5 / 16.0, 4.5 / 16.0, bw, bw);
        let m = gaussian_2d(&b, h, w, alpha).unwrap();
        let peak = m.values[4 * w + 4];
        assert!((peak - 1.0).abs() < 1e-12);
        let at_sigma = m.values[4 * w + 8];
        assert!((at_sigma - (-0.5f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn gaussian_2d_rejects_zero_area() {
        let b = FrameBox::empty();
        assert!(gaussian_2d(&b, 8, 8, 0.5).is_err());
    }

    #[test]
    fn gaussian_3d_matches_product_formula() {
        // T=4, H=W=2: exhaustive check of all 16 cells against the product.
        let boxes: Vec<FrameBox> = (0..4)
            .map(|t| FrameBox::from_center(0.3 + 0.1 * t as f64, 0.5, 0.4, 0.6))
            .collect();
        let (c, w_norm) = (0.5, 0.5);
        let m = gaussian_3d(c, w_norm, &boxes, 2, 2, DEFAULT_ALPHA).unwrap();
        let o = oracle::naive_gaussian_3d(c, w_norm, &boxes, 2, 2, DEFAULT_ALPHA);
        for t in 0..4 {
            for cell in 0..4 {
                assert!((m.values[t * 4 + cell] - o[t][cell]).abs() < 1e-9);
            }
        }
        // temporal argmax of the spatially-summed mask equals argmax of M_t
        let mt = oracle::naive_gaussian_1d(c, w_norm, 4, DEFAULT_ALPHA);
        let mt_argmax = mt
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(m.temporal_profile_argmax(), mt_argmax);
        m.validate().unwrap();
    }

    #[test]
    fn mask_attention_identity_and_annihilation() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let rows = |n: usize, d: usize, rng: &mut ChaCha12Rng| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect()
        };
        let q = rows(2, 4, &mut rng);
        let k = rows(3, 4, &mut rng);
        let v = rows(3, 4, &mut rng);

        let ones = mask_attention(&q, &k, &v, &[1.0, 1.0, 1.0]).unwrap();
        let plain = oracle::naive_mask_attention(&q, &k, &v, &[1.0, 1.0, 1.0]);
        for (a, b) in ones.iter().flatten().zip(plain.iter().flatten()) {
            assert!((a - b).abs() < 1e-6);
        }

        let zero = mask_attention(&q, &k, &v, &[0.0, 0.0, 0.0]).unwrap();
        assert!(zero.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn mask_attention_matches_naive_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (n, mk, d) = (
                rng.gen_range(1..5),
                rng.gen_range(1..6),
                rng.gen_range(2..8),
            );
            let rows = |n: usize, rng: &mut ChaCha12Rng| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect()
            };
            let q = rows(n, &mut rng);
            let k = rows(mk, &mut rng);
            let v = rows(mk, &mut rng);
            let m: Vec<f64> = (0..mk).map(|_| rng.gen_range(0.0..1.0)).collect();
            let got = mask_attention(&q, &k, &v, &m).unwrap();
            let want = oracle::naive_mask_attention(&q, &k, &v, &m);
            for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mask_attention_dimension_errors() {
        let q = vec![vec![0.0, 1.0]];
        let k = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let v = vec![vec![0.0, 1.0]];
        assert!(mask_attention(&q, &k, &v, &[1.0, 1.0]).is_err());
        let v2 = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(mask_attention(&q, &k, &v2, &[1.0]).is_err());
    }

    #[test]
    fn masked_output_never_exceeds_unmasked_for_unit_masks() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..50 {
            let d = 4;
            let rows = |n: usize, rng: &mut ChaCha12Rng| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            };
            let q = rows(2, &mut rng);
            let k = rows(4, &mut rng);
            // nonnegative V so row-wise shrinking cannot grow the output
            let v: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..d).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect();
            let m: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let masked = mask_attention(&q, &k, &v, &m).unwrap();
            let unmasked = mask_attention(&q, &k, &v, &[1.0; 4]).unwrap();
            for (rm, ru) in masked.iter().zip(unmasked.iter()) {
                for (a, b) in rm.iter().zip(ru.iter()) {
                    assert!(*a <= *b + 1e-12);
                }
            }
        }
    }

    #[test]
    fn translation_shifts_argmax() {
        let t_len = 20;
        for t0 in 2..10 {
            let c = (t0 as f64 + 0.5) / t_len as f64;
            let m = gaussian_1d(c, 0.3, t_len, 0.5).unwrap();
            let argmax = m
                .values
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, t0);
        }
    }
}
