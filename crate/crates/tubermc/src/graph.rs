//! Tape-based reverse-mode automatic differentiation over small dense tensors.
//!
//! Built for this crate's desk-scale transformer stack: tensors are row-major
//! 2D buffers, the tape is rebuilt per training step (define-by-run), and
//! attention is a fused op that recomputes its softmax in the backward pass
//! instead of storing it. Generic over [`Real`] so training runs in `f32`
//! while gradient checks run in `f64`.

use std::fmt;

/// Scalar type the tape operates on.
pub trait Real:
    Copy
    + PartialOrd
    + Send
    + Sync
    + 'static
    + fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::iter::Sum
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxr(self, o: Self) -> Self;
    fn minr(self, o: Self) -> Self;
    fn is_finite(self) -> bool;
    /// `c = alpha * a·b + beta * c` with explicit row/col strides, row-major.
    ///
    /// # Safety
    /// Pointers must cover the strided `m×k`, `k×n`, `m×n` extents.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maxr(self, o: Self) -> Self {
                if self >= o {
                    self
                } else {
                    o
                }
            }
            fn minr(self, o: Self) -> Self {
                if self <= o {
                    self
                } else {
                    o
                }
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major 2D tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![F::ZERO; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, v: F) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "data does not fill {rows}x{cols}");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: F) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn row_vec(data: Vec<F>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_f64_slice(rows: usize, cols: usize, data: &[f64]) -> Self {
        Tensor::from_vec(rows, cols, data.iter().map(|&x| F::from_f64(x)).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> F {
        assert_eq!(self.len(), 1, "item() on non-scalar {}x{}", self.rows, self.cols);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarBin {
    Add,
    Sub,
    Mul,
    Div,
}

/// Grouped fused attention: which query/key rows form each independent
/// attention instance, and which mask row applies to it.
#[derive(Debug, Clone)]
struct AttnSpec {
    /// (query row indices, key/value row indices) per group.
    groups: Vec<(Vec<usize>, Vec<usize>)>,
    /// Mask row index per group (into the mask tensor), when a mask is given.
    mask_rows: Vec<usize>,
    heads: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddConst(f64),
    MulConst(f64),
    BinScalar(ScalarBin),
    MatMul { ta: bool, tb: bool },
    AddRow,
    MulRow,
    Softmax,
    LogSoftmax,
    Tanh,
    Sigmoid,
    Exp,
    Ln,
    Relu,
    Square,
    Sqrt,
    Clamp { lo: f64, hi: f64 },
    SumAll,
    MeanAll,
    MaxAll { argmax: usize },
    Max2,
    Min2,
    ConcatRows { row_counts: Vec<usize> },
    ConcatCols { col_counts: Vec<usize> },
    SliceRows { start: usize },
    GatherRows { indices: Vec<usize> },
    RepeatRows { times: usize },
    MeanGroups { group_size: usize },
    Outer,
    Transpose,
    Reshape,
    PickNegMean { indices: Vec<(usize, usize)> },
    Attn(AttnSpec),
}

struct Node<F> {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0 as usize].as_ref()
    }
}

/// The recording tape. Shape mismatches are programming errors and panic.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn gemm_into<F: Real>(
    a: &Tensor<F>,
    ta: bool,
    b: &Tensor<F>,
    tb: bool,
    out: &mut Tensor<F>,
    alpha: F,
    beta: F,
) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "matmul inner dims {k} vs {kb}");
    assert_eq!((out.rows, out.cols), (m, n), "matmul out shape");
    let (rsa, csa) = if ta {
        (1isize, a.cols as isize)
    } else {
        (a.cols as isize, 1isize)
    };
    let (rsb, csb) = if tb {
        (1isize, b.cols as isize)
    } else {
        (b.cols as isize, 1isize)
    };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.data.iter_mut() {
            *v = beta * *v;
        }
        return;
    }
    unsafe {
        F::gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

/// Row-wise softmax in place, numerically stable.
fn softmax_rows<F: Real>(x: &mut Tensor<F>) {
    for r in 0..x.rows {
        let row = &mut x.data[r * x.cols..(r + 1) * x.cols];
        let mut m = row[0];
        for &v in row.iter() {
            m = m.maxr(v);
        }
        let mut s = F::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0 as usize].value
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor<F>) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0 as usize].needs_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        Var(self.nodes.len() as u32 - 1)
    }

    /// Constant leaf: gradients do not flow into it.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: t,
            needs_grad: false,
        });
        Var(self.nodes.len() as u32 - 1)
    }

    /// Differentiable leaf (parameter or traced input).
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: t,
            needs_grad: true,
        });
        Var(self.nodes.len() as u32 - 1)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(F::from_f64(v)))
    }

    fn same_shape(&self, a: Var, b: Var) -> (usize, usize) {
        let ta = self.value(a);
        let tb = self.value(b);
        assert_eq!(
            (ta.rows, ta.cols),
            (tb.rows, tb.cols),
            "elementwise shape mismatch"
        );
        (ta.rows, ta.cols)
    }

    fn zip_map(&mut self, op: Op, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Var {
        self.same_shape(a, b);
        let out = Tensor {
            rows: self.value(a).rows,
            cols: self.value(a).cols,
            data: self
                .value(a)
                .data
                .iter()
                .zip(self.value(b).data.iter())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        };
        self.push(op, vec![a, b], out)
    }

    fn map(&mut self, op: Op, a: Var, f: impl Fn(F) -> F) -> Var {
        let out = Tensor {
            rows: self.value(a).rows,
            cols: self.value(a).cols,
            data: self.value(a).data.iter().map(|&x| f(x)).collect(),
        };
        self.push(op, vec![a], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(Op::Div, a, b, |x, y| x / y)
    }

    pub fn max2(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(Op::Max2, a, b, |x, y| x.maxr(y))
    }

    pub fn min2(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(Op::Min2, a, b, |x, y| x.minr(y))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.map(Op::Neg, a, |x| -x)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.map(Op::AddConst(c), a, |x| x + F::from_f64(c))
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        self.map(Op::MulConst(c), a, |x| x * F::from_f64(c))
    }

    /// Elementwise `a (op) s` where `s` is a 1x1 node broadcast over `a`.
    pub fn bin_scalar(&mut self, op: ScalarBinOp, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "bin_scalar rhs must be 1x1");
        let sv = self.value(s).item();
        let kind = match op {
            ScalarBinOp::Add => ScalarBin::Add,
            ScalarBinOp::Sub => ScalarBin::Sub,
            ScalarBinOp::Mul => ScalarBin::Mul,
            ScalarBinOp::Div => ScalarBin::Div,
        };
        let f = move |x: F| match kind {
            ScalarBin::Add => x + sv,
            ScalarBin::Sub => x - sv,
            ScalarBin::Mul => x * sv,
            ScalarBin::Div => x / sv,
        };
        let out = Tensor {
            rows: self.value(a).rows,
            cols: self.value(a).cols,
            data: self.value(a).data.iter().map(|&x| f(x)).collect(),
        };
        self.push(Op::BinScalar(kind), vec![a, s], out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (m, _) = if ta {
            (self.value(a).cols, self.value(a).rows)
        } else {
            (self.value(a).rows, self.value(a).cols)
        };
        let n = if tb {
            self.value(b).rows
        } else {
            self.value(b).cols
        };
        let mut out = Tensor::zeros(m, n);
        gemm_into(self.value(a), ta, self.value(b), tb, &mut out, F::ONE, F::ZERO);
        self.push(Op::MatMul { ta, tb }, vec![a, b], out)
    }

    /// `x + bias` with `bias` broadcast over rows (`[n,m] + [1,m]`).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (n, m) = (self.value(x).rows, self.value(x).cols);
        assert_eq!((self.value(bias).rows, self.value(bias).cols), (1, m));
        let mut out = self.value(x).clone();
        for r in 0..n {
            for c in 0..m {
                let b = self.value(bias).data[c];
                out.data[r * m + c] += b;
            }
        }
        self.push(Op::AddRow, vec![x, bias], out)
    }

    /// `x ⊙ m` with `m` broadcast over rows (`[n,m] * [1,m]`).
    pub fn mul_row(&mut self, x: Var, mask: Var) -> Var {
        let (n, m) = (self.value(x).rows, self.value(x).cols);
        assert_eq!((self.value(mask).rows, self.value(mask).cols), (1, m));
        let mut out = self.value(x).clone();
        for r in 0..n {
            for c in 0..m {
                let f = self.value(mask).data[c];
                out.data[r * m + c] = out.data[r * m + c] * f;
            }
        }
        self.push(Op::MulRow, vec![x, mask], out)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        softmax_rows(&mut out);
        self.push(Op::Softmax, vec![x], out)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let mut m = row[0];
            for &v in row.iter() {
                m = m.maxr(v);
            }
            let mut s = F::ZERO;
            for v in row.iter() {
                s += (*v - m).exp();
            }
            let lse = m + s.ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        self.push(Op::LogSoftmax, vec![x], out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(Op::Tanh, a, |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(Op::Sigmoid, a, |x| F::ONE / (F::ONE + (-x).exp()))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(Op::Exp, a, |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(Op::Ln, a, |x| x.ln())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(Op::Relu, a, |x| x.maxr(F::ZERO))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(Op::Square, a, |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(Op::Sqrt, a, |x| x.sqrt())
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(Op::Clamp { lo, hi }, a, |x| {
            x.maxr(F::from_f64(lo)).minr(F::from_f64(hi))
        })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data.iter().copied().sum();
        self.push(Op::SumAll, vec![a], Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s: F = self.value(a).data.iter().copied().sum();
        self.push(Op::MeanAll, vec![a], Tensor::scalar(s / F::from_f64(n as f64)))
    }

    pub fn max_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut argmax = 0usize;
        for (i, &x) in v.data.iter().enumerate() {
            if x > v.data[argmax] {
                argmax = i;
            }
        }
        let m = v.data[argmax];
        self.push(Op::MaxAll { argmax }, vec![a], Tensor::scalar(m))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut row_counts = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows col mismatch");
            row_counts.push(t.rows);
            data.extend_from_slice(&t.data);
        }
        let rows = row_counts.iter().sum();
        self.push(
            Op::ConcatRows { row_counts },
            parts.to_vec(),
            Tensor { rows, cols, data },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let mut col_counts = Vec::with_capacity(parts.len());
        for &p in parts {
            assert_eq!(self.value(p).rows, rows, "concat_cols row mismatch");
            col_counts.push(self.value(p).cols);
        }
        let cols: usize = col_counts.iter().sum();
        let mut data = vec![F::ZERO; rows * cols];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            for r in 0..rows {
                data[r * cols + off..r * cols + off + t.cols]
                    .copy_from_slice(&t.data[r * t.cols..(r + 1) * t.cols]);
            }
            off += t.cols;
        }
        self.push(
            Op::ConcatCols { col_counts },
            parts.to_vec(),
            Tensor { rows, cols, data },
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.rows, "slice_rows out of range");
        let out = Tensor {
            rows: len,
            cols: t.cols,
            data: t.data[start * t.cols..(start + len) * t.cols].to_vec(),
        };
        self.push(Op::SliceRows { start }, vec![x], out)
    }

    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Var {
        let t = self.value(x);
        let mut data = Vec::with_capacity(indices.len() * t.cols);
        for &i in &indices {
            assert!(i < t.rows, "gather_rows index {i} out of {}", t.rows);
            data.extend_from_slice(&t.data[i * t.cols..(i + 1) * t.cols]);
        }
        let out = Tensor {
            rows: indices.len(),
            cols: t.cols,
            data,
        };
        self.push(Op::GatherRows { indices }, vec![x], out)
    }

    /// Repeats each row `times` times consecutively: `[n,m] -> [n*times, m]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let t = self.value(x);
        let mut data = Vec::with_capacity(t.rows * times * t.cols);
        for r in 0..t.rows {
            for _ in 0..times {
                data.extend_from_slice(&t.data[r * t.cols..(r + 1) * t.cols]);
            }
        }
        let out = Tensor {
            rows: t.rows * times,
            cols: t.cols,
            data,
        };
        self.push(Op::RepeatRows { times }, vec![x], out)
    }

    /// Mean over consecutive row groups: `[g*s, m] -> [g, m]`.
    pub fn mean_groups(&mut self, x: Var, group_size: usize) -> Var {
        let t = self.value(x);
        assert!(group_size > 0 && t.rows % group_size == 0, "mean_groups size");
        let g = t.rows / group_size;
        let mut out = Tensor::zeros(g, t.cols);
        for gi in 0..g {
            for r in 0..group_size {
                for c in 0..t.cols {
                    let v = t.data[(gi * group_size + r) * t.cols + c];
                    out.data[gi * t.cols + c] += v;
                }
            }
        }
        let inv = F::ONE / F::from_f64(group_size as f64);
        for v in out.data.iter_mut() {
            *v = *v * inv;
        }
        self.push(Op::MeanGroups { group_size }, vec![x], out)
    }

    /// Outer product of two row vectors: `[1,n] ⊗ [1,m] -> [n,m]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rows, 1, "outer lhs must be a row vector");
        assert_eq!(tb.rows, 1, "outer rhs must be a row vector");
        let (n, m) = (ta.cols, tb.cols);
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                out.data[i * m + j] = ta.data[i] * tb.data[j];
            }
        }
        self.push(Op::Outer, vec![a, b], out)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.cols, t.rows);
        for r in 0..t.rows {
            for c in 0..t.cols {
                out.data[c * t.rows + r] = t.data[r * t.cols + c];
            }
        }
        self.push(Op::Transpose, vec![x], out)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), rows * cols, "reshape size mismatch");
        let out = Tensor {
            rows,
            cols,
            data: t.data.clone(),
        };
        self.push(Op::Reshape, vec![x], out)
    }

    /// `-(1/P) Σ_i x[r_i, c_i]`: mean negative log-likelihood when `x` holds
    /// log-probabilities and `(r_i, c_i)` index the target entries.
    pub fn pick_neg_mean(&mut self, x: Var, indices: Vec<(usize, usize)>) -> Var {
        assert!(!indices.is_empty(), "pick_neg_mean needs indices");
        let t = self.value(x);
        let mut s = F::ZERO;
        for &(r, c) in &indices {
            s += t.at(r, c);
        }
        let v = -s / F::from_f64(indices.len() as f64);
        self.push(Op::PickNegMean { indices }, vec![x], Tensor::scalar(v))
    }

    fn attn_forward(&self, spec: &AttnSpec, q: Var, k: Var, v: Var, m: Option<Var>) -> Tensor<F> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qt.cols, kt.cols, "attn q/k width");
        assert_eq!(kt.rows, vt.rows, "attn k/v rows");
        assert_eq!(kt.cols, vt.cols, "attn k/v width");
        let d = qt.cols;
        assert!(d % spec.heads == 0, "width {d} not divisible by {} heads", spec.heads);
        let dh = d / spec.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mt = m.map(|mv| self.value(mv));
        let mut out = Tensor::zeros(qt.rows, d);
        for (gi, (qr, kr)) in spec.groups.iter().enumerate() {
            let (nq, nk) = (qr.len(), kr.len());
            if let Some(mm) = mt {
                assert_eq!(mm.cols, nk, "mask width {} vs {} keys", mm.cols, nk);
            }
            let mut scores = vec![F::ZERO; nq * nk];
            for h in 0..spec.heads {
                let hoff = h * dh;
                // scores = q k^T * scale
                for (i, &qi) in qr.iter().enumerate() {
                    for (j, &kj) in kr.iter().enumerate() {
                        let mut dot = F::ZERO;
                        for c in 0..dh {
                            dot += qt.data[qi * d + hoff + c] * kt.data[kj * d + hoff + c];
                        }
                        scores[i * nk + j] = dot * scale;
                    }
                }
                let mut probs = Tensor::from_vec(nq, nk, scores.clone());
                softmax_rows(&mut probs);
                if let Some(mm) = mt {
                    let mrow = spec.mask_rows[gi];
                    for i in 0..nq {
                        for j in 0..nk {
                            probs.data[i * nk + j] =
                                probs.data[i * nk + j] * mm.data[mrow * mm.cols + j];
                        }
                    }
                }
                for (i, &qi) in qr.iter().enumerate() {
                    for (j, &kj) in kr.iter().enumerate() {
                        let p = probs.data[i * nk + j];
                        for c in 0..dh {
                            out.data[qi * d + hoff + c] += p * vt.data[kj * d + hoff + c];
                        }
                    }
                }
            }
        }
        out
    }

    fn attn_node(&mut self, spec: AttnSpec, q: Var, k: Var, v: Var, m: Option<Var>) -> Var {
        let out = self.attn_forward(&spec, q, k, v, m);
        let mut inputs = vec![q, k, v];
        if let Some(mv) = m {
            inputs.push(mv);
        }
        self.push(Op::Attn(spec), inputs, out)
    }

    /// Standard (optionally masked) multi-head attention over full rows.
    /// `mask` is `[1, n_k]`, multiplied into each post-softmax row.
    pub fn attn_full(&mut self, q: Var, k: Var, v: Var, mask: Option<Var>, heads: usize) -> Var {
        let nq = self.value(q).rows;
        let nk = self.value(k).rows;
        let spec = AttnSpec {
            groups: vec![((0..nq).collect(), (0..nk).collect())],
            mask_rows: vec![0],
            heads,
        };
        self.attn_node(spec, q, k, v, mask)
    }

    /// Per-frame attention over cells. Rows are laid out frame-major
    /// (`row = f*cells + p`); `mask` is `[frames, cells]`.
    pub fn attn_within_frames(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<Var>,
        frames: usize,
        cells: usize,
        heads: usize,
    ) -> Var {
        assert_eq!(self.value(q).rows, frames * cells, "attn_within rows");
        let groups = (0..frames)
            .map(|f| {
                let rows: Vec<usize> = (0..cells).map(|p| f * cells + p).collect();
                (rows.clone(), rows)
            })
            .collect();
        let spec = AttnSpec {
            groups,
            mask_rows: (0..frames).collect(),
            heads,
        };
        self.attn_node(spec, q, k, v, mask)
    }

    /// Per-cell attention across frames. Rows are frame-major; `mask` is
    /// `[1, frames]` and is shared by every cell position.
    pub fn attn_across_frames(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<Var>,
        frames: usize,
        cells: usize,
        heads: usize,
    ) -> Var {
        assert_eq!(self.value(q).rows, frames * cells, "attn_across rows");
        let groups = (0..cells)
            .map(|p| {
                let rows: Vec<usize> = (0..frames).map(|f| f * cells + p).collect();
                (rows.clone(), rows)
            })
            .collect();
        let spec = AttnSpec {
            groups,
            mask_rows: vec![0; cells],
            heads,
        };
        self.attn_node(spec, q, k, v, mask)
    }

    /// Reverse-mode sweep from `loss` (a 1x1 node). Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0 as usize] = Some(Tensor::scalar(F::ONE));
        for id in (0..=loss.0 as usize).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn add_grad(&self, grads: &mut [Option<Tensor<F>>], v: Var, delta: Tensor<F>) {
        if !self.nodes[v.0 as usize].needs_grad {
            return;
        }
        match &mut grads[v.0 as usize] {
            Some(g) => {
                debug_assert_eq!((g.rows, g.cols), (delta.rows, delta.cols));
                for (a, b) in g.data.iter_mut().zip(delta.data.iter()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, id: usize, g: &Tensor<F>, grads: &mut Vec<Option<Tensor<F>>>) {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let val = |v: Var| &self.nodes[v.0 as usize].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                self.add_grad(grads, ins[0], g.clone());
                self.add_grad(grads, ins[1], g.clone());
            }
            Op::Sub => {
                self.add_grad(grads, ins[0], g.clone());
                let mut d = g.clone();
                for v in d.data.iter_mut() {
                    *v = -*v;
                }
                self.add_grad(grads, ins[1], d);
            }
            Op::Mul => {
                let (a, b) = (val(ins[0]), val(ins[1]));
                let da = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(b.data.iter()).map(|(&x, &y)| x * y).collect(),
                };
                let db = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(a.data.iter()).map(|(&x, &y)| x * y).collect(),
                };
                self.add_grad(grads, ins[0], da);
                self.add_grad(grads, ins[1], db);
            }
            Op::Div => {
                let (a, b) = (val(ins[0]), val(ins[1]));
                let da = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g.data.iter().zip(b.data.iter()).map(|(&x, &y)| x / y).collect(),
                };
                let db = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(a.data.iter().zip(b.data.iter()))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect(),
                };
                self.add_grad(grads, ins[0], da);
                self.add_grad(grads, ins[1], db);
            }
            Op::Neg => {
                let mut d = g.clone();
                for v in d.data.iter_mut() {
                    *v = -*v;
                }
                self.add_grad(grads, ins[0], d);
            }
            Op::AddConst(_) => self.add_grad(grads, ins[0], g.clone()),
            Op::MulConst(c) => {
                let mut d = g.clone();
                let cf = F::from_f64(*c);
                for v in d.data.iter_mut() {
                    *v = *v * cf;
                }
                self.add_grad(grads, ins[0], d);
            }
            Op::BinScalar(kind) => {
                let (a, s) = (val(ins[0]), val(ins[1]).item());
                let (da, ds) = match kind {
                    ScalarBin::Add => (g.clone(), g.data.iter().copied().sum()),
                    ScalarBin::Sub => (g.clone(), -g.data.iter().copied().sum::<F>()),
                    ScalarBin::Mul => {
                        let mut d = g.clone();
                        for v in d.data.iter_mut() {
                            *v = *v * s;
                        }
                        let ds = g
                            .data
                            .iter()
                            .zip(a.data.iter())
                            .map(|(&gv, &av)| gv * av)
                            .sum();
                        (d, ds)
                    }
                    ScalarBin::Div => {
                        let mut d = g.clone();
                        for v in d.data.iter_mut() {
                            *v = *v / s;
                        }
                        let ds = g
                            .data
                            .iter()
                            .zip(a.data.iter())
                            .map(|(&gv, &av)| -gv * av / (s * s))
                            .sum();
                        (d, ds)
                    }
                };
                self.add_grad(grads, ins[0], da);
                self.add_grad(grads, ins[1], Tensor::scalar(ds));
            }
            Op::MatMul { ta, tb } => {
                let (a, b) = (val(ins[0]), val(ins[1]));
                // Standard four cases; derive from C = op(A)·op(B).
                if self.nodes[ins[0].0 as usize].needs_grad {
                    let mut da = Tensor::zeros(a.rows, a.cols);
                    match (ta, tb) {
                        (false, false) => gemm_into(g, false, b, true, &mut da, F::ONE, F::ZERO),
                        (false, true) => gemm_into(g, false, b, false, &mut da, F::ONE, F::ZERO),
                        (true, false) => gemm_into(b, false, g, true, &mut da, F::ONE, F::ZERO),
                        (true, true) => gemm_into(b, true, g, true, &mut da, F::ONE, F::ZERO),
                    }
                    self.add_grad(grads, ins[0], da);
                }
                if self.nodes[ins[1].0 as usize].needs_grad {
                    let mut db = Tensor::zeros(b.rows, b.cols);
                    match (ta, tb) {
                        (false, false) => gemm_into(a, true, g, false, &mut db, F::ONE, F::ZERO),
                        (false, true) => gemm_into(g, true, a, false, &mut db, F::ONE, F::ZERO),
                        (true, false) => gemm_into(a, false, g, false, &mut db, F::ONE, F::ZERO),
                        (true, true) => gemm_into(g, true, a, true, &mut db, F::ONE, F::ZERO),
                    }
                    self.add_grad(grads, ins[1], db);
                }
            }
            Op::AddRow => {
                self.add_grad(grads, ins[0], g.clone());
                let m = g.cols;
                let mut dr = Tensor::zeros(1, m);
                for r in 0..g.rows {
                    for c in 0..m {
                        dr.data[c] += g.data[r * m + c];
                    }
                }
                self.add_grad(grads, ins[1], dr);
            }
            Op::MulRow => {
                let (a, mask) = (val(ins[0]), val(ins[1]));
                let m = g.cols;
                let mut da = g.clone();
                for r in 0..g.rows {
                    for c in 0..m {
                        da.data[r * m + c] = da.data[r * m + c] * mask.data[c];
                    }
                }
                self.add_grad(grads, ins[0], da);
                let mut dm = Tensor::zeros(1, m);
                for r in 0..g.rows {
                    for c in 0..m {
                        dm.data[c] += g.data[r * m + c] * a.data[r * m + c];
                    }
                }
                self.add_grad(grads, ins[1], dm);
            }
            Op::Softmax => {
                let p = &node.value;
                let mut dx = Tensor::zeros(p.rows, p.cols);
                for r in 0..p.rows {
                    let mut dot = F::ZERO;
                    for c in 0..p.cols {
                        dot += g.data[r * p.cols + c] * p.data[r * p.cols + c];
                    }
                    for c in 0..p.cols {
                        let i = r * p.cols + c;
                        dx.data[i] = p.data[i] * (g.data[i] - dot);
                    }
                }
                self.add_grad(grads, ins[0], dx);
            }
            Op::LogSoftmax => {
                let lp = &node.value;
                let mut dx = Tensor::zeros(lp.rows, lp.cols);
                for r in 0..lp.rows {
                    let mut gsum = F::ZERO;
                    for c in 0..lp.cols {
                        gsum += g.data[r * lp.cols + c];
                    }
                    for c in 0..lp.cols {
                        let i = r * lp.cols + c;
                        dx.data[i] = g.data[i] - lp.data[i].exp() * gsum;
                    }
                }
                self.add_grad(grads, ins[0], dx);
            }
            Op::Tanh => {
                let y = &node.value;
                let d = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(y.data.iter())
                        .map(|(&gv, &yv)| gv * (F::ONE - yv * yv))
                        .collect(),
                };
                self.add_grad(grads, ins[0], d);
            }
            Op::Sigmoid => {
                let y = &node.value;
                let d = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(y.data.iter())
                        .map(|(&gv, &yv)| gv * yv * (F::ONE - yv))
                        .collect(),
                };
                self.add_grad(grads, ins[0], d);
            }
            Op::Exp => {
                let y = &node.value;
                let d = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(y.data.iter())
                        .map(|(&gv, &yv)| gv * yv)
                        .collect(),
                };
                self.add_grad(grads, ins[0], d);
            }
            Op::Ln => {
                let x = val(ins[0]);
                let d = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(x.data.iter())
                        .map(|(&gv, &xv)| gv / xv)
                        .collect(),
                };
                self.add_grad(grads, ins[0], d);
            }
            Op::Relu => {
                let x = val(ins[0]);
                let d = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(x.data.iter())
                        .map(|(&gv, &xv)| if xv > F::ZERO { gv } else { F::ZERO })
                        .collect(),
                };
                self.add_grad(grads, ins[0], d);
            }
            Op::Square => {
                let x = val(ins[0]);
                let two = F::from_f64(2.0);
                let d = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(x.data.iter())
                        .map(|(&gv, &xv)| gv * two * xv)
                        .collect(),
                };
                self.add_grad(grads, ins[0], d);
            }
            Op::Sqrt => {
                let y = &node.value;
                let half = F::from_f64(0.5);
                let d = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(y.data.iter())
                        .map(|(&gv, &yv)| gv * half / yv)
                        .collect(),
                };
                self.add_grad(grads, ins[0], d);
            }
            Op::Clamp { lo, hi } => {
                let x = val(ins[0]);
                let (lo, hi) = (F::from_f64(*lo), F::from_f64(*hi));
                let d = Tensor {
                    rows: g.rows,
                    cols: g.cols,
                    data: g
                        .data
                        .iter()
                        .zip(x.data.iter())
                        .map(|(&gv, &xv)| if xv >= lo && xv <= hi { gv } else { F::ZERO })
                        .collect(),
                };
                self.add_grad(grads, ins[0], d);
            }
            Op::SumAll => {
                let x = val(ins[0]);
                let gv = g.item();
                self.add_grad(grads, ins[0], Tensor::full(x.rows, x.cols, gv));
            }
            Op::MeanAll => {
                let x = val(ins[0]);
                let gv = g.item() / F::from_f64(x.len() as f64);
                self.add_grad(grads, ins[0], Tensor::full(x.rows, x.cols, gv));
            }
            Op::MaxAll { argmax } => {
                let x = val(ins[0]);
                let mut d = Tensor::zeros(x.rows, x.cols);
                d.data[*argmax] = g.item();
                self.add_grad(grads, ins[0], d);
            }
            Op::Max2 | Op::Min2 => {
                let is_max = matches!(node.op, Op::Max2);
                let (a, b) = (val(ins[0]), val(ins[1]));
                let mut da = Tensor::zeros(g.rows, g.cols);
                let mut db = Tensor::zeros(g.rows, g.cols);
                for i in 0..g.data.len() {
                    let a_wins = if is_max {
                        a.data[i] >= b.data[i]
                    } else {
                        a.data[i] <= b.data[i]
                    };
                    if a_wins {
                        da.data[i] = g.data[i];
                    } else {
                        db.data[i] = g.data[i];
                    }
                }
                self.add_grad(grads, ins[0], da);
                self.add_grad(grads, ins[1], db);
            }
            Op::ConcatRows { row_counts } => {
                let mut start = 0usize;
                for (i, &rc) in row_counts.iter().enumerate() {
                    let d = Tensor {
                        rows: rc,
                        cols: g.cols,
                        data: g.data[start * g.cols..(start + rc) * g.cols].to_vec(),
                    };
                    self.add_grad(grads, ins[i], d);
                    start += rc;
                }
            }
            Op::ConcatCols { col_counts } => {
                let mut off = 0usize;
                for (i, &cc) in col_counts.iter().enumerate() {
                    let mut d = Tensor::zeros(g.rows, cc);
                    for r in 0..g.rows {
                        d.data[r * cc..(r + 1) * cc]
                            .copy_from_slice(&g.data[r * g.cols + off..r * g.cols + off + cc]);
                    }
                    self.add_grad(grads, ins[i], d);
                    off += cc;
                }
            }
            Op::SliceRows { start } => {
                let x = val(ins[0]);
                let mut d = Tensor::zeros(x.rows, x.cols);
                d.data[start * x.cols..(start + g.rows) * x.cols].copy_from_slice(&g.data);
                self.add_grad(grads, ins[0], d);
            }
            Op::GatherRows { indices } => {
                let x = val(ins[0]);
                let mut d = Tensor::zeros(x.rows, x.cols);
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..x.cols {
                        d.data[i * x.cols + c] += g.data[r * x.cols + c];
                    }
                }
                self.add_grad(grads, ins[0], d);
            }
            Op::RepeatRows { times } => {
                let x = val(ins[0]);
                let mut d = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    for t in 0..*times {
                        for c in 0..x.cols {
                            d.data[r * x.cols + c] += g.data[(r * times + t) * x.cols + c];
                        }
                    }
                }
                self.add_grad(grads, ins[0], d);
            }
            Op::MeanGroups { group_size } => {
                let x = val(ins[0]);
                let inv = F::ONE / F::from_f64(*group_size as f64);
                let mut d = Tensor::zeros(x.rows, x.cols);
                for gi in 0..g.rows {
                    for r in 0..*group_size {
                        for c in 0..x.cols {
                            d.data[(gi * group_size + r) * x.cols + c] =
                                g.data[gi * g.cols + c] * inv;
                        }
                    }
                }
                self.add_grad(grads, ins[0], d);
            }
            Op::Outer => {
                let (a, b) = (val(ins[0]), val(ins[1]));
                let (n, m) = (a.cols, b.cols);
                let mut da = Tensor::zeros(1, n);
                let mut db = Tensor::zeros(1, m);
                for i in 0..n {
                    for j in 0..m {
                        da.data[i] += g.data[i * m + j] * b.data[j];
                        db.data[j] += g.data[i * m + j] * a.data[i];
                    }
                }
                self.add_grad(grads, ins[0], da);
                self.add_grad(grads, ins[1], db);
            }
            Op::Transpose => {
                let mut d = Tensor::zeros(g.cols, g.rows);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        d.data[c * g.rows + r] = g.data[r * g.cols + c];
                    }
                }
                self.add_grad(grads, ins[0], d);
            }
            Op::Reshape => {
                let x = val(ins[0]);
                let d = Tensor {
                    rows: x.rows,
                    cols: x.cols,
                    data: g.data.clone(),
                };
                self.add_grad(grads, ins[0], d);
            }
            Op::PickNegMean { indices } => {
                let x = val(ins[0]);
                let gv = -g.item() / F::from_f64(indices.len() as f64);
                let mut d = Tensor::zeros(x.rows, x.cols);
                for &(r, c) in indices {
                    d.data[r * x.cols + c] += gv;
                }
                self.add_grad(grads, ins[0], d);
            }
            Op::Attn(spec) => {
                self.attn_backward(spec, ins, g, grads);
            }
        }
    }

    /// Backward for fused attention; recomputes each group's softmax from the
    /// stored Q/K/M inputs rather than keeping probabilities on the tape.
    fn attn_backward(
        &self,
        spec: &AttnSpec,
        ins: &[Var],
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (qt, kt, vt) = (
            &self.nodes[ins[0].0 as usize].value,
            &self.nodes[ins[1].0 as usize].value,
            &self.nodes[ins[2].0 as usize].value,
        );
        let mt = ins.get(3).map(|mv| &self.nodes[mv.0 as usize].value);
        let d = qt.cols;
        let dh = d / spec.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut dq = Tensor::zeros(qt.rows, d);
        let mut dk = Tensor::zeros(kt.rows, d);
        let mut dv = Tensor::zeros(vt.rows, d);
        let mut dm = mt.map(|m| Tensor::zeros(m.rows, m.cols));

        for (gi, (qr, kr)) in spec.groups.iter().enumerate() {
            let (nq, nk) = (qr.len(), kr.len());
            for h in 0..spec.heads {
                let hoff = h * dh;
                // Recompute P = softmax(QK^T * scale).
                let mut p = Tensor::zeros(nq, nk);
                for (i, &qi) in qr.iter().enumerate() {
                    for (j, &kj) in kr.iter().enumerate() {
                        let mut dot = F::ZERO;
                        for c in 0..dh {
                            dot += qt.data[qi * d + hoff + c] * kt.data[kj * d + hoff + c];
                        }
                        p.data[i * nk + j] = dot * scale;
                    }
                }
                softmax_rows(&mut p);

                // dPm[i][j] = dO[i] · V[j];  dV[j] += Pm[i][j] * dO[i]
                let mrow = spec.mask_rows[gi];
                let maskv = |j: usize| -> F {
                    match mt {
                        Some(m) => m.data[mrow * m.cols + j],
                        None => F::ONE,
                    }
                };
                let mut dpm = Tensor::zeros(nq, nk);
                for (i, &qi) in qr.iter().enumerate() {
                    for (j, &kj) in kr.iter().enumerate() {
                        let mut dot = F::ZERO;
                        for c in 0..dh {
                            dot += g.data[qi * d + hoff + c] * vt.data[kj * d + hoff + c];
                        }
                        dpm.data[i * nk + j] = dot;
                        let pm = p.data[i * nk + j] * maskv(j);
                        for c in 0..dh {
                            dv.data[kj * d + hoff + c] += pm * g.data[qi * d + hoff + c];
                        }
                    }
                }
                // dM[j] += Σ_i dPm[i][j] * P[i][j];  dP = dPm ⊙ M
                if let Some(dmt) = dm.as_mut() {
                    for i in 0..nq {
                        for j in 0..nk {
                            dmt.data[mrow * dmt.cols + j] += dpm.data[i * nk + j] * p.data[i * nk + j];
                        }
                    }
                }
                // softmax backward: dS = P ⊙ (dP - rowsum(dP ⊙ P))
                let mut ds = Tensor::zeros(nq, nk);
                for i in 0..nq {
                    let mut dot = F::ZERO;
                    for j in 0..nk {
                        let dp = dpm.data[i * nk + j] * maskv(j);
                        dot += dp * p.data[i * nk + j];
                    }
                    for j in 0..nk {
                        let dp = dpm.data[i * nk + j] * maskv(j);
                        ds.data[i * nk + j] = p.data[i * nk + j] * (dp - dot);
                    }
                }
                // dQ += dS K * scale; dK += dS^T Q * scale
                for (i, &qi) in qr.iter().enumerate() {
                    for (j, &kj) in kr.iter().enumerate() {
                        let s = ds.data[i * nk + j] * scale;
                        for c in 0..dh {
                            dq.data[qi * d + hoff + c] += s * kt.data[kj * d + hoff + c];
                            dk.data[kj * d + hoff + c] += s * qt.data[qi * d + hoff + c];
                        }
                    }
                }
            }
        }
        self.add_grad(grads, ins[0], dq);
        self.add_grad(grads, ins[1], dk);
        self.add_grad(grads, ins[2], dv);
        if let (Some(dmt), Some(&mv)) = (dm, ins.get(3)) {
            self.add_grad(grads, mv, dmt);
        }
    }
}

/// Scalar-broadcast binary op selector for [`Tape::bin_scalar`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarBinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    /// Finite-difference check for a scalar-valued builder over leaf tensors.
    fn check<Builder>(leaf_shapes: &[(usize, usize)], seed: u64, build: Builder)
    where
        Builder: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let leaves: Vec<Tensor<f64>> = leaf_shapes
            .iter()
            .map(|&(r, c)| {
                Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-0.9..0.9)).collect())
            })
            .collect();

        let eval = |data: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = data
                .iter()
                .zip(leaf_shapes)
                .map(|(d, &(r, c))| tape.param(Tensor::from_vec(r, c, d.clone())))
                .collect();
            let loss = build(&mut tape, &vars);
            tape.value(loss).item()
        };

        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);

        let base: Vec<Vec<f64>> = leaves.iter().map(|t| t.data.clone()).collect();
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let got = grads.get(vars[li]).expect("missing grad").clone();
            for i in 0..leaf.data.len() {
                let mut plus = base.clone();
                plus[li][i] += eps;
                let mut minus = base.clone();
                minus[li][i] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = got.data[i];
                let denom = fd.abs().max(a.abs()).max(1e-6);
                assert!(
                    (a - fd).abs() / denom < 1e-5,
                    "leaf {li} elem {i}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        check(&[(2, 3), (2, 3)], 1, |t, v| {
            let a = t.mul(v[0], v[1]);
            let b = t.tanh(a);
            let c = t.sigmoid(b);
            let d = t.square(c);
            t.sum_all(d)
        });
    }

    #[test]
    fn grad_div_exp_ln() {
        check(&[(2, 2), (2, 2)], 2, |t, v| {
            let shifted = t.add_const(v[1], 3.0); // keep denominators away from 0
            let d = t.div(v[0], shifted);
            let e = t.exp(d);
            let l = t.ln(e);
            t.mean_all(l)
        });
    }

    #[test]
    fn grad_matmul_all_transposes() {
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            check(&[(3, 4), (4, 2)], 3, |t, v| {
                let a = if ta { t.transpose(v[0]) } else { v[0] };
                let b = if tb { t.transpose(v[1]) } else { v[1] };
                let m = t.matmul_t(a, ta, b, tb);
                t.sum_all(m)
            });
        }
    }

    #[test]
    fn grad_softmax_logsoftmax() {
        check(&[(3, 5)], 4, |t, v| {
            let s = t.softmax(v[0]);
            let l = t.log_softmax(v[0]);
            let m = t.mul(s, l);
            t.sum_all(m)
        });
    }

    #[test]
    fn grad_rows_and_broadcast() {
        check(&[(4, 3), (1, 3), (1, 3)], 5, |t, v| {
            let a = t.add_row(v[0], v[1]);
            let b = t.mul_row(a, v[2]);
            t.sum_all(b)
        });
    }

    #[test]
    fn grad_bin_scalar() {
        check(&[(2, 3), (1, 1)], 6, |t, v| {
            let shifted = t.add_const(v[1], 2.0);
            let a = t.bin_scalar(ScalarBinOp::Div, v[0], shifted);
            let b = t.bin_scalar(ScalarBinOp::Mul, a, v[1]);
            let c = t.bin_scalar(ScalarBinOp::Sub, b, v[1]);
            t.sum_all(c)
        });
    }

    #[test]
    fn grad_shape_ops() {
        check(&[(4, 3), (2, 3)], 7, |t, v| {
            let g = t.gather_rows(v[0], vec![0, 2, 2, 3]);
            let s = t.slice_rows(g, 1, 2);
            let c = t.concat_rows(&[s, v[1]]);
            let r = t.repeat_rows(c, 2);
            let m = t.mean_groups(r, 4);
            let tr = t.transpose(m);
            let rs = t.reshape(tr, 2, 3);
            t.sum_all(rs)
        });
    }

    #[test]
    fn grad_concat_cols_outer() {
        check(&[(1, 3), (1, 2)], 8, |t, v| {
            let o = t.outer(v[0], v[1]);
            let s = t.sum_all(o);
            let c = t.concat_cols(&[v[0], v[1]]);
            let cs = t.sum_all(c);
            let sq = t.mul(s, cs);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_reductions_and_clamp() {
        check(&[(3, 3)], 9, |t, v| {
            let c = t.clamp(v[0], -0.5, 0.5);
            let m = t.max_all(v[0]);
            let s = t.mean_all(c);
            let r = t.relu(v[0]);
            let rs = t.sum_all(r);
            let a = t.add(s, m);
            t.add(a, rs)
        });
    }

    #[test]
    fn grad_max2_min2() {
        check(&[(2, 4), (2, 4)], 10, |t, v| {
            let mx = t.max2(v[0], v[1]);
            let mn = t.min2(v[0], v[1]);
            let d = t.sub(mx, mn);
            t.sum_all(d)
        });
    }

    #[test]
    fn grad_pick_neg_mean() {
        check(&[(3, 4)], 11, |t, v| {
            let lp = t.log_softmax(v[0]);
            t.pick_neg_mean(lp, vec![(0, 1), (1, 3), (2, 0)])
        });
    }

    #[test]
    fn grad_attn_full_masked() {
        check(&[(3, 4), (5, 4), (5, 4), (1, 5)], 12, |t, v| {
            let m = t.sigmoid(v[3]); // keep mask positive
            let o = t.attn_full(v[0], v[1], v[2], Some(m), 2);
            let sq = t.square(o);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_attn_within_and_across() {
        // 2 frames x 3 cells, width 4, 2 heads.
        check(&[(6, 4), (2, 3), (1, 2)], 13, |t, v| {
            let ms = t.sigmoid(v[1]);
            let w = t.attn_within_frames(v[0], v[0], v[0], Some(ms), 2, 3, 2);
            let mt = t.sigmoid(v[2]);
            let a = t.attn_across_frames(w, w, w, Some(mt), 2, 3, 2);
            let s = t.square(a);
            t.sum_all(s)
        });
    }

    #[test]
    fn attn_full_matches_unfused_ops() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let q = Tensor::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let k = Tensor::from_vec(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let v = Tensor::from_vec(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let m = Tensor::row_vec((0..5).map(|_| rng.gen_range(0.1..1.0)).collect());

        let mut tape = Tape::<f64>::new();
        let (qv, kv, vv, mv) = (
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
            tape.constant(m.clone()),
        );
        let fused = tape.attn_full(qv, kv, vv, Some(mv), 1);

        // Unfused: softmax(QK^T / sqrt(d)) ⊙ M, then · V.
        let scores = tape.matmul_t(qv, false, kv, true);
        let scaled = tape.mul_const(scores, 1.0 / 2.0);
        let probs = tape.softmax(scaled);
        let masked = tape.mul_row(probs, mv);
        let reference = tape.matmul(masked, vv);

        let (a, b) = (tape.value(fused), tape.value(reference));
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_leaves_receive_no_grad() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let p = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(c, p);
        let grads = tape.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().item(), 2.0);
    }
}
