//! Tape-based reverse-mode automatic differentiation over dense
//! row-major tensors of rank 1..3.
//!
//! A `Tape` records every operation; `Tensor` is a cheap handle (tape +
//! node index). `backward` walks the tape once in reverse topological
//! order, which is the construction order. Shape mismatches panic with
//! both shapes in the message.

use std::cell::RefCell;
use std::fmt::Debug;
use std::rc::Rc;

use num_traits::Float;

/// Element type for the engine: `f32` for training/inference, `f64` for
/// gradient checks.
pub trait Scalar: Float + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    /// `(B, C) + (C)` row-broadcast.
    AddRow(usize, usize),
    /// `(B, C) * (C)` row-broadcast.
    MulRow(usize, usize),
    /// `(B, C) * (B, 1)` column-broadcast.
    MulCol(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize, T),
    Matmul(usize, usize),
    /// Batched matmul `(B,N,K) @ (B,K,M)`; with `transpose_b`, the rhs is
    /// `(B,M,K)` and used transposed.
    Bmm {
        a: usize,
        b: usize,
        transpose_b: bool,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    /// Last-axis slice.
    SliceLast {
        src: usize,
        start: usize,
        len: usize,
    },
    /// Row gather on the first axis of a rank-2 tensor.
    GatherRows {
        src: usize,
        indices: Rc<Vec<usize>>,
    },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    SoftmaxLast(usize),
    /// Last-axis layer normalization, pre-affine.
    LayerNorm {
        src: usize,
        eps: f64,
    },
    MeanAll(usize),
    SumAll(usize),
    Clamp {
        src: usize,
        lo: T,
        hi: T,
    },
    Reshape(usize),
    BceWithLogits {
        logits: usize,
        targets: Rc<Vec<T>>,
        mask: Rc<Vec<T>>,
    },
    LogTsdfL1 {
        pred: usize,
        gt: Rc<Vec<T>>,
        mask: Rc<Vec<T>>,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    data: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Operation recorder; cheaply clonable handle.
#[derive(Debug, Clone)]
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tape node.
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    tape: Tape<T>,
    idx: usize,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, data: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Tensor<T> {
        debug_assert_eq!(data.len(), numel(&shape));
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            data,
            shape,
            op,
            requires_grad,
        });
        Tensor {
            tape: self.clone(),
            idx: inner.nodes.len() - 1,
        }
    }

    /// Differentiable leaf (a parameter view).
    pub fn leaf(&self, data: Vec<T>, shape: &[usize]) -> Tensor<T> {
        self.push(data, shape.to_vec(), Op::Leaf, true)
    }

    /// Non-differentiable constant.
    pub fn constant(&self, data: Vec<T>, shape: &[usize]) -> Tensor<T> {
        self.push(data, shape.to_vec(), Op::Leaf, false)
    }

    pub fn constant_f64(&self, data: &[f64], shape: &[usize]) -> Tensor<T> {
        self.constant(data.iter().map(|&v| T::from_f64(v)).collect(), shape)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<T> {
        self.constant(vec![T::zero(); numel(shape)], shape)
    }
}

macro_rules! shape_eq {
    ($what:expr, $a:expr, $b:expr) => {
        assert!(
            $a == $b,
            "{}: shape mismatch {:?} vs {:?}",
            $what,
            $a,
            $b
        );
    };
}

impl<T: Scalar> Tensor<T> {
    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.idx].shape.clone()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape())
    }

    pub fn value(&self) -> Vec<T> {
        self.tape.inner.borrow().nodes[self.idx].data.clone()
    }

    pub fn value_f64(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.idx]
            .data
            .iter()
            .map(|&v| Scalar::to_f64(v))
            .collect()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.idx];
        assert_eq!(node.data.len(), 1, "item() on tensor of shape {:?}", node.shape);
        node.data[0].to_f64()
    }

    #[allow(dead_code)]
    fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.idx].requires_grad
    }

    fn same_tape(&self, other: &Tensor<T>) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "tensors belong to different tapes"
        );
    }

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        self.same_tape(other);
        let inner = self.tape.inner.borrow();
        let (a, b) = (&inner.nodes[self.idx], &inner.nodes[other.idx]);
        shape_eq!("add", a.shape, b.shape);
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
        let shape = a.shape.clone();
        let rg = a.requires_grad || b.requires_grad;
        drop(inner);
        self.tape.push(data, shape, Op::Add(self.idx, other.idx), rg)
    }

    /// `(B, C) + (C)`.
    pub fn add_row(&self, row: &Tensor<T>) -> Tensor<T> {
        self.same_tape(row);
        let inner = self.tape.inner.borrow();
        let (a, b) = (&inner.nodes[self.idx], &inner.nodes[row.idx]);
        let c = *a.shape.last().expect("add_row on scalar");
        shape_eq!("add_row", vec![c], b.shape);
        let data = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b.data[i % c])
            .collect();
        let shape = a.shape.clone();
        let rg = a.requires_grad || b.requires_grad;
        drop(inner);
        self.tape.push(data, shape, Op::AddRow(self.idx, row.idx), rg)
    }

    /// `(B, C) * (C)`.
    pub fn mul_row(&self, row: &Tensor<T>) -> Tensor<T> {
        self.same_tape(row);
        let inner = self.tape.inner.borrow();
        let (a, b) = (&inner.nodes[self.idx], &inner.nodes[row.idx]);
        let c = *a.shape.last().expect("mul_row on scalar");
        shape_eq!("mul_row", vec![c], b.shape);
        let data = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * b.data[i % c])
            .collect();
        let shape = a.shape.clone();
        let rg = a.requires_grad || b.requires_grad;
        drop(inner);
        self.tape.push(data, shape, Op::MulRow(self.idx, row.idx), rg)
    }

    /// `(B, C) * (B, 1)`: per-row scaling.
    pub fn mul_col(&self, col: &Tensor<T>) -> Tensor<T> {
        self.same_tape(col);
        let inner = self.tape.inner.borrow();
        let (a, b) = (&inner.nodes[self.idx], &inner.nodes[col.idx]);
        assert_eq!(a.shape.len(), 2, "mul_col lhs must be rank 2, got {:?}", a.shape);
        let rows = a.shape[0];
        let c = a.shape[1];
        shape_eq!("mul_col", vec![rows, 1], b.shape);
        let mut data = Vec::with_capacity(a.data.len());
        for r in 0..rows {
            let s = b.data[r];
            data.extend(a.data[r * c..(r + 1) * c].iter().map(|&x| x * s));
        }
        let shape = a.shape.clone();
        let rg = a.requires_grad || b.requires_grad;
        drop(inner);
        self.tape.push(data, shape, Op::MulCol(self.idx, col.idx), rg)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        self.same_tape(other);
        let inner = self.tape.inner.borrow();
        let (a, b) = (&inner.nodes[self.idx], &inner.nodes[other.idx]);
        shape_eq!("mul", a.shape, b.shape);
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect();
        let shape = a.shape.clone();
        let rg = a.requires_grad || b.requires_grad;
        drop(inner);
        self.tape.push(data, shape, Op::Mul(self.idx, other.idx), rg)
    }

    pub fn scale(&self, s: f64) -> Tensor<T> {
        let s = T::from_f64(s);
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.idx];
        let data = a.data.iter().map(|&x| x * s).collect();
        let shape = a.shape.clone();
        let rg = a.requires_grad;
        drop(inner);
        self.tape.push(data, shape, Op::Scale(self.idx, s), rg)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::from_f64(s);
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.idx];
        let data = a.data.iter().map(|&x| x + s).collect();
        let shape = a.shape.clone();
        let rg = a.requires_grad;
        drop(inner);
        self.tape.push(data, shape, Op::AddScalar(self.idx, s), rg)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        self.add(&other.scale(-1.0))
    }

    /// `(N, K) @ (K, M)`.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        self.same_tape(other);
        let inner = self.tape.inner.borrow();
        let (a, b) = (&inner.nodes[self.idx], &inner.nodes[other.idx]);
        assert!(
            a.shape.len() == 2 && b.shape.len() == 2 && a.shape[1] == b.shape[0],
            "matmul: incompatible shapes {:?} @ {:?}",
            a.shape,
            b.shape
        );
        let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
        let data = matmul_raw(&a.data, &b.data, n, k, m, false);
        let rg = a.requires_grad || b.requires_grad;
        drop(inner);
        self.tape
            .push(data, vec![n, m], Op::Matmul(self.idx, other.idx), rg)
    }

    /// Batched matmul `(B,N,K) @ (B,K,M)`, or `(B,N,K) @ (B,M,K)` with
    /// `transpose_b`.
    pub fn bmm(&self, other: &Tensor<T>, transpose_b: bool) -> Tensor<T> {
        self.same_tape(other);
        let inner = self.tape.inner.borrow();
        let (a, b) = (&inner.nodes[self.idx], &inner.nodes[other.idx]);
        assert!(
            a.shape.len() == 3 && b.shape.len() == 3 && a.shape[0] == b.shape[0],
            "bmm: incompatible shapes {:?} @ {:?}",
            a.shape,
            b.shape
        );
        let (bs, n, k) = (a.shape[0], a.shape[1], a.shape[2]);
        let m = if transpose_b {
            assert!(
                b.shape[2] == k,
                "bmm(transpose_b): incompatible shapes {:?} @ {:?}",
                a.shape,
                b.shape
            );
            b.shape[1]
        } else {
            assert!(
                b.shape[1] == k,
                "bmm: incompatible shapes {:?} @ {:?}",
                a.shape,
                b.shape
            );
            b.shape[2]
        };
        let mut data = Vec::with_capacity(bs * n * m);
        let bstride = if transpose_b { m * k } else { k * m };
        for bi in 0..bs {
            let ablk = &a.data[bi * n * k..(bi + 1) * n * k];
            let bblk = &b.data[bi * bstride..(bi + 1) * bstride];
            data.extend(matmul_raw(ablk, bblk, n, k, m, transpose_b));
        }
        let rg = a.requires_grad || b.requires_grad;
        drop(inner);
        self.tape.push(
            data,
            vec![bs, n, m],
            Op::Bmm {
                a: self.idx,
                b: other.idx,
                transpose_b,
            },
            rg,
        )
    }

    /// Concatenate along `axis`. All other dims must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let tape = parts[0].tape.clone();
        for p in parts {
            parts[0].same_tape(p);
        }
        let inner = tape.inner.borrow();
        let rank = inner.nodes[parts[0].idx].shape.len();
        assert!(axis < rank, "concat axis {axis} out of range for rank {rank}");
        let mut out_shape = inner.nodes[parts[0].idx].shape.clone();
        out_shape[axis] = 0;
        for p in parts {
            let s = &inner.nodes[p.idx].shape;
            assert_eq!(s.len(), rank, "concat: rank mismatch {:?} vs {:?}", s, out_shape);
            for d in 0..rank {
                if d != axis {
                    assert_eq!(
                        s[d], inner.nodes[parts[0].idx].shape[d],
                        "concat: shape mismatch {:?} vs {:?} on axis {d}",
                        s, inner.nodes[parts[0].idx].shape
                    );
                }
            }
            out_shape[axis] += s[axis];
        }
        // outer = product of dims before axis; inner block = product after
        let outer: usize = out_shape[..axis].iter().product();
        let tail: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for p in parts {
                let node = &inner.nodes[p.idx];
                let blk = node.shape[axis] * tail;
                data.extend_from_slice(&node.data[o * blk..(o + 1) * blk]);
            }
        }
        let rg = parts.iter().any(|p| inner.nodes[p.idx].requires_grad);
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.idx).collect(),
            axis,
        };
        drop(inner);
        tape.push(data, out_shape, op, rg)
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.idx];
        let c = *a.shape.last().expect("slice_last on scalar");
        assert!(
            start + len <= c,
            "slice_last: [{start}, {}) out of last dim {c} (shape {:?})",
            start + len,
            a.shape
        );
        let rows = a.data.len() / c;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&a.data[r * c + start..r * c + start + len]);
        }
        let mut shape = a.shape.clone();
        *shape.last_mut().unwrap() = len;
        let rg = a.requires_grad;
        drop(inner);
        self.tape.push(
            data,
            shape,
            Op::SliceLast {
                src: self.idx,
                start,
                len,
            },
            rg,
        )
    }

    /// Gather rows of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.idx];
        assert_eq!(a.shape.len(), 2, "gather_rows on shape {:?}", a.shape);
        let (rows, c) = (a.shape[0], a.shape[1]);
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            assert!(i < rows, "gather_rows: index {i} out of {rows} rows");
            data.extend_from_slice(&a.data[i * c..(i + 1) * c]);
        }
        let rg = a.requires_grad;
        drop(inner);
        self.tape.push(
            data,
            vec![indices.len(), c],
            Op::GatherRows {
                src: self.idx,
                indices: Rc::new(indices.to_vec()),
            },
            rg,
        )
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.idx];
        let data = a.data.iter().map(|&x| f(x)).collect();
        let shape = a.shape.clone();
        let rg = a.requires_grad;
        drop(inner);
        self.tape.push(data, shape, op, rg)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(Op::Relu(self.idx), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(Op::Sigmoid(self.idx), |x| {
            T::one() / (T::one() + (-x).exp())
        })
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(Op::Tanh(self.idx), |x| x.tanh())
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(Op::Exp(self.idx), |x| x.exp())
    }

    pub fn log(&self) -> Tensor<T> {
        self.unary(Op::Log(self.idx), |x| x.ln())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.idx];
        let data = a
            .data
            .iter()
            .map(|&x| if x < lo { lo } else if x > hi { hi } else { x })
            .collect();
        let shape = a.shape.clone();
        let rg = a.requires_grad;
        drop(inner);
        self.tape.push(
            data,
            shape,
            Op::Clamp {
                src: self.idx,
                lo,
                hi,
            },
            rg,
        )
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.idx];
        let c = *a.shape.last().expect("softmax on scalar");
        let mut data = Vec::with_capacity(a.data.len());
        for row in a.data.chunks(c) {
            let m = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let exps: Vec<T> = row.iter().map(|&x| (x - m).exp()).collect();
            let sum = exps.iter().fold(T::zero(), |acc, &x| acc + x);
            data.extend(exps.iter().map(|&e| e / sum));
        }
        let shape = a.shape.clone();
        let rg = a.requires_grad;
        drop(inner);
        self.tape.push(data, shape, Op::SoftmaxLast(self.idx), rg)
    }

    /// Layer normalization over the last axis, pre-affine.
    pub fn layer_norm(&self, eps: f64) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.idx];
        let c = *a.shape.last().expect("layer_norm on scalar");
        let cn = T::from_f64(c as f64);
        let epst = T::from_f64(eps);
        let mut data = Vec::with_capacity(a.data.len());
        for row in a.data.chunks(c) {
            let mean = row.iter().fold(T::zero(), |acc, &x| acc + x) / cn;
            let var = row
                .iter()
                .fold(T::zero(), |acc, &x| acc + (x - mean) * (x - mean))
                / cn;
            let inv = T::one() / (var + epst).sqrt();
            data.extend(row.iter().map(|&x| (x - mean) * inv));
        }
        let shape = a.shape.clone();
        let rg = a.requires_grad;
        drop(inner);
        self.tape.push(
            data,
            shape,
            Op::LayerNorm {
                src: self.idx,
                eps,
            },
            rg,
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.idx];
        let n = T::from_f64(a.data.len() as f64);
        let sum = a.data.iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = a.requires_grad;
        drop(inner);
        self.tape
            .push(vec![sum / n], vec![1], Op::MeanAll(self.idx), rg)
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.idx];
        let sum = a.data.iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = a.requires_grad;
        drop(inner);
        self.tape.push(vec![sum], vec![1], Op::SumAll(self.idx), rg)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.idx];
        assert_eq!(
            numel(&a.shape),
            numel(shape),
            "reshape: {:?} -> {:?} changes element count",
            a.shape,
            shape
        );
        let data = a.data.clone();
        let rg = a.requires_grad;
        drop(inner);
        self.tape.push(data, shape.to_vec(), Op::Reshape(self.idx), rg)
    }

    /// Mean binary cross-entropy over unmasked entries, stable logit
    /// form. `mask` entries are 0/1; an all-zero mask yields 0 with zero
    /// gradient.
    pub fn bce_with_logits(&self, targets: &[f64], mask: &[f64]) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.idx];
        assert_eq!(
            a.data.len(),
            targets.len(),
            "bce: logits shape {:?} vs {} targets",
            a.shape,
            targets.len()
        );
        assert_eq!(targets.len(), mask.len(), "bce: {} targets vs {} mask", targets.len(), mask.len());
        let t: Vec<T> = targets.iter().map(|&v| T::from_f64(v)).collect();
        let m: Vec<T> = mask.iter().map(|&v| T::from_f64(v)).collect();
        let mut total = T::zero();
        let mut count = T::zero();
        for ((&x, &y), &w) in a.data.iter().zip(&t).zip(&m) {
            if w > T::zero() {
                // max(x,0) - x*y + ln(1 + e^{-|x|})
                let loss = x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln();
                total = total + w * loss;
                count = count + w;
            }
        }
        let val = if count > T::zero() { total / count } else { T::zero() };
        let rg = a.requires_grad;
        drop(inner);
        self.tape.push(
            vec![val],
            vec![1],
            Op::BceWithLogits {
                logits: self.idx,
                targets: Rc::new(t),
                mask: Rc::new(m),
            },
            rg,
        )
    }

    /// Mean `|phi(pred) - phi(gt)|` over unmasked entries with
    /// `phi(s) = sign(s) * ln(1 + |s|)`.
    pub fn log_tsdf_l1(&self, gt: &[f64], mask: &[f64]) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.idx];
        assert_eq!(
            a.data.len(),
            gt.len(),
            "log_tsdf_l1: pred shape {:?} vs {} gt",
            a.shape,
            gt.len()
        );
        assert_eq!(gt.len(), mask.len(), "log_tsdf_l1: {} gt vs {} mask", gt.len(), mask.len());
        let g: Vec<T> = gt.iter().map(|&v| T::from_f64(v)).collect();
        let m: Vec<T> = mask.iter().map(|&v| T::from_f64(v)).collect();
        let mut total = T::zero();
        let mut count = T::zero();
        for ((&p, &gv), &w) in a.data.iter().zip(&g).zip(&m) {
            if w > T::zero() {
                total = total + w * (log_transform(p) - log_transform(gv)).abs();
                count = count + w;
            }
        }
        let val = if count > T::zero() { total / count } else { T::zero() };
        let rg = a.requires_grad;
        drop(inner);
        self.tape.push(
            vec![val],
            vec![1],
            Op::LogTsdfL1 {
                pred: self.idx,
                gt: Rc::new(g),
                mask: Rc::new(m),
            },
            rg,
        )
    }

    /// Reverse pass from this scalar tensor. Returns per-node gradients
    /// indexed like the tape; read leaves with [`Tensor::grad_of`].
    pub fn backward(&self) -> Gradients<T> {
        let inner = self.tape.inner.borrow();
        let nodes = &inner.nodes;
        assert_eq!(
            nodes[self.idx].data.len(),
            1,
            "backward from non-scalar tensor of shape {:?}",
            nodes[self.idx].shape
        );
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[self.idx] = Some(vec![T::one()]);

        for i in (0..=self.idx).rev() {
            if grads[i].is_none() || !nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            backprop_node(nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradient of this tensor recorded in `grads` (zeros if it never
    /// received any).
    pub fn grad_of(&self, grads: &Gradients<T>) -> Vec<T> {
        grads.grads[self.idx]
            .clone()
            .unwrap_or_else(|| vec![T::zero(); self.numel()])
    }
}

/// Per-node gradient storage produced by `backward`.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

fn log_transform<T: Scalar>(s: T) -> T {
    let one = T::one();
    if s >= T::zero() {
        (s + one).ln()
    } else {
        -((-s) + one).ln()
    }
}

/// `(n,k) @ (k,m)` row-major; with `transpose_b` the rhs is `(m,k)`.
fn matmul_raw<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize, transpose_b: bool) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    if transpose_b {
        for i in 0..n {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for l in 0..k {
                    acc = acc + arow[l] * brow[l];
                }
                out[i * m + j] = acc;
            }
        }
    } else {
        for i in 0..n {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for (l, &av) in arow.iter().enumerate() {
                let brow = &b[l * m..(l + 1) * m];
                for j in 0..m {
                    orow[j] = orow[j] + av * brow[j];
                }
            }
        }
    }
    out
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    if slot.is_none() {
        *slot = Some(vec![T::zero(); len]);
    }
    f(slot.as_mut().unwrap());
}

#[allow(clippy::needless_range_loop)]
fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    idx: usize,
    g: &[T],
    grads: &mut Vec<Option<Vec<T>>>,
) {
    let node = &nodes[idx];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &src in &[*a, *b] {
                if nodes[src].requires_grad {
                    accumulate(&mut grads[src], g.len(), |dst| {
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d = *d + gv;
                        }
                    });
                }
            }
        }
        Op::AddRow(a, row) => {
            if nodes[*a].requires_grad {
                accumulate(&mut grads[*a], g.len(), |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                });
            }
            if nodes[*row].requires_grad {
                let c = nodes[*row].data.len();
                accumulate(&mut grads[*row], c, |dst| {
                    for (i, &gv) in g.iter().enumerate() {
                        dst[i % c] = dst[i % c] + gv;
                    }
                });
            }
        }
        Op::MulRow(a, row) => {
            let c = nodes[*row].data.len();
            if nodes[*a].requires_grad {
                let rowd = &nodes[*row].data;
                accumulate(&mut grads[*a], g.len(), |dst| {
                    for (i, &gv) in g.iter().enumerate() {
                        dst[i] = dst[i] + gv * rowd[i % c];
                    }
                });
            }
            if nodes[*row].requires_grad {
                let ad = &nodes[*a].data;
                accumulate(&mut grads[*row], c, |dst| {
                    for (i, &gv) in g.iter().enumerate() {
                        dst[i % c] = dst[i % c] + gv * ad[i];
                    }
                });
            }
        }
        Op::MulCol(a, col) => {
            let rows = nodes[*col].data.len();
            let c = nodes[*a].data.len() / rows;
            if nodes[*a].requires_grad {
                let cold = &nodes[*col].data;
                accumulate(&mut grads[*a], g.len(), |dst| {
                    for r in 0..rows {
                        let s = cold[r];
                        for j in 0..c {
                            dst[r * c + j] = dst[r * c + j] + g[r * c + j] * s;
                        }
                    }
                });
            }
            if nodes[*col].requires_grad {
                let ad = &nodes[*a].data;
                accumulate(&mut grads[*col], rows, |dst| {
                    for r in 0..rows {
                        let mut acc = T::zero();
                        for j in 0..c {
                            acc = acc + g[r * c + j] * ad[r * c + j];
                        }
                        dst[r] = dst[r] + acc;
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                let bd = &nodes[*b].data;
                accumulate(&mut grads[*a], g.len(), |dst| {
                    for i in 0..g.len() {
                        dst[i] = dst[i] + g[i] * bd[i];
                    }
                });
            }
            if nodes[*b].requires_grad {
                let ad = &nodes[*a].data;
                accumulate(&mut grads[*b], g.len(), |dst| {
                    for i in 0..g.len() {
                        dst[i] = dst[i] + g[i] * ad[i];
                    }
                });
            }
        }
        Op::Scale(a, s) => {
            if nodes[*a].requires_grad {
                accumulate(&mut grads[*a], g.len(), |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d + gv * *s;
                    }
                });
            }
        }
        Op::AddScalar(a, _) => {
            if nodes[*a].requires_grad {
                accumulate(&mut grads[*a], g.len(), |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                });
            }
        }
        Op::Matmul(a, b) => {
            let (n, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let m = nodes[*b].shape[1];
            if nodes[*a].requires_grad {
                // dA = G @ B^T : (n,m) @ (m,k)^T-of-(k,m)
                let bd = &nodes[*b].data;
                let da = matmul_transb(g, bd, n, m, k);
                accumulate(&mut grads[*a], n * k, |dst| {
                    for i in 0..dst.len() {
                        dst[i] = dst[i] + da[i];
                    }
                });
            }
            if nodes[*b].requires_grad {
                // dB = A^T @ G : (k,n) @ (n,m)
                let ad = &nodes[*a].data;
                let db = matmul_transa(ad, g, n, k, m);
                accumulate(&mut grads[*b], k * m, |dst| {
                    for i in 0..dst.len() {
                        dst[i] = dst[i] + db[i];
                    }
                });
            }
        }
        Op::Bmm { a, b, transpose_b } => {
            let (bs, n, k) = (nodes[*a].shape[0], nodes[*a].shape[1], nodes[*a].shape[2]);
            let m = node.shape[2];
            let bstride = k * m;
            if nodes[*a].requires_grad {
                let bd = &nodes[*b].data;
                accumulate(&mut grads[*a], bs * n * k, |dst| {
                    for bi in 0..bs {
                        let gblk = &g[bi * n * m..(bi + 1) * n * m];
                        let bblk = &bd[bi * bstride..(bi + 1) * bstride];
                        // transpose_b: B is (m,k); dA = G @ B : (n,m)@(m,k)
                        // else: dA = G @ B^T
                        let da = if *transpose_b {
                            matmul_raw(gblk, bblk, n, m, k, false)
                        } else {
                            matmul_transb(gblk, bblk, n, m, k)
                        };
                        let dblk = &mut dst[bi * n * k..(bi + 1) * n * k];
                        for i in 0..dblk.len() {
                            dblk[i] = dblk[i] + da[i];
                        }
                    }
                });
            }
            if nodes[*b].requires_grad {
                let ad = &nodes[*a].data;
                accumulate(&mut grads[*b], bs * bstride, |dst| {
                    for bi in 0..bs {
                        let gblk = &g[bi * n * m..(bi + 1) * n * m];
                        let ablk = &ad[bi * n * k..(bi + 1) * n * k];
                        // transpose_b: B is (m,k); dB = G^T @ A : (m,n)@(n,k)
                        // else: dB = A^T @ G : (k,n)@(n,m)
                        let db = if *transpose_b {
                            matmul_transa(gblk, ablk, n, m, k)
                        } else {
                            matmul_transa(ablk, gblk, n, k, m)
                        };
                        let dblk = &mut dst[bi * bstride..(bi + 1) * bstride];
                        for i in 0..dblk.len() {
                            dblk[i] = dblk[i] + db[i];
                        }
                    }
                });
            }
        }
        Op::Concat { parts, axis } => {
            let rank = node.shape.len();
            let outer: usize = node.shape[..*axis].iter().product();
            let tail: usize = node.shape[*axis + 1..].iter().product();
            let _ = rank;
            let mut offsets = Vec::with_capacity(parts.len());
            let mut acc = 0usize;
            for &p in parts {
                offsets.push(acc);
                acc += nodes[p].shape[*axis] * tail;
            }
            let total_blk = acc;
            for (pi, &p) in parts.iter().enumerate() {
                if !nodes[p].requires_grad {
                    continue;
                }
                let blk = nodes[p].shape[*axis] * tail;
                let off = offsets[pi];
                accumulate(&mut grads[p], nodes[p].data.len(), |dst| {
                    for o in 0..outer {
                        let src = &g[o * total_blk + off..o * total_blk + off + blk];
                        let d = &mut dst[o * blk..(o + 1) * blk];
                        for i in 0..blk {
                            d[i] = d[i] + src[i];
                        }
                    }
                });
            }
        }
        Op::SliceLast { src, start, len } => {
            if nodes[*src].requires_grad {
                let c = *nodes[*src].shape.last().unwrap();
                let rows = nodes[*src].data.len() / c;
                accumulate(&mut grads[*src], rows * c, |dst| {
                    for r in 0..rows {
                        for j in 0..*len {
                            dst[r * c + start + j] = dst[r * c + start + j] + g[r * len + j];
                        }
                    }
                });
            }
        }
        Op::GatherRows { src, indices } => {
            if nodes[*src].requires_grad {
                let c = nodes[*src].shape[1];
                accumulate(&mut grads[*src], nodes[*src].data.len(), |dst| {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            dst[i * c + j] = dst[i * c + j] + g[r * c + j];
                        }
                    }
                });
            }
        }
        Op::Relu(a) => {
            if nodes[*a].requires_grad {
                let ad = &nodes[*a].data;
                accumulate(&mut grads[*a], g.len(), |dst| {
                    for i in 0..g.len() {
                        if ad[i] > T::zero() {
                            dst[i] = dst[i] + g[i];
                        }
                    }
                });
            }
        }
        Op::Sigmoid(a) => {
            if nodes[*a].requires_grad {
                let y = &node.data;
                accumulate(&mut grads[*a], g.len(), |dst| {
                    for i in 0..g.len() {
                        dst[i] = dst[i] + g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
        }
        Op::Tanh(a) => {
            if nodes[*a].requires_grad {
                let y = &node.data;
                accumulate(&mut grads[*a], g.len(), |dst| {
                    for i in 0..g.len() {
                        dst[i] = dst[i] + g[i] * (T::one() - y[i] * y[i]);
                    }
                });
            }
        }
        Op::Exp(a) => {
            if nodes[*a].requires_grad {
                let y = &node.data;
                accumulate(&mut grads[*a], g.len(), |dst| {
                    for i in 0..g.len() {
                        dst[i] = dst[i] + g[i] * y[i];
                    }
                });
            }
        }
        Op::Log(a) => {
            if nodes[*a].requires_grad {
                let ad = &nodes[*a].data;
                accumulate(&mut grads[*a], g.len(), |dst| {
                    for i in 0..g.len() {
                        dst[i] = dst[i] + g[i] / ad[i];
                    }
                });
            }
        }
        Op::SoftmaxLast(a) => {
            if nodes[*a].requires_grad {
                let y = &node.data;
                let c = *node.shape.last().unwrap();
                accumulate(&mut grads[*a], g.len(), |dst| {
                    for (row, grow) in (0..y.len() / c).zip(g.chunks(c)) {
                        let yrow = &y[row * c..(row + 1) * c];
                        let mut dot = T::zero();
                        for j in 0..c {
                            dot = dot + grow[j] * yrow[j];
                        }
                        let drow = &mut dst[row * c..(row + 1) * c];
                        for j in 0..c {
                            drow[j] = drow[j] + yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
        }
        Op::LayerNorm { src, eps } => {
            if nodes[*src].requires_grad {
                let x = &nodes[*src].data;
                let c = *node.shape.last().unwrap();
                let cn = T::from_f64(c as f64);
                let epst = T::from_f64(*eps);
                accumulate(&mut grads[*src], x.len(), |dst| {
                    for r in 0..x.len() / c {
                        let xrow = &x[r * c..(r + 1) * c];
                        let grow = &g[r * c..(r + 1) * c];
                        let mean = xrow.iter().fold(T::zero(), |a, &v| a + v) / cn;
                        let var = xrow
                            .iter()
                            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                            / cn;
                        let inv = T::one() / (var + epst).sqrt();
                        // y_j = (x_j - mean) * inv
                        let mut gsum = T::zero();
                        let mut gy = T::zero();
                        for j in 0..c {
                            gsum = gsum + grow[j];
                            gy = gy + grow[j] * (xrow[j] - mean) * inv;
                        }
                        let drow = &mut dst[r * c..(r + 1) * c];
                        for j in 0..c {
                            let yj = (xrow[j] - mean) * inv;
                            let d = inv * (grow[j] - gsum / cn - yj * gy / cn);
                            drow[j] = drow[j] + d;
                        }
                    }
                });
            }
        }
        Op::MeanAll(a) => {
            if nodes[*a].requires_grad {
                let n = nodes[*a].data.len();
                let inv = T::from_f64(1.0 / n as f64) * g[0];
                accumulate(&mut grads[*a], n, |dst| {
                    for d in dst.iter_mut() {
                        *d = *d + inv;
                    }
                });
            }
        }
        Op::SumAll(a) => {
            if nodes[*a].requires_grad {
                let n = nodes[*a].data.len();
                accumulate(&mut grads[*a], n, |dst| {
                    for d in dst.iter_mut() {
                        *d = *d + g[0];
                    }
                });
            }
        }
        Op::Clamp { src, lo, hi } => {
            if nodes[*src].requires_grad {
                let ad = &nodes[*src].data;
                accumulate(&mut grads[*src], g.len(), |dst| {
                    for i in 0..g.len() {
                        if ad[i] >= *lo && ad[i] <= *hi {
                            dst[i] = dst[i] + g[i];
                        }
                    }
                });
            }
        }
        Op::Reshape(a) => {
            if nodes[*a].requires_grad {
                accumulate(&mut grads[*a], g.len(), |dst| {
                    for i in 0..g.len() {
                        dst[i] = dst[i] + g[i];
                    }
                });
            }
        }
        Op::BceWithLogits {
            logits,
            targets,
            mask,
        } => {
            if nodes[*logits].requires_grad {
                let x = &nodes[*logits].data;
                let count = mask.iter().fold(T::zero(), |a, &w| a + w);
                if count > T::zero() {
                    accumulate(&mut grads[*logits], x.len(), |dst| {
                        for i in 0..x.len() {
                            if mask[i] > T::zero() {
                                let sig = T::one() / (T::one() + (-x[i]).exp());
                                dst[i] = dst[i] + g[0] * mask[i] * (sig - targets[i]) / count;
                            }
                        }
                    });
                }
            }
        }
        Op::LogTsdfL1 { pred, gt, mask } => {
            if nodes[*pred].requires_grad {
                let p = &nodes[*pred].data;
                let count = mask.iter().fold(T::zero(), |a, &w| a + w);
                if count > T::zero() {
                    accumulate(&mut grads[*pred], p.len(), |dst| {
                        for i in 0..p.len() {
                            if mask[i] > T::zero() {
                                let diff = log_transform(p[i]) - log_transform(gt[i]);
                                let sign = if diff > T::zero() {
                                    T::one()
                                } else if diff < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                };
                                // d phi / d p = 1 / (1 + |p|)
                                let dphi = T::one() / (T::one() + p[i].abs());
                                dst[i] = dst[i] + g[0] * mask[i] * sign * dphi / count;
                            }
                        }
                    });
                }
            }
        }
    }
}

/// `(n,m) @ (k,m)^T -> (n,k)`: multiply by the transpose of a row-major
/// `(k,m)` matrix.
fn matmul_transb<T: Scalar>(a: &[T], b: &[T], n: usize, m: usize, k: usize) -> Vec<T> {
    matmul_raw(a, b, n, m, k, true)
}

/// `(n,k)^T @ (n,m) -> (k,m)`.
fn matmul_transa<T: Scalar>(a: &[T], g: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * m..(i + 1) * m];
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * m..(l + 1) * m];
            for j in 0..m {
                orow[j] = orow[j] + av * grow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn softmax_symmetry() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![0.0, 0.0], &[2]);
        let y = x.softmax_last().value();
        assert_relative_eq!(y[0], 0.5);
        assert_relative_eq!(y[1], 0.5);
    }

    #[test]
    fn softmax_normalized() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![1.0, -2.0, 0.3, 4.0, 4.0, 4.0], &[2, 3]);
        let y = x.softmax_last().value();
        for row in y.chunks(3) {
            let s: f64 = row.iter().sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn layer_norm_constant_vector() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![3.0; 4], &[4]);
        let y = x.layer_norm(1e-5).value();
        for v in y {
            assert_relative_eq!(v, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![0.0], &[1]);
        let y = x.sigmoid().sum_all();
        let grads = y.backward();
        assert_relative_eq!(x.grad_of(&grads)[0], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn bce_at_zero_logit() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![0.0], &[1]);
        let loss = x.bce_with_logits(&[1.0], &[1.0]);
        assert_relative_eq!(loss.item(), (2.0f64).ln(), epsilon = 1e-12);
        let grads = loss.backward();
        assert_relative_eq!(x.grad_of(&grads)[0], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn bce_saturated() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![20.0], &[1]);
        let loss = x.bce_with_logits(&[1.0], &[1.0]);
        assert!(loss.item() < 1e-8);
    }

    #[test]
    fn bce_finite_at_extremes() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![-100.0, 100.0, -100.0, 100.0], &[4]);
        let loss = x.bce_with_logits(&[1.0, 0.0, 0.0, 1.0], &[1.0; 4]);
        assert!(loss.item().is_finite());
    }

    #[test]
    fn bce_all_masked_zero() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0], &[2]);
        let loss = x.bce_with_logits(&[1.0, 0.0], &[0.0, 0.0]);
        assert_eq!(loss.item(), 0.0);
        let grads = loss.backward();
        assert_eq!(x.grad_of(&grads), vec![0.0, 0.0]);
    }

    #[test]
    fn log_tsdf_l1_cases() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.constant(vec![0.7], &[1]);
        assert_eq!(p.log_tsdf_l1(&[0.7], &[1.0]).item(), 0.0);
        let z = tape.constant(vec![0.0], &[1]);
        assert_relative_eq!(
            z.log_tsdf_l1(&[1.0], &[1.0]).item(),
            (2.0f64).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn log_transform_odd() {
        for &s in &[0.0, 0.1, 0.5, 1.0, 3.3] {
            assert_relative_eq!(log_transform(-s), -log_transform(s), epsilon = 1e-12);
        }
    }

    #[test]
    fn matmul_small() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = tape.constant(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]);
        assert_eq!(a.matmul(&b).value(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn bmm_matches_per_batch_matmul() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant((0..12).map(|i| i as f64).collect(), &[2, 2, 3]);
        let b = tape.constant((0..12).map(|i| (i as f64) * 0.5).collect(), &[2, 3, 2]);
        let y = a.bmm(&b, false);
        let a0 = tape.constant((0..6).map(|i| i as f64).collect(), &[2, 3]);
        let b0 = tape.constant((0..6).map(|i| (i as f64) * 0.5).collect(), &[3, 2]);
        assert_eq!(y.value()[..4], a0.matmul(&b0).value()[..]);
    }

    #[test]
    fn bmm_transpose_b() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        let b = tape.constant(vec![1.0, 0.0, 0.0, 1.0], &[1, 2, 2]);
        // b identity: transpose is identity
        assert_eq!(a.bmm(&b, true).value(), vec![1.0, 2.0, 3.0, 4.0]);
        let c = tape.constant(vec![0.0, 1.0, 2.0, 3.0], &[1, 2, 2]);
        // a @ c^T: [[1,2],[3,4]] @ [[0,2],[1,3]] = [[2,7],[4,15]]... check
        // c^T = [[0,2],[1,3]]
        assert_eq!(a.bmm(&c, true).value(), vec![2.0, 8.0, 4.0, 18.0]);
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // y = x*x + x  => dy/dx = 2x + 1
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![3.0], &[1]);
        let y = x.mul(&x).add(&x).sum_all();
        let grads = y.backward();
        assert_relative_eq!(x.grad_of(&grads)[0], 7.0, epsilon = 1e-12);
    }

    #[test]
    fn concat_slice_round_trip() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = tape.constant(vec![5.0, 6.0], &[2, 1]);
        let cat = Tensor::concat(&[&a, &b], 1);
        assert_eq!(cat.shape(), vec![2, 3]);
        assert_eq!(cat.value(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(cat.slice_last(0, 2).value(), a.value());
        assert_eq!(cat.slice_last(2, 1).value(), b.value());
    }

    #[test]
    fn gather_rows_forward() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let g = a.gather_rows(&[2, 0, 2]);
        assert_eq!(g.value(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn add_shape_mismatch_panics() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![1.0, 2.0], &[2]);
        let b = tape.constant(vec![1.0, 2.0, 3.0], &[3]);
        let _ = a.add(&b);
    }
}
