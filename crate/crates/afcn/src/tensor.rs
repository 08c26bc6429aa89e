//! Dense f64 tensors and a reverse-mode tape.
//!
//! The tape records every operation of a forward pass; `backward` replays it
//! in reverse and accumulates gradients into the recorded leaves. Only the
//! operations the fixed computation graph needs are provided. Values are
//! immutable once recorded; a tape is confined to one thread.

use crate::error::{Error, Result};

/// Row-major dense tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix");
        self.shape[1]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddN(Vec<Var>),
    AddConst(Var),
    Scale(Var, f64),
    /// Tensor scaled by a scalar node.
    MulScalar(Var, Var),
    MatmulNN(Var, Var),
    MatmulNT(Var, Var),
    MatmulTN(Var, Var),
    Conv1dRows { x: Var, kernel: Var, dilation: usize },
    LeakyRelu(Var, f64),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    Recip(Var),
    MaxConst(Var, f64),
    Sum(Var),
    AbsSum(Var),
    RowSums(Var),
    SubColB(Var, Var),
    MulColB(Var, Var),
    MulRowB(Var, Var),
    AddRowB(Var, Var),
    BlockRowMean { x: Var, blocks: usize },
    Reshape(Var),
    SliceRows { x: Var, start: usize, end: usize },
    ConcatRows(Vec<Var>),
    /// Block matrix of `grid`×`grid` blocks of size `n`×`n`; listed entries
    /// are placed at their (block-row, block-col) position, the rest is zero.
    AssembleBlocks { n: usize, grid: usize, entries: Vec<(usize, usize, Var)> },
    SoftmaxCe { logits: Var, label: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Recorded computation graph. Nodes are appended in topological order.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        {
            assert!(value.all_finite(), "non-finite value produced on tape");
        }
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf: no gradient is tracked through it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Parameter leaf: gradients accumulate here during `backward`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.clone(), true)
    }

    // ---- elementwise / scalar ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor { shape: va.shape.clone(), data };
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), t, g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor { shape: va.shape.clone(), data };
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), t, g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor { shape: va.shape.clone(), data };
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), t, g)
    }

    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n of nothing");
        let shape = self.nodes[vars[0].0].value.shape.clone();
        let mut data = vec![0.0; shape.iter().product()];
        for v in vars {
            let t = &self.nodes[v.0].value;
            assert_eq!(t.shape(), &shape[..], "add_n shape mismatch");
            for (d, x) in data.iter_mut().zip(t.data()) {
                *d += x;
            }
        }
        let g = vars.iter().any(|v| self.ng(*v));
        self.push(Op::AddN(vars.to_vec()), Tensor { shape, data }, g)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data().iter().map(|x| x + c).collect(),
        };
        let g = self.ng(a);
        self.push(Op::AddConst(a), t, g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data().iter().map(|x| x * c).collect(),
        };
        let g = self.ng(a);
        self.push(Op::Scale(a, c), t, g)
    }

    /// `a * s` where `s` is a single-element node (e.g. a learnable scalar).
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.nodes[s.0].value.item();
        let va = &self.nodes[a.0].value;
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data().iter().map(|x| x * sv).collect(),
        };
        let g = self.ng(a) || self.ng(s);
        self.push(Op::MulScalar(a, s), t, g)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data().iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect(),
        };
        let g = self.ng(a);
        self.push(Op::LeakyRelu(a, slope), t, g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data().iter().map(|&x| x.max(0.0)).collect(),
        };
        let g = self.ng(a);
        self.push(Op::Relu(a), t, g)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data().iter().map(|x| x.abs()).collect(),
        };
        let g = self.ng(a);
        self.push(Op::Abs(a), t, g)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data().iter().map(|x| x.sqrt()).collect(),
        };
        let g = self.ng(a);
        self.push(Op::Sqrt(a), t, g)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data().iter().map(|x| 1.0 / x).collect(),
        };
        let g = self.ng(a);
        self.push(Op::Recip(a), t, g)
    }

    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data().iter().map(|x| x.max(c)).collect(),
        };
        let g = self.ng(a);
        self.push(Op::MaxConst(a, c), t, g)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let g = self.ng(a);
        self.push(Op::Sum(a), Tensor::scalar(s), g)
    }

    pub fn abs_sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().map(|x| x.abs()).sum();
        let g = self.ng(a);
        self.push(Op::AbsSum(a), Tensor::scalar(s), g)
    }

    /// Row sums of an `m×n` matrix → length-`m` vector.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let (m, n) = (va.rows(), va.cols());
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = va.data()[i * n..(i + 1) * n].iter().sum();
        }
        let g = self.ng(a);
        self.push(Op::RowSums(a), Tensor { shape: vec![m], data: out }, g)
    }

    // ---- broadcasts over rows/columns ----

    /// `out[i][j] = x[i][j] - v[i]` (column broadcast of a length-m vector).
    pub fn sub_col(&mut self, x: Var, v: Var) -> Var {
        let (vx, vv) = (&self.nodes[x.0].value, &self.nodes[v.0].value);
        let (m, n) = (vx.rows(), vx.cols());
        assert_eq!(vv.len(), m, "sub_col length mismatch");
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let b = vv.data()[i];
            for j in 0..n {
                data[i * n + j] = vx.data()[i * n + j] - b;
            }
        }
        let g = self.ng(x) || self.ng(v);
        self.push(Op::SubColB(x, v), Tensor { shape: vec![m, n], data }, g)
    }

    /// `out[i][j] = x[i][j] * v[i]`.
    pub fn mul_col(&mut self, x: Var, v: Var) -> Var {
        let (vx, vv) = (&self.nodes[x.0].value, &self.nodes[v.0].value);
        let (m, n) = (vx.rows(), vx.cols());
        assert_eq!(vv.len(), m, "mul_col length mismatch");
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let b = vv.data()[i];
            for j in 0..n {
                data[i * n + j] = vx.data()[i * n + j] * b;
            }
        }
        let g = self.ng(x) || self.ng(v);
        self.push(Op::MulColB(x, v), Tensor { shape: vec![m, n], data }, g)
    }

    /// `out[i][j] = x[i][j] * v[j]`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Var {
        let (vx, vv) = (&self.nodes[x.0].value, &self.nodes[v.0].value);
        let (m, n) = (vx.rows(), vx.cols());
        assert_eq!(vv.len(), n, "mul_row length mismatch");
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = vx.data()[i * n + j] * vv.data()[j];
            }
        }
        let g = self.ng(x) || self.ng(v);
        self.push(Op::MulRowB(x, v), Tensor { shape: vec![m, n], data }, g)
    }

    /// `out[i][j] = x[i][j] + v[j]` (bias add).
    pub fn add_row(&mut self, x: Var, v: Var) -> Var {
        let (vx, vv) = (&self.nodes[x.0].value, &self.nodes[v.0].value);
        let (m, n) = (vx.rows(), vx.cols());
        assert_eq!(vv.len(), n, "add_row length mismatch");
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = vx.data()[i * n + j] + vv.data()[j];
            }
        }
        let g = self.ng(x) || self.ng(v);
        self.push(Op::AddRowB(x, v), Tensor { shape: vec![m, n], data }, g)
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} × {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = va.data()[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += aip * vb.data()[p * n + j];
                }
            }
        }
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatmulNN(a, b), Tensor { shape: vec![m, n], data }, g))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (va.rows(), va.cols());
        let (n, k2) = (vb.rows(), vb.cols());
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt inner dimensions differ: {:?} × {:?}ᵀ",
                va.shape(),
                vb.shape()
            )));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += va.data()[i * k + p] * vb.data()[j * k + p];
                }
                data[i * n + j] = s;
            }
        }
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatmulNT(a, b), Tensor { shape: vec![m, n], data }, g))
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (k, m) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_tn inner dimensions differ: {:?}ᵀ × {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut data = vec![0.0; m * n];
        for p in 0..k {
            for i in 0..m {
                let apv = va.data()[p * m + i];
                if apv == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += apv * vb.data()[p * n + j];
                }
            }
        }
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatmulTN(a, b), Tensor { shape: vec![m, n], data }, g))
    }

    // ---- convolution ----

    /// Same-length dilated 1D convolution of every row of `x` with a shared
    /// odd-width kernel. Zero padding of `dilation·(w−1)/2` on both sides.
    pub fn conv1d_rows(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (vx, vk) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
        let w = vk.len();
        if w % 2 == 0 {
            return Err(Error::config(format!(
                "conv1d kernel width must be odd for same-length output, got {w}"
            )));
        }
        if dilation == 0 {
            return Err(Error::config("conv1d dilation must be ≥ 1".to_string()));
        }
        let (n, t) = (vx.rows(), vx.cols());
        let pad = dilation * (w - 1) / 2;
        if t <= pad {
            return Err(Error::config(format!(
                "signal length {t} too short for kernel width {w} at dilation {dilation}"
            )));
        }
        let mut data = vec![0.0; n * t];
        for i in 0..n {
            let row = &vx.data()[i * t..(i + 1) * t];
            for out_t in 0..t {
                let mut s = 0.0;
                for (j, kj) in vk.data().iter().enumerate() {
                    let idx = out_t as isize + (j * dilation) as isize - pad as isize;
                    if idx >= 0 && (idx as usize) < t {
                        s += kj * row[idx as usize];
                    }
                }
                data[i * t + out_t] = s;
            }
        }
        let g = self.ng(x) || self.ng(kernel);
        Ok(self.push(
            Op::Conv1dRows { x, kernel, dilation },
            Tensor { shape: vec![n, t], data },
            g,
        ))
    }

    /// Convenience wrapper for a single signal of shape `[T]`.
    pub fn conv1d(&mut self, signal: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let t = self.nodes[signal.0].value.len();
        let row = self.reshape(signal, vec![1, t]);
        let out = self.conv1d_rows(row, kernel, dilation)?;
        Ok(self.reshape(out, vec![t]))
    }

    // ---- structure ----

    /// Mean over rows within each of `blocks` equal row blocks.
    pub fn block_row_mean(&mut self, x: Var, blocks: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let (m, d) = (vx.rows(), vx.cols());
        assert!(blocks > 0 && m % blocks == 0, "row count {m} not divisible into {blocks} blocks");
        let per = m / blocks;
        let mut data = vec![0.0; blocks * d];
        for b in 0..blocks {
            for i in 0..per {
                for j in 0..d {
                    data[b * d + j] += vx.data()[(b * per + i) * d + j];
                }
            }
            for j in 0..d {
                data[b * d + j] /= per as f64;
            }
        }
        let g = self.ng(x);
        self.push(Op::BlockRowMean { x, blocks }, Tensor { shape: vec![blocks, d], data }, g)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(
            shape.iter().product::<usize>(),
            va.len(),
            "reshape element count mismatch"
        );
        let t = Tensor { shape, data: va.data().to_vec() };
        let g = self.ng(a);
        self.push(Op::Reshape(a), t, g)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let (m, n) = (vx.rows(), vx.cols());
        assert!(start < end && end <= m, "slice_rows out of range");
        let data = vx.data()[start * n..end * n].to_vec();
        let g = self.ng(x);
        self.push(
            Op::SliceRows { x, start, end },
            Tensor { shape: vec![end - start, n], data },
            g,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let n = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut m = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols(), n, "concat_rows column mismatch");
            m += t.rows();
            data.extend_from_slice(t.data());
        }
        let g = parts.iter().any(|p| self.ng(*p));
        self.push(Op::ConcatRows(parts.to_vec()), Tensor { shape: vec![m, n], data }, g)
    }

    /// Assemble a `(grid·n)×(grid·n)` block matrix from `n×n` blocks; block
    /// positions not listed are zero. Each position may appear at most once.
    pub fn assemble_blocks(&mut self, n: usize, grid: usize, entries: &[(usize, usize, Var)]) -> Var {
        let side = grid * n;
        let mut data = vec![0.0; side * side];
        for &(br, bc, v) in entries {
            assert!(br < grid && bc < grid, "block position out of range");
            let t = &self.nodes[v.0].value;
            assert_eq!(t.shape(), &[n, n], "block shape mismatch");
            for i in 0..n {
                for j in 0..n {
                    data[(br * n + i) * side + bc * n + j] = t.data()[i * n + j];
                }
            }
        }
        let g = entries.iter().any(|&(_, _, v)| self.ng(v));
        self.push(
            Op::AssembleBlocks { n, grid, entries: entries.to_vec() },
            Tensor { shape: vec![side, side], data },
            g,
        )
    }

    /// Numerically stabilized `−log softmax(logits)[label]` for a length-c
    /// logit vector.
    pub fn softmax_ce(&mut self, logits: Var, label: usize) -> Result<Var> {
        let vl = &self.nodes[logits.0].value;
        let c = vl.len();
        if label >= c {
            return Err(Error::data(format!("label {label} out of range for {c} classes")));
        }
        let max = vl.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + vl.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - vl.data()[label];
        let g = self.ng(logits);
        Ok(self.push(Op::SoftmaxCe { logits, label }, Tensor::scalar(loss), g))
    }

    /// Softmax probabilities of a logit vector (forward-only helper).
    pub fn softmax_values(logits: &Tensor) -> Vec<f64> {
        let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.data().iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    // ---- backward ----

    /// Reverse accumulation from a scalar loss. Gradients sum across fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of a node recorded by the last `backward`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0)?.as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    fn acc(&mut self, v: Var, contrib: impl Fn(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        contrib(slot);
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Values are read through raw pointers into the node arena; nodes are
        // never mutated during backward so the aliasing is read-only.
        let node_value = |v: Var| -> Tensor { self.nodes[v.0].value.clone() };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.acc(b, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.acc(b, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (node_value(a), node_value(b));
                self.acc(a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb.data()[k];
                    }
                });
                self.acc(b, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va.data()[k];
                    }
                });
            }
            Op::AddN(vars) => {
                for v in vars.clone() {
                    self.acc(v, |d| {
                        for (x, y) in d.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
            }
            Op::AddConst(a) => {
                let a = *a;
                self.acc(a, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.acc(a, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += c * y;
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let (a, s) = (*a, *s);
                let sv = node_value(s).item();
                let va = node_value(a);
                self.acc(a, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += sv * y;
                    }
                });
                let dot: f64 = va.data().iter().zip(g).map(|(x, y)| x * y).sum();
                self.acc(s, |d| d[0] += dot);
            }
            Op::MatmulNN(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (node_value(a), node_value(b));
                let (m, k) = (va.rows(), va.cols());
                let n = vb.cols();
                // dA = dC · Bᵀ
                self.acc(a, |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * vb.data()[p * n + j];
                            }
                            d[i * k + p] += s;
                        }
                    }
                });
                // dB = Aᵀ · dC
                self.acc(b, |d| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += va.data()[i * k + p] * g[i * n + j];
                            }
                            d[p * n + j] += s;
                        }
                    }
                });
            }
            Op::MatmulNT(a, b) => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                let (a, b) = (*a, *b);
                let (va, vb) = (node_value(a), node_value(b));
                let (m, k) = (va.rows(), va.cols());
                let n = vb.rows();
                self.acc(a, |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * vb.data()[j * k + p];
                            }
                            d[i * k + p] += s;
                        }
                    }
                });
                self.acc(b, |d| {
                    for j in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += g[i * n + j] * va.data()[i * k + p];
                            }
                            d[j * k + p] += s;
                        }
                    }
                });
            }
            Op::MatmulTN(a, b) => {
                // C = Aᵀ·B: dA = B·dCᵀ, dB = A·dC
                let (a, b) = (*a, *b);
                let (va, vb) = (node_value(a), node_value(b));
                let (k, m) = (va.rows(), va.cols());
                let n = vb.cols();
                self.acc(a, |d| {
                    for p in 0..k {
                        for i in 0..m {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += vb.data()[p * n + j] * g[i * n + j];
                            }
                            d[p * m + i] += s;
                        }
                    }
                });
                self.acc(b, |d| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += va.data()[p * m + i] * g[i * n + j];
                            }
                            d[p * n + j] += s;
                        }
                    }
                });
            }
            Op::Conv1dRows { x, kernel, dilation } => {
                let (x, kernel, dilation) = (*x, *kernel, *dilation);
                let vx = node_value(x);
                let vk = node_value(kernel);
                let (n, t) = (vx.rows(), vx.cols());
                let w = vk.len();
                let pad = dilation * (w - 1) / 2;
                self.acc(x, |d| {
                    for i in 0..n {
                        for out_t in 0..t {
                            let gv = g[i * t + out_t];
                            if gv == 0.0 {
                                continue;
                            }
                            for (j, kj) in vk.data().iter().enumerate() {
                                let idx = out_t as isize + (j * dilation) as isize - pad as isize;
                                if idx >= 0 && (idx as usize) < t {
                                    d[i * t + idx as usize] += kj * gv;
                                }
                            }
                        }
                    }
                });
                self.acc(kernel, |d| {
                    for i in 0..n {
                        for out_t in 0..t {
                            let gv = g[i * t + out_t];
                            if gv == 0.0 {
                                continue;
                            }
                            for (j, dj) in d.iter_mut().enumerate() {
                                let idx = out_t as isize + (j * dilation) as isize - pad as isize;
                                if idx >= 0 && (idx as usize) < t {
                                    *dj += vx.data()[i * t + idx as usize] * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let (a, slope) = (*a, *slope);
                let va = node_value(a);
                self.acc(a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * if va.data()[k] > 0.0 { 1.0 } else { slope };
                    }
                });
            }
            Op::Relu(a) => {
                let a = *a;
                let va = node_value(a);
                self.acc(a, |d| {
                    for k in 0..d.len() {
                        if va.data()[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let a = *a;
                let va = node_value(a);
                self.acc(a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * sign(va.data()[k]);
                    }
                });
            }
            Op::Sqrt(a) => {
                let a = *a;
                let out = self.nodes[i].value.clone();
                self.acc(a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / (2.0 * out.data()[k]);
                    }
                });
            }
            Op::Recip(a) => {
                let a = *a;
                let out = self.nodes[i].value.clone();
                self.acc(a, |d| {
                    for k in 0..d.len() {
                        d[k] -= g[k] * out.data()[k] * out.data()[k];
                    }
                });
            }
            Op::MaxConst(a, c) => {
                let (a, c) = (*a, *c);
                let va = node_value(a);
                self.acc(a, |d| {
                    for k in 0..d.len() {
                        if va.data()[k] > c {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let a = *a;
                let gv = g[0];
                self.acc(a, |d| {
                    for x in d.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::AbsSum(a) => {
                let a = *a;
                let gv = g[0];
                let va = node_value(a);
                self.acc(a, |d| {
                    for k in 0..d.len() {
                        d[k] += gv * sign(va.data()[k]);
                    }
                });
            }
            Op::RowSums(a) => {
                let a = *a;
                let va = node_value(a);
                let (m, n) = (va.rows(), va.cols());
                self.acc(a, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[i];
                        }
                    }
                });
            }
            Op::SubColB(x, v) => {
                let (x, v) = (*x, *v);
                let vx = node_value(x);
                let (m, n) = (vx.rows(), vx.cols());
                self.acc(x, |d| {
                    for (dk, gk) in d.iter_mut().zip(g) {
                        *dk += gk;
                    }
                });
                self.acc(v, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i] -= g[i * n + j];
                        }
                    }
                });
            }
            Op::MulColB(x, v) => {
                let (x, v) = (*x, *v);
                let vx = node_value(x);
                let vv = node_value(v);
                let (m, n) = (vx.rows(), vx.cols());
                self.acc(x, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[i * n + j] * vv.data()[i];
                        }
                    }
                });
                self.acc(v, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i] += g[i * n + j] * vx.data()[i * n + j];
                        }
                    }
                });
            }
            Op::MulRowB(x, v) => {
                let (x, v) = (*x, *v);
                let vx = node_value(x);
                let vv = node_value(v);
                let (m, n) = (vx.rows(), vx.cols());
                self.acc(x, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[i * n + j] * vv.data()[j];
                        }
                    }
                });
                self.acc(v, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j] * vx.data()[i * n + j];
                        }
                    }
                });
            }
            Op::AddRowB(x, v) => {
                let (x, v) = (*x, *v);
                let vx = node_value(x);
                let (m, n) = (vx.rows(), vx.cols());
                self.acc(x, |d| {
                    for (dk, gk) in d.iter_mut().zip(g) {
                        *dk += gk;
                    }
                });
                self.acc(v, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::BlockRowMean { x, blocks } => {
                let (x, blocks) = (*x, *blocks);
                let vx = node_value(x);
                let (m, dcols) = (vx.rows(), vx.cols());
                let per = m / blocks;
                let inv = 1.0 / per as f64;
                self.acc(x, |d| {
                    for b in 0..blocks {
                        for i in 0..per {
                            for j in 0..dcols {
                                d[(b * per + i) * dcols + j] += g[b * dcols + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                let a = *a;
                self.acc(a, |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::SliceRows { x, start, end } => {
                let (x, start, end) = (*x, *start, *end);
                let n = node_value(x).cols();
                self.acc(x, |d| {
                    for r in start..end {
                        for j in 0..n {
                            d[r * n + j] += g[(r - start) * n + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    let seg = offset..offset + len;
                    self.acc(p, |d| {
                        for (k, gk) in g[seg.clone()].iter().enumerate() {
                            d[k] += gk;
                        }
                    });
                    offset += len;
                }
            }
            Op::AssembleBlocks { n, grid, entries } => {
                let (n, grid, entries) = (*n, *grid, entries.clone());
                let side = grid * n;
                for (br, bc, v) in entries {
                    self.acc(v, |d| {
                        for i in 0..n {
                            for j in 0..n {
                                d[i * n + j] += g[(br * n + i) * side + bc * n + j];
                            }
                        }
                    });
                }
            }
            Op::SoftmaxCe { logits, label } => {
                let (logits, label) = (*logits, *label);
                let probs = Self::softmax_values(&self.nodes[logits.0].value);
                let gv = g[0];
                self.acc(logits, |d| {
                    for (k, p) in probs.iter().enumerate() {
                        let onehot = if k == label { 1.0 } else { 0.0 };
                        d[k] += gv * (p - onehot);
                    }
                });
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Max relative error between analytic gradients and central finite
/// differences over `n_probe` randomly chosen parameter coordinates.
///
/// `params` and `analytic` are parallel flat lists; `f` recomputes the scalar
/// objective from perturbed parameters. Relative error per coordinate is
/// `|a − cd| / max(|a|, |cd|, 1e-8)`.
pub fn finite_diff_check<F>(
    params: &mut [Tensor],
    analytic: &[Tensor],
    mut f: F,
    h: f64,
    n_probe: usize,
    seed: u64,
) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    use rand::{Rng, SeedableRng};
    assert_eq!(params.len(), analytic.len());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let total: usize = params.iter().map(Tensor::len).sum();
    assert!(total > 0, "no parameters to probe");

    let mut worst: f64 = 0.0;
    for _ in 0..n_probe {
        let mut coord = rng.gen_range(0..total);
        let mut ti = 0;
        while coord >= params[ti].len() {
            coord -= params[ti].len();
            ti += 1;
        }
        let orig = params[ti].data()[coord];

        params[ti].data_mut()[coord] = orig + h;
        let fp = f(params);
        params[ti].data_mut()[coord] = orig - h;
        let fm = f(params);
        params[ti].data_mut()[coord] = orig;

        let cd = (fp - fm) / (2.0 * h);
        let a = analytic[ti].data()[coord];
        let err = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}
