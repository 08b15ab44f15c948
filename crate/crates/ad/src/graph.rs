//! Eager computation record with reverse-mode differentiation.
//!
//! Every operation computes its value immediately and appends a node to the
//! tape. Node ids are topologically ordered by construction, so the reverse
//! pass is a single descending sweep. Replaying the same operations on the
//! same inputs reproduces identical values bit for bit.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{AdError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
#[allow(dead_code)] // op constants are kept on the record even when backward doesn't read them
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize, f64),
    MulScalar(usize, f64),
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    Sin(usize),
    Cos(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
    /// softplus(x) = ln(1 + exp(beta x)) / beta, identity where beta*x > threshold.
    Softplus(usize, f64, f64),
    /// sigmoid(beta x), exactly 1 where beta*x > threshold. Matches the
    /// derivative of the softplus above so tangents stay consistent.
    SigmoidBeta(usize, f64, f64),
    Matmul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    ConvT2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    AddRow(usize, usize),
    SumAll(usize),
    SumLast(usize),
    MaxLast(usize),
    NormLast(usize, f64),
    AddBcastLast(usize, usize),
    SubBcastLast(usize, usize),
    MulBcastLast(usize, usize),
    DivBcastLast(usize, usize),
    Concat {
        axis: usize,
        inputs: Vec<usize>,
    },
    NarrowLast {
        a: usize,
        start: usize,
        len: usize,
    },
    Reshape(usize),
    RepeatRows(usize, usize),
    IndexSelect0 {
        a: usize,
        idx: Rc<Vec<usize>>,
    },
    BilinearSample {
        grid: usize,
        coords: Rc<Vec<(f64, f64)>>,
    },
    WeightedPool {
        feat: usize,
        w: usize,
    },
}

struct Node {
    op: Op,
    value: Rc<Tensor>,
}

struct Tape {
    nodes: Vec<Node>,
}

/// Handle to a computation record shared by its [`Var`]s.
#[derive(Clone)]
pub struct Graph {
    tape: Rc<RefCell<Tape>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// A value on the tape. Cloning is cheap; both clones refer to the same node.
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            tape: Rc::new(RefCell::new(Tape { nodes: Vec::new() })),
        }
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor) -> Var {
        let mut tape = self.tape.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            op,
            value: Rc::new(value),
        });
        Var {
            graph: self.clone(),
            id,
        }
    }

    /// Insert an input value (constant or parameter) on the tape.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.tape.borrow().nodes[id].value.clone()
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to `wrt` leaves.
    ///
    /// A leaf that does not participate in the computation receives a zero
    /// gradient. A non-scalar loss is a contract violation.
    pub fn backward(&self, loss: &Var, wrt: &[&Var]) -> Result<Vec<Tensor>> {
        if loss.value().numel() != 1 {
            return Err(AdError::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                loss.value().shape()
            )));
        }
        let tape = self.tape.borrow();
        let n = tape.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss.value().shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            backward_op(&tape, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let out = wrt
            .iter()
            .map(|v| match &grads[v.id] {
                Some(g) => g.clone(),
                None => Tensor::zeros(tape.nodes[v.id].value.shape()),
            })
            .collect();
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => grads[id] = Some(delta),
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_graph(&self, other: &Var) {
        assert!(
            Rc::ptr_eq(&self.graph.tape, &other.graph.tape),
            "vars belong to different graphs"
        );
    }

    fn ew2(&self, other: &Var, name: &str) {
        self.same_graph(other);
        assert_eq!(
            self.value().shape(),
            other.value().shape(),
            "{name}: shape mismatch"
        );
    }

    pub fn add(&self, other: &Var) -> Var {
        self.ew2(other, "add");
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(a.shape().to_vec(), data).unwrap();
        self.graph.push(Op::Add(self.id, other.id), t)
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.ew2(other, "sub");
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(a.shape().to_vec(), data).unwrap();
        self.graph.push(Op::Sub(self.id, other.id), t)
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.ew2(other, "mul");
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(a.shape().to_vec(), data).unwrap();
        self.graph.push(Op::Mul(self.id, other.id), t)
    }

    pub fn div(&self, other: &Var) -> Var {
        self.ew2(other, "div");
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
        let t = Tensor::new(a.shape().to_vec(), data).unwrap();
        self.graph.push(Op::Div(self.id, other.id), t)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let t = self.value().map(|v| v + c);
        self.graph.push(Op::AddScalar(self.id, c), t)
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        let t = self.value().map(|v| v * c);
        self.graph.push(Op::MulScalar(self.id, c), t)
    }

    pub fn neg(&self) -> Var {
        let t = self.value().map(|v| -v);
        self.graph.push(Op::Neg(self.id), t)
    }

    pub fn exp(&self) -> Var {
        let t = self.value().map(f64::exp);
        self.graph.push(Op::Exp(self.id), t)
    }

    /// Natural log; caller guarantees strictly positive inputs.
    pub fn ln(&self) -> Var {
        let t = self.value().map(f64::ln);
        self.graph.push(Op::Ln(self.id), t)
    }

    /// Square root; caller guarantees non-negative inputs.
    pub fn sqrt(&self) -> Var {
        let t = self.value().map(f64::sqrt);
        self.graph.push(Op::Sqrt(self.id), t)
    }

    pub fn abs(&self) -> Var {
        let t = self.value().map(f64::abs);
        self.graph.push(Op::Abs(self.id), t)
    }

    pub fn sin(&self) -> Var {
        let t = self.value().map(f64::sin);
        self.graph.push(Op::Sin(self.id), t)
    }

    pub fn cos(&self) -> Var {
        let t = self.value().map(f64::cos);
        self.graph.push(Op::Cos(self.id), t)
    }

    pub fn tanh(&self) -> Var {
        let t = self.value().map(f64::tanh);
        self.graph.push(Op::Tanh(self.id), t)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let t = self.value().map(|v| if v > 0.0 { v } else { slope * v });
        self.graph.push(Op::LeakyRelu(self.id, slope), t)
    }

    pub fn softplus(&self, beta: f64, threshold: f64) -> Var {
        let t = self.value().map(|v| softplus_val(v, beta, threshold));
        self.graph.push(Op::Softplus(self.id, beta, threshold), t)
    }

    /// Derivative of `softplus` with the same threshold branch.
    pub fn sigmoid_beta(&self, beta: f64, threshold: f64) -> Var {
        let t = self.value().map(|v| sigmoid_val(v, beta, threshold));
        self.graph.push(Op::SigmoidBeta(self.id, beta, threshold), t)
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    /// Matrix product of 2-D tensors `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Var) -> Var {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(b.shape().len(), 2, "matmul rhs must be 2-D");
        assert_eq!(a.shape()[1], b.shape()[0], "matmul inner dim mismatch");
        let t = matmul_kernel(&a, &b, false, false);
        self.graph.push(Op::Matmul(self.id, other.id), t)
    }

    /// 2-D convolution, channels-first `[C_in,H,W]`, weights `[C_out,C_in,k,k]`.
    pub fn conv2d(&self, w: &Var, stride: usize, pad: usize) -> Var {
        self.same_graph(w);
        let t = conv2d_forward(&self.value(), &w.value(), stride, pad);
        self.graph.push(
            Op::Conv2d {
                x: self.id,
                w: w.id,
                stride,
                pad,
            },
            t,
        )
    }

    /// Transposed 2-D convolution (adjoint of `conv2d` with the same stride),
    /// input `[C_in,H,W]`, weights `[C_in,C_out,k,k]`.
    pub fn conv2d_transpose(&self, w: &Var, stride: usize, pad: usize, out_pad: usize) -> Var {
        self.same_graph(w);
        let t = convt2d_forward(&self.value(), &w.value(), stride, pad, out_pad);
        self.graph.push(
            Op::ConvT2d {
                x: self.id,
                w: w.id,
                stride,
                pad,
                out_pad,
            },
            t,
        )
    }

    /// Broadcast-add a `[F]` vector over the last dimension.
    pub fn add_row(&self, bias: &Var) -> Var {
        self.same_graph(bias);
        let (a, b) = (self.value(), bias.value());
        let (rows, cols) = a.rows_cols();
        assert_eq!(b.shape(), [cols], "add_row bias must match last dim");
        let mut data = a.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += b.data()[c];
            }
        }
        let t = Tensor::new(a.shape().to_vec(), data).unwrap();
        self.graph.push(Op::AddRow(self.id, bias.id), t)
    }

    pub fn sum_all(&self) -> Var {
        let s: f64 = self.value().data().iter().sum();
        self.graph.push(Op::SumAll(self.id), Tensor::scalar(s))
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum over the last dimension, keeping it as size 1.
    pub fn sum_last(&self) -> Var {
        let a = self.value();
        let (rows, cols) = a.rows_cols();
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let mut s = 0.0;
            for c in 0..cols {
                s += a.data()[r * cols + c];
            }
            data[r] = s;
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let t = Tensor::new(shape, data).unwrap();
        self.graph.push(Op::SumLast(self.id), t)
    }

    /// Max over the last dimension, keeping it as size 1. Gradient routes to
    /// the first maximal element.
    pub fn max_last(&self) -> Var {
        let a = self.value();
        let (rows, cols) = a.rows_cols();
        assert!(cols > 0, "max_last over empty dim");
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let mut m = f64::NEG_INFINITY;
            for c in 0..cols {
                let v = a.data()[r * cols + c];
                if v > m {
                    m = v;
                }
            }
            data[r] = m;
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let t = Tensor::new(shape, data).unwrap();
        self.graph.push(Op::MaxLast(self.id), t)
    }

    /// `sqrt(sum(x^2) + eps)` over the last dimension, keepdim. The epsilon
    /// keeps the gradient finite when the row is exactly zero.
    pub fn norm_last(&self, eps: f64) -> Var {
        let a = self.value();
        let (rows, cols) = a.rows_cols();
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let mut s = 0.0;
            for c in 0..cols {
                let v = a.data()[r * cols + c];
                s += v * v;
            }
            data[r] = (s + eps).sqrt();
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let t = Tensor::new(shape, data).unwrap();
        self.graph.push(Op::NormLast(self.id, eps), t)
    }

    fn bcast_pair(&self, other: &Var, name: &str) -> (Rc<Tensor>, Rc<Tensor>) {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        let (rows, _) = a.rows_cols();
        let (brows, bcols) = b.rows_cols();
        assert!(
            bcols == 1 && brows == rows,
            "{name}: rhs must be [.., 1] with matching leading dims (lhs {:?}, rhs {:?})",
            a.shape(),
            b.shape()
        );
        (a, b)
    }

    pub fn add_bcast_last(&self, other: &Var) -> Var {
        let (a, b) = self.bcast_pair(other, "add_bcast_last");
        let t = bcast_kernel(&a, &b, |x, y| x + y);
        self.graph.push(Op::AddBcastLast(self.id, other.id), t)
    }

    pub fn sub_bcast_last(&self, other: &Var) -> Var {
        let (a, b) = self.bcast_pair(other, "sub_bcast_last");
        let t = bcast_kernel(&a, &b, |x, y| x - y);
        self.graph.push(Op::SubBcastLast(self.id, other.id), t)
    }

    pub fn mul_bcast_last(&self, other: &Var) -> Var {
        let (a, b) = self.bcast_pair(other, "mul_bcast_last");
        let t = bcast_kernel(&a, &b, |x, y| x * y);
        self.graph.push(Op::MulBcastLast(self.id, other.id), t)
    }

    pub fn div_bcast_last(&self, other: &Var) -> Var {
        let (a, b) = self.bcast_pair(other, "div_bcast_last");
        let t = bcast_kernel(&a, &b, |x, y| x / y);
        self.graph.push(Op::DivBcastLast(self.id, other.id), t)
    }

    /// Concatenate along `axis`. All inputs share the other dimensions.
    pub fn concat(axis: usize, inputs: &[&Var]) -> Var {
        assert!(!inputs.is_empty(), "concat of zero inputs");
        let graph = inputs[0].graph.clone();
        for v in inputs {
            inputs[0].same_graph(v);
        }
        let values: Vec<Rc<Tensor>> = inputs.iter().map(|v| v.value()).collect();
        let t = concat_kernel(&values, axis);
        graph.push(
            Op::Concat {
                axis,
                inputs: inputs.iter().map(|v| v.id).collect(),
            },
            t,
        )
    }

    /// Slice `[start, start+len)` of the last dimension.
    pub fn narrow_last(&self, start: usize, len: usize) -> Var {
        let a = self.value();
        let (rows, cols) = a.rows_cols();
        assert!(start + len <= cols, "narrow_last out of range");
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&a.data()[r * cols + start..r * cols + start + len]);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data).unwrap();
        self.graph.push(
            Op::NarrowLast {
                a: self.id,
                start,
                len,
            },
            t,
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let t = self.value().reshaped(shape).expect("reshape count mismatch");
        self.graph.push(Op::Reshape(self.id), t)
    }

    /// Repeat each row of a 2-D tensor `r` consecutive times: `[N,F] -> [N*r,F]`.
    pub fn repeat_rows(&self, r: usize) -> Var {
        let a = self.value();
        assert_eq!(a.shape().len(), 2, "repeat_rows needs 2-D input");
        let (n, f) = (a.shape()[0], a.shape()[1]);
        let mut data = Vec::with_capacity(n * r * f);
        for row in 0..n {
            let s = &a.data()[row * f..(row + 1) * f];
            for _ in 0..r {
                data.extend_from_slice(s);
            }
        }
        let t = Tensor::new(vec![n * r, f], data).unwrap();
        self.graph.push(Op::RepeatRows(self.id, r), t)
    }

    /// Gather rows of a 2-D tensor: `[M,F]` + indices -> `[len,F]`.
    pub fn index_select0(&self, idx: Rc<Vec<usize>>) -> Var {
        let a = self.value();
        assert_eq!(a.shape().len(), 2, "index_select0 needs 2-D input");
        let (m, f) = (a.shape()[0], a.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * f);
        for &i in idx.iter() {
            assert!(i < m, "index_select0 index {i} out of range {m}");
            data.extend_from_slice(&a.data()[i * f..(i + 1) * f]);
        }
        let t = Tensor::new(vec![idx.len(), f], data).unwrap();
        self.graph.push(Op::IndexSelect0 { a: self.id, idx }, t)
    }

    /// Bilinear sample of a `[C,H,W]` grid at normalized uv coordinates
    /// (texel centers at `(i+0.5)/W`), border-clamped: -> `[P,C]`.
    pub fn bilinear_sample(&self, coords: Rc<Vec<(f64, f64)>>) -> Var {
        let g = self.value();
        assert_eq!(g.shape().len(), 3, "bilinear_sample needs [C,H,W]");
        let t = bilinear_forward(&g, &coords);
        self.graph.push(
            Op::BilinearSample {
                grid: self.id,
                coords,
            },
            t,
        )
    }

    /// Weighted sum over the middle axis: `[N,K,F]` pooled by `[N,K]` -> `[N,F]`.
    pub fn weighted_pool(&self, weights: &Var) -> Var {
        self.same_graph(weights);
        let (f, w) = (self.value(), weights.value());
        assert_eq!(f.shape().len(), 3, "weighted_pool feat must be [N,K,F]");
        assert_eq!(
            w.shape(),
            &f.shape()[..2],
            "weighted_pool weights must be [N,K]"
        );
        let (n, k, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..k {
                let wij = w.data()[i * k + j];
                let frow = &f.data()[(i * k + j) * c..(i * k + j + 1) * c];
                let out = &mut data[i * c..(i + 1) * c];
                for (o, v) in out.iter_mut().zip(frow) {
                    *o += wij * v;
                }
            }
        }
        let t = Tensor::new(vec![n, c], data).unwrap();
        self.graph.push(
            Op::WeightedPool {
                feat: self.id,
                w: weights.id,
            },
            t,
        )
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_last(&self) -> Var {
        let m = self.max_last();
        let e = self.sub_bcast_last(&m).exp();
        let s = e.sum_last();
        e.div_bcast_last(&s)
    }
}

pub(crate) fn softplus_val(x: f64, beta: f64, threshold: f64) -> f64 {
    if beta * x > threshold {
        x
    } else {
        (1.0 + (beta * x).exp()).ln() / beta
    }
}

pub(crate) fn sigmoid_val(x: f64, beta: f64, threshold: f64) -> f64 {
    if beta * x > threshold {
        1.0
    } else {
        1.0 / (1.0 + (-beta * x).exp())
    }
}

/// `[m,k] x [k,n]`, optionally transposing either argument.
pub(crate) fn matmul_kernel(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(ka, kb, "matmul inner dims");
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    match (ta, tb) {
        (false, false) => {
            // i-k-j order streams B and C rows.
            for i in 0..m {
                let crow = &mut out[i * n..(i + 1) * n];
                for k in 0..ka {
                    let av = ad[i * ac + k];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[k * n..(k + 1) * n];
                    for (c, bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
        }
        (true, false) => {
            for k in 0..ka {
                let arow = &ad[k * ac..(k + 1) * ac];
                let brow = &bd[k * n..(k + 1) * n];
                for (i, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let crow = &mut out[i * n..(i + 1) * n];
                    for (c, bv) in crow.iter_mut().zip(brow) {
                        *c += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                for j in 0..n {
                    let arow = &ad[i * ac..(i + 1) * ac];
                    let brow = &bd[j * bc..(j + 1) * bc];
                    let mut s = 0.0;
                    for (av, bv) in arow.iter().zip(brow) {
                        s += av * bv;
                    }
                    out[i * n + j] = s;
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for k in 0..ka {
                        s += ad[k * ac + i] * bd[j * bc + k];
                    }
                    out[i * n + j] = s;
                }
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

fn bcast_kernel(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (rows, cols) = a.rows_cols();
    let mut data = Vec::with_capacity(a.numel());
    for r in 0..rows {
        let bv = b.data()[r];
        for c in 0..cols {
            data.push(f(a.data()[r * cols + c], bv));
        }
    }
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn concat_kernel(values: &[Rc<Tensor>], axis: usize) -> Tensor {
    let base = values[0].shape();
    assert!(axis < base.len(), "concat axis out of range");
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut axis_total = 0;
    for v in values {
        assert_eq!(v.shape().len(), base.len(), "concat rank mismatch");
        for (d, (s, t)) in v.shape().iter().zip(base).enumerate() {
            assert!(d == axis || s == t, "concat non-axis dims must match");
        }
        axis_total += v.shape()[axis];
    }
    let mut shape = base.to_vec();
    shape[axis] = axis_total;
    let mut data = Vec::with_capacity(outer * axis_total * inner);
    for o in 0..outer {
        for v in values {
            let ax = v.shape()[axis];
            let start = o * ax * inner;
            data.extend_from_slice(&v.data()[start..start + ax * inner]);
        }
    }
    Tensor::new(shape, data).unwrap()
}

fn conv_out(h: usize, k: usize, pad: usize, stride: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ciw, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(ci, ciw, "conv2d channel mismatch");
    let oh = conv_out(h, kh, pad, stride);
    let ow = conv_out(wd, kw, pad, stride);
    let mut out = vec![0.0; co * oh * ow];
    let xd = x.data();
    let wdat = w.data();
    for c_out in 0..co {
        for c_in in 0..ci {
            let wbase = ((c_out * ci) + c_in) * kh * kw;
            let xbase = c_in * h * wd;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdat[wbase + ky * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let orow = (c_out * oh + oy) * ow;
                        let xrow = xbase + iy as usize * wd;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            out[orow + ox] += wv * xd[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out).unwrap()
}

fn convt_out(h: usize, k: usize, pad: usize, stride: usize, out_pad: usize) -> usize {
    (h - 1) * stride + k + out_pad - 2 * pad
}

fn convt2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize, out_pad: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ciw, co, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(ci, ciw, "conv2d_transpose channel mismatch");
    let oh = convt_out(h, kh, pad, stride, out_pad);
    let ow = convt_out(wd, kw, pad, stride, out_pad);
    let mut out = vec![0.0; co * oh * ow];
    let xd = x.data();
    let wdat = w.data();
    for c_in in 0..ci {
        for c_out in 0..co {
            let wbase = ((c_in * co) + c_out) * kh * kw;
            let obase = c_out * oh * ow;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdat[wbase + ky * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for iy in 0..h {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let xrow = (c_in * h + iy) * wd;
                        let orow = obase + oy as usize * ow;
                        for ix in 0..wd {
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            out[orow + ox as usize] += wv * xd[xrow + ix];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out).unwrap()
}

/// Clamped bilinear taps for one normalized coordinate on an axis of size `n`.
fn bilinear_taps(u: f64, n: usize) -> (usize, usize, f64) {
    let p = u * n as f64 - 0.5;
    let f = p.floor();
    let frac = p - f;
    let i0 = (f as isize).clamp(0, n as isize - 1) as usize;
    let i1 = ((f as isize) + 1).clamp(0, n as isize - 1) as usize;
    (i0, i1, frac)
}

fn bilinear_forward(grid: &Tensor, coords: &[(f64, f64)]) -> Tensor {
    let (c, h, w) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let mut out = vec![0.0; coords.len() * c];
    let gd = grid.data();
    for (p, &(u, v)) in coords.iter().enumerate() {
        let (x0, x1, fx) = bilinear_taps(u, w);
        let (y0, y1, fy) = bilinear_taps(v, h);
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        for ch in 0..c {
            let base = ch * h * w;
            out[p * c + ch] = w00 * gd[base + y0 * w + x0]
                + w10 * gd[base + y0 * w + x1]
                + w01 * gd[base + y1 * w + x0]
                + w11 * gd[base + y1 * w + x1];
        }
    }
    Tensor::new(vec![coords.len(), c], out).unwrap()
}

fn backward_op(tape: &Tape, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &tape.nodes[id];
    let val = |i: usize| tape.nodes[i].value.clone();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(grads, *a, ew_mul(g, &bv));
            accumulate(grads, *b, ew_mul(g, &av));
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let mut da = g.clone();
            for (d, y) in da.data_mut().iter_mut().zip(bv.data()) {
                *d /= y;
            }
            accumulate(grads, *a, da);
            let mut db = g.clone();
            for ((d, x), y) in db.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                *d *= -x / (y * y);
            }
            accumulate(grads, *b, db);
        }
        Op::AddScalar(a, _) => accumulate(grads, *a, g.clone()),
        Op::MulScalar(a, c) => accumulate(grads, *a, g.map(|v| v * c)),
        Op::Neg(a) => accumulate(grads, *a, g.map(|v| -v)),
        Op::Exp(a) => accumulate(grads, *a, ew_mul(g, &node.value)),
        Op::Ln(a) => {
            let av = val(*a);
            let mut d = g.clone();
            for (d, x) in d.data_mut().iter_mut().zip(av.data()) {
                *d /= x;
            }
            accumulate(grads, *a, d);
        }
        Op::Sqrt(a) => {
            let mut d = g.clone();
            for (d, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                *d *= 0.5 / y;
            }
            accumulate(grads, *a, d);
        }
        Op::Abs(a) => {
            let av = val(*a);
            let mut d = g.clone();
            for (d, x) in d.data_mut().iter_mut().zip(av.data()) {
                *d *= if *x > 0.0 {
                    1.0
                } else if *x < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
            accumulate(grads, *a, d);
        }
        Op::Sin(a) => {
            let av = val(*a);
            let mut d = g.clone();
            for (d, x) in d.data_mut().iter_mut().zip(av.data()) {
                *d *= x.cos();
            }
            accumulate(grads, *a, d);
        }
        Op::Cos(a) => {
            let av = val(*a);
            let mut d = g.clone();
            for (d, x) in d.data_mut().iter_mut().zip(av.data()) {
                *d *= -x.sin();
            }
            accumulate(grads, *a, d);
        }
        Op::Tanh(a) => {
            let mut d = g.clone();
            for (d, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                *d *= 1.0 - y * y;
            }
            accumulate(grads, *a, d);
        }
        Op::LeakyRelu(a, slope) => {
            let av = val(*a);
            let mut d = g.clone();
            for (d, x) in d.data_mut().iter_mut().zip(av.data()) {
                *d *= if *x > 0.0 { 1.0 } else { *slope };
            }
            accumulate(grads, *a, d);
        }
        Op::Softplus(a, beta, thr) => {
            let av = val(*a);
            let mut d = g.clone();
            for (d, x) in d.data_mut().iter_mut().zip(av.data()) {
                *d *= sigmoid_val(*x, *beta, *thr);
            }
            accumulate(grads, *a, d);
        }
        Op::SigmoidBeta(a, beta, thr) => {
            let av = val(*a);
            let mut d = g.clone();
            for (d, x) in d.data_mut().iter_mut().zip(av.data()) {
                let s = sigmoid_val(*x, *beta, *thr);
                let ds = if *beta * *x > *thr {
                    0.0
                } else {
                    *beta * s * (1.0 - s)
                };
                *d *= ds;
            }
            accumulate(grads, *a, d);
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(grads, *a, matmul_kernel(g, &bv, false, true));
            accumulate(grads, *b, matmul_kernel(&av, g, true, false));
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (xv, wv) = (val(*x), val(*w));
            let (dx, dw) = conv2d_backward(&xv, &wv, g, *stride, *pad);
            accumulate(grads, *x, dx);
            accumulate(grads, *w, dw);
        }
        Op::ConvT2d {
            x,
            w,
            stride,
            pad,
            out_pad: _,
        } => {
            let (xv, wv) = (val(*x), val(*w));
            let (dx, dw) = convt2d_backward(&xv, &wv, g, *stride, *pad);
            accumulate(grads, *x, dx);
            accumulate(grads, *w, dw);
        }
        Op::AddRow(a, b) => {
            accumulate(grads, *a, g.clone());
            let (rows, cols) = g.rows_cols();
            let mut db = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    db[c] += g.data()[r * cols + c];
                }
            }
            accumulate(grads, *b, Tensor::new(vec![cols], db).unwrap());
        }
        Op::SumAll(a) => {
            let gval = g.data()[0];
            accumulate(grads, *a, Tensor::full(val(*a).shape(), gval));
        }
        Op::SumLast(a) => {
            let av = val(*a);
            let (rows, cols) = av.rows_cols();
            let mut d = Vec::with_capacity(av.numel());
            for r in 0..rows {
                let gv = g.data()[r];
                for _ in 0..cols {
                    d.push(gv);
                }
            }
            accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
        }
        Op::MaxLast(a) => {
            let av = val(*a);
            let (rows, cols) = av.rows_cols();
            let mut d = vec![0.0; av.numel()];
            for r in 0..rows {
                let mut best = 0;
                let mut m = f64::NEG_INFINITY;
                for c in 0..cols {
                    let v = av.data()[r * cols + c];
                    if v > m {
                        m = v;
                        best = c;
                    }
                }
                d[r * cols + best] = g.data()[r];
            }
            accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
        }
        Op::NormLast(a, _) => {
            let av = val(*a);
            let (rows, cols) = av.rows_cols();
            let mut d = vec![0.0; av.numel()];
            for r in 0..rows {
                let y = node.value.data()[r];
                let gv = g.data()[r];
                for c in 0..cols {
                    d[r * cols + c] = gv * av.data()[r * cols + c] / y;
                }
            }
            accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
        }
        Op::AddBcastLast(a, b) | Op::SubBcastLast(a, b) => {
            let sign = if matches!(node.op, Op::SubBcastLast(..)) {
                -1.0
            } else {
                1.0
            };
            accumulate(grads, *a, g.clone());
            let (rows, cols) = g.rows_cols();
            let bv = val(*b);
            let mut db = vec![0.0; rows];
            for r in 0..rows {
                let mut s = 0.0;
                for c in 0..cols {
                    s += g.data()[r * cols + c];
                }
                db[r] = sign * s;
            }
            accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
        }
        Op::MulBcastLast(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (rows, cols) = g.rows_cols();
            let mut da = g.clone();
            for r in 0..rows {
                let w = bv.data()[r];
                for c in 0..cols {
                    da.data_mut()[r * cols + c] *= w;
                }
            }
            accumulate(grads, *a, da);
            let mut db = vec![0.0; rows];
            for r in 0..rows {
                let mut s = 0.0;
                for c in 0..cols {
                    s += g.data()[r * cols + c] * av.data()[r * cols + c];
                }
                db[r] = s;
            }
            accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
        }
        Op::DivBcastLast(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (rows, cols) = g.rows_cols();
            let mut da = g.clone();
            for r in 0..rows {
                let w = bv.data()[r];
                for c in 0..cols {
                    da.data_mut()[r * cols + c] /= w;
                }
            }
            accumulate(grads, *a, da);
            let mut db = vec![0.0; rows];
            for r in 0..rows {
                let w = bv.data()[r];
                let mut s = 0.0;
                for c in 0..cols {
                    s += g.data()[r * cols + c] * av.data()[r * cols + c];
                }
                db[r] = -s / (w * w);
            }
            accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
        }
        Op::Concat { axis, inputs } => {
            let base = val(inputs[0]);
            let outer: usize = base.shape()[..*axis].iter().product();
            let inner: usize = base.shape()[*axis + 1..].iter().product();
            let total_axis: usize = node.value.shape()[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let v = val(inp);
                let ax = v.shape()[*axis];
                let mut d = Vec::with_capacity(v.numel());
                for o in 0..outer {
                    let start = (o * total_axis + offset) * inner;
                    d.extend_from_slice(&g.data()[start..start + ax * inner]);
                }
                accumulate(grads, inp, Tensor::new(v.shape().to_vec(), d).unwrap());
                offset += ax;
            }
        }
        Op::NarrowLast { a, start, len } => {
            let av = val(*a);
            let (rows, cols) = av.rows_cols();
            let mut d = vec![0.0; av.numel()];
            for r in 0..rows {
                for c in 0..*len {
                    d[r * cols + start + c] = g.data()[r * len + c];
                }
            }
            accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
        }
        Op::Reshape(a) => {
            let av = val(*a);
            accumulate(grads, *a, g.reshaped(av.shape()).unwrap());
        }
        Op::RepeatRows(a, r) => {
            let av = val(*a);
            let (n, f) = (av.shape()[0], av.shape()[1]);
            let mut d = vec![0.0; n * f];
            for row in 0..n {
                for rep in 0..*r {
                    let src = &g.data()[(row * r + rep) * f..(row * r + rep + 1) * f];
                    let dst = &mut d[row * f..(row + 1) * f];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
            accumulate(grads, *a, Tensor::new(vec![n, f], d).unwrap());
        }
        Op::IndexSelect0 { a, idx } => {
            let av = val(*a);
            let f = av.shape()[1];
            let mut d = vec![0.0; av.numel()];
            for (row, &i) in idx.iter().enumerate() {
                let src = &g.data()[row * f..(row + 1) * f];
                let dst = &mut d[i * f..(i + 1) * f];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
            accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d).unwrap());
        }
        Op::BilinearSample { grid, coords } => {
            let gv = val(*grid);
            let (c, h, w) = (gv.shape()[0], gv.shape()[1], gv.shape()[2]);
            let mut d = vec![0.0; gv.numel()];
            for (p, &(u, v)) in coords.iter().enumerate() {
                let (x0, x1, fx) = bilinear_taps(u, w);
                let (y0, y1, fy) = bilinear_taps(v, h);
                let w00 = (1.0 - fx) * (1.0 - fy);
                let w10 = fx * (1.0 - fy);
                let w01 = (1.0 - fx) * fy;
                let w11 = fx * fy;
                for ch in 0..c {
                    let base = ch * h * w;
                    let gp = g.data()[p * c + ch];
                    d[base + y0 * w + x0] += w00 * gp;
                    d[base + y0 * w + x1] += w10 * gp;
                    d[base + y1 * w + x0] += w01 * gp;
                    d[base + y1 * w + x1] += w11 * gp;
                }
            }
            accumulate(grads, *grid, Tensor::new(gv.shape().to_vec(), d).unwrap());
        }
        Op::WeightedPool { feat, w } => {
            let (fv, wv) = (val(*feat), val(*w));
            let (n, k, c) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
            let mut df = vec![0.0; fv.numel()];
            let mut dw = vec![0.0; wv.numel()];
            for i in 0..n {
                let grow = &g.data()[i * c..(i + 1) * c];
                for j in 0..k {
                    let wij = wv.data()[i * k + j];
                    let frow = &fv.data()[(i * k + j) * c..(i * k + j + 1) * c];
                    let dfrow = &mut df[(i * k + j) * c..(i * k + j + 1) * c];
                    let mut s = 0.0;
                    for ((dfv, gv), fvx) in dfrow.iter_mut().zip(grow).zip(frow) {
                        *dfv += wij * gv;
                        s += gv * fvx;
                    }
                    dw[i * k + j] += s;
                }
            }
            accumulate(grads, *feat, Tensor::new(fv.shape().to_vec(), df).unwrap());
            accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
        }
    }
}

fn ew_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
        *x *= y;
    }
    out
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor) {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; w.numel()];
    let xd = x.data();
    let wdat = w.data();
    let gd = dy.data();
    for c_out in 0..co {
        for c_in in 0..ci {
            let wbase = ((c_out * ci) + c_in) * kh * kw;
            let xbase = c_in * h * wd;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdat[wbase + ky * kw + kx];
                    let mut wsum = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let grow = (c_out * oh + oy) * ow;
                        let xrow = xbase + iy as usize * wd;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let gv = gd[grow + ox];
                            wsum += gv * xd[xrow + ix as usize];
                            dx[xrow + ix as usize] += gv * wv;
                        }
                    }
                    dw[wbase + ky * kw + kx] += wsum;
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
    )
}

fn convt2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor) {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (_, co, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; w.numel()];
    let xd = x.data();
    let wdat = w.data();
    let gd = dy.data();
    for c_in in 0..ci {
        for c_out in 0..co {
            let wbase = ((c_in * co) + c_out) * kh * kw;
            let gbase = c_out * oh * ow;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdat[wbase + ky * kw + kx];
                    let mut wsum = 0.0;
                    for iy in 0..h {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        let xrow = (c_in * h + iy) * wd;
                        let grow = gbase + oy as usize * ow;
                        for ix in 0..wd {
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            let gv = gd[grow + ox as usize];
                            dx[xrow + ix] += gv * wv;
                            wsum += gv * xd[xrow + ix];
                        }
                    }
                    dw[wbase + ky * kw + kx] += wsum;
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
    )
}
