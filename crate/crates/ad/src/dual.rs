//! Forward-mode tangents carried through the tape.
//!
//! A [`Dual`] pairs a primal [`Var`] with K tangent `Var`s (one per seeded
//! input direction). Tangent rules are expressed with ordinary tape
//! operations, so a tangent output is itself differentiable in reverse mode.
//! That composition is what the training losses need: the query gradient of
//! the SDF appears inside a scalar loss whose parameter gradient is then
//! requested.
//!
//! `None` tangents are structural zeros; constants carry all-`None` tangents
//! and cost nothing.

use std::rc::Rc;

use crate::error::{AdError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone)]
pub struct Dual {
    pub v: Var,
    pub t: Vec<Option<Var>>,
}

impl Dual {
    /// Lift a value with no tangents (constant w.r.t. all seeded directions).
    pub fn constant(v: Var, arity: usize) -> Dual {
        Dual {
            v,
            t: vec![None; arity],
        }
    }

    /// Seed a value with explicit tangent directions.
    pub fn seeded(v: Var, tangents: Vec<Var>) -> Dual {
        let t = tangents.into_iter().map(Some).collect();
        Dual { v, t }
    }

    pub fn arity(&self) -> usize {
        self.t.len()
    }

    fn check_arity(&self, other: &Dual) {
        assert_eq!(self.arity(), other.arity(), "dual tangent arity mismatch");
    }

    fn map_tangents(&self, f: impl Fn(&Var) -> Var) -> Vec<Option<Var>> {
        self.t.iter().map(|t| t.as_ref().map(&f)).collect()
    }

    fn zip_tangents(
        &self,
        other: &Dual,
        f: impl Fn(Option<&Var>, Option<&Var>) -> Option<Var>,
    ) -> Vec<Option<Var>> {
        self.check_arity(other);
        self.t
            .iter()
            .zip(&other.t)
            .map(|(a, b)| f(a.as_ref(), b.as_ref()))
            .collect()
    }

    pub fn add(&self, other: &Dual) -> Dual {
        let v = self.v.add(&other.v);
        let t = self.zip_tangents(other, |a, b| match (a, b) {
            (Some(a), Some(b)) => Some(a.add(b)),
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => Some(b.clone()),
            (None, None) => None,
        });
        Dual { v, t }
    }

    pub fn sub(&self, other: &Dual) -> Dual {
        let v = self.v.sub(&other.v);
        let t = self.zip_tangents(other, |a, b| match (a, b) {
            (Some(a), Some(b)) => Some(a.sub(b)),
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => Some(b.neg()),
            (None, None) => None,
        });
        Dual { v, t }
    }

    pub fn mul(&self, other: &Dual) -> Dual {
        let v = self.v.mul(&other.v);
        let t = self.zip_tangents(other, |a, b| {
            let ta = a.map(|a| a.mul(&other.v));
            let tb = b.map(|b| self.v.mul(b));
            combine(ta, tb)
        });
        Dual { v, t }
    }

    pub fn div(&self, other: &Dual) -> Dual {
        let v = self.v.div(&other.v);
        let t = self.zip_tangents(other, |a, b| {
            // d(a/b) = da/b - (a/b) * db/b
            let ta = a.map(|a| a.div(&other.v));
            let tb = b.map(|b| v.mul(&b.div(&other.v)).neg());
            combine(ta, tb)
        });
        Dual { v, t }
    }

    pub fn add_scalar(&self, c: f64) -> Dual {
        Dual {
            v: self.v.add_scalar(c),
            t: self.t.clone(),
        }
    }

    pub fn mul_scalar(&self, c: f64) -> Dual {
        Dual {
            v: self.v.mul_scalar(c),
            t: self.map_tangents(|t| t.mul_scalar(c)),
        }
    }

    pub fn neg(&self) -> Dual {
        Dual {
            v: self.v.neg(),
            t: self.map_tangents(|t| t.neg()),
        }
    }

    pub fn exp(&self) -> Dual {
        let v = self.v.exp();
        let t = self.map_tangents(|t| v.mul(t));
        Dual { v, t }
    }

    pub fn ln(&self) -> Dual {
        let v = self.v.ln();
        let t = self.map_tangents(|t| t.div(&self.v));
        Dual { v, t }
    }

    pub fn sqrt(&self) -> Dual {
        let v = self.v.sqrt();
        let t = self.map_tangents(|t| t.mul_scalar(0.5).div(&v));
        Dual { v, t }
    }

    pub fn sin(&self) -> Dual {
        let v = self.v.sin();
        let c = self.v.cos();
        let t = self.map_tangents(|t| c.mul(t));
        Dual { v, t }
    }

    pub fn cos(&self) -> Dual {
        let v = self.v.cos();
        let s = self.v.sin().neg();
        let t = self.map_tangents(|t| s.mul(t));
        Dual { v, t }
    }

    pub fn tanh(&self) -> Dual {
        let v = self.v.tanh();
        let d = v.square().neg().add_scalar(1.0);
        let t = self.map_tangents(|t| d.mul(t));
        Dual { v, t }
    }

    pub fn softplus(&self, beta: f64, threshold: f64) -> Dual {
        let v = self.v.softplus(beta, threshold);
        if self.t.iter().all(Option::is_none) {
            return Dual { v, t: self.t.clone() };
        }
        let d = self.v.sigmoid_beta(beta, threshold);
        let t = self.map_tangents(|t| d.mul(t));
        Dual { v, t }
    }

    pub fn leaky_relu(&self, slope: f64) -> Dual {
        let v = self.v.leaky_relu(slope);
        if self.t.iter().all(Option::is_none) {
            return Dual { v, t: self.t.clone() };
        }
        // Derivative is piecewise constant in the value; treat it as data.
        let mask = self
            .v
            .graph()
            .leaf(self.v.value().map(|x| if x > 0.0 { 1.0 } else { slope }));
        let t = self.map_tangents(|t| mask.mul(t));
        Dual { v, t }
    }

    pub fn abs(&self) -> Dual {
        let v = self.v.abs();
        if self.t.iter().all(Option::is_none) {
            return Dual { v, t: self.t.clone() };
        }
        let sign = self.v.graph().leaf(self.v.value().map(f64::signum));
        let t = self.map_tangents(|t| sign.mul(t));
        Dual { v, t }
    }

    pub fn matmul(&self, other: &Dual) -> Dual {
        let v = self.v.matmul(&other.v);
        let t = self.zip_tangents(other, |a, b| {
            let ta = a.map(|a| a.matmul(&other.v));
            let tb = b.map(|b| self.v.matmul(b));
            combine(ta, tb)
        });
        Dual { v, t }
    }

    pub fn add_row(&self, bias: &Dual) -> Dual {
        let v = self.v.add_row(&bias.v);
        let t = self.zip_tangents(bias, |a, b| match (a, b) {
            (Some(a), Some(b)) => Some(a.add_row(b)),
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => {
                let zeros = self.v.graph().leaf(Tensor::zeros(self.v.value().shape()));
                Some(zeros.add_row(b))
            }
            (None, None) => None,
        });
        Dual { v, t }
    }

    pub fn sum_all(&self) -> Dual {
        Dual {
            v: self.v.sum_all(),
            t: self.map_tangents(|t| t.sum_all()),
        }
    }

    pub fn mean_all(&self) -> Dual {
        Dual {
            v: self.v.mean_all(),
            t: self.map_tangents(|t| t.mean_all()),
        }
    }

    pub fn sum_last(&self) -> Dual {
        Dual {
            v: self.v.sum_last(),
            t: self.map_tangents(|t| t.sum_last()),
        }
    }

    pub fn max_last(&self) -> Dual {
        let v = self.v.max_last();
        if self.t.iter().all(Option::is_none) {
            return Dual { v, t: self.t.clone() };
        }
        // Route tangents through the (value-determined) argmax.
        let a = self.v.value();
        let (rows, cols) = a.rows_cols();
        let mut onehot = Tensor::zeros(a.shape());
        for r in 0..rows {
            let mut best = 0;
            let mut m = f64::NEG_INFINITY;
            for c in 0..cols {
                let x = a.data()[r * cols + c];
                if x > m {
                    m = x;
                    best = c;
                }
            }
            onehot.data_mut()[r * cols + best] = 1.0;
        }
        let mask = self.v.graph().leaf(onehot);
        let t = self.map_tangents(|t| mask.mul(t).sum_last());
        Dual { v, t }
    }

    pub fn norm_last(&self, eps: f64) -> Dual {
        let v = self.v.norm_last(eps);
        let t = self.map_tangents(|t| self.v.mul(t).sum_last().div(&v));
        Dual { v, t }
    }

    pub fn add_bcast_last(&self, other: &Dual) -> Dual {
        let v = self.v.add_bcast_last(&other.v);
        let t = self.zip_tangents(other, |a, b| match (a, b) {
            (Some(a), Some(b)) => Some(a.add_bcast_last(b)),
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => {
                let zeros = self.v.graph().leaf(Tensor::zeros(self.v.value().shape()));
                Some(zeros.add_bcast_last(b))
            }
            (None, None) => None,
        });
        Dual { v, t }
    }

    pub fn sub_bcast_last(&self, other: &Dual) -> Dual {
        let v = self.v.sub_bcast_last(&other.v);
        let t = self.zip_tangents(other, |a, b| match (a, b) {
            (Some(a), Some(b)) => Some(a.sub_bcast_last(b)),
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => {
                let zeros = self.v.graph().leaf(Tensor::zeros(self.v.value().shape()));
                Some(zeros.sub_bcast_last(b))
            }
            (None, None) => None,
        });
        Dual { v, t }
    }

    pub fn mul_bcast_last(&self, other: &Dual) -> Dual {
        let v = self.v.mul_bcast_last(&other.v);
        let t = self.zip_tangents(other, |a, b| {
            let ta = a.map(|a| a.mul_bcast_last(&other.v));
            let tb = b.map(|b| self.v.mul_bcast_last(b));
            combine(ta, tb)
        });
        Dual { v, t }
    }

    pub fn div_bcast_last(&self, other: &Dual) -> Dual {
        let v = self.v.div_bcast_last(&other.v);
        let t = self.zip_tangents(other, |a, b| {
            // d(a / b) = da / b - (a/b) * (db / b), b broadcast over last dim
            let ta = a.map(|a| a.div_bcast_last(&other.v));
            let tb = b.map(|b| v.mul_bcast_last(&b.div(&other.v)).neg());
            combine(ta, tb)
        });
        Dual { v, t }
    }

    pub fn concat_last(parts: &[&Dual]) -> Dual {
        assert!(!parts.is_empty());
        let arity = parts[0].arity();
        let axis = parts[0].v.value().shape().len() - 1;
        let vs: Vec<&Var> = parts.iter().map(|d| &d.v).collect();
        let v = Var::concat(axis, &vs);
        let mut t = Vec::with_capacity(arity);
        for dir in 0..arity {
            let any = parts.iter().any(|p| p.t[dir].is_some());
            if !any {
                t.push(None);
                continue;
            }
            // Materialize zeros for constant parts so the layout matches.
            let cols: Vec<Var> = parts
                .iter()
                .map(|p| match &p.t[dir] {
                    Some(tv) => tv.clone(),
                    None => p.v.graph().leaf(Tensor::zeros(p.v.value().shape())),
                })
                .collect();
            let refs: Vec<&Var> = cols.iter().collect();
            t.push(Some(Var::concat(axis, &refs)));
        }
        Dual { v, t }
    }

    pub fn narrow_last(&self, start: usize, len: usize) -> Dual {
        Dual {
            v: self.v.narrow_last(start, len),
            t: self.map_tangents(|t| t.narrow_last(start, len)),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Dual {
        Dual {
            v: self.v.reshape(shape),
            t: self.map_tangents(|t| t.reshape(shape)),
        }
    }

    pub fn repeat_rows(&self, r: usize) -> Dual {
        Dual {
            v: self.v.repeat_rows(r),
            t: self.map_tangents(|t| t.repeat_rows(r)),
        }
    }

    pub fn index_select0(&self, idx: Rc<Vec<usize>>) -> Dual {
        Dual {
            v: self.v.index_select0(idx.clone()),
            t: self.map_tangents(|t| t.index_select0(idx.clone())),
        }
    }

    pub fn weighted_pool(&self, w: &Dual) -> Dual {
        let v = self.v.weighted_pool(&w.v);
        let t = self.zip_tangents(w, |a, b| {
            let ta = a.map(|a| a.weighted_pool(&w.v));
            let tb = b.map(|b| self.v.weighted_pool(b));
            combine(ta, tb)
        });
        Dual { v, t }
    }

    pub fn softmax_last(&self) -> Dual {
        let m = self.max_last();
        let e = self.sub_bcast_last(&m).exp();
        let s = e.sum_last();
        e.div_bcast_last(&s)
    }

    pub fn square(&self) -> Dual {
        self.mul(self)
    }
}

fn combine(a: Option<Var>, b: Option<Var>) -> Option<Var> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.add(&b)),
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(b),
        (None, None) => None,
    }
}

/// Directional derivative of `f` at `x` along `tangent`.
///
/// Returns `(f(x), J_f(x) tangent)` as tensors. The tangent is built on the
/// tape, so callers needing to differentiate the tangent further should use
/// [`Dual`] directly inside their own graph.
pub fn forward_jvp<F>(x: &Tensor, tangent: &Tensor, f: F) -> Result<(Tensor, Tensor)>
where
    F: FnOnce(&Dual) -> Dual,
{
    if x.shape() != tangent.shape() {
        return Err(AdError::Shape(format!(
            "tangent shape {:?} does not match input shape {:?}",
            tangent.shape(),
            x.shape()
        )));
    }
    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let tv = g.leaf(tangent.clone());
    let out = f(&Dual::seeded(xv, vec![tv]));
    let y = (*out.v.value()).clone();
    let ty = match &out.t[0] {
        Some(t) => (*t.value()).clone(),
        None => Tensor::zeros(y.shape()),
    };
    Ok((y, ty))
}
