//! Tape-based reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Graph`] is built afresh for every forward/backward pass and is
//! single-owner for its lifetime. Operations record a backward closure; the
//! tape is replayed in reverse insertion order, which is a valid reverse
//! topological order because parents always precede children.

use std::ops::Range;
use std::rc::Rc;

use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, IxDyn};
use smallvec::SmallVec;

use super::{NumericsError, Result, Scalar};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type ParentGrads<T> = SmallVec<[ArrayD<T>; 3]>;

/// Context handed to a backward closure.
struct BackCtx<'a, T> {
    /// Value of this node.
    out: &'a ArrayD<T>,
    /// Gradient of the loss with respect to this node.
    grad: &'a ArrayD<T>,
    /// Values of the parent nodes, in recorded order.
    parents: &'a [&'a ArrayD<T>],
}

type BackFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> ParentGrads<T>>;

struct Node<T> {
    op: &'static str,
    parents: SmallVec<[Var; 3]>,
    backward: Option<BackFn<T>>,
}

/// Reverse-mode autodiff tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    values: Vec<ArrayD<T>>,
    scope_stack: Vec<String>,
    current_scope: Rc<str>,
}

/// Gradients of a scalar loss with respect to every node of the graph.
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; zero array if the loss does not depend on it.
    pub fn get(&self, var: Var, shape: &[usize]) -> ArrayD<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn try_get(&self, var: Var) -> Option<&ArrayD<T>> {
        self.grads[var.0].as_ref()
    }
}

fn all_finite<T: Scalar>(a: &ArrayD<T>) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Sum `g` down to `shape` under numpy-style trailing-axis broadcast rules.
fn reduce_to_shape<T: Scalar>(mut g: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if g.shape() == shape {
        return g;
    }
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] != 1 {
            let summed = g.sum_axis(Axis(ax));
            g = summed.insert_axis(Axis(ax));
        }
    }
    g
}

/// Check that `b` broadcasts to `a` with only trailing-axis rules.
fn broadcast_compatible(a: &[usize], b: &[usize]) -> bool {
    if b.len() > a.len() {
        return false;
    }
    let offset = a.len() - b.len();
    b.iter()
        .enumerate()
        .all(|(i, &bd)| bd == a[offset + i] || bd == 1)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            values: Vec::new(),
            scope_stack: Vec::new(),
            current_scope: Rc::from(""),
        }
    }

    /// Push a named scope; errors raised while it is active name it.
    pub fn push_scope(&mut self, name: &str) {
        self.scope_stack.push(name.to_string());
        self.current_scope = Rc::from(self.scope_stack.join("."));
    }

    pub fn pop_scope(&mut self) {
        self.scope_stack.pop();
        self.current_scope = Rc::from(self.scope_stack.join("."));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Value of a 0-d node as a plain scalar.
    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert!(self.values[v.0].ndim() == 0);
        *self.values[v.0].iter().next().expect("empty scalar node")
    }

    fn err_shape(&self, op: &'static str, details: String) -> NumericsError {
        NumericsError::ShapeMismatch {
            op,
            scope: self.current_scope.to_string(),
            details,
        }
    }

    fn push(
        &mut self,
        op: &'static str,
        parents: SmallVec<[Var; 3]>,
        value: ArrayD<T>,
        backward: Option<BackFn<T>>,
    ) -> Result<Var> {
        // downstream ops rely on contiguous rows
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        if !all_finite(&value) {
            return Err(NumericsError::NonFinite {
                op,
                scope: self.current_scope.to_string(),
            });
        }
        self.nodes.push(Node {
            op,
            parents,
            backward,
        });
        self.values.push(value);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf node. Both constants and trainable parameters enter this way;
    /// the distinction is which vars the caller asks gradients for.
    pub fn input(&mut self, value: ArrayD<T>) -> Result<Var> {
        self.push("input", SmallVec::new(), value, None)
    }

    pub fn input2(&mut self, value: ndarray::Array2<T>) -> Result<Var> {
        self.input(value.into_dyn())
    }

    pub fn input1(&mut self, value: ndarray::Array1<T>) -> Result<Var> {
        self.input(value.into_dyn())
    }

    pub fn scalar_input(&mut self, value: T) -> Result<Var> {
        self.input(ndarray::arr0(value).into_dyn())
    }

    // ---- elementwise binary ops (rhs may broadcast onto lhs) ----

    fn binop(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        back: impl Fn(&BackCtx<'_, T>) -> ParentGrads<T> + 'static,
    ) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if !broadcast_compatible(va.shape(), vb.shape()) {
            return Err(self.err_shape(
                op,
                format!("lhs {:?} vs rhs {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = if va.shape() == vb.shape() {
            let mut o = va.clone();
            o.zip_mut_with(vb, |x, &y| *x = f(*x, y));
            o
        } else {
            let vb_b = vb.broadcast(va.raw_dim()).expect("checked broadcast");
            let mut o = va.clone();
            o.zip_mut_with(&vb_b, |x, &y| *x = f(*x, y));
            o
        };
        self.push(op, SmallVec::from_slice(&[a, b]), out, Some(Box::new(back)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let b_shape = self.values[b.0].shape().to_vec();
        self.binop("add", a, b, |x, y| x + y, move |ctx| {
            let da = ctx.grad.clone();
            let db = reduce_to_shape(ctx.grad.clone(), &b_shape);
            SmallVec::from_iter([da, db])
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let b_shape = self.values[b.0].shape().to_vec();
        self.binop("sub", a, b, |x, y| x - y, move |ctx| {
            let da = ctx.grad.clone();
            let db = reduce_to_shape(ctx.grad.mapv(|g| -g), &b_shape);
            SmallVec::from_iter([da, db])
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let b_shape = self.values[b.0].shape().to_vec();
        self.binop("mul", a, b, |x, y| x * y, move |ctx| {
            let vb = ctx.parents[1]
                .broadcast(ctx.grad.raw_dim())
                .expect("checked broadcast");
            let da = ctx.grad * &vb;
            let db = reduce_to_shape(ctx.grad * ctx.parents[0], &b_shape);
            SmallVec::from_iter([da, db])
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let b_shape = self.values[b.0].shape().to_vec();
        self.binop("div", a, b, |x, y| x / y, move |ctx| {
            let vb = ctx.parents[1]
                .broadcast(ctx.grad.raw_dim())
                .expect("checked broadcast");
            let da = ctx.grad / &vb;
            // d/db (a/b) = -a / b^2 = -out / b
            let mut db_full = ctx.grad * ctx.out;
            db_full.zip_mut_with(&vb, |g, &y| *g = -*g / y);
            let db = reduce_to_shape(db_full, &b_shape);
            SmallVec::from_iter([da, db])
        })
    }

    // ---- elementwise unary ops ----

    fn unop(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(T) -> T,
        back: impl Fn(&BackCtx<'_, T>) -> ArrayD<T> + 'static,
    ) -> Result<Var> {
        let out = self.values[a.0].mapv(f);
        self.push(
            op,
            SmallVec::from_slice(&[a]),
            out,
            Some(Box::new(move |ctx| SmallVec::from_iter([back(ctx)]))),
        )
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unop("neg", a, |x| -x, |ctx| ctx.grad.mapv(|g| -g))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unop("scale", a, move |x| x * c, move |ctx| ctx.grad.mapv(|g| g * c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unop("add_scalar", a, move |x| x + c, |ctx| ctx.grad.clone())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unop(
            "relu",
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            |ctx| {
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.parents[0], |gi, &x| {
                    if x <= T::zero() {
                        *gi = T::zero()
                    }
                });
                g
            },
        )
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unop("abs", a, |x| x.abs(), |ctx| {
            let mut g = ctx.grad.clone();
            g.zip_mut_with(ctx.parents[0], |gi, &x| *gi = *gi * x.signum_or_zero());
            g
        })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unop("square", a, |x| x * x, |ctx| {
            let two = T::from_f64(2.0);
            let mut g = ctx.grad.clone();
            g.zip_mut_with(ctx.parents[0], |gi, &x| *gi = *gi * two * x);
            g
        })
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unop("sqrt", a, |x| x.sqrt(), |ctx| {
            let half = T::from_f64(0.5);
            let mut g = ctx.grad.clone();
            g.zip_mut_with(ctx.out, |gi, &y| *gi = *gi * half / y);
            g
        })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unop("exp", a, |x| x.exp(), |ctx| ctx.grad * ctx.out)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unop("ln", a, |x| x.ln(), |ctx| ctx.grad / ctx.parents[0])
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unop("sin", a, |x| x.sin(), |ctx| {
            let mut g = ctx.grad.clone();
            g.zip_mut_with(ctx.parents[0], |gi, &x| *gi = *gi * x.cos());
            g
        })
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unop("cos", a, |x| x.cos(), |ctx| {
            let mut g = ctx.grad.clone();
            g.zip_mut_with(ctx.parents[0], |gi, &x| *gi = -(*gi) * x.sin());
            g
        })
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        // ln(1 + e^x), computed as max(x, 0) + ln(1 + e^-|x|) for stability
        self.unop(
            "softplus",
            a,
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |ctx| {
                let one = T::one();
                let mut g = ctx.grad.clone();
                g.zip_mut_with(ctx.parents[0], |gi, &x| {
                    *gi = *gi * (one / (one + (-x).exp()))
                });
                g
            },
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(self.err_shape(
                "matmul",
                format!("{:?} @ {:?}", va.shape(), vb.shape()),
            ));
        }
        let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
        let out = a2.dot(&b2).into_dyn();
        self.push(
            "matmul",
            SmallVec::from_slice(&[a, b]),
            out,
            Some(Box::new(|ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let b2 = ctx.parents[1].view().into_dimensionality::<Ix2>().unwrap();
                let da = g.dot(&b2.t()).into_dyn();
                let db = a2.t().dot(&g).into_dyn();
                SmallVec::from_iter([da, db])
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = &self.values[a.0];
        if va.ndim() != 2 {
            return Err(self.err_shape("transpose", format!("{:?}", va.shape())));
        }
        let out = va.t().to_owned();
        self.push(
            "transpose",
            SmallVec::from_slice(&[a]),
            out,
            Some(Box::new(|ctx| {
                SmallVec::from_iter([ctx.grad.t().to_owned()])
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = &self.values[a.0];
        let n: usize = shape.iter().product();
        if n != va.len() {
            return Err(self.err_shape(
                "reshape",
                format!("{:?} -> {:?}", va.shape(), shape),
            ));
        }
        let out = va
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("checked reshape");
        let orig: Vec<usize> = va.shape().to_vec();
        self.push(
            "reshape",
            SmallVec::from_slice(&[a]),
            out,
            Some(Box::new(move |ctx| {
                SmallVec::from_iter([ctx
                    .grad
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&orig))
                    .expect("reshape grad")])
            })),
        )
    }

    /// Permute the axes of a 3-d tensor and materialize in standard layout.
    pub fn permute3(&mut self, a: Var, perm: [usize; 3]) -> Result<Var> {
        let va = &self.values[a.0];
        if va.ndim() != 3 {
            return Err(self.err_shape("permute3", format!("{:?}", va.shape())));
        }
        let out = va
            .view()
            .permuted_axes(IxDyn(&perm))
            .as_standard_layout()
            .to_owned();
        let mut inv = [0usize; 3];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.push(
            "permute3",
            SmallVec::from_slice(&[a]),
            out,
            Some(Box::new(move |ctx| {
                SmallVec::from_iter([ctx
                    .grad
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned()])
            })),
        )
    }

    /// Gather rows of a 2-d tensor; indices may repeat.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = &self.values[a.0];
        if va.ndim() != 2 {
            return Err(self.err_shape("select_rows", format!("{:?}", va.shape())));
        }
        let (rows, cols) = (va.shape()[0], va.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(self.err_shape(
                "select_rows",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = ndarray::Array2::<T>::zeros((indices.len(), cols));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&a2.row(i));
        }
        let idx: Rc<[usize]> = Rc::from(indices);
        self.push(
            "select_rows",
            SmallVec::from_slice(&[a]),
            out.into_dyn(),
            Some(Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut da = ndarray::Array2::<T>::zeros((rows, cols));
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = da.row_mut(i);
                    row += &g.row(r);
                }
                SmallVec::from_iter([da.into_dyn()])
            })),
        )
    }

    /// Contiguous column slice of a 2-d tensor.
    pub fn slice_cols(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let va = &self.values[a.0];
        if va.ndim() != 2 || range.end > va.shape()[1] || range.start >= range.end {
            return Err(self.err_shape(
                "slice_cols",
                format!("{:?} cols {:?}", va.shape(), range),
            ));
        }
        let (rows, cols) = (va.shape()[0], va.shape()[1]);
        let out = va
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .slice(ndarray::s![.., range.start..range.end])
            .to_owned();
        let r = range.clone();
        self.push(
            "slice_cols",
            SmallVec::from_slice(&[a]),
            out.into_dyn(),
            Some(Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut da = ndarray::Array2::<T>::zeros((rows, cols));
                da.slice_mut(ndarray::s![.., r.start..r.end]).assign(&g);
                SmallVec::from_iter([da.into_dyn()])
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 0)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 1)
    }

    fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(self.err_shape("concat", "no parts".into()));
        }
        let views: Vec<ArrayViewD<'_, T>> =
            parts.iter().map(|p| self.values[p.0].view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views)
            .map_err(|e| self.err_shape("concat", e.to_string()))?;
        let sizes: Vec<usize> = parts
            .iter()
            .map(|p| self.values[p.0].shape()[axis])
            .collect();
        self.push(
            "concat",
            SmallVec::from_slice(parts),
            out,
            Some(Box::new(move |ctx| {
                let mut grads = ParentGrads::new();
                let mut start = 0;
                for &sz in &sizes {
                    let g = ctx
                        .grad
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + sz))
                        .to_owned();
                    grads.push(g);
                    start += sz;
                }
                grads
            })),
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let va = &self.values[a.0];
        let out = ndarray::arr0(va.sum()).into_dyn();
        let shape: Vec<usize> = va.shape().to_vec();
        self.push(
            "sum",
            SmallVec::from_slice(&[a]),
            out,
            Some(Box::new(move |ctx| {
                let g = *ctx.grad.iter().next().unwrap();
                SmallVec::from_iter([ArrayD::from_elem(IxDyn(&shape), g)])
            })),
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = &self.values[a.0];
        let n = T::from_f64(va.len() as f64);
        let out = ndarray::arr0(va.sum() / n).into_dyn();
        let shape: Vec<usize> = va.shape().to_vec();
        self.push(
            "mean",
            SmallVec::from_slice(&[a]),
            out,
            Some(Box::new(move |ctx| {
                let g = *ctx.grad.iter().next().unwrap() / n;
                SmallVec::from_iter([ArrayD::from_elem(IxDyn(&shape), g)])
            })),
        )
    }

    // ---- row-wise normalizations ----

    /// Softmax along the last axis of a 2-d tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = &self.values[a.0];
        if va.ndim() != 2 {
            return Err(self.err_shape("softmax", format!("{:?}", va.shape())));
        }
        let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = a2.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(
            "softmax",
            SmallVec::from_slice(&[a]),
            out.into_dyn(),
            Some(Box::new(|ctx| {
                let y = ctx.out.view().into_dimensionality::<Ix2>().unwrap();
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut da = (&g * &y).to_owned();
                for (mut da_row, y_row) in da.rows_mut().into_iter().zip(y.rows()) {
                    let dot = da_row.sum();
                    da_row.zip_mut_with(&y_row, |d, &yi| *d = *d - dot * yi);
                }
                SmallVec::from_iter([da.into_dyn()])
            })),
        )
    }

    /// Log-softmax along the last axis of a 2-d tensor.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = &self.values[a.0];
        if va.ndim() != 2 {
            return Err(self.err_shape("log_softmax", format!("{:?}", va.shape())));
        }
        let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = a2.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let lse = row
                .iter()
                .map(|&x| (x - max).exp())
                .fold(T::zero(), |acc, e| acc + e)
                .ln()
                + max;
            row.mapv_inplace(|x| x - lse);
        }
        self.push(
            "log_softmax",
            SmallVec::from_slice(&[a]),
            out.into_dyn(),
            Some(Box::new(|ctx| {
                let y = ctx.out.view().into_dimensionality::<Ix2>().unwrap();
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut da = g.to_owned();
                for (mut da_row, y_row) in da.rows_mut().into_iter().zip(y.rows()) {
                    let gsum = da_row.sum();
                    da_row.zip_mut_with(&y_row, |d, &ly| *d = *d - gsum * ly.exp());
                }
                SmallVec::from_iter([da.into_dyn()])
            })),
        )
    }

    /// Layer normalization of each row: `gamma * (x - mean)/sqrt(var + eps) + beta`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (vx, vg, vb) = (&self.values[x.0], &self.values[gamma.0], &self.values[beta.0]);
        if vx.ndim() != 2 || vg.ndim() != 1 || vb.ndim() != 1 {
            return Err(self.err_shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        let m = vx.shape()[1];
        if vg.shape()[0] != m || vb.shape()[0] != m {
            return Err(self.err_shape(
                "layer_norm",
                format!("feature dim {m} vs {:?}/{:?}", vg.shape(), vb.shape()),
            ));
        }
        let x2 = vx.view().into_dimensionality::<Ix2>().unwrap();
        let g1 = vg.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = vb.view().into_dimensionality::<Ix1>().unwrap();
        let mf = T::from_f64(m as f64);
        let mut out = x2.to_owned();
        for mut row in out.rows_mut() {
            let mean = row.sum() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).fold(T::zero(), |a, b| a + b) / mf;
            let inv = (var + eps).sqrt().recip();
            for (j, v) in row.iter_mut().enumerate() {
                *v = g1[j] * (*v - mean) * inv + b1[j];
            }
        }
        self.push(
            "layer_norm",
            SmallVec::from_slice(&[x, gamma, beta]),
            out.into_dyn(),
            Some(Box::new(move |ctx| {
                let x2 = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let g1 = ctx.parents[1].view().into_dimensionality::<Ix1>().unwrap();
                let grad = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let (n, m) = (x2.nrows(), x2.ncols());
                let mf = T::from_f64(m as f64);
                let mut dx = ndarray::Array2::<T>::zeros((n, m));
                let mut dgamma = ndarray::Array1::<T>::zeros(m);
                let mut dbeta = ndarray::Array1::<T>::zeros(m);
                for i in 0..n {
                    let row = x2.row(i);
                    let grow = grad.row(i);
                    let mean = row.sum() / mf;
                    let var = row
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .fold(T::zero(), |a, b| a + b)
                        / mf;
                    let inv = (var + eps).sqrt().recip();
                    // xhat and the two reduced terms of the standard layer-norm backward
                    let mut dxhat_sum = T::zero();
                    let mut dxhat_dot = T::zero();
                    for j in 0..m {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * g1[j];
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                        dxhat_sum += dxhat;
                        dxhat_dot += dxhat * xhat;
                    }
                    for j in 0..m {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = grow[j] * g1[j];
                        dx[[i, j]] = inv * (dxhat - dxhat_sum / mf - xhat * dxhat_dot / mf);
                    }
                }
                SmallVec::from_iter([dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()])
            })),
        )
    }

    // ---- batched small-matrix ops (rows are flattened 3x3 matrices) ----

    /// Row-wise 3x3 matrix product: rows of `a` and `b` are row-major 3x3.
    pub fn bmm33(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() || va.ndim() != 2 || va.shape()[1] != 9 {
            return Err(self.err_shape(
                "bmm33",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
        let n = a2.nrows();
        let mut out = ndarray::Array2::<T>::zeros((n, 9));
        for r in 0..n {
            mat3_mul(
                a2.row(r).as_slice().unwrap(),
                b2.row(r).as_slice().unwrap(),
                out.row_mut(r).as_slice_mut().unwrap(),
            );
        }
        self.push(
            "bmm33",
            SmallVec::from_slice(&[a, b]),
            out.into_dyn(),
            Some(Box::new(|ctx| {
                let a2 = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let b2 = ctx.parents[1].view().into_dimensionality::<Ix2>().unwrap();
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let n = a2.nrows();
                let mut da = ndarray::Array2::<T>::zeros((n, 9));
                let mut db = ndarray::Array2::<T>::zeros((n, 9));
                for r in 0..n {
                    let (ar, br, gr) = (
                        a2.row(r),
                        b2.row(r),
                        g.row(r),
                    );
                    let (ar, br, gr) = (
                        ar.as_slice().unwrap(),
                        br.as_slice().unwrap(),
                        gr.as_slice().unwrap(),
                    );
                    // dA = G B^T, dB = A^T G
                    let mut dar = da.row_mut(r);
                    let dar = dar.as_slice_mut().unwrap();
                    let mut dbr = db.row_mut(r);
                    let dbr = dbr.as_slice_mut().unwrap();
                    for i in 0..3 {
                        for j in 0..3 {
                            let mut s = T::zero();
                            for k in 0..3 {
                                s += gr[i * 3 + k] * br[j * 3 + k];
                            }
                            dar[i * 3 + j] = s;
                            let mut s2 = T::zero();
                            for k in 0..3 {
                                s2 += ar[k * 3 + i] * gr[k * 3 + j];
                            }
                            dbr[i * 3 + j] = s2;
                        }
                    }
                }
                SmallVec::from_iter([da.into_dyn(), db.into_dyn()])
            })),
        )
    }

    /// Row-wise 3x3 matrix times 3-vector: `y_r = R_r v_r`.
    pub fn bmv3(&mut self, r: Var, v: Var) -> Result<Var> {
        let (vr, vv) = (&self.values[r.0], &self.values[v.0]);
        let ok = vr.ndim() == 2
            && vv.ndim() == 2
            && vr.shape()[1] == 9
            && vv.shape()[1] == 3
            && vr.shape()[0] == vv.shape()[0];
        if !ok {
            return Err(self.err_shape(
                "bmv3",
                format!("{:?} vs {:?}", vr.shape(), vv.shape()),
            ));
        }
        let r2 = vr.view().into_dimensionality::<Ix2>().unwrap();
        let v2 = vv.view().into_dimensionality::<Ix2>().unwrap();
        let n = r2.nrows();
        let mut out = ndarray::Array2::<T>::zeros((n, 3));
        for i in 0..n {
            let rr = r2.row(i);
            let rr = rr.as_slice().unwrap();
            let vr_ = v2.row(i);
            let vr_ = vr_.as_slice().unwrap();
            let mut o = out.row_mut(i);
            let o = o.as_slice_mut().unwrap();
            for a in 0..3 {
                o[a] = rr[a * 3] * vr_[0] + rr[a * 3 + 1] * vr_[1] + rr[a * 3 + 2] * vr_[2];
            }
        }
        self.push(
            "bmv3",
            SmallVec::from_slice(&[r, v]),
            out.into_dyn(),
            Some(Box::new(|ctx| {
                let r2 = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let v2 = ctx.parents[1].view().into_dimensionality::<Ix2>().unwrap();
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let n = r2.nrows();
                let mut dr = ndarray::Array2::<T>::zeros((n, 9));
                let mut dv = ndarray::Array2::<T>::zeros((n, 3));
                for i in 0..n {
                    let rr = r2.row(i);
                    let rr = rr.as_slice().unwrap();
                    let vr_ = v2.row(i);
                    let vr_ = vr_.as_slice().unwrap();
                    let gr = g.row(i);
                    let gr = gr.as_slice().unwrap();
                    let mut drr = dr.row_mut(i);
                    let drr = drr.as_slice_mut().unwrap();
                    let mut dvr = dv.row_mut(i);
                    let dvr = dvr.as_slice_mut().unwrap();
                    for a in 0..3 {
                        for b in 0..3 {
                            drr[a * 3 + b] = gr[a] * vr_[b];
                            dvr[b] += rr[a * 3 + b] * gr[a];
                        }
                    }
                }
                SmallVec::from_iter([dr.into_dyn(), dv.into_dyn()])
            })),
        )
    }

    /// Linear blend skinning of points.
    ///
    /// Layouts: `rg` and `s` are joint-major — row `k*n + t` is joint `k` of
    /// batch element `t`; `points` is batch-major — row `t*v_count + v` is
    /// point `v` of element `t`. `weights` is `(v_count, k_count)`, rows
    /// summing to 1. Output matches the `points` layout:
    ///
    /// `y[t,v] = x[t,v] + sum_k w[v,k] * ((R[k,t] - I) x[t,v] + s[k,t])`
    ///
    /// The `(R - I)` form makes the identity pose reproduce `points` exactly.
    pub fn skin_points(
        &mut self,
        rg: Var,
        s: Var,
        points: Var,
        weights: ndarray::Array2<T>,
    ) -> Result<Var> {
        let (vr, vs, vx) = (&self.values[rg.0], &self.values[s.0], &self.values[points.0]);
        let v_count = weights.nrows();
        let k_count = weights.ncols();
        let ok = vr.ndim() == 2
            && vs.ndim() == 2
            && vx.ndim() == 2
            && vr.shape()[1] == 9
            && vs.shape()[1] == 3
            && vx.shape()[1] == 3
            && vr.shape()[0] == vs.shape()[0]
            && vr.shape()[0] % k_count == 0
            && vx.shape()[0] % v_count == 0
            && vr.shape()[0] / k_count == vx.shape()[0] / v_count;
        if !ok {
            return Err(self.err_shape(
                "skin_points",
                format!(
                    "rg {:?}, s {:?}, points {:?}, weights {:?}",
                    vr.shape(),
                    vs.shape(),
                    vx.shape(),
                    weights.shape()
                ),
            ));
        }
        let n = vr.shape()[0] / k_count;
        let r2 = vr.view().into_dimensionality::<Ix2>().unwrap();
        let s2 = vs.view().into_dimensionality::<Ix2>().unwrap();
        let x2 = vx.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = x2.to_owned();
        for t in 0..n {
            for k in 0..k_count {
                let rr = r2.row(k * n + t);
                let rr = rr.as_slice().unwrap();
                let sr = s2.row(k * n + t);
                let sr = sr.as_slice().unwrap();
                for v in 0..v_count {
                    let w = weights[[v, k]];
                    if w == T::zero() {
                        continue;
                    }
                    let xr = x2.row(t * v_count + v);
                    let xr = xr.as_slice().unwrap();
                    let mut orow = out.row_mut(t * v_count + v);
                    let o = orow.as_slice_mut().unwrap();
                    for a in 0..3 {
                        let rx = rr[a * 3] * xr[0] + rr[a * 3 + 1] * xr[1] + rr[a * 3 + 2] * xr[2]
                            - xr[a];
                        o[a] += w * (rx + sr[a]);
                    }
                }
            }
        }
        let w_back = weights.clone();
        self.push(
            "skin_points",
            SmallVec::from_slice(&[rg, s, points]),
            out.into_dyn(),
            Some(Box::new(move |ctx| {
                let r2 = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let x2 = ctx.parents[2].view().into_dimensionality::<Ix2>().unwrap();
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let (v_count, k_count) = (w_back.nrows(), w_back.ncols());
                let n = r2.nrows() / k_count;
                let mut dr = ndarray::Array2::<T>::zeros((n * k_count, 9));
                let mut ds = ndarray::Array2::<T>::zeros((n * k_count, 3));
                let mut dx = g.to_owned();
                for t in 0..n {
                    for k in 0..k_count {
                        let rr = r2.row(k * n + t);
                        let rr = rr.as_slice().unwrap();
                        let mut drr = dr.row_mut(k * n + t);
                        let drr = drr.as_slice_mut().unwrap();
                        let mut dsr = ds.row_mut(k * n + t);
                        let dsr = dsr.as_slice_mut().unwrap();
                        for v in 0..v_count {
                            let w = w_back[[v, k]];
                            if w == T::zero() {
                                continue;
                            }
                            let xr = x2.row(t * v_count + v);
                            let xr = xr.as_slice().unwrap();
                            let gr = g.row(t * v_count + v);
                            let gr = gr.as_slice().unwrap();
                            let mut dxrow = dx.row_mut(t * v_count + v);
                            let dxr = dxrow.as_slice_mut().unwrap();
                            for a in 0..3 {
                                dsr[a] += w * gr[a];
                                for b in 0..3 {
                                    drr[a * 3 + b] += w * gr[a] * xr[b];
                                    // (R - I)^T g
                                    let rt = rr[a * 3 + b]
                                        - if a == b { T::one() } else { T::zero() };
                                    dxr[b] += w * rt * gr[a];
                                }
                            }
                        }
                    }
                }
                SmallVec::from_iter([dr.into_dyn(), ds.into_dyn(), dx.into_dyn()])
            })),
        )
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.values[loss.0];
        if lv.ndim() != 0 {
            return Err(NumericsError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ndarray::arr0(T::one()).into_dyn());
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                let parent_vals: SmallVec<[&ArrayD<T>; 3]> =
                    node.parents.iter().map(|p| &self.values[p.0]).collect();
                let ctx = BackCtx {
                    out: &self.values[i],
                    grad: &g,
                    parents: &parent_vals,
                };
                let pgrads = back(&ctx);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(pgrads) {
                    debug_assert_eq!(
                        pg.shape(),
                        self.values[p.0].shape(),
                        "gradient shape mismatch for parent of {}",
                        node.op
                    );
                    match &mut grads[p.0] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mat3_mul<T: Scalar>(a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] =
                a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
        }
    }
}

/// Evaluate `computation` on `parameters` and return the scalar value plus
/// the exact reverse-mode gradient for each parameter.
pub fn value_and_grad<T: Scalar>(
    parameters: &[ArrayD<T>],
    computation: impl FnOnce(&mut Graph<T>, &[Var]) -> Result<Var>,
) -> Result<(T, Vec<ArrayD<T>>)> {
    let mut graph = Graph::new();
    let vars: Vec<Var> = parameters
        .iter()
        .map(|p| graph.input(p.clone()))
        .collect::<Result<_>>()?;
    let loss = computation(&mut graph, &vars)?;
    let lv = graph.value(loss);
    if lv.ndim() != 0 {
        return Err(NumericsError::NonScalarLoss {
            shape: lv.shape().to_vec(),
        });
    }
    let value = graph.scalar_value(loss);
    let grads = graph.backward(loss)?;
    let out = vars
        .iter()
        .zip(parameters)
        .map(|(v, p)| grads.get(*v, p.shape()))
        .collect();
    Ok((value, out))
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl<T: num_traits::Float> SignumOrZero for T {
    fn signum_or_zero(self) -> Self {
        if self > T::zero() {
            T::one()
        } else if self < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }
}
