use crate::error::{Error, Result};
use crate::scalar::Real;

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    /// `w * x + b 1^T`, bias broadcast over columns.
    Affine {
        w: Var,
        x: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    /// Column-wise log-softmax.
    LogSoftmax(Var),
    Pow(Var, T),
    Sum(Var),
    /// `bias + sum_i coef_i * x_i` over same-shaped inputs.
    Combine {
        terms: Vec<(Var, T)>,
        bias: T,
    },
    Mul(Var, Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Pow(..) => "pow",
            Op::Sum(_) => "sum",
            Op::Combine { .. } => "combine",
            Op::Mul(..) => "mul",
        }
    }
}

/// Reverse-mode tape over dense tensors.
///
/// Nodes are appended in construction order, so every node's inputs precede
/// it. Leaves carry a bound value; [`Tape::forward`] evaluates every node and
/// [`Tape::backward`] propagates adjoints from the last node.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    ops: Vec<Op<T>>,
    values: Vec<Option<Tensor<T>>>,
    leaves: Vec<Var>,
}

/// Adjoints of every leaf after a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    adjoints: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`. Panics if `v` is not a leaf of the tape.
    pub fn wrt(&self, v: Var) -> &Tensor<T> {
        self.adjoints[v.0].as_ref().expect("gradient requested for a non-leaf")
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
            leaves: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<T>) -> Var {
        self.ops.push(op);
        self.values.push(None);
        Var(self.ops.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(Op::Leaf);
        self.values[v.0] = Some(value);
        self.leaves.push(v);
        v
    }

    /// Rebinds a leaf. Intermediate values become stale until the next `forward`.
    pub fn set_leaf(&mut self, v: Var, value: Tensor<T>) {
        assert!(matches!(self.ops[v.0], Op::Leaf), "set_leaf on non-leaf");
        self.values[v.0] = Some(value);
    }

    pub fn affine(&mut self, w: Var, x: Var, b: Option<Var>) -> Var {
        self.push(Op::Affine { w, x, b })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.push(Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        self.push(Op::LogSoftmax(a))
    }

    pub fn pow(&mut self, a: Var, exponent: T) -> Var {
        self.push(Op::Pow(a, exponent))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    pub fn combine(&mut self, terms: &[(Var, T)], bias: T) -> Var {
        assert!(!terms.is_empty(), "combine needs at least one term");
        self.push(Op::Combine {
            terms: terms.to_vec(),
            bias,
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    pub fn output(&self) -> Option<Var> {
        self.ops.len().checked_sub(1).map(Var)
    }

    pub fn value(&self, v: Var) -> Option<&Tensor<T>> {
        self.values[v.0].as_ref()
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        self.values[v.0].as_ref().expect("input evaluated before use")
    }

    /// Binds `bindings` and then evaluates the tape.
    pub fn forward_with(&mut self, bindings: &[(Var, Tensor<T>)]) -> Result<&Tensor<T>> {
        for (v, t) in bindings {
            self.set_leaf(*v, t.clone());
        }
        self.forward()
    }

    /// Evaluates every node in order and returns the value of the last one.
    pub fn forward(&mut self) -> Result<&Tensor<T>> {
        for i in 0..self.ops.len() {
            if matches!(self.ops[i], Op::Leaf) {
                if self.values[i].is_none() {
                    return Err(Error::Shape {
                        node: i,
                        op: "leaf",
                        detail: "leaf has no bound value".into(),
                    });
                }
                continue;
            }
            let out = self.eval_node(i)?;
            self.values[i] = Some(out);
        }
        self.values
            .last()
            .and_then(Option::as_ref)
            .ok_or(Error::NotEvaluated)
    }

    fn eval_node(&self, i: usize) -> Result<Tensor<T>> {
        let op = &self.ops[i];
        let shape_err = |detail: String| Error::Shape {
            node: i,
            op: op.name(),
            detail,
        };
        Ok(match op {
            Op::Leaf => unreachable!(),
            Op::Affine { w, x, b } => {
                let (w, x) = (self.val(*w), self.val(*x));
                if w.cols() != x.rows() {
                    return Err(shape_err(format!(
                        "weight {}x{} vs input {}x{}",
                        w.rows(),
                        w.cols(),
                        x.rows(),
                        x.cols()
                    )));
                }
                let mut y = w.matmul(x);
                if let Some(b) = b {
                    let b = self.val(*b);
                    if b.shape() != (w.rows(), 1) {
                        return Err(shape_err(format!(
                            "bias {}x{} vs expected {}x1",
                            b.rows(),
                            b.cols(),
                            w.rows()
                        )));
                    }
                    let cols = y.cols();
                    for r in 0..y.rows() {
                        let br = b.get(r, 0);
                        for c in 0..cols {
                            y.set(r, c, y.get(r, c) + br);
                        }
                    }
                }
                y
            }
            Op::Relu(a) => self.val(*a).map(|v| v.max(T::zero())),
            Op::Tanh(a) => self.val(*a).map(T::tanh),
            Op::Exp(a) => self.val(*a).map(T::exp),
            Op::LogSoftmax(a) => {
                let a = self.val(*a);
                if a.rows() == 0 {
                    return Err(shape_err("log-softmax over zero classes".into()));
                }
                let mut y = a.clone();
                for c in 0..a.cols() {
                    let m = (0..a.rows()).fold(T::neg_infinity(), |m, r| m.max(a.get(r, c)));
                    let s = (0..a.rows()).fold(T::zero(), |s, r| s + (a.get(r, c) - m).exp());
                    let lse = m + s.ln();
                    for r in 0..a.rows() {
                        y.set(r, c, a.get(r, c) - lse);
                    }
                }
                y
            }
            Op::Pow(a, p) => {
                let p = *p;
                self.val(*a).map(|v| v.powf(p))
            }
            Op::Sum(a) => Tensor::scalar(self.val(*a).data().iter().fold(T::zero(), |s, &v| s + v)),
            Op::Combine { terms, bias } => {
                let shape = self.val(terms[0].0).shape();
                let mut y = Tensor::filled(shape.0, shape.1, *bias);
                for (v, coef) in terms {
                    let x = self.val(*v);
                    if x.shape() != shape {
                        return Err(shape_err(format!(
                            "term {}x{} vs {}x{}",
                            x.rows(),
                            x.cols(),
                            shape.0,
                            shape.1
                        )));
                    }
                    for (o, &xv) in y.data_mut().iter_mut().zip(x.data()) {
                        *o = *o + *coef * xv;
                    }
                }
                y
            }
            Op::Mul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.shape() != b.shape() {
                    return Err(shape_err(format!(
                        "{}x{} vs {}x{}",
                        a.rows(),
                        a.cols(),
                        b.rows(),
                        b.cols()
                    )));
                }
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
                Tensor::from_vec(a.rows(), a.cols(), data)
            }
        })
    }

    /// Reverse pass from the last node, which must be `1 x 1`.
    pub fn backward(&self) -> Result<Gradients<T>> {
        let out = self.output().ok_or(Error::NotEvaluated)?;
        self.backward_from(out)
    }

    pub fn backward_from(&self, out: Var) -> Result<Gradients<T>> {
        let out_val = self.values[out.0].as_ref().ok_or(Error::NotEvaluated)?;
        if out_val.shape() != (1, 1) {
            return Err(Error::NonScalarOutput {
                node: out.0,
                rows: out_val.rows(),
                cols: out_val.cols(),
            });
        }
        for (i, v) in self.values.iter().enumerate().take(out.0 + 1) {
            if v.is_none() {
                return Err(Error::Shape {
                    node: i,
                    op: self.ops[i].name(),
                    detail: "node not evaluated".into(),
                });
            }
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; out.0 + 1];
        adj[out.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::Affine { w, x, b } => {
                    let (wv, xv) = (self.val(*w), self.val(*x));
                    accumulate(&mut adj, *w, g.matmul(&xv.transpose()));
                    accumulate(&mut adj, *x, wv.transpose().matmul(&g));
                    if let Some(b) = b {
                        let sums = (0..g.rows())
                            .map(|r| (0..g.cols()).fold(T::zero(), |s, c| s + g.get(r, c)))
                            .collect();
                        accumulate(&mut adj, *b, Tensor::column(sums));
                    }
                }
                Op::Relu(a) => {
                    let av = self.val(*a);
                    let data = av
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gi)| if x > T::zero() { gi } else { T::zero() })
                        .collect();
                    accumulate(&mut adj, *a, Tensor::from_vec(g.rows(), g.cols(), data));
                }
                Op::Tanh(a) => {
                    let y = self.val(Var(i));
                    let data = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&t, &gi)| gi * (T::one() - t * t))
                        .collect();
                    accumulate(&mut adj, *a, Tensor::from_vec(g.rows(), g.cols(), data));
                }
                Op::Exp(a) => {
                    let y = self.val(Var(i));
                    let data = y.data().iter().zip(g.data()).map(|(&e, &gi)| gi * e).collect();
                    accumulate(&mut adj, *a, Tensor::from_vec(g.rows(), g.cols(), data));
                }
                Op::LogSoftmax(a) => {
                    let y = self.val(Var(i));
                    let mut dx = g.clone();
                    for c in 0..g.cols() {
                        let gs = (0..g.rows()).fold(T::zero(), |s, r| s + g.get(r, c));
                        for r in 0..g.rows() {
                            dx.set(r, c, g.get(r, c) - y.get(r, c).exp() * gs);
                        }
                    }
                    accumulate(&mut adj, *a, dx);
                }
                Op::Pow(a, p) => {
                    let av = self.val(*a);
                    let p = *p;
                    let data = av
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gi)| {
                            if p == T::one() {
                                gi
                            } else {
                                gi * p * x.powf(p - T::one())
                            }
                        })
                        .collect();
                    accumulate(&mut adj, *a, Tensor::from_vec(g.rows(), g.cols(), data));
                }
                Op::Sum(a) => {
                    let (r, c) = self.val(*a).shape();
                    accumulate(&mut adj, *a, Tensor::filled(r, c, g.item()));
                }
                Op::Combine { terms, .. } => {
                    for (v, coef) in terms {
                        accumulate(&mut adj, *v, g.map(|gi| gi * *coef));
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let da = g.data().iter().zip(bv.data()).map(|(&gi, &y)| gi * y).collect();
                    let db = g.data().iter().zip(av.data()).map(|(&gi, &x)| gi * x).collect();
                    accumulate(&mut adj, *a, Tensor::from_vec(g.rows(), g.cols(), da));
                    accumulate(&mut adj, *b, Tensor::from_vec(g.rows(), g.cols(), db));
                }
            }
        }
        // Leaves that do not feed the output get an explicit zero gradient.
        adj.resize(self.ops.len(), None);
        for &leaf in &self.leaves {
            if adj[leaf.0].is_none() {
                let (r, c) = self.val(leaf).shape();
                adj[leaf.0] = Some(Tensor::zeros(r, c));
            }
        }
        // Only leaf adjoints are exposed.
        for (i, a) in adj.iter_mut().enumerate() {
            if !matches!(self.ops[i], Op::Leaf) {
                *a = None;
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn accumulate<T: Real>(adj: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut adj[v.0] {
        Some(a) => a.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Compares reverse-mode gradients of the scalar output with central
/// differences of step `step`, after binding `bindings`.
///
/// Returns the maximum over all leaf coordinates of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn check_gradient<T: Real>(
    tape: &mut Tape<T>,
    bindings: &[(Var, Tensor<T>)],
    step: T,
) -> Result<T> {
    if step <= T::zero() {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    tape.forward_with(bindings)?;
    let grads = tape.backward()?;
    let two = T::of(2.0);
    let floor = T::of(1e-12);
    let mut worst = T::zero();
    for leaf in tape.leaves().to_vec() {
        let base = tape.val(leaf).clone();
        let analytic = grads.wrt(leaf).clone();
        for k in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[k] = plus.data()[k] + step;
            tape.set_leaf(leaf, plus);
            let f_plus = tape.forward()?.item();
            let mut minus = base.clone();
            minus.data_mut()[k] = minus.data()[k] - step;
            tape.set_leaf(leaf, minus);
            let f_minus = tape.forward()?.item();
            let numeric = (f_plus - f_minus) / (two * step);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + floor);
            worst = worst.max(rel);
        }
        tape.set_leaf(leaf, base);
    }
    tape.forward()?;
    Ok(worst)
}

/// Like [`check_gradient`], restricted to the coordinates of one leaf.
pub fn check_gradient_wrt<T: Real>(tape: &mut Tape<T>, leaf: Var, step: T) -> Result<T> {
    if step <= T::zero() {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    tape.forward()?;
    let analytic = tape.backward()?.wrt(leaf).clone();
    let base = tape.val(leaf).clone();
    let mut worst = T::zero();
    for k in 0..base.len() {
        let mut plus = base.clone();
        plus.data_mut()[k] = plus.data()[k] + step;
        tape.set_leaf(leaf, plus);
        let f_plus = tape.forward()?.item();
        let mut minus = base.clone();
        minus.data_mut()[k] = minus.data()[k] - step;
        tape.set_leaf(leaf, minus);
        let f_minus = tape.forward()?.item();
        let numeric = (f_plus - f_minus) / (T::of(2.0) * step);
        let a = analytic.data()[k];
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs() + T::of(1e-12)));
    }
    tape.set_leaf(leaf, base);
    tape.forward()?;
    Ok(worst)
}
