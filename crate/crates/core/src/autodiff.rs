//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every value is an `Array2<f64>`; scalars are `1 x 1`. Operations are
//! recorded in evaluation order and [`Tape::backward`] walks them in reverse.
//! Nodes that do not depend on any [`Tape::param`] are never visited during
//! the backward pass.

use std::rc::Rc;

use ndarray::{Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// Keeps `sigmoid(a)` for the backward pass.
    Silu(Var, Array2<f64>),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Recip(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    RowSum(Var),
    Sum(Var),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    CenterCols(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros if `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Array2<f64> {
        self.grads[v.0].take().unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let tr = self.tracked(a) || self.tracked(b);
        self.push(v, Op::MatMul(a, b), tr)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Add(a, b), tr)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Sub(a, b), tr)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let tr = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Mul(a, b), tr)
    }

    /// `a (n x k) + row (1 x k)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let tr = self.tracked(a) || self.tracked(row);
        self.push(v, Op::AddRow(a, row), tr)
    }

    /// `a (n x k) * col (n x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) * self.value(col);
        let tr = self.tracked(a) || self.tracked(col);
        self.push(v, Op::MulCol(a, col), tr)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let tr = self.tracked(a);
        self.push(v, Op::Scale(a, k), tr)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        let tr = self.tracked(a);
        self.push(v, Op::AddScalar(a), tr)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let sig = self.value(a).mapv(sigmoid);
        let mut v = sig.clone();
        v.zip_mut_with(self.value(a), |s, &x| *s *= x);
        let tr = self.tracked(a);
        let sig = if tr { sig } else { Array2::zeros((0, 0)) };
        self.push(v, Op::Silu(a, sig), tr)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let tr = self.tracked(a);
        self.push(v, Op::Exp(a), tr)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let tr = self.tracked(a);
        self.push(v, Op::Ln(a), tr)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        let tr = self.tracked(a);
        self.push(v, Op::Sqrt(a), tr)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / x);
        let tr = self.tracked(a);
        self.push(v, Op::Recip(a), tr)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let tr = self.tracked(a);
        self.push(v, Op::Square(a), tr)
    }

    /// Elementwise clamp; the gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        let tr = self.tracked(a);
        self.push(v, Op::Clamp(a, lo, hi), tr)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.zip_mut_with(self.value(b), |x, &y| {
            if y < *x {
                *x = y
            }
        });
        let tr = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Minimum(a, b), tr)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let tr = self.tracked(a);
        self.push(v, Op::RowSum(a), tr)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let tr = self.tracked(a);
        self.push(v, Op::Sum(a), tr)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `out[e] = a[idx[e]]`.
    pub fn gather(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let src = self.value(a);
        let k = src.ncols();
        let mut out = Array2::zeros((idx.len(), k));
        {
            let src = src.as_standard_layout();
            let s = src.as_slice().expect("standard layout");
            let o = out.as_slice_mut().expect("standard layout");
            for (e, &i) in idx.iter().enumerate() {
                o[e * k..(e + 1) * k].copy_from_slice(&s[i * k..(i + 1) * k]);
            }
        }
        let tr = self.tracked(a);
        self.push(out, Op::Gather(a, idx), tr)
    }

    /// `out[idx[e]] += a[e]` into `n` rows.
    pub fn scatter_add(&mut self, a: Var, idx: Rc<[usize]>, n: usize) -> Var {
        let src = self.value(a);
        let k = src.ncols();
        let mut out = Array2::zeros((n, k));
        scatter_add_into(&mut out, src, &idx);
        let tr = self.tracked(a);
        self.push(out, Op::ScatterAdd(a, idx), tr)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row counts must agree");
        let tr = self.tracked(a) || self.tracked(b);
        self.push(v.as_standard_layout().into_owned(), Op::ConcatCols(a, b), tr)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("column counts must agree");
        let tr = self.tracked(a) || self.tracked(b);
        self.push(v, Op::ConcatRows(a, b), tr)
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(ndarray::s![start..end, ..]).to_owned();
        let tr = self.tracked(a);
        self.push(v, Op::SliceRows(a, start), tr)
    }

    /// Subtracts the column means.
    pub fn center_cols(&mut self, a: Var) -> Var {
        let v = crate::geometry::project_com_free(self.value(a));
        let tr = self.tracked(a);
        self.push(v, Op::CenterCols(a), tr)
    }

    /// Reverse pass from the `1 x 1` node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar output");
        self.backward_with(out, Array2::from_elem((1, 1), 1.0))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_with(&self, out: Var, seed: Array2<f64>) -> Gradients {
        let n = out.0 + 1;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|node| node.value.dim()).collect();
        grads[out.0] = Some(seed);

        for i in (0..n).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.tracked(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.tracked(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.tracked(*b) {
                        self.acc(&mut grads, *b, g.clone());
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.tracked(*b) {
                        self.acc(&mut grads, *b, -&g);
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.tracked(*a) {
                        self.acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.tracked(*b) {
                        self.acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.tracked(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *row, gr);
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::MulCol(a, col) => {
                    if self.tracked(*col) {
                        let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        self.acc(&mut grads, *col, gc);
                    }
                    if self.tracked(*a) {
                        self.acc(&mut grads, *a, &g * self.value(*col));
                    }
                }
                Op::Scale(a, k) => self.acc(&mut grads, *a, g * *k),
                Op::AddScalar(a) => self.acc(&mut grads, *a, g),
                Op::Silu(a, sig) => {
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga).and(self.value(*a)).and(sig).for_each(|gv, &x, &s| {
                        *gv *= s * (1.0 + x * (1.0 - s));
                    });
                    self.acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => self.acc(&mut grads, *a, g * &node.value),
                Op::Ln(a) => self.acc(&mut grads, *a, g / self.value(*a)),
                Op::Sqrt(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gv, &y| *gv *= 0.5 / y);
                    self.acc(&mut grads, *a, ga);
                }
                Op::Recip(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gv, &y| *gv *= -y * y);
                    self.acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| *gv *= 2.0 * x);
                    self.acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        if !(x > *lo && x < *hi) {
                            *gv = 0.0
                        }
                    });
                    self.acc(&mut grads, *a, ga);
                }
                Op::Minimum(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    if self.tracked(*b) {
                        let mut gb = g.clone();
                        ndarray::Zip::from(&mut gb).and(va).and(vb).for_each(|gv, &x, &y| {
                            if !(y < x) {
                                *gv = 0.0
                            }
                        });
                        self.acc(&mut grads, *b, gb);
                    }
                    if self.tracked(*a) {
                        let mut ga = g;
                        ndarray::Zip::from(&mut ga).and(va).and(vb).for_each(|gv, &x, &y| {
                            if y < x {
                                *gv = 0.0
                            }
                        });
                        self.acc(&mut grads, *a, ga);
                    }
                }
                Op::RowSum(a) => {
                    let ga = self.value(*a).mapv(|_| 0.0) + &g;
                    self.acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    self.acc(&mut grads, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    scatter_add_into(&mut ga, &g, idx);
                    self.acc(&mut grads, *a, ga);
                }
                Op::ScatterAdd(a, idx) => {
                    let k = g.ncols();
                    let mut ga = Array2::zeros((idx.len(), k));
                    {
                        let gs = g.as_slice().expect("standard layout");
                        let o = ga.as_slice_mut().expect("standard layout");
                        for (e, &row) in idx.iter().enumerate() {
                            o[e * k..(e + 1) * k].copy_from_slice(&gs[row * k..(row + 1) * k]);
                        }
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ka = self.value(*a).ncols();
                    if self.tracked(*a) {
                        let ga = g.slice(ndarray::s![.., ..ka]).to_owned();
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.tracked(*b) {
                        let gb = g.slice(ndarray::s![.., ka..]).to_owned();
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.value(*a).nrows();
                    if self.tracked(*a) {
                        let ga = g.slice(ndarray::s![..ra, ..]).to_owned();
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.tracked(*b) {
                        let gb = g.slice(ndarray::s![ra.., ..]).to_owned();
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(ndarray::s![*start..*start + g.nrows(), ..]).assign(&g);
                    self.acc(&mut grads, *a, ga);
                }
                Op::CenterCols(a) => {
                    let ga = crate::geometry::project_com_free(&g);
                    self.acc(&mut grads, *a, ga);
                }
            }
        }
        Gradients { grads, shapes }
    }

    fn acc(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None if g.is_standard_layout() => *slot = Some(g),
            slot @ None => *slot = Some(g.as_standard_layout().into_owned()),
        }
    }
}

fn scatter_add_into(out: &mut Array2<f64>, src: &Array2<f64>, idx: &[usize]) {
    let k = src.ncols();
    let src = src.as_standard_layout();
    let s = src.as_slice().expect("standard layout");
    let o = out.as_slice_mut().expect("standard layout");
    for (e, &row) in idx.iter().enumerate() {
        let dst = &mut o[row * k..(row + 1) * k];
        for (d, v) in dst.iter_mut().zip(&s[e * k..(e + 1) * k]) {
            *d += v;
        }
    }
}
