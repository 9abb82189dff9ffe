//! A minimal reverse-mode tape over dense `f64` matrices.
//!
//! Every forward op appends a node holding its value; [`Tape::backward`]
//! walks the nodes in reverse and returns gradients for parameters and for
//! nodes created with [`Tape::input`]. Parameters are read straight from the
//! [`ParamStore`] and never copied onto the tape.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use crate::params::{Mat, ParamGrads, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Const,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    AddN(Vec<Var>),
    Scale(Var, f64),
    MulConst(Var, Mat),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSoftmaxRowsNoDiag(Var),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Row(Var, usize),
    MeanRows(Var),
    L2DistRows(Var, Var),
    NormalizeRows(Var, Vec<f64>),
    PickSum(Var, Vec<(usize, usize)>),
}

struct Node {
    value: Option<Mat>,
    op: Op,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    pub params: ParamGrads,
    inputs: HashMap<Var, Mat>,
}

impl Gradients {
    pub fn input(&self, v: Var) -> Option<&Mat> {
        self.inputs.get(&v)
    }
}

fn softmax_row_inplace(row: &mut [f64], skip: Option<usize>) {
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if Some(j) != skip && x > max {
            max = x;
        }
    }
    let mut sum = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if Some(j) == skip {
            *x = 0.0;
        } else {
            *x = (*x - max).exp();
            sum += *x;
        }
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn log_softmax_row(row: &[f64], skip: Option<usize>) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if Some(j) != skip && x > max {
            max = x;
        }
    }
    let lse = max
        + row
            .iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != skip)
            .map(|(_, &x)| (x - max).exp())
            .sum::<f64>()
            .ln();
    row.iter()
        .enumerate()
        .map(|(j, &x)| if Some(j) == skip { 0.0 } else { x - lse })
        .collect()
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const)
    }

    /// A leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    /// Adds a `1×m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        let mut out = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            out += self.value(x);
        }
        self.push(out, Op::AddN(xs.to_vec()))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        self.push(out, Op::Scale(a, s))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, m: Mat) -> Var {
        let out = self.value(a) * &m;
        self.push(out, Op::MulConst(a, m))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer norm with `1×m` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let m = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / m;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            softmax_row_inplace(row.as_slice_mut().expect("contiguous"), None);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(av.raw_dim());
        for (i, row) in av.rows().into_iter().enumerate() {
            let ls = log_softmax_row(row.as_slice().expect("contiguous"), None);
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&ls));
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Log-softmax of each row `i` over the columns `j != i`; the diagonal
    /// of the output is zero and carries no gradient.
    pub fn log_softmax_rows_no_diag(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(av.raw_dim());
        for (i, row) in av.rows().into_iter().enumerate() {
            let ls = log_softmax_row(row.as_slice().expect("contiguous"), Some(i));
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&ls));
        }
        self.push(out, Op::LogSoftmaxRowsNoDiag(a))
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|&x| self.value(x).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(out, Op::ConcatCols(xs.to_vec()))
    }

    pub fn stack_rows(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|&x| self.value(x).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(out, Op::StackRows(xs.to_vec()))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let out = self.value(a).slice(s![i..i + 1, ..]).to_owned();
        self.push(out, Op::Row(a, i))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a))
    }

    /// `1×K` Euclidean distances between the `1×d` row `r` and each row of `v`.
    pub fn l2_dist_rows(&mut self, r: Var, v: Var) -> Var {
        let rv = self.value(r);
        let vv = self.value(v);
        let mut out = Mat::zeros((1, vv.nrows()));
        for (k, row) in vv.rows().into_iter().enumerate() {
            let d2: f64 = row.iter().zip(rv.iter()).map(|(a, b)| (b - a) * (b - a)).sum();
            out[[0, k]] = d2.sqrt();
        }
        self.push(out, Op::L2DistRows(r, v))
    }

    /// Scales each row to unit Euclidean norm. Zero rows are left as zeros.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
            norms.push(n);
        }
        self.push(out, Op::NormalizeRows(a, norms))
    }

    /// Sum of the selected entries, as a `1×1`.
    pub fn pick_sum(&mut self, a: Var, at: &[(usize, usize)]) -> Var {
        let av = self.value(a);
        let s: f64 = at.iter().map(|&(i, j)| av[[i, j]]).sum();
        self.push(Mat::from_elem((1, 1), s), Op::PickSum(a, at.to_vec()))
    }

    /// Reverse pass seeded with `d(objective)/d(var)` for each seed.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut top = 0;
        for (v, g) in seeds {
            acc(&mut grads, *v, g.clone());
            top = top.max(v.0);
        }
        let mut out = Gradients {
            params: ParamGrads::zeros(self.store.len()),
            inputs: HashMap::new(),
        };

        for i in (0..=top.min(self.nodes.len().saturating_sub(1))).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Input => {
                    out.inputs.insert(Var(i), g);
                }
                Op::Param(id) => out.params.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::AddN(xs) => {
                    for &x in xs {
                        acc(&mut grads, x, g.clone());
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g * *s),
                Op::MulConst(a, m) => acc(&mut grads, *a, g * m),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    ga.zip_mut_with(x, |gv, &x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *gv *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let g_gain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let g_bias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gv;
                    let m = xhat.ncols() as f64;
                    let mut gx = Mat::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let is = inv_std[r];
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] = is / m * (m * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                        }
                    }
                    acc(&mut grads, *gain, g_gain);
                    acc(&mut grads, *bias, g_bias);
                    acc(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("owned");
                    let mut ga = g;
                    for (mut gr, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = gr.dot(&yr);
                        gr.zip_mut_with(&yr, |gv, &yv| *gv = yv * (*gv - dot));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) | Op::LogSoftmaxRowsNoDiag(a) => {
                    let no_diag = matches!(node.op, Op::LogSoftmaxRowsNoDiag(_));
                    let y = node.value.as_ref().expect("owned");
                    let mut ga = g;
                    for (i, (mut gr, yr)) in ga.rows_mut().into_iter().zip(y.rows()).enumerate() {
                        let skip = if no_diag { Some(i) } else { None };
                        let total: f64 = gr
                            .iter()
                            .enumerate()
                            .filter(|(j, _)| Some(*j) != skip)
                            .map(|(_, v)| v)
                            .sum();
                        for (j, (gv, &yv)) in gr.iter_mut().zip(yr.iter()).enumerate() {
                            if Some(j) == skip {
                                *gv = 0.0;
                            } else {
                                *gv -= yv.exp() * total;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(table, ids) => {
                    let mut gt = Mat::zeros(self.value(*table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(xs) => {
                    let mut c = 0;
                    for &x in xs {
                        let w = self.value(x).ncols();
                        acc(&mut grads, x, g.slice(s![.., c..c + w]).to_owned());
                        c += w;
                    }
                }
                Op::StackRows(xs) => {
                    let mut r = 0;
                    for &x in xs {
                        let h = self.value(x).nrows();
                        acc(&mut grads, x, g.slice(s![r..r + h, ..]).to_owned());
                        r += h;
                    }
                }
                Op::Row(a, i) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    ga.row_mut(*i).assign(&g.row(0));
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let n = self.value(*a).nrows();
                    let ga = Array2::from_shape_fn((n, g.ncols()), |(_, c)| g[[0, c]] / n as f64);
                    acc(&mut grads, *a, ga);
                }
                Op::L2DistRows(r, v) => {
                    let rv = self.value(*r);
                    let vv = self.value(*v);
                    let dist = node.value.as_ref().expect("owned");
                    let mut gr = Mat::zeros(rv.raw_dim());
                    let mut gvv = Mat::zeros(vv.raw_dim());
                    for k in 0..vv.nrows() {
                        let d = dist[[0, k]];
                        if d == 0.0 {
                            continue;
                        }
                        let coef = g[[0, k]] / d;
                        for c in 0..vv.ncols() {
                            let diff = rv[[0, c]] - vv[[k, c]];
                            gr[[0, c]] += coef * diff;
                            gvv[[k, c]] -= coef * diff;
                        }
                    }
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *v, gvv);
                }
                Op::NormalizeRows(a, norms) => {
                    let y = node.value.as_ref().expect("owned");
                    let mut ga = g;
                    for ((mut gr, yr), &n) in ga.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                        if n == 0.0 {
                            gr.fill(0.0);
                            continue;
                        }
                        let dot = gr.dot(&yr);
                        gr.zip_mut_with(&yr, |gv, &yv| *gv = (*gv - yv * dot) / n);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::PickSum(a, at) => {
                    let mut ga = Mat::zeros(self.value(*a).raw_dim());
                    for &(i, j) in at {
                        ga[[i, j]] += g[[0, 0]];
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
