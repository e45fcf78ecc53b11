//! A small reverse-mode automatic differentiation tape over 2-D `f64`
//! matrices.
//!
//! Every tensor in the network is a matrix (tokens × features or pixels ×
//! channels). Reshapes, transposes, slices and pixel shuffles are all one
//! [`Graph::gather`] with a precomputed index map. A graph is built per
//! sample, read for its outputs, and optionally walked backwards from any
//! number of seeded outputs.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a trainable tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Per-parameter gradients, `None` where the parameter was not reached.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Option<Mat>>);

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads(vec![None; store.len()])
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.0[id.0].as_ref()
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (mine, theirs) in self.0.iter_mut().zip(&other.0) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => *m += t,
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    /// `a` plus a `1 × c` row broadcast over every row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Gather(Var, Arc<[usize]>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
}

struct Node {
    value: Option<Mat>,
    op: Op,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

const LN_EPS: f64 = 1e-5;

/// A recorded computation over borrowed parameters.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
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
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a 1 × c row");
        let out = self.value(a) + r;
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        self.push(out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Row-wise layer normalization with `1 × c` affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Mat::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.outer_iter_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// `out.flat[k] = a.flat[idx[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, idx: Arc<[usize]>, shape: (usize, usize)) -> Var {
        assert_eq!(idx.len(), shape.0 * shape.1, "gather index length");
        let src = self.value(a);
        let flat = src.as_slice().expect("standard layout");
        let data: Vec<f64> = idx.iter().map(|&k| flat[k]).collect();
        let out = Mat::from_shape_vec(shape, data).expect("gather shape");
        self.push(out, Op::Gather(a, idx))
    }

    /// Rows `start..start + count` of `a`.
    pub fn rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let cols = self.shape(a).1;
        let idx: Arc<[usize]> = (start * cols..(start + count) * cols).collect();
        self.gather(a, idx, (count, cols))
    }

    /// Columns `start..start + count` of `a`.
    pub fn cols(&mut self, a: Var, start: usize, count: usize) -> Var {
        let (rows, cols) = self.shape(a);
        let idx: Arc<[usize]> = (0..rows)
            .flat_map(|r| (start..start + count).map(move |c| r * cols + c))
            .collect();
        self.gather(a, idx, (rows, count))
    }

    pub fn reshape(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let n = shape.0 * shape.1;
        let idx: Arc<[usize]> = (0..n).collect();
        self.gather(a, idx, shape)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let idx: Arc<[usize]> = (0..cols)
            .flat_map(|c| (0..rows).map(move |r| r * cols + c))
            .collect();
        self.gather(a, idx, (cols, rows))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat widths");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Mean over rows, giving `1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a))
    }

    /// `x · W + b` with `W: in × out`, `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Back-propagates from every `(output, dL/doutput)` seed and returns the
    /// gradient of each parameter reached.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> ParamGrads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.dim(), "seed shape");
            accumulate(&mut grads[v.0], g.clone());
        }
        let mut out = ParamGrads(vec![None; self.params.len()]);
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param(id) => out.0[id.0] = Some(g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[row.0], gr);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads[a.0], g * *s),
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu_grad(x));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * self.value(*gamma);
                    let cols = xhat.ncols() as f64;
                    let mut gx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let s1 = dr.sum();
                        let s2 = dr.dot(&xr);
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] =
                                inv_std[r] / cols * (cols * dr[c] - s1 - xr[c] * s2);
                        }
                    }
                    accumulate(&mut grads[beta.0], gb);
                    accumulate(&mut grads[gamma.0], gg);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(idx));
                    let mut ga = g;
                    for (mut grow, yrow) in ga.outer_iter_mut().zip(y.outer_iter()) {
                        let dot = grow.dot(&yrow);
                        Zip::from(&mut grow).and(&yrow).for_each(|d, &p| *d = p * (*d - dot));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Gather(a, index) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    {
                        let flat = ga.as_slice_mut().expect("standard layout");
                        let gs = g.as_slice().expect("standard layout");
                        for (k, &src) in index.iter().enumerate() {
                            flat[src] += gs[k];
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.shape(*p).0;
                        let part = g.slice(ndarray::s![start..start + rows, ..]).to_owned();
                        accumulate(&mut grads[p.0], part);
                        start += rows;
                    }
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let ga = Mat::from_shape_fn((rows, cols), |(_, c)| g[[0, c]] / rows as f64);
                    accumulate(&mut grads[a.0], ga);
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(existing) => *existing += &g,
        None => {
            // keep everything in standard layout for gather
            *slot = Some(if g.is_standard_layout() {
                g
            } else {
                g.as_standard_layout().to_owned()
            })
        }
    }
}
