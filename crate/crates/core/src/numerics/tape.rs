//! Reverse-mode gradient tape.
//!
//! Nodes are appended in evaluation order, so every node's inputs precede it
//! and `backward` is a single reverse sweep. Values are owned by the tape;
//! callers hold `Var` handles. A tape never crosses threads.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Rigid ego-to-camera transform plus pinhole intrinsics.
///
/// A point `p` in the ego frame maps to `rot * p + trans` in the camera frame
/// (x right, y down, z forward).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pinhole {
    pub rot: [[f64; 3]; 3],
    pub trans: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Pixel coordinate written for points at or behind the camera plane. Far
/// enough outside any image that sampling returns zeros.
pub const INVISIBLE_PIXEL: f64 = -1.0e6;
pub const MIN_DEPTH: f64 = 1.0e-6;

impl Pinhole {
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rot;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.trans[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.trans[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.trans[2],
        ]
    }

    /// Pinhole projection of a camera-frame point; `None` at or behind the
    /// camera plane.
    pub fn pixel_of_camera_point(&self, pc: [f64; 3]) -> Option<[f64; 2]> {
        if pc[2] <= MIN_DEPTH {
            return None;
        }
        Some([
            self.fx * pc[0] / pc[2] + self.cx,
            self.fy * pc[1] / pc[2] + self.cy,
        ])
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Sum(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Gather { x: Var, idx: Vec<usize> },
    Reshape(Var),
    GroupSum { x: Var, group: usize },
    Bilinear { map: Var, points: Var },
    Project { points: Var, cam: Pinhole },
    MinDist { a: Var, b: Var, arg: Vec<(usize, usize)> },
    WeightedRowSum { samples: Var, weights: Var },
    SmoothL1 { pred: Var, target: Vec<f64>, mask: Vec<f64>, beta: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Bce { logits: Var, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the loss does not reach `v`.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn check2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::dim(op, t.shape(), &[2]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    let a = d.abs();
    if a < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (a - 0.5 * beta, d.signum())
    }
}

/// Bilinear corner weights and their partial derivatives in (u, v).
struct Corners {
    idx: [Option<usize>; 4],
    w: [f64; 4],
    du: [f64; 4],
    dv: [f64; 4],
}

fn corners(u: f64, v: f64, h: usize, w: usize) -> Option<Corners> {
    if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
        return None;
    }
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let (x0, y0) = (x0 as usize, y0 as usize);
    let cell = |x: usize, y: usize| (x < w && y < h).then_some(y * w + x);
    Some(Corners {
        idx: [
            cell(x0, y0),
            cell(x0 + 1, y0),
            cell(x0, y0 + 1),
            cell(x0 + 1, y0 + 1),
        ],
        w: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        du: [-(1.0 - fy), 1.0 - fy, -fy, fy],
        dv: [-(1.0 - fx), -fx, 1.0 - fx, fx],
    })
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = self.rg(inputs);
        let t = Tensor::new(shape, data).expect("op output shape");
        self.push(t, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check2("matmul", self.value(a))?;
        let (k2, n) = check2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bb) in orow.iter_mut().zip(brow) {
                    *o += x * bb;
                }
            }
        }
        Ok(self.out(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check2("matmul_bt", self.value(a))?;
        let (n, k2) = check2("matmul_bt", self.value(b))?;
        if k != k2 {
            return Err(Error::dim("matmul_bt", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        Ok(self.out(vec![m, n], out, Op::MatMulBT(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.out(shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a length-`n` vector to every row of `a: [.., n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(row).len() != n {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.out(shape, data, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies every row of `a: [.., n]` element-wise by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(row).len() != n {
            return Err(Error::dim("mul_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * r[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.out(shape, data, Op::MulRow(a, row), &[a, row]))
    }

    /// Scales row `i` of `a: [m, n]` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let n = self.value(a).cols();
        let m = self.value(a).rows();
        if self.value(col).len() != m {
            return Err(Error::dim("mul_col", self.shape(a), self.shape(col)));
        }
        let c = self.value(col).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * c[i / n])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.out(shape, data, Op::MulCol(a, col), &[a, col]))
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.out(shape, data, op, &[a])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map_unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map_unary(a, softplus, Op::Softplus(a))
    }

    /// Softmax over the last axis with max-subtraction.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() || t.cols() == 0 {
            return Err(Error::dim("softmax_last", t.shape(), &[1]));
        }
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.out(shape, data, Op::Softmax(a), &[a]))
    }

    /// Normalizes each row to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            inv_std.push(r);
        }
        let shape = t.shape().to_vec();
        self.out(shape, data, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.out(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let n = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(Error::dim("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        Ok(self.out(vec![rows, n], data, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::dim("concat_cols", ta.shape(), tb.shape()));
        }
        let (p, q) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for i in 0..ta.rows() {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let rows = ta.rows();
        Ok(self.out(vec![rows, p + q], data, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() || len == 0 {
            return Err(Error::dim("slice_rows", t.shape(), &[start, len]));
        }
        let n = t.cols();
        let data = t.data()[start * n..(start + len) * n].to_vec();
        Ok(self.out(vec![len, n], data, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, n) = check2("slice_cols", self.value(x))?;
        if start + len > n || len == 0 {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        Ok(self.out(vec![rows, len], data, Op::SliceCols { x, start }, &[x]))
    }

    /// Row gather; indices may repeat (gradients scatter-add).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if idx.is_empty() || idx.iter().any(|&i| i >= t.rows()) {
            return Err(Error::dim("gather_rows", t.shape(), &[idx.len()]));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        Ok(self.out(
            vec![idx.len(), n],
            data,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::dim("reshape", t.shape(), shape));
        }
        let data = t.data().to_vec();
        Ok(self.out(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// Sums consecutive groups of `group` rows: `[N·group, C] -> [N, C]`.
    pub fn group_sum_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        if group == 0 || t.rows() % group != 0 {
            return Err(Error::Layout(format!(
                "{} rows do not split into groups of {group}",
                t.rows()
            )));
        }
        let n = t.cols();
        let groups = t.rows() / group;
        let mut data = vec![0.0; groups * n];
        for r in 0..t.rows() {
            let g = r / group;
            for (o, &v) in data[g * n..(g + 1) * n].iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        Ok(self.out(vec![groups, n], data, Op::GroupSum { x, group }, &[x]))
    }

    /// Bilinear sampling of `map: [H, W, C]` at continuous pixel coordinates
    /// `points: [P, 2]` given as (column, row). Points outside `[0,W)×[0,H)`
    /// yield zeros; neighbours past the last row/column are zero-padded.
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Result<Var> {
        let ms = self.shape(map).to_vec();
        if ms.len() != 3 {
            return Err(Error::dim("bilinear_sample", &ms, &[3]));
        }
        let (h, w, c) = (ms[0], ms[1], ms[2]);
        let pt = self.value(points);
        if pt.cols() != 2 {
            return Err(Error::dim("bilinear_sample", &ms, pt.shape()));
        }
        let p = pt.rows();
        let md = self.value(map).data();
        let mut out = vec![0.0; p * c];
        for i in 0..p {
            let (u, v) = (pt.data()[2 * i], pt.data()[2 * i + 1]);
            let Some(cr) = corners(u, v, h, w) else {
                continue;
            };
            let orow = &mut out[i * c..(i + 1) * c];
            for k in 0..4 {
                if let Some(cell) = cr.idx[k] {
                    let wk = cr.w[k];
                    if wk == 0.0 {
                        continue;
                    }
                    for (o, &m) in orow.iter_mut().zip(&md[cell * c..(cell + 1) * c]) {
                        *o += wk * m;
                    }
                }
            }
        }
        Ok(self.out(vec![p, c], out, Op::Bilinear { map, points }, &[map, points]))
    }

    /// Projects ego-frame points `[P, 3]` to pixels `[P, 2]`. Points at or
    /// behind the camera plane map to [`INVISIBLE_PIXEL`].
    pub fn project_points(&mut self, points: Var, cam: &Pinhole) -> Result<Var> {
        let t = self.value(points);
        if t.cols() != 3 {
            return Err(Error::dim("project_points", t.shape(), &[3]));
        }
        let mut out = Vec::with_capacity(t.rows() * 2);
        for r in 0..t.rows() {
            let row = t.row(r);
            let pc = cam.to_camera([row[0], row[1], row[2]]);
            match cam.pixel_of_camera_point(pc) {
                Some(px) => out.extend_from_slice(&px),
                None => out.extend_from_slice(&[INVISIBLE_PIXEL, INVISIBLE_PIXEL]),
            }
        }
        let rows = t.rows();
        Ok(self.out(
            vec![rows, 2],
            out,
            Op::Project { points, cam: *cam },
            &[points],
        ))
    }

    /// Minimum vertex-to-vertex distance between row point sets:
    /// `a: [N, 2·Pa]`, `b: [M, 2·Pb]` → `[N, M]`.
    pub fn min_vertex_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() % 2 != 0 || tb.cols() % 2 != 0 {
            return Err(Error::dim("min_vertex_dist", ta.shape(), tb.shape()));
        }
        let (n, m) = (ta.rows(), tb.rows());
        let (pa, pb) = (ta.cols() / 2, tb.cols() / 2);
        let mut out = Vec::with_capacity(n * m);
        let mut arg = Vec::with_capacity(n * m);
        for i in 0..n {
            let ra = ta.row(i);
            for j in 0..m {
                let rb = tb.row(j);
                let mut best = (f64::INFINITY, 0, 0);
                for x in 0..pa {
                    for y in 0..pb {
                        let dx = ra[2 * x] - rb[2 * y];
                        let dy = ra[2 * x + 1] - rb[2 * y + 1];
                        let d2 = dx * dx + dy * dy;
                        if d2 < best.0 {
                            best = (d2, x, y);
                        }
                    }
                }
                out.push(best.0.sqrt());
                arg.push((best.1, best.2));
            }
        }
        Ok(self.out(vec![n, m], out, Op::MinDist { a, b, arg }, &[a, b]))
    }

    /// `out[n] = Σ_k weights[n, k] · samples[n·K + k]`.
    pub fn weighted_row_sum(&mut self, samples: Var, weights: Var) -> Result<Var> {
        let (ts, tw) = (self.value(samples), self.value(weights));
        let (n, k) = (tw.rows(), tw.cols());
        if ts.rows() != n * k {
            return Err(Error::dim("weighted_row_sum", ts.shape(), tw.shape()));
        }
        let c = ts.cols();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let orow = &mut out[i * c..(i + 1) * c];
            for kk in 0..k {
                let wv = tw.data()[i * k + kk];
                if wv == 0.0 {
                    continue;
                }
                for (o, &s) in orow.iter_mut().zip(ts.row(i * k + kk)) {
                    *o += wv * s;
                }
            }
        }
        Ok(self.out(
            vec![n, c],
            out,
            Op::WeightedRowSum { samples, weights },
            &[samples, weights],
        ))
    }

    /// Masked mean smooth-L1 against a constant target. Returns 0 when the
    /// mask is empty.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64], mask: &[f64], beta: f64) -> Result<Var> {
        let t = self.value(pred);
        if target.len() != t.len() || mask.len() != t.len() {
            return Err(Error::dim("smooth_l1", t.shape(), &[target.len(), mask.len()]));
        }
        let count: f64 = mask.iter().sum();
        let mut s = 0.0;
        if count > 0.0 {
            for ((&p, &g), &m) in t.data().iter().zip(target).zip(mask) {
                if m != 0.0 {
                    s += m * smooth_l1(p - g, beta).0;
                }
            }
            s /= count;
        }
        Ok(self.out(
            vec![1],
            vec![s],
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                beta,
            },
            &[pred],
        ))
    }

    /// Mean softmax cross-entropy over rows of `logits: [R, n]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let n = t.cols();
        if targets.len() != t.rows() || targets.iter().any(|&k| k >= n) {
            return Err(Error::dim("cross_entropy", t.shape(), &[targets.len()]));
        }
        let mut s = 0.0;
        for (r, &k) in targets.iter().enumerate() {
            let row = t.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            s += lse - row[k];
        }
        s /= targets.len() as f64;
        Ok(self.out(
            vec![1],
            vec![s],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean sigmoid binary cross-entropy with logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if targets.len() != t.len() {
            return Err(Error::dim("bce_with_logits", t.shape(), &[targets.len()]));
        }
        let s = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| softplus(x) - y * x)
            .sum::<f64>()
            / targets.len() as f64;
        Ok(self.out(
            vec![1],
            vec![s],
            Op::Bce {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(go) = grads[i].take() else { continue };
            self.backprop_node(i, &go, &mut grads);
            grads[i] = Some(go);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn gbuf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, i: usize, go: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = self.gbuf(grads, *a) {
                    for r in 0..m {
                        let gorow = &go[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            ga[r * k + p] += gorow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.gbuf(grads, *b) {
                    for r in 0..m {
                        let gorow = &go[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = ta.data()[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (g, &o) in gb[p * n..(p + 1) * n].iter_mut().zip(gorow) {
                                *g += x * o;
                            }
                        }
                    }
                }
            }
            Op::MatMulBT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if let Some(ga) = self.gbuf(grads, *a) {
                    for r in 0..m {
                        for j in 0..n {
                            let g = go[r * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for (x, &bb) in ga[r * k..(r + 1) * k].iter_mut().zip(tb.row(j)) {
                                *x += g * bb;
                            }
                        }
                    }
                }
                if let Some(gb) = self.gbuf(grads, *b) {
                    for r in 0..m {
                        for j in 0..n {
                            let g = go[r * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for (x, &aa) in gb[j * k..(j + 1) * k].iter_mut().zip(ta.row(r)) {
                                *x += g * aa;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, s) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(g) = self.gbuf(grads, v) {
                        g.iter_mut().zip(go).for_each(|(x, &o)| *x += s * o);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, s) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(g) = self.gbuf(grads, v) {
                        g.iter_mut().zip(go).for_each(|(x, &o)| *x += s * o);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(g) = self.gbuf(grads, *a) {
                    for ((x, &o), &bb) in g.iter_mut().zip(go).zip(tb.data()) {
                        *x += o * bb;
                    }
                }
                if let Some(g) = self.gbuf(grads, *b) {
                    for ((x, &o), &aa) in g.iter_mut().zip(go).zip(ta.data()) {
                        *x += o * aa;
                    }
                }
            }
            Op::AddRow(a, r) => {
                let n = self.value(*a).cols();
                if let Some(g) = self.gbuf(grads, *a) {
                    g.iter_mut().zip(go).for_each(|(x, &o)| *x += o);
                }
                if let Some(g) = self.gbuf(grads, *r) {
                    for (k, &o) in go.iter().enumerate() {
                        g[k % n] += o;
                    }
                }
            }
            Op::MulRow(a, r) => {
                let (ta, tr) = (self.value(*a), self.value(*r));
                let n = ta.cols();
                if let Some(g) = self.gbuf(grads, *a) {
                    for (k, (x, &o)) in g.iter_mut().zip(go).enumerate() {
                        *x += o * tr.data()[k % n];
                    }
                }
                if let Some(g) = self.gbuf(grads, *r) {
                    for (k, &o) in go.iter().enumerate() {
                        g[k % n] += o * ta.data()[k];
                    }
                }
            }
            Op::MulCol(a, c) => {
                let (ta, tc) = (self.value(*a), self.value(*c));
                let n = ta.cols();
                if let Some(g) = self.gbuf(grads, *a) {
                    for (k, (x, &o)) in g.iter_mut().zip(go).enumerate() {
                        *x += o * tc.data()[k / n];
                    }
                }
                if let Some(g) = self.gbuf(grads, *c) {
                    for (k, &o) in go.iter().enumerate() {
                        g[k / n] += o * ta.data()[k];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = self.gbuf(grads, *a) {
                    g.iter_mut().zip(go).for_each(|(x, &o)| *x += s * o);
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                if let Some(g) = self.gbuf(grads, *a) {
                    for ((x, &o), &v) in g.iter_mut().zip(go).zip(ta.data()) {
                        if v > 0.0 {
                            *x += o;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(g) = self.gbuf(grads, *a) {
                    for ((x, &o), &t) in g.iter_mut().zip(go).zip(y) {
                        *x += o * (1.0 - t * t);
                    }
                }
            }
            Op::Softplus(a) => {
                let ta = self.value(*a);
                if let Some(g) = self.gbuf(grads, *a) {
                    for ((x, &o), &v) in g.iter_mut().zip(go).zip(ta.data()) {
                        *x += o * sigmoid(v);
                    }
                }
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                if let Some(g) = self.gbuf(grads, *a) {
                    for r in 0..node.value.rows() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &go[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..n {
                            g[r * n + k] += yr[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let n = node.value.cols();
                let nf = n as f64;
                if let Some(g) = self.gbuf(grads, *x) {
                    for (r, &rs) in inv_std.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &go[r * n..(r + 1) * n];
                        let sg: f64 = gr.iter().sum();
                        let sgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for k in 0..n {
                            g[r * n + k] += rs / nf * (nf * gr[k] - sg - yr[k] * sgy);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(g) = self.gbuf(grads, *a) {
                    g.iter_mut().for_each(|x| *x += go[0]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(g) = self.gbuf(grads, p) {
                        g.iter_mut().zip(&go[off..off + len]).for_each(|(x, &o)| *x += o);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.value(*a).cols(), self.value(*b).cols());
                let rows = node.value.rows();
                if let Some(g) = self.gbuf(grads, *a) {
                    for r in 0..rows {
                        for k in 0..p {
                            g[r * p + k] += go[r * (p + q) + k];
                        }
                    }
                }
                if let Some(g) = self.gbuf(grads, *b) {
                    for r in 0..rows {
                        for k in 0..q {
                            g[r * q + k] += go[r * (p + q) + p + k];
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.value.cols();
                if let Some(g) = self.gbuf(grads, *x) {
                    g[start * n..start * n + go.len()]
                        .iter_mut()
                        .zip(go)
                        .for_each(|(a, &o)| *a += o);
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = (node.value.rows(), node.value.cols());
                let n = self.value(*x).cols();
                if let Some(g) = self.gbuf(grads, *x) {
                    for r in 0..rows {
                        for k in 0..len {
                            g[r * n + start + k] += go[r * len + k];
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                let n = node.value.cols();
                if let Some(g) = self.gbuf(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        for k in 0..n {
                            g[src * n + k] += go[r * n + k];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.gbuf(grads, *x) {
                    g.iter_mut().zip(go).for_each(|(a, &o)| *a += o);
                }
            }
            Op::GroupSum { x, group } => {
                let n = node.value.cols();
                if let Some(g) = self.gbuf(grads, *x) {
                    let rows = g.len() / n;
                    for r in 0..rows {
                        let gi = r / group;
                        for k in 0..n {
                            g[r * n + k] += go[gi * n + k];
                        }
                    }
                }
            }
            Op::Bilinear { map, points } => {
                let ms = self.shape(*map);
                let (h, w, c) = (ms[0], ms[1], ms[2]);
                let pt = self.value(*points);
                let md = self.value(*map).data();
                let p = pt.rows();
                if let Some(gm) = self.gbuf(grads, *map) {
                    for i in 0..p {
                        let Some(cr) = corners(pt.data()[2 * i], pt.data()[2 * i + 1], h, w) else {
                            continue;
                        };
                        for k in 0..4 {
                            if let Some(cell) = cr.idx[k] {
                                for ch in 0..c {
                                    gm[cell * c + ch] += cr.w[k] * go[i * c + ch];
                                }
                            }
                        }
                    }
                }
                if let Some(gp) = self.gbuf(grads, *points) {
                    for i in 0..p {
                        let Some(cr) = corners(pt.data()[2 * i], pt.data()[2 * i + 1], h, w) else {
                            continue;
                        };
                        let gor = &go[i * c..(i + 1) * c];
                        for k in 0..4 {
                            if let Some(cell) = cr.idx[k] {
                                let dot: f64 = gor
                                    .iter()
                                    .zip(&md[cell * c..(cell + 1) * c])
                                    .map(|(a, b)| a * b)
                                    .sum();
                                gp[2 * i] += cr.du[k] * dot;
                                gp[2 * i + 1] += cr.dv[k] * dot;
                            }
                        }
                    }
                }
            }
            Op::Project { points, cam } => {
                let pt = self.value(*points);
                if let Some(g) = self.gbuf(grads, *points) {
                    for r in 0..pt.rows() {
                        let row = pt.row(r);
                        let pc = cam.to_camera([row[0], row[1], row[2]]);
                        if pc[2] <= MIN_DEPTH {
                            continue;
                        }
                        let (gu, gv) = (go[2 * r], go[2 * r + 1]);
                        let z = pc[2];
                        let dpc = [
                            gu * cam.fx / z,
                            gv * cam.fy / z,
                            -(gu * cam.fx * pc[0] + gv * cam.fy * pc[1]) / (z * z),
                        ];
                        for k in 0..3 {
                            g[3 * r + k] += cam.rot[0][k] * dpc[0]
                                + cam.rot[1][k] * dpc[1]
                                + cam.rot[2][k] * dpc[2];
                        }
                    }
                }
            }
            Op::MinDist { a, b, arg } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let m = tb.rows();
                let push = |v: Var, sign: f64, grads: &mut [Option<Vec<f64>>]| {
                    if let Some(g) = self.gbuf(grads, v) {
                        let cols = self.value(v).cols();
                        for (k, &(x, yy)) in arg.iter().enumerate() {
                            let d = y[k];
                            if d < 1e-12 || go[k] == 0.0 {
                                continue;
                            }
                            let (i, j) = (k / m, k % m);
                            let dx = ta.row(i)[2 * x] - tb.row(j)[2 * yy];
                            let dy = ta.row(i)[2 * x + 1] - tb.row(j)[2 * yy + 1];
                            let (row, vert) = if sign > 0.0 { (i, x) } else { (j, yy) };
                            g[row * cols + 2 * vert] += sign * go[k] * dx / d;
                            g[row * cols + 2 * vert + 1] += sign * go[k] * dy / d;
                        }
                    }
                };
                push(*a, 1.0, grads);
                push(*b, -1.0, grads);
            }
            Op::WeightedRowSum { samples, weights } => {
                let (ts, tw) = (self.value(*samples), self.value(*weights));
                let (n, k) = (tw.rows(), tw.cols());
                let c = ts.cols();
                if let Some(g) = self.gbuf(grads, *samples) {
                    for i in 0..n {
                        for kk in 0..k {
                            let wv = tw.data()[i * k + kk];
                            let base = (i * k + kk) * c;
                            for ch in 0..c {
                                g[base + ch] += wv * go[i * c + ch];
                            }
                        }
                    }
                }
                if let Some(g) = self.gbuf(grads, *weights) {
                    for i in 0..n {
                        let gor = &go[i * c..(i + 1) * c];
                        for kk in 0..k {
                            g[i * k + kk] += gor
                                .iter()
                                .zip(ts.row(i * k + kk))
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                }
            }
            Op::SmoothL1 {
                pred,
                target,
                mask,
                beta,
            } => {
                let tp = self.value(*pred);
                let count: f64 = mask.iter().sum();
                if count > 0.0 {
                    if let Some(g) = self.gbuf(grads, *pred) {
                        for k in 0..g.len() {
                            if mask[k] != 0.0 {
                                let d = smooth_l1(tp.data()[k] - target[k], *beta).1;
                                g[k] += go[0] * mask[k] * d / count;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let t = self.value(*logits);
                let n = t.cols();
                let rn = targets.len() as f64;
                if let Some(g) = self.gbuf(grads, *logits) {
                    for (r, &k) in targets.iter().enumerate() {
                        let row = t.row(r);
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let s: f64 = row.iter().map(|x| (x - mx).exp()).sum();
                        for j in 0..n {
                            let p = (row[j] - mx).exp() / s;
                            let ind = if j == k { 1.0 } else { 0.0 };
                            g[r * n + j] += go[0] * (p - ind) / rn;
                        }
                    }
                }
            }
            Op::Bce { logits, targets } => {
                let t = self.value(*logits);
                let rn = targets.len() as f64;
                if let Some(g) = self.gbuf(grads, *logits) {
                    for (k, (&x, &yv)) in t.data().iter().zip(targets).enumerate() {
                        g[k] += go[0] * (sigmoid(x) - yv) / rn;
                    }
                }
            }
        }
    }
}
