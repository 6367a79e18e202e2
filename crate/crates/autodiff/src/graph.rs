use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};

use crate::error::shape_err;
use crate::kernels::{self, conv::ConvDims, grouped, svd};
use crate::{AutodiffError, ParameterStore, Result, RunningStats, Tensor};

/// Floor on `|s_j² − s_i²|` in the SVD backward pass.
pub const SVD_GAP_EPS: f64 = 1e-8;

/// Variance offset inside batch normalization.
pub const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub enum BatchNormMode<'a> {
    /// Batch statistics; running statistics are updated in place.
    Train(&'a mut RunningStats),
    Infer(&'a RunningStats),
}

/// Configuration of [`Graph::grouped_mlp_max`].
pub struct GroupedMlpSpec {
    /// Row indices into `point_in` for each group. An empty group stands for
    /// a single all-zero input row.
    pub groups: Vec<Vec<usize>>,
    /// `(weights [in, out], bias [out])` per layer, ReLU after each.
    pub layers: Vec<(Var, Var)>,
    /// Number of leading `point_in` columns taken relative to the center.
    pub relative: usize,
    /// Relative columns are divided by this.
    pub divisor: f64,
}

enum Op {
    Leaf,
    Param(String),
    FullyConnected {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Softplus(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Softmax(Var),
    MaxPoolSet {
        x: Var,
        argmax: Vec<usize>,
    },
    Conv {
        x: Var,
        k: Var,
        b: Var,
        dims: ConvDims,
    },
    Svd3 {
        m: Var,
        factors: svd::Svd3,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast {
        x: Var,
        r: Var,
    },
    MulRows {
        x: Var,
        w: Var,
    },
    SumRows(Var),
    Sum(Var),
    Abs(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Slice {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    WeightedRows {
        x: Var,
        rows: Vec<Vec<(usize, f64)>>,
    },
    DivScalar {
        x: Var,
        s: Var,
    },
    GroupedMlpMax {
        point_in: Var,
        center_in: Var,
        groups: Vec<Vec<usize>>,
        layers: Vec<(Var, Var)>,
        relative: usize,
        divisor: f64,
        a: Vec<f64>,
        argmax: Vec<u32>,
        max_rows: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }
}

/// Operation record for one forward pass. Nodes are appended in evaluation
/// order, so reverse index order is a reverse topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    degenerate_svd: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// SVD evaluations whose singular-value gaps fell below [`SVD_GAP_EPS`].
    pub fn degenerate_svd_count(&self) -> usize {
        self.degenerate_svd
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (gradient reported in [`Gradients`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; differentiable iff it is trainable
    /// and not frozen.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        let requires_grad = store.is_trainable(name);
        self.nodes.push(Node {
            value,
            op: Op::Param(name.to_string()),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let ws = wv.shape();
        if ws.len() != 2 || xv.last_dim() != ws[0] || bv.len() != ws[1] {
            return Err(shape_err(
                "fully_connected",
                format!(
                    "input {:?}, weights {:?}, bias {:?}",
                    xv.shape(),
                    ws,
                    bv.shape()
                ),
            ));
        }
        let (rows, fi, fo) = (xv.leading(), ws[0], ws[1]);
        let mut out = Vec::with_capacity(rows * fo);
        for _ in 0..rows {
            out.extend_from_slice(bv.data());
        }
        kernels::matmul_acc(xv.data(), wv.data(), &mut out, rows, fi, fo);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = fo;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::FullyConnected { x, w, b }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v.max(0.0)).collect(),
        )
        .unwrap();
        self.push(t, Op::Relu(x), &[x])
    }

    /// `ln(1 + eˣ)`, returning `x` itself above 30.
    pub fn softplus(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| kernels::softplus(v)).collect(),
        )
        .unwrap();
        self.push(t, Op::Softplus(x), &[x])
    }

    /// Per-channel normalization of `x: [n, c]` over the `n` axis.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if xv.shape().len() != 2 || gv.len() != xv.last_dim() || bv.len() != xv.last_dim() {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    xv.shape(),
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let (mean, var, train) = match mode {
            BatchNormMode::Train(running) => {
                if n < 2 {
                    return Err(AutodiffError::InvalidArgument(format!(
                        "batch_norm in train mode needs at least 2 rows, got {n}"
                    )));
                }
                if running.mean.len() != c {
                    return Err(shape_err("batch_norm", "running statistics width"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for r in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                for ch in 0..c {
                    running.mean[ch] =
                        BN_MOMENTUM * running.mean[ch] + (1.0 - BN_MOMENTUM) * mean[ch];
                    running.var[ch] = BN_MOMENTUM * running.var[ch] + (1.0 - BN_MOMENTUM) * var[ch];
                }
                (mean, var, true)
            }
            BatchNormMode::Infer(running) => {
                if running.mean.len() != c {
                    return Err(shape_err("batch_norm", "running statistics width"));
                }
                (running.mean.clone(), running.var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            for ch in 0..c {
                let h = (xv.data()[r * c + ch] - mean[ch]) * inv_std[ch];
                xhat[r * c + ch] = h;
                out[r * c + ch] = gv.data()[ch] * h + bv.data()[ch];
            }
        }
        let t = Tensor::new(vec![n, c], out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax over the trailing axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out).unwrap();
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Per-channel max over the second-to-last axis: `[..., K, c] -> [..., c]`.
    /// Gradient goes to the first row attaining the max.
    pub fn max_pool_set(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if shape.len() < 2 || shape[shape.len() - 2] == 0 {
            return Err(shape_err(
                "max_pool_set",
                format!("needs [..., K>=1, c], got {shape:?}"),
            ));
        }
        let c = shape[shape.len() - 1];
        let k = shape[shape.len() - 2];
        let groups = xv.len() / (k * c).max(1);
        let mut out = vec![0.0; groups * c];
        let mut argmax = vec![0; groups * c];
        let d = xv.data();
        for g in 0..groups {
            for ch in 0..c {
                let mut best = g * k * c + ch;
                for r in 1..k {
                    let i = (g * k + r) * c + ch;
                    if d[i] > d[best] {
                        best = i;
                    }
                }
                out[g * c + ch] = d[best];
                argmax[g * c + ch] = best;
            }
        }
        let mut oshape = shape[..shape.len() - 2].to_vec();
        oshape.push(c);
        let t = Tensor::new(oshape, out)?;
        Ok(self.push(t, Op::MaxPoolSet { x, argmax }, &[x]))
    }

    /// 3×3×3 same-padded convolution of `[X, Y, Z, c_in]` or
    /// `[B, X, Y, Z, c_in]` with kernels `[3, 3, 3, c_in, c_out]`.
    pub fn conv3d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (batch, spatial) = match xs.len() {
            4 => (1, [xs[0], xs[1], xs[2]]),
            5 => (xs[0], [xs[1], xs[2], xs[3]]),
            _ => {
                return Err(shape_err(
                    "conv3d",
                    format!("input rank must be 4 or 5, got {xs:?}"),
                ))
            }
        };
        let ks = self.value(k).shape().to_vec();
        if ks.len() != 5 || ks[..3] != [3, 3, 3] || ks[3] != *xs.last().unwrap() {
            return Err(shape_err(
                "conv3d",
                format!("kernel {ks:?} for input {xs:?}"),
            ));
        }
        self.conv(
            x,
            k,
            b,
            xs,
            ConvDims {
                batch,
                extent: spatial,
                taps: [3, 3, 3],
                cin: ks[3],
                cout: ks[4],
            },
        )
    }

    /// Width-3 same-padded convolution of `[L, c_in]` or `[B, L, c_in]` with
    /// kernels `[3, c_in, c_out]`.
    pub fn conv1d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (batch, len) = match xs.len() {
            2 => (1, xs[0]),
            3 => (xs[0], xs[1]),
            _ => {
                return Err(shape_err(
                    "conv1d",
                    format!("input rank must be 2 or 3, got {xs:?}"),
                ))
            }
        };
        let ks = self.value(k).shape().to_vec();
        if ks.len() != 3 || ks[0] != 3 || ks[1] != *xs.last().unwrap() {
            return Err(shape_err(
                "conv1d",
                format!("kernel {ks:?} for input {xs:?}"),
            ));
        }
        self.conv(
            x,
            k,
            b,
            xs,
            ConvDims {
                batch,
                extent: [1, 1, len],
                taps: [1, 1, 3],
                cin: ks[1],
                cout: ks[2],
            },
        )
    }

    fn conv(&mut self, x: Var, k: Var, b: Var, xs: Vec<usize>, dims: ConvDims) -> Result<Var> {
        if self.value(b).len() != dims.cout {
            return Err(shape_err(
                "conv",
                format!("bias {:?} for {} filters", self.value(b).shape(), dims.cout),
            ));
        }
        let out = kernels::conv::forward(
            self.value(x).data(),
            self.value(k).data(),
            self.value(b).data(),
            &dims,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dims.cout;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Conv { x, k, b, dims }, &[x, k, b]))
    }

    /// Singular value decomposition `m = U·diag(S)·Vᵀ` of a `[3, 3]` tensor,
    /// `S` descending. Returns `(U [3,3], S [3], V [3,3])`.
    pub fn svd3(&mut self, m: Var) -> Result<(Var, Var, Var)> {
        let mv = self.value(m);
        if mv.shape() != [3, 3] {
            return Err(shape_err(
                "svd3",
                format!("expected [3, 3], got {:?}", mv.shape()),
            ));
        }
        let mat = Matrix3::from_row_slice(mv.data());
        let f = svd::decompose(&mat);
        for i in 0..3 {
            for j in (i + 1)..3 {
                if (f.s[i] * f.s[i] - f.s[j] * f.s[j]).abs() < SVD_GAP_EPS {
                    self.degenerate_svd += 1;
                }
            }
        }
        let mut packed = Vec::with_capacity(21);
        packed.extend(row_major(&f.u));
        packed.extend(f.s.iter());
        packed.extend(row_major(&f.v));
        let t = Tensor::new(vec![21], packed)?;
        let node = self.push(t, Op::Svd3 { m, factors: f }, &[m]);
        let u = self.slice(node, 0, &[3, 3])?;
        let s = self.slice(node, 9, &[3])?;
        let v = self.slice(node, 12, &[3, 3])?;
        Ok((u, s, v))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v * factor).collect(),
        )
        .unwrap();
        self.push(t, Op::Scale(x, factor), &[x])
    }

    /// `x[g, m, :] + r[g, :]` where `r: [G, c]` and `x` holds `G·M` rows of
    /// width `c` (any shape with trailing axis `c`).
    pub fn add_broadcast(&mut self, x: Var, r: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(r));
        let c = rv.last_dim();
        let g = rv.leading();
        if xv.last_dim() != c || g == 0 || xv.leading() % g != 0 {
            return Err(shape_err(
                "add_broadcast",
                format!("{:?} + {:?}", xv.shape(), rv.shape()),
            ));
        }
        let m = xv.leading() / g;
        let mut out = xv.data().to_vec();
        for gi in 0..g {
            let rr = rv.row(gi);
            for mi in 0..m {
                let base = (gi * m + mi) * c;
                for (o, v) in out[base..base + c].iter_mut().zip(rr) {
                    *o += v;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::AddBroadcast { x, r }, &[x, r]))
    }

    /// Scales row `i` of `x` by `w[i]`; `x` has `len(w)` rows.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.leading() != wv.len() {
            return Err(shape_err(
                "mul_rows",
                format!("{:?} by {:?}", xv.shape(), wv.shape()),
            ));
        }
        let c = xv.last_dim();
        let mut out = xv.data().to_vec();
        for (i, row) in out.chunks_mut(c.max(1)).enumerate() {
            row.iter_mut().for_each(|v| *v *= wv.data()[i]);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::MulRows { x, w }, &[x, w]))
    }

    /// Column sums: `[n, c] -> [c]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut out = vec![0.0; c];
        for r in 0..xv.leading() {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        self.push(Tensor::from_vec(out), Op::SumRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v.abs()).collect(),
        )
        .unwrap();
        self.push(t, Op::Abs(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (as_, bs) = (av.shape(), bv.shape());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(shape_err("matmul", format!("{as_:?} x {bs:?}")));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(shape_err("transpose", format!("{:?}", xv.shape())));
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv.data()[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Contiguous run of the flat buffer starting at `start`, shaped `shape`.
    pub fn slice(&mut self, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n: usize = shape.iter().product();
        if start + n > xv.len() {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) of {}", start + n, xv.len()),
            ));
        }
        let t = Tensor::new(shape.to_vec(), xv.data()[start..start + n].to_vec())?;
        Ok(self.push(t, Op::Slice { x, start }, &[x]))
    }

    /// Concatenation along the trailing axis; all parts share leading rows.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no parts"));
        }
        let rows = self.value(parts[0]).leading();
        if parts.iter().any(|p| self.value(*p).leading() != rows) {
            return Err(shape_err("concat", "row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = self.value(parts[0]).shape().to_vec();
        *shape.last_mut().unwrap() = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    /// Rows `x[idx[i]]` of a `[P, c]` tensor.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let p = xv.leading();
        if let Some(bad) = idx.iter().find(|&&i| i >= p) {
            return Err(shape_err(
                "gather_rows",
                format!("index {bad} out of {p} rows"),
            ));
        }
        let c = xv.last_dim();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        Ok(self.push(t, Op::GatherRows { x, idx }, &[x]))
    }

    /// Output row `g` is `Σ wᵢ · x[iᵢ]` over the `(iᵢ, wᵢ)` pairs of `rows[g]`.
    pub fn weighted_rows(&mut self, x: Var, rows: Vec<Vec<(usize, f64)>>) -> Result<Var> {
        let xv = self.value(x);
        let p = xv.leading();
        let c = xv.last_dim();
        let mut out = vec![0.0; rows.len() * c];
        for (g, entries) in rows.iter().enumerate() {
            for &(i, w) in entries {
                if i >= p {
                    return Err(shape_err(
                        "weighted_rows",
                        format!("index {i} out of {p} rows"),
                    ));
                }
                for (o, v) in out[g * c..(g + 1) * c].iter_mut().zip(xv.row(i)) {
                    *o += w * v;
                }
            }
        }
        let t = Tensor::new(vec![rows.len(), c], out)?;
        Ok(self.push(t, Op::WeightedRows { x, rows }, &[x]))
    }

    /// Divides every element of `x` by the single-element tensor `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err(
                "div_scalar",
                format!("divisor {:?}", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).item();
        let xv = self.value(x);
        let t = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v / sv).collect(),
        )?;
        Ok(self.push(t, Op::DivScalar { x, s }, &[x, s]))
    }

    /// Shared ReLU MLP over gathered rows followed by a per-group max-pool.
    /// Row `k` of group `g` is `point_in[groups[g][k]]` with its first
    /// `relative` columns replaced by `(· − center_in[g]) / divisor`;
    /// `center_in` is `[G, relative]`. Output is `[G, out]`.
    pub fn grouped_mlp_max(
        &mut self,
        point_in: Var,
        center_in: Var,
        spec: GroupedMlpSpec,
    ) -> Result<Var> {
        let GroupedMlpSpec {
            groups,
            layers,
            relative,
            divisor,
        } = spec;
        if layers.is_empty() {
            return Err(shape_err("grouped_mlp_max", "no layers"));
        }
        if !(divisor.is_finite() && divisor != 0.0) {
            return Err(shape_err("grouped_mlp_max", format!("divisor {divisor}")));
        }
        let pv = self.value(point_in);
        let cv = self.value(center_in);
        let width = pv.last_dim();
        if relative > width || cv.last_dim() != relative || cv.leading() != groups.len() {
            return Err(shape_err(
                "grouped_mlp_max",
                format!(
                    "points {:?}, centers {:?}, {} groups, {relative} relative columns",
                    pv.shape(),
                    cv.shape(),
                    groups.len()
                ),
            ));
        }
        let npts = pv.leading();
        if let Some(bad) = groups.iter().flatten().find(|&&i| i >= npts) {
            return Err(shape_err(
                "grouped_mlp_max",
                format!("index {bad} out of {npts} points"),
            ));
        }
        let mut fan_in = width;
        for (w, b) in &layers {
            let ws = self.value(*w).shape();
            if ws.len() != 2 || ws[0] != fan_in || self.value(*b).len() != ws[1] {
                return Err(shape_err(
                    "grouped_mlp_max",
                    format!("layer {ws:?} after width {fan_in}"),
                ));
            }
            fan_in = ws[1];
        }
        let h1 = self.value(layers[0].0).shape()[1];
        let rest = rest_columns(pv.data(), width, relative);
        let mut a = vec![0.0; npts * h1];
        let w1 = self.value(layers[0].0).data();
        kernels::matmul_acc(
            &rest,
            &w1[relative * h1..],
            &mut a,
            npts,
            width - relative,
            h1,
        );
        let max_rows = groups.iter().map(|g| g.len()).max().unwrap_or(1).max(1);
        let (out, argmax) = {
            let kl = self.kernel_layers(&layers);
            let frame = grouped::Frame {
                points: pv.data(),
                width,
                centers: cv.data(),
                rel: relative,
                divisor,
            };
            grouped::forward(&a, &frame, &groups, &kl, max_rows)
        };
        let t = Tensor::new(vec![groups.len(), fan_in], out)?;
        let mut parents = vec![point_in, center_in];
        for (w, b) in &layers {
            parents.push(*w);
            parents.push(*b);
        }
        Ok(self.push(
            t,
            Op::GroupedMlpMax {
                point_in,
                center_in,
                groups,
                layers,
                relative,
                divisor,
                a,
                argmax,
                max_rows,
            },
            &parents,
        ))
    }

    fn kernel_layers(&self, layers: &[(Var, Var)]) -> Vec<grouped::Layer<'_>> {
        layers
            .iter()
            .map(|(w, b)| {
                let ws = self.value(*w).shape();
                grouped::Layer {
                    w: self.value(*w).data(),
                    b: self.value(*b).data(),
                    fan_in: ws[0],
                    fan_out: ws[1],
                }
            })
            .collect()
    }

    /// Reverse pass from the scalar `loss`. Parameter gradients are added to
    /// `store`; leaf gradients are returned. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var, store: &mut ParameterStore) -> Result<Gradients> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {
                    out.leaves
                        .insert(id, Tensor::new(self.nodes[id].value.shape().to_vec(), g)?);
                }
                Op::Param(name) => {
                    store.accumulate_grad(name, &g)?;
                    out.leaves
                        .insert(id, Tensor::new(self.nodes[id].value.shape().to_vec(), g)?);
                }
                op => {
                    let degenerate = self.backprop(op, id, &g, &mut grads);
                    self.degenerate_svd += degenerate;
                }
            }
        }
        Ok(out)
    }

    /// Distributes `g` (gradient of node `id`) to its parents. Returns the
    /// number of degenerate SVD spectra encountered.
    fn backprop(&self, op: &Op, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> usize {
        let nodes = &self.nodes;
        let val = |v: &Var| &nodes[v.0].value;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        let mut acc = |v: &Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(slot);
            }
        };
        let out = &nodes[id].value;
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::FullyConnected { x, w, b } => {
                let (xv, wv) = (val(x), val(w));
                let (rows, fi, fo) = (xv.leading(), wv.shape()[0], wv.shape()[1]);
                acc(x, &mut |dx| {
                    kernels::matmul_grad_a(g, wv.data(), dx, rows, fi, fo)
                });
                acc(w, &mut |dw| {
                    kernels::matmul_grad_b(xv.data(), g, dw, rows, fi, fo)
                });
                acc(b, &mut |db| {
                    for r in 0..rows {
                        for (d, v) in db.iter_mut().zip(&g[r * fo..(r + 1) * fo]) {
                            *d += v;
                        }
                    }
                });
            }
            Op::Relu(x) => acc(x, &mut |dx| {
                for ((d, gv), xv) in dx.iter_mut().zip(g).zip(val(x).data()) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            }),
            Op::Softplus(x) => acc(x, &mut |dx| {
                for ((d, gv), xv) in dx.iter_mut().zip(g).zip(val(x).data()) {
                    *d += gv * kernels::sigmoid(*xv);
                }
            }),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let n = xhat.len() / c;
                let gam = val(gamma).data();
                acc(gamma, &mut |dg| {
                    for r in 0..n {
                        for ch in 0..c {
                            dg[ch] += g[r * c + ch] * xhat[r * c + ch];
                        }
                    }
                });
                acc(beta, &mut |db| {
                    for r in 0..n {
                        for ch in 0..c {
                            db[ch] += g[r * c + ch];
                        }
                    }
                });
                acc(x, &mut |dx| {
                    if *train {
                        let mut sum_d = vec![0.0; c];
                        let mut sum_dx = vec![0.0; c];
                        for r in 0..n {
                            for ch in 0..c {
                                let dh = g[r * c + ch] * gam[ch];
                                sum_d[ch] += dh;
                                sum_dx[ch] += dh * xhat[r * c + ch];
                            }
                        }
                        let nf = n as f64;
                        for r in 0..n {
                            for ch in 0..c {
                                let dh = g[r * c + ch] * gam[ch];
                                dx[r * c + ch] += inv_std[ch] / nf
                                    * (nf * dh - sum_d[ch] - xhat[r * c + ch] * sum_dx[ch]);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for ch in 0..c {
                                dx[r * c + ch] += g[r * c + ch] * gam[ch] * inv_std[ch];
                            }
                        }
                    }
                });
            }
            Op::Softmax(x) => acc(x, &mut |dx| {
                let c = out.last_dim().max(1);
                for (r, (yr, gr)) in out.data().chunks(c).zip(g.chunks(c)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }),
            Op::MaxPoolSet { x, argmax } => acc(x, &mut |dx| {
                for (gv, &i) in g.iter().zip(argmax) {
                    dx[i] += gv;
                }
            }),
            Op::Conv { x, k, b, dims } => {
                let mut dinput = wants(x).then(|| vec![0.0; val(x).len()]);
                let mut dkernel = wants(k).then(|| vec![0.0; val(k).len()]);
                let mut dbias = wants(b).then(|| vec![0.0; val(b).len()]);
                kernels::conv::backward(
                    val(x).data(),
                    val(k).data(),
                    g,
                    dims,
                    dinput.as_deref_mut(),
                    dkernel.as_deref_mut(),
                    dbias.as_deref_mut(),
                );
                for (v, d) in [(x, dinput), (k, dkernel), (b, dbias)] {
                    if let Some(d) = d {
                        acc(v, &mut |slot| add_into(slot, &d));
                    }
                }
            }
            Op::Svd3 { m, factors } => {
                let gu = Matrix3::from_row_slice(&g[0..9]);
                let gs = Vector3::new(g[9], g[10], g[11]);
                let gv = Matrix3::from_row_slice(&g[12..21]);
                let (gm, degenerate) = svd::backward(factors, &gu, &gs, &gv, SVD_GAP_EPS);
                acc(m, &mut |dm| add_into(dm, &row_major(&gm)));
                return usize::from(degenerate);
            }
            Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(s, v)| *s -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                acc(a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(x, f) => acc(x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(s, v)| *s += f * v)
            }),
            Op::AddBroadcast { x, r } => {
                acc(x, &mut |d| add_into(d, g));
                acc(r, &mut |d| {
                    let rv = val(r);
                    let c = rv.last_dim();
                    let groups = rv.leading();
                    let m = out.leading() / groups;
                    for gi in 0..groups {
                        for mi in 0..m {
                            let base = (gi * m + mi) * c;
                            for j in 0..c {
                                d[gi * c + j] += g[base + j];
                            }
                        }
                    }
                });
            }
            Op::MulRows { x, w } => {
                let c = val(x).last_dim().max(1);
                let (xv, wv) = (val(x).data(), val(w).data());
                acc(x, &mut |d| {
                    for (i, (dr, gr)) in d.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        dr.iter_mut().zip(gr).for_each(|(s, v)| *s += v * wv[i]);
                    }
                });
                acc(w, &mut |d| {
                    for (i, (xr, gr)) in xv.chunks(c).zip(g.chunks(c)).enumerate() {
                        d[i] += xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::SumRows(x) => acc(x, &mut |d| {
                let c = g.len().max(1);
                for dr in d.chunks_mut(c) {
                    add_into(dr, g);
                }
            }),
            Op::Sum(x) => acc(x, &mut |d| d.iter_mut().for_each(|s| *s += g[0])),
            Op::Abs(x) => acc(x, &mut |d| {
                for ((s, gv), xv) in d.iter_mut().zip(g).zip(val(x).data()) {
                    if *xv > 0.0 {
                        *s += gv;
                    } else if *xv < 0.0 {
                        *s -= gv;
                    }
                }
            }),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                acc(a, &mut |d| kernels::matmul_grad_a(g, bv.data(), d, m, k, n));
                acc(b, &mut |d| kernels::matmul_grad_b(av.data(), g, d, m, k, n));
            }
            Op::Transpose(x) => acc(x, &mut |d| {
                let (m, n) = (val(x).shape()[0], val(x).shape()[1]);
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] += g[j * m + i];
                    }
                }
            }),
            Op::Reshape(x) => acc(x, &mut |d| add_into(d, g)),
            Op::Slice { x, start } => {
                acc(x, &mut |d| add_into(&mut d[*start..*start + g.len()], g))
            }
            Op::Concat(parts) => {
                let total = out.last_dim();
                let rows = out.leading();
                let mut offset = 0;
                for p in parts {
                    let w = val(p).last_dim();
                    acc(p, &mut |d| {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows { x, idx } => acc(x, &mut |d| {
                let c = out.last_dim();
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut d[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }),
            Op::WeightedRows { x, rows } => acc(x, &mut |d| {
                let c = out.last_dim();
                for (r, entries) in rows.iter().enumerate() {
                    for &(i, w) in entries {
                        for j in 0..c {
                            d[i * c + j] += w * g[r * c + j];
                        }
                    }
                }
            }),
            Op::DivScalar { x, s } => {
                let sv = val(s).item();
                acc(x, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(a, v)| *a += v / sv)
                });
                acc(s, &mut |d| {
                    let dot: f64 = g.iter().zip(val(x).data()).map(|(a, b)| a * b).sum();
                    d[0] -= dot / (sv * sv);
                });
            }
            Op::GroupedMlpMax {
                point_in,
                center_in,
                groups,
                layers,
                relative,
                divisor,
                a,
                argmax,
                max_rows,
            } => {
                let kl = self.kernel_layers(layers);
                let pv = val(point_in);
                let width = pv.last_dim();
                let rel = *relative;
                let frame = grouped::Frame {
                    points: pv.data(),
                    width,
                    centers: val(center_in).data(),
                    rel,
                    divisor: *divisor,
                };
                let res = grouped::backward(a, &frame, groups, &kl, argmax, g, *max_rows);
                let (w1, b1) = layers[0];
                let h1 = kl[0].fan_out;
                let npts = pv.leading();
                let rest = rest_columns(pv.data(), width, rel);
                let w1v = val(&w1).data();
                acc(&w1, &mut |dw| {
                    add_into(&mut dw[..rel * h1], &res.dw_rel);
                    kernels::matmul_grad_b(
                        &rest,
                        &res.da,
                        &mut dw[rel * h1..],
                        npts,
                        width - rel,
                        h1,
                    );
                });
                acc(&b1, &mut |db| add_into(db, &res.layers[0].b));
                acc(point_in, &mut |d| {
                    let mut drest = vec![0.0; npts * (width - rel)];
                    kernels::matmul_grad_a(
                        &res.da,
                        &w1v[rel * h1..],
                        &mut drest,
                        npts,
                        width - rel,
                        h1,
                    );
                    for p in 0..npts {
                        let row = &mut d[p * width..(p + 1) * width];
                        add_into(&mut row[..rel], &res.d_points[p * rel..(p + 1) * rel]);
                        add_into(
                            &mut row[rel..],
                            &drest[p * (width - rel)..(p + 1) * (width - rel)],
                        );
                    }
                });
                acc(center_in, &mut |d| add_into(d, &res.d_centers));
                for (l, (w, bb)) in layers.iter().enumerate().skip(1) {
                    acc(w, &mut |d| add_into(d, &res.layers[l].w));
                    acc(bb, &mut |d| add_into(d, &res.layers[l].b));
                }
            }
        }
        0
    }
}

/// Columns `rel..` of a row-major `[P, width]` buffer.
fn rest_columns(data: &[f64], width: usize, rel: usize) -> Vec<f64> {
    if rel == 0 {
        return data.to_vec();
    }
    data.chunks(width)
        .flat_map(|r| r[rel..].iter().copied())
        .collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}
