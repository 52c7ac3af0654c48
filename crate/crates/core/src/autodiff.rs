//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar walks the record in reverse and returns
//! gradients for every node that depends on a trainable leaf.

use std::cell::RefCell;
use std::rc::Rc;

use rustfft::num_complex::Complex;

use crate::signal::FrameConfig;
use crate::tensor::{gemm, gemm_strided, Tensor, View};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    g: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads[v.id].as_ref()
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads[v.id].take()
    }
}

/// Below this many input channels `conv1d` unfolds the input into columns.
const IM2COL_MAX_CIN: usize = 8;

/// Padding and stride of a 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvSpec {
    /// Stride 1, "same" padding for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        let total = dilation * (kernel - 1);
        Self {
            stride: 1,
            dilation,
            pad_left: total / 2,
            pad_right: total - total / 2,
        }
    }

    pub fn strided(kernel: usize, stride: usize) -> Self {
        Self {
            stride,
            dilation: 1,
            pad_left: (kernel - 1) / 2,
            pad_right: (kernel - 1) / 2,
        }
    }

    pub fn out_len(&self, len: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + self.pad_left + self.pad_right;
        if padded < span {
            0
        } else {
            (padded - span) / self.stride + 1
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        Var { g: self, id }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents: vec![],
            backward: None,
            requires_grad: true,
        });
        Var { g: self, id }
    }

    /// Leaf without gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, vec![], None)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else { continue };
            let parent_grads = backward(&g);
            grads[id] = Some(g);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

fn unary<'g>(x: Var<'g>, value: Tensor, backward: impl Fn(&Tensor) -> Tensor + 'static) -> Var<'g> {
    x.g.push(
        value,
        vec![x.id],
        Some(Box::new(move |g| vec![Some(backward(g))])),
    )
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.g.nodes.borrow()[self.id].requires_grad
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.g.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1);
        v.data()[0]
    }

    pub fn detach(&self) -> Var<'g> {
        self.g.constant((*self.value()).clone())
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = a.zip_map(&b, |x, y| x + y);
        self.g.push(
            out,
            vec![self.id, other.id],
            Some(Box::new(|g| vec![Some(g.clone()), Some(g.clone())])),
        )
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = a.zip_map(&b, |x, y| x - y);
        self.g.push(
            out,
            vec![self.id, other.id],
            Some(Box::new(|g| vec![Some(g.clone()), Some(g.scale(-1.0))])),
        )
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = a.zip_map(&b, |x, y| x * y);
        self.g.push(
            out,
            vec![self.id, other.id],
            Some(Box::new(move |g| {
                vec![
                    Some(g.zip_map(&b, |gv, bv| gv * bv)),
                    Some(g.zip_map(&a, |gv, av| gv * av)),
                ]
            })),
        )
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "div shape mismatch");
        let out = a.zip_map(&b, |x, y| x / y);
        let q = out.clone();
        self.g.push(
            out,
            vec![self.id, other.id],
            Some(Box::new(move |g| {
                let ga = g.zip_map(&b, |gv, bv| gv / bv);
                let gb = ga.zip_map(&q, |v, qv| -v * qv);
                vec![Some(ga), Some(gb)]
            })),
        )
    }

    /// Adds a `[C, 1]` (or `[C]`) column to every column of a `[C, T]` node.
    pub fn add_col(self, col: Var<'g>) -> Var<'g> {
        let (x, c) = (self.value(), col.value());
        let (rows, cols) = (x.rows(), x.cols());
        assert_eq!(c.len(), rows, "add_col length mismatch");
        let mut out = (*x).clone();
        for r in 0..rows {
            let v = c.data()[r];
            for o in &mut out.data_mut()[r * cols..(r + 1) * cols] {
                *o += v;
            }
        }
        let cshape = c.shape().to_vec();
        self.g.push(
            out,
            vec![self.id, col.id],
            Some(Box::new(move |g| {
                let sums: Vec<f64> = (0..rows).map(|r| g.row(r).iter().sum()).collect();
                vec![Some(g.clone()), Some(Tensor::new(&cshape, sums))]
            })),
        )
    }

    /// Repeats a `[C, 1]` column `t` times.
    pub fn broadcast_cols(self, t: usize) -> Var<'g> {
        let c = self.value();
        let rows = c.len();
        let mut out = Vec::with_capacity(rows * t);
        for &v in c.data() {
            out.extend(std::iter::repeat(v).take(t));
        }
        let cshape = c.shape().to_vec();
        unary(self, Tensor::new(&[rows, t], out), move |g| {
            let sums: Vec<f64> = (0..rows).map(|r| g.row(r).iter().sum()).collect();
            Tensor::new(&cshape, sums)
        })
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        let out = self.value().scale(k);
        unary(self, out, move |g| g.scale(k))
    }

    pub fn add_scalar(self, k: f64) -> Var<'g> {
        let out = self.value().map(|v| v + k);
        unary(self, out, |g| g.clone())
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'g> {
        let x = self.value();
        let out = x.map(|v| v * v);
        unary(self, out, move |g| g.zip_map(&x, |gv, xv| 2.0 * gv * xv))
    }

    pub fn abs(self) -> Var<'g> {
        let x = self.value();
        let out = x.map(f64::abs);
        unary(self, out, move |g| {
            g.zip_map(&x, |gv, xv| {
                if xv > 0.0 {
                    gv
                } else if xv < 0.0 {
                    -gv
                } else {
                    0.0
                }
            })
        })
    }

    pub fn exp(self) -> Var<'g> {
        let out = self.value().map(f64::exp);
        let y = out.clone();
        unary(self, out, move |g| g.zip_map(&y, |gv, yv| gv * yv))
    }

    pub fn ln(self) -> Var<'g> {
        let x = self.value();
        let out = x.map(f64::ln);
        unary(self, out, move |g| g.zip_map(&x, |gv, xv| gv / xv))
    }

    /// `ln(max(x, floor))`; zero gradient where clamped.
    pub fn log_clamp(self, floor: f64) -> Var<'g> {
        let x = self.value();
        let out = x.map(|v| v.max(floor).ln());
        unary(self, out, move |g| {
            g.zip_map(&x, |gv, xv| if xv > floor { gv / xv } else { 0.0 })
        })
    }

    pub fn tanh(self) -> Var<'g> {
        let out = self.value().map(f64::tanh);
        let y = out.clone();
        unary(self, out, move |g| {
            g.zip_map(&y, |gv, yv| gv * (1.0 - yv * yv))
        })
    }

    pub fn sigmoid(self) -> Var<'g> {
        let out = self.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        let y = out.clone();
        unary(self, out, move |g| {
            g.zip_map(&y, |gv, yv| gv * yv * (1.0 - yv))
        })
    }

    pub fn relu(self) -> Var<'g> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        let x = self.value();
        let out = x.map(|v| if v > 0.0 { v } else { slope * v });
        unary(self, out, move |g| {
            g.zip_map(&x, |gv, xv| if xv > 0.0 { gv } else { slope * gv })
        })
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        unary(self, Tensor::scalar(x.sum()), move |g| {
            Tensor::full(&shape, g.data()[0])
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean over columns: `[C, T] -> [C, 1]`.
    pub fn mean_cols(self) -> Var<'g> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let means: Vec<f64> = (0..rows)
            .map(|r| x.row(r).iter().sum::<f64>() / cols as f64)
            .collect();
        unary(self, Tensor::new(&[rows, 1], means), move |g| {
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                out.extend(std::iter::repeat(g.data()[r] / cols as f64).take(cols));
            }
            Tensor::new(&[rows, cols], out)
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape);
        unary(self, out, move |g| g.clone().reshape(&old))
    }

    pub fn transpose(self) -> Var<'g> {
        let out = self.value().transpose();
        unary(self, out, |g| g.transpose())
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        assert_eq!(b.rows(), k, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(a.data(), false, b.data(), false, &mut out, m, k, n, 0.0);
        self.g.push(
            Tensor::new(&[m, n], out),
            vec![self.id, other.id],
            Some(Box::new(move |g| {
                let mut ga = vec![0.0; m * k];
                gemm(g.data(), false, b.data(), true, &mut ga, m, n, k, 0.0);
                let mut gb = vec![0.0; k * n];
                gemm(a.data(), true, g.data(), false, &mut gb, k, m, n, 0.0);
                vec![
                    Some(Tensor::new(&[m, k], ga)),
                    Some(Tensor::new(&[k, n], gb)),
                ]
            })),
        )
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Var<'g> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let out = x.slice_rows(start, end);
        unary(self, out, move |g| {
            let mut full = Tensor::zeros(&[rows, cols]);
            full.data_mut()[start * cols..end * cols].copy_from_slice(g.data());
            full
        })
    }

    pub fn concat_rows(parts: &[Var<'g>]) -> Var<'g> {
        let g = parts[0].g;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_rows(&refs);
        let splits: Vec<usize> = values.iter().map(|v| v.rows()).collect();
        g.push(
            out,
            parts.iter().map(|p| p.id).collect(),
            Some(Box::new(move |grad| {
                let mut start = 0;
                splits
                    .iter()
                    .map(|&r| {
                        let s = grad.slice_rows(start, start + r);
                        start += r;
                        Some(s)
                    })
                    .collect()
            })),
        )
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Var<'g> {
        let g = parts[0].g;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_cols(&refs);
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        g.push(
            out,
            parts.iter().map(|p| p.id).collect(),
            Some(Box::new(move |grad| {
                let mut start = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let idx: Vec<usize> = (start..start + w).collect();
                        start += w;
                        Some(grad.gather_cols(&idx))
                    })
                    .collect()
            })),
        )
    }

    /// Column gather; repeated indices accumulate gradient.
    pub fn gather_cols(self, idx: &[usize]) -> Var<'g> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let out = x.gather_cols(idx);
        let idx = idx.to_vec();
        unary(self, out, move |g| {
            let mut full = Tensor::zeros(&[rows, cols]);
            let n = idx.len();
            for r in 0..rows {
                for (k, &j) in idx.iter().enumerate() {
                    full.data_mut()[r * cols + j] += g.data()[r * n + k];
                }
            }
            full
        })
    }

    /// Row gather (permutation or selection) of a 2-D node.
    pub fn gather_rows(self, idx: &[usize]) -> Var<'g> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            out.extend_from_slice(x.row(r));
        }
        let idx = idx.to_vec();
        unary(self, Tensor::new(&[idx.len(), cols], out), move |g| {
            let mut full = Tensor::zeros(&[rows, cols]);
            for (k, &r) in idx.iter().enumerate() {
                for c in 0..cols {
                    full.data_mut()[r * cols + c] += g.data()[k * cols + c];
                }
            }
            full
        })
    }

    /// Row-wise softmax of a 2-D node.
    pub fn softmax_rows(self) -> Var<'g> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = x.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - m).exp();
                s += *o;
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o /= s;
            }
        }
        let y = Tensor::new(&[rows, cols], out);
        let yc = y.clone();
        unary(self, y, move |g| {
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let (gr, yr) = (g.row(r), yc.row(r));
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    dx[r * cols + c] = yr[c] * (gr[c] - dot);
                }
            }
            Tensor::new(&[rows, cols], dx)
        })
    }

    /// Normalizes each column over channels, then applies per-channel
    /// `gamma` and `beta` (each `[C]`).
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>) -> Var<'g> {
        const EPS: f64 = 1e-5;
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let (c, t) = (x.rows(), x.cols());
        let mut xhat = Tensor::zeros(&[c, t]);
        let mut inv_std = vec![0.0; t];
        for col in 0..t {
            let mean = (0..c).map(|r| x.at(r, col)).sum::<f64>() / c as f64;
            let var = (0..c).map(|r| (x.at(r, col) - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[col] = is;
            for r in 0..c {
                xhat.set(r, col, (x.at(r, col) - mean) * is);
            }
        }
        let mut out = Tensor::zeros(&[c, t]);
        for r in 0..c {
            for col in 0..t {
                out.set(r, col, xhat.at(r, col) * gm.data()[r] + bt.data()[r]);
            }
        }
        let gshape = gm.shape().to_vec();
        self.g.push(
            out,
            vec![self.id, gamma.id, beta.id],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[c, t]);
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for col in 0..t {
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for r in 0..c {
                        let gv = g.at(r, col);
                        dg[r] += gv * xhat.at(r, col);
                        db[r] += gv;
                        let gh = gv * gm.data()[r];
                        mean_g += gh;
                        mean_gx += gh * xhat.at(r, col);
                    }
                    mean_g /= c as f64;
                    mean_gx /= c as f64;
                    for r in 0..c {
                        let gh = g.at(r, col) * gm.data()[r];
                        dx.set(
                            r,
                            col,
                            inv_std[col] * (gh - mean_g - xhat.at(r, col) * mean_gx),
                        );
                    }
                }
                vec![
                    Some(dx),
                    Some(Tensor::new(&gshape, dg)),
                    Some(Tensor::new(&gshape, db)),
                ]
            })),
        )
    }

    /// Looks up rows of a `[V, d]` table, returning `[d, N]`.
    pub fn embedding(table: Var<'g>, ids: &[usize]) -> Var<'g> {
        let tv = table.value();
        let (v, d) = (tv.rows(), tv.cols());
        let n = ids.len();
        let mut out = Tensor::zeros(&[d, n]);
        for (j, &id) in ids.iter().enumerate() {
            for k in 0..d {
                out.set(k, j, tv.at(id, k));
            }
        }
        let ids = ids.to_vec();
        unary(table, out, move |g| {
            let mut gt = Tensor::zeros(&[v, d]);
            for (j, &id) in ids.iter().enumerate() {
                for k in 0..d {
                    gt.data_mut()[id * d + k] += g.at(k, j);
                }
            }
            gt
        })
    }

    /// Cross-entropy of flattened logits against a class index.
    pub fn cross_entropy(self, label: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - x.data()[label];
        unary(self, Tensor::scalar(loss), move |g| {
            let gv = g.data()[0];
            let mut d: Vec<f64> = x.data().iter().map(|v| (v - lse).exp() * gv).collect();
            d[label] -= gv;
            Tensor::new(&shape, d)
        })
    }

    /// 1-D convolution: `x: [Cin, T]`, `w: [Cout, Cin, K]`, `bias: [Cout]`.
    pub fn conv1d(self, w: Var<'g>, bias: Option<Var<'g>>, spec: ConvSpec) -> Var<'g> {
        let (x, wv) = (self.value(), w.value());
        let (cin, t) = (x.rows(), x.cols());
        let ws = wv.shape();
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(
            ws[1], cin,
            "conv1d channel mismatch: input {cin}, weight {ws:?}"
        );
        let tout = spec.out_len(t, k);
        let tpad = t + spec.pad_left + spec.pad_right;
        let mut xpad = Vec::with_capacity(cin * tpad);
        for ci in 0..cin {
            xpad.resize(xpad.len() + spec.pad_left, 0.0);
            xpad.extend_from_slice(x.row(ci));
            xpad.resize(xpad.len() + spec.pad_right, 0.0);
        }
        // tap `kk` of the kernel as a [Cout, Cin] matrix, and the input it sees as [Cin, Tout]
        let w_tap = move |kk: usize| View::new(kk, cin * k, k);
        let x_tap = move |kk: usize| View::new(kk * spec.dilation, tpad, spec.stride);
        let rows = View::new(0, tout, 1);

        let mut out = vec![0.0; cout * tout];
        if let Some(b) = bias {
            let bv = b.value();
            for co in 0..cout {
                out[co * tout..(co + 1) * tout].fill(bv.data()[co]);
            }
        }
        // few input channels make per-tap products too thin, so unfold instead
        let cols = (cin < IM2COL_MAX_CIN).then(|| {
            let mut cols = Vec::with_capacity(cin * k * tout);
            for ci in 0..cin {
                for kk in 0..k {
                    let start = ci * tpad + kk * spec.dilation;
                    cols.extend((0..tout).map(|to| xpad[start + to * spec.stride]));
                }
            }
            cols
        });
        match &cols {
            Some(cols) => gemm(
                wv.data(),
                false,
                cols,
                false,
                &mut out,
                cout,
                cin * k,
                tout,
                1.0,
            ),
            None => {
                for kk in 0..k {
                    gemm_strided(
                        wv.data(),
                        w_tap(kk),
                        &xpad,
                        x_tap(kk),
                        &mut out,
                        rows,
                        cout,
                        cin,
                        tout,
                        1.0,
                    );
                }
            }
        }
        let mut parents = vec![self.id, w.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        let has_bias = bias.is_some();
        let wshape = ws.to_vec();
        let (need_x, need_w) = (self.requires_grad(), w.requires_grad());
        self.g.push(
            Tensor::new(&[cout, tout], out),
            parents,
            Some(Box::new(move |g| {
                let gd = g.data();
                let gw = need_w.then(|| {
                    let mut gw = vec![0.0; cout * cin * k];
                    if let Some(cols) = &cols {
                        gemm(gd, false, cols, true, &mut gw, cout, tout, cin * k, 0.0);
                        return Tensor::new(&wshape, gw);
                    }
                    for kk in 0..k {
                        gemm_strided(
                            gd,
                            rows,
                            &xpad,
                            x_tap(kk).t(),
                            &mut gw,
                            w_tap(kk),
                            cout,
                            tout,
                            cin,
                            0.0,
                        );
                    }
                    Tensor::new(&wshape, gw)
                });
                let gx = need_x.then(|| {
                    let mut gpad = vec![0.0; cin * tpad];
                    if cols.is_some() {
                        let mut gcols = vec![0.0; cin * k * tout];
                        gemm(
                            wv.data(),
                            true,
                            gd,
                            false,
                            &mut gcols,
                            cin * k,
                            cout,
                            tout,
                            0.0,
                        );
                        for (r, row) in gcols.chunks_exact(tout).enumerate() {
                            let start = (r / k) * tpad + (r % k) * spec.dilation;
                            for (to, &v) in row.iter().enumerate() {
                                gpad[start + to * spec.stride] += v;
                            }
                        }
                    }
                    for kk in (0..k).filter(|_| cols.is_none()) {
                        gemm_strided(
                            wv.data(),
                            w_tap(kk).t(),
                            gd,
                            rows,
                            &mut gpad,
                            x_tap(kk),
                            cin,
                            cout,
                            tout,
                            1.0,
                        );
                    }
                    let mut gx = Vec::with_capacity(cin * t);
                    for row in gpad.chunks_exact(tpad) {
                        gx.extend_from_slice(&row[spec.pad_left..spec.pad_left + t]);
                    }
                    Tensor::new(&[cin, t], gx)
                });
                let mut res = vec![gx, gw];
                if has_bias {
                    let gb: Vec<f64> = (0..cout).map(|co| g.row(co).iter().sum()).collect();
                    res.push(Some(Tensor::new(&[cout], gb)));
                }
                res
            })),
        )
    }

    /// Transposed 1-D convolution: `x: [Cin, T]`, `w: [Cin, Cout, K]`.
    /// Output length is `(T - 1) * stride - 2 * padding + K`.
    pub fn conv_transpose1d(
        self,
        w: Var<'g>,
        bias: Option<Var<'g>>,
        stride: usize,
        padding: usize,
    ) -> Var<'g> {
        let (x, wv) = (self.value(), w.value());
        let (cin, t) = (x.rows(), x.cols());
        let ws = wv.shape();
        let (cout, k) = (ws[1], ws[2]);
        assert_eq!(ws[0], cin, "conv_transpose1d channel mismatch");
        let full = (t - 1) * stride + k;
        assert!(full > 2 * padding, "conv_transpose1d output would be empty");
        let tout = full - 2 * padding;
        let ck = cout * k;
        let mut cols = vec![0.0; ck * t];
        gemm(wv.data(), true, x.data(), false, &mut cols, ck, cin, t, 0.0);
        let mut out = vec![0.0; cout * tout];
        if let Some(b) = bias {
            let bv = b.value();
            for co in 0..cout {
                out[co * tout..(co + 1) * tout].fill(bv.data()[co]);
            }
        }
        for co in 0..cout {
            for kk in 0..k {
                let row = &cols[(co * k + kk) * t..(co * k + kk + 1) * t];
                for (ti, &c) in row.iter().enumerate() {
                    let p = (ti * stride + kk) as isize - padding as isize;
                    if p >= 0 && (p as usize) < tout {
                        out[co * tout + p as usize] += c;
                    }
                }
            }
        }
        let mut parents = vec![self.id, w.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        let has_bias = bias.is_some();
        let wshape = ws.to_vec();
        let (need_x, need_w) = (self.requires_grad(), w.requires_grad());
        self.g.push(
            Tensor::new(&[cout, tout], out),
            parents,
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut gcols = vec![0.0; ck * t];
                for co in 0..cout {
                    for kk in 0..k {
                        let row = &mut gcols[(co * k + kk) * t..(co * k + kk + 1) * t];
                        for (ti, c) in row.iter_mut().enumerate() {
                            let p = (ti * stride + kk) as isize - padding as isize;
                            if p >= 0 && (p as usize) < tout {
                                *c = gd[co * tout + p as usize];
                            }
                        }
                    }
                }
                let gw = need_w.then(|| {
                    let mut gw = vec![0.0; cin * ck];
                    gemm(x.data(), false, &gcols, true, &mut gw, cin, t, ck, 0.0);
                    Tensor::new(&wshape, gw)
                });
                let gx = need_x.then(|| {
                    let mut gx = vec![0.0; cin * t];
                    gemm(wv.data(), false, &gcols, false, &mut gx, cin, ck, t, 0.0);
                    Tensor::new(&[cin, t], gx)
                });
                let mut res = vec![gx, gw];
                if has_bias {
                    let gb: Vec<f64> = (0..cout).map(|co| g.row(co).iter().sum()).collect();
                    res.push(Some(Tensor::new(&[cout], gb)));
                }
                res
            })),
        )
    }

    /// STFT magnitude of a `[1, L]` waveform node: `[fft/2 + 1, frames]`,
    /// computed as `sqrt(re^2 + im^2 + 1e-9)` so the gradient stays finite.
    pub fn stft_magnitude(self, cfg: FrameConfig) -> Var<'g> {
        const EPS: f64 = 1e-9;
        let x = self.value();
        let samples = x.data().to_vec();
        let len = samples.len();
        let framer = crate::signal::Framer::new(cfg, len);
        let (re, im) = crate::signal::stft_complex(&samples, cfg);
        let mag = re.zip_map(&im, |a, b| (a * a + b * b + EPS).sqrt());
        let (bins, frames) = (mag.rows(), mag.cols());
        let magc = mag.clone();
        let xshape = x.shape().to_vec();
        unary(self, mag, move |g| {
            let n = cfg.fft_size;
            let ifft = crate::signal::inverse_fft(n);
            let mut buf = vec![Complex::new(0.0, 0.0); n];
            let mut gx = vec![0.0; len];
            for t in 0..frames {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = if k < bins {
                        let s = g.at(k, t) / magc.at(k, t);
                        Complex::new(re.at(k, t) * s, im.at(k, t) * s)
                    } else {
                        Complex::new(0.0, 0.0)
                    };
                }
                ifft.process(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    if let Some(src) = framer.source(t, j) {
                        gx[src] += framer.window[j] * b.re;
                    }
                }
            }
            Tensor::new(&xshape, gx)
        })
    }
}
