use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{split_axis, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    AddScalar {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Log {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Prelu {
        x: Var,
        slope: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        groups: usize,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    WeightStandardize {
        w: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    RowNorm {
        x: Var,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    ClampMin {
        x: Var,
        min: T,
    },
    ScalarFn {
        x: Var,
        grad: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass and differentiates them.
///
/// A tape is single-use: build the graph, call [`Tape::backward`] on the
/// scalar loss, read the gradients, drop the tape.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; zeros if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches its node shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads[var.0].as_deref()
    }
}

fn check_same(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// im2col for one batch item: `x` is `(cin, len)`, returns `(cin*k, lout)`.
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    len: usize,
    k: usize,
    stride: usize,
    padding: usize,
    lout: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); cin * k * lout];
    for c in 0..cin {
        let xrow = &x[c * len..(c + 1) * len];
        for kk in 0..k {
            let row = &mut cols[(c * k + kk) * lout..(c * k + kk + 1) * lout];
            for (t, slot) in row.iter_mut().enumerate() {
                let pos = (t * stride + kk) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < len {
                    *slot = xrow[pos as usize];
                }
            }
        }
    }
    cols
}

fn col2im_acc<T: Scalar>(
    cols: &[T],
    dx: &mut [T],
    cin: usize,
    len: usize,
    k: usize,
    stride: usize,
    padding: usize,
    lout: usize,
) {
    for c in 0..cin {
        for kk in 0..k {
            let row = &cols[(c * k + kk) * lout..(c * k + kk + 1) * lout];
            for (t, &v) in row.iter().enumerate() {
                let pos = (t * stride + kk) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < len {
                    dx[c * len + pos as usize] += v;
                }
            }
        }
    }
}

/// Mean and inverse standard deviation of `xs` (64-bit accumulation).
fn moments<T: Scalar>(xs: impl Iterator<Item = T> + Clone, eps: f64) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in xs.clone() {
        sum += v.to_f64_lossy();
        n += 1;
    }
    let mean = sum / n as f64;
    let var = xs
        .map(|v| {
            let d = v.to_f64_lossy() - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Backward through `y = (x - mean) * inv_std` for one normalization group.
fn normalize_backward<T: Scalar>(dy: &[f64], xhat: &[T], inv_std: f64, dx: &mut [T]) {
    let n = dy.len() as f64;
    let sum_dy: f64 = dy.iter().sum();
    let sum_dy_xhat: f64 = dy
        .iter()
        .zip(xhat)
        .map(|(g, h)| g * h.to_f64_lossy())
        .sum();
    for ((slot, g), h) in dx.iter_mut().zip(dy).zip(xhat) {
        let v = inv_std / n * (n * g - sum_dy - h.to_f64_lossy() * sum_dy_xhat);
        *slot += T::of(v);
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())
            .expect("unary op keeps shape");
        self.push(out, op, &[x])
    }

    fn zip_binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(op_name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    /// `(m,k) @ (k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `(m,k) @ (n,k)ᵀ`, the layout used for `(out, in)` weight matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (kb, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != kb {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        let bref = MatRef::new(bv.data(), bv.shape()[0], bv.shape()[1]);
        let bref = if trans_b { bref.t() } else { bref };
        gemm(MatRef::new(av.data(), m, k), bref, &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// 1-D convolution. `x`: `(B, Cin, L)`, `w`: `(Cout, Cin, K)`,
    /// `bias`: `(Cout)`; returns `(B, Cout, Lout)`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ndim() != 3 || wv.ndim() != 3 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::shape("conv1d", xv.shape(), wv.shape()));
        }
        let (b, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        let lout = conv_out_len(len, k, stride, padding)
            .ok_or_else(|| Error::shape("conv1d", xv.shape(), wv.shape()))?;
        if let Some(bias) = bias {
            let bs = self.value(bias).shape();
            if bs != [cout] {
                return Err(Error::shape("conv1d bias", bs, &[cout]));
            }
        }
        let mut out = vec![T::zero(); b * cout * lout];
        for bi in 0..b {
            let cols = im2col(&xv.data()[bi * cin * len..(bi + 1) * cin * len], cin, len, k, stride, padding, lout);
            gemm(
                MatRef::new(wv.data(), cout, cin * k),
                MatRef::new(&cols, cin * k, lout),
                &mut out[bi * cout * lout..(bi + 1) * cout * lout],
                false,
            );
        }
        if let Some(bias) = bias {
            let bd = self.value(bias).data();
            for (i, chunk) in out.chunks_mut(lout).enumerate() {
                let bv = bd[i % cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = Tensor::new(vec![b, cout, lout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `(D)` bias along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = *xv.shape().last().unwrap_or(&1);
        if bv.shape() != [d] {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % d])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.map_unary(x, |v| v * factor, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.map_unary(x, |v| v + c, Op::AddScalar { x })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() || start > end || end > xv.shape()[axis] {
            return Err(Error::shape("slice", xv.shape(), &[axis, start, end]));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut shape = xv.shape().to_vec();
        shape[axis] = end - start;
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * n * inner;
            out.extend_from_slice(&xv.data()[base + start * inner..base + end * inner]);
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(Error::shape("reshape", xv.shape(), shape));
        }
        let out = Tensor::new(shape.to_vec(), xv.data().to_vec())?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// Axis permutation; `perm[i]` names the input axis placed at output axis `i`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut seen = vec![false; xv.ndim()];
        if perm.len() != xv.ndim()
            || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", xv.shape(), perm));
        }
        let (data, shape) = permute_data(xv.data(), xv.shape(), perm);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = T::of(crate::scalar::sum_f64(self.value(x).data().iter().copied()));
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len().max(1) as f64;
        let s = T::of(crate::scalar::sum_f64(xv.data().iter().copied()) / n);
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.exp(), Op::Exp { x })
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.ln(), Op::Log { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid { x })
    }

    /// PReLU with a single learnable slope (shape `[1]`).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let sv = self.value(slope);
        if sv.len() != 1 {
            return Err(Error::shape("prelu", self.value(x).shape(), sv.shape()));
        }
        let a = sv.data()[0];
        Ok(self.map_unary(
            x,
            |v| if v > T::zero() { v } else { a * v },
            Op::Prelu { x, slope },
        ))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::shape("softmax", xv.shape(), &[axis]));
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let mut out = vec![T::zero(); xv.len()];
        let d = xv.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| d[at(j)]).fold(T::neg_infinity(), T::max);
                let z: f64 = (0..n).map(|j| (d[at(j)] - max).to_f64_lossy().exp()).sum();
                let log_z = T::of(z.ln());
                for j in 0..n {
                    let lp = d[at(j)] - max - log_z;
                    out[at(j)] = if log { lp } else { lp.exp() };
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let op = if log {
            Op::LogSoftmax { x, axis }
        } else {
            Op::Softmax { x, axis }
        };
        Ok(self.push(out, op, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    /// Group normalization over `(B, C, L)` with optional per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        eps: f64,
        gamma: Option<Var>,
        beta: Option<Var>,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 3 || groups == 0 || xv.shape()[1] % groups != 0 {
            return Err(Error::shape("group_norm", xv.shape(), &[groups]));
        }
        let (b, c, l) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        for p in gamma.iter().chain(beta.iter()) {
            if self.value(*p).shape() != [c] {
                return Err(Error::shape("group_norm affine", self.value(*p).shape(), &[c]));
            }
        }
        let group_len = c / groups * l;
        let mut normalized = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(b * groups);
        for (gi, chunk) in xv.data().chunks(group_len).enumerate() {
            let (mean, inv) = moments(chunk.iter().copied(), eps);
            inv_std.push(T::of(inv));
            for (j, &v) in chunk.iter().enumerate() {
                normalized[gi * group_len + j] = T::of((v.to_f64_lossy() - mean) * inv);
            }
        }
        let mut out = normalized.clone();
        if gamma.is_some() || beta.is_some() {
            let gd = gamma.map(|g| self.value(g).data().to_vec());
            let bd = beta.map(|g| self.value(g).data().to_vec());
            for (i, chunk) in out.chunks_mut(l).enumerate() {
                let ch = i % c;
                for v in chunk.iter_mut() {
                    if let Some(g) = &gd {
                        *v *= g[ch];
                    }
                    if let Some(bb) = &bd {
                        *v += bb[ch];
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, c, l], out)?;
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        Ok(self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                normalized,
                inv_std,
            },
            &inputs,
        ))
    }

    /// Standardizes each output channel (leading axis) of a weight tensor to
    /// zero mean and unit variance over its fan-in.
    pub fn weight_standardize(&mut self, w: Var, eps: f64) -> Result<Var> {
        let wv = self.value(w);
        if wv.ndim() < 2 || wv.is_empty() {
            return Err(Error::shape("weight_standardize", wv.shape(), &[]));
        }
        let fan_in = wv.len() / wv.shape()[0];
        let mut normalized = Vec::with_capacity(wv.len());
        let mut inv_std = Vec::with_capacity(wv.shape()[0]);
        for chunk in wv.data().chunks(fan_in) {
            let (mean, inv) = moments(chunk.iter().copied(), eps);
            inv_std.push(T::of(inv));
            normalized.extend(chunk.iter().map(|v| T::of((v.to_f64_lossy() - mean) * inv)));
        }
        let out = Tensor::new(wv.shape().to_vec(), normalized.clone())?;
        Ok(self.push(
            out,
            Op::WeightStandardize {
                w,
                normalized,
                inv_std,
            },
            &[w],
        ))
    }

    /// Inverted dropout. Survivors are scaled by `1/(1-rate)`; identity when
    /// `train` is false or `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    /// Euclidean norm of each row of a 2-D tensor; `(R, D) -> (R)`.
    /// The subgradient at a zero row is zero.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 {
            return Err(Error::shape("row_norm", xv.shape(), &[]));
        }
        let (r, d) = (xv.shape()[0], xv.shape()[1]);
        let data = (0..r)
            .map(|i| {
                let s: f64 = xv.data()[i * d..(i + 1) * d]
                    .iter()
                    .map(|v| {
                        let f = v.to_f64_lossy();
                        f * f
                    })
                    .sum();
                T::of(s.sqrt())
            })
            .collect();
        let out = Tensor::new(vec![r], data)?;
        Ok(self.push(out, Op::RowNorm { x }, &[x]))
    }

    /// Picks flat elements of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::shape("gather", xv.shape(), &[bad]));
        }
        let data = indices.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(vec![indices.len()], data)?;
        Ok(self.push(out, Op::Gather { x, indices }, &[x]))
    }

    /// `max(x, min)`; gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, min: T) -> Var {
        self.map_unary(x, |v| v.max(min), Op::ClampMin { x, min })
    }

    /// Records a scalar function of `x` whose value and gradient were
    /// computed outside the tape (e.g. by a dynamic program).
    pub fn scalar_fn(&mut self, x: Var, value: T, grad: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if grad.len() != xv.len() {
            return Err(Error::shape("scalar_fn", xv.shape(), &[grad.len()]));
        }
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { x, grad }, &[x]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", lv.shape(), &[]));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        // Runs `f` on the (zero-initialized) gradient buffer of `v` if it
        // participates in differentiation.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = g.len() / m;
                let bs = shape(*b);
                let bref = MatRef::new(val(*b), bs[0], bs[1]);
                // dA = G @ Bᵀ (B logical (k,n))
                acc(*a, &mut |da| {
                    let bt = if *trans_b { bref } else { bref.t() };
                    gemm(MatRef::new(g, m, n), bt, da, true);
                });
                // dB = Aᵀ @ G, or (Aᵀ @ G)ᵀ = Gᵀ @ A when stored transposed.
                acc(*b, &mut |db| {
                    if *trans_b {
                        gemm(MatRef::new(g, m, n).t(), MatRef::new(val(*a), m, k), db, true);
                    } else {
                        gemm(MatRef::new(val(*a), m, k).t(), MatRef::new(g, m, n), db, true);
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                padding,
            } => {
                let xs = shape(*x);
                let (b, cin, len) = (xs[0], xs[1], xs[2]);
                let ws = shape(*w);
                let (cout, k) = (ws[0], ws[2]);
                let lout = node.value.shape()[2];
                let xd = val(*x);
                let wd = val(*w);
                let x_needs = self.nodes[x.0].requires_grad;
                let w_needs = self.nodes[w.0].requires_grad;
                let mut dw = vec![T::zero(); wd.len()];
                let mut dx = vec![T::zero(); if x_needs { xd.len() } else { 0 }];
                for bi in 0..b {
                    let gb = &g[bi * cout * lout..(bi + 1) * cout * lout];
                    if w_needs {
                        let cols = im2col(&xd[bi * cin * len..(bi + 1) * cin * len], cin, len, k, *stride, *padding, lout);
                        gemm(
                            MatRef::new(gb, cout, lout),
                            MatRef::new(&cols, cin * k, lout).t(),
                            &mut dw,
                            true,
                        );
                    }
                    if x_needs {
                        let mut dcols = vec![T::zero(); cin * k * lout];
                        gemm(
                            MatRef::new(wd, cout, cin * k).t(),
                            MatRef::new(gb, cout, lout),
                            &mut dcols,
                            false,
                        );
                        col2im_acc(&dcols, &mut dx[bi * cin * len..(bi + 1) * cin * len], cin, len, k, *stride, *padding, lout);
                    }
                }
                acc(*x, &mut |buf| buf.iter_mut().zip(&dx).for_each(|(s, v)| *s += *v));
                acc(*w, &mut |buf| buf.iter_mut().zip(&dw).for_each(|(s, v)| *s += *v));
                if let Some(bias) = bias {
                    acc(*bias, &mut |buf| {
                        for (idx, chunk) in g.chunks(lout).enumerate() {
                            let s: f64 = chunk.iter().map(|v| v.to_f64_lossy()).sum();
                            buf[idx % cout] += T::of(s);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(s, v)| *s += *v));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(s, v)| *s += *v));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(s, v)| *s += *v));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(s, v)| *s -= *v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |buf| {
                    for ((s, gv), bv) in buf.iter_mut().zip(g).zip(bd) {
                        *s += *gv * *bv;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((s, gv), av) in buf.iter_mut().zip(g).zip(ad) {
                        *s += *gv * *av;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(s, v)| *s += *v));
                acc(*bias, &mut |buf| {
                    let d = buf.len();
                    let mut tot = vec![0.0f64; d];
                    for (idx, v) in g.iter().enumerate() {
                        tot[idx % d] += v.to_f64_lossy();
                    }
                    buf.iter_mut().zip(tot).for_each(|(s, v)| *s += T::of(v));
                });
            }
            Op::Scale { x, factor } => {
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(s, v)| *s += *v * *factor));
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(s, v)| *s += *v));
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                let total = node.value.shape()[*axis] * inner;
                for &v in inputs {
                    let chunk = shape(v)[*axis] * inner;
                    acc(v, &mut |buf| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            buf[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(s, v)| *s += *v);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(shape(*x), *axis);
                let width = node.value.shape()[*axis] * inner;
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        buf[dst..dst + width]
                            .iter_mut()
                            .zip(&g[o * width..(o + 1) * width])
                            .for_each(|(s, v)| *s += *v);
                    }
                });
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inverse);
                acc(*x, &mut |buf| buf.iter_mut().zip(&back).for_each(|(s, v)| *s += *v));
            }
            Op::Sum { x } => {
                let gv = g[0];
                acc(*x, &mut |buf| buf.iter_mut().for_each(|s| *s += gv));
            }
            Op::Mean { x } => {
                let gv = g[0] / T::of(shape(*x).iter().product::<usize>().max(1) as f64);
                acc(*x, &mut |buf| buf.iter_mut().for_each(|s| *s += gv));
            }
            Op::Exp { x } => {
                acc(*x, &mut |buf| {
                    for ((s, gv), y) in buf.iter_mut().zip(g).zip(out) {
                        *s += *gv * *y;
                    }
                });
            }
            Op::Log { x } => {
                let xd = val(*x);
                acc(*x, &mut |buf| {
                    for ((s, gv), xv) in buf.iter_mut().zip(g).zip(xd) {
                        *s += *gv / *xv;
                    }
                });
            }
            Op::Tanh { x } => {
                acc(*x, &mut |buf| {
                    for ((s, gv), y) in buf.iter_mut().zip(g).zip(out) {
                        *s += *gv * (T::one() - *y * *y);
                    }
                });
            }
            Op::Sigmoid { x } => {
                acc(*x, &mut |buf| {
                    for ((s, gv), y) in buf.iter_mut().zip(g).zip(out) {
                        *s += *gv * *y * (T::one() - *y);
                    }
                });
            }
            Op::Prelu { x, slope } => {
                let xd = val(*x);
                let a = val(*slope)[0];
                acc(*x, &mut |buf| {
                    for ((s, gv), xv) in buf.iter_mut().zip(g).zip(xd) {
                        *s += if *xv > T::zero() { *gv } else { *gv * a };
                    }
                });
                acc(*slope, &mut |buf| {
                    let tot: f64 = g
                        .iter()
                        .zip(xd)
                        .filter(|(_, xv)| **xv <= T::zero())
                        .map(|(gv, xv)| (*gv * *xv).to_f64_lossy())
                        .sum();
                    buf[0] += T::of(tot);
                });
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            if log {
                                // dx = g - softmax * Σg
                                let sg: f64 = (0..n).map(|j| g[at(j)].to_f64_lossy()).sum();
                                for j in 0..n {
                                    let p = out[at(j)].to_f64_lossy().exp();
                                    buf[at(j)] += g[at(j)] - T::of(p * sg);
                                }
                            } else {
                                // dx = y * (g - Σ g·y)
                                let dot: f64 = (0..n)
                                    .map(|j| (g[at(j)] * out[at(j)]).to_f64_lossy())
                                    .sum();
                                for j in 0..n {
                                    buf[at(j)] += out[at(j)] * (g[at(j)] - T::of(dot));
                                }
                            }
                        }
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                normalized,
                inv_std,
            } => {
                let xs = shape(*x);
                let (c, l) = (xs[1], xs[2]);
                let group_len = c / groups * l;
                let gd = gamma.map(|gm| val(gm));
                acc(*x, &mut |buf| {
                    for (gi, inv) in inv_std.iter().enumerate() {
                        let range = gi * group_len..(gi + 1) * group_len;
                        let dy: Vec<f64> = range
                            .clone()
                            .map(|idx| {
                                let scale = gd.map_or(T::one(), |gm| gm[(idx / l) % c]);
                                (g[idx] * scale).to_f64_lossy()
                            })
                            .collect();
                        normalize_backward(&dy, &normalized[range.clone()], inv.to_f64_lossy(), &mut buf[range]);
                    }
                });
                if let Some(gm) = gamma {
                    acc(*gm, &mut |buf| {
                        let mut tot = vec![0.0f64; c];
                        for (idx, (gv, h)) in g.iter().zip(normalized).enumerate() {
                            tot[(idx / l) % c] += (*gv * *h).to_f64_lossy();
                        }
                        buf.iter_mut().zip(tot).for_each(|(s, v)| *s += T::of(v));
                    });
                }
                if let Some(bt) = beta {
                    acc(*bt, &mut |buf| {
                        let mut tot = vec![0.0f64; c];
                        for (idx, gv) in g.iter().enumerate() {
                            tot[(idx / l) % c] += gv.to_f64_lossy();
                        }
                        buf.iter_mut().zip(tot).for_each(|(s, v)| *s += T::of(v));
                    });
                }
            }
            Op::WeightStandardize {
                w,
                normalized,
                inv_std,
            } => {
                let fan_in = normalized.len() / inv_std.len();
                acc(*w, &mut |buf| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let range = r * fan_in..(r + 1) * fan_in;
                        let dy: Vec<f64> = g[range.clone()].iter().map(|v| v.to_f64_lossy()).collect();
                        normalize_backward(&dy, &normalized[range.clone()], inv.to_f64_lossy(), &mut buf[range]);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |buf| {
                    for ((s, gv), m) in buf.iter_mut().zip(g).zip(mask) {
                        *s += *gv * *m;
                    }
                });
            }
            Op::RowNorm { x } => {
                let xd = val(*x);
                let d = shape(*x)[1];
                acc(*x, &mut |buf| {
                    for (r, (gv, norm)) in g.iter().zip(out).enumerate() {
                        if *norm > T::zero() {
                            let f = *gv / *norm;
                            for j in r * d..(r + 1) * d {
                                buf[j] += f * xd[j];
                            }
                        }
                    }
                });
            }
            Op::Gather { x, indices } => {
                acc(*x, &mut |buf| {
                    for (gv, &idx) in g.iter().zip(indices) {
                        buf[idx] += *gv;
                    }
                });
            }
            Op::ClampMin { x, min } => {
                let xd = val(*x);
                acc(*x, &mut |buf| {
                    for ((s, gv), xv) in buf.iter_mut().zip(g).zip(xd) {
                        if *xv >= *min {
                            *s += *gv;
                        }
                    }
                });
            }
            Op::ScalarFn { x, grad } => {
                let gv = g[0];
                acc(*x, &mut |buf| buf.iter_mut().zip(grad).for_each(|(s, v)| *s += gv * *v));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn linear_map_gradient_is_column_sums() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let x = tape.param(t(&[2, 1], &[0.3, -0.7]));
        let y = tape.matmul(a, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[4.0, 6.0]);
    }

    #[test]
    fn prelu_negative_branch() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[-1.0]));
        let a = tape.param(t(&[1], &[0.25]));
        let y = tape.prelu(x, a).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.25]);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(a).data(), &[-1.0]);
        assert_eq!(g.wrt(x).data(), &[0.25]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[4], &[0.0; 4]));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn group_norm_of_constant_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![2, 4, 5], 3.7));
        let y = tape.group_norm(x, 2, 1e-5, None, None).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn weight_standardize_gives_unit_moments_per_output_channel() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::from_fn(vec![3, 2, 4], |i| ((i * 37) % 11) as f64 - 4.0));
        let y = tape.weight_standardize(w, 1e-10).unwrap();
        for row in tape.value(y).data().chunks(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_is_identity_outside_training_and_seeded_inside() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(vec![1000], 1.0));
        assert_eq!(tape.dropout(x, 0.1, false, 3).unwrap(), x);
        let a = tape.dropout(x, 0.1, true, 3).unwrap();
        let b = tape.dropout(x, 0.1, true, 3).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
        let kept = tape.value(a).data().iter().filter(|v| **v > 0.0).count();
        assert!((850..950).contains(&kept));
        for v in tape.value(a).data() {
            assert!(*v == 0.0 || (*v - 1.0 / 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn conv_same_padding_halves_even_lengths() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 16]));
        let w = tape.constant(Tensor::zeros(vec![4, 2, 3]));
        let y = tape.conv1d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 8]);
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 3, 4], |i| i as f64));
        let y = tape.permute(x, &[0, 2, 1]).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 3]);
        assert_eq!(tape.value(y).data()[1], 4.0);
        let z = tape.permute(y, &[0, 2, 1]).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
    }
}
