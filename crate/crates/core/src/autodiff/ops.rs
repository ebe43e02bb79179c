use super::conv::{self, Conv1dGeom, Conv2dGeom};
use super::{accumulate, Op, Tape, Unary, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides, Tensor};

const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

/// Padding for pooling windows along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolPad {
    pub left: usize,
    pub right: usize,
}

impl PoolPad {
    pub const NONE: PoolPad = PoolPad { left: 0, right: 0 };

    /// Keeps the length for stride 1.
    pub fn same(kernel: usize) -> Self {
        PoolPad {
            left: (kernel - 1) / 2,
            right: kernel / 2,
        }
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

fn sinc_deriv(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        -x / 3.0 + x * x * x / 30.0
    } else {
        (x * x.cos() - x.sin()) / (x * x)
    }
}

fn unary_name(u: Unary) -> &'static str {
    match u {
        Unary::Neg => "neg",
        Unary::Exp => "exp",
        Unary::Ln => "ln",
        Unary::Sin => "sin",
        Unary::Cos => "cos",
        Unary::Abs => "abs",
        Unary::Sqrt => "sqrt",
        Unary::Sigmoid => "sigmoid",
        Unary::Tanh => "tanh",
        Unary::Selu => "selu",
        Unary::LeakyRelu(_) => "leaky_relu",
        Unary::Sinc => "sinc",
    }
}

fn apply_unary(u: Unary, x: f64) -> f64 {
    match u {
        Unary::Neg => -x,
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Sin => x.sin(),
        Unary::Cos => x.cos(),
        Unary::Abs => x.abs(),
        Unary::Sqrt => x.sqrt(),
        Unary::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        Unary::Tanh => x.tanh(),
        Unary::Selu => {
            if x > 0.0 {
                SELU_LAMBDA * x
            } else {
                SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
            }
        }
        Unary::LeakyRelu(slope) => {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        }
        Unary::Sinc => sinc(x),
    }
}

/// d(unary)/dx given the input and the output value.
fn unary_deriv(u: Unary, x: f64, y: f64) -> f64 {
    match u {
        Unary::Neg => -1.0,
        Unary::Exp => y,
        Unary::Ln => 1.0 / x,
        Unary::Sin => x.cos(),
        Unary::Cos => -x.sin(),
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Sqrt => 0.5 / y,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Selu => {
            if x > 0.0 {
                SELU_LAMBDA
            } else {
                y + SELU_LAMBDA * SELU_ALPHA
            }
        }
        Unary::LeakyRelu(slope) => {
            if x > 0.0 {
                1.0
            } else {
                slope
            }
        }
        Unary::Sinc => sinc_deriv(x),
    }
}

/// For every destination element, the flat source index under broadcasting.
fn broadcast_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let src_strides = strides(src);
    let n: usize = dst.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; dst.len()];
    for _ in 0..n {
        let mut flat = 0;
        for d in 0..dst.len() {
            if src[d] != 1 {
                flat += idx[d] * src_strides[d];
            }
        }
        map.push(flat);
        for d in (0..dst.len()).rev() {
            idx[d] += 1;
            if idx[d] < dst[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// For every output element of a permutation, the flat input index.
fn permute_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let flat: usize = idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum();
        map.push(flat);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (map, out_shape)
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(d, _)| d != axis)
        .map(|(_, &e)| e)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl Tape {
    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::arg(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(op, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(op, out, node, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise `a^b` for positive bases (a zero base is allowed and
    /// contributes no gradient to the exponent).
    pub fn pow(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v < 0.0) {
            return Err(Error::arg("pow: negative base"));
        }
        self.binary("pow", a, b, f64::powf, Op::Pow(a, b))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v.powf(p));
        self.push("powf", out, Op::PowScalar(a, p), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    fn unary(&mut self, a: Var, u: Unary) -> Result<Var> {
        let out = self.value(a).map(|v| apply_unary(u, v));
        self.push(unary_name(u), out, Op::Unary(a, u), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Neg)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Ln)
    }
    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sin)
    }
    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Cos)
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Abs)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }
    pub fn selu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Selu)
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(a, Unary::LeakyRelu(slope))
    }
    /// `sin(x)/x`, equal to 1 at the origin.
    pub fn sinc(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sinc)
    }

    /// Numpy-style expansion of size-1 axes; ranks must match.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if src.len() != shape.len()
            || src.iter().zip(shape).any(|(&s, &d)| s != d && s != 1)
            || shape.contains(&0)
        {
            return Err(Error::shape("broadcast_to", &src, shape));
        }
        if src == shape {
            return Ok(a);
        }
        let map = broadcast_map(&src, shape);
        let v = self.value(a).data();
        let data = map.iter().map(|&i| v[i]).collect();
        self.push(
            "broadcast_to",
            Tensor::from_parts(shape.to_vec(), data),
            Op::BroadcastTo(a),
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(Error::arg(format!(
                "permute: invalid axes {axes:?} for shape {shape:?}"
            )));
        }
        let (map, out_shape) = permute_map(&shape, axes);
        let v = self.value(a).data();
        let data = map.iter().map(|&i| v[i]).collect();
        self.push(
            "permute",
            Tensor::from_parts(out_shape, data),
            Op::Permute(a, axes.to_vec()),
            &[a],
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", a, axis)?;
        let shape = self.shape(a).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::arg(format!(
                "narrow: [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let v = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(
            "narrow",
            Tensor::from_parts(out_shape, data),
            Op::Narrow { x: a, axis, start },
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let v = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &v[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &x) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += x;
                }
            }
        }
        let out = Tensor::from_parts(reduced_shape(&shape, axis), data);
        self.push("sum_axis", out, Op::SumAxis { x: a, axis }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", a, axis)?;
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n)
    }

    /// Max over `axis`; ties resolve to the first occurrence.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_axis", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let v = self.value(a).data();
        let mut data = Vec::with_capacity(outer * inner);
        let mut src = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for k in 1..n {
                    let j = (o * n + k) * inner + i;
                    if v[j] > v[best] {
                        best = j;
                    }
                }
                data.push(v[best]);
                src.push(best);
            }
        }
        let out = Tensor::from_parts(reduced_shape(&shape, axis), data);
        self.push("max_axis", out, Op::Select { x: a, src }, &[a])
    }

    /// Sliding-window max along `axis`; padded positions never win.
    pub fn max_pool(
        &mut self,
        a: Var,
        axis: usize,
        kernel: usize,
        stride: usize,
        pad: PoolPad,
    ) -> Result<Var> {
        self.check_axis("max_pool", a, axis)?;
        let shape = self.shape(a).to_vec();
        let len = shape[axis];
        if kernel == 0
            || stride == 0
            || kernel > pad.left + 1 + len.saturating_sub(1) + pad.right
            || pad.left >= kernel
            || pad.right >= kernel
        {
            return Err(Error::arg(format!(
                "max_pool: kernel {kernel}, stride {stride}, pad {pad:?} invalid for length {len}"
            )));
        }
        let out_len = (len + pad.left + pad.right - kernel) / stride + 1;
        let (outer, _, inner) = split_axis(&shape, axis);
        let v = self.value(a).data();
        let mut data = Vec::with_capacity(outer * out_len * inner);
        let mut src = Vec::with_capacity(outer * out_len * inner);
        for o in 0..outer {
            for j in 0..out_len {
                let lo = (j * stride).saturating_sub(pad.left);
                let hi = (j * stride + kernel).saturating_sub(pad.left).min(len);
                for i in 0..inner {
                    let mut best = (o * len + lo) * inner + i;
                    for k in lo + 1..hi {
                        let idx = (o * len + k) * inner + i;
                        if v[idx] > v[best] {
                            best = idx;
                        }
                    }
                    data.push(v[best]);
                    src.push(best);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = out_len;
        self.push(
            "max_pool",
            Tensor::from_parts(out_shape, data),
            Op::Select { x: a, src },
            &[a],
        )
    }

    /// `(M,K)x(K,N)` or batched `(B,M,K)x(B,K,N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if k == k2 && b1 == b2 => (*b1, *m, *k, *n),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let mut data = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            matmul_into(
                &va[bi * m * k..(bi + 1) * m * k],
                &vb[bi * k * n..(bi + 1) * k * n],
                &mut data[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out_shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        self.push(
            "matmul",
            Tensor::from_parts(out_shape, data),
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
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
        self.push(
            "softmax",
            Tensor::from_parts(shape, data),
            Op::Softmax(a),
            &[a],
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(
            "log_softmax",
            Tensor::from_parts(shape, data),
            Op::LogSoftmax(a),
            &[a],
        )
    }

    /// Batch normalization over axis 1 of `x` (every other axis is reduced).
    ///
    /// In training mode the batch statistics are used and returned as
    /// `(mean, unbiased variance)` so the caller can update running averages.
    /// Otherwise `running` supplies the statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::arg(format!(
                "batch_norm: need at least 2 axes, got {shape:?}"
            )));
        }
        let c = shape[1];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", &shape, self.shape(p)));
            }
        }
        let (outer, _, inner) = split_axis(&shape, 1);
        let count = (outer * inner) as f64;
        let v = self.value(x).data();
        let train = running.is_none();
        let (mean, var_biased, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape("batch_norm", &[c], &[rm.len()]));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                if count < 2.0 {
                    return Err(Error::arg(
                        "batch_norm: training mode needs more than one value per channel",
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let row = &v[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                        mean[ch] += row.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for o in 0..outer {
                    for ch in 0..c {
                        let row = &v[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                        var[ch] += row.iter().map(|&x| (x - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                let biased: Vec<f64> = var.iter().map(|s| s / count).collect();
                let unbiased: Vec<f64> = var.iter().map(|s| s / (count - 1.0)).collect();
                (mean.clone(), biased, Some((mean, unbiased)))
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; v.len()];
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for ch in 0..c {
                let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                for ((xh, y), &xv) in xhat[r.clone()]
                    .iter_mut()
                    .zip(&mut out[r.clone()])
                    .zip(&v[r])
                {
                    *xh = (xv - mean[ch]) * inv_std[ch];
                    *y = g[ch] * *xh + b[ch];
                }
            }
        }
        let node = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        let y = self.push(
            "batch_norm",
            Tensor::from_parts(shape, out),
            node,
            &[x, gamma, beta],
        )?;
        Ok((y, stats))
    }

    /// Selects node rows per batch item: `x` is `(B, N, F)`, `idx[b]` lists
    /// `k` node indices for item `b`; the result is `(B, k, F)`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [b, n, f] = shape[..] else {
            return Err(Error::arg(format!(
                "gather_rows: expected (B, N, F), got {shape:?}"
            )));
        };
        let k = idx.first().map_or(0, Vec::len);
        if idx.len() != b
            || k == 0
            || idx
                .iter()
                .any(|r| r.len() != k || r.iter().any(|&i| i >= n))
        {
            return Err(Error::arg(
                "gather_rows: index lists must be non-empty, equal length, and in range",
            ));
        }
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(b * k * f);
        for (bi, rows) in idx.iter().enumerate() {
            for &r in rows {
                let base = (bi * n + r) * f;
                data.extend_from_slice(&v[base..base + f]);
            }
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![b, k, f], data),
            Op::Gather { x, idx },
            &[x],
        )
    }

    /// Exponential moving average along the last axis:
    /// `m[0] = x[0]`, `m[t] = (1 - s) m[t-1] + s x[t]`.
    pub fn ema(&mut self, x: Var, s: f64) -> Result<Var> {
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::arg(format!("ema: smoothing {s} outside (0, 1]")));
        }
        let shape = self.shape(x).to_vec();
        let t = *shape.last().unwrap();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(t) {
            for i in 1..t {
                row[i] = (1.0 - s) * row[i - 1] + s * row[i];
            }
        }
        self.push(
            "ema",
            Tensor::from_parts(shape, data),
            Op::Ema { x, s },
            &[x],
        )
    }

    /// 1-D convolution (cross-correlation) over `(B, C_in, L)` with weights
    /// `(C_out, C_in / groups, K)` and optional bias `(C_out)`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: (usize, usize),
        groups: usize,
    ) -> Result<Var> {
        let geom = Conv1dGeom::infer(
            self.shape(x),
            self.shape(w),
            b.map(|b| self.shape(b)),
            stride,
            pad,
            groups,
        )?;
        let bias = b.map(|b| self.value(b).data());
        let out = conv::conv1d_forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let t = Tensor::from_parts(vec![geom.batch, geom.c_out, geom.l_out], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv1d", t, Op::Conv1d { x, w, b, geom }, &inputs)
    }

    /// 2-D convolution over `(B, C_in, H, W)` with weights `(C_out, C_in, KH, KW)`,
    /// stride 1 and symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: (usize, usize)) -> Result<Var> {
        let geom = Conv2dGeom::infer(self.shape(x), self.shape(w), b.map(|b| self.shape(b)), pad)?;
        let bias = b.map(|b| self.value(b).data());
        let out = conv::conv2d_forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let t = Tensor::from_parts(vec![geom.batch, geom.c_out, geom.h_out, geom.w_out], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom }, &inputs)
    }
}

/// `c += a(m,k) * b(k,n)`, row-major.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a^T * b` with `a: (k, m)`, `b: (k, n)`.
fn matmul_at_b(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            for (cv, &bv) in c[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a * b^T` with `a: (m, k)`, `b: (n, k)`.
fn matmul_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let (x, y) = (&a[c * 4..c * 4 + 4], &b[c * 4..c * 4 + 4]);
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub(super) fn backward_node(
    tape: &Tape,
    i: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) -> Result<()> {
    let node = &tape.nodes[i];
    let val = |v: Var| tape.value(v).data();
    let ng = |v: Var| tape.needs_grad(v);
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if ng(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if ng(*b) {
                accumulate(grads, *b, g.to_vec());
            }
        }
        Op::Sub(a, b) => {
            if ng(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if ng(*b) {
                accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if ng(*a) {
                accumulate(grads, *a, g.iter().zip(vb).map(|(g, b)| g * b).collect());
            }
            if ng(*b) {
                accumulate(grads, *b, g.iter().zip(va).map(|(g, a)| g * a).collect());
            }
        }
        Op::Div(a, b) => {
            let vb = val(*b);
            if ng(*a) {
                accumulate(grads, *a, g.iter().zip(vb).map(|(g, b)| g / b).collect());
            }
            if ng(*b) {
                // d(a/b)/db = -y / b
                let contrib = g
                    .iter()
                    .zip(y)
                    .zip(vb)
                    .map(|((g, y), b)| -g * y / b)
                    .collect();
                accumulate(grads, *b, contrib);
            }
        }
        Op::Pow(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if ng(*a) {
                let contrib = g
                    .iter()
                    .zip(va)
                    .zip(vb)
                    .map(|((g, &a), &b)| {
                        if b == 0.0 {
                            0.0
                        } else {
                            g * b * a.powf(b - 1.0)
                        }
                    })
                    .collect();
                accumulate(grads, *a, contrib);
            }
            if ng(*b) {
                let contrib = g
                    .iter()
                    .zip(va)
                    .zip(y)
                    .map(|((g, &a), &y)| if a == 0.0 { 0.0 } else { g * y * a.ln() })
                    .collect();
                accumulate(grads, *b, contrib);
            }
        }
        Op::PowScalar(a, p) => {
            let contrib = g
                .iter()
                .zip(val(*a))
                .map(|(g, &x)| {
                    if *p == 0.0 {
                        0.0
                    } else {
                        g * p * x.powf(p - 1.0)
                    }
                })
                .collect();
            accumulate(grads, *a, contrib);
        }
        Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(a) => accumulate(grads, *a, g.to_vec()),
        Op::Unary(a, u) => {
            let contrib = g
                .iter()
                .zip(val(*a))
                .zip(y)
                .map(|((g, &x), &y)| g * unary_deriv(*u, x, y))
                .collect();
            accumulate(grads, *a, contrib);
        }
        Op::BroadcastTo(a) => {
            let src = tape.shape(*a);
            let map = broadcast_map(src, node.value.shape());
            let mut acc = vec![0.0; tape.value(*a).numel()];
            for (gv, &j) in g.iter().zip(&map) {
                acc[j] += gv;
            }
            accumulate(grads, *a, acc);
        }
        Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
        Op::Permute(a, axes) => {
            let (map, _) = permute_map(tape.shape(*a), axes);
            let mut acc = vec![0.0; g.len()];
            for (gv, &j) in g.iter().zip(&map) {
                acc[j] = *gv;
            }
            accumulate(grads, *a, acc);
        }
        Op::Narrow { x, axis, start } => {
            let shape = tape.shape(*x);
            let (outer, n, inner) = split_axis(shape, *axis);
            let len = node.value.shape()[*axis];
            let mut acc = vec![0.0; tape.value(*x).numel()];
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                acc[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, *x, acc);
        }
        Op::Sum(a) => accumulate(grads, *a, vec![g[0]; tape.value(*a).numel()]),
        Op::SumAxis { x, axis } => {
            let (outer, n, inner) = split_axis(tape.shape(*x), *axis);
            let mut acc = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    acc[(o * n + k) * inner..(o * n + k + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(grads, *x, acc);
        }
        Op::Select { x, src } => {
            let mut acc = vec![0.0; tape.value(*x).numel()];
            for (gv, &j) in g.iter().zip(src) {
                acc[j] += gv;
            }
            accumulate(grads, *x, acc);
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (tape.shape(*a), tape.shape(*b));
            let (batch, m, k, n) = if sa.len() == 2 {
                (1, sa[0], sa[1], sb[1])
            } else {
                (sa[0], sa[1], sa[2], sb[2])
            };
            let (va, vb) = (val(*a), val(*b));
            if ng(*a) {
                let mut ga = vec![0.0; batch * m * k];
                for bi in 0..batch {
                    matmul_a_bt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &vb[bi * k * n..(bi + 1) * k * n],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                accumulate(grads, *a, ga);
            }
            if ng(*b) {
                let mut gb = vec![0.0; batch * k * n];
                for bi in 0..batch {
                    matmul_at_b(
                        &va[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Conv1d { x, w, b, geom } => {
            let (vx, vw) = (val(*x), val(*w));
            if ng(*x) {
                accumulate(grads, *x, conv::conv1d_grad_input(g, vw, geom));
            }
            if ng(*w) {
                accumulate(grads, *w, conv::conv1d_grad_weight(g, vx, geom));
            }
            if let Some(b) = b {
                if ng(*b) {
                    accumulate(
                        grads,
                        *b,
                        conv::bias_grad(g, geom.batch, geom.c_out, geom.l_out),
                    );
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (vx, vw) = (val(*x), val(*w));
            if ng(*x) {
                accumulate(grads, *x, conv::conv2d_grad_input(g, vw, geom));
            }
            if ng(*w) {
                accumulate(grads, *w, conv::conv2d_grad_weight(g, vx, geom));
            }
            if let Some(b) = b {
                if ng(*b) {
                    accumulate(
                        grads,
                        *b,
                        conv::bias_grad(g, geom.batch, geom.c_out, geom.h_out * geom.w_out),
                    );
                }
            }
        }
        Op::Softmax(a) => {
            let n = *node.value.shape().last().unwrap();
            let mut acc = vec![0.0; g.len()];
            for ((gr, yr), ar) in g.chunks(n).zip(y.chunks(n)).zip(acc.chunks_mut(n)) {
                let s: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((a, g), y) in ar.iter_mut().zip(gr).zip(yr) {
                    *a = y * (g - s);
                }
            }
            accumulate(grads, *a, acc);
        }
        Op::LogSoftmax(a) => {
            let n = *node.value.shape().last().unwrap();
            let mut acc = vec![0.0; g.len()];
            for ((gr, yr), ar) in g.chunks(n).zip(y.chunks(n)).zip(acc.chunks_mut(n)) {
                let s: f64 = gr.iter().sum();
                for ((a, g), y) in ar.iter_mut().zip(gr).zip(yr) {
                    *a = g - y.exp() * s;
                }
            }
            accumulate(grads, *a, acc);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let shape = tape.shape(*x);
            let c = shape[1];
            let (outer, _, inner) = split_axis(shape, 1);
            let count = (outer * inner) as f64;
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for o in 0..outer {
                for ch in 0..c {
                    let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                    sum_g[ch] += g[r.clone()].iter().sum::<f64>();
                    sum_gx[ch] += dot(&g[r.clone()], &xhat[r]);
                }
            }
            if ng(*gamma) {
                accumulate(grads, *gamma, sum_gx.clone());
            }
            if ng(*beta) {
                accumulate(grads, *beta, sum_g.clone());
            }
            if ng(*x) {
                let gm = val(*gamma);
                let mut acc = vec![0.0; g.len()];
                for o in 0..outer {
                    for ch in 0..c {
                        let r = (o * c + ch) * inner..(o * c + ch + 1) * inner;
                        let k = gm[ch] * inv_std[ch];
                        for ((a, &gv), &xh) in
                            acc[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r])
                        {
                            *a = if *train {
                                k * (gv - sum_g[ch] / count - xh * sum_gx[ch] / count)
                            } else {
                                k * gv
                            };
                        }
                    }
                }
                accumulate(grads, *x, acc);
            }
        }
        Op::Gather { x, idx } => {
            let shape = tape.shape(*x);
            let (n, f) = (shape[1], shape[2]);
            let k = idx[0].len();
            let mut acc = vec![0.0; tape.value(*x).numel()];
            for (bi, rows) in idx.iter().enumerate() {
                for (j, &r) in rows.iter().enumerate() {
                    let src = &g[(bi * k + j) * f..(bi * k + j + 1) * f];
                    for (a, gv) in acc[(bi * n + r) * f..(bi * n + r + 1) * f]
                        .iter_mut()
                        .zip(src)
                    {
                        *a += gv;
                    }
                }
            }
            accumulate(grads, *x, acc);
        }
        Op::Ema { x, s } => {
            let t = *node.value.shape().last().unwrap();
            let mut acc = vec![0.0; g.len()];
            for (gr, ar) in g.chunks(t).zip(acc.chunks_mut(t)) {
                let mut carry = 0.0;
                for i in (0..t).rev() {
                    carry = gr[i] + (1.0 - s) * carry;
                    ar[i] = if i == 0 { carry } else { s * carry };
                }
            }
            accumulate(grads, *x, acc);
        }
    }
    Ok(())
}
