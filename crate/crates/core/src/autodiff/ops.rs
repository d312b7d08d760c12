use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

impl<T: Scalar> Tape<T> {
    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= T::zero() || v.is_nan()) {
            return Err(Error::Domain { op: "log", detail: format!("input {bad} is not positive") });
        }
        Ok(self.map(x, |v| v.ln(), Op::Log(x)))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.map(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ((m, k), (k2, n)) = match (as_matrix(sa), as_matrix(sb)) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        debug_assert_eq!(k, k2);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    /// `x * weight^T + bias` with `x: [B, in]`, `weight: [out, in]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(weight));
        let ((batch, in_dim), (out_dim, w_in)) = match (as_matrix(sx), as_matrix(sw)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape("linear", sx, sw)),
        };
        if in_dim != w_in {
            return Err(Error::shape("linear", sx, sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_dim] {
                return Err(Error::shape("linear bias", self.shape(b), &[out_dim]));
            }
        }
        let mut out = vec![T::zero(); batch * out_dim];
        gemm(
            MatRef::new(self.value(x).data(), batch, in_dim),
            MatRef::transposed(self.value(weight).data(), in_dim, out_dim),
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bias_data = self.value(b).data();
            for row in out.chunks_mut(out_dim) {
                row.iter_mut().zip(bias_data).for_each(|(o, &b)| *o = *o + b);
            }
        }
        let value = Tensor::new(vec![batch, out_dim], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        Ok(self.push(value, Op::Linear { x, weight, bias }, rg))
    }

    /// First `count` channels of a `[B, C]` tensor.
    pub fn slice_channels(&mut self, x: Var, count: usize) -> Result<Var> {
        let (batch, channels) = as_matrix(self.shape(x))
            .ok_or_else(|| Error::invalid("slice_channels", format!("expected [B, C], got {:?}", self.shape(x))))?;
        if count == 0 || count > channels {
            return Err(Error::range(
                "slice_channels",
                format!("prefix width {count} not in 1..={channels}"),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(batch * count);
        for row in src.chunks(channels) {
            out.extend_from_slice(&row[..count]);
        }
        let value = Tensor::new(vec![batch, count], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceChannels { x, count }, rg))
    }

    /// Sum or mean over one axis, or over everything when `axis` is `None`.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.value(x).data();
        let value = match axis {
            None => {
                let total = data.iter().fold(T::zero(), |acc, &v| acc + v);
                let v = match kind {
                    ReduceKind::Sum => total,
                    ReduceKind::Mean => total / T::from_usize(data.len()).expect("len"),
                };
                Tensor::scalar(v)
            }
            Some(axis) => {
                if axis >= shape.len() {
                    return Err(Error::range("reduce", format!("axis {axis} for shape {shape:?}")));
                }
                let (outer, len, inner) = split_axis(&shape, axis);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                    }
                }
                if kind == ReduceKind::Mean {
                    let n = T::from_usize(len).expect("len");
                    out.iter_mut().for_each(|v| *v = *v / n);
                }
                let mut out_shape: Vec<usize> =
                    shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
                if out_shape.is_empty() {
                    out_shape.push(1);
                }
                Tensor::new(out_shape, out)?
            }
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reduce { x, kind, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(ReduceKind::Sum, x, None).expect("full reduction")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(ReduceKind::Mean, x, None).expect("full reduction")
    }

    /// Elementwise mean of same-shaped values: summed left to right, then divided by the count.
    pub fn mean_of(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::invalid("mean_of", "no inputs"))?;
        for &v in rest {
            self.binary_same_shape("mean_of", first, v)?;
        }
        let mut acc = self.value(first).data().to_vec();
        for &v in rest {
            acc.iter_mut().zip(self.value(v).data()).for_each(|(a, &b)| *a = *a + b);
        }
        let n = T::from_usize(vars.len()).expect("len");
        acc.iter_mut().for_each(|a| *a = *a / n);
        let value = Tensor::new(self.shape(first).to_vec(), acc)?;
        let rg = self.any_grad(vars);
        Ok(self.push(value, Op::MeanOf(vars.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (batch, classes) = as_matrix(self.shape(logits))
            .ok_or_else(|| Error::invalid("cross_entropy", format!("expected [B, K], got {:?}", self.shape(logits))))?;
        if labels.len() != batch {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::range("cross_entropy", format!("label {bad} not in 0..{classes}")));
        }
        let data = self.value(logits).data();
        let mut probs = vec![T::zero(); batch * classes];
        let mut total = T::zero();
        for (b, (row, prow)) in data.chunks(classes).zip(probs.chunks_mut(classes)).enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut denom = T::zero();
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - max).exp();
                denom = denom + *p;
            }
            prow.iter_mut().for_each(|p| *p = *p / denom);
            total = total + (denom.ln() - (row[labels[b]] - max));
        }
        let value = Tensor::scalar(total / T::from_usize(batch).expect("batch"));
        let rg = self.any_grad(&[logits]);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }
}

fn scaled<T>(dout: &[T], factor: impl Fn(usize) -> T) -> Vec<T>
where
    T: Scalar,
{
    dout.iter().enumerate().map(|(i, &d)| d * factor(i)).collect()
}

pub(super) fn backward<T: Scalar>(tape: &Tape<T>, op: &Op<T>, out: &Tensor<T>, dout: &[T]) -> Vec<(Var, Vec<T>)> {
    let val = |v: Var| tape.value(v).data();
    match op {
        Op::Add(a, b) => vec![(*a, dout.to_vec()), (*b, dout.to_vec())],
        Op::Sub(a, b) => vec![(*a, dout.to_vec()), (*b, dout.iter().map(|&d| -d).collect())],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            vec![(*a, scaled(dout, |i| vb[i])), (*b, scaled(dout, |i| va[i]))]
        }
        Op::Relu(x) => {
            let vx = val(*x);
            vec![(*x, scaled(dout, |i| if vx[i] > T::zero() { T::one() } else { T::zero() }))]
        }
        Op::Exp(x) => vec![(*x, scaled(dout, |i| out.data()[i]))],
        Op::Log(x) => {
            let vx = val(*x);
            vec![(*x, dout.iter().zip(vx).map(|(&d, &v)| d / v).collect())]
        }
        Op::Abs(x) => {
            let vx = val(*x);
            vec![(*x, scaled(dout, |i| if vx[i] > T::zero() {
                T::one()
            } else if vx[i] < T::zero() {
                -T::one()
            } else {
                T::zero()
            }))]
        }
        Op::Scale(x, factor) => vec![(*x, scaled(dout, |_| *factor))],
        Op::MatMul { a, b } => {
            let (m, k) = as_matrix(tape.shape(*a)).expect("matrix");
            let n = tape.shape(*b)[1];
            let mut grads = Vec::new();
            if tape.requires_grad(*a) {
                let mut da = vec![T::zero(); m * k];
                gemm(MatRef::new(dout, m, n), MatRef::transposed(val(*b), n, k), &mut da, false);
                grads.push((*a, da));
            }
            if tape.requires_grad(*b) {
                let mut db = vec![T::zero(); k * n];
                gemm(MatRef::transposed(val(*a), k, m), MatRef::new(dout, m, n), &mut db, false);
                grads.push((*b, db));
            }
            grads
        }
        Op::Linear { x, weight, bias } => {
            let (batch, in_dim) = as_matrix(tape.shape(*x)).expect("matrix");
            let out_dim = tape.shape(*weight)[0];
            let mut grads = Vec::new();
            if tape.requires_grad(*x) {
                let mut dx = vec![T::zero(); batch * in_dim];
                gemm(MatRef::new(dout, batch, out_dim), MatRef::new(val(*weight), out_dim, in_dim), &mut dx, false);
                grads.push((*x, dx));
            }
            if tape.requires_grad(*weight) {
                let mut dw = vec![T::zero(); out_dim * in_dim];
                gemm(MatRef::transposed(dout, out_dim, batch), MatRef::new(val(*x), batch, in_dim), &mut dw, false);
                grads.push((*weight, dw));
            }
            if let Some(b) = bias {
                let mut db = vec![T::zero(); out_dim];
                for row in dout.chunks(out_dim) {
                    db.iter_mut().zip(row).for_each(|(g, &d)| *g = *g + d);
                }
                grads.push((*b, db));
            }
            grads
        }
        Op::SliceChannels { x, count } => {
            let channels = tape.shape(*x)[1];
            let mut dx = vec![T::zero(); tape.value(*x).numel()];
            for (dst, src) in dx.chunks_mut(channels).zip(dout.chunks(*count)) {
                dst[..*count].copy_from_slice(src);
            }
            vec![(*x, dx)]
        }
        Op::Reduce { x, kind, axis } => {
            let shape = tape.shape(*x);
            let numel = tape.value(*x).numel();
            let dx = match axis {
                None => {
                    let g = match kind {
                        ReduceKind::Sum => dout[0],
                        ReduceKind::Mean => dout[0] / T::from_usize(numel).expect("len"),
                    };
                    vec![g; numel]
                }
                Some(axis) => {
                    let (outer, len, inner) = split_axis(shape, *axis);
                    let n = T::from_usize(len).expect("len");
                    let mut dx = vec![T::zero(); numel];
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut dx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            let src = &dout[o * inner..(o + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = match kind {
                                    ReduceKind::Sum => s,
                                    ReduceKind::Mean => s / n,
                                };
                            }
                        }
                    }
                    dx
                }
            };
            vec![(*x, dx)]
        }
        Op::MeanOf(vars) => {
            let n = T::from_usize(vars.len()).expect("len");
            let share: Vec<T> = dout.iter().map(|&d| d / n).collect();
            vars.iter().map(|&v| (v, share.clone())).collect()
        }
        Op::Reshape(x) => vec![(*x, dout.to_vec())],
        Op::CrossEntropy { logits, labels, probs } => {
            let classes = tape.shape(*logits)[1];
            let scale = dout[0] / T::from_usize(labels.len()).expect("batch");
            let mut dl = probs.clone();
            for (b, row) in dl.chunks_mut(classes).enumerate() {
                row[labels[b]] = row[labels[b]] - T::one();
                row.iter_mut().for_each(|v| *v = *v * scale);
            }
            vec![(*logits, dl)]
        }
        Op::Leaf
        | Op::Custom { .. }
        | Op::BatchNorm(_)
        | Op::Conv2d(_)
        | Op::MaxPool2d { .. }
        | Op::GlobalAvgPool(_) => unreachable!("handled by the tape dispatcher"),
    }
}
