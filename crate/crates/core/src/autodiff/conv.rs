use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Static geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// `floor((in + 2*pad - k) / stride) + 1`, or `None` when the kernel does not fit.
    pub fn output_dim(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.output_dim(h, self.kernel_h)?, self.output_dim(w, self.kernel_w)?))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

pub(crate) struct ConvNode {
    x: Var,
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeometry,
}

/// Unfolds one `[C, H, W]` image into a `[C*kh*kw, oh*ow]` column matrix.
fn im2col<T: Scalar>(img: &[T], h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, cols: &mut [T]) {
    let pad = g.padding as isize;
    let out_len = oh * ow;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    let line = &mut dst[oi * ow..(oi + 1) * ow];
                    if ii < 0 || ii >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &img[(c * h + ii as usize) * w..(c * h + ii as usize + 1) * w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - pad;
                        *v = if jj < 0 || jj >= w as isize { T::zero() } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into an image gradient.
fn col2im<T: Scalar>(cols: &[T], h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, img: &mut [T]) {
    let pad = g.padding as isize;
    let out_len = oh * ow;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * out_len..(row + 1) * out_len];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = (c * h + ii as usize) * w;
                    for oj in 0..ow {
                        let jj = (oj * g.stride + kj) as isize - pad;
                        if jj >= 0 && jj < w as isize {
                            img[base + jj as usize] = img[base + jj as usize] + src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `x: [B, C, H, W]` with `weight: [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        let ([batch, channels, h, w], [out_c, w_c, kh, kw]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(Error::shape("conv2d", &sx, &sw));
        };
        let (batch, channels, h, w, out_c, kh, kw) = (*batch, *channels, *h, *w, *out_c, *kh, *kw);
        if channels != *w_c {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_c] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[out_c]));
            }
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let geom = ConvGeometry { in_channels: channels, out_channels: out_c, kernel_h: kh, kernel_w: kw, stride, padding };
        let (oh, ow) = geom.output_hw(h, w).ok_or_else(|| {
            Error::invalid("conv2d", format!("kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"))
        })?;

        let out_len = oh * ow;
        let patch = geom.patch_len();
        let mut cols = vec![T::zero(); patch * out_len];
        let mut out = vec![T::zero(); batch * out_c * out_len];
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        for b in 0..batch {
            im2col(&xd[b * channels * h * w..(b + 1) * channels * h * w], h, w, &geom, oh, ow, &mut cols);
            let dst = &mut out[b * out_c * out_len..(b + 1) * out_c * out_len];
            gemm(MatRef::new(wd, out_c, patch), MatRef::new(&cols, patch, out_len), dst, false);
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for (o, plane) in dst.chunks_mut(out_len).enumerate() {
                    plane.iter_mut().for_each(|v| *v = *v + bd[o]);
                }
            }
        }
        let value = Tensor::new(vec![batch, out_c, oh, ow], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        Ok(self.push(value, Op::Conv2d(ConvNode { x, weight, bias, geom }), rg))
    }

    /// Non-overlapping `k x k` max pooling (stride `k`, floor on the output size).
    /// Ties resolve to the first element in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [batch, channels, h, w] = shape.as_slice() else {
            return Err(Error::invalid("max_pool2d", format!("expected [B, C, H, W], got {shape:?}")));
        };
        let (batch, channels, h, w) = (*batch, *channels, *h, *w);
        if k == 0 || h < k || w < k {
            return Err(Error::invalid("max_pool2d", format!("window {k} does not fit {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(batch * channels * oh * ow);
        let mut argmax = Vec::with_capacity(batch * channels * oh * ow);
        for plane in 0..batch * channels {
            let base = plane * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = base + oi * k * w + oj * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let i = base + (oi * k + di) * w + oj * k + dj;
                            if data[i] > data[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![batch, channels, oh, ow], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, rg))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [batch, channels, h, w] = shape.as_slice() else {
            return Err(Error::invalid("global_avg_pool", format!("expected [B, C, H, W], got {shape:?}")));
        };
        let area = h * w;
        let n = T::from_usize(area).expect("area");
        let out = self
            .value(x)
            .data()
            .chunks(area)
            .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) / n)
            .collect();
        let value = Tensor::new(vec![*batch, *channels], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }
}

pub(super) fn conv_backward<T: Scalar>(tape: &Tape<T>, node: &ConvNode, dout: &[T]) -> Vec<(Var, Vec<T>)> {
    let g = node.geom;
    let (batch, h, w) = {
        let s = tape.shape(node.x);
        (s[0], s[2], s[3])
    };
    let (oh, ow) = g.output_hw(h, w).expect("validated in forward");
    let out_len = oh * ow;
    let patch = g.patch_len();
    let img_len = g.in_channels * h * w;
    let xd = tape.value(node.x).data();
    let wd = tape.value(node.weight).data();
    let need_x = tape.requires_grad(node.x);
    let need_w = tape.requires_grad(node.weight);

    let mut dx = need_x.then(|| vec![T::zero(); batch * img_len]);
    let mut dw = need_w.then(|| vec![T::zero(); g.out_channels * patch]);
    let mut cols = vec![T::zero(); patch * out_len];
    let mut dcols = vec![T::zero(); patch * out_len];
    for b in 0..batch {
        let dy = &dout[b * g.out_channels * out_len..(b + 1) * g.out_channels * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(&xd[b * img_len..(b + 1) * img_len], h, w, &g, oh, ow, &mut cols);
            gemm(MatRef::new(dy, g.out_channels, out_len), MatRef::transposed(&cols, out_len, patch), dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(MatRef::transposed(wd, patch, g.out_channels), MatRef::new(dy, g.out_channels, out_len), &mut dcols, false);
            col2im(&dcols, h, w, &g, oh, ow, &mut dx[b * img_len..(b + 1) * img_len]);
        }
    }

    let mut grads = Vec::new();
    if let Some(dx) = dx {
        grads.push((node.x, dx));
    }
    if let Some(dw) = dw {
        grads.push((node.weight, dw));
    }
    if let Some(bias) = node.bias {
        let mut db = vec![T::zero(); g.out_channels];
        for (i, plane) in dout.chunks(out_len).enumerate() {
            let o = i % g.out_channels;
            db[o] = plane.iter().fold(db[o], |a, &v| a + v);
        }
        grads.push((bias, db));
    }
    grads
}

pub(super) fn max_pool_backward<T: Scalar>(tape: &Tape<T>, x: Var, argmax: &[usize], dout: &[T]) -> Vec<(Var, Vec<T>)> {
    let mut dx = vec![T::zero(); tape.value(x).numel()];
    for (&src, &d) in argmax.iter().zip(dout) {
        dx[src] = dx[src] + d;
    }
    vec![(x, dx)]
}

pub(super) fn global_avg_pool_backward<T: Scalar>(tape: &Tape<T>, x: Var, dout: &[T]) -> Vec<(Var, Vec<T>)> {
    let s = tape.shape(x);
    let area = s[2] * s[3];
    let n = T::from_usize(area).expect("area");
    let mut dx = Vec::with_capacity(tape.value(x).numel());
    for &d in dout {
        let share = d / n;
        dx.extend(std::iter::repeat_n(share, area));
    }
    vec![(x, dx)]
}
