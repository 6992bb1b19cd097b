//! Stride-1 2D cross-correlation lowered to a matrix product via im2col.

use super::tensor::{Param, Real, Tensor};
use crate::error::{Error, Result};

/// Intermediates kept from a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: [usize; 3],
    out_hw: (usize, usize),
    kernel: (usize, usize),
    padding: (usize, usize),
    weights: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn dims3(t: &Tensor<impl Real>, op: &'static str) -> Result<[usize; 3]> {
    match *t.shape() {
        [a, b, c] => Ok([a, b, c]),
        ref s => Err(Error::shape(op, format!("expected rank 3, got {s:?}"))),
    }
}

fn im2col<T: Real>(
    x: &[T],
    [c_in, h, w]: [usize; 3],
    (kh, kw): (usize, usize),
    (ph, pw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let p = oh * ow;
    let mut cols = vec![T::zero(); c_in * kh * kw * p];
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut cols[((c * kh + i) * kw + j) * p..][..p];
                // output x range whose source column x + j - pw lands in [0, w)
                let x_lo = pw.saturating_sub(j);
                let x_hi = (w + pw).saturating_sub(j).min(ow);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..oh {
                    let sy = y + i;
                    if sy < ph || sy - ph >= h {
                        continue;
                    }
                    let src = &plane[(sy - ph) * w..][..w];
                    let dst = &mut row[y * ow..][..ow];
                    let sx0 = x_lo + j - pw;
                    dst[x_lo..x_hi].copy_from_slice(&src[sx0..sx0 + (x_hi - x_lo)]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(
    cols: &[T],
    [c_in, h, w]: [usize; 3],
    (kh, kw): (usize, usize),
    (ph, pw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let p = oh * ow;
    let mut x = vec![T::zero(); c_in * h * w];
    for c in 0..c_in {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &cols[((c * kh + i) * kw + j) * p..][..p];
                let x_lo = pw.saturating_sub(j);
                let x_hi = (w + pw).saturating_sub(j).min(ow);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..oh {
                    let sy = y + i;
                    if sy < ph || sy - ph >= h {
                        continue;
                    }
                    let dst = &mut plane[(sy - ph) * w..][..w];
                    let src = &row[y * ow..][..ow];
                    let sx0 = x_lo + j - pw;
                    for (d, &s) in dst[sx0..sx0 + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&src[x_lo..x_hi])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlates a `C_in x H x W` input with `C_out x C_in x kh x kw`
/// weights, adds a per-channel bias, and returns the output with the cache
/// needed by [`conv2d_backward`].
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    padding: (usize, usize),
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let in_shape = dims3(input, "conv2d")?;
    let (c_out, c_in, kh, kw) = match *weights.shape() {
        [a, b, c, d] => (a, b, c, d),
        ref s => {
            return Err(Error::shape(
                "conv2d",
                format!("weights must be rank 4, got {s:?}"),
            ))
        }
    };
    if c_in != in_shape[0] {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, weights expect {c_in}", in_shape[0]),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?}, expected [{c_out}]", bias.shape()),
        ));
    }
    let (ph, pw) = padding;
    let (hp, wp) = (in_shape[1] + 2 * ph, in_shape[2] + 2 * pw);
    if kh == 0 || kw == 0 || kh > hp || kw > wp {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} does not fit padded input {hp}x{wp}"),
        ));
    }
    let out_hw = (hp - kh + 1, wp - kw + 1);
    let p = out_hw.0 * out_hw.1;
    let cols = im2col(input.data(), in_shape, (kh, kw), padding, out_hw);

    let mut out = vec![T::zero(); c_out * p];
    for (o, &b) in out.chunks_mut(p).zip(bias.data()) {
        o.iter_mut().for_each(|v| *v = b);
    }
    T::gemm(
        c_out,
        c_in * kh * kw,
        p,
        T::one(),
        weights.data(),
        false,
        &cols,
        false,
        T::one(),
        &mut out,
    );
    let out = Tensor::from_vec(&[c_out, out_hw.0, out_hw.1], out)?;
    let cache = ConvCache {
        cols,
        in_shape,
        out_hw,
        kernel: (kh, kw),
        padding,
        weights: weights.clone(),
    };
    Ok((out, cache))
}

/// Exact gradients of [`conv2d_forward`] with respect to input, weights and bias.
pub fn conv2d_backward<T: Real>(grad_out: &Tensor<T>, cache: &ConvCache<T>) -> Result<ConvGrads<T>> {
    let c_out = cache.weights.shape()[0];
    let expected = [c_out, cache.out_hw.0, cache.out_hw.1];
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad shape {:?}, expected {expected:?}", grad_out.shape()),
        ));
    }
    let p = cache.out_hw.0 * cache.out_hw.1;
    let ckk = cache.in_shape[0] * cache.kernel.0 * cache.kernel.1;
    let g = grad_out.data();

    let mut gw = vec![T::zero(); c_out * ckk];
    T::gemm(c_out, p, ckk, T::one(), g, false, &cache.cols, true, T::zero(), &mut gw);
    let gb: Vec<T> = g.chunks(p).map(|row| row.iter().copied().sum()).collect();

    let mut gcols = vec![T::zero(); ckk * p];
    T::gemm(
        ckk,
        c_out,
        p,
        T::one(),
        cache.weights.data(),
        true,
        g,
        false,
        T::zero(),
        &mut gcols,
    );
    let gx = col2im(&gcols, cache.in_shape, cache.kernel, cache.padding, cache.out_hw);

    Ok(ConvGrads {
        input: Tensor::from_vec(&cache.in_shape, gx)?,
        weights: Tensor::from_vec(cache.weights.shape(), gw)?,
        bias: Tensor::from_vec(&[c_out], gb)?,
    })
}

/// Convolution layer with "same" padding for odd kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weights: Param<T>,
    pub bias: Param<T>,
    pub padding: (usize, usize),
}

impl<T: Real> Conv2d<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [_, _, kh, kw] = match *weights.shape() {
            [a, b, c, d] => [a, b, c, d],
            ref s => return Err(Error::shape("conv2d", format!("weights rank 4, got {s:?}"))),
        };
        Ok(Conv2d {
            weights: Param::new(weights),
            bias: Param::new(bias),
            padding: (kh / 2, kw / 2),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        conv2d_forward(x, &self.weights.value, &self.bias.value, self.padding)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor<T>, cache: Option<&ConvCache<T>>) -> Result<Tensor<T>> {
        let cache = cache.ok_or(Error::MissingCache("conv2d"))?;
        let g = conv2d_backward(grad_out, cache)?;
        self.weights.grad.add_assign(&g.weights);
        self.bias.grad.add_assign(&g.bias);
        Ok(g.input)
    }
}
