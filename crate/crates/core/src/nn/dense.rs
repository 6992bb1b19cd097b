//! Fully connected layers, activations and the classification loss.

use super::tensor::{Param, Real, Tensor};
use crate::error::{Error, Result};

/// `y = W x + b` with `W` of shape `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weights: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Dense<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        match *weights.shape() {
            [out, _] if bias.shape() == [out] => Ok(Dense {
                weights: Param::new(weights),
                bias: Param::new(bias),
            }),
            _ => Err(Error::shape(
                "dense",
                format!("weights {:?} incompatible with bias {:?}", weights.shape(), bias.shape()),
            )),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.value.shape()[0]
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        dense_forward(&self.weights.value, &self.bias.value, x)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &[T], grad_out: &[T]) -> Result<Vec<T>> {
        let (gx, gw, gb) = dense_backward(&self.weights.value, x, grad_out)?;
        self.weights.grad.add_assign(&gw);
        self.bias.grad.add_assign(&gb);
        Ok(gx)
    }
}

pub fn dense_forward<T: Real>(w: &Tensor<T>, b: &Tensor<T>, x: &[T]) -> Result<Vec<T>> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    if x.len() != inp {
        return Err(Error::shape("dense", format!("input length {}, expected {inp}", x.len())));
    }
    let mut y = b.data().to_vec();
    T::gemm(out, inp, 1, T::one(), w.data(), false, x, false, T::one(), &mut y);
    Ok(y)
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn dense_backward<T: Real>(
    w: &Tensor<T>,
    x: &[T],
    grad_out: &[T],
) -> Result<(Vec<T>, Tensor<T>, Tensor<T>)> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    if x.len() != inp || grad_out.len() != out {
        return Err(Error::shape(
            "dense_backward",
            format!("x {} / grad {} vs weights {out}x{inp}", x.len(), grad_out.len()),
        ));
    }
    let mut gw = vec![T::zero(); out * inp];
    T::gemm(out, 1, inp, T::one(), grad_out, false, x, false, T::zero(), &mut gw);
    let mut gx = vec![T::zero(); inp];
    T::gemm(inp, out, 1, T::one(), w.data(), true, grad_out, false, T::zero(), &mut gx);
    Ok((
        gx,
        Tensor::from_vec(&[out, inp], gw)?,
        Tensor::from_vec(&[out], grad_out.to_vec())?,
    ))
}

pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.max(T::zero())).collect()
}

pub fn relu_in_place<T: Real>(x: &mut [T]) {
    x.iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Masks `grad` by the sign of the ReLU *output* (equivalently its input).
pub fn relu_backward<T: Real>(activated: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn log_softmax<T: Real>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    x.iter().map(|&v| v - lse).collect()
}

pub fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean negative log-likelihood of the labelled classes.
pub fn nll_loss<T: Real>(log_probs: &[Vec<T>], labels: &[usize]) -> Result<T> {
    if log_probs.len() != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "nll_loss",
            format!("{} rows vs {} labels", log_probs.len(), labels.len()),
        ));
    }
    let mut total = T::zero();
    for (row, &l) in log_probs.iter().zip(labels) {
        if l >= row.len() || l > 3 {
            return Err(Error::Label(l));
        }
        total -= row[l];
    }
    Ok(total / T::lit(labels.len() as f64))
}

/// Gradient of `nll_loss(log_softmax(logits))` with respect to one row of
/// logits, for a batch of `batch` rows.
pub fn log_softmax_nll_backward<T: Real>(log_probs: &[T], label: usize, batch: usize) -> Vec<T> {
    let inv = T::one() / T::lit(batch as f64);
    log_probs
        .iter()
        .enumerate()
        .map(|(c, &lp)| {
            let onehot = if c == label { T::one() } else { T::zero() };
            (lp.exp() - onehot) * inv
        })
        .collect()
}
