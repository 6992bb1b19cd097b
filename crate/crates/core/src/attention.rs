//! Temporal aggregation of a `K x M` feature map into a single `K`-vector.
//!
//! Two aggregators are provided:
//!
//! * [`attention_pool`]: keys and values are linear projections of the feature
//!   map, a single trainable query scores every time step with a scaled dot
//!   product, and the softmax of those scores weights the value columns.
//! * [`average_pool`]: the plain mean over time, used as the baseline.
//!
//! With all keys equal the softmax is uniform, so attention over identity
//! values reduces exactly to average pooling.

use crate::error::{Error, Result};
use crate::nn::dense::softmax;
use crate::nn::init::kaiming_init;
use crate::nn::tensor::{Param, Real, Tensor};

/// `K x M` matrix: feature dimension `K` (rows) by time step `M` (columns),
/// stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    k: usize,
    m: usize,
    values: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(k: usize, m: usize, values: Vec<T>) -> Result<Self> {
        if k == 0 || m == 0 || values.len() != k * m {
            return Err(Error::shape(
                "feature_map",
                format!("{k}x{m} map with {} values", values.len()),
            ));
        }
        Ok(FeatureMap { k, m, values })
    }

    pub fn features(&self) -> usize {
        self.k
    }

    pub fn steps(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, k: usize, m: usize) -> T {
        self.values[k * self.m + m]
    }

    pub fn column(&self, m: usize) -> Vec<T> {
        (0..self.k).map(|k| self.get(k, m)).collect()
    }

    /// Reorders time steps: column `i` of the result is column `perm[i]` of `self`.
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for k in 0..self.k {
            values.extend(perm.iter().map(|&p| self.get(k, p)));
        }
        FeatureMap { k: self.k, m: self.m, values }
    }
}

/// Trainable projections and query. `wk` is `d_k x K`, `wv` is `d_v x K`,
/// `q` has length `d_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub q: Param<T>,
}

impl<T: Real> AttentionParams<T> {
    pub fn new(wk: Tensor<T>, wv: Tensor<T>, q: Tensor<T>) -> Result<Self> {
        let (dk, kk) = match *wk.shape() {
            [a, b] => (a, b),
            ref s => return Err(Error::shape("attention", format!("W_k must be 2-D, got {s:?}"))),
        };
        match *wv.shape() {
            [_, b] if b == kk => {}
            ref s => {
                return Err(Error::shape(
                    "attention",
                    format!("W_v shape {s:?} incompatible with W_k {dk}x{kk}"),
                ))
            }
        }
        if q.shape() != [dk] {
            return Err(Error::shape(
                "attention",
                format!("query shape {:?}, expected [{dk}]", q.shape()),
            ));
        }
        Ok(AttentionParams {
            wk: Param::new(wk),
            wv: Param::new(wv),
            q: Param::new(q),
        })
    }

    /// Kaiming-initialized parameters: projections with fan-in `K`, query with fan-in `d_k`.
    pub fn kaiming(k: usize, d_k: usize, d_v: usize, seed: u64) -> Result<Self> {
        Self::new(
            kaiming_init(&[d_k, k], k, crate::rng::derive(seed, &[1]))?,
            kaiming_init(&[d_v, k], k, crate::rng::derive(seed, &[2]))?,
            kaiming_init(&[d_k], d_k, crate::rng::derive(seed, &[3]))?,
        )
    }

    pub fn d_k(&self) -> usize {
        self.wk.value.shape()[0]
    }

    pub fn d_v(&self) -> usize {
        self.wv.value.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.wk.value.shape()[1]
    }
}

/// Pre-softmax similarities `r` and the resulting weights `w`, one per time step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionScores<T> {
    pub r: Vec<T>,
    pub w: Vec<T>,
}

/// `keys = W_k X` and `values = W_v X`, returned as `d_k x M` and `d_v x M` tensors.
pub fn project_key_value<T: Real>(
    x: &FeatureMap<T>,
    p: &AttentionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if p.input_dim() != x.k {
        return Err(Error::shape(
            "project_key_value",
            format!("projections expect K = {}, feature map has {}", p.input_dim(), x.k),
        ));
    }
    let project = |w: &Tensor<T>| {
        let rows = w.shape()[0];
        let mut out = vec![T::zero(); rows * x.m];
        T::gemm(rows, x.k, x.m, T::one(), w.data(), false, &x.values, false, T::zero(), &mut out);
        Tensor::from_vec(&[rows, x.m], out)
    };
    Ok((project(&p.wk.value)?, project(&p.wv.value)?))
}

/// `r[m] = q . keys[:, m] / sqrt(d_k)` followed by a softmax over `m`.
pub fn attention_scores<T: Real>(keys: &Tensor<T>, q: &[T], d_k: usize) -> Result<AttentionScores<T>> {
    if d_k == 0 {
        return Err(Error::shape("attention_scores", "key dimension must be positive"));
    }
    let (rows, m) = match *keys.shape() {
        [a, b] => (a, b),
        ref s => return Err(Error::shape("attention_scores", format!("keys must be 2-D, got {s:?}"))),
    };
    if rows != d_k || q.len() != d_k {
        return Err(Error::shape(
            "attention_scores",
            format!("keys have {rows} rows, query {} entries, d_k = {d_k}", q.len()),
        ));
    }
    let scale = T::one() / T::lit(d_k as f64).sqrt();
    let mut r = vec![T::zero(); m];
    T::gemm(1, d_k, m, scale, q, false, keys.data(), false, T::zero(), &mut r);
    let w = softmax(&r);
    Ok(AttentionScores { r, w })
}

/// Forward intermediates required by [`attention_backward`].
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    x: FeatureMap<T>,
    keys: Tensor<T>,
    values: Tensor<T>,
    scores: AttentionScores<T>,
    params: AttentionParams<T>,
}

impl<T> AttentionCache<T> {
    pub fn scores(&self) -> &AttentionScores<T> {
        &self.scores
    }
}

/// Weighted average of value columns, `sum_m w[m] * values[:, m]`.
pub fn attention_pool<T: Real>(
    x: &FeatureMap<T>,
    p: &AttentionParams<T>,
) -> Result<(Vec<T>, AttentionCache<T>)> {
    let (keys, values) = project_key_value(x, p)?;
    let scores = attention_scores(&keys, p.q.value.data(), p.d_k())?;
    let dv = p.d_v();
    let mut out = vec![T::zero(); dv];
    T::gemm(dv, x.m, 1, T::one(), values.data(), false, &scores.w, false, T::zero(), &mut out);
    let cache = AttentionCache {
        x: x.clone(),
        keys,
        values,
        scores,
        params: p.clone(),
    };
    Ok((out, cache))
}

#[derive(Clone, Debug)]
pub struct AttentionGrads<T> {
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub q: Tensor<T>,
    pub x: FeatureMap<T>,
}

/// Analytic gradients of [`attention_pool`], including the softmax Jacobian.
pub fn attention_backward<T: Real>(
    grad_out: &[T],
    cache: Option<&AttentionCache<T>>,
) -> Result<AttentionGrads<T>> {
    let c = cache.ok_or(Error::MissingCache("attention"))?;
    let (k, m) = (c.x.k, c.x.m);
    let (dk, dv) = (c.params.d_k(), c.params.d_v());
    if grad_out.len() != dv {
        return Err(Error::shape(
            "attention_backward",
            format!("grad length {}, expected {dv}", grad_out.len()),
        ));
    }
    let w = &c.scores.w;

    // d values = g w^T
    let mut g_values = vec![T::zero(); dv * m];
    T::gemm(dv, 1, m, T::one(), grad_out, false, w, false, T::zero(), &mut g_values);
    // d w[m] = g . values[:, m]
    let mut g_w = vec![T::zero(); m];
    T::gemm(1, dv, m, T::one(), grad_out, false, c.values.data(), false, T::zero(), &mut g_w);
    // softmax Jacobian: d r = w * (d w - <w, d w>)
    let dot: T = w.iter().zip(&g_w).map(|(&a, &b)| a * b).sum();
    let g_r: Vec<T> = w.iter().zip(&g_w).map(|(&wi, &gi)| wi * (gi - dot)).collect();

    let scale = T::one() / T::lit(dk as f64).sqrt();
    let mut g_q = vec![T::zero(); dk];
    T::gemm(dk, m, 1, scale, c.keys.data(), false, &g_r, false, T::zero(), &mut g_q);
    let mut g_keys = vec![T::zero(); dk * m];
    T::gemm(dk, 1, m, scale, c.params.q.value.data(), false, &g_r, false, T::zero(), &mut g_keys);

    let mut g_wk = vec![T::zero(); dk * k];
    T::gemm(dk, m, k, T::one(), &g_keys, false, &c.x.values, true, T::zero(), &mut g_wk);
    let mut g_wv = vec![T::zero(); dv * k];
    T::gemm(dv, m, k, T::one(), &g_values, false, &c.x.values, true, T::zero(), &mut g_wv);

    let mut g_x = vec![T::zero(); k * m];
    T::gemm(k, dk, m, T::one(), c.params.wk.value.data(), true, &g_keys, false, T::zero(), &mut g_x);
    T::gemm(k, dv, m, T::one(), c.params.wv.value.data(), true, &g_values, false, T::one(), &mut g_x);

    Ok(AttentionGrads {
        wk: Tensor::from_vec(&[dk, k], g_wk)?,
        wv: Tensor::from_vec(&[dv, k], g_wv)?,
        q: Tensor::from_vec(&[dk], g_q)?,
        x: FeatureMap::new(k, m, g_x)?,
    })
}

/// Mean over the time axis.
pub fn average_pool<T: Real>(x: &FeatureMap<T>) -> Vec<T> {
    let inv = T::one() / T::lit(x.m as f64);
    x.values.chunks(x.m).map(|row| row.iter().copied().sum::<T>() * inv).collect()
}

pub fn average_pool_backward<T: Real>(grad_out: &[T], m: usize) -> Result<FeatureMap<T>> {
    let inv = T::one() / T::lit(m as f64);
    let values = grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, m))
        .collect();
    FeatureMap::new(grad_out.len(), m, values)
}
