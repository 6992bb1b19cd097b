//! The speaker-count network: a stack of "same"-padded convolutions over the
//! `time x mel` LMFB image, a mean over the mel axis to form the `K x M`
//! feature map, temporal aggregation, and a ReLU MLP classifier producing
//! log-probabilities over the four classes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conv::{conv2d_backward, Conv2d, ConvCache};
use super::dense::{dense_backward, log_softmax, log_softmax_nll_backward, relu_backward, relu_in_place, Dense};
use super::init::kaiming_init;
use super::tensor::{Real, Tensor};
use crate::attention::{
    attention_backward, attention_pool, average_pool, average_pool_backward, AttentionCache, AttentionParams,
    FeatureMap,
};
use crate::error::{Error, Result};
use crate::rng;

pub const N_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Attention,
    #[serde(alias = "average", alias = "avg")]
    AvgPool,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "attention" | "attn" => Ok(Aggregation::Attention),
            "avgpool" | "average" | "avg" => Ok(Aggregation::AvgPool),
            other => Err(Error::Config(format!("unknown aggregation '{other}'"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Attention => "attention",
            Aggregation::AvgPool => "avgpool",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_layers: usize,
    pub conv_channels: usize,
    pub kernel: [usize; 2],
    pub fc_layers: usize,
    pub fc_width: usize,
    pub n_classes: usize,
    pub n_mels: usize,
    pub min_frames: usize,
    pub aggregation: Aggregation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv_layers: 8,
            conv_channels: 128,
            kernel: [5, 5],
            fc_layers: 2,
            fc_width: 256,
            n_classes: N_CLASSES,
            n_mels: 40,
            min_frames: 20,
            aggregation: Aggregation::Attention,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("conv_layers", self.conv_layers),
            ("conv_channels", self.conv_channels),
            ("kernel height", self.kernel[0]),
            ("kernel width", self.kernel[1]),
            ("fc_width", self.fc_width),
            ("n_mels", self.n_mels),
            ("min_frames", self.min_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_classes != N_CLASSES {
            return Err(Error::Config(format!("n_classes must be {N_CLASSES}")));
        }
        if self.kernel[0] % 2 == 0 || self.kernel[1] % 2 == 0 {
            return Err(Error::Config("kernel sides must be odd for same padding".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    /// Per-mel-band input standardization, fitted on the training set.
    pub norm_mean: Vec<T>,
    pub norm_std: Vec<T>,
    pub convs: Vec<Conv2d<T>>,
    pub attention: Option<AttentionParams<T>>,
    /// Hidden layers followed by the output layer.
    pub fcs: Vec<Dense<T>>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Trace<T> {
    frames: usize,
    conv_caches: Vec<ConvCache<T>>,
    conv_acts: Vec<Tensor<T>>,
    fmap: FeatureMap<T>,
    attn: Option<AttentionCache<T>>,
    fc_inputs: Vec<Vec<T>>,
    pub log_probs: Vec<T>,
}

impl<T> Trace<T> {
    pub fn feature_map(&self) -> &FeatureMap<T> {
        &self.fmap
    }

    pub fn attention_weights(&self) -> Option<&[T]> {
        self.attn.as_ref().map(|c| c.scores().w.as_slice())
    }
}

/// Outcome of a forward/backward pass over a batch.
pub struct BatchResult<T> {
    pub loss_sum: f64,
    pub correct: usize,
    pub grads: Vec<Tensor<T>>,
}

pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let [kh, kw] = config.kernel;
        let c = config.conv_channels;
        let mut convs = Vec::with_capacity(config.conv_layers);
        for i in 0..config.conv_layers {
            let c_in = if i == 0 { 1 } else { c };
            let w = kaiming_init(&[c, c_in, kh, kw], c_in * kh * kw, rng::derive(seed, &[10, i as u64]))?;
            convs.push(Conv2d::new(w, Tensor::zeros(&[c]))?);
        }
        let attention = match config.aggregation {
            Aggregation::Attention => Some(AttentionParams::kaiming(c, c, c, rng::derive(seed, &[20]))?),
            Aggregation::AvgPool => None,
        };
        let mut fcs = Vec::with_capacity(config.fc_layers + 1);
        let mut width = c;
        for i in 0..=config.fc_layers {
            let out = if i == config.fc_layers { config.n_classes } else { config.fc_width };
            let w = kaiming_init(&[out, width], width, rng::derive(seed, &[30, i as u64]))?;
            fcs.push(Dense::new(w, Tensor::zeros(&[out]))?);
            width = out;
        }
        Ok(Model {
            norm_mean: vec![T::zero(); config.n_mels],
            norm_std: vec![T::one(); config.n_mels],
            config,
            convs,
            attention,
            fcs,
        })
    }

    /// Fits the per-band standardization to a set of `T x n_mels` inputs.
    pub fn fit_normalization<'a, I>(&mut self, inputs: I)
    where
        I: IntoIterator<Item = &'a [T]>,
    {
        let nm = self.config.n_mels;
        let mut sum = vec![0f64; nm];
        let mut sq = vec![0f64; nm];
        let mut count = 0usize;
        for x in inputs {
            for row in x.chunks(nm) {
                for (b, &v) in row.iter().enumerate() {
                    let v = v.to_f64().unwrap_or(0.0);
                    sum[b] += v;
                    sq[b] += v * v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return;
        }
        for b in 0..nm {
            let mean = sum[b] / count as f64;
            let var = (sq[b] / count as f64 - mean * mean).max(0.0);
            self.norm_mean[b] = T::lit(mean);
            self.norm_std[b] = T::lit(var.sqrt().max(1e-3));
        }
    }

    /// Named trainable tensors in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &c.weights.value));
            out.push((format!("conv{i}.bias"), &c.bias.value));
        }
        if let Some(a) = &self.attention {
            out.push(("attn.Wk".to_string(), &a.wk.value));
            out.push(("attn.Wv".to_string(), &a.wv.value));
            out.push(("attn.q".to_string(), &a.q.value));
        }
        for (i, d) in self.fcs.iter().enumerate() {
            out.push((format!("fc{i}.weight"), &d.weights.value));
            out.push((format!("fc{i}.bias"), &d.bias.value));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weights.value);
            out.push(&mut c.bias.value);
        }
        if let Some(a) = &mut self.attention {
            out.push(&mut a.wk.value);
            out.push(&mut a.wv.value);
            out.push(&mut a.q.value);
        }
        for d in &mut self.fcs {
            out.push(&mut d.weights.value);
            out.push(&mut d.bias.value);
        }
        out
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.named_params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()
    }

    fn check_input(&self, input: &[T], frames: usize) -> Result<()> {
        if frames < self.config.min_frames {
            return Err(Error::Data(format!(
                "segment has {frames} frames, model needs at least {}",
                self.config.min_frames
            )));
        }
        if input.len() != frames * self.config.n_mels {
            return Err(Error::shape(
                "model",
                format!("input has {} values, expected {frames}x{}", input.len(), self.config.n_mels),
            ));
        }
        Ok(())
    }

    /// Full forward pass over one `frames x n_mels` LMFB matrix (row-major by frame).
    pub fn forward_trace(&self, input: &[T], frames: usize) -> Result<Trace<T>> {
        self.check_input(input, frames)?;
        let nm = self.config.n_mels;
        let normed: Vec<T> = input
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.norm_mean[i % nm]) / self.norm_std[i % nm])
            .collect();
        let mut x = Tensor::from_vec(&[1, frames, nm], normed)?;
        let mut conv_caches = Vec::with_capacity(self.convs.len());
        let mut conv_acts = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (mut y, cache) = conv.forward(&x)?;
            relu_in_place(y.data_mut());
            conv_caches.push(cache);
            conv_acts.push(y.clone());
            x = y;
        }
        // mean over the mel axis -> K x M
        let k = self.config.conv_channels;
        let inv = T::one() / T::lit(nm as f64);
        let fm: Vec<T> = x.data().chunks(nm).map(|row| row.iter().copied().sum::<T>() * inv).collect();
        let fmap = FeatureMap::new(k, frames, fm)?;

        let (mut h, attn) = match &self.attention {
            Some(p) => {
                let (v, c) = attention_pool(&fmap, p)?;
                (v, Some(c))
            }
            None => (average_pool(&fmap), None),
        };
        let mut fc_inputs = Vec::with_capacity(self.fcs.len());
        let last = self.fcs.len() - 1;
        for (i, fc) in self.fcs.iter().enumerate() {
            let mut y = fc.forward(&h)?;
            if i < last {
                relu_in_place(&mut y);
            }
            fc_inputs.push(std::mem::replace(&mut h, y));
        }
        let log_probs = log_softmax(&h);
        if log_probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite log-probabilities".into()));
        }
        Ok(Trace {
            frames,
            conv_caches,
            conv_acts,
            fmap,
            attn,
            fc_inputs,
            log_probs,
        })
    }

    pub fn forward(&self, input: &[T], frames: usize) -> Result<Vec<T>> {
        Ok(self.forward_trace(input, frames)?.log_probs)
    }

    pub fn predict(&self, input: &[T], frames: usize) -> Result<usize> {
        Ok(argmax(&self.forward(input, frames)?))
    }

    /// Back-propagates `d loss / d logits` and adds parameter gradients into
    /// `grads` (ordered like [`Model::named_params`]).
    pub fn backward(&self, trace: &Trace<T>, grad_logits: &[T], grads: &mut [Tensor<T>]) -> Result<()> {
        let n_conv = 2 * self.convs.len();
        let n_attn = if self.attention.is_some() { 3 } else { 0 };
        let mut g = grad_logits.to_vec();
        for i in (0..self.fcs.len()).rev() {
            let x = &trace.fc_inputs[i];
            let (gx, gw, gb) = dense_backward(&self.fcs[i].weights.value, x, &g)?;
            grads[n_conv + n_attn + 2 * i].add_assign(&gw);
            grads[n_conv + n_attn + 2 * i + 1].add_assign(&gb);
            g = gx;
            if i > 0 {
                // x is the ReLU output of the previous hidden layer
                relu_backward(x, &mut g);
            }
        }
        let g_fmap = match &self.attention {
            Some(_) => {
                let ag = attention_backward(&g, trace.attn.as_ref())?;
                grads[n_conv].add_assign(&ag.wk);
                grads[n_conv + 1].add_assign(&ag.wv);
                grads[n_conv + 2].add_assign(&ag.q);
                ag.x
            }
            None => average_pool_backward(&g, trace.frames)?,
        };
        let nm = self.config.n_mels;
        let inv = T::one() / T::lit(nm as f64);
        let mut gx: Vec<T> = g_fmap
            .values()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v * inv, nm))
            .collect();
        for i in (0..self.convs.len()).rev() {
            relu_backward(trace.conv_acts[i].data(), &mut gx);
            let go = Tensor::from_vec(trace.conv_acts[i].shape(), gx)?;
            let cg = conv2d_backward(&go, &trace.conv_caches[i])?;
            grads[2 * i].add_assign(&cg.weights);
            grads[2 * i + 1].add_assign(&cg.bias);
            gx = cg.input.into_data();
        }
        Ok(())
    }

    /// Forward and backward over a batch of equally long segments. Work is
    /// split into fixed chunks whose partial gradients are summed in chunk
    /// order, so results do not depend on the thread count.
    pub fn batch_gradients(&self, inputs: &[&[T]], labels: &[usize], frames: usize) -> Result<BatchResult<T>> {
        if inputs.len() != labels.len() || inputs.is_empty() {
            return Err(Error::Data("batch must be non-empty with one label per input".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.n_classes) {
            return Err(Error::Label(bad));
        }
        const CHUNK: usize = 8;
        let n = inputs.len();
        let partials: Vec<Result<BatchResult<T>>> = inputs
            .par_chunks(CHUNK)
            .zip(labels.par_chunks(CHUNK))
            .map(|(xs, ls)| {
                let mut grads = self.zero_grads();
                let mut loss_sum = 0.0;
                let mut correct = 0;
                for (x, &l) in xs.iter().zip(ls) {
                    let trace = self.forward_trace(x, frames)?;
                    loss_sum -= trace.log_probs[l].to_f64().unwrap_or(f64::NAN);
                    if argmax(&trace.log_probs) == l {
                        correct += 1;
                    }
                    let g = log_softmax_nll_backward(&trace.log_probs, l, n);
                    self.backward(&trace, &g, &mut grads)?;
                }
                Ok(BatchResult { loss_sum, correct, grads })
            })
            .collect();
        let mut total = BatchResult {
            loss_sum: 0.0,
            correct: 0,
            grads: self.zero_grads(),
        };
        for p in partials {
            let p = p?;
            total.loss_sum += p.loss_sum;
            total.correct += p.correct;
            for (a, b) in total.grads.iter_mut().zip(&p.grads) {
                a.add_assign(b);
            }
        }
        if !total.loss_sum.is_finite() {
            return Err(Error::Numerical("non-finite training loss".into()));
        }
        Ok(total)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let cast_v = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64().unwrap_or(f64::NAN))).collect();
        Model {
            config: self.config.clone(),
            norm_mean: cast_v(&self.norm_mean),
            norm_std: cast_v(&self.norm_std),
            convs: self
                .convs
                .iter()
                .map(|c| Conv2d::new(c.weights.value.cast(), c.bias.value.cast()).expect("same shapes"))
                .collect(),
            attention: self.attention.as_ref().map(|a| {
                AttentionParams::new(a.wk.value.cast(), a.wv.value.cast(), a.q.value.cast()).expect("same shapes")
            }),
            fcs: self
                .fcs
                .iter()
                .map(|d| Dense::new(d.weights.value.cast(), d.bias.value.cast()).expect("same shapes"))
                .collect(),
        }
    }
}
