//! Checks shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::f64::consts::PI;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use speaker_count::attention::{attention_backward, attention_pool, average_pool, average_pool_backward, AttentionParams, FeatureMap};
use speaker_count::corpus::mix_sources_with_gains;
use speaker_count::dsp::{magnitude_spectrum, mel_filterbank, mel_edge_bins, pre_emphasize, AudioSegment, DspConfig};
use speaker_count::eval::{compute_metrics, ConfusionMatrix};
use speaker_count::nn::conv::{conv2d_backward, conv2d_forward};
use speaker_count::nn::dense::{dense_backward, dense_forward, log_softmax, log_softmax_nll_backward, relu, relu_backward};
use speaker_count::dsp::archive::{decode_lmfb, encode_lmfb, read_lmfb, write_lmfb};
use speaker_count::dsp::LmfbMatrix;
use speaker_count::nn::checkpoint;
use speaker_count::nn::{
    load_checkpoint, save_checkpoint, train, Aggregation, Checkpoint, LabeledSet, Model, ModelConfig, SchedulerAction, SchedulerConfig,
    SchedulerState, Tensor, TrainConfig,
};
use speaker_count::Error;

pub const H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Outcome of one family of numeric comparisons.
#[derive(Debug)]
pub struct Check {
    pub instances: usize,
    pub comparisons: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl Check {
    fn new() -> Self {
        Check {
            instances: 0,
            comparisons: 0,
            worst: 0.0,
            failures: Vec::new(),
        }
    }

    fn grad(&mut self, what: &str, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
        self.comparisons += 1;
        self.worst = self.worst.max(err);
        if err > GRAD_TOL && self.failures.len() < 10 {
            self.failures.push(format!("{what}: analytic {analytic:e} vs numeric {numeric:e}"));
        }
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, v).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central difference of `f` with respect to entry `i` of `x`.
fn central(x: &[f64], i: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + H;
    let up = f(&p);
    p[i] = x[i] - H;
    let down = f(&p);
    (up - down) / (2.0 * H)
}

// ---------------------------------------------------------------- gradients

pub fn conv_gradients(instances: usize, seed: u64) -> Check {
    let mut c = Check::new();
    let mut r = rng(seed);
    for _ in 0..instances {
        let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=3));
        let kh = [1, 3, 5][r.random_range(0..3)];
        let kw = [1, 3, 5][r.random_range(0..3)];
        let (h, w) = (r.random_range(2..=6), r.random_range(2..=6));
        let pad = (kh / 2, kw / 2);
        let x = rand_vec(&mut r, cin * h * w);
        let wt = rand_vec(&mut r, cout * cin * kh * kw);
        let b = rand_vec(&mut r, cout);
        let (xs, ws, bs) = ([cin, h, w], [cout, cin, kh, kw], [cout]);
        let (y, cache) = conv2d_forward(&t(&xs, x.clone()), &t(&ws, wt.clone()), &t(&bs, b.clone()), pad).unwrap();
        let probe = rand_vec(&mut r, y.len());
        let g = conv2d_backward(&t(y.shape(), probe.clone()), &cache).unwrap();
        let loss = |x: &[f64], wt: &[f64], b: &[f64]| {
            let (y, _) = conv2d_forward(&t(&xs, x.to_vec()), &t(&ws, wt.to_vec()), &t(&bs, b.to_vec()), pad).unwrap();
            dot(y.data(), &probe)
        };
        for i in 0..x.len() {
            c.grad("conv input", g.input.data()[i], central(&x, i, |v| loss(v, &wt, &b)));
        }
        for i in 0..wt.len() {
            c.grad("conv weight", g.weights.data()[i], central(&wt, i, |v| loss(&x, v, &b)));
        }
        for i in 0..b.len() {
            c.grad("conv bias", g.bias.data()[i], central(&b, i, |v| loss(&x, &wt, v)));
        }
        c.instances += 1;
    }
    c
}

pub fn dense_gradients(instances: usize, seed: u64) -> Check {
    let mut c = Check::new();
    let mut r = rng(seed);
    for _ in 0..instances {
        let (inp, out) = (r.random_range(1..=8), r.random_range(1..=6));
        let x = rand_vec(&mut r, inp);
        let w = rand_vec(&mut r, out * inp);
        let b = rand_vec(&mut r, out);
        let probe = rand_vec(&mut r, out);
        let (gx, gw, gb) = dense_backward(&t(&[out, inp], w.clone()), &x, &probe).unwrap();
        let loss = |x: &[f64], w: &[f64], b: &[f64]| dot(&dense_forward(&t(&[out, inp], w.to_vec()), &t(&[out], b.to_vec()), x).unwrap(), &probe);
        for i in 0..inp {
            c.grad("dense input", gx[i], central(&x, i, |v| loss(v, &w, &b)));
        }
        for i in 0..w.len() {
            c.grad("dense weight", gw.data()[i], central(&w, i, |v| loss(&x, v, &b)));
        }
        for i in 0..out {
            c.grad("dense bias", gb.data()[i], central(&b, i, |v| loss(&x, &w, v)));
        }
        c.instances += 1;
    }
    c
}

pub fn relu_gradients(instances: usize, seed: u64) -> Check {
    let mut c = Check::new();
    let mut r = rng(seed);
    for _ in 0..instances {
        let n = r.random_range(1..=12);
        // keep clear of the kink, where the derivative is undefined
        let x: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = r.random_range(0.01..1.0);
                if r.random_bool(0.5) { v } else { -v }
            })
            .collect();
        let probe = rand_vec(&mut r, n);
        let mut g = probe.clone();
        relu_backward(&relu(&x), &mut g);
        for i in 0..n {
            c.grad("relu", g[i], central(&x, i, |v| dot(&relu(v), &probe)));
        }
        c.instances += 1;
    }
    c
}

pub fn log_softmax_nll_gradients(instances: usize, seed: u64) -> Check {
    let mut c = Check::new();
    let mut r = rng(seed);
    for _ in 0..instances {
        let z: Vec<f64> = (0..4).map(|_| r.random_range(-4.0..4.0)).collect();
        let label = r.random_range(0..4);
        let g = log_softmax_nll_backward(&log_softmax(&z), label, 1);
        for i in 0..4 {
            c.grad("log_softmax+nll", g[i], central(&z, i, |v| -log_softmax(v)[label]));
        }
        c.instances += 1;
    }
    c
}

pub fn attention_gradients(instances: usize, seed: u64) -> Check {
    let mut c = Check::new();
    let mut r = rng(seed);
    for _ in 0..instances {
        let (k, m) = (r.random_range(1..=5), r.random_range(1..=7));
        let (dk, dv) = (r.random_range(1..=4), r.random_range(1..=4));
        let x = rand_vec(&mut r, k * m);
        let wk = rand_vec(&mut r, dk * k);
        let wv = rand_vec(&mut r, dv * k);
        let q: Vec<f64> = rand_vec(&mut r, dk).iter().map(|v| 2.0 * v).collect();
        let probe = rand_vec(&mut r, dv);
        let params = |wk: &[f64], wv: &[f64], q: &[f64]| {
            AttentionParams::new(t(&[dk, k], wk.to_vec()), t(&[dv, k], wv.to_vec()), t(&[dk], q.to_vec())).unwrap()
        };
        let loss = |x: &[f64], wk: &[f64], wv: &[f64], q: &[f64]| {
            let fm = FeatureMap::new(k, m, x.to_vec()).unwrap();
            dot(&attention_pool(&fm, &params(wk, wv, q)).unwrap().0, &probe)
        };
        let fm = FeatureMap::new(k, m, x.clone()).unwrap();
        let (_, cache) = attention_pool(&fm, &params(&wk, &wv, &q)).unwrap();
        let g = attention_backward(&probe, Some(&cache)).unwrap();
        for i in 0..x.len() {
            c.grad("attention input", g.x.values()[i], central(&x, i, |v| loss(v, &wk, &wv, &q)));
        }
        for i in 0..wk.len() {
            c.grad("attention W_k", g.wk.data()[i], central(&wk, i, |v| loss(&x, v, &wv, &q)));
        }
        for i in 0..wv.len() {
            c.grad("attention W_v", g.wv.data()[i], central(&wv, i, |v| loss(&x, &wk, v, &q)));
        }
        for i in 0..q.len() {
            c.grad("attention q", g.q.data()[i], central(&q, i, |v| loss(&x, &wk, &wv, v)));
        }
        c.instances += 1;
    }
    c
}

pub fn average_pool_gradients(instances: usize, seed: u64) -> Check {
    let mut c = Check::new();
    let mut r = rng(seed);
    for _ in 0..instances {
        let (k, m) = (r.random_range(1..=5), r.random_range(1..=7));
        let x = rand_vec(&mut r, k * m);
        let probe = rand_vec(&mut r, k);
        let g = average_pool_backward(&probe, m).unwrap();
        for i in 0..x.len() {
            let f = |v: &[f64]| dot(&average_pool(&FeatureMap::new(k, m, v.to_vec()).unwrap()), &probe);
            c.grad("average pool", g.values()[i], central(&x, i, f));
        }
        c.instances += 1;
    }
    c
}

/// End-to-end check through a small model; a random subset of entries of
/// every parameter tensor is perturbed.
pub fn model_gradients(instances: usize, seed: u64) -> Check {
    let mut c = Check::new();
    let mut r = rng(seed);
    for inst in 0..instances {
        let agg = if inst % 2 == 0 { Aggregation::Attention } else { Aggregation::AvgPool };
        let cfg = ModelConfig {
            conv_layers: 2,
            conv_channels: 3,
            kernel: [3, 3],
            fc_layers: 2,
            fc_width: 5,
            n_mels: 6,
            min_frames: 4,
            aggregation: agg,
            ..ModelConfig::default()
        };
        let mut model = Model::<f64>::new(cfg, seed + inst as u64).unwrap();
        // zero biases can leave a ReLU exactly on its kink; move off it
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (p, name) in model.params_mut().into_iter().zip(&names) {
            if name.ends_with("bias") {
                for v in p.data_mut() {
                    *v = r.random_range(-0.5..0.5);
                }
            }
        }
        let frames = r.random_range(4..=6);
        let x = rand_vec(&mut r, frames * 6);
        let label = r.random_range(0..4);
        let trace = model.forward_trace(&x, frames).unwrap();
        let mut grads = model.zero_grads();
        model
            .backward(&trace, &log_softmax_nll_backward(&trace.log_probs, label, 1), &mut grads)
            .unwrap();
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (pi, name) in names.iter().enumerate() {
            let len = grads[pi].len();
            for _ in 0..len.min(6) {
                let i = r.random_range(0..len);
                let loss = |delta: f64| {
                    let mut m = model.clone();
                    m.params_mut()[pi].data_mut()[i] += delta;
                    -m.forward(&x, frames).unwrap()[label]
                };
                let numeric = (loss(H) - loss(-H)) / (2.0 * H);
                c.grad(&format!("model {agg} {name}[{i}]"), grads[pi].data()[i], numeric);
            }
        }
        c.instances += 1;
    }
    c
}

// ---------------------------------------------------------------- attention

#[derive(Debug, Clone)]
pub struct AttnCase {
    pub k: usize,
    pub m: usize,
    pub dk: usize,
    pub x: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub q: Vec<f64>,
    pub perm_keys: Vec<u64>,
}

pub fn attn_case() -> impl Strategy<Value = AttnCase> {
    (1usize..6, 1usize..9, 1usize..5).prop_flat_map(|(k, m, dk)| {
        (
            prop::collection::vec(-3.0..3.0f64, k * m),
            prop::collection::vec(-2.0..2.0f64, dk * k),
            prop::collection::vec(-2.0..2.0f64, k * k),
            prop::collection::vec(-2.0..2.0f64, dk),
            prop::collection::vec(any::<u64>(), m),
        )
            .prop_map(move |(x, wk, wv, q, perm_keys)| AttnCase {
                k,
                m,
                dk,
                x,
                wk,
                wv,
                q,
                perm_keys,
            })
    })
}

impl AttnCase {
    pub fn params(&self) -> AttentionParams<f64> {
        AttentionParams::new(
            t(&[self.dk, self.k], self.wk.clone()),
            t(&[self.k, self.k], self.wv.clone()),
            t(&[self.dk], self.q.clone()),
        )
        .unwrap()
    }

    pub fn fmap(&self) -> FeatureMap<f64> {
        FeatureMap::new(self.k, self.m, self.x.clone()).unwrap()
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

/// All attention invariants for one random instance.
pub fn attention_case_holds(c: &AttnCase) -> Result<(), TestCaseError> {
    let p = c.params();
    let fm = c.fmap();
    let (out, cache) = attention_pool(&fm, &p).unwrap();
    let w = &cache.scores().w;

    // weights form a distribution
    let s: f64 = w.iter().sum();
    ensure((s - 1.0).abs() <= 1e-6 && w.iter().all(|&v| v >= 0.0), || format!("weights {w:?} sum {s}"))?;

    // convex hull: out = sum_m w_m v_m lies inside the per-coordinate range of the values
    for d in 0..c.k {
        let vals: Vec<f64> = (0..c.m)
            .map(|j| (0..c.k).map(|i| c.wv[d * c.k + i] * c.x[i * c.m + j]).sum())
            .collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        ensure(out[d] >= lo - 1e-9 && out[d] <= hi + 1e-9, || format!("coord {d}: {} outside [{lo}, {hi}]", out[d]))?;
    }

    // column permutation invariance
    let mut perm: Vec<usize> = (0..c.m).collect();
    perm.sort_by_key(|&i| c.perm_keys[i]);
    let (out_p, cache_p) = attention_pool(&fm.permute_columns(&perm), &p).unwrap();
    for (a, b) in out.iter().zip(&out_p) {
        ensure((a - b).abs() <= 1e-9 * (1.0 + a.abs()), || format!("permuted output {out:?} vs {out_p:?}"))?;
    }
    for (j, &src) in perm.iter().enumerate() {
        let (a, b) = (cache_p.scores().w[j], w[src]);
        ensure((a - b).abs() <= 1e-12, || format!("permuted weight {j}: {a} vs {b}"))?;
    }

    // equal keys (zero query) reduce to average pooling of the values
    let mut flat = c.clone();
    flat.q.iter_mut().for_each(|v| *v = 0.0);
    flat.wv = (0..c.k * c.k).map(|i| if i % (c.k + 1) == 0 { 1.0 } else { 0.0 }).collect();
    let (o, _) = attention_pool(&flat.fmap(), &flat.params()).unwrap();
    let avg = average_pool(&fm);
    for (a, b) in o.iter().zip(&avg) {
        ensure((a - b).abs() <= 1e-10, || format!("equal keys {o:?} vs average {avg:?}"))?;
    }

    // a single time step is returned unchanged under identity projections
    let single = AttnCase {
        m: 1,
        x: (0..c.k).map(|i| c.x[i * c.m]).collect(),
        perm_keys: vec![0],
        ..flat
    };
    let (o, cache1) = attention_pool(&single.fmap(), &AttnCase { q: c.q.clone(), ..single.clone() }.params()).unwrap();
    ensure(cache1.scores().w == vec![1.0], || "single step weight != 1".into())?;
    for (a, b) in o.iter().zip(&single.x) {
        ensure((a - b).abs() <= 1e-12, || format!("M=1 output {o:?} vs input {:?}", single.x))?;
    }
    Ok(())
}

/// Runs the attention invariants on `cases` random instances.
pub fn attention_properties(cases: u32) -> Result<u32, String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&attn_case(), |c| attention_case_holds(&c))
        .map(|_| cases)
        .map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- dsp

pub fn naive_dft_magnitude(frame: &[f64], nfft: usize) -> Vec<f64> {
    (0..=nfft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in frame.iter().enumerate() {
                let a = -2.0 * PI * (k * n % nfft) as f64 / nfft as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            re.hypot(im)
        })
        .collect()
}

/// Worst per-frame relative deviation between the FFT magnitude spectrum and
/// the naive DFT, and between the spectral and time-domain energies.
pub fn spectrum_vs_dft(frames: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (mut worst_mag, mut worst_energy) = (0.0f64, 0.0f64);
    for _ in 0..frames {
        let x = rand_vec(&mut r, 400);
        let fast = magnitude_spectrum(&x, 512);
        let slow = naive_dft_magnitude(&x, 512);
        let peak = slow.iter().cloned().fold(0.0, f64::max);
        let dev = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_mag = worst_mag.max(dev / peak);
        // Parseval with the one-sided spectrum: interior bins count twice
        let spec_e: f64 = fast
            .iter()
            .enumerate()
            .map(|(k, m)| if k == 0 || k == 256 { m * m } else { 2.0 * m * m })
            .sum::<f64>()
            / 512.0;
        let time_e: f64 = x.iter().map(|v| v * v).sum();
        worst_energy = worst_energy.max((spec_e - time_e).abs() / time_e);
    }
    (worst_mag, worst_energy)
}

/// Column sums of the filterbank at every bin strictly between the first
/// and last filter centre; all must equal 1 exactly.
pub fn interior_column_sums(cfg: &DspConfig) -> Vec<f64> {
    let fb = mel_filterbank(cfg).unwrap();
    let edges = mel_edge_bins(cfg).unwrap();
    let nb = cfg.n_bins();
    (edges[1]..=edges[cfg.n_mels])
        .map(|b| (0..cfg.n_mels).map(|i| fb[i * nb + b]).sum())
        .collect()
}

pub fn pre_emphasis_impulse() -> Vec<f64> {
    let mut x = vec![0.0; 6];
    x[0] = 1.0;
    pre_emphasize(&AudioSegment::new(x), 0.97).samples
}

// ---------------------------------------------------------------- mixing

/// Largest |measured - requested| SIR (dB) over `draws` random mixtures.
pub fn worst_sir_error(draws: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let n = r.random_range(800..4000);
        let n_src = r.random_range(2..=3);
        let sources: Vec<AudioSegment> = (0..n_src)
            .map(|_| {
                let amp = r.random_range(0.01..2.0);
                let f = r.random_range(80.0..4000.0);
                let noise = r.random_range(0.0..1.0);
                AudioSegment::new(
                    (0..n)
                        .map(|i| amp * ((2.0 * PI * f * i as f64 / 16000.0).sin() + noise * r.random_range(-1.0..1.0)))
                        .collect(),
                )
            })
            .collect();
        let sirs: Vec<f64> = (1..n_src).map(|_| r.random_range(0.0..=5.0)).collect();
        let (_, gains) = mix_sources_with_gains(&sources, &sirs).unwrap();
        let p0 = gains[0] * gains[0] * sources[0].power();
        for i in 1..n_src {
            let pi = gains[i] * gains[i] * sources[i].power();
            worst = worst.max((10.0 * (p0 / pi).log10() - sirs[i - 1]).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------- metrics

pub fn random_confusion(r: &mut impl Rng) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new();
    for row in cm.counts.iter_mut() {
        for v in row.iter_mut() {
            *v = if r.random_bool(0.2) { 0 } else { r.random_range(0..60) };
        }
    }
    if cm.total() == 0 {
        cm.counts[0][0] = 1;
    }
    cm
}

/// Metrics recomputed from the expanded list of (truth, prediction) pairs.
pub struct BruteMetrics {
    pub accuracy: f64,
    pub precision: [f64; 4],
    pub recall: [f64; 4],
    pub f1: [f64; 4],
    pub mean_recall: f64,
}

pub fn brute_force_metrics(cm: &ConfusionMatrix) -> BruteMetrics {
    let mut pairs = Vec::new();
    for t in 0..4 {
        for p in 0..4 {
            for _ in 0..cm.counts[t][p] {
                pairs.push((t, p));
            }
        }
    }
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    let accuracy = correct as f64 / pairs.len() as f64;
    let mut precision = [0.0; 4];
    let mut recall = [0.0; 4];
    let mut f1 = [0.0; 4];
    for c in 0..4 {
        let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count();
        let predicted = pairs.iter().filter(|&&(_, p)| p == c).count();
        let actual = pairs.iter().filter(|&&(t, _)| t == c).count();
        precision[c] = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        recall[c] = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
        let (p, q) = (precision[c], recall[c]);
        f1[c] = if p + q == 0.0 { 0.0 } else { 2.0 * p * q / (p + q) };
    }
    let mean_recall = (recall[0] + recall[1] + recall[2] + recall[3]) / 4.0;
    BruteMetrics {
        accuracy,
        precision,
        recall,
        f1,
        mean_recall,
    }
}

/// Compares `compute_metrics` with the brute-force oracle on `n` random
/// matrices; returns a description of the first mismatch.
pub fn metrics_match_oracle(n: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for i in 0..n {
        let cm = random_confusion(&mut r);
        let got = compute_metrics(&cm).unwrap();
        let want = brute_force_metrics(&cm);
        let same = got.accuracy == want.accuracy
            && got.precision == want.precision
            && got.recall == want.recall
            && got.f1 == want.f1
            && got.weighted_accuracy == want.mean_recall
            && got.weighted_accuracy == got.recall.iter().sum::<f64>() / 4.0;
        if !same {
            return Err(format!("matrix {i} {:?}: got {got:?}", cm.counts));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- scheduler

/// Plain re-statement of the plateau rule: one action per epoch for a
/// sequence of "improved by at least the threshold" flags.
pub fn plateau_oracle(improved: &[bool]) -> Vec<SchedulerAction> {
    let (mut flat, mut decays) = (0, 0);
    let mut out = Vec::new();
    for &imp in improved {
        if imp {
            flat = 0;
            out.push(SchedulerAction::Continue);
            continue;
        }
        flat += 1;
        if flat < 2 {
            out.push(SchedulerAction::Continue);
        } else if decays == 6 {
            out.push(SchedulerAction::Stop);
            break;
        } else {
            flat = 0;
            decays += 1;
            out.push(SchedulerAction::DecayLr);
        }
    }
    out
}

/// Feeds losses to a default scheduler until it stops, checking the
/// learning rate after every step.
pub fn run_scheduler(losses: &[f64]) -> Result<(Vec<SchedulerAction>, SchedulerState), String> {
    let mut s = SchedulerState::new(SchedulerConfig::default());
    let mut out = Vec::new();
    for &l in losses {
        let a = s.step(l);
        out.push(a);
        let want = 0.01 * 0.7f64.powi(s.decay_count as i32);
        if s.decay_count > 6 || s.learning_rate() != want {
            return Err(format!("after {} steps: {} decays, lr {}", out.len(), s.decay_count, s.learning_rate()));
        }
        if a == SchedulerAction::Stop {
            break;
        }
    }
    Ok((out, s))
}

/// Every improve/flat pattern up to `max_len` epochs against the oracle.
/// Improving epochs drop the loss by 0.01, flat ones leave it unchanged.
pub fn scheduler_exhaustive(max_len: usize) -> Result<usize, String> {
    let mut patterns = 0;
    for len in 1..=max_len {
        for bits in 0u32..(1 << len) {
            let flags: Vec<bool> = (0..len).map(|i| i == 0 || bits >> i & 1 == 1).collect();
            let mut loss = 10.0;
            let losses: Vec<f64> = flags
                .iter()
                .map(|&f| {
                    if f {
                        loss -= 0.01;
                    }
                    loss
                })
                .collect();
            let got = run_scheduler(&losses)?.0;
            if got != plateau_oracle(&flags) {
                return Err(format!("pattern {flags:?}: got {got:?}"));
            }
            patterns += 1;
        }
    }
    Ok(patterns)
}

/// The scripted examples: improvements continue, two sub-threshold epochs
/// decay, a flat run ends with six decays then a stop.
pub fn scheduler_examples() -> Result<(), String> {
    use SchedulerAction::*;
    let check = |cond: bool, what: &str| if cond { Ok(()) } else { Err(what.to_string()) };
    check(run_scheduler(&[1.0, 0.9, 0.8])?.0 == vec![Continue; 3], "steady improvement")?;
    check(
        run_scheduler(&[1.0, 0.9999, 0.9998])?.0 == vec![Continue, Continue, DecayLr],
        "sub-threshold gains decay",
    )?;
    let (acts, s) = run_scheduler(&[1.0; 40])?;
    check(acts.iter().filter(|&&a| a == DecayLr).count() == 6, "six decays")?;
    check(acts.last() == Some(&Stop) && acts.len() == 15, "stop after the sixth fruitless decay")?;
    check(s.decay_count == 6, "decay count")
}

/// Trains a one-filter model with patience high enough that only the
/// epoch cap can end training.
pub fn epoch_cap_holds() -> Result<(), String> {
    let cfg = ModelConfig {
        conv_layers: 1,
        conv_channels: 1,
        kernel: [1, 1],
        fc_layers: 1,
        fc_width: 2,
        aggregation: Aggregation::AvgPool,
        ..ModelConfig::default()
    };
    let mut set = LabeledSet::new(20);
    for l in 0..4 {
        set.push(vec![l as f32; 800], l);
    }
    let mut m = Model::<f32>::new(cfg, 1).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        batch_size: 4,
        max_epochs: 500,
        scheduler: SchedulerConfig {
            patience: 10_000,
            ..SchedulerConfig::default()
        },
        keep_best: false,
    };
    let out = train(&mut m, &set, &set, &tc, 3, |_| {}).map_err(|e| e.to_string())?;
    if out.history.len() != 500 || out.history.iter().any(|r| r.lr != 0.01) {
        return Err(format!("ran {} epochs", out.history.len()));
    }
    Ok(())
}

// ---------------------------------------------------------------- persistence

pub fn small_checkpoint(agg: Aggregation) -> Checkpoint {
    let cfg = ModelConfig {
        conv_layers: 2,
        conv_channels: 3,
        kernel: [3, 5],
        fc_layers: 1,
        fc_width: 6,
        aggregation: agg,
        ..ModelConfig::default()
    };
    let mut sched = SchedulerState::new(SchedulerConfig::default());
    for l in [1.0, 0.5, 0.5, 0.5] {
        sched.step(l);
    }
    Checkpoint {
        model: Model::new(cfg, 12).unwrap(),
        scheduler: sched,
        epochs_completed: 4,
    }
}

fn random_lmfb(r: &mut impl Rng) -> LmfbMatrix {
    LmfbMatrix::new(7, 40, (0..280).map(|_| r.random_range(-23.0..10.0f32)).collect()).unwrap()
}

/// Save, load and re-save both file kinds; everything must match bit for bit.
pub fn persistence_round_trips(seed: u64) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng(seed);
    for agg in [Aggregation::Attention, Aggregation::AvgPool] {
        let ck = small_checkpoint(agg);
        let p = dir.path().join(format!("{agg}.ckpt"));
        save_checkpoint(&ck, &p).map_err(|e| e.to_string())?;
        let back = load_checkpoint(&p).map_err(|e| e.to_string())?;
        if back != ck {
            return Err(format!("{agg} checkpoint differs after reload"));
        }
        let p2 = dir.path().join("again.ckpt");
        save_checkpoint(&back, &p2).map_err(|e| e.to_string())?;
        if std::fs::read(&p).ok() != std::fs::read(&p2).ok() {
            return Err("re-saved checkpoint bytes differ".into());
        }
        for _ in 0..10 {
            let x: Vec<f32> = (0..20 * 40).map(|_| r.random_range(-5.0..5.0)).collect();
            let a = ck.model.forward(&x, 20).map_err(|e| e.to_string())?;
            let b = back.model.forward(&x, 20).map_err(|e| e.to_string())?;
            if a.iter().zip(&b).any(|(u, v)| u.to_bits() != v.to_bits()) {
                return Err("reloaded model infers differently".into());
            }
        }
    }
    let m = random_lmfb(&mut r);
    let p = dir.path().join("x.lmfb");
    write_lmfb(&p, &m).map_err(|e| e.to_string())?;
    let back = read_lmfb(&p).map_err(|e| e.to_string())?;
    if back.frames != m.frames || back.values.iter().zip(&m.values).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err("LMFB archive differs after reload".into());
    }
    if std::fs::read(&p).ok() != Some(encode_lmfb(&back)) {
        return Err("re-encoded archive bytes differ".into());
    }
    Ok(())
}

/// Every truncation and `flips` random single-bit flips of both file kinds
/// must be rejected as corrupt.
pub fn persistence_corruption(flips: usize, seed: u64) -> Result<usize, String> {
    let mut r = rng(seed);
    let ck = checkpoint::encode(&small_checkpoint(Aggregation::Attention)).map_err(|e| e.to_string())?;
    let lm = encode_lmfb(&random_lmfb(&mut r));
    let mut tried = 0;
    for (kind, bytes) in [("checkpoint", &ck), ("archive", &lm)] {
        let rejects = |b: &[u8]| match kind {
            "checkpoint" => matches!(checkpoint::decode(b), Err(Error::Corrupt { .. })),
            _ => matches!(decode_lmfb(b), Err(Error::Corrupt { .. })),
        };
        for len in 0..bytes.len() {
            tried += 1;
            if !rejects(&bytes[..len]) {
                return Err(format!("{kind} truncated to {len} bytes was accepted"));
            }
        }
        let mut extra = bytes.clone();
        extra.push(0);
        if !rejects(&extra) {
            return Err(format!("{kind} with a trailing byte was accepted"));
        }
        for _ in 0..flips {
            let mut b = bytes.clone();
            let i = r.random_range(0..b.len());
            b[i] ^= 1 << r.random_range(0..8);
            tried += 1;
            if !rejects(&b) {
                return Err(format!("{kind} with a bit flipped at byte {i} was accepted"));
            }
        }
    }
    Ok(tried)
}
