//! Synthetic stand-ins for recorded utterances and background noise.
//!
//! A voice is a sequence of syllables separated by pauses. Each syllable is
//! a harmonic series on a jittered, gliding fundamental with a vibrato,
//! harmonic amplitudes falling as `1/h` and mildly boosted near three random
//! formants, under a smooth attack/decay envelope. Pauses are digital
//! silence so activity is unambiguous.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::{AudioSegment, DspConfig, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng;

pub const MIN_F0: f64 = 60.0;
pub const MAX_F0: f64 = 400.0;

const SR: f64 = SAMPLE_RATE as f64;

fn secs(rng: &mut impl Rng, lo: f64, hi: f64) -> usize {
    (rng.random_range(lo..hi) * SR) as usize
}

fn formant_gain(f: f64, formants: &[(f64, f64)]) -> f64 {
    formants
        .iter()
        .map(|&(c, bw)| (-((f - c) / bw).powi(2)).exp())
        .fold(0.0, f64::max)
}

/// Harmonic-rich voiced source lasting `duration_frames` analysis frames.
/// Deterministic in `(f0, duration_frames, seed)`.
pub fn synth_voice(f0: f64, duration_frames: usize, seed: u64) -> Result<AudioSegment> {
    if !(MIN_F0..=MAX_F0).contains(&f0) {
        return Err(Error::Config(format!("f0 {f0} Hz outside [{MIN_F0}, {MAX_F0}]")));
    }
    let n = DspConfig::default().samples_for_frames(duration_frames);
    let mut out = vec![0.0; n];
    let mut rng = rng::stream(seed, &[0x766f_6963]);
    let jitter = Normal::new(0.0, 0.004).expect("valid sigma");

    let vib_rate = rng.random_range(4.0..7.0);
    let vib_depth = rng.random_range(0.01..0.03);
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let mut t = secs(&mut rng, 0.0, 0.12);
    let mut phase = 0.0f64;

    while t < n {
        let len = secs(&mut rng, 0.08, 0.28);
        let pitch = f0 * (1.0 + rng.random_range(-0.08..0.08));
        let glide = rng.random_range(-0.1..0.1);
        let level = rng.random_range(0.4..1.0);
        let formants = [
            (rng.random_range(300.0..850.0), rng.random_range(100.0..180.0)),
            (rng.random_range(900.0..2400.0), rng.random_range(140.0..220.0)),
            (rng.random_range(2400.0..3300.0), rng.random_range(160.0..260.0)),
        ];
        let n_harm = ((4000.0 / pitch) as usize).clamp(1, 40);
        let amps: Vec<f64> = (1..=n_harm)
            .map(|h| (0.6 + 0.4 * formant_gain(h as f64 * pitch, &formants)) / h as f64)
            .collect();
        let attack = (0.02 * SR) as usize;
        let release = (0.035 * SR) as usize;
        let mut micro = 1.0f64;

        for i in 0..len.min(n - t) {
            if i % 80 == 0 {
                micro = (micro + jitter.sample(&mut rng)).clamp(0.97, 1.03);
            }
            let time = (t + i) as f64 / SR;
            let f = pitch
                * (1.0 + glide * i as f64 / len as f64)
                * (1.0 + vib_depth * (2.0 * PI * vib_rate * time + vib_phase).sin())
                * micro;
            phase = (phase + 2.0 * PI * f / SR) % (2.0 * PI);
            // sin(h * phase) by the Chebyshev recurrence
            let (s1, c2) = (phase.sin(), 2.0 * phase.cos());
            let (mut prev, mut cur) = (0.0, s1);
            let mut acc = 0.0;
            for &a in &amps {
                acc += a * cur;
                let next = c2 * cur - prev;
                prev = cur;
                cur = next;
            }
            let env = if i < attack {
                0.5 - 0.5 * (PI * i as f64 / attack as f64).cos()
            } else if i + release > len {
                0.5 - 0.5 * (PI * (len - i) as f64 / release as f64).cos()
            } else {
                1.0
            };
            out[t + i] = level * env * acc;
        }
        let gap = if rng.random_bool(0.7) {
            secs(&mut rng, 0.04, 0.15)
        } else {
            secs(&mut rng, 0.2, 0.6)
        };
        t += len + gap;
    }

    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|x| *x *= 0.5 / peak);
    }
    Ok(AudioSegment::new(out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Very low-level white noise, as in a quiet recording.
    Silence,
    /// Coloured, slowly modulated noise.
    Environmental,
}

/// Non-speech background of `n` samples at roughly `level_db` dBFS RMS.
pub fn synth_noise(kind: NoiseKind, n: usize, level_db: f64, seed: u64) -> AudioSegment {
    let mut rng = rng::stream(seed, &[0x6e6f_6973]);
    let white = Normal::new(0.0, 1.0).expect("valid sigma");
    let mut x: Vec<f64> = (0..n).map(|_| white.sample(&mut rng)).collect();
    if kind == NoiseKind::Environmental {
        let lp = rng.random_range(0.0..0.97);
        let hp_mix = rng.random_range(0.0..0.6);
        let mod_rate = rng.random_range(0.2..4.0);
        let mod_depth = rng.random_range(0.0..0.8);
        let mod_phase = rng.random_range(0.0..2.0 * PI);
        let mut y = 0.0;
        for (i, v) in x.iter_mut().enumerate() {
            y = lp * y + (1.0 - lp) * *v;
            let coloured = (1.0 - hp_mix) * y + hp_mix * (*v - y);
            let m = 1.0 + mod_depth * (2.0 * PI * mod_rate * i as f64 / SR + mod_phase).sin();
            *v = coloured * m;
        }
    }
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        let k = 10f64.powf(level_db / 20.0) / rms;
        x.iter_mut().for_each(|v| *v *= k);
    }
    AudioSegment::new(x)
}
