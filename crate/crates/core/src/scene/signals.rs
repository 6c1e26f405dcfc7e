//! Synthetic source signals: noise generators and a harmonic speech stand-in.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    /// Sum of six speech-shaped, amplitude-modulated noise streams.
    BabbleSurrogate,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "babble" | "babble_surrogate" => Ok(NoiseKind::BabbleSurrogate),
            other => Err(Error::invalid(format!("unknown noise kind {other:?}"))),
        }
    }
}

const BABBLE_STREAMS: usize = 6;

pub fn noise_source<R: Rng + ?Sized>(
    kind: NoiseKind,
    rng: &mut R,
    length: usize,
    sample_rate: u32,
) -> Result<Vec<f64>> {
    if length == 0 {
        return Err(Error::invalid("noise length must be positive"));
    }
    Ok(match kind {
        NoiseKind::White => (0..length).map(|_| rng.sample(StandardNormal)).collect(),
        NoiseKind::BabbleSurrogate => {
            let mut out = vec![0.0; length];
            for _ in 0..BABBLE_STREAMS {
                let stream = speech_shaped_stream(rng, length, sample_rate);
                out.iter_mut().zip(&stream).for_each(|(o, s)| *o += s);
            }
            normalize_rms(&mut out, 1.0);
            out
        }
    })
}

/// Pink noise (Kellet's filter), a gentle low-pass, and a 2-8 Hz syllabic envelope.
fn speech_shaped_stream<R: Rng + ?Sized>(rng: &mut R, length: usize, sample_rate: u32) -> Vec<f64> {
    let fs = sample_rate as f64;
    let mod_hz: f64 = rng.random_range(2.0..8.0);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let depth: f64 = rng.random_range(0.6..0.95);
    let lp = (-2.0 * PI * 1500.0 / fs).exp();
    let (mut b0, mut b1, mut b2, mut b3, mut b4, mut b5, mut b6) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut y = 0.0;
    let mut out = Vec::with_capacity(length);
    for n in 0..length {
        let w: f64 = rng.sample(StandardNormal);
        b0 = 0.99886 * b0 + w * 0.0555179;
        b1 = 0.99332 * b1 + w * 0.0750759;
        b2 = 0.96900 * b2 + w * 0.1538520;
        b3 = 0.86650 * b3 + w * 0.3104856;
        b4 = 0.55000 * b4 + w * 0.5329522;
        b5 = -0.7616 * b5 - w * 0.0168980;
        let pink = b0 + b1 + b2 + b3 + b4 + b5 + b6 + w * 0.5362;
        b6 = w * 0.115926;
        y = (1.0 - lp) * pink + lp * y;
        let env = 1.0 + depth * (2.0 * PI * mod_hz * n as f64 / fs + phase).sin();
        out.push(y * env);
    }
    normalize_rms(&mut out, 1.0);
    out
}

pub(crate) fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        let g = target / rms;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// RMS level of generated speech.
pub const SPEECH_RMS: f64 = 0.1;

/// Voiced "syllables" with gliding pitch, formant-shaped harmonics and short pauses.
pub fn synthetic_speech<R: Rng + ?Sized>(rng: &mut R, length: usize, sample_rate: u32) -> Vec<f64> {
    let fs = sample_rate as f64;
    let nyquist_guard = 0.45 * fs;
    let mut out = vec![0.0; length];
    let mut pos = (rng.random_range(0.02..0.1) * fs) as usize;
    while pos < length {
        let dur = (rng.random_range(0.12..0.35) * fs) as usize;
        let end = (pos + dur).min(length);
        let f0_start: f64 = rng.random_range(90.0..240.0);
        let f0_end: f64 = (f0_start * rng.random_range(0.75..1.3)).clamp(80.0, 260.0);
        let f1: f64 = rng.random_range(300.0..900.0);
        let f2: f64 = rng.random_range(900.0..2500.0);
        let f3: f64 = rng.random_range(2500.0..3500.0);
        let formant = |f: f64| {
            let bump = |c: f64, bw: f64, g: f64| g * (-0.5 * ((f - c) / bw).powi(2)).exp();
            (bump(f1, 120.0, 1.0) + bump(f2, 180.0, 0.6) + bump(f3, 250.0, 0.25) + 0.02) * (200.0 / f.max(200.0)).sqrt()
        };
        let mut phase = 0.0f64;
        let span = (end - pos).max(1) as f64;
        for n in pos..end {
            let u = (n - pos) as f64 / span;
            let f0 = f0_start + (f0_end - f0_start) * u;
            phase += 2.0 * PI * f0 / fs;
            let env = (PI * u).sin().powf(0.6);
            let mut v = 0.0;
            let mut k = 1;
            while k as f64 * f0 < nyquist_guard.min(4000.0) {
                v += formant(k as f64 * f0) * (k as f64 * phase).sin();
                k += 1;
            }
            out[n] = env * v;
        }
        pos = end + (rng.random_range(0.03..0.15) * fs) as usize;
    }
    normalize_rms(&mut out, SPEECH_RMS);
    out
}
