//! Image-source room impulse responses.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{distance, SceneConfig, Vec3};
use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Half-width of the windowed-sinc fractional-delay pulse (81 taps in total).
pub const PULSE_HALF_WIDTH: usize = 40;

#[derive(Clone, Debug, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
}

impl Rir {
    /// Index of the largest-magnitude tap, i.e. the direct-path arrival.
    pub fn peak_index(&self) -> usize {
        self.taps
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Frequency-independent wall reflection coefficient from Sabine's formula
/// `rt60 = 0.161 V / (S (1 - beta^2))`, clamped to 0 when the requested decay
/// is shorter than a fully absorbing room allows.
pub fn reflection_coefficient(room: Vec3, rt60: f64) -> f64 {
    let [lx, ly, lz] = room;
    let volume = lx * ly * lz;
    let surface = 2.0 * (lx * ly + lx * lz + ly * lz);
    let absorption = 0.161 * volume / (surface * rt60);
    if absorption >= 1.0 {
        0.0
    } else {
        (1.0 - absorption).sqrt()
    }
}

/// Adds `gain * sinc(n - delay) * hann(n - delay)` around `delay` into `out`.
pub(crate) fn add_pulse(out: &mut [f64], delay: f64, gain: f64) {
    let center = delay.round() as isize;
    let frac = delay - center as f64;
    let hw = PULSE_HALF_WIDTH as isize;
    // sin(pi (k - frac)) = (-1)^k sin(-pi frac), computed once
    let base_sin = (-std::f64::consts::PI * frac).sin();
    for k in -hw..=hw {
        let idx = center + k;
        if idx < 0 || idx as usize >= out.len() {
            continue;
        }
        let u = k as f64 - frac;
        let sinc = if u.abs() < 1e-12 {
            1.0
        } else {
            let s = if k % 2 == 0 { base_sin } else { -base_sin };
            s / (std::f64::consts::PI * u)
        };
        let window = 0.5 * (1.0 + (std::f64::consts::PI * u / (hw as f64 + 1.0)).cos());
        out[idx as usize] += gain * sinc * window;
    }
}

/// RIR length: `1.5 rt60` seconds, extended to hold the direct-path pulse.
fn rir_len(config: &SceneConfig, direct_delay: f64) -> usize {
    let decay = (1.5 * config.rt60 * config.sample_rate as f64).ceil() as usize;
    decay.max(direct_delay.ceil() as usize + PULSE_HALF_WIDTH + 2)
}

pub fn simulate_rir(config: &SceneConfig, mic_index: usize) -> Result<Rir> {
    config.validate()?;
    let mic = *config
        .mics
        .get(mic_index)
        .ok_or_else(|| Error::invalid(format!("no microphone {mic_index}")))?;
    let src = config.source;
    let direct = distance(src, mic);
    if direct < 1e-6 {
        return Err(Error::invalid("source coincides with microphone"));
    }
    let fs = config.sample_rate as f64;
    let len = rir_len(config, direct / SPEED_OF_SOUND * fs);
    let beta = reflection_coefficient(config.room, config.rt60);
    let mut taps = vec![0.0; len];
    let max_dist = (len + PULSE_HALF_WIDTH) as f64 / fs * SPEED_OF_SOUND;

    if beta == 0.0 {
        add_pulse(
            &mut taps,
            direct / SPEED_OF_SOUND * fs,
            1.0 / (4.0 * std::f64::consts::PI * direct),
        );
        return Ok(Rir {
            taps,
            sample_rate: config.sample_rate,
        });
    }

    let orders: Vec<isize> = config
        .room
        .iter()
        .map(|&l| (max_dist / (2.0 * l)).ceil() as isize + 1)
        .collect();
    // per-axis image offsets and reflection counts
    let axis_images = |axis: usize| -> Vec<(f64, i32)> {
        let l = config.room[axis];
        let n = orders[axis];
        let mut v = Vec::new();
        for m in -n..=n {
            for q in 0..=1i32 {
                let pos = (1 - 2 * q) as f64 * src[axis] + 2.0 * m as f64 * l;
                let refl = (m - q as isize).unsigned_abs() + m.unsigned_abs();
                v.push((pos - mic[axis], refl as i32));
            }
        }
        v
    };
    let (xs, ys, zs) = (axis_images(0), axis_images(1), axis_images(2));
    for &(dx, rx) in &xs {
        if dx.abs() > max_dist {
            continue;
        }
        for &(dy, ry) in &ys {
            let dxy2 = dx * dx + dy * dy;
            if dxy2 > max_dist * max_dist {
                continue;
            }
            for &(dz, rz) in &zs {
                let d = (dxy2 + dz * dz).sqrt();
                if d > max_dist {
                    continue;
                }
                let gain = beta.powi(rx + ry + rz) / (4.0 * std::f64::consts::PI * d);
                add_pulse(&mut taps, d / SPEED_OF_SOUND * fs, gain);
            }
        }
    }
    Ok(Rir {
        taps,
        sample_rate: config.sample_rate,
    })
}

/// Linear convolution truncated to `signal.len()` samples.
pub fn convolve_truncated(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = signal.len();
    if n == 0 || kernel.is_empty() {
        return vec![0.0; n];
    }
    if kernel.len() * n < 1 << 16 {
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            for (j, &k) in kernel.iter().enumerate().take(i + 1) {
                *o += k * signal[i - j];
            }
        }
        return out;
    }
    let size = (n + kernel.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |x: &[f64]| {
        let mut v: Vec<Complex<f64>> = x.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(size, Complex::new(0.0, 0.0));
        v
    };
    let mut a = pad(signal);
    let mut b = pad(kernel);
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(x, y)| *x *= y);
    inv.process(&mut a);
    a[..n].iter().map(|c| c.re / size as f64).collect()
}

/// Reverberation time from Schroeder backward integration, fitted on the
/// -5 dB to -25 dB range of the decay curve and extrapolated to 60 dB.
pub fn schroeder_t60(taps: &[f64], sample_rate: u32) -> Option<f64> {
    let mut edc: Vec<f64> = taps.iter().map(|v| v * v).collect();
    for i in (0..edc.len() - 1).rev() {
        edc[i] += edc[i + 1];
    }
    let total = edc[0];
    if total <= 0.0 {
        return None;
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / total).max(1e-300).log10()).collect();
    let start = db.iter().position(|&d| d <= -5.0)?;
    let end = db.iter().position(|&d| d <= -25.0)?;
    if end <= start + 1 {
        return None;
    }
    // least-squares slope in dB per sample
    let pts: Vec<(f64, f64)> = (start..=end).map(|i| (i as f64, db[i])).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope < 0.0).then(|| -60.0 / slope / sample_rate as f64)
}
