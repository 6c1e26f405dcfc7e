//! STFT analysis/synthesis and magnitude compression.
//!
//! Spectrogram values are stored as `[channels, 2, frames, bins]`, with the
//! real plane at index 0 and the imaginary plane at index 1.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StftParams {
    fft_size: usize,
    hop: usize,
    sample_rate: u32,
    window: Vec<f64>,
}

impl StftParams {
    pub fn new(fft_size: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        if fft_size < 4 || hop == 0 || !fft_size.is_multiple_of(hop) || hop > fft_size / 2 {
            return Err(Error::invalid(format!(
                "stft: hop {hop} must divide fft size {fft_size} and be at most half of it"
            )));
        }
        Ok(StftParams {
            fft_size,
            hop,
            sample_rate,
            window: periodic_hann(fft_size),
        })
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn num_frames(&self, len: usize) -> usize {
        1 + (len - self.fft_size) / self.hop
    }

    /// Waveform length produced by [`istft`] for `frames` frames.
    pub fn output_len(&self, frames: usize) -> usize {
        (frames - 1) * self.hop + self.fft_size
    }
}

impl Default for StftParams {
    fn default() -> Self {
        StftParams::new(512, 128, 16_000).expect("valid defaults")
    }
}

pub fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    values: Tensor,
    params: StftParams,
    compressed: bool,
}

impl Spectrogram {
    pub fn from_values(values: Tensor, params: StftParams, compressed: bool) -> Result<Self> {
        match *values.shape() {
            [_, 2, _, bins] if bins == params.bins() => Ok(Spectrogram {
                values,
                params,
                compressed,
            }),
            ref s => Err(Error::shape(
                "spectrogram",
                format!("expected [C, 2, frames, {}], got {s:?}", params.bins()),
            )),
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn params(&self) -> &StftParams {
        &self.params
    }

    pub fn is_compressed(&self) -> bool {
        self.compressed
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn bins(&self) -> usize {
        self.values.shape()[3]
    }

    /// `[2, frames, bins]` planes of one channel.
    pub fn channel(&self, c: usize) -> Tensor {
        let n = 2 * self.frames() * self.bins();
        Tensor::new(
            vec![2, self.frames(), self.bins()],
            self.values.data()[c * n..(c + 1) * n].to_vec(),
        )
        .expect("channel slice")
    }

    /// Complex value of channel `c`, frame `l`, bin `k`.
    pub fn at(&self, c: usize, l: usize, k: usize) -> Complex<f64> {
        let (t, f) = (self.frames(), self.bins());
        let base = c * 2 * t * f + l * f + k;
        Complex::new(self.values.data()[base], self.values.data()[base + t * f])
    }

    fn map_magnitudes(mut self, f: impl Fn(f64) -> f64) -> Self {
        let plane = self.frames() * self.bins();
        let data = self.values.data_mut();
        for chunk in data.chunks_mut(2 * plane) {
            let (re, im) = chunk.split_at_mut(plane);
            for (r, i) in re.iter_mut().zip(im.iter_mut()) {
                let mag = r.hypot(*i);
                if mag > 0.0 {
                    let g = f(mag) / mag;
                    *r *= g;
                    *i *= g;
                }
            }
        }
        self
    }
}

pub fn stft(wave: &Waveform, params: &StftParams) -> Result<Spectrogram> {
    let n = params.fft_size;
    if wave.len() < n {
        return Err(Error::invalid(format!(
            "stft: input of {} samples is shorter than the fft size {n}",
            wave.len()
        )));
    }
    let frames = params.num_frames(wave.len());
    let bins = params.bins();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut out = vec![0.0; wave.num_channels() * 2 * frames * bins];
    for (c, ch) in wave.channels().iter().enumerate() {
        let base = c * 2 * frames * bins;
        for l in 0..frames {
            let seg = &ch[l * params.hop..l * params.hop + n];
            for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(&params.window) {
                *b = Complex::new(x * w, 0.0);
            }
            fft.process(&mut buf);
            for (k, v) in buf[..bins].iter().enumerate() {
                out[base + l * bins + k] = v.re;
                out[base + frames * bins + l * bins + k] = v.im;
            }
        }
    }
    let values = Tensor::new(vec![wave.num_channels(), 2, frames, bins], out)?;
    Spectrogram::from_values(values, params.clone(), false)
}

/// Weighted overlap-add inverse: each frame is synthesis-windowed and the sum
/// is divided by the accumulated squared window.
pub fn istft(spec: &Spectrogram) -> Result<Waveform> {
    if spec.compressed {
        return Err(Error::invalid("istft: spectrogram is compressed; decompress first"));
    }
    let params = &spec.params;
    let (n, hop) = (params.fft_size, params.hop);
    let (frames, bins) = (spec.frames(), spec.bins());
    let len = params.output_len(frames);
    let mut norm = vec![0.0; len];
    for l in 0..frames {
        for (i, &w) in params.window.iter().enumerate() {
            norm[l * hop + i] += w * w;
        }
    }
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut channels = Vec::with_capacity(spec.channels());
    for c in 0..spec.channels() {
        let mut y = vec![0.0; len];
        for l in 0..frames {
            for k in 0..bins {
                buf[k] = spec.at(c, l, k);
            }
            // Hermitian completion; DC and Nyquist must be real for a real frame.
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            for k in 1..n / 2 {
                buf[n - k] = buf[k].conj();
            }
            ifft.process(&mut buf);
            for (i, (v, &w)) in buf.iter().zip(&params.window).enumerate() {
                y[l * hop + i] += v.re / n as f64 * w;
            }
        }
        for (v, &d) in y.iter_mut().zip(&norm) {
            *v = if d > 1e-10 { *v / d } else { 0.0 };
        }
        channels.push(y);
    }
    Waveform::new(channels, params.sample_rate)
}

/// Magnitude compression constants `|x| -> beta * |x|^alpha`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Compression {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for Compression {
    fn default() -> Self {
        Compression { alpha: 0.5, beta: 3.0 }
    }
}

pub fn compress(spec: Spectrogram, c: Compression) -> Result<Spectrogram> {
    if spec.compressed {
        return Err(Error::invalid("compress: spectrogram is already compressed"));
    }
    let mut out = spec.map_magnitudes(|m| c.beta * m.powf(c.alpha));
    out.compressed = true;
    Ok(out)
}

pub fn decompress(spec: Spectrogram, c: Compression) -> Result<Spectrogram> {
    if !spec.compressed {
        return Err(Error::invalid("decompress: spectrogram is not compressed"));
    }
    let mut out = spec.map_magnitudes(|m| (m / c.beta).powf(1.0 / c.alpha));
    out.compressed = false;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mono(x: Vec<f64>) -> Waveform {
        Waveform::mono(x, 16_000)
    }

    /// Naive O(N^2) DFT of one windowed frame.
    fn dft(frame: &[f64]) -> Vec<Complex<f64>> {
        let n = frame.len();
        (0..n / 2 + 1)
            .map(|k| {
                frame.iter().enumerate().fold(Complex::new(0.0, 0.0), |acc, (i, &x)| {
                    let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                    acc + Complex::new(x * ang.cos(), x * ang.sin())
                })
            })
            .collect()
    }

    #[test]
    fn params_validate_hop() {
        assert!(StftParams::new(512, 384, 16_000).is_err());
        assert!(StftParams::new(512, 512, 16_000).is_err());
        assert!(StftParams::new(512, 256, 16_000).is_ok());
    }

    #[test]
    fn zero_in_zero_out() {
        let p = StftParams::default();
        let s = stft(&mono(vec![0.0; 2048]), &p).unwrap();
        assert_eq!(s.frames(), 1 + (2048 - 512) / 128);
        assert!(s.values().data().iter().all(|&v| v == 0.0));
        let w = istft(&s).unwrap();
        assert!(w.channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_rejected() {
        assert!(stft(&mono(vec![0.0; 100]), &StftParams::default()).is_err());
    }

    #[test]
    fn impulse_has_flat_magnitude_equal_to_window() {
        let p = StftParams::new(64, 16, 16_000).unwrap();
        let mut x = vec![0.0; 64];
        let pos = 20;
        x[pos] = 1.0;
        let s = stft(&mono(x), &p).unwrap();
        for k in 0..p.bins() {
            assert!((s.at(0, 0, k).norm() - p.window()[pos]).abs() < 1e-12);
        }
    }

    #[test]
    fn sinusoid_peaks_at_its_bin_and_matches_naive_dft() {
        let p = StftParams::new(128, 32, 16_000).unwrap();
        let k0 = 9;
        let x: Vec<f64> = (0..512)
            .map(|i| (2.0 * std::f64::consts::PI * k0 as f64 * i as f64 / 128.0).sin())
            .collect();
        let s = stft(&mono(x.clone()), &p).unwrap();
        for l in 0..s.frames() {
            let mags: Vec<f64> = (0..p.bins()).map(|k| s.at(0, l, k).norm()).collect();
            let argmax = mags.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(argmax, k0);
            let frame: Vec<f64> = x[l * 32..l * 32 + 128]
                .iter()
                .zip(p.window())
                .map(|(a, w)| a * w)
                .collect();
            for (k, want) in dft(&frame).into_iter().enumerate() {
                assert!((s.at(0, l, k) - want).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn white_noise_round_trip_above_60db() {
        let p = StftParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[8192], &mut rng).into_data();
        let y = istft(&stft(&mono(x.clone()), &p).unwrap()).unwrap();
        let (a, b) = (512, y.len() - 512);
        let sig: f64 = x[a..b].iter().map(|v| v * v).sum();
        let err: f64 = x[a..b]
            .iter()
            .zip(&y.channel(0)[a..b])
            .map(|(u, v)| (u - v).powi(2))
            .sum();
        assert!(10.0 * (sig / err).log10() > 60.0);
    }

    #[test]
    fn single_frame_inverse_matches_naive_idft() {
        let p = StftParams::new(32, 8, 16_000).unwrap();
        let mut x = vec![0.0; 32];
        x[13] = 1.0;
        let s = stft(&mono(x), &p).unwrap();
        assert_eq!(s.frames(), 1);
        let y = istft(&s).unwrap();
        // direct inverse DFT of the one-sided spectrum, then synthesis window / w^2
        let n = 32;
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                let kk = if k <= n / 2 { k } else { n - k };
                let v = s.at(0, 0, kk);
                let v = if k <= n / 2 { v } else { v.conj() };
                let ang = 2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                acc += v.re * ang.cos() - v.im * ang.sin();
            }
            let frame = acc / n as f64;
            let w = p.window()[i];
            let want = if w * w > 1e-10 { frame * w / (w * w) } else { 0.0 };
            assert!((y.channel(0)[i] - want).abs() < 1e-12, "sample {i}");
        }
        assert!((y.channel(0)[13] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn parseval_tracks_window_energy() {
        let p = StftParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[64_000], &mut rng).into_data();
        let s = stft(&mono(x.clone()), &p).unwrap();
        let n = p.fft_size();
        let mut spec_energy = 0.0;
        for l in 0..s.frames() {
            for k in 0..p.bins() {
                let w = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
                spec_energy += w * s.at(0, l, k).norm_sqr();
            }
        }
        spec_energy /= n as f64;
        let covered = p.output_len(s.frames());
        let wave_energy: f64 = x[..covered].iter().map(|v| v * v).sum();
        let win_sq: f64 = p.window().iter().map(|w| w * w).sum();
        let expected = wave_energy * win_sq / p.hop() as f64;
        assert!((spec_energy / expected - 1.0).abs() < 0.01);
    }

    fn random_spec(seed: u64) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = StftParams::new(16, 4, 16_000).unwrap();
        let v = Tensor::randn(&[2, 2, 5, 9], &mut rng);
        Spectrogram::from_values(v, p, false).unwrap()
    }

    #[test]
    fn compression_constants() {
        let p = StftParams::new(4, 2, 16_000).unwrap();
        // magnitude 4 at angle atan2(-3.2, 2.4), and one zero bin
        let mut v = vec![0.0; 12];
        v[0] = 2.4;
        v[6] = -3.2;
        let s = Spectrogram::from_values(Tensor::new(vec![1, 2, 2, 3], v).unwrap(), p, false).unwrap();
        let c = compress(s.clone(), Compression::default()).unwrap();
        assert!((c.at(0, 0, 0).norm() - 6.0).abs() < 1e-12);
        assert!((c.at(0, 0, 0).arg() - s.at(0, 0, 0).arg()).abs() < 1e-15);
        assert_eq!(c.at(0, 0, 1).norm(), 0.0);
        let d = decompress(c, Compression::default()).unwrap();
        assert!((d.at(0, 0, 0).norm() - 4.0).abs() < 1e-12);
        assert_eq!(d.at(0, 0, 1).norm(), 0.0);
    }

    #[test]
    fn compression_is_a_strict_toggle() {
        let s = random_spec(1);
        assert!(decompress(s.clone(), Compression::default()).is_err());
        let c = compress(s, Compression::default()).unwrap();
        assert!(c.is_compressed());
        assert!(istft(&c).is_err());
        assert!(compress(c, Compression::default()).is_err());
    }

    #[test]
    fn compression_preserves_phase() {
        let s = random_spec(3);
        let c = compress(s.clone(), Compression::default()).unwrap();
        for l in 0..s.frames() {
            for k in 0..s.bins() {
                let (a, b) = (s.at(1, l, k).arg(), c.at(1, l, k).arg());
                assert!((a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(1.0));
            }
        }
    }

    mod props {
        use super::*;
        use crate::tensor::relative_error;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn compression_round_trips(seed in 0u64..10_000, alpha in 0.2f64..1.0, beta in 0.1f64..5.0) {
                let c = Compression { alpha, beta };
                let s = random_spec(seed);
                let back = decompress(compress(s.clone(), c).unwrap(), c).unwrap();
                prop_assert!(relative_error(back.values().data(), s.values().data()) < 1e-10);
                let comp = compress(s, c).unwrap();
                let again = compress(decompress(comp.clone(), c).unwrap(), c).unwrap();
                prop_assert!(relative_error(again.values().data(), comp.values().data()) < 1e-10);
            }
        }
    }
}
