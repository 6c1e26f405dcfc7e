//! Waveform <-> feature conversion and the enhancement pipeline.
//!
//! Inputs are scaled so the reference channel has RMS `input_rms`, padded
//! with `fft_size / 2` zeros on the left and enough on the right to complete
//! the last hop, transformed and magnitude-compressed. Enhancement reverses
//! every step, so the output has the input length and level.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::net::ScoreNet;
use crate::sde::{pc_sample, Conditioner, GaussianNoise, SdeParams};
use crate::stft::{compress, decompress, istft, stft, Compression, Spectrogram, StftParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FrontEnd {
    pub stft: StftParams,
    pub compression: Compression,
    /// Reference-channel RMS after normalization.
    pub input_rms: f64,
}

impl Default for FrontEnd {
    fn default() -> Self {
        FrontEnd {
            stft: StftParams::default(),
            compression: Compression::default(),
            input_rms: 1e-3,
        }
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// One training example in the compressed domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    /// `[2, T, F]`
    pub target: Tensor,
    /// `[M, 2, T, F]`
    pub noisy: Tensor,
}

impl Pair {
    pub fn frames(&self) -> usize {
        self.target.shape()[1]
    }

    /// Frames `start..start + len` of both tensors.
    pub fn crop_frames(&self, start: usize, len: usize) -> Result<Pair> {
        Ok(Pair {
            target: slice_frames(&self.target, start, len)?,
            noisy: slice_frames(&self.noisy, start, len)?,
        })
    }
}

fn slice_frames(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let r = x.rank();
    let (t, f) = (x.shape()[r - 2], x.shape()[r - 1]);
    if len == 0 || start + len > t {
        return Err(Error::invalid(format!("frames {start}..{} of {t}", start + len)));
    }
    let outer = x.len() / (t * f);
    let mut data = Vec::with_capacity(outer * len * f);
    for o in 0..outer {
        data.extend_from_slice(&x.data()[(o * t + start) * f..(o * t + start + len) * f]);
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = len;
    Tensor::new(shape, data)
}

impl FrontEnd {
    /// Gain that brings the reference channel to `input_rms`.
    pub fn gain(&self, noisy: &Waveform) -> Result<f64> {
        let r = rms(noisy.channel(0));
        if r == 0.0 || !r.is_finite() {
            return Err(Error::invalid("reference channel is silent or non-finite"));
        }
        Ok(self.input_rms / r)
    }

    fn padding(&self, len: usize) -> (usize, usize) {
        let half = self.stft.fft_size() / 2;
        let hop = self.stft.hop();
        (half, half + (hop - len % hop) % hop)
    }

    /// Scaled, padded, transformed and compressed channels: `[C, 2, T, F]`.
    pub fn features(&self, wave: &Waveform, gain: f64) -> Result<Tensor> {
        let (left, right) = self.padding(wave.len());
        let channels = wave
            .channels()
            .iter()
            .map(|c| {
                let mut v = vec![0.0; left];
                v.extend(c.iter().map(|x| x * gain));
                v.resize(left + c.len() + right, 0.0);
                v
            })
            .collect();
        let padded = Waveform::new(channels, wave.sample_rate())?;
        Ok(compress(stft(&padded, &self.stft)?, self.compression)?.into_values())
    }

    /// Inverse of [`FrontEnd::features`] for a single `[2, T, F]` channel.
    pub fn waveform(&self, values: &Tensor, gain: f64, len: usize) -> Result<Vec<f64>> {
        let &[2, t, f] = values.shape() else {
            return Err(Error::shape(
                "waveform",
                format!("expected [2, T, F], got {:?}", values.shape()),
            ));
        };
        let spec = Spectrogram::from_values(values.clone().reshape(&[1, 2, t, f])?, self.stft.clone(), true)?;
        let wave = istft(&decompress(spec, self.compression)?)?;
        let (left, _) = self.padding(len);
        let out = wave.channel(0);
        if out.len() < left + len {
            return Err(Error::invalid("spectrogram too short for the requested length"));
        }
        Ok(out[left..left + len].iter().map(|v| v / gain).collect())
    }

    /// Builds a training pair from the first `m` noisy channels and the dry target.
    ///
    /// The target is rescaled to its least-squares level in the reference
    /// channel, then both share the reference normalization gain.
    pub fn pair(&self, noisy: &Waveform, target: &[f64], m: usize) -> Result<Pair> {
        let x = noisy.take_channels(m)?;
        if target.len() != x.len() {
            return Err(Error::invalid(format!(
                "target has {} samples, noisy {}",
                target.len(),
                x.len()
            )));
        }
        let energy: f64 = target.iter().map(|v| v * v).sum();
        if energy == 0.0 {
            return Err(Error::invalid("target is silent"));
        }
        let level = x.channel(0).iter().zip(target).map(|(a, b)| a * b).sum::<f64>() / energy;
        let gain = self.gain(&x)?;
        let aligned = Waveform::mono(target.iter().map(|v| v * level).collect(), x.sample_rate());
        let target = self.features(&aligned, gain)?;
        let shape = target.shape()[1..].to_vec();
        Ok(Pair {
            target: target.reshape(&shape)?,
            noisy: self.features(&x, gain)?,
        })
    }
}

/// Runs the reverse diffusion for one multichannel recording and returns the
/// enhanced reference channel at the input's length and level.
pub fn enhance(net: &ScoreNet, noisy: &Waveform, fe: &FrontEnd, sde: &SdeParams, seed: u64) -> Result<Vec<f64>> {
    let m = net.arch.num_mics;
    if noisy.num_channels() != m {
        return Err(Error::invalid(format!(
            "input has {} channels, model expects {m}",
            noisy.num_channels()
        )));
    }
    if noisy.sample_rate() != fe.stft.sample_rate() {
        return Err(Error::invalid(format!(
            "input sample rate {} Hz, model uses {} Hz",
            noisy.sample_rate(),
            fe.stft.sample_rate()
        )));
    }
    let gain = fe.gain(noisy)?;
    let x = fe.features(noisy, gain)?;
    let plane: Vec<usize> = x.shape()[1..].to_vec();
    let per = x.len() / m;
    let chans: Vec<Tensor> = (0..m)
        .map(|i| Tensor::new(plane.clone(), x.data()[i * per..(i + 1) * per].to_vec()))
        .collect::<Result<_>>()?;
    let cond = Conditioner {
        reference: chans[0].clone(),
        others: chans[1..].to_vec(),
    };
    let mut score = |s: &Tensor, t: f64, _: &Tensor, _: &[Tensor]| net.score(s, &x, t, sde);
    let mut noise = GaussianNoise(ChaCha8Rng::seed_from_u64(seed));
    let out = pc_sample(&mut score, &cond, sde, &mut noise, None)?;
    fe.waveform(&out, gain, noisy.len())
}

/// Stores the front-end and sampler settings as checkpoint metadata.
pub fn write_settings(meta: &mut BTreeMap<String, String>, fe: &FrontEnd, sde: &SdeParams) {
    let entries = [
        ("fft_size", fe.stft.fft_size().to_string()),
        ("hop", fe.stft.hop().to_string()),
        ("sample_rate", fe.stft.sample_rate().to_string()),
        ("compression_alpha", format!("{:?}", fe.compression.alpha)),
        ("compression_beta", format!("{:?}", fe.compression.beta)),
        ("input_rms", format!("{:?}", fe.input_rms)),
        ("gamma", format!("{:?}", sde.gamma)),
        ("sigma_min", format!("{:?}", sde.sigma_min)),
        ("sigma_max", format!("{:?}", sde.sigma_max)),
        ("t_eps", format!("{:?}", sde.t_eps)),
        ("n_steps", sde.n_steps.to_string()),
        ("corrector_steps", sde.corrector_steps.to_string()),
        ("corrector_snr", format!("{:?}", sde.corrector_snr)),
    ];
    for (k, v) in entries {
        meta.insert(k.to_string(), v);
    }
}

/// Inverse of [`write_settings`].
pub fn read_settings(meta: &BTreeMap<String, String>) -> Result<(FrontEnd, SdeParams)> {
    fn get<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
        let v = meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("metadata lacks {key:?}")))?;
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("metadata {key}={v:?} is malformed")))
    }
    let fe = FrontEnd {
        stft: StftParams::new(get(meta, "fft_size")?, get(meta, "hop")?, get(meta, "sample_rate")?)?,
        compression: Compression {
            alpha: get(meta, "compression_alpha")?,
            beta: get(meta, "compression_beta")?,
        },
        input_rms: get(meta, "input_rms")?,
    };
    let sde = SdeParams {
        gamma: get(meta, "gamma")?,
        sigma_min: get(meta, "sigma_min")?,
        sigma_max: get(meta, "sigma_max")?,
        t_eps: get(meta, "t_eps")?,
        n_steps: get(meta, "n_steps")?,
        corrector_steps: get(meta, "corrector_steps")?,
        corrector_snr: get(meta, "corrector_snr")?,
    };
    sde.validate()?;
    Ok((fe, sde))
}
