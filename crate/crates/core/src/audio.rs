//! Multichannel waveforms and 16-bit PCM WAV I/O.

use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Planar multichannel audio, samples nominally in `[-1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        let Some(first) = channels.first() else {
            return Err(Error::invalid("waveform needs at least one channel"));
        };
        if channels.iter().any(|c| c.len() != first.len()) {
            return Err(Error::invalid("waveform channels differ in length"));
        }
        Ok(Waveform { channels, sample_rate })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform {
            channels: vec![samples],
            sample_rate,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// First `m` channels.
    pub fn take_channels(&self, m: usize) -> Result<Waveform> {
        if m == 0 || m > self.num_channels() {
            return Err(Error::invalid(format!(
                "requested {m} channels from a {}-channel waveform",
                self.num_channels()
            )));
        }
        Ok(Waveform {
            channels: self.channels[..m].to_vec(),
            sample_rate: self.sample_rate,
        })
    }
}

fn quantize(v: f64) -> i16 {
    (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav(path: impl AsRef<Path>, wav: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: wav.num_channels() as u16,
        sample_rate: wav.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
    for i in 0..wav.len() {
        for ch in &wav.channels {
            writer.write_sample(quantize(ch[i]))?;
        }
    }
    writer.finalize()?;
    Ok(())
}

/// Reads integer or float PCM; integer samples are scaled into `[-1, 1)`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    if n_ch == 0 {
        return Err(Error::invalid("wav file declares zero channels"));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let full_scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full_scale))
                .collect::<Result<_, _>>()?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()?,
    };
    let frames = interleaved.len() / n_ch;
    let mut channels = vec![Vec::with_capacity(frames); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (c, &v) in channels.iter_mut().zip(frame) {
            c.push(v);
        }
    }
    Waveform::new(channels, spec.sample_rate)
}

/// Rounds samples to the 16-bit grid that [`write_wav`] stores.
pub fn quantize_16bit(samples: &[f64]) -> Vec<f64> {
    samples.iter().map(|&v| quantize(v) as f64 / 32768.0).collect()
}
