//! Multichannel noisy-reverberant scene simulation.
//!
//! Every microphone signal is the source convolved with its room impulse
//! response plus additive noise, `x_m = h_m * s + v_m`. The noise gain is set
//! so the reference microphone (index 0) reaches the configured SNR over the
//! whole utterance.

mod rir;
mod signals;

pub use rir::{
    convolve_truncated, reflection_coefficient, schroeder_t60, simulate_rir, Rir, PULSE_HALF_WIDTH, SPEED_OF_SOUND,
};
pub use signals::{noise_source, synthetic_speech, NoiseKind, SPEECH_RMS};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;

use crate::audio::Waveform;
use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub const WALL_CLEARANCE: f64 = 0.1;
pub const REFERENCE_MIC: usize = 0;
/// Consecutive spacings of the four-microphone linear array, in meters.
pub const STANDARD_MIC_SPACINGS: [f64; 3] = [0.08, 0.06, 0.08];

pub(crate) fn distance(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub room: Vec3,
    pub source: Vec3,
    pub mics: Vec<Vec3>,
    pub rt60: f64,
    pub snr_db: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.room.iter().any(|&l| !(l > 2.0 * WALL_CLEARANCE)) {
            return Err(Error::invalid(format!("room dimensions {:?} too small", self.room)));
        }
        if self.mics.is_empty() {
            return Err(Error::invalid("scene needs at least one microphone"));
        }
        let inside = |p: &Vec3| {
            p.iter()
                .zip(&self.room)
                .all(|(&c, &l)| c >= WALL_CLEARANCE && c <= l - WALL_CLEARANCE)
        };
        if !inside(&self.source) {
            return Err(Error::invalid(format!(
                "source {:?} closer than {WALL_CLEARANCE} m to a wall",
                self.source
            )));
        }
        if let Some(m) = self.mics.iter().find(|m| !inside(m)) {
            return Err(Error::invalid(format!(
                "microphone {m:?} closer than {WALL_CLEARANCE} m to a wall"
            )));
        }
        if !(self.rt60 > 0.0) || !self.snr_db.is_finite() || self.sample_rate == 0 {
            return Err(Error::invalid(format!(
                "rt60 {} must be positive and snr {} finite",
                self.rt60, self.snr_db
            )));
        }
        Ok(())
    }

    /// Direct-path delay to microphone `m` in samples.
    pub fn direct_delay(&self, m: usize) -> f64 {
        distance(self.source, self.mics[m]) / SPEED_OF_SOUND * self.sample_rate as f64
    }

    /// `key = value` lines listing every field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "room = {} {} {}", self.room[0], self.room[1], self.room[2]);
        let _ = writeln!(s, "source = {} {} {}", self.source[0], self.source[1], self.source[2]);
        let _ = writeln!(s, "num_mics = {}", self.mics.len());
        for (i, m) in self.mics.iter().enumerate() {
            let _ = writeln!(s, "mic{i} = {} {} {}", m[0], m[1], m[2]);
        }
        let _ = writeln!(s, "rt60 = {}", self.rt60);
        let _ = writeln!(s, "snr_db = {}", self.snr_db);
        let _ = writeln!(s, "sample_rate = {}", self.sample_rate);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Dataset(format!("scene config is missing {k:?}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Dataset(format!("scene config {k:?} is not a number")))
        };
        let vec3 = |k: &str| -> Result<Vec3> {
            let parts: Vec<f64> = get(k)?
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Dataset(format!("scene config {k:?} is not a 3-vector")))?;
            parts
                .try_into()
                .map_err(|_| Error::Dataset(format!("scene config {k:?} is not a 3-vector")))
        };
        let num_mics = num("num_mics")? as usize;
        let cfg = SceneConfig {
            room: vec3("room")?,
            source: vec3("source")?,
            mics: (0..num_mics).map(|i| vec3(&format!("mic{i}"))).collect::<Result<_>>()?,
            rt60: num("rt60")?,
            snr_db: num("snr_db")?,
            sample_rate: num("sample_rate")? as u32,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Dataset("scene config seed is not an integer".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses flat `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("line {}: expected key = value", no + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// How scene configurations are drawn.
#[derive(Clone, Debug, PartialEq)]
pub enum Protocol {
    /// 4.5-6.5 m x 4.5-6.5 m x 2.5-3 m rooms, rt60 0.2 s, SNR 5-15 dB, and a
    /// four-microphone line with 8/6/8 cm spacings.
    Standard,
    Custom(CustomProtocol),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CustomProtocol {
    pub room_xy: (f64, f64),
    pub room_z: (f64, f64),
    pub rt60: f64,
    pub snr_db: (f64, f64),
    /// Consecutive microphone spacings; the array has `spacings.len() + 1` mics.
    pub spacings: Vec<f64>,
}

impl CustomProtocol {
    pub fn standard() -> Self {
        CustomProtocol {
            room_xy: (4.5, 6.5),
            room_z: (2.5, 3.0),
            rt60: 0.2,
            snr_db: (5.0, 15.0),
            spacings: STANDARD_MIC_SPACINGS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if !range_ok(self.room_xy) || !range_ok(self.room_z) || !range_ok(self.snr_db) {
            return Err(Error::invalid("protocol ranges must be finite with min <= max"));
        }
        if self.room_xy.0 < 1.5 || self.room_z.0 < 1.5 {
            return Err(Error::invalid(
                "protocol rooms must be at least 1.5 m in every dimension",
            ));
        }
        if !(self.rt60 > 0.0) || self.spacings.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::invalid("protocol rt60 and mic spacings must be positive"));
        }
        Ok(())
    }
}

impl Protocol {
    fn settings(&self) -> CustomProtocol {
        match self {
            Protocol::Standard => CustomProtocol::standard(),
            Protocol::Custom(c) => c.clone(),
        }
    }
}

const MAX_ATTEMPTS: usize = 1000;

/// Draws a configuration; placements are re-drawn until every position keeps
/// its wall clearance (at most 1000 attempts).
pub fn sample_scene_config<R: Rng + ?Sized>(rng: &mut R, protocol: &Protocol, seed: u64) -> Result<SceneConfig> {
    let p = protocol.settings();
    p.validate()?;
    let uniform = |rng: &mut R, (a, b): (f64, f64)| if a == b { a } else { rng.random_range(a..=b) };
    let room = [uniform(rng, p.room_xy), uniform(rng, p.room_xy), uniform(rng, p.room_z)];
    let snr_db = uniform(rng, p.snr_db);
    let aperture: f64 = p.spacings.iter().sum();
    let margin = 0.5;
    for _ in 0..MAX_ATTEMPTS {
        let center = [
            rng.random_range(margin..room[0] - margin),
            rng.random_range(margin..room[1] - margin),
            rng.random_range(1.0..1.6f64.min(room[2] - margin)),
        ];
        let azimuth: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let dir = [azimuth.cos(), azimuth.sin(), 0.0];
        let mut offsets = vec![-aperture / 2.0];
        for d in &p.spacings {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mics: Vec<Vec3> = offsets
            .iter()
            .map(|o| [center[0] + o * dir[0], center[1] + o * dir[1], center[2]])
            .collect();
        let source = [
            rng.random_range(margin..room[0] - margin),
            rng.random_range(margin..room[1] - margin),
            rng.random_range(1.2..1.9f64.min(room[2] - margin)),
        ];
        let dist = distance(source, center);
        let cfg = SceneConfig {
            room,
            source,
            mics,
            rt60: p.rt60,
            snr_db,
            sample_rate: crate::audio::DEFAULT_SAMPLE_RATE,
            seed,
        };
        if (0.5..=3.0).contains(&dist) && cfg.validate().is_ok() {
            return Ok(cfg);
        }
    }
    Err(Error::invalid("could not place source and array within 1000 attempts"))
}

#[derive(Clone, Debug)]
pub struct Mixture {
    /// `reverberant + scaled_noise`, one channel per microphone.
    pub noisy: Waveform,
    /// Clean source delayed by the reference direct-path delay, unit gain.
    pub target: Vec<f64>,
    pub reverberant: Waveform,
    pub scaled_noise: Waveform,
    pub noise_gain: f64,
    pub config: SceneConfig,
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Renders `speech` through the configured room and adds noise at the configured SNR.
///
/// `noise` either has one channel per microphone or is mono and at least
/// `mics * len(speech)` long, in which case consecutive segments feed the
/// microphones.
pub fn render_scene(speech: &[f64], noise: &Waveform, config: &SceneConfig) -> Result<Mixture> {
    config.validate()?;
    let n = speech.len();
    let m = config.mics.len();
    if n == 0 || power(speech) == 0.0 {
        return Err(Error::invalid("speech segment is silent"));
    }
    let noise_channels: Vec<&[f64]> = if noise.num_channels() >= m {
        if noise.len() < n {
            return Err(Error::invalid(format!("noise has {} samples, need {n}", noise.len())));
        }
        (0..m).map(|i| &noise.channel(i)[..n]).collect()
    } else if noise.num_channels() == 1 {
        if noise.len() < m * n {
            return Err(Error::invalid(format!(
                "mono noise has {} samples, need {} for {m} microphones",
                noise.len(),
                m * n
            )));
        }
        (0..m).map(|i| &noise.channel(0)[i * n..(i + 1) * n]).collect()
    } else {
        return Err(Error::invalid(format!(
            "noise has {} channels for {m} microphones",
            noise.num_channels()
        )));
    };

    let reverberant: Vec<Vec<f64>> = (0..m)
        .map(|i| simulate_rir(config, i).map(|h| convolve_truncated(speech, &h.taps)))
        .collect::<Result<_>>()?;
    let p_speech = power(&reverberant[REFERENCE_MIC]);
    let p_noise = power(noise_channels[REFERENCE_MIC]);
    let noise_gain = if p_noise > 0.0 {
        (p_speech / (p_noise * 10f64.powf(config.snr_db / 10.0))).sqrt()
    } else {
        0.0
    };
    let scaled: Vec<Vec<f64>> = noise_channels
        .iter()
        .map(|c| c.iter().map(|v| v * noise_gain).collect())
        .collect();
    let noisy: Vec<Vec<f64>> = reverberant
        .iter()
        .zip(&scaled)
        .map(|(r, v)| r.iter().zip(v).map(|(a, b)| a + b).collect())
        .collect();

    let mut delay = vec![0.0; rir::PULSE_HALF_WIDTH * 2 + 2 + config.direct_delay(REFERENCE_MIC).ceil() as usize];
    rir::add_pulse(&mut delay, config.direct_delay(REFERENCE_MIC), 1.0);
    let target = convolve_truncated(speech, &delay);

    let fs = config.sample_rate;
    Ok(Mixture {
        noisy: Waveform::new(noisy, fs)?,
        target,
        reverberant: Waveform::new(reverberant, fs)?,
        scaled_noise: Waveform::new(scaled, fs)?,
        noise_gain,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests;
