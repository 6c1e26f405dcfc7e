//! Log-magnitude spectrogram images and matrix dumps.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use amdm::audio::read_wav;
use amdm::stft::{compress, stft, Compression, StftParams};
use anyhow::{bail, Context, Result};

use crate::ensure_parent;

/// Dynamic range shown in images.
const RANGE_DB: f64 = 80.0;
const FLOOR: f64 = 1e-12;

/// `[frame][bin]` magnitudes in dB.
pub fn log_magnitude(path: &Path, compressed: bool, channel: usize) -> Result<Vec<Vec<f64>>> {
    let wav = read_wav(path).with_context(|| format!("reading {}", path.display()))?;
    if channel >= wav.num_channels() {
        bail!(
            "{} has {} channel(s), channel {channel} requested",
            path.display(),
            wav.num_channels()
        );
    }
    let defaults = StftParams::default();
    let params = StftParams::new(defaults.fft_size(), defaults.hop(), wav.sample_rate())?;
    let mut spec = stft(&wav.take_channels(channel + 1)?, &params)?;
    if compressed {
        spec = compress(spec, Compression::default())?;
    }
    Ok((0..spec.frames())
        .map(|l| {
            (0..spec.bins())
                .map(|k| 20.0 * spec.at(channel, l, k).norm().max(FLOOR).log10())
                .collect()
        })
        .collect())
}

/// Grayscale pixels, frequency ascending upward and time rightward, spanning
/// the top `RANGE_DB` below the maximum.
pub fn to_pixels(db: &[Vec<f64>]) -> (u32, u32, Vec<u8>) {
    let frames = db.len();
    let bins = db.first().map_or(0, Vec::len);
    let hi = db.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = hi - RANGE_DB;
    let mut pixels = vec![0u8; frames * bins];
    for (l, frame) in db.iter().enumerate() {
        for (k, &v) in frame.iter().enumerate() {
            let level = if hi > lo {
                ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.0
            };
            pixels[(bins - 1 - k) * frames + l] = (level * 255.0).round() as u8;
        }
    }
    (frames as u32, bins as u32, pixels)
}

pub fn run(input: &Path, out: &Path, compressed: &str, channel: usize) -> Result<()> {
    let compressed = match compressed {
        "on" => true,
        "off" => false,
        other => bail!("--compressed must be on or off, got {other:?}"),
    };
    let db = log_magnitude(input, compressed, channel)?;
    ensure_parent(out)?;
    match out.extension().and_then(|e| e.to_str()) {
        Some("csv") => {
            let text: String = db
                .iter()
                .map(|f| f.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(",") + "\n")
                .collect();
            std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
        }
        Some("png") => {
            let (w, h, pixels) = to_pixels(&db);
            let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
            let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header()?;
            writer.write_image_data(&pixels)?;
            writer.finish()?;
        }
        _ => bail!("output {} must end in .png or .csv", out.display()),
    }
    Ok(())
}
