//! On-disk datasets of simulated scenes and set-level evaluation.
//!
//! Layout: `<root>/<split>/<id>/{noisy.wav,target.wav,config}` plus a
//! `<root>/manifest` with one `id,split,snr_db,rt60,config_hash` line per scene.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::audio::{read_wav, write_wav, Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, MetricReport};
use crate::pipeline::{FrontEnd, Pair};
use crate::scene::{
    noise_source, render_scene, sample_scene_config, synthetic_speech, NoiseKind, Protocol, SceneConfig,
};
use crate::train::Utterance;

pub const MANIFEST: &str = "manifest";

/// Peak level that stored WAVs are kept under.
const MAX_PEAK: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub protocol: Protocol,
    pub duration_s: f64,
    pub noise: NoiseKind,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            n_train: 200,
            n_val: 20,
            n_test: 20,
            seed: 0,
            protocol: Protocol::Standard,
            duration_s: 2.0,
            noise: NoiseKind::BabbleSurrogate,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub snr_db: f64,
    pub rt60: f64,
    pub config_hash: String,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.id, self.split, self.snr_db, self.rt60, self.config_hash
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Dataset(format!("malformed manifest line {line:?}"));
        let fields: Vec<&str> = line.split(',').collect();
        let [id, split, snr, rt60, hash] = fields[..] else {
            return Err(bad());
        };
        Ok(ManifestEntry {
            id: id.to_string(),
            split: split.parse()?,
            snr_db: snr.parse().map_err(|_| bad())?,
            rt60: rt60.parse().map_err(|_| bad())?,
            config_hash: hash.to_string(),
        })
    }
}

/// 64-bit FNV-1a of the config text, as 16 hex digits.
pub fn config_hash(config: &SceneConfig) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in config.to_text().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn scene_dir(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join(split.as_str()).join(id)
}

struct Job {
    id: String,
    split: Split,
    seed: u64,
}

/// Renders one scene from its own seed: configuration, speech and noise all
/// come from a single seeded stream.
pub fn render_seeded(spec: &SimulationSpec, seed: u64) -> Result<(SceneConfig, Waveform, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = sample_scene_config(&mut rng, &spec.protocol, seed)?;
    let len = (spec.duration_s * DEFAULT_SAMPLE_RATE as f64).round() as usize;
    if len == 0 {
        return Err(Error::invalid("scene duration must be positive"));
    }
    let speech = synthetic_speech(&mut rng, len, DEFAULT_SAMPLE_RATE);
    let noise = noise_source(spec.noise, &mut rng, config.mics.len() * len, DEFAULT_SAMPLE_RATE)?;
    let mix = render_scene(&speech, &Waveform::mono(noise, DEFAULT_SAMPLE_RATE), &config)?;
    let peak = mix
        .noisy
        .channels()
        .iter()
        .flatten()
        .chain(&mix.target)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > MAX_PEAK { MAX_PEAK / peak } else { 1.0 };
    let noisy = Waveform::new(
        mix.noisy
            .channels()
            .iter()
            .map(|c| c.iter().map(|v| v * scale).collect())
            .collect(),
        DEFAULT_SAMPLE_RATE,
    )?;
    let target = mix.target.iter().map(|v| v * scale).collect();
    Ok((config, noisy, target))
}

/// Simulates every split into `root` and writes the manifest. Scene seeds are
/// drawn in order from the master seed, so the output does not depend on the
/// thread count.
pub fn simulate_dataset(root: &Path, spec: &SimulationSpec) -> Result<Vec<ManifestEntry>> {
    if !(spec.duration_s > 0.0) {
        return Err(Error::invalid("scene duration must be positive"));
    }
    if spec.n_train + spec.n_val + spec.n_test == 0 {
        return Err(Error::invalid("dataset must contain at least one scene"));
    }
    if let Protocol::Custom(p) = &spec.protocol {
        p.validate()?;
    }
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut jobs = Vec::new();
    for (split, n) in [
        (Split::Train, spec.n_train),
        (Split::Val, spec.n_val),
        (Split::Test, spec.n_test),
    ] {
        for i in 0..n {
            jobs.push(Job {
                id: format!("{split}-{i:05}"),
                split,
                seed: master.next_u64(),
            });
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let entries = jobs
        .par_iter()
        .map(|job| {
            let (config, noisy, target) = render_seeded(spec, job.seed)?;
            let dir = scene_dir(root, job.split, &job.id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_wav(dir.join("noisy.wav"), &noisy)?;
            write_wav(dir.join("target.wav"), &Waveform::mono(target, DEFAULT_SAMPLE_RATE))?;
            let cfg_path = dir.join("config");
            fs::write(&cfg_path, config.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
            Ok(ManifestEntry {
                id: job.id.clone(),
                split: job.split,
                snr_db: config.snr_db,
                rt60: config.rt60,
                config_hash: config_hash(&config),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let text: String = entries.iter().map(|e| e.to_line() + "\n").collect();
    let path = root.join(MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(ManifestEntry::parse)
        .collect()
}

/// Loads every utterance of `split` listed in the manifest.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<Utterance>> {
    read_manifest(root)?
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| load_utterance(root, split, &e.id))
        .collect()
}

pub fn load_utterance(root: &Path, split: Split, id: &str) -> Result<Utterance> {
    let dir = scene_dir(root, split, id);
    let noisy = read_wav(dir.join("noisy.wav"))?;
    let target = read_wav(dir.join("target.wav"))?;
    if target.num_channels() != 1 || target.len() != noisy.len() {
        return Err(Error::Dataset(format!(
            "{id}: target must be mono with {} samples",
            noisy.len()
        )));
    }
    Ok(Utterance {
        id: id.to_string(),
        noisy,
        target: target.into_channels().remove(0),
    })
}

/// Spectrogram training pairs from the first `m` channels of each utterance.
pub fn training_pairs(utts: &[Utterance], fe: &FrontEnd, m: usize) -> Result<Vec<Pair>> {
    utts.par_iter().map(|u| fe.pair(&u.noisy, &u.target, m)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    /// Mean of each column over `rows`.
    pub mean: MetricReport,
    pub std: MetricReport,
    /// Enhanced files without a dataset entry, and dataset entries of the
    /// requested split without an enhanced file.
    pub mismatched: Vec<String>,
}

pub const REPORT_HEADER: &str = "utt_id,si_sdr_db,input_si_sdr_db,improvement_db,mse";

impl EvalSummary {
    /// Per-utterance rows followed by one `mean` row.
    pub fn to_csv(&self) -> String {
        let row = |id: &str, r: &MetricReport| {
            format!(
                "{id},{:.4},{:.4},{:.4},{:.6e}\n",
                r.si_sdr_db, r.input_si_sdr_db, r.improvement_db, r.mse
            )
        };
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            out.push_str(&row(&r.id, &r.report));
        }
        out.push_str(&row("mean", &self.mean));
        out
    }
}

/// Scores `<enhanced_dir>/<id>.wav` against the dataset targets, using the
/// noisy reference channel as the unprocessed baseline. With `split` set,
/// every scene of that split is expected.
pub fn evaluate_set(enhanced_dir: &Path, root: &Path, split: Option<Split>) -> Result<EvalSummary> {
    let manifest = read_manifest(root)?;
    let known: BTreeMap<&str, Split> = manifest.iter().map(|e| (e.id.as_str(), e.split)).collect();
    let read = fs::read_dir(enhanced_dir).map_err(|e| Error::io(enhanced_dir, e))?;
    let mut enhanced = Vec::new();
    for entry in read {
        let path = entry.map_err(|e| Error::io(enhanced_dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("wav") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                enhanced.push(stem.to_string());
            }
        }
    }
    enhanced.sort();
    let mut mismatched: Vec<String> = enhanced
        .iter()
        .filter(|id| match known.get(id.as_str()) {
            Some(s) => split.is_some_and(|want| want != *s),
            None => true,
        })
        .cloned()
        .collect();
    if let Some(want) = split {
        mismatched.extend(
            manifest
                .iter()
                .filter(|e| e.split == want && enhanced.binary_search(&e.id).is_err())
                .map(|e| e.id.clone()),
        );
    }
    mismatched.sort();
    let matched: Vec<(&String, Split)> = enhanced
        .iter()
        .filter(|id| !mismatched.contains(id))
        .map(|id| (id, known[id.as_str()]))
        .collect();
    if matched.is_empty() {
        return Err(Error::Dataset(format!(
            "no enhanced file in {} matches a dataset scene",
            enhanced_dir.display()
        )));
    }
    let rows = matched
        .par_iter()
        .map(|(id, s)| {
            let utt = load_utterance(root, *s, id)?;
            let est = read_wav(enhanced_dir.join(format!("{id}.wav")))?;
            if est.len() != utt.target.len() {
                return Err(Error::Dataset(format!(
                    "{id}: enhanced has {} samples, target {}",
                    est.len(),
                    utt.target.len()
                )));
            }
            Ok(EvalRow {
                id: id.to_string(),
                report: MetricReport::measure(est.channel(0), utt.noisy.channel(0), &utt.target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let column = |f: fn(&MetricReport) -> f64| mean_std(&rows.iter().map(|r| f(&r.report)).collect::<Vec<_>>());
    let (si, si_sd) = column(|r| r.si_sdr_db);
    let (inp, inp_sd) = column(|r| r.input_si_sdr_db);
    let (imp, imp_sd) = column(|r| r.improvement_db);
    let (mse, mse_sd) = column(|r| r.mse);
    Ok(EvalSummary {
        rows,
        mean: MetricReport {
            si_sdr_db: si,
            mse,
            input_si_sdr_db: inp,
            improvement_db: imp,
        },
        std: MetricReport {
            si_sdr_db: si_sd,
            mse: mse_sd,
            input_si_sdr_db: inp_sd,
            improvement_db: imp_sd,
        },
        mismatched,
    })
}
