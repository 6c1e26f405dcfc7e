use std::path::{Path, PathBuf};

use amdm::audio::{read_wav, write_wav, Waveform};
use amdm::checkpoint::Checkpoint;
use amdm::dataset::{evaluate_set, load_split, simulate_dataset, training_pairs, SimulationSpec, Split};
use amdm::net::ScoreNet;
use amdm::pipeline::enhance as enhance_one;
use amdm::train::{fit, validate, Trainer};
use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{RunConfig, Source};
use crate::ensure_parent;

fn load_config(file: Option<&Path>, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::new();
    if let Some(f) = file {
        cfg.merge_file(f)?;
    }
    cfg.merge_flags(flags)?;
    Ok(cfg)
}

pub fn simulate(out: &Path, file: Option<&Path>, flags: &[(&str, Option<String>)]) -> Result<()> {
    let cfg = load_config(file, flags)?;
    let spec = SimulationSpec {
        n_train: cfg.get("n_train")?,
        n_val: cfg.get("n_val")?,
        n_test: cfg.get("n_test")?,
        seed: cfg.get("seed")?,
        protocol: cfg.protocol()?,
        duration_s: cfg.get("duration_s")?,
        noise: cfg.noise()?,
    };
    let entries = simulate_dataset(out, &spec).with_context(|| format!("simulating into {}", out.display()))?;
    cfg.echo_to(&out.join("simulate.cfg"))?;
    eprintln!("wrote {} scenes to {}", entries.len(), out.display());
    Ok(())
}

pub fn train(data: &Path, out: &Path, file: Option<&Path>, flags: &[(&str, Option<String>)]) -> Result<()> {
    let cfg = load_config(file, flags)?;
    let arch = cfg.architecture()?;
    let tc = cfg.train_config()?;
    let fe = cfg.front_end()?;
    let sde = cfg.sde()?;
    let train_set = load_split(data, Split::Train).with_context(|| format!("loading {}", data.display()))?;
    let mut val_set = load_split(data, Split::Val)?;
    if train_set.is_empty() || val_set.is_empty() {
        bail!("dataset {} needs nonempty train and val splits", data.display());
    }
    let available = train_set
        .iter()
        .chain(&val_set)
        .map(|u| u.noisy.num_channels())
        .min()
        .unwrap_or(0);
    if arch.num_mics > available {
        bail!("model needs {} channels but the dataset has {available}", arch.num_mics);
    }
    let subset: usize = cfg.get("val_subset")?;
    if subset > 0 {
        val_set.truncate(subset);
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.echo_to(&out.join("train.cfg"))?;

    let pairs = training_pairs(&train_set, &fe, arch.num_mics)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    init_rng.set_stream(1);
    let net = ScoreNet::init(arch, &mut init_rng)?;
    eprintln!(
        "training {} parameters on {} utterances",
        net.num_parameters(),
        pairs.len()
    );
    let val_seed = tc.seed;
    let mut trainer = Trainer::new(net, sde.clone(), tc)?;
    let mut validator = |net: &ScoreNet| validate(net, &val_set, &fe, &sde, val_seed);
    let mut progress = |msg: &str| eprintln!("{msg}");
    let report = fit(&mut trainer, &pairs, &mut validator, &fe, out, Some(&mut progress))?;
    eprintln!(
        "done after {} steps; best validation SI-SDR {:.2} dB in {}",
        report.steps,
        report.best_score,
        report.best_checkpoint.display()
    );
    Ok(())
}

pub struct Expect {
    pub attention: Option<String>,
    pub channels: Option<String>,
    pub first_channels: bool,
}

/// Input recordings as `(id, path)` sorted by id.
fn collect_inputs(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    if input.is_file() {
        let id = input
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("enhanced")
            .to_string();
        return Ok(vec![(id, input.to_path_buf())]);
    }
    let mut out = Vec::new();
    let dir = std::fs::read_dir(input).with_context(|| format!("reading {}", input.display()))?;
    for entry in dir {
        let path = entry?.path();
        let name = path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if path.is_dir() && path.join("noisy.wav").is_file() {
            out.push((name, path.join("noisy.wav")));
        } else if path.extension().and_then(|e| e.to_str()) == Some("wav") {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            out.push((stem, path));
        }
    }
    out.sort();
    if out.is_empty() {
        bail!("no WAV inputs in {}", input.display());
    }
    Ok(out)
}

pub fn enhance(
    ckpt: &Path,
    input: &Path,
    out: &Path,
    file: Option<&Path>,
    flags: &[(&str, Option<String>)],
    expect: Expect,
) -> Result<()> {
    let mut ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if expect.attention.is_some() || expect.channels.is_some() {
        let mut wanted = ck.net.arch.clone();
        let mut probe = RunConfig::new();
        if let Some(a) = &expect.attention {
            probe.set("attention", a.clone(), Source::Flag)?;
            wanted.attention = probe.switch("attention")?;
        }
        if let Some(c) = &expect.channels {
            probe.set("channels", c.clone(), Source::Flag)?;
            wanted.num_mics = probe.get("channels")?;
        }
        ck = Checkpoint::load_expecting(ckpt, &wanted).with_context(|| format!("loading {}", ckpt.display()))?;
    }
    let mut cfg = RunConfig::new();
    cfg.merge_checkpoint(&ck.metadata)?;
    if let Some(f) = file {
        cfg.merge_file(f)?;
    }
    cfg.merge_flags(flags)?;
    let fe = cfg.front_end()?;
    let sde = cfg.sde()?;
    let seed: u64 = cfg.get("seed")?;

    let inputs = collect_inputs(input)?;
    let single = input.is_file() && out.extension().and_then(|e| e.to_str()) == Some("wav");
    let target = |id: &str| {
        if single {
            out.to_path_buf()
        } else {
            out.join(format!("{id}.wav"))
        }
    };
    if single {
        ensure_parent(out)?;
    } else {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        cfg.echo_to(&out.join("enhance.cfg"))?;
    }
    let m = ck.net.arch.num_mics;
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, (id, path))| {
            let wav = read_wav(path).with_context(|| format!("reading {}", path.display()))?;
            let wav = select_channels(wav, m, expect.first_channels).with_context(|| path.display().to_string())?;
            let y = enhance_one(&ck.net, &wav, &fe, &sde, seed.wrapping_add(i as u64))
                .with_context(|| format!("enhancing {}", path.display()))?;
            let dest = target(id);
            write_wav(&dest, &Waveform::mono(y, wav.sample_rate()))
                .with_context(|| format!("writing {}", dest.display()))
        })
        .collect::<Result<Vec<()>>>()?;
    eprintln!("enhanced {} file(s) into {}", inputs.len(), out.display());
    Ok(())
}

fn select_channels(wav: Waveform, m: usize, first: bool) -> Result<Waveform> {
    let c = wav.num_channels();
    if c == m {
        Ok(wav)
    } else if first && c > m {
        Ok(wav.take_channels(m)?)
    } else {
        bail!("input has {c} channels but the checkpoint expects {m}")
    }
}

pub fn evaluate(enhanced: &Path, data: &Path, report: &Path, split: Option<&str>) -> Result<()> {
    let split: Option<Split> = split.map(str::parse).transpose()?;
    let summary = evaluate_set(enhanced, data, split)?;
    ensure_parent(report)?;
    std::fs::write(report, summary.to_csv()).with_context(|| format!("writing {}", report.display()))?;
    println!(
        "{} utterances: SI-SDR {:.2} ± {:.2} dB, input {:.2} ± {:.2} dB, improvement {:.2} ± {:.2} dB",
        summary.rows.len(),
        summary.mean.si_sdr_db,
        summary.std.si_sdr_db,
        summary.mean.input_si_sdr_db,
        summary.std.input_si_sdr_db,
        summary.mean.improvement_db,
        summary.std.improvement_db
    );
    if !summary.mismatched.is_empty() {
        bail!("unmatched ids skipped: {}", summary.mismatched.join(" "));
    }
    Ok(())
}
