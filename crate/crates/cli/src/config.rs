//! Flat `key = value` run configuration with layered precedence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use amdm::net::{Architecture, TimeEmbedding};
use amdm::pipeline::{read_settings, write_settings, FrontEnd};
use amdm::scene::{CustomProtocol, NoiseKind, Protocol, STANDARD_MIC_SPACINGS};
use amdm::sde::{SdeParams, WeightMode};
use amdm::stft::{Compression, StftParams};
use amdm::train::TrainConfig;
use anyhow::{anyhow, bail, Context, Result};

/// Where the value of a key came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    Checkpoint,
    File,
    Flag,
}

impl Source {
    fn label(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::Checkpoint => "checkpoint",
            Source::File => "file",
            Source::Flag => "flag",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, (String, Source)>,
}

fn defaults() -> Vec<(&'static str, String)> {
    let fe = FrontEnd::default();
    let sde = SdeParams::default();
    let tc = TrainConfig::default();
    let arch = Architecture::default();
    let standard = CustomProtocol::standard();
    let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
    vec![
        ("seed", "0".into()),
        // front end
        ("fft_size", fe.stft.fft_size().to_string()),
        ("hop", fe.stft.hop().to_string()),
        ("sample_rate", fe.stft.sample_rate().to_string()),
        ("compression_alpha", format!("{:?}", fe.compression.alpha)),
        ("compression_beta", format!("{:?}", fe.compression.beta)),
        ("input_rms", format!("{:?}", fe.input_rms)),
        // diffusion
        ("gamma", format!("{:?}", sde.gamma)),
        ("sigma_min", format!("{:?}", sde.sigma_min)),
        ("sigma_max", format!("{:?}", sde.sigma_max)),
        ("t_eps", format!("{:?}", sde.t_eps)),
        ("n_steps", sde.n_steps.to_string()),
        ("corrector_steps", sde.corrector_steps.to_string()),
        ("corrector_snr", format!("{:?}", sde.corrector_snr)),
        // scenes
        ("n_train", "200".into()),
        ("n_val", "20".into()),
        ("n_test", "20".into()),
        ("protocol", "standard".into()),
        ("mics", (STANDARD_MIC_SPACINGS.len() + 1).to_string()),
        ("duration_s", "2.0".into()),
        ("noise", "babble".into()),
        ("room_xy", format!("{:?} {:?}", standard.room_xy.0, standard.room_xy.1)),
        ("room_z", format!("{:?} {:?}", standard.room_z.0, standard.room_z.1)),
        ("rt60", format!("{:?}", standard.rt60)),
        ("snr_db", format!("{:?} {:?}", standard.snr_db.0, standard.snr_db.1)),
        ("spacings", list(&standard.spacings)),
        // model
        ("channels", arch.num_mics.to_string()),
        ("attention", "on".into()),
        ("levels", arch.levels.to_string()),
        ("base_width", arch.base_width.to_string()),
        ("attention_hidden", arch.attention_hidden.to_string()),
        ("shared_aux", "off".into()),
        ("temb_dim", arch.time_embedding.dim.to_string()),
        ("temb_scale", format!("{:?}", arch.time_embedding.scale)),
        // training
        ("batch_size", tc.batch_size.to_string()),
        ("learning_rate", format!("{:?}", tc.learning_rate)),
        ("weight_decay", format!("{:?}", tc.weight_decay)),
        ("max_steps", tc.max_steps.to_string()),
        ("val_every", tc.val_every.to_string()),
        ("patience", tc.early_stop_patience.to_string()),
        ("crop_frames", tc.crop_frames.map_or("0".into(), |c| c.to_string())),
        ("weight_mode", "sigma_sq".into()),
        ("val_subset", "0".into()),
    ]
}

fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => bail!("{key} must be on or off, got {v:?}"),
    }
}

impl RunConfig {
    pub fn new() -> Self {
        RunConfig {
            values: defaults()
                .into_iter()
                .map(|(k, v)| (k.to_string(), (v, Source::Default)))
                .collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>, source: Source) -> Result<()> {
        let slot = self
            .values
            .get_mut(key)
            .ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
        *slot = (value.into(), source);
        Ok(())
    }

    /// Applies a `key = value` file; unknown keys are errors.
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let kv = amdm::scene::parse_key_values(&text).with_context(|| format!("parsing config {}", path.display()))?;
        for (k, v) in kv {
            self.set(&k, v, Source::File)
                .with_context(|| format!("config {}", path.display()))?;
        }
        Ok(())
    }

    /// Applies checkpoint settings below file and flag values.
    pub fn merge_checkpoint(&mut self, meta: &BTreeMap<String, String>) -> Result<()> {
        let (fe, sde) = read_settings(meta)?;
        let mut m = BTreeMap::new();
        write_settings(&mut m, &fe, &sde);
        for (k, v) in m {
            if self.values.get(&k).is_some_and(|(_, s)| *s == Source::Default) {
                self.set(&k, v, Source::Checkpoint)?;
            }
        }
        Ok(())
    }

    pub fn merge_flags(&mut self, flags: &[(&str, Option<String>)]) -> Result<()> {
        for (k, v) in flags {
            if let Some(v) = v {
                self.set(k, v.clone(), Source::Flag)?;
            }
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(|(v, _)| v.as_str())
            .ok_or_else(|| anyhow!("unknown config key {key:?}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| anyhow!("config {key} = {v:?} is not valid"))
    }

    pub fn switch(&self, key: &str) -> Result<bool> {
        parse_switch(key, self.raw(key)?)
    }

    fn range(&self, key: &str) -> Result<(f64, f64)> {
        let v: Vec<f64> = self.list(key)?;
        match v[..] {
            [a] => Ok((a, a)),
            [a, b] => Ok((a, b)),
            _ => bail!("config {key} must be one or two numbers"),
        }
    }

    fn list(&self, key: &str) -> Result<Vec<f64>> {
        self.raw(key)?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| anyhow!("config {key} has a non-number {s:?}")))
            .collect()
    }

    /// Every key in sorted order with its origin as a trailing comment.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, (v, s)) in &self.values {
            let _ = writeln!(out, "{k} = {v}  # {}", s.label());
        }
        out
    }

    pub fn echo_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn front_end(&self) -> Result<FrontEnd> {
        Ok(FrontEnd {
            stft: StftParams::new(self.get("fft_size")?, self.get("hop")?, self.get("sample_rate")?)?,
            compression: Compression {
                alpha: self.get("compression_alpha")?,
                beta: self.get("compression_beta")?,
            },
            input_rms: self.get("input_rms")?,
        })
    }

    pub fn sde(&self) -> Result<SdeParams> {
        let sde = SdeParams {
            gamma: self.get("gamma")?,
            sigma_min: self.get("sigma_min")?,
            sigma_max: self.get("sigma_max")?,
            t_eps: self.get("t_eps")?,
            n_steps: self.get("n_steps")?,
            corrector_steps: self.get("corrector_steps")?,
            corrector_snr: self.get("corrector_snr")?,
        };
        sde.validate()?;
        Ok(sde)
    }

    pub fn protocol(&self) -> Result<Protocol> {
        let mics: usize = self.get("mics")?;
        if mics == 0 {
            bail!("mics must be at least 1");
        }
        let protocol = self.raw("protocol")?;
        let custom = match protocol {
            "standard" => {
                if mics > STANDARD_MIC_SPACINGS.len() + 1 {
                    bail!(
                        "the standard array has {} microphones, {mics} requested",
                        STANDARD_MIC_SPACINGS.len() + 1
                    );
                }
                if mics == STANDARD_MIC_SPACINGS.len() + 1 {
                    return Ok(Protocol::Standard);
                }
                CustomProtocol {
                    spacings: STANDARD_MIC_SPACINGS[..mics - 1].to_vec(),
                    ..CustomProtocol::standard()
                }
            }
            "custom" => {
                let spacings = self.list("spacings")?;
                if spacings.len() + 1 < mics {
                    bail!(
                        "spacings list {} gaps, {mics} microphones need {}",
                        spacings.len(),
                        mics - 1
                    );
                }
                CustomProtocol {
                    room_xy: self.range("room_xy")?,
                    room_z: self.range("room_z")?,
                    rt60: self.get("rt60")?,
                    snr_db: self.range("snr_db")?,
                    spacings: spacings[..mics - 1].to_vec(),
                }
            }
            other => bail!("protocol must be standard or custom, got {other:?}"),
        };
        custom.validate()?;
        Ok(Protocol::Custom(custom))
    }

    pub fn noise(&self) -> Result<NoiseKind> {
        Ok(self.raw("noise")?.parse()?)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let arch = Architecture {
            num_mics: self.get("channels")?,
            levels: self.get("levels")?,
            base_width: self.get("base_width")?,
            attention: self.switch("attention")?,
            attention_hidden: self.get("attention_hidden")?,
            shared_aux: self.switch("shared_aux")?,
            time_embedding: TimeEmbedding {
                dim: self.get("temb_dim")?,
                scale: self.get("temb_scale")?,
            },
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let crop: usize = self.get("crop_frames")?;
        let cfg = TrainConfig {
            batch_size: self.get("batch_size")?,
            learning_rate: self.get("learning_rate")?,
            weight_decay: self.get("weight_decay")?,
            max_steps: self.get("max_steps")?,
            val_every: self.get("val_every")?,
            early_stop_patience: self.get("patience")?,
            seed: self.get("seed")?,
            attention_enabled: self.switch("attention")?,
            weight_mode: match self.raw("weight_mode")? {
                "sigma_sq" => WeightMode::SigmaSq,
                "unit" => WeightMode::Unit,
                other => bail!("weight_mode must be sigma_sq or unit, got {other:?}"),
            },
            crop_frames: (crop > 0).then_some(crop),
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
