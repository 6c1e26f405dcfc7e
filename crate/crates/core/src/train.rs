//! Denoising score matching training, validation and early stopping.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::audio::Waveform;
use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::si_sdr;
use crate::net::{pad_reflect, ScoreNet};
use crate::params::ParamSet;
use crate::pipeline::{enhance, write_settings, FrontEnd, Pair};
use crate::sde::{dsm_loss_and_grad, mean, perturb, std, SdeParams, WeightMode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_steps: usize,
    pub val_every: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub attention_enabled: bool,
    pub weight_mode: WeightMode,
    /// Random crop length in frames; `None` trains on whole utterances.
    pub crop_frames: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_steps: 2000,
            val_every: 250,
            early_stop_patience: 3,
            seed: 0,
            attention_enabled: true,
            weight_mode: WeightMode::SigmaSq,
            crop_frames: Some(64),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || self.weight_decay < 0.0 {
            return Err(Error::invalid("learning_rate and weight_decay must be non-negative"));
        }
        if self.early_stop_patience == 0 || self.val_every == 0 {
            return Err(Error::invalid("early_stop_patience and val_every must be at least 1"));
        }
        if self.crop_frames == Some(0) {
            return Err(Error::invalid("crop_frames must be positive"));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let tensors = params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] -= self.lr * (update + self.weight_decay * p[i]);
            }
        }
    }
}

/// Diffusion time and noise for one batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub t: f64,
    pub z: Tensor,
}

impl Draw {
    /// `t ~ U(t_eps, 1)`, `z ~ N(0, I)` shaped like the target.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, pair: &Pair, sde: &SdeParams) -> Self {
        let t = rng.random_range(sde.t_eps..1.0);
        Draw {
            t,
            z: Tensor::randn(pair.target.shape(), rng),
        }
    }
}

fn reference(noisy: &Tensor) -> Result<Tensor> {
    let shape = noisy.shape()[1..].to_vec();
    let n: usize = shape.iter().product();
    Tensor::new(shape, noisy.data()[..n].to_vec())
}

/// DSM loss of one example and, when `with_grad`, its parameter gradient.
/// The score is the network output divided by `sigma_t` (see [`ScoreNet::score`]).
pub fn example_loss(
    net: &ScoreNet,
    pair: &Pair,
    draw: &Draw,
    sde: &SdeParams,
    mode: WeightMode,
    with_grad: bool,
) -> Result<(f64, Option<ParamSet>)> {
    let x_ref = reference(&pair.noisy)?;
    let state = perturb(&pair.target, &x_ref, draw.t, &draw.z, sde)?;
    let mu = mean(&pair.target, &x_ref, draw.t, sde)?;
    let sigma = std(draw.t, sde)?;
    let &[_, t, f] = pair.target.shape() else {
        return Err(Error::shape("train", format!("target {:?}", pair.target.shape())));
    };
    let k = net.arch.multiple();
    let (tp, fp) = (t.next_multiple_of(k), f.next_multiple_of(k));

    let mut g = Graph::new();
    let bound = net.params.bind(&mut g);
    let s = g.input(pad_reflect(&state.s_t, tp, fp)?);
    let xs = ScoreNet::conditioner_inputs(&mut g, &pad_reflect(&pair.noisy, tp, fp)?);
    let mut out = net.forward_var(&mut g, &bound, s, &xs, draw.t)?;
    if tp != t {
        out = g.slice(out, 1, 0, t)?;
    }
    if fp != f {
        out = g.slice(out, 2, 0, f)?;
    }
    let out = g.scale(out, 1.0 / sigma)?;
    let (loss, dscore) = dsm_loss_and_grad(g.value(out), &state.s_t, &mu, sigma, mode)?;
    if !with_grad {
        return Ok((loss, None));
    }
    let grads = g.backward(out, &dscore)?;
    Ok((loss, Some(bound.gradients(&grads, &net.params))))
}

/// Mean loss and gradient over a batch. Elements run in parallel; the
/// reduction is sequential in batch order, so results do not depend on the
/// thread count.
pub fn batch_loss_and_grad(
    net: &ScoreNet,
    batch: &[Pair],
    draws: &[Draw],
    sde: &SdeParams,
    mode: WeightMode,
) -> Result<(f64, ParamSet)> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(Error::invalid(format!(
            "{} examples with {} draws",
            batch.len(),
            draws.len()
        )));
    }
    let results: Vec<(f64, Option<ParamSet>)> = batch
        .par_iter()
        .zip(draws)
        .map(|(p, d)| example_loss(net, p, d, sde, mode, true))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = net.params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in results {
        loss += l;
        let g = g.expect("gradient requested");
        for (acc, gi) in total.tensors_mut().iter_mut().zip(g.tensors()) {
            acc.axpy(scale, gi)?;
        }
    }
    Ok((loss / batch.len() as f64, total))
}

/// Mean loss over a batch without gradients.
pub fn batch_loss(net: &ScoreNet, batch: &[Pair], draws: &[Draw], sde: &SdeParams, mode: WeightMode) -> Result<f64> {
    let losses: Vec<f64> = batch
        .par_iter()
        .zip(draws)
        .map(|(p, d)| example_loss(net, p, d, sde, mode, false).map(|r| r.0))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

pub struct Trainer {
    pub net: ScoreNet,
    pub opt: AdamW,
    pub sde: SdeParams,
    pub cfg: TrainConfig,
    pub rng: ChaCha8Rng,
    pub steps_taken: usize,
}

impl Trainer {
    pub fn new(net: ScoreNet, sde: SdeParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        sde.validate()?;
        if net.arch.attention != cfg.attention_enabled && net.arch.num_mics > 1 {
            return Err(Error::invalid(
                "network attention flag differs from the training config",
            ));
        }
        Ok(Trainer {
            opt: AdamW::new(&net.params, &cfg),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            net,
            sde,
            cfg,
            steps_taken: 0,
        })
    }

    /// Draws `batch_size` examples with replacement, randomly cropped.
    pub fn sample_batch(&mut self, data: &[Pair]) -> Result<Vec<Pair>> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        (0..self.cfg.batch_size)
            .map(|_| {
                let p = &data[self.rng.random_range(0..data.len())];
                match self.cfg.crop_frames {
                    Some(c) if c < p.frames() => {
                        let start = self.rng.random_range(0..=p.frames() - c);
                        p.crop_frames(start, c)
                    }
                    _ => Ok(p.clone()),
                }
            })
            .collect()
    }

    /// One optimizer step on `batch`. Returns the pre-update batch loss. A
    /// non-finite loss or gradient leaves parameters and optimizer untouched.
    pub fn train_step(&mut self, batch: &[Pair]) -> Result<f64> {
        let draws: Vec<Draw> = batch
            .iter()
            .map(|p| Draw::sample(&mut self.rng, p, &self.sde))
            .collect();
        let (loss, grads) = batch_loss_and_grad(&self.net, batch, &draws, &self.sde, self.cfg.weight_mode)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {} ({loss})",
                self.steps_taken + 1
            )));
        }
        self.opt.update(&mut self.net.params, &grads);
        self.steps_taken += 1;
        Ok(loss)
    }
}

/// A validation or test recording.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub noisy: Waveform,
    pub target: Vec<f64>,
}

/// Mean SI-SDR of enhanced output against the targets. Utterance `i` is
/// sampled with seed `seed + i`.
pub fn validate(net: &ScoreNet, val: &[Utterance], fe: &FrontEnd, sde: &SdeParams, seed: u64) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let scores: Vec<f64> = val
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let x = u.noisy.take_channels(net.arch.num_mics)?;
            let y = enhance(net, &x, fe, sde, seed.wrapping_add(i as u64))?;
            si_sdr(&y, &u.target)
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log: PathBuf,
    pub best_score: f64,
    pub steps: usize,
    pub validations: usize,
    pub rejected_steps: usize,
    pub stopped_early: bool,
}

pub const LOG_HEADER: &str = "step,loss,val_sisdr";

/// Consecutive rejected steps after which training aborts.
const MAX_REJECTED_IN_A_ROW: usize = 10;

fn save_atomic(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    ck.save(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Trains until `max_steps` or until `patience` validations pass without
/// improvement. Writes `train_log.csv`, `last.ckpt` after every validation and
/// `best.ckpt` whenever the validation score improves.
pub fn fit(
    trainer: &mut Trainer,
    train: &[Pair],
    validator: &mut dyn FnMut(&ScoreNet) -> Result<f64>,
    fe: &FrontEnd,
    out_dir: &Path,
    mut on_event: Option<&mut dyn FnMut(&str)>,
) -> Result<FitReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.csv");
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let write_line = |log: &mut BufWriter<File>, line: String| -> Result<()> {
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| Error::io(&log_path, e))
    };
    write_line(&mut log, LOG_HEADER.to_string())?;

    let mut meta = BTreeMap::new();
    write_settings(&mut meta, fe, &trainer.sde);
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut validations = 0;
    let mut rejected = 0;
    let mut rejected_in_a_row = 0;
    let mut stopped_early = false;

    while trainer.steps_taken < trainer.cfg.max_steps {
        let batch = trainer.sample_batch(train)?;
        let loss = match trainer.train_step(&batch) {
            Ok(l) => l,
            Err(Error::NonFinite(msg)) => {
                rejected += 1;
                rejected_in_a_row += 1;
                if let Some(cb) = on_event.as_mut() {
                    cb(&format!("rejected step: {msg}"));
                }
                if rejected_in_a_row >= MAX_REJECTED_IN_A_ROW {
                    return Err(Error::NonFinite(format!(
                        "{msg}; {rejected_in_a_row} rejected steps in a row"
                    )));
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        rejected_in_a_row = 0;
        let step = trainer.steps_taken;
        write_line(&mut log, format!("{step},{loss:.6e},"))?;

        if step.is_multiple_of(trainer.cfg.val_every) || step == trainer.cfg.max_steps {
            let score = validator(&trainer.net)?;
            validations += 1;
            write_line(&mut log, format!("{step},,{score:.4}"))?;
            let mut ck = Checkpoint::new(trainer.net.clone());
            ck.metadata = meta.clone();
            ck.metadata.insert("step".into(), step.to_string());
            ck.metadata.insert("val_sisdr".into(), format!("{score:?}"));
            save_atomic(&ck, &last_path)?;
            if let Some(cb) = on_event.as_mut() {
                cb(&format!("step {step}: loss {loss:.4}, validation SI-SDR {score:.2} dB"));
            }
            if score > best {
                best = score;
                since_best = 0;
                save_atomic(&ck, &best_path)?;
            } else {
                since_best += 1;
                if since_best >= trainer.cfg.early_stop_patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(FitReport {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        log: log_path,
        best_score: best,
        steps: trainer.steps_taken,
        validations,
        rejected_steps: rejected,
        stopped_early,
    })
}
