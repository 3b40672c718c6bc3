//! Losses, Adam and the patch-based training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::corpus::{Corpus, Sample, Split};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::grid::stack;
use crate::groundtruth::GtMode;
use crate::network::{Model, NetworkConfig};
use crate::rng::{stream, Stream};
use crate::scalar::Scalar;
use crate::sit::{MixerMode, Phase};
use crate::synth::{sample_patch_batch, TrainImage};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Sum of per-patch squared errors.
    #[default]
    Integrated,
    /// The same sum divided by `2N`.
    Averaged,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "integrated" => Ok(LossMode::Integrated),
            "averaged" => Ok(LossMode::Averaged),
            _ => Err(Error::arg(format!("unknown loss mode `{s}` (integrated|averaged)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub patch: usize,
    pub iterations: usize,
    pub loss: LossMode,
    /// Replaces the network's mixer mode when set.
    pub mixer: Option<MixerMode>,
    pub flip: bool,
    /// Seeds initialisation, patch sampling and mixer draws (separate streams).
    pub seed: u64,
    /// Validation and checkpoint period in iterations; 0 means only at the end.
    pub checkpoint_every: usize,
    pub gt: GtMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 16,
            patch: 176,
            iterations: 1000,
            loss: LossMode::Integrated,
            mixer: None,
            flip: true,
            seed: 0,
            checkpoint_every: 100,
            gt: GtMode::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings: batch 4 of 48x48 patches.
    pub fn toy() -> Self {
        TrainConfig {
            batch: 4,
            patch: 48,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.patch == 0 {
            return Err(Error::config("batch and patch size must be positive"));
        }
        let stride = net.stride();
        if self.patch % stride != 0 {
            return Err(Error::config(format!(
                "patch size {} is not divisible by the output stride {stride}",
                self.patch
            )));
        }
        Ok(())
    }
}

fn check_pair<T: Scalar>(preds: &Tensor<T>, gts: &Tensor<T>) -> Result<()> {
    if preds.shape() != gts.shape() {
        return Err(Error::shape(format!(
            "prediction {} vs ground truth {}",
            preds.shape(),
            gts.shape()
        )));
    }
    Ok(())
}

/// `sum_i ||Y_i - GT_i||^2` over the batch.
pub fn loss_integrated<T: Scalar>(preds: &Tensor<T>, gts: &Tensor<T>) -> Result<f64> {
    check_pair(preds, gts)?;
    Ok(preds
        .data()
        .iter()
        .zip(gts.data())
        .map(|(p, g)| {
            let d = (*p - *g).as_f64();
            d * d
        })
        .sum())
}

/// `loss_integrated / (2N)`.
pub fn loss_averaged<T: Scalar>(preds: &Tensor<T>, gts: &Tensor<T>) -> Result<f64> {
    let n = preds.shape().n as f64;
    Ok(loss_integrated(preds, gts)? / (2.0 * n))
}

/// Record the selected loss on a tape.
pub fn loss_on_tape<T: Scalar>(tape: &mut Tape<T>, preds: Var, gts: Var, mode: LossMode) -> Result<Var> {
    let sq = tape.squared_error(preds, gts)?;
    match mode {
        LossMode::Integrated => Ok(sq),
        LossMode::Averaged => {
            let n = tape.value(preds).shape().n;
            tape.scale(sq, T::of(1.0 / (2.0 * n as f64)))
        }
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Vec<T>> = params.into_iter().map(|p| vec![T::zero(); p.len()]).collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_model(model: &Model<T>) -> Self {
        Self::new(model.named_params().into_iter().map(|(_, t)| t))
    }
}

/// One bias-corrected Adam update. Gradients are screened for non-finite
/// values before anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut [(String, &mut Tensor<T>)],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::arg(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("gradient of `{name}` is {}, parameter is {}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let (one, eps) = (T::one(), T::of(state.eps));
    let c1 = T::of(1.0 - state.beta1.powi(t));
    let c2 = T::of(1.0 - state.beta2.powi(t));
    let lr = T::of(lr);
    for (((_, p), g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One row of the metrics log. Iteration 0 carries only the initial validation.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss: Option<f64>,
    pub val_mae: Option<f64>,
    pub val_mse: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `iter,loss,val_mae,val_mse` with empty cells for missing values.
pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iter,loss,val_mae,val_mse\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.iter, cell(r.loss), cell(r.val_mae), cell(r.val_mse));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub log: Vec<LogRow>,
    pub warnings: Vec<String>,
    /// Checkpoint files written, oldest first.
    pub checkpoints: Vec<PathBuf>,
}

impl<T> TrainOutcome<T> {
    /// Validation MAE at iteration 0 and at the last validated iteration.
    pub fn val_mae_first_last(&self) -> Option<(f64, f64)> {
        let mut it = self.log.iter().filter_map(|r| r.val_mae);
        let first = it.next()?;
        Some((first, it.last().unwrap_or(first)))
    }
}

/// Training images with their full-resolution ground truth.
pub fn prepare_train_images(samples: &[&Sample], gt: &GtMode, warnings: &mut Vec<String>) -> Result<Vec<TrainImage>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        match &s.annotation {
            Some(a) => out.push(TrainImage {
                image: s.image.clone(),
                density: gt.generate(a)?,
            }),
            None => warnings.push(format!("{}: no annotation, left out of training", s.id)),
        }
    }
    Ok(out)
}

/// Held-out split for validation: `val` when present, otherwise `test`.
pub fn validation_split(corpus: &Corpus) -> Vec<&Sample> {
    let val = corpus.split(Split::Val);
    if val.is_empty() {
        corpus.split(Split::Test)
    } else {
        val
    }
}

/// Train from scratch. The network is initialised from `cfg.seed`, which
/// replaces `net.seed`. With `out_dir` set, the log and checkpoints are
/// written there; if the loss turns non-finite the run stops and files
/// already written stay in place.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    net: &NetworkConfig,
    corpus: &Corpus,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    let mut net = net.clone();
    net.seed = cfg.seed;
    if let Some(m) = cfg.mixer {
        net.sit.mixer = m;
    }
    net.validate()?;
    cfg.validate(&net)?;
    let stride = net.stride();

    let mut warnings = corpus.warnings.clone();
    let train_images = prepare_train_images(&corpus.split(Split::Train), &cfg.gt, &mut warnings)?;
    if train_images.is_empty() {
        return Err(Error::config("corpus has no annotated training image"));
    }
    let val = validation_split(corpus);
    let val: Vec<&Sample> = val.into_iter().filter(|s| s.annotation.is_some()).collect();
    if val.is_empty() {
        warnings.push("no annotated validation image; validation metrics are omitted".into());
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut model: Model<T> = Model::from_config(&net)?;
    let mut adam = AdamState::for_model(&model);
    let mut sampling = stream(cfg.seed, Stream::Sampling);
    let mut mixing = stream(cfg.seed, Stream::Mixer);
    let mut log = Vec::with_capacity(cfg.iterations + 1);
    let mut checkpoints = Vec::new();

    let validate = |model: &Model<T>| -> Result<(Option<f64>, Option<f64>)> {
        if val.is_empty() {
            return Ok((None, None));
        }
        let r = evaluate(model, &val)?;
        Ok((Some(r.mae), Some(r.mse)))
    };
    let write_log = |log: &[LogRow]| -> Result<()> {
        if let Some(dir) = out_dir {
            let p = dir.join("log.csv");
            fs::write(&p, log_to_csv(log)).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    };

    let (val_mae, val_mse) = validate(&model)?;
    log.push(LogRow {
        iter: 0,
        loss: None,
        val_mae,
        val_mse,
    });

    for iter in 1..=cfg.iterations {
        let batch = sample_patch_batch::<T, _>(&train_images, cfg.batch, cfg.patch, &mut sampling, cfg.flip)?;
        let pooled = batch
            .gts
            .iter()
            .map(|g| g.sum_pool(stride).map(|d| d.grid))
            .collect::<Result<Vec<_>>>()?;
        let gts: Tensor<T> = stack(&pooled)?;
        let draws = model.draw_mixers(&mut mixing, Phase::Train);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.constant(batch.images);
        let gt = tape.constant(gts);
        let pred = bound.forward(&mut tape, x, &draws)?;
        let loss = loss_on_tape(&mut tape, pred, gt, cfg.loss)?;
        let loss_value = tape.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            write_log(&log)?;
            return Err(Error::NonFiniteLoss { iter });
        }
        tape.backward(loss)?;
        let grads = bound
            .param_vars()
            .into_iter()
            .map(|v| tape.grad(v))
            .collect::<Result<Vec<_>>>()?;
        drop(tape);
        if let Err(e) = adam_step(&mut model.named_params_mut(), &grads, &mut adam, cfg.lr) {
            write_log(&log)?;
            return Err(e);
        }

        let periodic = cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0;
        let (val_mae, val_mse) = if periodic || iter == cfg.iterations {
            validate(&model)?
        } else {
            (None, None)
        };
        log.push(LogRow {
            iter,
            loss: Some(loss_value),
            val_mae,
            val_mse,
        });
        if periodic {
            if let Some(dir) = out_dir {
                let p = dir.join(format!("checkpoint_{iter:06}.scsi"));
                checkpoint::save(&model, &p)?;
                checkpoints.push(p);
                write_log(&log)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        let p = dir.join("final.scsi");
        checkpoint::save(&model, &p)?;
        checkpoints.push(p);
        write_log(&log)?;
    }
    Ok(TrainOutcome {
        model,
        log,
        warnings,
        checkpoints,
    })
}
