//! End-to-end operations driven by a [`RunConfig`]: data generation,
//! training runs with checkpoints, and evaluation.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::{build_pairs, gen_scene, ImageMaskSample, Shard};
use crate::diffusion::train::batch_loss;
use crate::diffusion::{loss_and_grad, prepare_batch, sample_batch, InpaintRequest, Model, SamplerConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::EvalReport;
use crate::optim::{clip_grad_norm, AdamState};
use crate::params::{flatten, ParamTree};
use crate::seeds::{self, stream};

/// Renders `scenes` scenes from `base_seed` and draws `samples` pairs.
pub fn generate_samples(cfg: &RunConfig, base_seed: u64, scenes: usize, samples: usize) -> Result<Vec<ImageMaskSample>> {
    let scene_cfg = cfg.scene_config()?;
    let rendered = (0..scenes as u64)
        .into_par_iter()
        .map(|i| gen_scene(&mut seeds::rng_for(base_seed, stream::SCENE, i), &scene_cfg))
        .collect::<Result<Vec<_>>>()?;
    let out: Vec<_> = build_pairs(&rendered, &cfg.pair_config(), base_seed)?.take(samples).collect();
    if out.len() < samples {
        return Err(Error::Generation(format!(
            "pair stream ended after {} of {samples} samples (masks.max_attempts = {})",
            out.len(),
            cfg.masks.max_attempts
        )));
    }
    Ok(out)
}

/// Seed of the held-out set, disjoint from the training stream.
pub fn eval_seed(cfg: &RunConfig) -> u64 {
    seeds::derive(cfg.run.seed, stream::EVAL_DATA, 0)
}

/// Training and held-out shards for `cfg`.
pub fn datagen(cfg: &RunConfig) -> Result<(Shard, Shard)> {
    let text = cfg.to_text();
    let train = generate_samples(cfg, cfg.run.seed, cfg.data.scenes, cfg.data.samples)?;
    let eval = generate_samples(cfg, eval_seed(cfg), cfg.data.eval_scenes, cfg.data.eval_samples)?;
    Ok((
        Shard {
            config: text.clone(),
            samples: train,
        },
        Shard {
            config: text,
            samples: eval,
        },
    ))
}

pub fn init_model(cfg: &RunConfig) -> Result<Model> {
    Model::init(&cfg.denoiser_config(), &mut seeds::rng_for(cfg.run.seed, stream::INIT, 0))
}

/// Loss of `model` on `samples` under noise and timesteps fixed by the run
/// seed, with conditioning never dropped.
pub fn probe_loss(model: &Model, cfg: &RunConfig, samples: &[ImageMaskSample]) -> Result<f64> {
    let seed = seeds::derive(cfg.run.seed, stream::LOSS_PROBE, 0);
    let examples = prepare_batch(samples, &cfg.denoiser_config(), &cfg.schedule()?, 0.0, seed)?;
    batch_loss(model, &examples)
}

/// Single-writer optimizer loop over an in-memory training set.
pub struct Trainer<'a> {
    cfg: RunConfig,
    data: &'a [ImageMaskSample],
    pub model: Model,
    /// Exponential moving average of `model`, used for sampling.
    pub ema: Model,
    pub adam: AdamState,
    /// Completed steps.
    pub step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &RunConfig, data: &'a [ImageMaskSample]) -> Result<Self> {
        let model = init_model(cfg)?;
        Trainer::with_state(cfg, data, model.clone(), model, None, 0)
    }

    /// Continues from `ck`, which must come from a run whose training
    /// settings equal `cfg`'s.
    pub fn resume(cfg: &RunConfig, data: &'a [ImageMaskSample], ck: &Checkpoint) -> Result<Self> {
        let saved = RunConfig::parse(&ck.config)?;
        if saved.training_fingerprint() != cfg.training_fingerprint() {
            return Err(Error::Config(
                "checkpoint was produced by a different configuration; refusing to resume".into(),
            ));
        }
        let model = ck.model(&cfg.denoiser_config())?;
        let ema = match ck.ema_model(&cfg.denoiser_config())? {
            Some(m) => m,
            None => model.clone(),
        };
        Trainer::with_state(cfg, data, model, ema, ck.optimizer.clone(), ck.step)
    }

    fn with_state(
        cfg: &RunConfig,
        data: &'a [ImageMaskSample],
        model: Model,
        ema: Model,
        adam: Option<AdamState>,
        step: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let adam = adam.unwrap_or_else(|| AdamState::new(&model));
        Ok(Trainer {
            cfg: cfg.clone(),
            data,
            model,
            ema,
            adam,
            step,
        })
    }

    /// The batch of step `step`, drawn with replacement.
    pub fn batch(&self, step: u64) -> Vec<ImageMaskSample> {
        let mut rng = seeds::rng_for(self.cfg.run.seed, stream::TRAIN_BATCH, step);
        (0..self.cfg.train.batch_size)
            .map(|_| self.data[rng.random_range(0..self.data.len())].clone())
            .collect()
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.batch(self.step);
        let seed = seeds::derive(self.cfg.run.seed, stream::TRAIN_SAMPLE, self.step);
        let examples = prepare_batch(
            &batch,
            &self.cfg.denoiser_config(),
            &self.cfg.schedule()?,
            self.cfg.diffusion.p_drop,
            seed,
        )?;
        let (loss, mut grads) = loss_and_grad(&self.model, &examples)?;
        if self.cfg.train.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, self.cfg.train.clip_norm);
        }
        self.adam.update(&mut self.model, &grads, &self.cfg.adam_config())?;
        self.step += 1;
        self.update_ema();
        Ok(loss)
    }

    /// Averaging with a warm-up: the decay is capped by (1 + n) / (10 + n).
    fn update_ema(&mut self) {
        let n = self.step as f64;
        let decay = self.cfg.train.ema_decay.min((1.0 + n) / (10.0 + n));
        let current = flatten(&self.model);
        let mut i = 0;
        self.ema.visit_leaves_mut("", &mut |_, avg| {
            let fresh = current[i].data();
            for (a, &m) in avg.data_mut().iter_mut().zip(fresh) {
                *a = decay * *a + (1.0 - decay) * m;
            }
            i += 1;
        });
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.cfg.to_text(), &self.model, Some(&self.adam), self.step).with_ema(&self.ema)
    }
}

pub const LATEST: &str = "latest.lcgc";
pub const LOSS_LOG: &str = "loss.log";
pub const LOCK: &str = "train.lock";

/// Exclusive claim on a checkpoint directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(Error::Io(io::Error::new(
                io::ErrorKind::AlreadyExists,
                format!(
                    "{} is held by another training process (delete it if that process is gone)",
                    path.display()
                ),
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn step_checkpoint_name(step: u64) -> String {
    format!("step-{step:08}.lcgc")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub start_step: u64,
    pub end_step: u64,
    pub losses: Vec<f64>,
}

/// Trains into `dir` until `cfg.train.steps` steps are complete, resuming
/// from `dir/latest.lcgc` when present.
///
/// Every `checkpoint_every` steps and at the end, the state is written to
/// a numbered checkpoint and to `latest.lcgc`; each step appends
/// `step loss seconds` to `loss.log`.
pub fn train_run(
    cfg: &RunConfig,
    data: &[ImageMaskSample],
    dir: &Path,
    mut on_step: impl FnMut(u64, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let _lock = DirLock::acquire(dir)?;
    let latest = dir.join(LATEST);
    let mut trainer = if latest.exists() {
        Trainer::resume(cfg, data, &load_checkpoint(&latest)?)?
    } else {
        Trainer::new(cfg, data)?
    };
    let start_step = trainer.step;
    let mut log = OpenOptions::new().create(true).append(true).open(dir.join(LOSS_LOG))?;
    let started = Instant::now();
    let mut losses = Vec::new();
    let save = |t: &Trainer| -> Result<()> {
        let ck = t.checkpoint();
        save_checkpoint(&dir.join(step_checkpoint_name(t.step)), &ck)?;
        save_checkpoint(&latest, &ck)
    };
    if start_step == 0 {
        save(&trainer)?;
    }
    while trainer.step < cfg.train.steps {
        let loss = trainer.step()?;
        losses.push(loss);
        writeln!(log, "{} {loss} {:.3}", trainer.step, started.elapsed().as_secs_f64())?;
        on_step(trainer.step, loss);
        let every = cfg.train.checkpoint_every;
        if (every > 0 && trainer.step % every == 0) || trainer.step == cfg.train.steps {
            save(&trainer)?;
        }
    }
    log.flush()?;
    Ok(TrainOutcome {
        start_step,
        end_step: trainer.step,
        losses,
    })
}

/// Inpaints every sample and scores the masked region against the truth.
pub fn evaluate(
    model: &Model,
    cfg: &RunConfig,
    samples: &[ImageMaskSample],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<(EvalReport, Vec<Image>)> {
    let requests: Vec<_> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| InpaintRequest {
            image: s.image.clone(),
            mask: s.mask.clone(),
            category: s.category,
            seed: seeds::derive(seed, stream::SAMPLER, i as u64),
        })
        .collect();
    let outputs = sample_batch(model, &cfg.denoiser_config(), &cfg.schedule()?, &requests, sampler)?;
    let mut report = EvalReport::new();
    for (out, s) in outputs.iter().zip(samples) {
        report.add(out, &s.image, &s.mask)?;
    }
    Ok((report, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::flatten;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.scene.height = 16;
        c.scene.width = 16;
        c.model.width = 8;
        c.model.key_width = 4;
        c.model.value_width = 4;
        c.model.time_embed_width = 8;
        c.model.mid_blocks = 1;
        c.model.embed_dim = 6;
        c.model.embed_tokens = 2;
        c.train.batch_size = 4;
        c.train.checkpoint_every = 2;
        c.data.scenes = 6;
        c.data.samples = 12;
        c.data.eval_scenes = 3;
        c.data.eval_samples = 4;
        c
    }

    #[test]
    fn datagen_is_deterministic_and_disjoint() {
        let cfg = tiny();
        let (a, ea) = datagen(&cfg).unwrap();
        let (b, _) = datagen(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 12);
        assert_eq!(ea.samples.len(), 4);
        assert_ne!(a.samples[0].image, ea.samples[0].image);
    }

    #[test]
    fn resumed_run_matches_straight_run() {
        let mut cfg = tiny();
        let (train, _) = datagen(&cfg).unwrap();
        cfg.train.steps = 3;
        let straight = tempfile::tempdir().unwrap();
        train_run(&cfg, &train.samples, straight.path(), |_, _| {}).unwrap();
        let split = tempfile::tempdir().unwrap();
        cfg.train.steps = 2;
        train_run(&cfg, &train.samples, split.path(), |_, _| {}).unwrap();
        cfg.train.steps = 3;
        let out = train_run(&cfg, &train.samples, split.path(), |_, _| {}).unwrap();
        assert_eq!(out.start_step, 2);
        let a = fs::read(straight.path().join(LATEST)).unwrap();
        let b = fs::read(split.path().join(LATEST)).unwrap();
        assert_eq!(a, b);
        assert!(!split.path().join(LOCK).exists());
    }

    #[test]
    fn average_follows_the_warm_up_rule() {
        let cfg = tiny();
        let (train, _) = datagen(&cfg).unwrap();
        let mut t = Trainer::new(&cfg, &train.samples).unwrap();
        let before = flatten(&t.model);
        t.step().unwrap();
        let after = flatten(&t.model);
        let d = 2.0 / 11.0;
        for ((e, b), a) in flatten(&t.ema).iter().zip(&before).zip(&after) {
            for i in 0..e.numel() {
                let want = d * b.data()[i] + (1.0 - d) * a.data()[i];
                assert!((e.data()[i] - want).abs() <= 1e-15 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn zero_steps_saves_the_initialization() {
        let mut cfg = tiny();
        cfg.train.steps = 0;
        let (train, _) = datagen(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        train_run(&cfg, &train.samples, dir.path(), |_, _| {}).unwrap();
        let ck = load_checkpoint(&dir.path().join(LATEST)).unwrap();
        assert_eq!(ck.step, 0);
        let model = ck.model(&cfg.denoiser_config()).unwrap();
        assert_eq!(flatten(&model), flatten(&init_model(&cfg).unwrap()));
    }

    #[test]
    fn mismatched_resume_and_held_lock_are_refused() {
        let mut cfg = tiny();
        cfg.train.steps = 1;
        let (train, _) = datagen(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        train_run(&cfg, &train.samples, dir.path(), |_, _| {}).unwrap();
        let mut other = cfg.clone();
        other.train.lr = 0.5;
        other.train.steps = 2;
        assert!(matches!(
            train_run(&other, &train.samples, dir.path(), |_, _| {}),
            Err(Error::Config(_))
        ));
        let _held = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(
            train_run(&cfg, &train.samples, dir.path(), |_, _| {}),
            Err(Error::Io(_))
        ));
    }
}
