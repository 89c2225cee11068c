//! Guided ancestral sampling.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{concat_rows, Tape};
use crate::codec::{composite, decode_output, LatentTensor};
use crate::data::ImageMaskSample;
use crate::diffusion::denoiser::{denoise_batch, DenoiserConfig, Model, DEFAULT_GUIDANCE_SCALE};
use crate::diffusion::schedule::DiffusionSchedule;
use crate::diffusion::train::{encode_sample, from_signed};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::lcg::{Category, GuidanceMode, MaskKind};
use crate::seeds;
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLER_STEPS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub scale: f64,
    pub mode: GuidanceMode,
    /// Replace known latent cells with their noised ground truth after
    /// every step.
    pub latent_compositing: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: DEFAULT_SAMPLER_STEPS,
            scale: DEFAULT_GUIDANCE_SCALE,
            mode: GuidanceMode::ConditionalVsNull,
            latent_compositing: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if !(self.scale >= 1.0) {
            return Err(Error::Config(format!("guidance scale {} must be at least 1", self.scale)));
        }
        if self.steps == 0 || self.steps > schedule.steps() {
            return Err(Error::Config(format!(
                "sampler steps {} outside 1..={}",
                self.steps,
                schedule.steps()
            )));
        }
        Ok(())
    }
}

/// `ε_ref + s·(ε_cond − ε_ref)`; returns `ε_cond` unchanged when s = 1.
pub fn cfg_combine(eps_cond: &Tensor, eps_ref: &Tensor, scale: f64) -> Result<Tensor> {
    if eps_cond.shape() != eps_ref.shape() {
        return Err(Error::shape("cfg", eps_cond.shape(), eps_ref.shape()));
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    eps_ref.zip_broadcast(eps_cond, "cfg", |r, c| r + scale * (c - r))
}

/// Guided noise prediction for one sample given its token matrices.
#[allow(clippy::too_many_arguments)]
pub fn cfg_predict(
    model: &Model,
    x_t: &Tensor,
    t: usize,
    context: &Tensor,
    grid: (usize, usize),
    cond_tokens: &Tensor,
    null_tokens: &Tensor,
    scale: f64,
) -> Result<Tensor> {
    let eps = predict_pairs(model, &[x_t.clone()], &[t], &[context.clone()], grid, &[cond_tokens.clone()], &[null_tokens.clone()], scale)?;
    Ok(eps.into_iter().next().expect("one sample"))
}

/// Guided predictions for several samples in one batched pass.
#[allow(clippy::too_many_arguments)]
fn predict_pairs(
    model: &Model,
    x_t: &[Tensor],
    timesteps: &[usize],
    context: &[Tensor],
    grid: (usize, usize),
    cond: &[Tensor],
    reference: &[Tensor],
    scale: f64,
) -> Result<Vec<Tensor>> {
    if !(scale >= 1.0) {
        return Err(Error::invalid(format!("guidance scale {scale} must be at least 1")));
    }
    let n = x_t.len();
    let guided = scale != 1.0;
    let tape = Tape::new();
    let p = model.constants(&tape);
    let reps = if guided { 2 } else { 1 };
    let rows = |parts: &[Tensor]| -> Result<_> {
        let vars: Vec<_> = (0..reps).flat_map(|_| parts.iter()).map(|t| tape.constant(t.clone())).collect();
        if vars.len() == 1 {
            Ok(vars[0])
        } else {
            concat_rows(&vars)
        }
    };
    let mut emb_parts = cond.to_vec();
    if guided {
        emb_parts.extend_from_slice(reference);
    }
    let emb_vars: Vec<_> = emb_parts.into_iter().map(|t| tape.constant(t)).collect();
    let emb = if emb_vars.len() == 1 { emb_vars[0] } else { concat_rows(&emb_vars)? };
    let ts: Vec<usize> = (0..reps).flat_map(|_| timesteps.iter().copied()).collect();
    let out = denoise_batch(&p.denoiser, rows(x_t)?, rows(context)?, &ts, emb, grid)?;
    let out = out.value();
    let cells = grid.0 * grid.1;
    let c = out.shape()[1];
    let block = |i: usize| Tensor::new([cells, c], out.data()[i * cells * c..(i + 1) * cells * c].to_vec());
    (0..n)
        .map(|i| {
            let eps_cond = block(i)?;
            if guided {
                cfg_combine(&eps_cond, &block(n + i)?, scale)
            } else {
                Ok(eps_cond)
            }
        })
        .collect()
}

/// One inpainting job.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintRequest {
    pub image: Image,
    pub mask: Mask,
    pub category: Category,
    pub seed: u64,
}

/// One ancestral step from `t` to `t_prev` on the strided chain, with the
/// predicted clean latent clipped to [−1, 1].
fn ancestral_step(
    x: &mut [f64],
    eps: &[f64],
    ab_t: f64,
    ab_prev: f64,
    noise: Option<&[f64]>,
) {
    let beta = 1.0 - ab_t / ab_prev;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab_t)).max(0.0).sqrt();
    for (i, xi) in x.iter_mut().enumerate() {
        let x0 = ((*xi - (1.0 - ab_t).sqrt() * eps[i]) / ab_t.sqrt()).clamp(-1.0, 1.0);
        let mut next = c0 * x0 + ct * *xi;
        if let Some(z) = noise {
            next += sigma * z[i];
        }
        *xi = next;
    }
}

/// Inpaints every request. Each request draws only from its own seed, so
/// results do not depend on how requests are grouped.
pub fn sample_batch(
    model: &Model,
    cfg: &DenoiserConfig,
    schedule: &DiffusionSchedule,
    requests: &[InpaintRequest],
    sampler: &SamplerConfig,
) -> Result<Vec<Image>> {
    sampler.validate(schedule)?;
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let encoded = requests
        .iter()
        .map(|r| {
            encode_sample(
                &ImageMaskSample {
                    image: r.image.clone(),
                    mask: r.mask.clone(),
                    category: r.category,
                    mask_kind: MaskKind::RandomBrush,
                    seed: r.seed,
                },
                cfg,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = encoded[0].grid;
    if let Some(e) = encoded.iter().find(|e| e.grid != grid) {
        return Err(Error::shape("sample_batch", &[grid.0, grid.1], &[e.grid.0, e.grid.1]));
    }
    let cond: Vec<Tensor> = requests
        .iter()
        .map(|r| model.table.embed(r.category))
        .collect::<Result<_>>()?;
    let reference: Vec<Tensor> = requests
        .iter()
        .map(|r| model.table.embed(sampler.mode.reference(r.category)))
        .collect::<Result<_>>()?;
    let contexts: Vec<Tensor> = encoded.iter().map(|e| e.context.clone()).collect();
    let mut rngs: Vec<_> = requests
        .iter()
        .map(|r| seeds::rng_for(r.seed, seeds::stream::SAMPLER, 0))
        .collect();
    let shape = encoded[0].x0.shape().to_vec();
    let numel: usize = shape.iter().product();
    let mut xs: Vec<Tensor> = rngs
        .iter_mut()
        .map(|rng| Tensor::from_fn(shape.clone(), |_| rng.sample(StandardNormal)))
        .collect();
    let timesteps = schedule.strided(sampler.steps)?;
    for (k, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(k + 1).copied().unwrap_or(0);
        let (ab_t, ab_prev) = (schedule.alpha_bar(t)?, schedule.alpha_bar(t_prev)?);
        let eps = predict_pairs(model, &xs, &vec![t; xs.len()], &contexts, grid, &cond, &reference, sampler.scale)?;
        for (i, x) in xs.iter_mut().enumerate() {
            let rng = &mut rngs[i];
            let noise: Option<Vec<f64>> = (t_prev > 0).then(|| (0..numel).map(|_| rng.sample(StandardNormal)).collect());
            let mut data = x.data().to_vec();
            ancestral_step(&mut data, eps[i].data(), ab_t, ab_prev, noise.as_deref());
            if sampler.latent_compositing && t_prev > 0 {
                let c = shape[1];
                let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
                for cell in 0..shape[0] {
                    if contexts[i].data()[cell * (c + 1)] == 0.0 {
                        for j in 0..c {
                            let z: f64 = rng.sample(StandardNormal);
                            data[cell * c + j] = a * encoded[i].x0.data()[cell * c + j] + b * z;
                        }
                    }
                }
            }
            *x = Tensor::new(shape.clone(), data)?;
        }
    }
    xs.iter()
        .zip(requests)
        .map(|(x, r)| {
            let latent = from_signed(&LatentTensor::from_tokens(grid.0, grid.1, x)?);
            let generated = decode_output(&latent, cfg.factor, cfg.image_channels)?;
            composite(&r.image, &generated, &r.mask)
        })
        .collect()
}

pub fn sample(
    model: &Model,
    cfg: &DenoiserConfig,
    schedule: &DiffusionSchedule,
    request: &InpaintRequest,
    sampler: &SamplerConfig,
) -> Result<Image> {
    Ok(sample_batch(model, cfg, schedule, std::slice::from_ref(request), sampler)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (DenoiserConfig, Model) {
        let cfg = DenoiserConfig {
            width: 8,
            key_width: 4,
            value_width: 4,
            time_embed_width: 4,
            ..DenoiserConfig::default()
        };
        let mut rng = seeds::rng(9);
        let mut model = Model::init(&cfg, &mut rng).unwrap();
        model.denoiser.out_proj = Tensor::from_fn([8, 48], |_| rng.random_range(-0.5..0.5));
        (cfg, model)
    }

    fn request(seed: u64, mask: Mask) -> InpaintRequest {
        let mut rng = seeds::rng(seed);
        InpaintRequest {
            image: Image::new(8, 8, 3, (0..192).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
            mask,
            category: Category::Foreground,
            seed,
        }
    }

    #[test]
    fn combine_rules() {
        let c = Tensor::new([1, 3], vec![0.1, -0.2, 0.3]).unwrap();
        let r = Tensor::new([1, 3], vec![1.0, 2.0, -3.0]).unwrap();
        assert_eq!(cfg_combine(&c, &r, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &c, 3.5).unwrap(), c);
        let s2 = cfg_combine(&c, &r, 2.0).unwrap();
        assert!((s2.data()[0] - 1.0 - 2.0 * (0.1 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_returns_input() {
        let (cfg, model) = tiny();
        let req = request(1, Mask::zeros(8, 8));
        let sampler = SamplerConfig {
            steps: 5,
            ..SamplerConfig::default()
        };
        let out = sample(&model, &cfg, &DiffusionSchedule::default(), &req, &sampler).unwrap();
        assert_eq!(out, req.image);
    }

    #[test]
    fn seeded_and_grouping_independent() {
        let (cfg, model) = tiny();
        let mut mask = Mask::zeros(8, 8);
        mask.set(3, 3, true);
        mask.set(6, 1, true);
        let reqs = [request(2, mask.clone()), request(3, Mask::ones(8, 8))];
        let sampler = SamplerConfig {
            steps: 6,
            latent_compositing: true,
            ..SamplerConfig::default()
        };
        let schedule = DiffusionSchedule::default();
        let both = sample_batch(&model, &cfg, &schedule, &reqs, &sampler).unwrap();
        assert_eq!(both[0], sample(&model, &cfg, &schedule, &reqs[0], &sampler).unwrap());
        assert_eq!(both[1], sample(&model, &cfg, &schedule, &reqs[1], &sampler).unwrap());
        assert_ne!(both[1], reqs[1].image);
    }

    #[test]
    fn scale_below_one_rejected() {
        let (cfg, model) = tiny();
        let sampler = SamplerConfig {
            scale: 0.5,
            ..SamplerConfig::default()
        };
        let req = request(4, Mask::ones(8, 8));
        assert!(sample(&model, &cfg, &DiffusionSchedule::default(), &req, &sampler).is_err());
    }
}
