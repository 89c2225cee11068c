//! ε-prediction objective.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::autodiff::{concat_rows, Tape, Var};
use crate::codec::{encode_inputs, LatentTensor};
use crate::data::ImageMaskSample;
use crate::diffusion::denoiser::{denoise_batch, DenoiserConfig, Model};
use crate::diffusion::schedule::{q_sample, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::lcg::{drop_condition, Category};
use crate::params::ParamTree;
use crate::seeds;
use crate::tensor::Tensor;

/// Samples per tape. Fixed so gradients do not depend on the thread count.
pub const CHUNK_SIZE: usize = 8;

/// Maps pixel values from [0, 1] to [−1, 1].
pub fn to_signed(latent: &LatentTensor) -> LatentTensor {
    latent.map(|v| v * 2.0 - 1.0)
}

pub fn from_signed(latent: &LatentTensor) -> LatentTensor {
    latent.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Latent inputs of one sample: the clean latent and the context
/// (mask ‖ masked image) as token matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub grid: (usize, usize),
    pub x0: Tensor,
    pub context: Tensor,
}

pub fn encode_sample(sample: &ImageMaskSample, cfg: &DenoiserConfig) -> Result<EncodedSample> {
    if sample.image.channels != cfg.image_channels {
        return Err(Error::invalid(format!(
            "sample has {} channels, model expects {}",
            sample.image.channels, cfg.image_channels
        )));
    }
    let masked = sample.image.masked(&sample.mask)?;
    let enc = encode_inputs(&sample.image, &sample.mask, &masked, cfg.factor)?;
    let context = LatentTensor::concat(&[&enc.mask, &to_signed(&enc.masked_image)])?;
    Ok(EncodedSample {
        grid: (enc.image.height, enc.image.width),
        x0: to_signed(&enc.image).to_tokens(),
        context: context.to_tokens(),
    })
}

/// One noised training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub grid: (usize, usize),
    pub x_t: Tensor,
    pub context: Tensor,
    pub eps: Tensor,
    pub t: usize,
    /// Category after condition dropout.
    pub category: Category,
}

/// Draws t, ε and the dropped category for one sample.
pub fn prepare_example(
    sample: &ImageMaskSample,
    cfg: &DenoiserConfig,
    schedule: &DiffusionSchedule,
    p_drop: f64,
    rng: &mut impl Rng,
) -> Result<TrainExample> {
    let enc = encode_sample(sample, cfg)?;
    let t = rng.random_range(1..=schedule.steps());
    let eps = Tensor::from_fn(enc.x0.shape().to_vec(), |_| rng.sample(StandardNormal));
    let category = drop_condition(sample.category, p_drop, rng)?;
    Ok(TrainExample {
        grid: enc.grid,
        x_t: q_sample(&enc.x0, t, &eps, schedule)?,
        context: enc.context,
        eps,
        t,
        category,
    })
}

/// Examples for a batch; sample i draws from its own stream of `seed`.
pub fn prepare_batch(
    batch: &[ImageMaskSample],
    cfg: &DenoiserConfig,
    schedule: &DiffusionSchedule,
    p_drop: f64,
    seed: u64,
) -> Result<Vec<TrainExample>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = seeds::rng_for(seed, seeds::stream::TRAIN_SAMPLE, i as u64);
            prepare_example(s, cfg, schedule, p_drop, &mut rng)
        })
        .collect()
}

fn stack<'t>(tape: &'t Tape, parts: impl Iterator<Item = Tensor>) -> Result<Var<'t>> {
    let vars: Vec<Var<'t>> = parts.map(|t| tape.constant(t)).collect();
    if vars.len() == 1 {
        Ok(vars[0])
    } else {
        concat_rows(&vars)
    }
}

/// Predicted noise for a chunk of examples sharing one grid.
pub fn predict_chunk<'t>(model: &Model<Var<'t>>, examples: &[TrainExample]) -> Result<Var<'t>> {
    let first = examples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    if let Some(e) = examples.iter().find(|e| e.grid != first.grid) {
        return Err(Error::shape(
            "training batch",
            &[first.grid.0, first.grid.1],
            &[e.grid.0, e.grid.1],
        ));
    }
    let tape = model.table.up_projection.tape();
    let x_t = stack(tape, examples.iter().map(|e| e.x_t.clone()))?;
    let context = stack(tape, examples.iter().map(|e| e.context.clone()))?;
    let emb = examples
        .iter()
        .map(|e| model.table.embed(e.category))
        .collect::<Result<Vec<_>>>()?;
    let emb = if emb.len() == 1 { emb[0] } else { concat_rows(&emb)? };
    let timesteps: Vec<usize> = examples.iter().map(|e| e.t).collect();
    denoise_batch(&model.denoiser, x_t, context, &timesteps, emb, first.grid)
}

/// Mean of ‖ε − ε̂‖² over every latent entry of the batch.
pub fn epsilon_mse(examples: &[TrainExample], predictions: &[Tensor]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for (e, p) in examples.iter().zip(predictions) {
        let diff = e.eps.sub(p)?;
        sum += diff.data().iter().map(|v| v * v).sum::<f64>();
        n += diff.numel();
    }
    Ok(sum / n as f64)
}

fn chunk_pass(model: &Model, chunk: &[TrainExample], total: usize, with_grad: bool) -> Result<(f64, Option<Model>)> {
    let tape = Tape::new();
    let bound = if with_grad { model.bind(&tape) } else { model.constants(&tape) };
    let pred = predict_chunk(&bound, chunk)?;
    let eps = stack(&tape, chunk.iter().map(|e| e.eps.clone()))?;
    let elems = eps.value().numel();
    let loss = pred.sub(eps)?.mean_square().scale(elems as f64 / total as f64);
    let value = loss.value().item();
    if !with_grad {
        return Ok((value, None));
    }
    let mut grads = tape.backward(loss)?;
    Ok((value, Some(bound.map(&mut |v| grads.take(*v)))))
}

fn total_elems(examples: &[TrainExample]) -> Result<usize> {
    if examples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    Ok(examples.iter().map(|e| e.eps.numel()).sum())
}

/// Batch loss and its gradient. Chunks of [`CHUNK_SIZE`] examples run in
/// parallel on the current rayon pool and are reduced in order.
pub fn loss_and_grad(model: &Model, examples: &[TrainExample]) -> Result<(f64, Model)> {
    let total = total_elems(examples)?;
    let parts = examples
        .par_chunks(CHUNK_SIZE)
        .map(|c| chunk_pass(model, c, total, true))
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut acc: Option<Model> = None;
    for (l, g) in parts {
        loss += l;
        let g = g.expect("gradients requested");
        match &mut acc {
            None => acc = Some(g),
            Some(a) => add_tree(a, &g)?,
        }
    }
    Ok((loss, acc.expect("non-empty batch")))
}

/// Batch loss without gradients.
pub fn batch_loss(model: &Model, examples: &[TrainExample]) -> Result<f64> {
    let total = total_elems(examples)?;
    let parts = examples
        .par_chunks(CHUNK_SIZE)
        .map(|c| chunk_pass(model, c, total, false).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().sum())
}

/// ε-MSE of `model` on `batch`, with per-sample noise drawn from `seed`.
pub fn training_loss(
    batch: &[ImageMaskSample],
    model: &Model,
    cfg: &DenoiserConfig,
    schedule: &DiffusionSchedule,
    p_drop: f64,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("training_loss on an empty batch"));
    }
    let examples = prepare_batch(batch, cfg, schedule, p_drop, seed)?;
    batch_loss(model, &examples)
}

/// `acc += other`, leaf by leaf.
pub fn add_tree<T: ParamTree<Leaf = Tensor>>(acc: &mut T, other: &T) -> Result<()> {
    let mut others = Vec::new();
    other.visit_leaves("", &mut |_, t| others.push(t.clone()));
    let mut i = 0;
    let mut result = Ok(());
    acc.visit_leaves_mut("", &mut |_, t| {
        if result.is_ok() {
            result = t.add_assign(&others[i]);
        }
        i += 1;
    });
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{Image, Mask};
    use crate::lcg::MaskKind;

    fn sample(seed: u64) -> ImageMaskSample {
        let mut rng = seeds::rng(seed);
        let mut mask = Mask::zeros(8, 8);
        for y in 2..5 {
            for x in 1..6 {
                mask.set(y, x, true);
            }
        }
        ImageMaskSample {
            image: Image::new(8, 8, 3, (0..192).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
            mask,
            category: Category::Background,
            mask_kind: MaskKind::RandomBrush,
            seed,
        }
    }

    #[test]
    fn oracle_and_zero_predictors() {
        let cfg = DenoiserConfig::default();
        let schedule = DiffusionSchedule::default();
        let batch: Vec<_> = (0..16).map(sample).collect();
        let examples = prepare_batch(&batch, &cfg, &schedule, 0.1, 7).unwrap();
        let oracle: Vec<_> = examples.iter().map(|e| e.eps.clone()).collect();
        assert_eq!(epsilon_mse(&examples, &oracle).unwrap(), 0.0);
        let zeros: Vec<_> = examples.iter().map(|e| Tensor::zeros(e.eps.shape().to_vec())).collect();
        let mse = epsilon_mse(&examples, &zeros).unwrap();
        // 16 · 4 · 48 unit normals: standard error of the mean ≈ 0.026.
        assert!((mse - 1.0).abs() < 0.1, "{mse}");
        assert!(epsilon_mse(&[], &[]).is_err());
    }

    #[test]
    fn untrained_model_loss_is_the_zero_predictor() {
        let cfg = DenoiserConfig::default();
        let schedule = DiffusionSchedule::default();
        let model = Model::init(&cfg, &mut seeds::rng(1)).unwrap();
        let batch: Vec<_> = (0..4).map(sample).collect();
        let examples = prepare_batch(&batch, &cfg, &schedule, 0.1, 3).unwrap();
        let zeros: Vec<_> = examples.iter().map(|e| Tensor::zeros(e.eps.shape().to_vec())).collect();
        let expected = epsilon_mse(&examples, &zeros).unwrap();
        let got = training_loss(&batch, &model, &cfg, &schedule, 0.1, 3).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!(training_loss(&[], &model, &cfg, &schedule, 0.1, 3).is_err());
    }

    #[test]
    fn chunked_gradient_equals_whole_batch_gradient() {
        let cfg = DenoiserConfig {
            width: 8,
            key_width: 4,
            value_width: 4,
            time_embed_width: 4,
            ..DenoiserConfig::default()
        };
        let schedule = DiffusionSchedule::default();
        let mut model = Model::init(&cfg, &mut seeds::rng(2)).unwrap();
        model.denoiser.out_proj = Tensor::full([8, 48], 0.01);
        let batch: Vec<_> = (0..CHUNK_SIZE as u64 + 3).map(sample).collect();
        let examples = prepare_batch(&batch, &cfg, &schedule, 0.0, 5).unwrap();
        let (loss, grads) = loss_and_grad(&model, &examples).unwrap();
        let (whole_loss, whole) = chunk_pass(&model, &examples, total_elems(&examples).unwrap(), true).unwrap();
        assert!((loss - whole_loss).abs() < 1e-12);
        let (a, b) = (crate::params::flatten(&grads), crate::params::flatten(&whole.unwrap()));
        for (x, y) in a.iter().zip(&b) {
            assert!(x.sub(y).unwrap().max_abs() < 1e-12);
        }
    }
}
