//! ε-prediction network built from interaction blocks.
//!
//! ```text
//! [x_t ‖ mask ‖ masked] → Linear → + time embedding
//!   → down blocks ─────────────────────────────┐ skip
//!   → 2×2 space-to-depth → Linear(4d → d)      │
//!   → mid blocks                               │
//!   → Linear(d → 4d) → depth-to-space ‖ ───────┘ → Linear(2d → d)
//!   → up blocks → LayerNorm → Linear → ε̂
//! ```
//!
//! Every latent cell is one token; tokens are ordered row-major, and every
//! other block of the stack scans them back to front. All functions accept
//! several samples stacked row-wise.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{concat_cols, Tape, Var};
use crate::codec::{LatentTensor, DEFAULT_FACTOR};
use crate::error::{Error, Result};
use crate::gla::DEFAULT_TAU;
use crate::interaction::{interaction_forward_batch, BlockDims, InteractionParams, Norm};
use crate::lcg::{LcgEmbeddingTable, DEFAULT_EMBED_DIM};
use crate::params::{linear_weight, param_tree, zero_bias, ParamTree};
use crate::tensor::Tensor;

pub const DEFAULT_GUIDANCE_SCALE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    /// Latent factor f of the codec.
    pub factor: usize,
    pub image_channels: usize,
    /// Token width d.
    pub width: usize,
    pub key_width: usize,
    pub value_width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub tau: f64,
    pub time_embed_width: usize,
    pub down_blocks: usize,
    pub mid_blocks: usize,
    pub up_blocks: usize,
    /// Per-stage switches; inside an enabled stage, blocks with an odd
    /// position in the whole stack carry cross-attention.
    pub cross_down: bool,
    pub cross_mid: bool,
    pub cross_up: bool,
    /// E.Dim.
    pub embed_dim: usize,
    /// Embedding tokens m per category.
    pub embed_tokens: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            factor: DEFAULT_FACTOR,
            image_channels: 3,
            width: 64,
            key_width: 32,
            value_width: 32,
            heads: 1,
            mlp_ratio: 2,
            tau: DEFAULT_TAU,
            time_embed_width: 32,
            down_blocks: 1,
            mid_blocks: 2,
            up_blocks: 1,
            cross_down: true,
            cross_mid: true,
            cross_up: true,
            embed_dim: DEFAULT_EMBED_DIM,
            embed_tokens: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.factor", self.factor),
            ("model.image_channels", self.image_channels),
            ("model.width", self.width),
            ("model.key_width", self.key_width),
            ("model.value_width", self.value_width),
            ("model.heads", self.heads),
            ("model.mlp_ratio", self.mlp_ratio),
            ("model.embed_dim", self.embed_dim),
            ("model.embed_tokens", self.embed_tokens),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        if self.key_width % self.heads != 0 || self.value_width % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.key_width ({}) and model.value_width ({}) must be divisible by model.heads ({})",
                self.key_width, self.value_width, self.heads
            )));
        }
        if self.time_embed_width == 0 || self.time_embed_width % 2 != 0 {
            return Err(Error::Config("model.time_embed_width must be positive and even".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("model.tau must be positive".into()));
        }
        Ok(())
    }

    pub fn latent_channels(&self) -> usize {
        self.image_channels * self.factor * self.factor
    }

    /// Mask channel plus masked-image channels.
    pub fn context_channels(&self) -> usize {
        1 + self.latent_channels()
    }

    fn block_dims(&self) -> BlockDims {
        BlockDims {
            width: self.width,
            key_width: self.key_width,
            value_width: self.value_width,
            embed_width: self.width,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            tau: self.tau,
        }
    }

    /// Cross-attention placement for (down, mid, up) blocks.
    pub fn cross_layout(&self) -> [Vec<bool>; 3] {
        let mut index = 0;
        let mut stage = |n: usize, on: bool| {
            (0..n)
                .map(|_| {
                    index += 1;
                    on && index % 2 == 0
                })
                .collect::<Vec<_>>()
        };
        [
            stage(self.down_blocks, self.cross_down),
            stage(self.mid_blocks, self.cross_mid),
            stage(self.up_blocks, self.cross_up),
        ]
    }
}

param_tree! {
    #[derive(Clone, Debug)]
    pub struct DenoiserParams {
        tensor in_proj: P,
        tensor in_bias: P,
        tensor time_proj: P,
        tensor time_bias: P,
        list down: Vec<InteractionParams<P>>,
        tensor pool_proj: P,
        tensor pool_bias: P,
        list mid: Vec<InteractionParams<P>>,
        tensor unpool_proj: P,
        tensor unpool_bias: P,
        tensor merge_proj: P,
        tensor merge_bias: P,
        list up: Vec<InteractionParams<P>>,
        nested out_norm: Norm<P>,
        tensor out_proj: P,
        tensor out_bias: P,
        /// Per-channel weight of the direct path from x_t to the output.
        tensor input_skip: P,
    }
}

param_tree! {
    /// Everything that is trained: the denoiser and the category table.
    #[derive(Clone, Debug)]
    pub struct Model {
        nested denoiser: DenoiserParams<P>,
        nested table: LcgEmbeddingTable<P>,
    }
}

impl DenoiserParams {
    /// Random initialization; the output projection and the input skip
    /// start at zero so the untrained network predicts ε̂ = 0.
    pub fn init(cfg: &DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let [down, mid, up] = cfg.cross_layout();
        let blocks = |layout: Vec<bool>, mut rng: &mut dyn rand::RngCore| {
            layout
                .into_iter()
                .map(|cross| InteractionParams::init(cfg.block_dims(), cross, &mut rng))
                .collect::<Result<Vec<_>>>()
        };
        let in_proj = linear_weight(cfg.latent_channels() + cfg.context_channels(), d, rng);
        let time_proj = linear_weight(cfg.time_embed_width, d, rng);
        let down = blocks(down, rng)?;
        let pool_proj = linear_weight(4 * d, d, rng);
        let mid = blocks(mid, rng)?;
        let unpool_proj = linear_weight(d, 4 * d, rng);
        let merge_proj = linear_weight(2 * d, d, rng);
        let up = blocks(up, rng)?;
        Ok(DenoiserParams {
            in_proj,
            in_bias: zero_bias(d),
            time_proj,
            time_bias: zero_bias(d),
            down,
            pool_proj,
            pool_bias: zero_bias(d),
            mid,
            unpool_proj,
            unpool_bias: zero_bias(4 * d),
            merge_proj,
            merge_bias: zero_bias(d),
            up,
            out_norm: Norm::new(d),
            out_proj: Tensor::zeros([d, cfg.latent_channels()]),
            out_bias: zero_bias(cfg.latent_channels()),
            input_skip: zero_bias(cfg.latent_channels()),
        })
    }

    /// Zeros the residual output projection of every block, the output
    /// head's weight and the input skip, leaving only the head's bias.
    pub fn zero_output_projections(&mut self) {
        for b in self.down.iter_mut().chain(&mut self.mid).chain(&mut self.up) {
            b.zero_output_projections();
        }
        self.out_proj = Tensor::zeros(self.out_proj.shape().to_vec());
        self.input_skip = Tensor::zeros(self.input_skip.shape().to_vec());
    }
}

impl Model {
    pub fn init(cfg: &DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        let denoiser = DenoiserParams::init(cfg, rng)?;
        let table = LcgEmbeddingTable::init(cfg.embed_tokens, cfg.embed_dim, cfg.width, rng)?;
        Ok(Model { denoiser, table })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Model<Var<'t>> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }

    pub fn constants<'t>(&self, tape: &'t Tape) -> Model<Var<'t>> {
        self.map(&mut |t| tape.constant(t.clone()))
    }

    /// Checks that the stored tensors fit `cfg`.
    pub fn check_config(&self, cfg: &DenoiserConfig) -> Result<()> {
        let fresh = Model::init(cfg, &mut crate::seeds::rng(0))?;
        let mut expected = Vec::new();
        fresh.visit_leaves("", &mut |n, t| expected.push((n, t.shape().to_vec())));
        let mut actual = Vec::new();
        self.visit_leaves("", &mut |n, t| actual.push((n, t.shape().to_vec())));
        if expected != actual {
            return Err(Error::Config("model parameters do not match the [model] configuration".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of width `width` for each timestep.
pub fn timestep_embedding(timesteps: &[usize], width: usize) -> Tensor {
    let half = width / 2;
    let mut data = Vec::with_capacity(timesteps.len() * width);
    for &t in timesteps {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
    }
    Tensor::new([timesteps.len(), width], data).expect("non-empty timesteps")
}

/// Flat gather indices for 2×2 space-to-depth on `batch` token grids of
/// `h × w` cells with `d` channels.
fn pool_index(batch: usize, h: usize, w: usize, d: usize) -> Arc<[usize]> {
    let (ph, pw) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(batch * h * w * d);
    for b in 0..batch {
        for y in 0..ph {
            for x in 0..pw {
                for q in 0..4 {
                    let row = b * h * w + (2 * y + q / 2) * w + 2 * x + q % 2;
                    idx.extend((0..d).map(|c| row * d + c));
                }
            }
        }
    }
    idx.into()
}

/// Inverse of [`pool_index`]: indices into the pooled `4d`-wide tokens.
fn unpool_index(batch: usize, h: usize, w: usize, d: usize) -> Arc<[usize]> {
    let (ph, pw) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(batch * h * w * d);
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                let row = b * ph * pw + (y / 2) * pw + x / 2;
                let q = (y % 2) * 2 + x % 2;
                idx.extend((0..d).map(|c| row * 4 * d + q * d + c));
            }
        }
    }
    idx.into()
}

/// Reverses token order inside each of `batch` sequences.
fn reverse_index(rows: usize, batch: usize, d: usize) -> Arc<[usize]> {
    let seg = rows / batch;
    (0..rows)
        .flat_map(|r| {
            let src = (r / seg) * seg + seg - 1 - r % seg;
            (0..d).map(move |c| src * d + c)
        })
        .collect()
}

/// Runs blocks in sequence; blocks at odd positions of the whole stack
/// scan the tokens in reverse order.
fn run_stage<'t>(
    mut hid: Var<'t>,
    embeddings: Var<'t>,
    blocks: &[InteractionParams<Var<'t>>],
    batch: usize,
    index: &mut usize,
) -> Result<Var<'t>> {
    let shape = hid.shape();
    let rev = reverse_index(shape[0], batch, shape[1]);
    for b in blocks {
        if *index % 2 == 1 {
            hid = hid.gather(rev.clone(), &shape)?;
            hid = interaction_forward_batch(hid, embeddings, b, batch)?;
            hid = hid.gather(rev.clone(), &shape)?;
        } else {
            hid = interaction_forward_batch(hid, embeddings, b, batch)?;
        }
        *index += 1;
    }
    Ok(hid)
}

fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    x.matmul(w)?.add(b)
}

/// Batched ε-prediction.
///
/// `x_t` is (B·N)×C and `context` is (B·N)×(1+C) holding the mask and the
/// masked image, where N = `grid.0 · grid.1`. `embeddings` holds B·m rows,
/// m per sample.
pub fn denoise_batch<'t>(
    p: &DenoiserParams<Var<'t>>,
    x_t: Var<'t>,
    context: Var<'t>,
    timesteps: &[usize],
    embeddings: Var<'t>,
    grid: (usize, usize),
) -> Result<Var<'t>> {
    let tape = x_t.tape();
    let batch = timesteps.len();
    let (h, w) = grid;
    let n = h * w;
    let d = p.in_bias.shape()[1];
    if batch == 0 {
        return Err(Error::invalid("denoise on an empty batch"));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "denoise",
            msg: format!("latent grid {h}×{w} cannot be pooled 2×2"),
        });
    }
    if x_t.shape()[0] != batch * n || context.shape()[0] != batch * n {
        return Err(Error::shape("denoise", &x_t.shape(), &context.shape()));
    }
    let input = concat_cols(&[x_t, context])?;
    let mut hid = linear(input, p.in_proj, p.in_bias)?;

    let temb = timestep_embedding(timesteps, p.time_proj.shape()[0]);
    let temb = linear(tape.constant(temb), p.time_proj, p.time_bias)?;
    let spread: Vec<usize> = (0..batch * n).flat_map(|r| (0..d).map(move |c| (r / n) * d + c)).collect();
    hid = hid.add(temb.gather(spread.into(), &[batch * n, d])?)?;

    let mut index = 0;
    hid = run_stage(hid, embeddings, &p.down, batch, &mut index)?;
    let skip = hid;
    let pooled = hid.gather(pool_index(batch, h, w, d), &[batch * n / 4, 4 * d])?;
    hid = linear(pooled, p.pool_proj, p.pool_bias)?;
    hid = run_stage(hid, embeddings, &p.mid, batch, &mut index)?;
    let wide = linear(hid, p.unpool_proj, p.unpool_bias)?;
    let restored = wide.gather(unpool_index(batch, h, w, d), &[batch * n, d])?;
    hid = linear(concat_cols(&[restored, skip])?, p.merge_proj, p.merge_bias)?;
    hid = run_stage(hid, embeddings, &p.up, batch, &mut index)?;
    linear(p.out_norm.apply(hid)?, p.out_proj, p.out_bias)?.add(x_t.mul(p.input_skip)?)
}

/// Single-sample ε-prediction on latent grids.
pub fn denoise(
    x_t: &LatentTensor,
    t: usize,
    mask_latent: &LatentTensor,
    masked_latent: &LatentTensor,
    embedding_tokens: &Tensor,
    params: &DenoiserParams,
) -> Result<LatentTensor> {
    let grid = (x_t.height, x_t.width);
    for other in [mask_latent, masked_latent] {
        if (other.height, other.width) != grid {
            return Err(Error::shape(
                "denoise",
                &[x_t.height, x_t.width],
                &[other.height, other.width],
            ));
        }
    }
    let tape = Tape::new();
    let p = params.map(&mut |t| tape.constant(t.clone()));
    let context = LatentTensor::concat(&[mask_latent, masked_latent])?;
    let out = denoise_batch(
        &p,
        tape.constant(x_t.to_tokens()),
        tape.constant(context.to_tokens()),
        &[t],
        tape.constant(embedding_tokens.clone()),
        grid,
    )?;
    LatentTensor::from_tokens(grid.0, grid.1, &out.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            factor: 2,
            image_channels: 1,
            width: 8,
            key_width: 4,
            value_width: 4,
            time_embed_width: 4,
            embed_dim: 3,
            embed_tokens: 2,
            ..DenoiserConfig::default()
        }
    }

    fn latent(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> LatentTensor {
        LatentTensor {
            height: h,
            width: w,
            channels: c,
            data: (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn pool_and_unpool_are_inverse() {
        let (b, h, w, d) = (2, 4, 6, 3);
        let pool = pool_index(b, h, w, d);
        let unpool = unpool_index(b, h, w, d);
        let composed: Vec<usize> = unpool.iter().map(|&i| pool[i]).collect();
        assert_eq!(composed, (0..b * h * w * d).collect::<Vec<_>>());
    }

    #[test]
    fn output_shape_follows_input() {
        let cfg = tiny();
        let mut rng = seeds::rng(1);
        let model = Model::init(&cfg, &mut rng).unwrap();
        let e = model.table.embed(crate::lcg::Category::Foreground).unwrap();
        for (h, w) in [(2, 2), (4, 6)] {
            let x = latent(h, w, 4, &mut rng);
            let m = latent(h, w, 1, &mut rng);
            let out = denoise(&x, 5, &m, &x, &e, &model.denoiser).unwrap();
            assert_eq!((out.height, out.width, out.channels), (h, w, 4));
        }
        let odd = latent(3, 2, 4, &mut rng);
        let m = latent(3, 2, 1, &mut rng);
        assert!(denoise(&odd, 5, &m, &odd, &e, &model.denoiser).is_err());
    }

    #[test]
    fn zeroed_projections_leave_the_bias_map() {
        let cfg = tiny();
        let mut rng = seeds::rng(2);
        let mut model = Model::init(&cfg, &mut rng).unwrap();
        model.denoiser.out_proj = Tensor::from_fn([8, 4], |_| rng.random_range(-1.0..1.0));
        model.denoiser.out_bias = Tensor::new([1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        model.denoiser.zero_output_projections();
        let e = model.table.embed(crate::lcg::Category::Background).unwrap();
        let x = latent(2, 4, 4, &mut rng);
        let m = latent(2, 4, 1, &mut rng);
        let out = denoise(&x, 17, &m, &x, &e, &model.denoiser).unwrap();
        for cell in out.data.chunks(4) {
            assert_eq!(cell, &[0.5, -1.0, 2.0, 0.25]);
        }
    }

    #[test]
    fn cross_layout_alternates() {
        let cfg = DenoiserConfig {
            down_blocks: 2,
            mid_blocks: 2,
            up_blocks: 2,
            cross_mid: false,
            ..DenoiserConfig::default()
        };
        assert_eq!(
            cfg.cross_layout(),
            [vec![false, true], vec![false, false], vec![false, true]]
        );
    }

    #[test]
    fn batching_matches_single_samples() {
        let cfg = tiny();
        let mut rng = seeds::rng(3);
        let mut model = Model::init(&cfg, &mut rng).unwrap();
        model.denoiser.out_proj = Tensor::from_fn([8, 4], |_| rng.random_range(-1.0..1.0));
        let xs: Vec<_> = (0..2).map(|_| latent(2, 2, 4, &mut rng)).collect();
        let ctx: Vec<_> = (0..2).map(|_| latent(2, 2, 5, &mut rng)).collect();
        let cats = [crate::lcg::Category::Foreground, crate::lcg::Category::Null];
        let ts = [3, 900];
        let tape = Tape::new();
        let p = model.constants(&tape);
        let stack = |parts: Vec<Tensor>| {
            let vars: Vec<_> = parts.into_iter().map(|t| tape.constant(t)).collect();
            crate::autodiff::concat_rows(&vars).unwrap()
        };
        let out = denoise_batch(
            &p.denoiser,
            stack(xs.iter().map(|x| x.to_tokens()).collect()),
            stack(ctx.iter().map(|x| x.to_tokens()).collect()),
            &ts,
            stack(cats.iter().map(|&c| model.table.embed(c).unwrap()).collect()),
            (2, 2),
        )
        .unwrap();
        for i in 0..2 {
            let tape1 = Tape::new();
            let p1 = model.constants(&tape1);
            let single = denoise_batch(
                &p1.denoiser,
                tape1.constant(xs[i].to_tokens()),
                tape1.constant(ctx[i].to_tokens()),
                &ts[i..i + 1],
                tape1.constant(model.table.embed(cats[i]).unwrap()),
                (2, 2),
            )
            .unwrap();
            assert_eq!(&out.value().data()[i * 16..(i + 1) * 16], single.value().data());
        }
    }
}
