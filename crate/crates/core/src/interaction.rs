//! One interaction between latent tokens and category embeddings.
//!
//! ```text
//! H   = X + GLA(norm₁(X))                     self-decode
//! H'  = H + CrossAttn(norm₂(H), E)            cross-decode (optional)
//! out = H' + MLP(norm₃(H'))
//! ```
//!
//! Every branch is pre-normalized and wrapped in its own residual.

use rand::Rng;

use crate::autodiff::{concat_cols, concat_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::gla::{self, GlaParams};
use crate::params::{linear_weight, param_tree, zero_bias};
use crate::tensor::Tensor;

param_tree! {
    #[derive(Clone, Debug)]
    pub struct Norm {
        tensor gain: P,
        tensor shift: P,
    }
}

impl Norm {
    pub fn new(width: usize) -> Self {
        Norm {
            gain: Tensor::ones([1, width]),
            shift: Tensor::zeros([1, width]),
        }
    }
}

impl<'t> Norm<Var<'t>> {
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm().mul(self.gain)?.add(self.shift)
    }
}

param_tree! {
    /// Softmax cross-attention from latent tokens onto embedding tokens.
    #[derive(Clone, Debug)]
    pub struct CrossParams {
        nested norm: Norm<P>,
        tensor w_q: P,
        tensor w_k: P,
        tensor w_v: P,
        tensor w_o: P,
        fixed heads: usize,
    }
}

param_tree! {
    #[derive(Clone, Debug)]
    pub struct InteractionParams {
        nested self_norm: Norm<P>,
        nested gla: GlaParams<P>,
        option cross: Option<CrossParams<P>>,
        nested mlp_norm: Norm<P>,
        tensor mlp_in: P,
        tensor mlp_in_bias: P,
        tensor mlp_out: P,
        tensor mlp_out_bias: P,
    }
}

/// Shape hyper-parameters of one block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockDims {
    /// Token width d.
    pub width: usize,
    pub key_width: usize,
    pub value_width: usize,
    /// Width of the embedding tokens fed to cross-attention.
    pub embed_width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub tau: f64,
}

impl InteractionParams {
    pub fn init(dims: BlockDims, with_cross: bool, rng: &mut impl Rng) -> Result<Self> {
        let BlockDims {
            width: d,
            key_width: dk,
            value_width: dv,
            embed_width: de,
            heads,
            mlp_ratio,
            tau,
        } = dims;
        let hidden = d * mlp_ratio;
        let gla = GlaParams::init(d, dk, dv, tau, heads, rng)?;
        let cross = if with_cross {
            Some(CrossParams {
                norm: Norm::new(d),
                w_q: linear_weight(d, dk, rng),
                w_k: linear_weight(de, dk, rng),
                w_v: linear_weight(de, dv, rng),
                w_o: linear_weight(dv, d, rng),
                heads,
            })
        } else {
            None
        };
        Ok(InteractionParams {
            self_norm: Norm::new(d),
            gla,
            cross,
            mlp_norm: Norm::new(d),
            mlp_in: linear_weight(d, hidden, rng),
            mlp_in_bias: zero_bias(hidden),
            mlp_out: linear_weight(hidden, d, rng),
            mlp_out_bias: zero_bias(d),
        })
    }

    pub fn width(&self) -> usize {
        self.gla.model_width()
    }

    /// Zeros every projection that feeds a residual sum, turning the block
    /// into the identity map.
    pub fn zero_output_projections(&mut self) {
        self.gla.w_o = Tensor::zeros(self.gla.w_o.shape().to_vec());
        if let Some(c) = &mut self.cross {
            c.w_o = Tensor::zeros(c.w_o.shape().to_vec());
        }
        self.mlp_out = Tensor::zeros(self.mlp_out.shape().to_vec());
        self.mlp_out_bias = Tensor::zeros(self.mlp_out_bias.shape().to_vec());
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> InteractionParams<Var<'t>> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }
}

fn check_tokens(x: Var<'_>, width: usize, op: &'static str) -> Result<()> {
    match x.shape()[..] {
        [_, w] if w == width => Ok(()),
        ref s => Err(Error::InvalidShape {
            op,
            msg: format!("expected L×{width} tokens, got {s:?}"),
        }),
    }
}

/// `X + GLA(norm(X))`.
pub fn self_decode<'t>(x: Var<'t>, p: &InteractionParams<Var<'t>>) -> Result<Var<'t>> {
    self_decode_batch(x, p, 1)
}

/// [`self_decode`] over `batch` sequences stacked row-wise.
pub fn self_decode_batch<'t>(x: Var<'t>, p: &InteractionParams<Var<'t>>, batch: usize) -> Result<Var<'t>> {
    check_tokens(x, p.gla.w_q.shape()[0], "self_decode")?;
    let normed = p.self_norm.apply(x)?;
    x.add(gla::forward_batch(normed, &p.gla, batch)?)
}

/// Scaled dot-product attention of `x` (already normalized) over `e`.
pub fn cross_attention<'t>(x: Var<'t>, e: Var<'t>, c: &CrossParams<Var<'t>>) -> Result<Var<'t>> {
    let q = x.matmul(c.w_q)?;
    let k = e.matmul(c.w_k)?;
    let v = e.matmul(c.w_v)?;
    let heads = c.heads;
    let dk = q.shape()[1] / heads;
    let dv = v.shape()[1] / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (q.slice_cols(h * dk, dk)?, k.slice_cols(h * dk, dk)?, v.slice_cols(h * dv, dv)?)
        };
        let weights = qh.matmul(kh.t()?)?.scale(scale).softmax_rows()?;
        outs.push(weights.matmul(vh)?);
    }
    let attended = if heads == 1 { outs[0] } else { concat_cols(&outs)? };
    attended.matmul(c.w_o)
}

fn mlp<'t>(x: Var<'t>, p: &InteractionParams<Var<'t>>) -> Result<Var<'t>> {
    let normed = p.mlp_norm.apply(x)?;
    normed
        .matmul(p.mlp_in)?
        .add(p.mlp_in_bias)?
        .swish()
        .matmul(p.mlp_out)?
        .add(p.mlp_out_bias)
}

/// Cross-attention residual (when the block has one) followed by the MLP
/// residual. `e` holds m ≥ 1 embedding tokens.
pub fn cross_decode<'t>(h: Var<'t>, e: Var<'t>, p: &InteractionParams<Var<'t>>) -> Result<Var<'t>> {
    cross_decode_batch(h, e, p, 1)
}

/// [`cross_decode`] where `h` and `e` each stack `batch` row blocks and
/// block i of `h` attends only to block i of `e`.
pub fn cross_decode_batch<'t>(h: Var<'t>, e: Var<'t>, p: &InteractionParams<Var<'t>>, batch: usize) -> Result<Var<'t>> {
    check_tokens(h, p.gla.w_q.shape()[0], "cross_decode")?;
    let h = match &p.cross {
        Some(c) => {
            let de = c.w_k.shape()[0];
            check_tokens(e, de, "cross_decode")?;
            let (rows, m) = (h.shape()[0], e.shape()[0]);
            if batch == 0 || rows % batch != 0 || m % batch != 0 {
                return Err(Error::InvalidShape {
                    op: "cross_decode",
                    msg: format!("{rows} tokens and {m} embeddings do not split into {batch} samples"),
                });
            }
            let normed = c.norm.apply(h)?;
            let attended = if batch == 1 {
                cross_attention(normed, e, c)?
            } else {
                let (len, m) = (rows / batch, m / batch);
                let parts = (0..batch)
                    .map(|i| cross_attention(normed.slice_rows(i * len, len)?, e.slice_rows(i * m, m)?, c))
                    .collect::<Result<Vec<_>>>()?;
                concat_rows(&parts)?
            };
            h.add(attended)?
        }
        None => h,
    };
    h.add(mlp(h, p)?)
}

pub fn interaction_forward<'t>(x: Var<'t>, e: Var<'t>, p: &InteractionParams<Var<'t>>) -> Result<Var<'t>> {
    interaction_forward_batch(x, e, p, 1)
}

pub fn interaction_forward_batch<'t>(
    x: Var<'t>,
    e: Var<'t>,
    p: &InteractionParams<Var<'t>>,
    batch: usize,
) -> Result<Var<'t>> {
    cross_decode_batch(self_decode_batch(x, p, batch)?, e, p, batch)
}

/// Tape-free evaluation of one block.
pub fn interaction(l_in: &Tensor, embeddings: &Tensor, params: &InteractionParams) -> Result<Tensor> {
    let tape = Tape::new();
    let p = params.map(&mut |t| tape.constant(t.clone()));
    let out = interaction_forward(tape.constant(l_in.clone()), tape.constant(embeddings.clone()), &p)?;
    Ok((*out.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn dims() -> BlockDims {
        BlockDims {
            width: 8,
            key_width: 4,
            value_width: 4,
            embed_width: 6,
            heads: 1,
            mlp_ratio: 4,
            tau: 4.0,
        }
    }

    fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn([rows, cols], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_gla_output_makes_self_decode_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = InteractionParams::init(dims(), true, &mut rng).unwrap();
        p.gla.w_o = Tensor::zeros([4, 8]);
        for len in [1, 4, 16] {
            let x = rand_matrix(len, 8, &mut rng);
            let tape = Tape::new();
            let out = self_decode(tape.constant(x.clone()), &p.bind(&tape)).unwrap();
            assert_eq!(*out.value(), x);
        }
    }

    #[test]
    fn self_decode_is_residual_plus_gla_on_normalized_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = InteractionParams::init(dims(), true, &mut rng).unwrap();
        p.self_norm.gain = rand_matrix(1, 8, &mut rng);
        p.self_norm.shift = rand_matrix(1, 8, &mut rng);
        let x = rand_matrix(5, 8, &mut rng);
        let tape = Tape::new();
        let out = self_decode(tape.constant(x.clone()), &p.bind(&tape)).unwrap();
        let delta = out.value().sub(&x).unwrap();

        let normed = crate::autodiff::layer_norm(&x)
            .mul(&p.self_norm.gain)
            .unwrap()
            .add(&p.self_norm.shift)
            .unwrap();
        let proj = gla::gla_project(&normed, &p.gla).unwrap();
        let standalone = gla::gla_scan(&proj, &gla::GlaState::for_params(&p.gla), &p.gla).unwrap();
        for (a, b) in delta.data().iter().zip(standalone.l_hat.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn single_key_attention_broadcasts_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = InteractionParams::init(dims(), true, &mut rng).unwrap();
        let c = p.cross.as_ref().unwrap();
        let e = rand_matrix(1, 6, &mut rng);
        let x = rand_matrix(7, 8, &mut rng);
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let out = cross_attention(tape.constant(x), tape.constant(e.clone()), bound.cross.as_ref().unwrap()).unwrap();
        let expected = e.matmul(&c.w_v).unwrap().matmul(&c.w_o).unwrap();
        for row in 0..7 {
            for (a, b) in out.value().row(row).iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_value_and_mlp_output_make_cross_decode_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = InteractionParams::init(dims(), true, &mut rng).unwrap();
        p.cross.as_mut().unwrap().w_v = Tensor::zeros([6, 4]);
        p.mlp_out = Tensor::zeros([32, 8]);
        let h = rand_matrix(5, 8, &mut rng);
        let e = rand_matrix(2, 6, &mut rng);
        let tape = Tape::new();
        let out = cross_decode(tape.constant(h.clone()), tape.constant(e), &p.bind(&tape)).unwrap();
        assert_eq!(*out.value(), h);
    }

    #[test]
    fn duplicated_tokens_are_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = InteractionParams::init(dims(), true, &mut rng).unwrap();
        let x = rand_matrix(4, 8, &mut rng);
        let a = rand_matrix(1, 6, &mut rng);
        let b = rand_matrix(1, 6, &mut rng);
        let stack = |rows: [&Tensor; 3]| {
            Tensor::new([3, 6], rows.iter().flat_map(|r| r.data().to_vec()).collect()).unwrap()
        };
        let e1 = stack([&a, &a, &b]);
        let e2 = stack([&a, &b, &a]);
        let o1 = interaction(&x, &e1, &p).unwrap();
        let o2 = interaction(&x, &e2, &p).unwrap();
        for (u, v) in o1.data().iter().zip(o2.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn all_zero_output_projections_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = InteractionParams::init(dims(), true, &mut rng).unwrap();
        p.zero_output_projections();
        let x = rand_matrix(6, 8, &mut rng);
        let e = rand_matrix(1, 6, &mut rng);
        assert_eq!(interaction(&x, &e, &p).unwrap(), x);
    }

    #[test]
    fn embeddings_receive_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = InteractionParams::init(dims(), true, &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant(rand_matrix(4, 8, &mut rng));
        let e = tape.leaf(rand_matrix(2, 6, &mut rng));
        let out = interaction_forward(x, e, &p.bind(&tape)).unwrap();
        let loss = out.mean_square();
        let g = tape.backward(loss).unwrap().get(e);
        assert!(g.max_abs() > 1e-6);
    }

    #[test]
    fn wrong_embedding_width_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = InteractionParams::init(dims(), true, &mut rng).unwrap();
        assert!(interaction(&Tensor::zeros([3, 8]), &Tensor::zeros([1, 5]), &p).is_err());
    }
}
