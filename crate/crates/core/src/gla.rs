//! Gated linear attention self-decoding.
//!
//! Tokens are row vectors. For input `X` (L×d):
//!
//! ```text
//! Q = X·W_Q   K = X·W_K   V = X·W_V
//! α = σ(X·W_α + b_α)^(1/τ)     β = σ(X·W_β + b_β)^(1/τ)
//! R = swish(X·W_r + b_r)
//! G_t = α_tᵀ·β_t
//! S_t = G_t ⊙ S_{t-1} + K_tᵀ·V_t,   S_0 = 0
//! O_t = Q_t·S_t
//! Y_t = (R_t ⊙ LayerNorm(O_t))·W_O
//! ```
//!
//! With more than one head the key and value columns are split evenly and
//! each head runs its own recurrence; the per-head outputs are concatenated
//! before the output gate.

use rand::Rng;

use crate::autodiff::{self, concat_cols, concat_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{linear_weight, param_tree, zero_bias};
use crate::tensor::Tensor;

/// Default gate temperature.
pub const DEFAULT_TAU: f64 = 16.0;

param_tree! {
    #[derive(Clone, Debug)]
    pub struct GlaParams {
        tensor w_q: P,
        tensor w_k: P,
        tensor w_v: P,
        tensor w_alpha: P,
        tensor b_alpha: P,
        tensor w_beta: P,
        tensor b_beta: P,
        tensor w_r: P,
        tensor b_r: P,
        tensor w_o: P,
        fixed tau: f64,
        fixed heads: usize,
    }
}

impl GlaParams {
    pub fn init(d: usize, d_k: usize, d_v: usize, tau: f64, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let p = GlaParams {
            w_q: linear_weight(d, d_k, rng),
            w_k: linear_weight(d, d_k, rng),
            w_v: linear_weight(d, d_v, rng),
            w_alpha: linear_weight(d, d_k, rng),
            b_alpha: zero_bias(d_k),
            w_beta: linear_weight(d, d_v, rng),
            b_beta: zero_bias(d_v),
            w_r: linear_weight(d, d_v, rng),
            b_r: zero_bias(d_v),
            w_o: linear_weight(d_v, d, rng),
            tau,
            heads,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn model_width(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn key_width(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn value_width(&self) -> usize {
        self.w_v.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("gate temperature must be positive, got {}", self.tau)));
        }
        let (d, dk, dv) = (self.model_width(), self.key_width(), self.value_width());
        if self.heads == 0 || dk % self.heads != 0 || dv % self.heads != 0 {
            return Err(Error::invalid(format!(
                "{} heads do not divide key width {dk} and value width {dv}",
                self.heads
            )));
        }
        let expect: [(&str, &Tensor, [usize; 2]); 10] = [
            ("w_q", &self.w_q, [d, dk]),
            ("w_k", &self.w_k, [d, dk]),
            ("w_v", &self.w_v, [d, dv]),
            ("w_alpha", &self.w_alpha, [d, dk]),
            ("b_alpha", &self.b_alpha, [1, dk]),
            ("w_beta", &self.w_beta, [d, dv]),
            ("b_beta", &self.b_beta, [1, dv]),
            ("w_r", &self.w_r, [d, dv]),
            ("b_r", &self.b_r, [1, dv]),
            ("w_o", &self.w_o, [dv, d]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::InvalidShape {
                    op: "gla params",
                    msg: format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                });
            }
            if !t.all_finite() {
                return Err(Error::invalid(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Binds all weights to `tape` as gradient-tracked leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> GlaParams<Var<'t>> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }
}

/// Running hidden state, one `d_k/h × d_v/h` matrix per head.
#[derive(Clone, Debug, PartialEq)]
pub struct GlaState {
    pub heads: Vec<Tensor>,
}

impl GlaState {
    pub fn zeros(d_k: usize, d_v: usize, heads: usize) -> Self {
        GlaState {
            heads: (0..heads).map(|_| Tensor::zeros([d_k / heads, d_v / heads])).collect(),
        }
    }

    pub fn for_params(p: &GlaParams) -> Self {
        Self::zeros(p.key_width(), p.value_width(), p.heads)
    }
}

/// The six per-token projections of one input sequence.
#[derive(Clone, Copy, Debug)]
pub struct Projections<T> {
    pub q: T,
    pub k: T,
    pub v: T,
    pub alpha: T,
    pub beta: T,
    pub r_gate: T,
}

/// Gate `σ(x·W + b)^(1/τ)`.
fn gate<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>, tau: f64) -> Result<Var<'t>> {
    Ok(x.matmul(w)?.add(b)?.sigmoid().powf(1.0 / tau))
}

pub fn project<'t>(x: Var<'t>, p: &GlaParams<Var<'t>>) -> Result<Projections<Var<'t>>> {
    let (rows, width) = match x.shape()[..] {
        [r, c] => (r, c),
        ref s => {
            return Err(Error::InvalidShape {
                op: "gla_project",
                msg: format!("expected L×d input, got {s:?}"),
            })
        }
    };
    let d = p.w_q.shape()[0];
    if width != d || rows == 0 {
        return Err(Error::shape("gla_project", &x.shape(), &p.w_q.shape()));
    }
    Ok(Projections {
        q: x.matmul(p.w_q)?,
        k: x.matmul(p.w_k)?,
        v: x.matmul(p.w_v)?,
        alpha: gate(x, p.w_alpha, p.b_alpha, p.tau)?,
        beta: gate(x, p.w_beta, p.b_beta, p.tau)?,
        r_gate: x.matmul(p.w_r)?.add(p.b_r)?.swish(),
    })
}

/// Token-by-token gated recurrence for one head built from tape primitives;
/// returns (O, S_L). Reference for the fused scan.
pub fn recurrence<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    alpha: Var<'t>,
    beta: Var<'t>,
    s0: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let len = q.shape()[0];
    for (name, t) in [("k", k), ("v", v), ("alpha", alpha), ("beta", beta)] {
        if t.shape()[0] != len {
            return Err(Error::InvalidShape {
                op: "gla_scan",
                msg: format!("{name} has {} tokens, q has {len}", t.shape()[0]),
            });
        }
    }
    if q.shape()[1] != k.shape()[1] || alpha.shape()[1] != k.shape()[1] || beta.shape()[1] != v.shape()[1] {
        return Err(Error::shape("gla_scan", &alpha.shape(), &beta.shape()));
    }
    if s0.shape() != [k.shape()[1], v.shape()[1]] {
        return Err(Error::shape("gla_scan", &s0.shape(), &[k.shape()[1], v.shape()[1]]));
    }
    let alpha_t = alpha.t()?;
    let k_t = k.t()?;
    let mut state = s0;
    let mut outputs = Vec::with_capacity(len);
    for t in 0..len {
        let forget = alpha_t.slice_cols(t, 1)?.matmul(beta.row(t)?)?;
        let write = k_t.slice_cols(t, 1)?.matmul(v.row(t)?)?;
        state = forget.mul(state)?.add(write)?;
        outputs.push(q.row(t)?.matmul(state)?);
    }
    Ok((concat_rows(&outputs)?, state))
}

/// Pre-gate attention output O over all heads, plus final states. Rows
/// form independent sequences of `segment` tokens.
pub fn attend<'t>(
    proj: &Projections<Var<'t>>,
    heads: usize,
    s0: Option<&GlaState>,
    segment: usize,
) -> Result<(Var<'t>, Vec<Tensor>)> {
    let dk = proj.k.shape()[1] / heads;
    let dv = proj.v.shape()[1] / heads;
    let zero = Tensor::zeros([dk, dv]);
    let mut outs = Vec::with_capacity(heads);
    let mut states = Vec::with_capacity(heads);
    for h in 0..heads {
        let split = |x: Var<'t>, w: usize| -> Result<Var<'t>> {
            if heads == 1 {
                Ok(x)
            } else {
                x.slice_cols(h * w, w)
            }
        };
        let init = s0.map_or(&zero, |s| &s.heads[h]);
        let (o, s) = autodiff::gla_scan(
            split(proj.q, dk)?,
            split(proj.k, dk)?,
            split(proj.v, dv)?,
            split(proj.alpha, dk)?,
            split(proj.beta, dv)?,
            init,
            segment,
        )?;
        outs.push(o);
        states.push(s);
    }
    let o = if heads == 1 { outs[0] } else { concat_cols(&outs)? };
    Ok((o, states))
}

/// Output stage `(R ⊙ LayerNorm(O))·W_O`.
pub fn output_gate<'t>(o: Var<'t>, r_gate: Var<'t>, w_o: Var<'t>) -> Result<Var<'t>> {
    r_gate.mul(o.layer_norm())?.matmul(w_o)
}

/// Full self-decoding map L×d → L×d from a zero state.
pub fn forward<'t>(x: Var<'t>, p: &GlaParams<Var<'t>>) -> Result<Var<'t>> {
    forward_batch(x, p, 1)
}

/// Self-decoding over `batch` equal-length sequences stacked row-wise.
pub fn forward_batch<'t>(x: Var<'t>, p: &GlaParams<Var<'t>>, batch: usize) -> Result<Var<'t>> {
    let rows = x.shape()[0];
    if batch == 0 || rows % batch != 0 {
        return Err(Error::InvalidShape {
            op: "gla_forward",
            msg: format!("{rows} rows do not split into {batch} sequences"),
        });
    }
    let proj = project(x, p)?;
    let (o, _) = attend(&proj, p.heads, None, rows / batch)?;
    output_gate(o, proj.r_gate, p.w_o)
}

fn tensors(p: Projections<Var<'_>>) -> Projections<Tensor> {
    Projections {
        q: (*p.q.value()).clone(),
        k: (*p.k.value()).clone(),
        v: (*p.v.value()).clone(),
        alpha: (*p.alpha.value()).clone(),
        beta: (*p.beta.value()).clone(),
        r_gate: (*p.r_gate.value()).clone(),
    }
}

/// Computes the six projections of `l_in` without recording gradients.
pub fn gla_project(l_in: &Tensor, params: &GlaParams) -> Result<Projections<Tensor>> {
    params.validate()?;
    let tape = Tape::new();
    let p = params.map(&mut |t| tape.constant(t.clone()));
    let x = tape.constant(l_in.clone());
    Ok(tensors(project(x, &p)?))
}

/// Output of a scan: the gated result, the pre-gate attention, and the state
/// after the last token.
#[derive(Clone, Debug)]
pub struct ScanOutput {
    pub l_hat: Tensor,
    pub attention: Tensor,
    pub state: GlaState,
}

/// Runs the gated recurrence and the output stage from `s0`.
pub fn gla_scan(proj: &Projections<Tensor>, s0: &GlaState, params: &GlaParams) -> Result<ScanOutput> {
    params.validate()?;
    if s0.heads.len() != params.heads {
        return Err(Error::invalid(format!(
            "state has {} heads, params have {}",
            s0.heads.len(),
            params.heads
        )));
    }
    let tape = Tape::new();
    let c = |t: &Tensor| tape.constant(t.clone());
    let vars = Projections {
        q: c(&proj.q),
        k: c(&proj.k),
        v: c(&proj.v),
        alpha: c(&proj.alpha),
        beta: c(&proj.beta),
        r_gate: c(&proj.r_gate),
    };
    if vars.r_gate.shape() != vars.v.shape() {
        return Err(Error::shape("gla_scan", &vars.r_gate.shape(), &vars.v.shape()));
    }
    let len = vars.q.shape()[0];
    let (o, states) = attend(&vars, params.heads, Some(s0), len)?;
    let l_hat = output_gate(o, vars.r_gate, c(&params.w_o))?;
    Ok(ScanOutput {
        l_hat: (*l_hat.value()).clone(),
        attention: (*o.value()).clone(),
        state: GlaState { heads: states },
    })
}

/// Brute-force unrolled attention for a single head:
/// `O_t = Q_t · Σ_{j≤t} (⊙_{k=j+1..t} G_k) ⊙ (K_jᵀ V_j)`.
///
/// Costs O(L²·d_k·d_v) and shares no code with the recurrence.
pub fn gla_oracle(q: &Tensor, k: &Tensor, v: &Tensor, alpha: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (len, dk) = q.dims2("gla_oracle")?;
    let (_, dv) = v.dims2("gla_oracle")?;
    for (t, shape) in [(k, [len, dk]), (alpha, [len, dk]), (v, [len, dv]), (beta, [len, dv])] {
        if t.shape() != shape {
            return Err(Error::shape("gla_oracle", t.shape(), &shape));
        }
    }
    let mut out = vec![0.0; len * dv];
    for t in 0..len {
        for j in 0..=t {
            for a in 0..dk {
                // decay of entry (a, b) from token j to token t
                let alpha_prod: f64 = (j + 1..=t).map(|s| alpha.at(s, a)).product();
                let coef = q.at(t, a) * k.at(j, a) * alpha_prod;
                if coef == 0.0 {
                    continue;
                }
                for b in 0..dv {
                    let beta_prod: f64 = (j + 1..=t).map(|s| beta.at(s, b)).product();
                    out[t * dv + b] += coef * beta_prod * v.at(j, b);
                }
            }
        }
    }
    Tensor::new([len, dv], out)
}
