//! Built-in verification suites: GLA against its unrolled oracle, tape
//! gradients against finite differences, background-mask composition
//! statistics, and codec exactness.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::codec::{composite, decode_output, space_to_depth};
use crate::data::{gen_brush_mask, BrushConfig, ImageMaskSample};
use crate::diffusion::train::{prepare_batch, predict_chunk};
use crate::diffusion::{DenoiserConfig, DiffusionSchedule, Model};
use crate::error::{Error, Result};
use crate::gla::{gla_oracle, gla_scan, GlaParams, GlaState, Projections};
use crate::gradcheck::{check_gradients, GradCheckReport};
use crate::image::{Image, Mask};
use crate::interaction::{interaction_forward, BlockDims, InteractionParams};
use crate::lcg::{compose_background_mask, Category, MaskComposeConfig, MaskKind};
use crate::params::flatten;
use crate::seeds::{self, Rng as SeedRng};
use crate::tensor::Tensor;

pub const SUITES: [&str; 4] = ["gla", "grad", "mask", "codec"];

pub const GLA_ORACLE_TOL: f64 = 1e-10;
pub const GATE_LIMIT_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-4;
pub const FREQ_TOL: f64 = 0.015;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: String,
    pub lines: Vec<CheckLine>,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        SuiteReport {
            suite: suite.to_string(),
            lines: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.lines.push(CheckLine {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    /// Records a failed line instead of propagating `res`'s error.
    fn record(&mut self, name: &str, res: Result<(bool, String)>) {
        match res {
            Ok((passed, detail)) => self.push(name, passed, detail),
            Err(e) => self.push(name, false, format!("error: {e}")),
        }
    }

    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            let verdict = if l.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{verdict} {}/{}: {}", self.suite, l.name, l.detail);
        }
        out
    }
}

/// Runs one suite by name, or every suite for `all`.
pub fn run_suite(name: &str, seed: u64) -> Result<Vec<SuiteReport>> {
    match name {
        "all" => Ok(SUITES.iter().map(|s| run_one(s, seed)).collect()),
        s if SUITES.contains(&s) => Ok(vec![run_one(s, seed)]),
        other => Err(Error::invalid(format!(
            "unknown check suite {other:?} (expected one of {}, all)",
            SUITES.join(", ")
        ))),
    }
}

fn run_one(name: &str, seed: u64) -> SuiteReport {
    let mut r = SuiteReport::new(name);
    match name {
        "gla" => {
            let t0 = Instant::now();
            r.record(
                "oracle",
                gla_oracle_error(200, seed).map(|e| {
                    (
                        e <= GLA_ORACLE_TOL,
                        format!("200 instances, max rel err {e:.3e} in {:.2?}", t0.elapsed()),
                    )
                }),
            );
            r.record(
                "gate_limits",
                gate_limit_errors(seed).map(|(ones, zeros)| {
                    (
                        ones <= GATE_LIMIT_TOL && zeros <= GATE_LIMIT_TOL,
                        format!("cumulative err {ones:.3e}, local err {zeros:.3e}"),
                    )
                }),
            );
        }
        "grad" => {
            for (label, res) in [
                ("interaction", interaction_gradcheck(seed)),
                ("denoiser", denoiser_gradcheck(seed)),
            ] {
                r.record(label, res.map(|rep| (rep.passes(GRAD_TOL), rep.to_string())));
            }
        }
        "mask" => {
            r.record(
                "frequencies",
                mask_frequencies(10_000, 0.5, seed).map(|(fr, fo)| {
                    let ok = (fr - 0.5).abs() <= FREQ_TOL && (fo - 0.5).abs() <= FREQ_TOL;
                    (ok, format!("10000 draws: rand {fr:.4}, obj {fo:.4}"))
                }),
            );
            r.record(
                "degenerate",
                mask_degenerate_violations(500, seed).map(|n| (n == 0, format!("{n} violations in 500 draws per p"))),
            );
        }
        "codec" => {
            r.record(
                "roundtrip",
                codec_roundtrip_failures(1000, seed).map(|n| (n == 0, format!("{n} of 1000 images differ"))),
            );
            r.record(
                "composite",
                composite_failures(1000, seed).map(|n| (n == 0, format!("{n} of 1000 composites altered kept pixels"))),
            );
        }
        _ => unreachable!("suite names are checked by run_suite"),
    }
    r
}

fn normal(rows: usize, cols: usize, rng: &mut SeedRng) -> Tensor {
    Tensor::from_fn([rows, cols], |_| rng.sample(StandardNormal))
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut SeedRng) -> Tensor {
    Tensor::from_fn([rows, cols], |_| rng.random_range(lo..hi))
}

/// Pre-gate attention from the library scan, zero initial state, one head.
fn scan_attention(q: &Tensor, k: &Tensor, v: &Tensor, alpha: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (len, dk) = q.dims2("scan")?;
    let dv = v.shape()[1];
    let params = GlaParams::init(2, dk, dv, 1.0, 1, &mut seeds::rng(0))?;
    let proj = Projections {
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        alpha: alpha.clone(),
        beta: beta.clone(),
        r_gate: Tensor::ones([len, dv]),
    };
    Ok(gla_scan(&proj, &GlaState::zeros(dk, dv, 1), &params)?.attention)
}

/// `max|a − b| / max|b|`.
fn normwise_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    diff / b.max_abs().max(f64::MIN_POSITIVE)
}

/// Worst relative error of the scan against the unrolled oracle over
/// random instances with L ≤ 32 and key/value widths ≤ 16.
pub fn gla_oracle_error(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = seeds::rng_for(seed, 100, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let len = rng.random_range(1..=32);
        let dk = rng.random_range(1..=16);
        let dv = rng.random_range(1..=16);
        let q = normal(len, dk, &mut rng);
        let k = normal(len, dk, &mut rng);
        let v = normal(len, dv, &mut rng);
        let alpha = uniform(len, dk, 0.0, 1.0, &mut rng);
        let beta = uniform(len, dv, 0.0, 1.0, &mut rng);
        let got = scan_attention(&q, &k, &v, &alpha, &beta)?;
        let want = gla_oracle(&q, &k, &v, &alpha, &beta)?;
        worst = worst.max(normwise_err(&got, &want));
    }
    Ok(worst)
}

/// Errors of the scan at gates fixed to one (against cumulative linear
/// attention) and to zero (against per-token local attention).
pub fn gate_limit_errors(seed: u64) -> Result<(f64, f64)> {
    let mut rng = seeds::rng_for(seed, 101, 0);
    let (mut e_ones, mut e_zeros): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let len = rng.random_range(1..=32);
        let dk = rng.random_range(1..=16);
        let dv = rng.random_range(1..=16);
        let q = normal(len, dk, &mut rng);
        let k = normal(len, dk, &mut rng);
        let v = normal(len, dv, &mut rng);

        let mut cumulative = vec![0.0; len * dv];
        let mut local = vec![0.0; len * dv];
        let mut kv = vec![0.0; dk * dv];
        for t in 0..len {
            for a in 0..dk {
                for b in 0..dv {
                    kv[a * dv + b] += k.at(t, a) * v.at(t, b);
                }
            }
            let qk: f64 = (0..dk).map(|a| q.at(t, a) * k.at(t, a)).sum();
            for b in 0..dv {
                cumulative[t * dv + b] = (0..dk).map(|a| q.at(t, a) * kv[a * dv + b]).sum();
                local[t * dv + b] = qk * v.at(t, b);
            }
        }
        let cumulative = Tensor::new([len, dv], cumulative)?;
        let local = Tensor::new([len, dv], local)?;

        let ones = scan_attention(&q, &k, &v, &Tensor::ones([len, dk]), &Tensor::ones([len, dv]))?;
        let zeros = scan_attention(&q, &k, &v, &Tensor::zeros([len, dk]), &Tensor::zeros([len, dv]))?;
        e_ones = e_ones.max(normwise_err(&ones, &cumulative));
        e_zeros = e_zeros.max(normwise_err(&zeros, &local));
    }
    Ok((e_ones, e_zeros))
}

/// Leaf-by-leaf replacement with `vars`, in visitation order.
fn next_var<'a, 't>(vars: &'a [Var<'t>]) -> impl FnMut(&Tensor) -> Var<'t> + 'a {
    let mut i = 0;
    move |_| {
        i += 1;
        vars[i - 1]
    }
}

/// Scalar probe `Σ out ⊙ W` with a fixed random `W`.
fn weighted_sum<'t>(out: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    Ok(out.mul(out.tape().constant(weights.clone()))?.sum())
}

/// Full interaction block (self- and cross-decode) at 64-bit: gradients
/// of every input and parameter coordinate.
pub fn interaction_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeds::rng_for(seed, 102, 0);
    let dims = BlockDims {
        width: 6,
        key_width: 4,
        value_width: 4,
        embed_width: 5,
        heads: 1,
        mlp_ratio: 2,
        tau: 2.0,
    };
    let params = InteractionParams::init(dims, true, &mut rng)?;
    let x = normal(5, 6, &mut rng);
    let e = normal(2, 5, &mut rng);
    let weights = normal(5, 6, &mut rng);
    let mut points = vec![x, e];
    points.extend(flatten(&params));
    check_gradients(
        |_tape: &Tape, vars: &[Var<'_>]| {
            let p = params.map(&mut next_var(&vars[2..]));
            weighted_sum(interaction_forward(vars[0], vars[1], &p)?, &weights)
        },
        &points,
        1e-4,
        None,
    )
}

/// Denoiser plus category table at a tiny configuration: gradients of every
/// parameter coordinate through a two-sample batch.
pub fn denoiser_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeds::rng_for(seed, 103, 0);
    let cfg = DenoiserConfig {
        factor: 2,
        image_channels: 1,
        width: 6,
        key_width: 4,
        value_width: 4,
        heads: 1,
        mlp_ratio: 2,
        tau: 2.0,
        time_embed_width: 4,
        down_blocks: 1,
        mid_blocks: 1,
        up_blocks: 1,
        cross_down: true,
        cross_mid: true,
        cross_up: true,
        embed_dim: 5,
        embed_tokens: 2,
    };
    let mut model = Model::init(&cfg, &mut rng)?;
    // Generic, non-zero output head so every path carries gradient.
    model.denoiser.out_proj = normal(6, cfg.latent_channels(), &mut rng).scale(0.5);
    let samples: Vec<ImageMaskSample> = [Category::Foreground, Category::Background]
        .into_iter()
        .enumerate()
        .map(|(i, category)| {
            let image = Image::new(4, 4, 1, (0..16).map(|_| rng.random_range(0.0..1.0)).collect())?;
            let mut mask = Mask::zeros(4, 4);
            mask.set(i, 1, true);
            mask.set(2, 2 + i, true);
            Ok(ImageMaskSample {
                image,
                mask,
                category,
                mask_kind: MaskKind::RandomBrush,
                seed: i as u64,
            })
        })
        .collect::<Result<_>>()?;
    let schedule = DiffusionSchedule::default();
    let examples = prepare_batch(&samples, &cfg, &schedule, 0.0, seed)?;
    let rows = examples.iter().map(|e| e.x_t.shape()[0]).sum();
    let weights = normal(rows, cfg.latent_channels(), &mut rng);
    check_gradients(
        |_tape: &Tape, vars: &[Var<'_>]| {
            let m = model.map(&mut next_var(vars));
            weighted_sum(predict_chunk(&m, &examples)?, &weights)
        },
        &flatten(&model),
        1e-4,
        None,
    )
}

fn random_mask(h: usize, w: usize, density: f64, rng: &mut SeedRng) -> Mask {
    Mask {
        height: h,
        width: w,
        bits: (0..h * w).map(|_| rng.random_bool(density)).collect(),
    }
}

/// Observed inclusion rates of the random brush and random object masks.
pub fn mask_frequencies(draws: usize, p: f64, seed: u64) -> Result<(f64, f64)> {
    let cfg = MaskComposeConfig { p_rand: p, p_obj: p };
    let mut rng = seeds::rng_for(seed, 104, 0);
    let brush_cfg = BrushConfig {
        height: 16,
        width: 16,
        ..BrushConfig::default()
    };
    let (mut nr, mut no) = (0usize, 0usize);
    for _ in 0..draws {
        let scene = random_mask(16, 16, 0.3, &mut rng);
        let brush = gen_brush_mask(&mut rng, &brush_cfg)?;
        let obj = random_mask(16, 16, 0.2, &mut rng);
        let c = compose_background_mask(&scene, &brush, &obj, &cfg, &mut rng)?;
        nr += c.rand_included as usize;
        no += c.obj_included as usize;
        let expect: Vec<bool> = (0..256)
            .map(|i| scene.bits[i] || (c.rand_included && brush.bits[i]) || (c.obj_included && obj.bits[i]))
            .collect();
        if c.mask.bits != expect {
            return Err(Error::invalid("composed mask differs from its definition"));
        }
    }
    Ok((nr as f64 / draws as f64, no as f64 / draws as f64))
}

/// Draws at p = 0 and p = 1 whose composed mask is not exactly the scene
/// mask, respectively the union of all three.
pub fn mask_degenerate_violations(draws: usize, seed: u64) -> Result<usize> {
    let mut rng = seeds::rng_for(seed, 105, 0);
    let mut bad = 0;
    for p in [0.0, 1.0] {
        let cfg = MaskComposeConfig { p_rand: p, p_obj: p };
        for _ in 0..draws {
            let scene = random_mask(12, 12, 0.3, &mut rng);
            let brush = random_mask(12, 12, 0.3, &mut rng);
            let obj = random_mask(12, 12, 0.3, &mut rng);
            let c = compose_background_mask(&scene, &brush, &obj, &cfg, &mut rng)?;
            let expect = if p == 0.0 {
                scene.clone()
            } else {
                scene.union(&brush)?.union(&obj)?
            };
            if c.mask != expect {
                bad += 1;
            }
        }
    }
    Ok(bad)
}

fn random_image(rng: &mut SeedRng) -> Result<(Image, usize)> {
    let factor = [1, 2, 4, 8][rng.random_range(0..4)];
    let h = factor * rng.random_range(1..=6);
    let w = factor * rng.random_range(1..=6);
    let c = [1, 3][rng.random_range(0..2)];
    let data = (0..h * w * c).map(|_| rng.random_range(0.0..1.0)).collect();
    Ok((Image::new(h, w, c, data)?, factor))
}

/// Random images whose encode/decode roundtrip is not bit-exact.
pub fn codec_roundtrip_failures(n: usize, seed: u64) -> Result<usize> {
    let mut rng = seeds::rng_for(seed, 106, 0);
    let mut bad = 0;
    for _ in 0..n {
        let (img, f) = random_image(&mut rng)?;
        let back = decode_output(&space_to_depth(&img, f)?, f, img.channels)?;
        let same = back.data.iter().zip(&img.data).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same || !back.same_dims(&img) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Composites that change any unmasked pixel bit or fail to take a masked one.
pub fn composite_failures(n: usize, seed: u64) -> Result<usize> {
    let mut rng = seeds::rng_for(seed, 107, 0);
    let mut bad = 0;
    for _ in 0..n {
        let (orig, _) = random_image(&mut rng)?;
        let gen = Image::new(
            orig.height,
            orig.width,
            orig.channels,
            (0..orig.data.len()).map(|_| rng.random_range(0.0..1.0)).collect(),
        )?;
        let density = rng.random_range(0.0..1.0);
        let mask = random_mask(orig.height, orig.width, density, &mut rng);
        let out = composite(&orig, &gen, &mask)?;
        let c = orig.channels;
        let ok = (0..orig.height * orig.width).all(|i| {
            let src = if mask.bits[i] { &gen } else { &orig };
            (0..c).all(|k| out.data[i * c + k].to_bits() == src.data[i * c + k].to_bits())
        });
        if !ok {
            bad += 1;
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_a_usage_error() {
        let err = run_suite("nope", 0).unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn small_oracle_run_agrees() {
        assert!(gla_oracle_error(10, 1).unwrap() <= GLA_ORACLE_TOL);
    }

    #[test]
    fn codec_and_mask_suites_pass() {
        for name in ["codec", "mask"] {
            let r = run_suite(name, 3).unwrap();
            assert!(r[0].passed(), "{}", r[0].to_text());
        }
    }
}
