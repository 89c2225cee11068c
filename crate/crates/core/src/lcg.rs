//! Latent category guidance: the foreground/background mask taxonomy,
//! background mask composition, category embeddings, and condition dropout.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::data::ImageMaskSample;
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::params::{gaussian, linear_weight, param_tree};
use crate::tensor::Tensor;

/// Default embedding width per token.
pub const DEFAULT_EMBED_DIM: usize = 20;
pub const DEFAULT_P_RAND: f64 = 0.5;
pub const DEFAULT_P_OBJ: f64 = 0.5;
pub const DEFAULT_P_DROP: f64 = 0.1;
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    Foreground,
    Background,
    /// Unconditional token used for guidance.
    Null,
}

impl Category {
    pub fn code(self) -> u8 {
        match self {
            Category::Foreground => 0,
            Category::Background => 1,
            Category::Null => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Category::Foreground),
            1 => Some(Category::Background),
            2 => Some(Category::Null),
            _ => None,
        }
    }

    /// The other of the two real categories.
    pub fn opposite(self) -> Category {
        match self {
            Category::Foreground => Category::Background,
            Category::Background => Category::Foreground,
            Category::Null => Category::Null,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Foreground => "foreground",
            Category::Background => "background",
            Category::Null => "null",
        })
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "foreground" | "fg" => Ok(Category::Foreground),
            "background" | "bg" => Ok(Category::Background),
            "null" => Ok(Category::Null),
            _ => Err(Error::invalid(format!("unknown category {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    ObjectSemantic,
    SceneSemantic,
    RandomBrush,
    RandomObject,
}

impl MaskKind {
    pub const ALL: [MaskKind; 4] = [
        MaskKind::ObjectSemantic,
        MaskKind::SceneSemantic,
        MaskKind::RandomBrush,
        MaskKind::RandomObject,
    ];

    /// Object masks train the foreground embedding; every other kind
    /// trains the background embedding.
    pub fn category(self) -> Category {
        match self {
            MaskKind::ObjectSemantic => Category::Foreground,
            _ => Category::Background,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            MaskKind::ObjectSemantic => 0,
            MaskKind::SceneSemantic => 1,
            MaskKind::RandomBrush => 2,
            MaskKind::RandomObject => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        MaskKind::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::ObjectSemantic => "object_semantic",
            MaskKind::SceneSemantic => "scene_semantic",
            MaskKind::RandomBrush => "random_brush",
            MaskKind::RandomObject => "random_object",
        })
    }
}

/// Inclusion probabilities for the random brush and random object masks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskComposeConfig {
    pub p_rand: f64,
    pub p_obj: f64,
}

impl Default for MaskComposeConfig {
    fn default() -> Self {
        MaskComposeConfig {
            p_rand: DEFAULT_P_RAND,
            p_obj: DEFAULT_P_OBJ,
        }
    }
}

impl MaskComposeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_rand", self.p_rand), ("p_obj", self.p_obj)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// The foreground mask is the object mask itself.
pub fn foreground_mask(m_obj: &Mask) -> Mask {
    m_obj.clone()
}

/// Result of one background composition, with the two Bernoulli outcomes.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundMask {
    pub mask: Mask,
    pub rand_included: bool,
    pub obj_included: bool,
}

/// `M_bg = M_scene ∨ (b_r ∧ M_rand) ∨ (b_o ∧ M_obj′)` with independent
/// `b_r ~ Bernoulli(p_rand)`, `b_o ~ Bernoulli(p_obj)`.
///
/// Both draws are always taken, in that order, so the random stream does not
/// depend on the outcome.
pub fn compose_background_mask(
    m_scene: &Mask,
    m_rand: &Mask,
    m_obj_prime: &Mask,
    cfg: &MaskComposeConfig,
    rng: &mut impl Rng,
) -> Result<BackgroundMask> {
    cfg.validate()?;
    m_rand.check_dims(m_scene.height, m_scene.width, "compose_background_mask")?;
    m_obj_prime.check_dims(m_scene.height, m_scene.width, "compose_background_mask")?;
    let rand_included = rng.random_bool(cfg.p_rand);
    let obj_included = rng.random_bool(cfg.p_obj);
    let bits = (0..m_scene.bits.len())
        .map(|i| {
            m_scene.bits[i] || (rand_included && m_rand.bits[i]) || (obj_included && m_obj_prime.bits[i])
        })
        .collect();
    Ok(BackgroundMask {
        mask: Mask {
            height: m_scene.height,
            width: m_scene.width,
            bits,
        },
        rand_included,
        obj_included,
    })
}

/// Replaces `category` by [`Category::Null`] with probability `p_drop`.
pub fn drop_condition(category: Category, p_drop: f64, rng: &mut impl Rng) -> Result<Category> {
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::invalid(format!("p_drop = {p_drop} is not a probability")));
    }
    Ok(if rng.random_bool(p_drop) {
        Category::Null
    } else {
        category
    })
}

param_tree! {
    /// Learnable category tokens (m × E.Dim each) and the shared
    /// up-projection to the cross-attention width.
    #[derive(Clone, Debug)]
    pub struct LcgEmbeddingTable {
        tensor foreground: P,
        tensor background: P,
        tensor null: P,
        tensor up_projection: P,
    }
}

impl LcgEmbeddingTable {
    pub fn init(tokens: usize, embed_dim: usize, out_width: usize, rng: &mut impl Rng) -> Result<Self> {
        if tokens == 0 || embed_dim == 0 || out_width == 0 {
            return Err(Error::invalid(format!(
                "embedding table needs at least one token and positive widths \
                 (tokens={tokens}, embed_dim={embed_dim}, out_width={out_width})"
            )));
        }
        Ok(LcgEmbeddingTable {
            foreground: gaussian(tokens, embed_dim, EMBED_INIT_STD, rng),
            background: gaussian(tokens, embed_dim, EMBED_INIT_STD, rng),
            null: gaussian(tokens, embed_dim, EMBED_INIT_STD, rng),
            up_projection: linear_weight(embed_dim, out_width, rng),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.foreground.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.foreground.shape()[0]
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> LcgEmbeddingTable<Var<'t>> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }

    /// Up-projected tokens for `category`, without a tape.
    pub fn embed(&self, category: Category) -> Result<Tensor> {
        self.rows(category).matmul(&self.up_projection)
    }
}

impl<P> LcgEmbeddingTable<P> {
    pub fn rows(&self, category: Category) -> &P {
        match category {
            Category::Foreground => &self.foreground,
            Category::Background => &self.background,
            Category::Null => &self.null,
        }
    }
}

impl<'t> LcgEmbeddingTable<Var<'t>> {
    pub fn embed(&self, category: Category) -> Result<Var<'t>> {
        self.rows(category).matmul(self.up_projection)
    }
}

/// How conditional and unconditional branches are paired under guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceMode {
    /// `ε(null) + s·(ε(c) − ε(null))`.
    ConditionalVsNull,
    /// `ε(c̄) + s·(ε(c) − ε(c̄))` with c̄ the opposite category.
    ForegroundVsBackground,
}

impl GuidanceMode {
    pub fn reference(self, category: Category) -> Category {
        match self {
            GuidanceMode::ConditionalVsNull => Category::Null,
            GuidanceMode::ForegroundVsBackground => category.opposite(),
        }
    }
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "null" => Ok(GuidanceMode::ConditionalVsNull),
            "opposite" => Ok(GuidanceMode::ForegroundVsBackground),
            _ => Err(Error::Config(format!("guidance mode must be null or opposite, got {s:?}"))),
        }
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceMode::ConditionalVsNull => "null",
            GuidanceMode::ForegroundVsBackground => "opposite",
        })
    }
}

/// One rule broken by one dataset sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub index: usize,
    pub rule: &'static str,
    pub detail: String,
}

/// Checks kind/category assignment, dimensions, value range, and coverage
/// bounds of every sample.
pub fn scan_samples(samples: &[ImageMaskSample], min_coverage: f64, max_coverage: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    for (index, s) in samples.iter().enumerate() {
        let mut flag = |rule: &'static str, detail: String| out.push(Violation { index, rule, detail });
        if s.category != s.mask_kind.category() {
            flag(
                "kind-category",
                format!("{:?} labelled {} instead of {}", s.mask_kind, s.category, s.mask_kind.category()),
            );
        }
        if s.mask.height != s.image.height || s.mask.width != s.image.width {
            flag(
                "dimensions",
                format!(
                    "mask {}×{} vs image {}×{}",
                    s.mask.height, s.mask.width, s.image.height, s.image.width
                ),
            );
        }
        if s.mask.bits.len() != s.mask.height * s.mask.width {
            flag("binary-mask", "mask storage does not match its dimensions".into());
        }
        if let Some(v) = s.image.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            flag("pixel-range", format!("value {v} outside [0, 1]"));
        }
        let cov = s.mask.coverage();
        if cov < min_coverage || cov > max_coverage {
            flag(
                "coverage",
                format!("coverage {cov:.4} outside [{min_coverage}, {max_coverage}]"),
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask_with(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::zeros(h, w);
        for &(y, x) in on {
            m.set(y, x, true);
        }
        m
    }

    #[test]
    fn kind_mapping() {
        assert_eq!(MaskKind::ObjectSemantic.category(), Category::Foreground);
        for k in [MaskKind::SceneSemantic, MaskKind::RandomBrush, MaskKind::RandomObject] {
            assert_eq!(k.category(), Category::Background);
        }
    }

    #[test]
    fn foreground_mask_is_identity() {
        assert_eq!(foreground_mask(&Mask::zeros(3, 3)), Mask::zeros(3, 3));
        let single = mask_with(4, 4, &[(2, 1)]);
        assert_eq!(foreground_mask(&single), single);
    }

    #[test]
    fn degenerate_probabilities() {
        let scene = mask_with(4, 4, &[(0, 0), (0, 1)]);
        let brush = mask_with(4, 4, &[(2, 2)]);
        let obj = mask_with(4, 4, &[(3, 3), (0, 0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = MaskComposeConfig { p_rand: 0.0, p_obj: 0.0 };
        let all = MaskComposeConfig { p_rand: 1.0, p_obj: 1.0 };
        for _ in 0..20 {
            assert_eq!(compose_background_mask(&scene, &brush, &obj, &none, &mut rng).unwrap().mask, scene);
            let union = scene.union(&brush).unwrap().union(&obj).unwrap();
            assert_eq!(compose_background_mask(&scene, &brush, &obj, &all, &mut rng).unwrap().mask, union);
        }
    }

    #[test]
    fn empty_extras_leave_scene_mask() {
        let scene = mask_with(3, 5, &[(1, 4)]);
        let empty = Mask::zeros(3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in [0.0, 0.3, 1.0] {
            let cfg = MaskComposeConfig { p_rand: p, p_obj: 1.0 - p };
            assert_eq!(compose_background_mask(&scene, &empty, &empty, &cfg, &mut rng).unwrap().mask, scene);
        }
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = compose_background_mask(
            &Mask::zeros(4, 4),
            &Mask::zeros(4, 5),
            &Mask::zeros(4, 4),
            &MaskComposeConfig::default(),
            &mut rng,
        );
        assert!(r.is_err());
    }

    #[test]
    fn same_seed_same_draws() {
        let scene = Mask::zeros(2, 2);
        let brush = mask_with(2, 2, &[(0, 0)]);
        let obj = mask_with(2, 2, &[(1, 1)]);
        let cfg = MaskComposeConfig::default();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| compose_background_mask(&scene, &brush, &obj, &cfg, &mut rng).unwrap().mask)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(42), run(42));
    }

    #[test]
    fn drop_condition_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(drop_condition(Category::Foreground, 0.0, &mut rng).unwrap(), Category::Foreground);
            assert_eq!(drop_condition(Category::Background, 1.0, &mut rng).unwrap(), Category::Null);
        }
        assert!(drop_condition(Category::Foreground, 1.5, &mut rng).is_err());
    }

    #[test]
    fn embed_degenerate_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut table = LcgEmbeddingTable::init(1, DEFAULT_EMBED_DIM, 8, &mut rng).unwrap();
        table.background = table.foreground.clone();
        assert_eq!(
            table.embed(Category::Foreground).unwrap(),
            table.embed(Category::Background).unwrap()
        );
        table.up_projection = Tensor::zeros([DEFAULT_EMBED_DIM, 8]);
        assert_eq!(table.embed(Category::Null).unwrap(), Tensor::zeros([1, 8]));
        assert!(LcgEmbeddingTable::init(0, 20, 8, &mut rng).is_err());
    }

    #[test]
    fn gradient_reaches_selected_rows_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = LcgEmbeddingTable::init(2, 5, 4, &mut rng).unwrap();
        let tape = Tape::new();
        let bound = table.bind(&tape);
        let loss = bound.embed(Category::Background).unwrap().mean_square();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(bound.background).max_abs() > 0.0);
        assert_eq!(grads.get(bound.foreground).max_abs(), 0.0);
        assert_eq!(grads.get(bound.null).max_abs(), 0.0);
    }
}
