//! Turning scenes into foreground/background training pairs.

use rand::Rng;

use crate::data::brush::{gen_brush_mask, BrushConfig};
use crate::data::scene::Scene;
use crate::data::ImageMaskSample;
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::lcg::{compose_background_mask, foreground_mask, Category, MaskComposeConfig, MaskKind};
use crate::seeds;

#[derive(Clone, Debug, PartialEq)]
pub struct PairConfig {
    pub compose: MaskComposeConfig,
    /// Relative emission weights of foreground and background samples.
    pub fg_weight: f64,
    pub bg_weight: f64,
    pub min_coverage: f64,
    pub max_coverage: f64,
    pub brush: BrushConfig,
    /// Candidates tried per emitted sample before the stream ends.
    pub max_attempts: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            compose: MaskComposeConfig::default(),
            fg_weight: 4.3,
            bg_weight: 9.7,
            min_coverage: 0.01,
            max_coverage: 0.95,
            brush: BrushConfig::default(),
            max_attempts: 1000,
        }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        self.compose.validate()?;
        self.brush.validate()?;
        if !(self.fg_weight >= 0.0 && self.bg_weight >= 0.0 && self.fg_weight + self.bg_weight > 0.0) {
            return Err(Error::Config("pairs.fg_weight and pairs.bg_weight must be non-negative, not both zero".into()));
        }
        if self.min_coverage > self.max_coverage {
            return Err(Error::Config(format!(
                "pairs.min_coverage ({}) exceeds pairs.max_coverage ({})",
                self.min_coverage, self.max_coverage
            )));
        }
        Ok(())
    }

    pub fn fg_probability(&self) -> f64 {
        self.fg_weight / (self.fg_weight + self.bg_weight)
    }
}

/// Infinite, index-addressed stream of samples drawn from a scene pool.
///
/// Sample `i` depends only on the scenes, the config, the base seed and `i`.
/// The stream ends early only if no valid candidate is found within
/// `max_attempts` tries.
pub struct PairStream<'a> {
    scenes: &'a [Scene],
    cfg: PairConfig,
    seed: u64,
    index: u64,
}

pub fn build_pairs<'a>(scenes: &'a [Scene], cfg: &PairConfig, seed: u64) -> Result<PairStream<'a>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::invalid("build_pairs needs at least one scene"));
    }
    Ok(PairStream {
        scenes,
        cfg: cfg.clone(),
        seed,
        index: 0,
    })
}

impl PairStream<'_> {
    fn candidate(&self, category: Category, rng: &mut seeds::Rng) -> Result<Option<(Mask, MaskKind, usize)>> {
        let scene_idx = rng.random_range(0..self.scenes.len());
        let scene = &self.scenes[scene_idx];
        match category {
            Category::Foreground => {
                if scene.object_masks.is_empty() {
                    return Ok(None);
                }
                let obj = &scene.object_masks[rng.random_range(0..scene.object_masks.len())];
                Ok(Some((foreground_mask(obj), MaskKind::ObjectSemantic, scene_idx)))
            }
            _ => {
                let brush = gen_brush_mask(rng, &self.cfg.brush)?;
                let other = if self.scenes.len() > 1 {
                    let mut j = rng.random_range(0..self.scenes.len() - 1);
                    if j >= scene_idx {
                        j += 1;
                    }
                    let masks = &self.scenes[j].object_masks;
                    if masks.is_empty() {
                        Mask::zeros(scene.scene_mask.height, scene.scene_mask.width)
                    } else {
                        masks[rng.random_range(0..masks.len())].clone()
                    }
                } else {
                    Mask::zeros(scene.scene_mask.height, scene.scene_mask.width)
                };
                let composed = compose_background_mask(&scene.scene_mask, &brush, &other, &self.cfg.compose, rng)?;
                let kind = if !scene.scene_mask.is_empty() {
                    MaskKind::SceneSemantic
                } else if composed.rand_included && !brush.is_empty() {
                    MaskKind::RandomBrush
                } else if composed.obj_included && !other.is_empty() {
                    MaskKind::RandomObject
                } else {
                    return Ok(None);
                };
                Ok(Some((composed.mask, kind, scene_idx)))
            }
        }
    }

    pub fn sample_at(&self, index: u64) -> Result<Option<ImageMaskSample>> {
        let seed = seeds::derive(self.seed, seeds::stream::PAIR, index);
        let mut rng = seeds::rng(seed);
        let category = if rng.random_bool(self.cfg.fg_probability()) {
            Category::Foreground
        } else {
            Category::Background
        };
        for _ in 0..self.cfg.max_attempts {
            if let Some((mask, mask_kind, scene_idx)) = self.candidate(category, &mut rng)? {
                let cov = mask.coverage();
                if cov >= self.cfg.min_coverage && cov <= self.cfg.max_coverage {
                    return Ok(Some(ImageMaskSample {
                        image: self.scenes[scene_idx].image.clone(),
                        mask,
                        category,
                        mask_kind,
                        seed,
                    }));
                }
            }
        }
        Ok(None)
    }
}

impl Iterator for PairStream<'_> {
    type Item = ImageMaskSample;

    fn next(&mut self) -> Option<ImageMaskSample> {
        let s = self.sample_at(self.index).ok().flatten();
        self.index += 1;
        s
    }
}
