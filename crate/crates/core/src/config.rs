//! Run configuration: a sectioned `key = value` text file.
//!
//! Every key has a default, so an empty file is a complete configuration.
//! Unknown sections and keys are rejected. [`RunConfig::to_text`] writes
//! the canonical form that artifacts embed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BrushConfig, PairConfig, SceneConfig, ShapeKind};
use crate::diffusion::schedule::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::diffusion::{DenoiserConfig, DiffusionSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::lcg::{GuidanceMode, MaskComposeConfig, DEFAULT_P_DROP};
use crate::optim::AdamConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub scene: SceneSection,
    pub brush: BrushSection,
    pub masks: MasksSection,
    pub model: ModelSection,
    pub diffusion: DiffusionSection,
    pub train: TrainSection,
    pub sample: SampleSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub train_shard: String,
    pub eval_shard: String,
    pub checkpoint_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            train_shard: "data/train.lcgs".into(),
            eval_shard: "data/eval.lcgs".into(),
            checkpoint_dir: "runs/default".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Scenes rendered for the training shard.
    pub scenes: usize,
    pub samples: usize,
    pub eval_scenes: usize,
    pub eval_samples: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            scenes: 400,
            samples: 2000,
            eval_scenes: 50,
            eval_samples: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub shapes: Vec<String>,
    pub min_visible_pixels: usize,
    pub stripe_amplitude: f64,
    pub palette_spread: f64,
    pub max_retries: usize,
}

fn shape_name(kind: ShapeKind) -> &'static str {
    match kind {
        ShapeKind::Ellipse => "ellipse",
        ShapeKind::Rectangle => "rectangle",
        ShapeKind::Polygon => "polygon",
    }
}

fn parse_shape(name: &str) -> Result<ShapeKind> {
    match name {
        "ellipse" => Ok(ShapeKind::Ellipse),
        "rectangle" => Ok(ShapeKind::Rectangle),
        "polygon" => Ok(ShapeKind::Polygon),
        _ => Err(Error::Config(format!(
            "scene.shapes: unknown shape {name:?} (expected ellipse, rectangle or polygon)"
        ))),
    }
}

impl Default for SceneSection {
    fn default() -> Self {
        let c = SceneConfig::default();
        SceneSection {
            height: c.height,
            width: c.width,
            channels: c.channels,
            min_objects: c.min_objects,
            max_objects: c.max_objects,
            min_size: c.min_size,
            max_size: c.max_size,
            shapes: c.shapes.iter().map(|&k| shape_name(k).to_string()).collect(),
            min_visible_pixels: c.min_visible_pixels,
            stripe_amplitude: c.stripe_amplitude,
            palette_spread: c.palette_spread,
            max_retries: c.max_retries,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrushSection {
    pub min_strokes: usize,
    pub max_strokes: usize,
    pub min_width: f64,
    pub max_width: f64,
    pub min_vertices: usize,
    pub max_vertices: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub max_retries: usize,
}

impl Default for BrushSection {
    fn default() -> Self {
        let c = BrushConfig::default();
        BrushSection {
            min_strokes: c.min_strokes,
            max_strokes: c.max_strokes,
            min_width: c.min_width,
            max_width: c.max_width,
            min_vertices: c.min_vertices,
            max_vertices: c.max_vertices,
            min_ratio: c.min_ratio,
            max_ratio: c.max_ratio,
            max_retries: c.max_retries,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasksSection {
    pub p_rand: f64,
    pub p_obj: f64,
    pub fg_weight: f64,
    pub bg_weight: f64,
    pub min_coverage: f64,
    pub max_coverage: f64,
    pub max_attempts: usize,
}

impl Default for MasksSection {
    fn default() -> Self {
        let c = PairConfig::default();
        MasksSection {
            p_rand: c.compose.p_rand,
            p_obj: c.compose.p_obj,
            fg_weight: c.fg_weight,
            bg_weight: c.bg_weight,
            min_coverage: c.min_coverage,
            max_coverage: c.max_coverage,
            max_attempts: c.max_attempts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub factor: usize,
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
    pub cross_down: bool,
    pub cross_mid: bool,
    pub cross_up: bool,
    pub embed_dim: usize,
    pub embed_tokens: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = DenoiserConfig::default();
        ModelSection {
            factor: c.factor,
            width: c.width,
            key_width: c.key_width,
            value_width: c.value_width,
            heads: c.heads,
            mlp_ratio: c.mlp_ratio,
            tau: c.tau,
            time_embed_width: c.time_embed_width,
            down_blocks: c.down_blocks,
            mid_blocks: c.mid_blocks,
            up_blocks: c.up_blocks,
            cross_down: c.cross_down,
            cross_mid: c.cross_mid,
            cross_up: c.cross_up,
            embed_dim: c.embed_dim,
            embed_tokens: c.embed_tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Probability of replacing the category with the null embedding.
    pub p_drop: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            p_drop: DEFAULT_P_DROP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Decay of the weight average used for sampling; 0 keeps the raw weights.
    pub ema_decay: f64,
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        TrainSection {
            steps: 2000,
            batch_size: 32,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            adam_eps: a.eps,
            weight_decay: a.weight_decay,
            clip_norm: 1.0,
            ema_decay: 0.999,
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub steps: usize,
    pub scale: f64,
    /// `null` or `opposite`.
    pub guidance: String,
    pub latent_compositing: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        let c = SamplerConfig::default();
        SampleSection {
            steps: c.steps,
            scale: c.scale,
            guidance: c.mode.to_string(),
            latent_compositing: c.latent_compositing,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_config()?.validate()?;
        self.pair_config().validate()?;
        self.denoiser_config().validate()?;
        let schedule = self.schedule()?;
        self.sampler_config()?.validate(&schedule)?;
        self.adam_config().validate()?;
        if !(0.0..=1.0).contains(&self.diffusion.p_drop) {
            return Err(Error::Config(format!(
                "diffusion.p_drop ({}) is not a probability",
                self.diffusion.p_drop
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.train.clip_norm >= 0.0) {
            return Err(Error::Config("train.clip_norm must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.train.ema_decay) {
            return Err(Error::Config(format!(
                "train.ema_decay must lie in [0, 1), got {}",
                self.train.ema_decay
            )));
        }
        if self.data.scenes == 0 || self.data.eval_scenes == 0 {
            return Err(Error::Config("data.scenes and data.eval_scenes must be positive".into()));
        }
        let f = self.model.factor;
        if self.scene.height % f != 0 || self.scene.width % f != 0 {
            return Err(Error::Config(format!(
                "scene.height ({}) and scene.width ({}) must be divisible by model.factor ({f})",
                self.scene.height, self.scene.width
            )));
        }
        let grid = (self.scene.height / f, self.scene.width / f);
        if grid.0 % 2 != 0 || grid.1 % 2 != 0 {
            return Err(Error::Config(format!(
                "latent grid {}×{} must have even sides for the 2×2 stage pooling",
                grid.0, grid.1
            )));
        }
        if self.scene.channels != 3 && self.scene.channels != 1 {
            return Err(Error::Config("scene.channels must be 1 or 3".into()));
        }
        Ok(())
    }

    pub fn scene_config(&self) -> Result<SceneConfig> {
        let s = &self.scene;
        Ok(SceneConfig {
            height: s.height,
            width: s.width,
            channels: s.channels,
            min_objects: s.min_objects,
            max_objects: s.max_objects,
            min_size: s.min_size,
            max_size: s.max_size,
            shapes: s.shapes.iter().map(|n| parse_shape(n)).collect::<Result<_>>()?,
            min_visible_pixels: s.min_visible_pixels,
            stripe_amplitude: s.stripe_amplitude,
            palette_spread: s.palette_spread,
            max_retries: s.max_retries,
        })
    }

    pub fn brush_config(&self) -> BrushConfig {
        let b = &self.brush;
        BrushConfig {
            height: self.scene.height,
            width: self.scene.width,
            min_strokes: b.min_strokes,
            max_strokes: b.max_strokes,
            min_width: b.min_width,
            max_width: b.max_width,
            min_vertices: b.min_vertices,
            max_vertices: b.max_vertices,
            min_ratio: b.min_ratio,
            max_ratio: b.max_ratio,
            max_retries: b.max_retries,
        }
    }

    pub fn pair_config(&self) -> PairConfig {
        let m = &self.masks;
        PairConfig {
            compose: MaskComposeConfig {
                p_rand: m.p_rand,
                p_obj: m.p_obj,
            },
            fg_weight: m.fg_weight,
            bg_weight: m.bg_weight,
            min_coverage: m.min_coverage,
            max_coverage: m.max_coverage,
            brush: self.brush_config(),
            max_attempts: m.max_attempts,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        let m = &self.model;
        DenoiserConfig {
            factor: m.factor,
            image_channels: self.scene.channels,
            width: m.width,
            key_width: m.key_width,
            value_width: m.value_width,
            heads: m.heads,
            mlp_ratio: m.mlp_ratio,
            tau: m.tau,
            time_embed_width: m.time_embed_width,
            down_blocks: m.down_blocks,
            mid_blocks: m.mid_blocks,
            up_blocks: m.up_blocks,
            cross_down: m.cross_down,
            cross_mid: m.cross_mid,
            cross_up: m.cross_up,
            embed_dim: m.embed_dim,
            embed_tokens: m.embed_tokens,
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.diffusion.steps, self.diffusion.beta_start, self.diffusion.beta_end)
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            steps: self.sample.steps,
            scale: self.sample.scale,
            mode: self
                .sample
                .guidance
                .parse::<GuidanceMode>()
                .map_err(|e| Error::Config(format!("sample.guidance: {e}")))?,
            latent_compositing: self.sample.latent_compositing,
        })
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.adam_eps,
            weight_decay: self.train.weight_decay,
        }
    }

    /// Everything that changes the trajectory of a training run.
    ///
    /// Two configs with equal fingerprints may resume each other's
    /// checkpoints; paths, checkpoint cadence, the step budget and the
    /// sampler section are left out.
    pub fn training_fingerprint(&self) -> String {
        let mut c = self.clone();
        c.run = RunSection {
            seed: c.run.seed,
            ..RunSection::default()
        };
        c.train.steps = 0;
        c.train.checkpoint_every = 0;
        c.sample = SampleSection::default();
        c.data.eval_scenes = DataSection::default().eval_scenes;
        c.data.eval_samples = DataSection::default().eval_samples;
        c.to_text()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn canonical_text_roundtrips() {
        let mut c = RunConfig::default();
        c.train.lr = 3.0e-4;
        c.scene.shapes = vec!["polygon".into()];
        c.run.seed = u64::MAX >> 1;
        let text = c.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        for text in ["[train]\nlearning_rate = 0.1\n", "[nope]\nx = 1\n", "seed = 1\n"] {
            match RunConfig::parse(text) {
                Err(Error::Config(msg)) => assert!(msg.contains("unknown"), "{msg}"),
                other => panic!("{text:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn inverted_brush_bounds_name_both_keys() {
        let err = RunConfig::parse("[brush]\nmin_ratio = 0.7\nmax_ratio = 0.2\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("brush.min_ratio") && msg.contains("brush.max_ratio"), "{msg}");
        assert!(err.is_usage());
    }

    #[test]
    fn wrong_types_and_bad_values_are_config_errors() {
        for text in [
            "[model]\nwidth = \"wide\"\n",
            "[sample]\nguidance = \"sideways\"\n",
            "[sample]\nscale = 0.5\n",
            "[scene]\nshapes = [\"star\"]\n",
            "[scene]\nheight = 30\n",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn fingerprint_ignores_paths_and_budget() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.steps = 7;
        b.run.checkpoint_dir = "elsewhere".into();
        assert_eq!(a.training_fingerprint(), b.training_fingerprint());
        b.train.lr = 0.5;
        assert_ne!(a.training_fingerprint(), b.training_fingerprint());
    }
}
