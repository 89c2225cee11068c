//! Free-form brush masks: thick random-walk polylines.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Mask;

#[derive(Clone, Debug, PartialEq)]
pub struct BrushConfig {
    pub height: usize,
    pub width: usize,
    pub min_strokes: usize,
    pub max_strokes: usize,
    /// Stroke width as a fraction of the shorter image side.
    pub min_width: f64,
    pub max_width: f64,
    pub min_vertices: usize,
    pub max_vertices: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub max_retries: usize,
}

impl Default for BrushConfig {
    fn default() -> Self {
        BrushConfig {
            height: 32,
            width: 32,
            min_strokes: 1,
            max_strokes: 4,
            min_width: 0.04,
            max_width: 0.12,
            min_vertices: 3,
            max_vertices: 8,
            min_ratio: 0.05,
            max_ratio: 0.6,
            max_retries: 200,
        }
    }
}

impl BrushConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_ratio > self.max_ratio {
            return Err(Error::Config(format!(
                "brush.min_ratio ({}) exceeds brush.max_ratio ({})",
                self.min_ratio, self.max_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.min_ratio) || !(0.0..=1.0).contains(&self.max_ratio) {
            return Err(Error::Config("brush.min_ratio and brush.max_ratio must lie in [0, 1]".into()));
        }
        if self.min_strokes > self.max_strokes {
            return Err(Error::Config(format!(
                "brush.min_strokes ({}) exceeds brush.max_strokes ({})",
                self.min_strokes, self.max_strokes
            )));
        }
        if !(self.min_width > 0.0 && self.min_width <= self.max_width) {
            return Err(Error::Config(format!(
                "brush.min_width ({}) and brush.max_width ({}) must satisfy 0 < min ≤ max",
                self.min_width, self.max_width
            )));
        }
        if self.min_vertices < 2 || self.min_vertices > self.max_vertices {
            return Err(Error::Config("brush vertex bounds must satisfy 2 ≤ min ≤ max".into()));
        }
        Ok(())
    }
}

/// Marks every pixel whose center lies within `radius` of segment a–b.
fn stamp_segment(mask: &mut Mask, a: (f64, f64), b: (f64, f64), radius: f64) {
    let (y0, y1) = (a.0.min(b.0) - radius, a.0.max(b.0) + radius);
    let (x0, x1) = (a.1.min(b.1) - radius, a.1.max(b.1) + radius);
    let ylo = y0.floor().max(0.0) as usize;
    let yhi = (y1.ceil().max(0.0) as usize).min(mask.height);
    let xlo = x0.floor().max(0.0) as usize;
    let xhi = (x1.ceil().max(0.0) as usize).min(mask.width);
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    for y in ylo..yhi {
        for x in xlo..xhi {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((py - a.0) * dy + (px - a.1) * dx) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cy, cx) = (a.0 + t * dy, a.1 + t * dx);
            if (py - cy).powi(2) + (px - cx).powi(2) <= radius * radius {
                mask.set(y, x, true);
            }
        }
    }
}

fn draw_strokes(cfg: &BrushConfig, rng: &mut impl Rng) -> Mask {
    let mut mask = Mask::zeros(cfg.height, cfg.width);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let side = h.min(w);
    let strokes = rng.random_range(cfg.min_strokes..=cfg.max_strokes);
    for _ in 0..strokes {
        let width = rng.random_range(cfg.min_width..=cfg.max_width) * side;
        let vertices = rng.random_range(cfg.min_vertices..=cfg.max_vertices);
        let mut p = (rng.random_range(0.0..h), rng.random_range(0.0..w));
        let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
        for _ in 1..vertices {
            heading += rng.random_range(-1.2..1.2);
            let step = rng.random_range(0.1..0.35) * side;
            let next = (
                (p.0 + step * heading.sin()).clamp(0.0, h),
                (p.1 + step * heading.cos()).clamp(0.0, w),
            );
            stamp_segment(&mut mask, p, next, width / 2.0);
            p = next;
        }
    }
    mask
}

/// Draws strokes until coverage lands in `[min_ratio, max_ratio]`.
/// With zero strokes allowed at most, the empty mask is returned directly.
pub fn gen_brush_mask(rng: &mut impl Rng, cfg: &BrushConfig) -> Result<Mask> {
    cfg.validate()?;
    if cfg.max_strokes == 0 {
        return Ok(Mask::zeros(cfg.height, cfg.width));
    }
    let mut last = 0.0;
    for _ in 0..cfg.max_retries.max(1) {
        let mask = draw_strokes(cfg, rng);
        let cov = mask.coverage();
        if cov >= cfg.min_ratio && cov <= cfg.max_ratio {
            return Ok(mask);
        }
        last = cov;
    }
    Err(Error::Generation(format!(
        "brush coverage stayed outside [brush.min_ratio = {}, brush.max_ratio = {}] after {} attempts (last {last:.3})",
        cfg.min_ratio, cfg.max_ratio, cfg.max_retries
    )))
}
