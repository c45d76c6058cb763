//! Deterministic synthetic detection scenes.
//!
//! Each scene is a single-channel canvas holding a few axis-aligned shapes of
//! three classes, each drawn with its own intensity so class identity is
//! visible in local texture:
//!
//! | class | shape            | intensity |
//! |-------|------------------|-----------|
//! | 0     | filled rectangle | 1.0       |
//! | 1     | hollow rectangle | 0.75      |
//! | 2     | cross            | 0.5       |
//!
//! A scene is a pure function of its seed and the [`SceneConfig`], so a
//! dataset is fully described by its list of seeds.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BoxCxcywh};
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 3] = ["filled", "hollow", "cross"];
const CLASS_INTENSITY: [f64; 3] = [1.0, 0.75, 0.5];
const PLACEMENT_ATTEMPTS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Canvas side length in pixels.
    pub canvas: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side range in pixels (before aspect distortion).
    pub min_size: usize,
    pub max_size: usize,
    /// Width/height ratio range.
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub num_classes: usize,
    /// Largest IoU allowed between objects of one scene.
    pub max_overlap: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            canvas: 32,
            min_objects: 1,
            max_objects: 3,
            min_size: 3,
            max_size: 16,
            min_aspect: 0.5,
            max_aspect: 2.0,
            num_classes: 3,
            max_overlap: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas == 0 {
            return Err(Error::config("canvas must be positive"));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::config(format!(
                "object size range {}..={} is empty",
                self.min_size, self.max_size
            )));
        }
        if self.min_size > self.canvas {
            return Err(Error::config(format!(
                "minimum object size {} exceeds canvas {}",
                self.min_size, self.canvas
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::config("min_objects exceeds max_objects"));
        }
        if !(self.min_aspect > 0.0 && self.min_aspect <= self.max_aspect) {
            return Err(Error::config("aspect range is empty"));
        }
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return Err(Error::config(format!(
                "num_classes must be in 1..={}",
                CLASS_NAMES.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub class: usize,
    pub bbox: BoxCxcywh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub canvas: usize,
    /// Row-major `[canvas, canvas]` intensities.
    pub pixels: Vec<f64>,
    pub objects: Vec<Object>,
}

/// Pixel rectangle `[x0, x0 + w) × [y0, y0 + h)`.
#[derive(Clone, Copy, Debug)]
struct Rect {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

impl Rect {
    fn to_box(self, canvas: usize) -> BoxCxcywh {
        let c = canvas as f64;
        BoxCxcywh::new(
            (self.x0 as f64 + 0.5 * self.w as f64) / c,
            (self.y0 as f64 + 0.5 * self.h as f64) / c,
            self.w as f64 / c,
            self.h as f64 / c,
        )
    }
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let canvas = cfg.canvas;
    let mut placed: Vec<(usize, Rect)> = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.gen_range(0..cfg.num_classes);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let rect = sample_rect(&mut rng, cfg);
            let b = rect.to_box(canvas);
            if placed.iter().all(|(_, r)| iou(r.to_box(canvas), b) <= cfg.max_overlap) {
                placed.push((class, rect));
                break;
            }
        }
    }
    let mut pixels = vec![0.0; canvas * canvas];
    for &(class, rect) in &placed {
        rasterize(&mut pixels, canvas, class, rect);
    }
    Ok(Scene {
        seed,
        canvas,
        pixels,
        objects: placed
            .into_iter()
            .map(|(class, r)| Object {
                class,
                bbox: r.to_box(canvas),
            })
            .collect(),
    })
}

fn sample_rect(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Rect {
    // Log-uniform size and aspect so small and large objects are equally common.
    let (lo, hi) = (cfg.min_size as f64, cfg.max_size as f64 + 1.0);
    let side = (rng.gen_range(lo.ln()..hi.ln())).exp();
    let aspect = if cfg.min_aspect < cfg.max_aspect {
        rng.gen_range(cfg.min_aspect.ln()..cfg.max_aspect.ln()).exp()
    } else {
        cfg.min_aspect
    };
    let clamp = |v: f64| (v.floor() as usize).clamp(cfg.min_size, cfg.max_size.min(cfg.canvas));
    let w = clamp(side * aspect.sqrt());
    let h = clamp(side / aspect.sqrt());
    Rect {
        x0: rng.gen_range(0..=cfg.canvas - w),
        y0: rng.gen_range(0..=cfg.canvas - h),
        w,
        h,
    }
}

fn rasterize(pixels: &mut [f64], canvas: usize, class: usize, r: Rect) {
    let value = CLASS_INTENSITY[class];
    // Bar widths share the parity of their side so the cross is centered.
    let arm = (r.w.min(r.h) / 3).max(1);
    let bar = |side: usize| if (side - arm).is_multiple_of(2) { arm } else { arm + 1 };
    let (arm_x, arm_y) = (bar(r.w), bar(r.h));
    let (mid_x, mid_y) = (r.x0 + (r.w - arm_x) / 2, r.y0 + (r.h - arm_y) / 2);
    for y in r.y0..r.y0 + r.h {
        for x in r.x0..r.x0 + r.w {
            let on = match class {
                0 => true,
                1 => x == r.x0 || y == r.y0 || x + 1 == r.x0 + r.w || y + 1 == r.y0 + r.h,
                _ => (mid_x..mid_x + arm_x).contains(&x) || (mid_y..mid_y + arm_y).contains(&y),
            };
            if on {
                pixels[y * canvas + x] = value;
            }
        }
    }
}

/// Seeds of a dataset split. Splits of one base seed never overlap.
pub fn split_seeds(base: u64, split: Split, count: usize) -> Vec<u64> {
    let offset = match split {
        Split::Train => 0,
        Split::Eval => 1 << 32,
    };
    (0..count as u64)
        .map(|i| base.wrapping_mul(1 << 40).wrapping_add(offset).wrapping_add(i))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

pub fn generate_scenes(seeds: &[u64], cfg: &SceneConfig) -> Result<Vec<Scene>> {
    seeds.iter().map(|&s| generate_scene(s, cfg)).collect()
}

/// One line of a dataset export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub seed: u64,
    pub objects: Vec<Object>,
}

/// Writes one JSON record per scene (seed and objects, no raster).
pub fn export_scenes(scenes: &[Scene], mut out: impl Write) -> Result<()> {
    for s in scenes {
        let rec = SceneRecord {
            seed: s.seed,
            objects: s.objects.clone(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::format("scene record", e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Reads records written by [`export_scenes`] and regenerates each scene,
/// refusing records whose objects disagree with the regenerated scene.
pub fn import_scenes(input: impl BufRead, cfg: &SceneConfig) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord =
            serde_json::from_str(&line).map_err(|e| Error::format("scene record", format!("line {}: {e}", n + 1)))?;
        let scene = generate_scene(rec.seed, cfg)?;
        if scene.objects != rec.objects {
            return Err(Error::format(
                "scene record",
                format!(
                    "line {}: objects do not match seed {} under this config",
                    n + 1,
                    rec.seed
                ),
            ));
        }
        scenes.push(scene);
    }
    Ok(scenes)
}
