//! Synthetic labeled scenes: colored geometric shapes on textured grounds.
//!
//! Three shape classes — circle (0), square (1), triangle (2) — each with a
//! characteristic color family, drawn at random sizes and positions over a
//! seeded background. Boxes and labels are exact by construction, which makes
//! the sets usable for both supervised pretraining and mAP scoring without a
//! labeling step.

use log::debug;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{iou, GtBox, Sample};
use crate::tensor::{Real, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundFamily {
    /// One flat gray level per image.
    Flat,
    /// Linear ramp in a random direction.
    Gradient,
    /// Low-frequency sinusoidal interference pattern.
    Ripples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub background: BackgroundFamily,
    /// Peak-to-peak amplitude of the background texture.
    pub background_amplitude: Real,
    /// Objects per image, inclusive.
    pub min_objects: usize,
    pub max_objects: usize,
    /// Shape classes drawn uniformly from `0..classes` (max 3).
    pub classes: usize,
    /// Half-extent range of a shape in pixels, inclusive.
    pub min_half: usize,
    pub max_half: usize,
    /// Uniform per-channel color perturbation half-width.
    pub color_jitter: Real,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            background: BackgroundFamily::Gradient,
            background_amplitude: 0.25,
            min_objects: 1,
            max_objects: 3,
            classes: 3,
            min_half: 6,
            max_half: 13,
            color_jitter: 0.12,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), crate::error::Error> {
        let err = |m: String| Err(crate::error::Error::Config(m));
        if self.classes == 0 || self.classes > 3 {
            return err(format!("scene supports 1..=3 shape classes, got {}", self.classes));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return err(format!(
                "bad object range [{}, {}]",
                self.min_objects, self.max_objects
            ));
        }
        if self.min_half == 0 || self.min_half > self.max_half {
            return err(format!("bad size range [{}, {}]", self.min_half, self.max_half));
        }
        if 2 * self.max_half + 2 >= self.image_size {
            return err(format!(
                "largest shape ({} px) cannot fit a {} px image",
                2 * self.max_half,
                self.image_size
            ));
        }
        Ok(())
    }
}

/// Characteristic color per class, before jitter.
const CLASS_COLORS: [[Real; 3]; 3] = [
    [0.85, 0.30, 0.25], // circle: red family
    [0.25, 0.80, 0.35], // square: green family
    [0.30, 0.40, 0.85], // triangle: blue family
];

/// Shapes may overlap a little, but not to the point of swallowing each
/// other; a candidate must stay under this IoU against every placed box.
const MAX_OVERLAP: Real = 0.3;
const PLACEMENT_RETRIES: usize = 24;
/// Attempts at regenerating one image before giving up entirely.
const IMAGE_RETRIES: usize = 16;

fn image_rng(seed: u64, index: usize, attempt: usize) -> ChaCha8Rng {
    let mixed = seed
        ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1))
            .wrapping_add(0xD1B5_4A32_D192_ED03u64.wrapping_mul(attempt as u64));
    ChaCha8Rng::seed_from_u64(mixed)
}

fn paint_background(spec: &SceneSpec, rng: &mut ChaCha8Rng, data: &mut [Real]) {
    let s = spec.image_size;
    let shape = Shape4::new(1, 3, s, s);
    let amp = spec.background_amplitude;
    let base = rng.gen_range(0.35..0.55);
    match spec.background {
        BackgroundFamily::Flat => {
            for v in data.iter_mut() {
                *v = base;
            }
        }
        BackgroundFamily::Gradient => {
            let theta: Real = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = (theta.sin(), theta.cos());
            for y in 0..s {
                for x in 0..s {
                    let t = (dx * x as Real + dy * y as Real) / s as Real;
                    let v = base + amp * (t - 0.5);
                    for c in 0..3 {
                        data[shape.index(0, c, y, x)] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
        BackgroundFamily::Ripples => {
            let fy: Real = rng.gen_range(1.0..3.0);
            let fx: Real = rng.gen_range(1.0..3.0);
            let phase: Real = rng.gen_range(0.0..std::f64::consts::TAU);
            for y in 0..s {
                for x in 0..s {
                    let u = std::f64::consts::TAU * (fy * y as Real + fx * x as Real) / s as Real;
                    let v = base + 0.5 * amp * (u + phase).sin();
                    for c in 0..3 {
                        data[shape.index(0, c, y, x)] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
}

fn inside_shape(class: usize, x: Real, y: Real, cx: Real, cy: Real, half: Real) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match class {
        0 => dx * dx + dy * dy <= half * half,
        1 => dx.abs() <= half && dy.abs() <= half,
        _ => {
            // apex at the top center, base along the bottom edge
            if dy < -half || dy > half {
                return false;
            }
            // width grows linearly from 0 at the apex to `half` at the base
            let spread = (dy + half) * 0.5;
            dx.abs() <= spread
        }
    }
}

fn paint_shape(spec: &SceneSpec, data: &mut [Real], b: &GtBox, color: [Real; 3]) {
    let s = spec.image_size;
    let shape = Shape4::new(1, 3, s, s);
    let cx = 0.5 * (b.x0 + b.x1);
    let cy = 0.5 * (b.y0 + b.y1);
    let half = 0.5 * (b.x1 - b.x0);
    for y in b.y0.floor().max(0.0) as usize..(b.y1.ceil() as usize).min(s) {
        for x in b.x0.floor().max(0.0) as usize..(b.x1.ceil() as usize).min(s) {
            // sample at the pixel center
            if inside_shape(b.class, x as Real + 0.5, y as Real + 0.5, cx, cy, half) {
                for c in 0..3 {
                    data[shape.index(0, c, y, x)] = color[c];
                }
            }
        }
    }
}

fn try_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Option<Sample> {
    let s = spec.image_size;
    let mut data = vec![0.0; 3 * s * s];
    paint_background(spec, rng, &mut data);
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut boxes: Vec<GtBox> = Vec::with_capacity(count);
    let mut colors: Vec<[Real; 3]> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let class = rng.gen_range(0..spec.classes);
            let half = rng.gen_range(spec.min_half..=spec.max_half) as Real;
            let lo = half + 1.0;
            let hi = s as Real - half - 1.0;
            let cx = rng.gen_range(lo..hi);
            let cy = rng.gen_range(lo..hi);
            let cand = GtBox { x0: cx - half, y0: cy - half, x1: cx + half, y1: cy + half, class };
            let crowded = boxes.iter().any(|b| {
                iou((cand.x0, cand.y0, cand.x1, cand.y1), (b.x0, b.y0, b.x1, b.y1)) > MAX_OVERLAP
            });
            if crowded {
                continue;
            }
            let mut color = CLASS_COLORS[class];
            for ch in color.iter_mut() {
                *ch = (*ch + rng.gen_range(-spec.color_jitter..=spec.color_jitter)).clamp(0.0, 1.0);
            }
            boxes.push(cand);
            colors.push(color);
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    // far shapes first so near ones overpaint, matching the box order's
    // irrelevance to evaluation
    for (b, color) in boxes.iter().zip(&colors) {
        paint_shape(spec, &mut data, b, *color);
    }
    let image = Tensor4::new(Shape4::new(1, 3, s, s), data).expect("scene pixels are finite");
    Some(Sample { image, boxes })
}

/// Generate `count` labeled scenes. Deterministic for a given spec: each
/// image draws from its own stream, and an image whose objects cannot be
/// placed is regenerated from a shifted stream rather than shifting its
/// neighbors.
pub fn generate_source(spec: &SceneSpec, count: usize) -> Result<Vec<Sample>, crate::error::Error> {
    spec.validate()?;
    if count == 0 {
        return Err(crate::error::Error::Config("cannot generate an empty dataset".into()));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut sample = None;
        for attempt in 0..IMAGE_RETRIES {
            let mut rng = image_rng(spec.seed, i, attempt);
            if let Some(s) = try_scene(spec, &mut rng) {
                if attempt > 0 {
                    debug!("scene {i}: placement succeeded on attempt {attempt}");
                }
                sample = Some(s);
                break;
            }
        }
        match sample {
            Some(s) => out.push(s),
            None => {
                return Err(crate::error::Error::Config(format!(
                    "scene {i}: no feasible placement after {IMAGE_RETRIES} attempts; \
                     the object count/size ranges overfill the image"
                )))
            }
        }
    }
    Ok(out)
}
