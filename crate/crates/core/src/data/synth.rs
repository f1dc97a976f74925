//! Moving-shapes scenes: textured layers translated by integer offsets.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{OcclusionMap, Sample};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;
use crate::warp::FlowField;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackgroundMode {
    /// Sum of sinusoids, like the shapes.
    Textured,
    /// A single colour per channel.
    Flat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Largest per-axis shape displacement in pixels.
    pub max_displacement: usize,
    /// Largest per-axis background displacement in pixels.
    pub background_displacement: usize,
    pub background: BackgroundMode,
    /// Standard deviation of additive Gaussian noise (0 disables).
    pub noise: f32,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            width: 64,
            height: 64,
            channels: 3,
            min_shapes: 3,
            max_shapes: 5,
            max_displacement: 6,
            background_displacement: 6,
            background: BackgroundMode::Textured,
            noise: 0.0,
        }
    }
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.channels == 0 {
            return Err(invalid("image size and channels must be positive"));
        }
        if self.min_shapes > self.max_shapes {
            return Err(invalid("min_shapes exceeds max_shapes"));
        }
        let limit = self.width.min(self.height);
        for d in [self.max_displacement, self.background_displacement] {
            if 4 * d >= limit {
                return Err(invalid(format!(
                    "displacement {d} must be below a quarter of the image size {limit}"
                )));
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(invalid("noise must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Wave {
    pub kx: f32,
    pub ky: f32,
    pub phase: f32,
    /// Amplitude per channel.
    pub amplitude: Vec<f32>,
}

/// Colour field in layer coordinates: base colour plus sinusoids, clamped
/// to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub base: Vec<f32>,
    pub waves: Vec<Wave>,
}

impl Texture {
    pub fn flat(base: Vec<f32>) -> Self {
        Texture { base, waves: Vec::new() }
    }

    pub fn value(&self, c: usize, x: f32, y: f32) -> f32 {
        let mut v = self.base[c];
        for w in &self.waves {
            v += w.amplitude[c] * (w.kx * x + w.ky * y + w.phase).sin();
        }
        v.clamp(0.0, 1.0)
    }

    fn random(rng: &mut ChaCha8Rng, channels: usize, waves: usize) -> Self {
        let base = (0..channels).map(|_| rng.gen_range(0.2..0.8)).collect();
        let waves = (0..waves)
            .map(|_| {
                let wavelength = rng.gen_range(5.0..20.0f32);
                let angle = rng.gen_range(0.0..PI);
                let k = 2.0 * PI / wavelength;
                Wave {
                    kx: k * angle.cos(),
                    ky: k * angle.sin(),
                    phase: rng.gen_range(0.0..2.0 * PI),
                    amplitude: (0..channels).map(|_| rng.gen_range(0.04..0.14)).collect(),
                }
            })
            .collect();
        Texture { base, waves }
    }
}

/// Region covered by a layer in its frame-1 pose, tested at pixel centres.
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Everywhere,
    /// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32, angle: f32 },
    Polygon(Vec<(f32, f32)>),
}

impl Shape {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        match self {
            Shape::Everywhere => true,
            Shape::Rect { x0, y0, x1, y1 } => x >= *x0 && x < *x1 && y >= *y0 && y < *y1,
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let a = (dx * c + dy * s) / rx;
                let b = (-dx * s + dy * c) / ry;
                a * a + b * b <= 1.0
            }
            Shape::Polygon(pts) => {
                // even-odd ray casting
                let mut inside = false;
                let n = pts.len();
                for i in 0..n {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub shape: Shape,
    pub texture: Texture,
    /// Integer translation from frame 1 to frame 2.
    pub dx: i32,
    pub dy: i32,
}

/// Depth-ordered layers; later layers are in front.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub layers: Vec<Layer>,
}

impl Scene {
    /// Random scene drawn from `config`, deterministic in `seed`.
    pub fn random(config: &ShapesConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (config.width as f32, config.height as f32);
        let c = config.channels;
        let bd = config.background_displacement as i32;
        let md = config.max_displacement as i32;
        let background = match config.background {
            BackgroundMode::Textured => Texture::random(&mut rng, c, 5),
            BackgroundMode::Flat => Texture::flat((0..c).map(|_| rng.gen_range(0.2..0.8)).collect()),
        };
        let mut layers = vec![Layer {
            shape: Shape::Everywhere,
            texture: background,
            dx: rng.gen_range(-bd..=bd),
            dy: rng.gen_range(-bd..=bd),
        }];
        let count = rng.gen_range(config.min_shapes..=config.max_shapes);
        let extent = w.min(h);
        for _ in 0..count {
            let cx = rng.gen_range(0.15 * w..0.85 * w);
            let cy = rng.gen_range(0.15 * h..0.85 * h);
            let r = rng.gen_range(0.1 * extent..0.22 * extent);
            let shape = if rng.gen_bool(0.5) {
                Shape::Ellipse {
                    cx,
                    cy,
                    rx: r,
                    ry: r * rng.gen_range(0.5..1.0),
                    angle: rng.gen_range(0.0..PI),
                }
            } else {
                let sides = rng.gen_range(3..=6);
                let mut angles: Vec<f32> = (0..sides).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
                angles.sort_by(f32::total_cmp);
                Shape::Polygon(
                    angles
                        .into_iter()
                        .map(|a| {
                            let rr = r * rng.gen_range(0.7..1.2);
                            (cx + rr * a.cos(), cy + rr * a.sin())
                        })
                        .collect(),
                )
            };
            layers.push(Layer {
                shape,
                texture: Texture::random(&mut rng, c, 3),
                dx: rng.gen_range(-md..=md),
                dy: rng.gen_range(-md..=md),
            });
        }
        Ok(Scene {
            width: config.width,
            height: config.height,
            channels: c,
            layers,
        })
    }

    /// Index of the front-most layer covering pixel `(x, y)` of frame
    /// `frame` (0 or 1).
    pub fn top_layer(&self, frame: usize, x: i64, y: i64) -> usize {
        let t = frame as i64;
        (0..self.layers.len())
            .rev()
            .find(|&k| {
                let l = &self.layers[k];
                let sx = (x - t * l.dx as i64) as f32;
                let sy = (y - t * l.dy as i64) as f32;
                l.shape.contains(sx, sy)
            })
            .unwrap_or(0)
    }

    fn render(&self, frame: usize, tops: &[usize]) -> Tensor {
        let (w, h) = (self.width, self.height);
        let t = frame as f32;
        Tensor::from_fn(&[self.channels, h, w], |i| {
            let c = i / (w * h);
            let p = i % (w * h);
            let l = &self.layers[tops[p]];
            let x = (p % w) as f32 - t * l.dx as f32;
            let y = (p / w) as f32 - t * l.dy as f32;
            l.texture.value(c, x, y)
        })
    }

    /// Renders both frames with exact forward/backward flow and the
    /// visibility of frame-1 pixels.
    pub fn sample(&self, seed: u64) -> Sample {
        let (w, h) = (self.width, self.height);
        let tops = |frame| -> Vec<usize> {
            (0..w * h)
                .map(|p| self.top_layer(frame, (p % w) as i64, (p / w) as i64))
                .collect()
        };
        let top1 = tops(0);
        let top2 = tops(1);
        let flow = FlowField::from_fn(w, h, |x, y| {
            let l = &self.layers[top1[y * w + x]];
            (l.dx as f32, l.dy as f32)
        });
        let backward = FlowField::from_fn(w, h, |x, y| {
            let l = &self.layers[top2[y * w + x]];
            (-l.dx as f32, -l.dy as f32)
        });
        let occ = (0..w * h)
            .map(|p| {
                let k = top1[p];
                let l = &self.layers[k];
                let tx = (p % w) as i64 + l.dx as i64;
                let ty = (p / w) as i64 + l.dy as i64;
                let inside = tx >= 0 && ty >= 0 && (tx as usize) < w && (ty as usize) < h;
                let visible = inside && top2[ty as usize * w + tx as usize] == k;
                if visible {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Sample {
            i1: self.render(0, &top1),
            i2: self.render(1, &top2),
            gt_flow: Some(flow),
            gt_occ: Some(OcclusionMap::new(w, h, occ).expect("sized")),
            gt_flow_backward: Some(backward),
            seed,
        }
    }
}

/// One random sample; pure in `(config, seed)`.
pub fn generate_sample(config: &ShapesConfig, seed: u64) -> Result<Sample> {
    let scene = Scene::random(config, seed)?;
    let mut sample = scene.sample(seed);
    if config.noise > 0.0 {
        let normal = Normal::new(0.0, config.noise).map_err(|e| invalid(e.to_string()))?;
        // separate stream so noise does not perturb the scene layout
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        for img in [&mut sample.i1, &mut sample.i2] {
            for v in img.data_mut() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(sample)
}

/// Samples for seeds `seed_base .. seed_base + count`, generated in parallel.
pub fn generate_batch(config: &ShapesConfig, seed_base: u64, count: usize) -> Result<Vec<Sample>> {
    config.validate()?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_sample(config, seed_base.wrapping_add(i)))
        .collect()
}
