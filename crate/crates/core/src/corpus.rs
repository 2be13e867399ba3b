//! Synthetic single-object videos with exact ground-truth masks.

use alloc::vec::Vec;

use crate::encoder::OBJECT_COLOR;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::numerics::{RngState, Tensor};

pub const BACKGROUND_GRAY: f32 = 0.5;
pub const DISTRACTOR_COLOR: [f32; 3] = [0.2, 0.3, 0.9];
const NOISE_AMPLITUDE: f64 = 0.15;

/// Frames and ground-truth masks of one video.
pub type Video = (Vec<Tensor>, Vec<BinaryMask>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Rect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Background {
    Constant,
    /// Per-pixel gray noise, redrawn every frame.
    Noise,
    /// Constant gray with a second, differently coloured moving shape.
    Distractor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub shape: Shape,
    /// Disk radius or rectangle half-extent, in pixels.
    pub radius: f64,
    /// Object centre `(x, y)` at frame 0.
    pub start: (f64, f64),
    /// Pixels per frame along `(x, y)`; the object bounces off the borders.
    pub velocity: (f64, f64),
    /// Inclusive frame range during which the object is hidden.
    pub occluded: Option<(usize, usize)>,
    pub background: Background,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 20,
            shape: Shape::Disk,
            radius: 8.0,
            start: (20.0, 24.0),
            velocity: (1.0, 0.5),
            occluded: None,
            background: Background::Constant,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// A random scene; every fourth one gets an occlusion interval.
    pub fn random(index: u64, seed: u64, frames: usize) -> Self {
        let mut rng = RngState::new(seed).fork(index);
        let radius = rng.uniform_range(5.0, 10.0);
        let shape = if rng.below(2) == 0 { Shape::Disk } else { Shape::Rect };
        let background = match rng.below(3) {
            0 => Background::Constant,
            1 => Background::Noise,
            _ => Background::Distractor,
        };
        let start = (rng.uniform_range(radius, 64.0 - radius), rng.uniform_range(radius, 64.0 - radius));
        let speed = rng.uniform_range(0.0, 1.5);
        let angle = rng.uniform_range(0.0, core::f64::consts::TAU);
        let occluded = (index % 4 == 3 && frames > 8).then(|| {
            let a = frames / 3 + rng.below(frames / 4);
            (a, a + 2)
        });
        Self {
            frames,
            shape,
            radius,
            start,
            velocity: (speed * libm::cos(angle), speed * libm::sin(angle)),
            occluded,
            background,
            seed: rng.next_u64(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Argument("scene has zero frames".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Argument("scene canvas is empty".into()));
        }
        let r = self.radius;
        if !(r >= 0.5) || 2.0 * r > self.height.min(self.width) as f64 {
            return Err(Error::Argument(alloc::format!(
                "object radius {r} does not fit a {}x{} canvas",
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    pub fn is_occluded(&self, t: usize) -> bool {
        self.occluded.is_some_and(|(a, b)| (a..=b).contains(&t))
    }

    /// Object centre at frame `t`, reflected at the canvas borders.
    pub fn center(&self, t: usize) -> (f64, f64) {
        let r = self.radius;
        let fold = |p0: f64, v: f64, extent: usize| {
            let (lo, hi) = (r, extent as f64 - r);
            let span = hi - lo;
            if span <= 0.0 {
                return lo;
            }
            let p = libm::fmod(p0 - lo + v * t as f64, 2.0 * span);
            let p = if p < 0.0 { p + 2.0 * span } else { p };
            lo + if p > span { 2.0 * span - p } else { p }
        };
        (fold(self.start.0, self.velocity.0, self.width), fold(self.start.1, self.velocity.1, self.height))
    }

    fn distractor_center(&self, t: usize) -> (f64, f64) {
        let mirror = SceneSpec {
            start: (self.width as f64 - self.start.0, self.height as f64 - self.start.1),
            velocity: (-self.velocity.1, self.velocity.0),
            radius: self.radius * 0.8,
            ..self.clone()
        };
        mirror.center(t)
    }
}

fn inside(shape: Shape, center: (f64, f64), r: f64, y: usize, x: usize) -> bool {
    let (dx, dy) = (x as f64 + 0.5 - center.0, y as f64 + 0.5 - center.1);
    match shape {
        Shape::Disk => dx * dx + dy * dy <= r * r,
        Shape::Rect => libm::fabs(dx) <= r && libm::fabs(dy) <= r,
    }
}

/// Frames `H×W×3` in `[0, 1]` and their ground-truth masks.
pub fn generate(spec: &SceneSpec) -> Result<(Vec<Tensor>, Vec<BinaryMask>)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut rng = RngState::new(spec.seed).fork(t as u64);
        let mut img = Tensor::full(&[h, w, 3], BACKGROUND_GRAY);
        if spec.background == Background::Noise {
            for px in img.data_mut().chunks_mut(3) {
                let g = BACKGROUND_GRAY + rng.uniform_range(-NOISE_AMPLITUDE, NOISE_AMPLITUDE) as f32;
                px.iter_mut().for_each(|v| *v = g);
            }
        }
        if spec.background == Background::Distractor {
            let c = spec.distractor_center(t);
            for y in 0..h {
                for x in 0..w {
                    if inside(Shape::Disk, c, spec.radius * 0.8, y, x) {
                        img.row_mut(y * w + x).copy_from_slice(&DISTRACTOR_COLOR);
                    }
                }
            }
        }
        let center = spec.center(t);
        let visible = !spec.is_occluded(t);
        let mask = BinaryMask::from_fn(h, w, |y, x| visible && inside(spec.shape, center, spec.radius, y, x));
        for (i, &on) in mask.bits().iter().enumerate() {
            if on {
                img.row_mut(i).copy_from_slice(&OBJECT_COLOR);
            }
        }
        frames.push(img);
        masks.push(mask);
    }
    Ok((frames, masks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_disk_has_identical_masks() {
        let spec = SceneSpec { frames: 5, velocity: (0.0, 0.0), ..SceneSpec::default() };
        let (_, masks) = generate(&spec).unwrap();
        assert!(masks.windows(2).all(|p| p[0] == p[1]));
        assert!(!masks[0].is_empty());
    }

    #[test]
    fn unit_velocity_moves_centroid() {
        let spec = SceneSpec { frames: 5, velocity: (1.0, 0.0), ..SceneSpec::default() };
        let (_, masks) = generate(&spec).unwrap();
        let xs: Vec<f64> = masks.iter().map(|m| m.centroid().unwrap().1).collect();
        for p in xs.windows(2) {
            assert!((p[1] - p[0] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn occlusion_hides_then_reappears() {
        let spec = SceneSpec { frames: 8, occluded: Some((3, 5)), ..SceneSpec::default() };
        let (frames, masks) = generate(&spec).unwrap();
        for t in 3..=5 {
            assert!(masks[t].is_empty());
            assert!(frames[t].data().iter().all(|&v| v == BACKGROUND_GRAY));
        }
        assert!(!masks[6].is_empty());
    }

    #[test]
    fn zero_frames_rejected() {
        let spec = SceneSpec { frames: 0, ..SceneSpec::default() };
        assert!(matches!(generate(&spec), Err(Error::Argument(_))));
    }

    #[test]
    fn random_scenes_stay_visible() {
        for i in 0..40 {
            let spec = SceneSpec::random(i, 7, 60);
            let (_, masks) = generate(&spec).unwrap();
            for (t, m) in masks.iter().enumerate() {
                assert_eq!(m.is_empty(), spec.is_occluded(t), "scene {i} frame {t}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec { background: Background::Noise, ..SceneSpec::default() };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }
}
