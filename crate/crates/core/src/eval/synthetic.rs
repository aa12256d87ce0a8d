//! Deterministic synthetic test content.
//!
//! Every generator emits `1×3×H×W` frames in `[0, 1]` quantized to 8 bits.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::Tensor;

/// Extent and length of a sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub fps: f64,
}

impl SequenceSpec {
    pub fn new(width: usize, height: usize, frames: usize) -> Self {
        SequenceSpec {
            width,
            height,
            frames,
            fps: 30.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width % 16 != 0 || self.height % 16 != 0 {
            return dim_err(format!(
                "{}×{} is not a positive multiple of 16",
                self.width, self.height
            ));
        }
        if self.frames < 2 {
            return contract_err(format!("a sequence needs at least 2 frames, got {}", self.frames));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Generator {
    /// Filtered noise under a global integer translation.
    Translate,
    /// Sinusoidal texture rotating and zooming about the centre.
    RotateZoom,
    /// Textured disk moving over a static background.
    Occlusion,
}

impl Generator {
    pub const ALL: [Generator; 3] = [Generator::Translate, Generator::RotateZoom, Generator::Occlusion];

    pub fn name(self) -> &'static str {
        match self {
            Generator::Translate => "translate",
            Generator::RotateZoom => "rotate-zoom",
            Generator::Occlusion => "occlusion",
        }
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translate" => Ok(Generator::Translate),
            "rotate-zoom" => Ok(Generator::RotateZoom),
            "occlusion" => Ok(Generator::Occlusion),
            _ => contract_err(format!(
                "unknown generator {s:?} (translate, rotate-zoom, occlusion)"
            )),
        }
    }
}

fn quantize8(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn frame_from_planes(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor<f32> {
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let c = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        quantize8(f(c, y, x))
    })
}

/// Periodic box blur of one `h×w` plane along both axes.
fn blur_periodic(plane: &mut [f64], h: usize, w: usize, radius: usize) {
    let k = (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in 0..=2 * radius {
                s += plane[y * w + (x + w * radius + d - radius) % w];
            }
            tmp[y * w + x] = s / k;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in 0..=2 * radius {
                s += tmp[((y + h * radius + d - radius) % h) * w + x];
            }
            plane[y * w + x] = s / k;
        }
    }
}

/// Three correlated planes of blurred noise with a periodic layout,
/// rescaled to `[lo, hi]`.
fn noise_canvas(rng: &mut ChaCha8Rng, h: usize, w: usize, radius: usize, lo: f64, hi: f64) -> [Vec<f64>; 3] {
    let mut base: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut planes: [Vec<f64>; 3] = Default::default();
    let mut chroma: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    for _ in 0..3 {
        blur_periodic(&mut base, h, w, radius);
        for c in chroma.iter_mut() {
            blur_periodic(c, h, w, radius);
        }
    }
    for (c, plane) in planes.iter_mut().enumerate() {
        *plane = base
            .iter()
            .zip(&chroma[c])
            .map(|(&l, &n)| l + 0.35 * n)
            .collect();
        let (mn, mx) = plane
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let span = (mx - mn).max(1e-12);
        for v in plane.iter_mut() {
            *v = lo + (hi - lo) * (*v - mn) / span;
        }
    }
    planes
}

/// Content moving by `(vx, vy)` pixels per frame: frame `t+1` at `(x, y)`
/// equals frame `t` at `(x − vx, y − vy)` wherever both are inside.
pub fn translate(spec: &SequenceSpec, seed: u64, vx: i64, vy: i64) -> Result<Vec<Tensor<f32>>> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (ch, cw) = (2 * h, 2 * w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = rng.gen_range(2..=5);
    let canvas = noise_canvas(&mut rng, ch, cw, radius, 0.05, 0.95);
    Ok((0..spec.frames as i64)
        .map(|t| {
            frame_from_planes(h, w, |c, y, x| {
                let cy = (y as i64 - t * vy).rem_euclid(ch as i64) as usize;
                let cx = (x as i64 - t * vx).rem_euclid(cw as i64) as usize;
                canvas[c][cy * cw + cx]
            })
        })
        .collect())
}

/// Sum of oriented sinusoids sampled on a grid rotated by `omega` radians
/// and scaled by `zoom` per frame about the centre.
pub fn rotate_zoom(spec: &SequenceSpec, seed: u64, omega: f64, zoom: f64) -> Result<Vec<Tensor<f32>>> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..5)
        .map(|_| {
            let angle = rng.gen_range(0.0..PI);
            let freq = 1.0 / rng.gen_range(5.0..18.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = [
                rng.gen_range(0.5..1.0),
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.2..1.0),
            ];
            (angle.cos() * freq, angle.sin() * freq, phase, amp)
        })
        .collect();
    let norm: [f64; 3] = std::array::from_fn(|c| waves.iter().map(|wv| wv.3[c]).sum());
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    Ok((0..spec.frames)
        .map(|t| {
            let theta = omega * t as f64;
            let s = zoom.powi(t as i32);
            let (sn, cs) = theta.sin_cos();
            frame_from_planes(h, w, |c, y, x| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = (cs * dx + sn * dy) / s;
                let v = (-sn * dx + cs * dy) / s;
                let mut acc = 0.0;
                for &(fx, fy, ph, amp) in &waves {
                    acc += amp[c] * (2.0 * PI * (fx * u + fy * v) + ph).sin();
                }
                0.5 + 0.42 * acc / norm[c]
            })
        })
        .collect())
}

/// Disk of `radius` pixels bouncing with velocity `(vx, vy)` over a static
/// background. Disk samples lie in `[0.85, 1]`, background samples in
/// `[0.05, 0.75]`, so every covered pixel differs from the background.
pub fn occlusion(
    spec: &SequenceSpec,
    seed: u64,
    radius: f64,
    velocity: (f64, f64),
) -> Result<Vec<Tensor<f32>>> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    if 2.0 * radius >= h.min(w) as f64 {
        return contract_err(format!("disk radius {radius} does not fit {w}×{h}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blur = rng.gen_range(2..=5);
    let background = noise_canvas(&mut rng, h, w, blur, 0.05, 0.75);
    let d = 2 * radius.ceil() as usize + 2;
    let disk = noise_canvas(&mut rng, d, d, 2, 0.85, 1.0);
    let mut pos = (
        rng.gen_range(radius..w as f64 - radius),
        rng.gen_range(radius..h as f64 - radius),
    );
    let mut vel = velocity;
    let mut frames = Vec::with_capacity(spec.frames);
    for _ in 0..spec.frames {
        let (px, py) = pos;
        let (ox, oy) = (px.round() as i64, py.round() as i64);
        frames.push(frame_from_planes(h, w, |c, y, x| {
            let (fx, fy) = (x as f64 + 0.5 - px, y as f64 + 0.5 - py);
            if fx * fx + fy * fy <= radius * radius {
                let ty = (y as i64 - oy).rem_euclid(d as i64) as usize;
                let tx = (x as i64 - ox).rem_euclid(d as i64) as usize;
                disk[c][ty * d + tx]
            } else {
                background[c][y * w + x]
            }
        }));
        for (p, v, extent) in [(&mut pos.0, &mut vel.0, w as f64), (&mut pos.1, &mut vel.1, h as f64)] {
            *p += *v;
            if *p < radius {
                *p = 2.0 * radius - *p;
                *v = -*v;
            }
            if *p > extent - radius {
                *p = 2.0 * (extent - radius) - *p;
                *v = -*v;
            }
        }
    }
    Ok(frames)
}

/// The static background [`occlusion`] draws for `seed`.
pub fn occlusion_background(spec: &SequenceSpec, seed: u64) -> Result<Tensor<f32>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blur = rng.gen_range(2..=5);
    let bg = noise_canvas(&mut rng, spec.height, spec.width, blur, 0.05, 0.75);
    Ok(frame_from_planes(spec.height, spec.width, |c, y, x| bg[c][y * spec.width + x]))
}

/// A sequence with motion parameters drawn from `seed`.
pub fn generate(spec: &SequenceSpec, generator: Generator, seed: u64) -> Result<Vec<Tensor<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9e4e_4a70);
    match generator {
        Generator::Translate => {
            let vx = rng.gen_range(-3..=3);
            let vy = rng.gen_range(-3..=3);
            translate(spec, seed, vx, vy)
        }
        Generator::RotateZoom => {
            let omega = rng.gen_range(-0.04..0.04);
            let zoom = rng.gen_range(0.985..1.015);
            rotate_zoom(spec, seed, omega, zoom)
        }
        Generator::Occlusion => {
            let m = spec.width.min(spec.height) as f64;
            let radius = rng.gen_range(0.15 * m..0.3 * m);
            let v = (rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5));
            occlusion(spec, seed, radius, v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translation_is_exact() {
        let spec = SequenceSpec::new(32, 16, 3);
        let f = translate(&spec, 4, 2, 0).unwrap();
        for y in 0..16 {
            for x in 2..32 {
                for c in 0..3 {
                    assert_eq!(f[1].at4(0, c, y, x), f[0].at4(0, c, y, x - 2));
                }
            }
        }
    }

    #[test]
    fn values_are_eight_bit() {
        let spec = SequenceSpec::new(16, 16, 2);
        for g in Generator::ALL {
            for frame in generate(&spec, g, 9).unwrap() {
                for &v in frame.data() {
                    assert!((0.0..=1.0).contains(&v));
                    assert_eq!((v * 255.0).round() / 255.0, v);
                }
            }
        }
    }

    #[test]
    fn generator_names_round_trip() {
        for g in Generator::ALL {
            assert_eq!(g.name().parse::<Generator>().unwrap(), g);
        }
        assert!("spin".parse::<Generator>().is_err());
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(translate(&SequenceSpec::new(20, 16, 3), 0, 1, 0).is_err());
        assert!(translate(&SequenceSpec::new(16, 16, 1), 0, 1, 0).is_err());
    }
}
