use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassEntry, ClassPool, Origin};

/// Procedural glyph classes: each class is a handful of random strokes;
/// instances shift and bend them by up to `jitter` pixels and add
/// Gaussian pixel noise of standard deviation `noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub instances: usize,
    pub image_size: usize,
    pub noise: f64,
    pub jitter: f64,
    #[serde(default = "default_strokes")]
    pub strokes: usize,
}

fn default_strokes() -> usize {
    3
}

type Segment = [(f64, f64); 2];

fn raster(segments: &[Segment], size: usize, width: f64) -> Vec<f32> {
    let mut img = vec![0.0f32; size * size];
    for (idx, px) in img.iter_mut().enumerate() {
        let (x, y) = ((idx % size) as f64 + 0.5, (idx / size) as f64 + 0.5);
        let mut best = f64::INFINITY;
        for &[(ax, ay), (bx, by)] in segments {
            let (dx, dy) = (bx - ax, by - ay);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 {
                (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (px_, py_) = (ax + t * dx - x, ay + t * dy - y);
            best = best.min((px_ * px_ + py_ * py_).sqrt());
        }
        *px = (1.0 - (best - width).max(0.0)).clamp(0.0, 1.0) as f32;
    }
    img
}

fn offset<R: Rng>(rng: &mut R, amount: f64) -> f64 {
    if amount > 0.0 {
        rng.gen_range(-amount..=amount)
    } else {
        0.0
    }
}

pub fn synth_glyph_pool<R: Rng>(spec: &SynthSpec, rng: &mut R) -> ClassPool {
    let size = spec.image_size as f64;
    let (lo, hi) = (0.15 * size, 0.85 * size);
    let width = (size / 28.0).max(0.5);
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("finite noise"));
    let mut classes = Vec::with_capacity(spec.n_classes);
    for c in 0..spec.n_classes {
        let proto: Vec<Segment> = (0..spec.strokes.max(1))
            .map(|_| {
                [
                    (rng.gen_range(lo..hi), rng.gen_range(lo..hi)),
                    (rng.gen_range(lo..hi), rng.gen_range(lo..hi)),
                ]
            })
            .collect();
        let mut instances = Vec::with_capacity(spec.instances);
        for _ in 0..spec.instances {
            let (sx, sy) = (offset(rng, spec.jitter), offset(rng, spec.jitter));
            let segs: Vec<Segment> = proto
                .iter()
                .map(|s| {
                    let mut out = *s;
                    for p in &mut out {
                        p.0 += sx + offset(rng, 0.5 * spec.jitter);
                        p.1 += sy + offset(rng, 0.5 * spec.jitter);
                    }
                    out
                })
                .collect();
            let mut img = raster(&segs, spec.image_size, width);
            if let Some(d) = &noise {
                for v in &mut img {
                    *v = (*v as f64 + d.sample(rng)).clamp(0.0, 1.0) as f32;
                }
            }
            instances.push(img);
        }
        classes.push(ClassEntry::new(c, format!("synthetic/{c:05}"), instances));
    }
    ClassPool {
        origin: Origin::Synthetic,
        image_shape: [1, spec.image_size, spec.image_size],
        classes,
    }
}
