//! Seeded synthetic tissue-like patches with exact pixel ground truth.
//!
//! Each patch paints one to three elliptical class regions over a bright,
//! faintly noisy background. Classes differ in base hue and in texture:
//! class 1 carries fine speckle, class 2 oriented stripes and class 3 a
//! smooth mottled field. Pixel values are quantised to `k/255` so that
//! the PNG round trip is exact.

use rand::seq::index::sample;
use rand::Rng;

use super::{derive_rng, LabeledPatch};
use crate::error::{Error, Result};
use crate::eval::PseudoMask;
use crate::tensor::Tensor;

pub const MIN_SIZE: usize = 16;

const SYNTH_STREAM: u64 = 1;

const BACKGROUND: [f32; 3] = [0.93, 0.90, 0.94];

const BASE: [[f32; 3]; 3] = [
    [0.42, 0.16, 0.50],
    [0.88, 0.48, 0.62],
    [0.55, 0.62, 0.86],
];

/// Smallest share of the patch a chosen class must cover.
const MIN_COVERAGE: f64 = 0.04;

const MAX_LAYOUT_TRIES: usize = 32;

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Coarse random grid, bilinearly upsampled; values in [-1, 1].
fn smooth_field<R: Rng + ?Sized>(size: usize, cells: usize, rng: &mut R) -> Vec<f32> {
    let g = cells + 1;
    let grid: Vec<f32> = (0..g * g).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let fy = y as f32 / size as f32 * cells as f32;
            let fx = x as f32 / size as f32 * cells as f32;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
            let at = |yy: usize, xx: usize| grid[yy * g + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Per-pixel texture offset for `class` (0-based), in roughly [-1, 1].
fn texture<R: Rng + ?Sized>(class: usize, size: usize, rng: &mut R) -> Vec<f32> {
    match class {
        0 => (0..size * size).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        1 => {
            let theta = rng.gen_range(0.0..std::f32::consts::PI);
            let period = rng.gen_range(3.0f32..5.0);
            let phase = rng.gen_range(0.0..std::f32::consts::TAU);
            let (s, c) = theta.sin_cos();
            let mut out = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let t = (c * x as f32 + s * y as f32) / period * std::f32::consts::TAU + phase;
                    out.push(t.sin() + rng.gen_range(-0.2f32..0.2));
                }
            }
            out
        }
        _ => smooth_field(size, (size / 6).max(2), rng),
    }
}

fn layout<R: Rng + ?Sized>(classes: &[usize], size: usize, rng: &mut R) -> Vec<u8> {
    let s = size as f64;
    let mut mask = vec![0u8; size * size];
    for &c in classes {
        let e = Ellipse {
            cy: rng.gen_range(0.2 * s..0.8 * s),
            cx: rng.gen_range(0.2 * s..0.8 * s),
            ry: rng.gen_range(0.2 * s..0.42 * s),
            rx: rng.gen_range(0.2 * s..0.42 * s),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        };
        for y in 0..size {
            for x in 0..size {
                if e.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    mask[y * size + x] = c as u8 + 1;
                }
            }
        }
    }
    mask
}

fn coverage_ok(mask: &[u8], classes: &[usize]) -> bool {
    let n = mask.len() as f64;
    classes.iter().all(|&c| {
        let count = mask.iter().filter(|&&l| l as usize == c + 1).count();
        count as f64 / n >= MIN_COVERAGE
    })
}

/// One synthetic patch; a pure function of `(seed, index, size, class_count)`.
pub fn synth_patch(seed: u64, index: usize, size: usize, class_count: usize) -> LabeledPatch {
    let mut rng = derive_rng(seed, SYNTH_STREAM, index as u64);
    let k = rng.gen_range(1..=class_count.min(3));
    let mut classes = sample(&mut rng, class_count, k).into_vec();
    classes.sort_unstable();
    // later entries are painted on top; shuffle paint order
    let mut order = classes.clone();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut mask = layout(&order, size, &mut rng);
    for _ in 1..MAX_LAYOUT_TRIES {
        if coverage_ok(&mask, &classes) {
            break;
        }
        mask = layout(&order, size, &mut rng);
    }

    let p = size * size;
    let mut image = vec![0f32; 3 * p];
    let bg_noise: Vec<f32> = (0..p).map(|_| rng.gen_range(-0.02f32..0.02)).collect();
    for (i, &l) in mask.iter().enumerate() {
        if l == 0 {
            for ch in 0..3 {
                image[ch * p + i] = BACKGROUND[ch] + bg_noise[i];
            }
        }
    }
    for c in 0..class_count {
        // every class consumes its texture draws so layouts stay comparable
        let tex = texture(c % 3, size, &mut rng);
        let base = class_color(c);
        let amp = 0.12f32;
        for (i, &l) in mask.iter().enumerate() {
            if l as usize == c + 1 {
                for ch in 0..3 {
                    image[ch * p + i] = base[ch] + amp * tex[i];
                }
            }
        }
    }
    for v in &mut image {
        *v = quantize(*v);
    }

    let mut label = vec![0u8; class_count];
    for &l in &mask {
        if l > 0 {
            label[l as usize - 1] = 1;
        }
    }
    let id = format!("synth_{index:05}-{}", super::label::format_bracket_label(&label));
    LabeledPatch {
        image: Tensor::from_parts(vec![3, size, size], image),
        label,
        gt_mask: Some(PseudoMask {
            labels: mask,
            height: size,
            width: size,
            id: id.clone(),
        }),
        id,
    }
}

fn class_color(c: usize) -> [f32; 3] {
    if c < BASE.len() {
        return BASE[c];
    }
    // extra classes: rotate the base palette
    let b = BASE[c % 3];
    [b[1], b[2], b[0]]
}

/// `count` patches of `size × size` pixels, deterministic per seed.
pub fn synth_generate(seed: u64, count: usize, size: usize, class_count: usize) -> Result<Vec<LabeledPatch>> {
    if size < MIN_SIZE {
        return Err(Error::Argument(format!("synthetic size {size} below {MIN_SIZE}")));
    }
    if count == 0 {
        return Err(Error::Argument("synthetic count must be at least 1".into()));
    }
    if class_count == 0 || class_count > 254 {
        return Err(Error::Argument(format!("class count {class_count} outside 1..=254")));
    }
    Ok((0..count).map(|i| synth_patch(seed, i, size, class_count)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(9, 6, 24, 3).unwrap();
        let b = synth_generate(9, 6, 24, 3).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(10, 6, 24, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn label_matches_mask() {
        for p in synth_generate(1, 40, 32, 3).unwrap() {
            let m = p.gt_mask.as_ref().unwrap();
            let present: Vec<u8> = (1..=3u8).map(|c| m.labels.contains(&c) as u8).collect();
            assert_eq!(present, p.label);
            assert!(p.label.iter().any(|&v| v == 1));
            assert!(p.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(p.image.data().iter().all(|&v| (v * 255.0).round() / 255.0 == v));
        }
    }

    #[test]
    fn every_class_is_common() {
        let patches = synth_generate(2024, 500, 16, 3).unwrap();
        for c in 0..3 {
            let n = patches.iter().filter(|p| p.label[c] == 1).count();
            assert!(n as f64 / 500.0 >= 0.25, "class {c}: {n}");
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(synth_generate(0, 1, 8, 3).is_err());
        assert!(synth_generate(0, 0, 32, 3).is_err());
    }
}
