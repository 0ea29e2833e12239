//! Flip and translate augmentation with reflect padding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LabeledPatch;
use crate::eval::PseudoMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub hflip_p: f64,
    pub vflip_p: f64,
    /// Maximum translation as a fraction of each side.
    pub max_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_p: 0.5,
            vflip_p: 0.5,
            max_shift: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            hflip_p: 0.0,
            vflip_p: 0.0,
            max_shift: 0.0,
        }
    }
}

/// A concrete geometric transform: flips first, then a shift by
/// `(dy, dx)` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    pub dy: i64,
    pub dx: i64,
}

impl Transform {
    pub fn identity() -> Self {
        Transform::default()
    }

    /// Draws in a fixed order: hflip, vflip, dy, dx.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut R) -> Self {
        let hflip = rng.gen::<f64>() < cfg.hflip_p;
        let vflip = rng.gen::<f64>() < cfg.vflip_p;
        let my = (cfg.max_shift * height as f64).floor() as i64;
        let mx = (cfg.max_shift * width as f64).floor() as i64;
        let dy = rng.gen_range(-my..=my);
        let dx = rng.gen_range(-mx..=mx);
        Transform { hflip, vflip, dy, dx }
    }

    /// Source coordinate in the untransformed image for destination `(y, x)`.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let sy = reflect(y as i64 - self.dy, h);
        let sx = reflect(x as i64 - self.dx, w);
        let sy = if self.vflip { h - 1 - sy } else { sy };
        let sx = if self.hflip { w - 1 - sx } else { sx };
        (sy, sx)
    }

    /// Applies the transform to every channel of a `[C, H, W]` buffer.
    pub fn apply_planes<T: Copy>(&self, data: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(data.len());
        for c in 0..channels {
            let plane = &data[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = self.source(y, x, h, w);
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        out
    }

    pub fn apply(&self, patch: &LabeledPatch) -> LabeledPatch {
        let (h, w) = (patch.height(), patch.width());
        let image = Tensor::from_parts(vec![3, h, w], self.apply_planes(patch.image.data(), 3, h, w));
        let gt_mask = patch.gt_mask.as_ref().map(|m| PseudoMask {
            labels: self.apply_planes(&m.labels, 1, h, w),
            height: h,
            width: w,
            id: m.id.clone(),
        });
        LabeledPatch {
            image,
            label: patch.label.clone(),
            gt_mask,
            id: patch.id.clone(),
        }
    }
}

/// Mirror index without repeating the edge pixel (`-1 → 1`, `n → n-2`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

pub fn augment<R: Rng + ?Sized>(patch: &LabeledPatch, cfg: &AugmentConfig, rng: &mut R) -> LabeledPatch {
    let t = Transform::sample(cfg, patch.height(), patch.width(), rng);
    t.apply(patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn patch(h: usize, w: usize) -> LabeledPatch {
        let data: Vec<f32> = (0..3 * h * w).map(|i| (i % 251) as f32 / 255.0).collect();
        let labels: Vec<u8> = (0..h * w).map(|i| (i % 4) as u8).collect();
        LabeledPatch {
            image: Tensor::new(&[3, h, w], data).unwrap(),
            label: vec![1, 1, 1],
            gt_mask: Some(PseudoMask::new(labels, h, w, "p").unwrap()),
            id: "p".into(),
        }
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-4, 1), 0);
    }

    #[test]
    fn no_op_draws_leave_patch_unchanged() {
        let p = patch(6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(augment(&p, &AugmentConfig::none(), &mut rng), p);
        assert_eq!(Transform::identity().apply(&p), p);
    }

    #[test]
    fn double_flip_is_identity() {
        let p = patch(4, 7);
        let h = Transform {
            hflip: true,
            ..Transform::identity()
        };
        assert_ne!(h.apply(&p), p);
        assert_eq!(h.apply(&h.apply(&p)), p);
        let v = Transform {
            vflip: true,
            ..Transform::identity()
        };
        assert_eq!(v.apply(&v.apply(&p)), p);
    }

    #[test]
    fn shift_and_back_restores_interior() {
        let p = patch(8, 10);
        let fwd = Transform {
            dy: 0,
            dx: 2,
            ..Transform::identity()
        };
        let back = Transform { dx: -2, ..fwd };
        let q = back.apply(&fwd.apply(&p));
        let (h, w) = (8, 10);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w - 2 {
                    let i = (c * h + y) * w + x;
                    assert_eq!(q.image.data()[i], p.image.data()[i]);
                }
            }
        }
    }

    #[test]
    fn mask_moves_with_image() {
        let mut p = patch(6, 6);
        // make channel 0 encode the mask so co-transformation is observable
        let m = p.gt_mask.clone().unwrap();
        for (i, &l) in m.labels.iter().enumerate() {
            p.image.data_mut()[i] = l as f32;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let q = augment(&p, &AugmentConfig::default(), &mut rng);
            let qm = q.gt_mask.as_ref().unwrap();
            for (i, &l) in qm.labels.iter().enumerate() {
                assert_eq!(q.image.data()[i], l as f32);
            }
            assert_eq!(q.label, p.label);
            assert_eq!(q.image.shape(), p.image.shape());
        }
    }

    #[test]
    fn shifts_stay_within_ten_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t = Transform::sample(&AugmentConfig::default(), 48, 30, &mut rng);
            assert!(t.dy.abs() <= 4 && t.dx.abs() <= 3);
        }
    }
}
