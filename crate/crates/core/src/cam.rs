//! Multi-scale tap integration and one-step class activation maps.
//!
//! The classifier is a 1×1 convolution applied directly to the integrated
//! feature map, so the activation maps fall out of the forward pass and the
//! class logits are simply their spatial means.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::TapSet;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Additive guard in min-max normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Per-class activation maps `[N,C,H,W]` with their class names.
#[derive(Debug, Clone, PartialEq)]
pub struct CamStack<S> {
    pub maps: Tensor<S>,
    pub class_names: Vec<String>,
}

impl<S: Scalar> CamStack<S> {
    pub fn new(maps: Tensor<S>, class_names: Vec<String>) -> Result<Self> {
        maps.expect_ndim("CamStack", 4)?;
        if maps.shape()[1] != class_names.len() {
            return Err(Error::Dimension(format!(
                "CamStack: {} maps for {} class names",
                maps.shape()[1],
                class_names.len()
            )));
        }
        Ok(CamStack { maps, class_names })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(n, c, h, w)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.maps.shape();
        (s[0], s[1], s[2], s[3])
    }
}

/// Classification scores `[N,C]` in (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores<S> {
    pub scores: Tensor<S>,
}

/// The 1×1 convolutional classifier of one branch.
#[derive(Debug, Clone)]
pub struct CamHead {
    pub weight: ParamId,
    pub bias: ParamId,
    in_channels: usize,
    classes: usize,
}

/// Graph handles produced by [`CamHead::forward`].
#[derive(Debug, Clone, Copy)]
pub struct CamOutput {
    /// `[N,C,H,W]` activation maps.
    pub maps: Var,
    /// `[N,C]` pre-sigmoid scores (spatial means of `maps`).
    pub logits: Var,
}

impl CamHead {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        in_channels: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = (1.0 / in_channels as f64).sqrt();
        CamHead {
            weight: store.add(
                format!("{prefix}.cam.w"),
                Tensor::uniform(&[classes, in_channels], bound, rng),
                true,
            ),
            bias: store.add(format!("{prefix}.cam.b"), Tensor::zeros(&[classes]), true),
            in_channels,
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, feat: Var) -> Result<CamOutput> {
        cam_forward(ctx.g, feat, ctx.p(self.weight), ctx.p(self.bias))
    }
}

/// Resize every tap to the largest tap's spatial size and concatenate the
/// channels in tap order.
pub fn integrate_taps<S: Scalar>(g: &mut Graph<S>, taps: &TapSet) -> Result<Var> {
    integrate_vars(g, &taps.vars())
}

pub fn integrate_vars<S: Scalar>(g: &mut Graph<S>, taps: &[Var]) -> Result<Var> {
    if taps.is_empty() {
        return Err(Error::Argument("integrate_taps: empty tap set".into()));
    }
    let (mut h, mut w) = (0, 0);
    for &t in taps {
        let s = g.shape(t);
        if s.len() != 4 {
            return Err(Error::Dimension(format!("integrate_taps: tap shape {s:?}")));
        }
        if s[2] * s[3] > h * w {
            (h, w) = (s[2], s[3]);
        }
    }
    let resized = taps
        .iter()
        .map(|&t| g.bilinear_resize(t, h, w))
        .collect::<Result<Vec<_>>>()?;
    g.concat_channels(&resized)
}

/// `maps = conv1x1(feat)`, `logits = mean_hw(maps)`; scores are
/// `sigmoid(logits)`.
pub fn cam_forward<S: Scalar>(g: &mut Graph<S>, feat: Var, weight: Var, bias: Var) -> Result<CamOutput> {
    let maps = g.conv1x1(feat, weight, Some(bias))?;
    let s = g.shape(maps).to_vec();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("cam_forward: feature shape {s:?}")));
    }
    let pooled = g.adaptive_avg_pool(maps, 1, 1)?;
    let logits = g.reshape(pooled, &[s[0], s[1]])?;
    Ok(CamOutput { maps, logits })
}

pub fn class_scores<S: Scalar>(g: &mut Graph<S>, logits: Var) -> Result<ClassScores<S>> {
    let s = g.sigmoid(logits)?;
    Ok(ClassScores {
        scores: g.value(s).clone(),
    })
}

/// Differentiable per-sample, per-class min-max normalization of `[N,C,H,W]`.
pub fn normalize_var<S: Scalar>(g: &mut Graph<S>, maps: Var) -> Result<Var> {
    let s = g.shape(maps).to_vec();
    let flat = g.flatten_spatial(maps)?;
    let norm = g.minmax_normalize(flat, NORM_EPS)?;
    g.reshape(norm, &s)
}

/// `(m − min)/(max − min + ε)` over the spatial positions of each map.
pub fn normalize_cam<S: Scalar>(cs: &CamStack<S>) -> CamStack<S> {
    let (_, _, h, w) = cs.dims();
    let p = h * w;
    let eps = S::from_f64(NORM_EPS);
    let mut out = cs.maps.clone();
    for plane in out.data_mut().chunks_mut(p) {
        let lo = plane.iter().copied().fold(S::infinity(), S::min);
        let hi = plane.iter().copied().fold(S::neg_infinity(), S::max);
        let d = hi - lo + eps;
        plane.iter_mut().for_each(|v| *v = (*v - lo) / d);
    }
    CamStack {
        maps: out,
        class_names: cs.class_names.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::TapSet;

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn integrate_shapes_and_order() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[1, 64, 8, 8], 1.0));
        let b = g.constant(Tensor::full(&[1, 128, 4, 4], 2.0));
        let taps = TapSet {
            taps: vec![("a".into(), a), ("b".into(), b)],
        };
        let f = integrate_taps(&mut g, &taps).unwrap();
        let v = g.value(f).clone();
        assert_eq!(v.shape(), &[1, 192, 8, 8]);
        assert!(v.data()[..64 * 64].iter().all(|&x| x == 1.0));
        assert!(v.data()[64 * 64..].iter().all(|&x| (x - 2.0).abs() < 1e-15));

        let swapped = integrate_vars(&mut g, &[b, a]).unwrap();
        let s = g.value(swapped);
        assert!(s.data()[..128 * 64].iter().all(|&x| (x - 2.0).abs() < 1e-15));
        assert!(integrate_vars::<f64>(&mut g, &[]).is_err());
    }

    #[test]
    fn cam_forward_closed_form() {
        let mut g = Graph::<f64>::new();
        let mut feat = vec![1.0; 9];
        feat.extend(vec![2.0; 9]);
        let x = g.constant(Tensor::new(&[1, 2, 3, 3], feat).unwrap());
        let w = g.constant(Tensor::from_f64(&[1, 2], &[0.5, 0.25]).unwrap());
        let b = g.constant(Tensor::zeros(&[1]));
        let out = cam_forward(&mut g, x, w, b).unwrap();
        assert!(g.value(out.maps).data().iter().all(|&v| v == 1.0));
        let scores = class_scores(&mut g, out.logits).unwrap();
        assert!((scores.scores.item() - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn zero_features_score_half() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 2, 2]));
        let w = g.constant(Tensor::ones(&[3, 4]));
        let b = g.constant(Tensor::zeros(&[3]));
        let out = cam_forward(&mut g, x, w, b).unwrap();
        let s = class_scores(&mut g, out.logits).unwrap();
        assert_eq!(s.scores.shape(), &[2, 3]);
        assert!(s.scores.data().iter().all(|&v| v == 0.5));
        let wbad = g.constant(Tensor::ones(&[3, 5]));
        assert!(matches!(cam_forward(&mut g, x, wbad, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn normalize_examples() {
        let cs = CamStack::<f64>::new(Tensor::from_f64(&[1, 1, 1, 2], &[0.0, 2.0]).unwrap(), names(1)).unwrap();
        let n = normalize_cam(&cs);
        assert_eq!(n.maps.data()[0], 0.0);
        assert!((n.maps.data()[1] - 2.0 / (2.0 + 1e-5)).abs() < 1e-15);

        let constant = CamStack::new(Tensor::<f64>::full(&[1, 2, 3, 3], 4.2), names(2)).unwrap();
        assert!(normalize_cam(&constant).maps.data().iter().all(|&v| v == 0.0));

        let unit = CamStack::<f64>::new(Tensor::from_f64(&[1, 1, 1, 3], &[0.0, 0.5, 1.0]).unwrap(), names(1)).unwrap();
        let n = normalize_cam(&unit);
        for (a, b) in n.maps.data().iter().zip([0.0, 0.5, 1.0]) {
            assert!((a - b / (1.0 + 1e-5)).abs() < 1e-15);
        }
    }

    #[test]
    fn graph_and_eager_normalization_agree() {
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let t = Tensor::new(&[2, 3, 4, 4], data).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = normalize_var(&mut g, x).unwrap();
        let eager = normalize_cam(&CamStack::new(t, names(3)).unwrap());
        assert!(g.value(y).max_abs_diff(&eager.maps) < 1e-15);
    }
}
