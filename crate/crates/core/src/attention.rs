//! Query/key projection, the spatial attention matrix, and CAM refinement.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cam::{normalize_cam, normalize_var, CamStack};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Starting values of `W_Q` and `W_K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QkInit {
    /// Both start as the same identity (truncated when `Ck ≠ Cf`), so the
    /// initial attention is a softmax over feature inner products.
    #[default]
    Identity,
    /// Independent Glorot-uniform draws.
    Glorot,
}

/// Factor applied to `QᵀK` before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QkScale {
    #[default]
    InvSqrtDim,
    One,
}

impl QkScale {
    pub fn factor(self, proj_dim: usize) -> f64 {
        match self {
            QkScale::InvSqrtDim => 1.0 / (proj_dim as f64).sqrt(),
            QkScale::One => 1.0,
        }
    }
}

/// Square-by-default projections `W_Q, W_K: [Ck, Cf]`, no biases.
#[derive(Debug, Clone)]
pub struct QKProjection {
    pub wq: ParamId,
    pub wk: ParamId,
    in_channels: usize,
    proj_dim: usize,
}

impl QKProjection {
    pub fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        in_channels: usize,
        proj_dim: usize,
        init: QkInit,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (tq, tk) = match init {
            QkInit::Identity => {
                let mut eye = Tensor::<S>::zeros(&[proj_dim, in_channels]);
                for i in 0..proj_dim.min(in_channels) {
                    eye.data_mut()[i * in_channels + i] = S::one();
                }
                (eye.clone(), eye)
            }
            QkInit::Glorot => {
                let bound = (6.0 / (in_channels + proj_dim) as f64).sqrt();
                (
                    Tensor::uniform(&[proj_dim, in_channels], bound, rng),
                    Tensor::uniform(&[proj_dim, in_channels], bound, rng),
                )
            }
        };
        QKProjection {
            wq: store.add(format!("{prefix}.wq"), tq, true),
            wk: store.add(format!("{prefix}.wk"), tk, true),
            in_channels,
            proj_dim,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn proj_dim(&self) -> usize {
        self.proj_dim
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, feat: Var) -> Result<(Var, Var)> {
        project_qk(ctx.g, feat, ctx.p(self.wq), ctx.p(self.wk))
    }
}

/// Flatten `feat: [N,Cf,H,W]` to `[N,Cf,P]` and apply both projections,
/// giving `Q, K: [N,Ck,P]`.
pub fn project_qk<S: Scalar>(g: &mut Graph<S>, feat: Var, wq: Var, wk: Var) -> Result<(Var, Var)> {
    let flat = g.flatten_spatial(feat)?;
    let q = g.conv1x1(flat, wq, None)?;
    let k = g.conv1x1(flat, wk, None)?;
    Ok((q, k))
}

/// `A[n] = softmax(Q[n]ᵀ K[n])` with the softmax over key positions, so
/// every row of `A: [N,P,P]` is a distribution.
pub fn attention_matrix<S: Scalar>(g: &mut Graph<S>, q: Var, k: Var) -> Result<Var> {
    let (qs, ks) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if qs.len() != 3 || qs != ks {
        return Err(Error::Dimension(format!(
            "attention_matrix: Q {qs:?} and K {ks:?} must be equal [N,Ck,P]"
        )));
    }
    let logits = g.matmul(q, k, true, false)?;
    g.softmax(logits, 2)
}

/// Pool `cam: [N,C,H,W]` to the attention resolution and mix positions:
/// `out(c,i) = Σ_j M(c,j)·A(i,j)`. Each output position is a convex
/// combination of input positions. Returns `[N,C,h,w]`, un-normalized.
pub fn mix_with_attention<S: Scalar>(
    g: &mut Graph<S>,
    cam: Var,
    attn: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    let cs = g.shape(cam).to_vec();
    let as_ = g.shape(attn).to_vec();
    if cs.len() != 4 {
        return Err(Error::Dimension(format!("refine_cam: CAM shape {cs:?}")));
    }
    let p = h * w;
    if as_ != [cs[0], p, p] {
        return Err(Error::Dimension(format!(
            "refine_cam: attention {as_:?} does not match batch {} at {h}×{w}",
            cs[0]
        )));
    }
    let pooled = if (cs[2], cs[3]) == (h, w) {
        cam
    } else {
        g.adaptive_avg_pool(cam, h, w)?
    };
    let flat = g.flatten_spatial(pooled)?;
    let mixed = g.matmul(flat, attn, false, true)?;
    g.reshape(mixed, &[cs[0], cs[1], h, w])
}

/// Attention refinement followed by min-max normalization (the form the
/// consistency losses consume).
pub fn refine_cam_var<S: Scalar>(
    g: &mut Graph<S>,
    cam: Var,
    attn: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    let mixed = mix_with_attention(g, cam, attn, h, w)?;
    normalize_var(g, mixed)
}

/// Eager refinement of a stack: pool, mix, normalize, suppress non-maxima.
pub fn refine_cam<S: Scalar>(cs: &CamStack<S>, attn: &Tensor<S>) -> Result<CamStack<S>> {
    let s = attn.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::Dimension(format!("refine_cam: attention shape {s:?}")));
    }
    let side = (s[1] as f64).sqrt().round() as usize;
    let (h, w) = if side * side == s[1] {
        (side, side)
    } else {
        return Err(Error::Dimension(format!(
            "refine_cam: cannot infer a square resolution from P={}",
            s[1]
        )));
    };
    let mut g = Graph::new();
    let cam = g.constant(cs.maps.clone());
    let a = g.constant(attn.clone());
    let mixed = mix_with_attention(&mut g, cam, a, h, w)?;
    let stack = CamStack::new(g.value(mixed).clone(), cs.class_names.clone())?;
    Ok(suppress_non_max(&normalize_cam(&stack)))
}

/// Keep only the largest class activation at every position (ties go to
/// the lowest class index); all others become zero.
pub fn suppress_non_max<S: Scalar>(cs: &CamStack<S>) -> CamStack<S> {
    let (n, c, h, w) = cs.dims();
    let p = h * w;
    let src = cs.maps.data();
    let mut out = vec![S::zero(); src.len()];
    for ni in 0..n {
        for pos in 0..p {
            let at = |ci: usize| (ni * c + ci) * p + pos;
            let mut best = 0;
            for ci in 1..c {
                if src[at(ci)] > src[at(best)] {
                    best = ci;
                }
            }
            out[at(best)] = src[at(best)];
        }
    }
    CamStack {
        maps: Tensor::new(cs.maps.shape(), out).expect("same shape"),
        class_names: cs.class_names.clone(),
    }
}
