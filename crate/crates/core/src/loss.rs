//! Classification, consistency and cross-consistency objectives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Distance used by the consistency terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamDistance {
    /// Mean absolute difference.
    #[default]
    MeanAbs,
    /// Mean squared difference.
    MeanSquare,
}

/// Which branch pair forms the second cross-consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossPairing {
    /// `‖CAM1 − CAM3‖ + ‖CAM3 − CAM2‖`
    #[default]
    ThreeTwo,
    /// `‖CAM1 − CAM3‖ + ‖CAM1 − CAM2‖`
    OneTwo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossOptions {
    pub distance: CamDistance,
    pub cross_pairing: CrossPairing,
    pub use_consistency: bool,
    pub use_cross: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            distance: CamDistance::MeanAbs,
            cross_pairing: CrossPairing::ThreeTwo,
            use_consistency: true,
            use_cross: true,
        }
    }
}

/// Scalar loss components of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls_1: f64,
    pub l_cls_2: f64,
    pub l_cls_3: f64,
    pub l_cls_total: f64,
    pub l_cons: f64,
    pub l_cross: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite())
    }

    pub fn components(&self) -> [f64; 7] {
        [
            self.l_cls_1,
            self.l_cls_2,
            self.l_cls_3,
            self.l_cls_total,
            self.l_cons,
            self.l_cross,
            self.total,
        ]
    }

    /// Component-wise mean of several breakdowns.
    pub fn mean_of(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            l_cls_1: avg(|b| b.l_cls_1),
            l_cls_2: avg(|b| b.l_cls_2),
            l_cls_3: avg(|b| b.l_cls_3),
            l_cls_total: avg(|b| b.l_cls_total),
            l_cons: avg(|b| b.l_cons),
            l_cross: avg(|b| b.l_cross),
            total: avg(|b| b.total),
        }
    }
}

/// Mean over samples and classes of `−[y·log σ(x) + (1−y)·log(1−σ(x))]`.
pub fn multilabel_soft_margin<S: Scalar>(g: &mut Graph<S>, logits: Var, y: &Tensor<S>) -> Result<Var> {
    g.multilabel_soft_margin(logits, y)
}

/// Sum of the per-branch soft-margin losses. Returns the total and the
/// individual terms in branch order.
pub fn classification_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: &[Var],
    y: &Tensor<S>,
) -> Result<(Var, Vec<Var>)> {
    if logits.is_empty() {
        return Err(Error::Argument("classification_loss: no branches".into()));
    }
    let terms = logits
        .iter()
        .map(|&l| multilabel_soft_margin(g, l, y))
        .collect::<Result<Vec<_>>>()?;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok((total, terms))
}

/// Distance between two equally shaped CAM stacks.
pub fn consistency_loss<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var, distance: CamDistance) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Dimension(format!(
            "consistency_loss: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let diff = g.sub(a, b)?;
    let mag = match distance {
        CamDistance::MeanAbs => g.abs(diff)?,
        CamDistance::MeanSquare => g.square(diff)?,
    };
    g.mean(mag)
}

/// `‖CAM1 − CAM3‖ + ‖CAM3 − CAM2‖` (or the `OneTwo` variant).
pub fn cross_loss<S: Scalar>(
    g: &mut Graph<S>,
    cam1: Var,
    cam2: Var,
    cam3: Var,
    pairing: CrossPairing,
    distance: CamDistance,
) -> Result<Var> {
    let first = consistency_loss(g, cam1, cam3, distance)?;
    let second = match pairing {
        CrossPairing::ThreeTwo => consistency_loss(g, cam3, cam2, distance)?,
        CrossPairing::OneTwo => consistency_loss(g, cam1, cam2, distance)?,
    };
    g.add(first, second)
}

/// Graph handles of every loss component.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub cls_terms: Vec<Var>,
    pub cls_total: Var,
    pub cons: Option<Var>,
    pub cross: Option<Var>,
}

/// Unweighted sum `L_cls + L_cons + L_cross`, accumulated left to right.
pub fn total_loss<S: Scalar>(g: &mut Graph<S>, parts: &LossParts) -> Result<(Var, LossBreakdown)> {
    let mut total = parts.cls_total;
    if let Some(c) = parts.cons {
        total = g.add(total, c)?;
    }
    if let Some(c) = parts.cross {
        total = g.add(total, c)?;
    }
    let read = |g: &Graph<S>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
    let term = |i: usize| read(g, parts.cls_terms.get(i).copied());
    let breakdown = LossBreakdown {
        l_cls_1: term(0),
        l_cls_2: term(1),
        l_cls_3: term(2),
        l_cls_total: read(g, Some(parts.cls_total)),
        l_cons: read(g, parts.cons),
        l_cross: read(g, parts.cross),
        total: read(g, Some(total)),
    };
    Ok((total, breakdown))
}
