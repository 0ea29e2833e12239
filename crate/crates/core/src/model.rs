//! The assembled three-branch network: backbones, CAM heads, the shared
//! attention matrix from the middle branch, refinement and the objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_matrix, mix_with_attention, QKProjection, QkInit, QkScale};
use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::cam::{integrate_taps, normalize_cam, normalize_var, CamHead, CamStack};
use crate::error::{Error, Result};
use crate::eval::{pseudo_mask, PseudoMask};
use crate::loss::{
    classification_loss, consistency_loss, cross_loss, total_loss, LossBreakdown, LossOptions,
    LossParts,
};
use crate::params::{BnUpdate, Ctx, Mode, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// A branch backbone given either by preset name or in full.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BranchSpec {
    Preset(String),
    Custom(BackboneConfig),
}

impl BranchSpec {
    pub fn resolve(&self) -> Result<BackboneConfig> {
        match self {
            BranchSpec::Preset(name) => BackboneConfig::from_preset(name),
            BranchSpec::Custom(cfg) => {
                cfg.validate()?;
                Ok(cfg.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub class_names: Vec<String>,
    /// Three entries build the co-trained model; one entry builds a plain
    /// single-branch CAM network.
    pub branches: Vec<BranchSpec>,
    /// Attention grid `[h, w]`; defaults to branch 2's deepest tap.
    pub attention_size: Option<[usize; 2]>,
    /// Query/key dimension; defaults to the integrated channel count.
    pub proj_dim: Option<usize>,
    pub qk_init: QkInit,
    pub qk_scale: QkScale,
    /// Pool classification logits from the attention-mixed CAMs instead
    /// of the raw ones.
    pub cls_from_refined: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            class_names: vec!["tumor".into(), "stroma".into(), "normal".into()],
            branches: ["mini38", "mini50", "mini38"]
                .iter()
                .map(|s| BranchSpec::Preset(s.to_string()))
                .collect(),
            attention_size: None,
            proj_dim: None,
            qk_init: QkInit::default(),
            qk_scale: QkScale::default(),
            cls_from_refined: false,
        }
    }
}

impl ModelConfig {
    pub fn single_branch(preset: &str, class_names: Vec<String>) -> Self {
        ModelConfig {
            class_names,
            branches: vec![BranchSpec::Preset(preset.into())],
            ..ModelConfig::default()
        }
    }

    pub fn is_cvfc(&self) -> bool {
        self.branches.len() == 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Config("class_names must not be empty".into()));
        }
        if !(self.branches.len() == 3 || self.branches.len() == 1) {
            return Err(Error::Config(format!(
                "expected 3 branches (or 1 for a single-branch model), got {}",
                self.branches.len()
            )));
        }
        for b in &self.branches {
            b.resolve()?;
        }
        if let Some([h, w]) = self.attention_size {
            if h == 0 || w == 0 {
                return Err(Error::Config("attention_size must be positive".into()));
            }
        }
        if self.proj_dim == Some(0) {
            return Err(Error::Config("proj_dim must be positive".into()));
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn stride_multiple(&self) -> Result<usize> {
        let mut m = 1;
        for b in &self.branches {
            let s = b.resolve()?.stride_product();
            m = lcm(m, s);
        }
        Ok(m)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

#[derive(Debug, Clone)]
struct Branch {
    backbone: Backbone,
    head: CamHead,
}

/// Parameters plus structure of the whole network.
#[derive(Debug, Clone)]
pub struct CvfcModel<S> {
    cfg: ModelConfig,
    pub store: ParamStore<S>,
    branches: Vec<Branch>,
    qk: Option<QKProjection>,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Per-branch `[N,C]` classification logits.
    pub logits: Vec<Var>,
    /// Per-branch raw `[N,C,H,W]` CAMs.
    pub cams: Vec<Var>,
    /// Per-branch refined, normalized `[N,C,h,w]` CAMs (co-trained model only).
    pub refined: Vec<Var>,
    /// `[N,P,P]` attention matrix (co-trained model only).
    pub attention: Option<Var>,
}

/// Eager results of an inference pass.
#[derive(Debug, Clone)]
pub struct Inference<S> {
    /// Normalized, unsuppressed CAMs the pseudo-masks are built from.
    pub cams: CamStack<S>,
    /// `[N,C]` sigmoid scores of the mask-producing branch.
    pub scores: Tensor<S>,
}

/// Which classes may appear in a pseudo-mask.
#[derive(Debug, Clone, Copy)]
pub enum ClassGate<'a, S> {
    /// Every class competes.
    All,
    /// Classes whose predicted score is below 0.5 are removed.
    Predicted,
    /// Image-level multi-hot labels `[N,C]` select the classes.
    Labels(&'a Tensor<S>),
}

impl<S: Scalar> CvfcModel<S> {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let classes = cfg.class_names.len();
        let mut store = ParamStore::new();
        let mut branches = Vec::with_capacity(cfg.branches.len());
        for (i, spec) in cfg.branches.iter().enumerate() {
            let bcfg = spec.resolve()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let prefix = format!("b{}", i + 1);
            let backbone = Backbone::build(&bcfg, &prefix, &mut store, &mut rng)?;
            let head = CamHead::build(&mut store, &prefix, bcfg.tap_channels(), classes, &mut rng);
            branches.push(Branch { backbone, head });
        }
        let qk = if cfg.is_cvfc() {
            let cf = branches[1].head.in_channels();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(100);
            Some(QKProjection::build(
                &mut store,
                "attn",
                cf,
                cfg.proj_dim.unwrap_or(cf),
                cfg.qk_init,
                &mut rng,
            ))
        } else {
            None
        };
        Ok(CvfcModel {
            cfg: cfg.clone(),
            store,
            branches,
            qk,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn class_names(&self) -> &[String] {
        &self.cfg.class_names
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn backbone(&self, branch: usize) -> &Backbone {
        &self.branches[branch].backbone
    }

    pub fn cam_head(&self, branch: usize) -> &CamHead {
        &self.branches[branch].head
    }

    pub fn qk_projection(&self) -> Option<&QKProjection> {
        self.qk.as_ref()
    }

    /// Trainable parameters owned by one branch (backbone and CAM head).
    pub fn branch_param_ids(&self, branch: usize) -> Vec<ParamId> {
        let prefix = format!("b{}.", branch + 1);
        self.store
            .ids_with_prefix(&prefix)
            .into_iter()
            .filter(|&id| self.store.get(id).trainable)
            .collect()
    }

    /// Attention grid for a given input size.
    pub fn attention_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if let Some([ah, aw]) = self.cfg.attention_size {
            return Ok((ah, aw));
        }
        let b = self.branches.get(1).unwrap_or(&self.branches[0]);
        let shapes = b.backbone.config().tap_shapes(h, w);
        let (_, _, th, tw) = shapes.last().cloned().expect("at least one tap");
        Ok((th, tw))
    }

    /// Run every branch on `images: [N,3,H,W]`; when `attention_override`
    /// is given it replaces the computed attention matrix.
    pub fn forward_all(
        &self,
        ctx: &mut Ctx<'_, S>,
        images: Var,
        attention_override: Option<Var>,
    ) -> Result<ForwardOutput> {
        let mut feats = Vec::with_capacity(self.branches.len());
        let mut cams = Vec::with_capacity(self.branches.len());
        let mut logits = Vec::with_capacity(self.branches.len());
        for (i, b) in self.branches.iter().enumerate() {
            let tag = |e: Error| match e {
                Error::Dimension(m) => Error::Dimension(format!("branch {}: {m}", i + 1)),
                other => other,
            };
            let taps = b.backbone.forward(ctx, images).map_err(tag)?;
            let feat = integrate_taps(ctx.g, &taps).map_err(tag)?;
            let out = b.head.forward(ctx, feat).map_err(tag)?;
            feats.push(feat);
            cams.push(out.maps);
            logits.push(out.logits);
        }
        let Some(qk) = &self.qk else {
            return Ok(ForwardOutput {
                logits,
                cams,
                refined: Vec::new(),
                attention: None,
            });
        };

        let s = ctx.g.shape(images).to_vec();
        let (ah, aw) = self.attention_size(s[2], s[3])?;
        let attention = match attention_override {
            Some(a) => a,
            None => {
                let f2 = feats[1];
                let fs = ctx.g.shape(f2).to_vec();
                let pooled = if (fs[2], fs[3]) == (ah, aw) {
                    f2
                } else {
                    ctx.g.adaptive_avg_pool(f2, ah, aw)?
                };
                let (q, k) = qk.forward(ctx, pooled)?;
                let factor = self.cfg.qk_scale.factor(qk.proj_dim());
                let q = if factor == 1.0 { q } else { ctx.g.scale(q, factor)? };
                attention_matrix(ctx.g, q, k)?
            }
        };
        let mut refined = Vec::with_capacity(3);
        for (i, &cam) in cams.iter().enumerate() {
            let mixed = mix_with_attention(ctx.g, cam, attention, ah, aw)?;
            if self.cfg.cls_from_refined {
                let pooled = ctx.g.adaptive_avg_pool(mixed, 1, 1)?;
                logits[i] = ctx.g.reshape(pooled, &[s[0], self.cfg.class_names.len()])?;
            }
            refined.push(normalize_var(ctx.g, mixed)?);
        }
        Ok(ForwardOutput {
            logits,
            cams,
            refined,
            attention: Some(attention),
        })
    }

    /// Assemble the training objective from a forward pass.
    pub fn objective(
        &self,
        g: &mut Graph<S>,
        out: &ForwardOutput,
        labels: &Tensor<S>,
        opts: &LossOptions,
    ) -> Result<(Var, LossBreakdown)> {
        let (cls_total, cls_terms) = classification_loss(g, &out.logits, labels)?;
        let (mut cons, mut cross) = (None, None);
        if out.refined.len() == 3 {
            let (r1, r2, r3) = (out.refined[0], out.refined[1], out.refined[2]);
            if opts.use_consistency {
                cons = Some(consistency_loss(g, r1, r3, opts.distance)?);
            }
            if opts.use_cross {
                cross = Some(cross_loss(g, r1, r2, r3, opts.cross_pairing, opts.distance)?);
            }
        }
        total_loss(
            g,
            &LossParts {
                cls_terms,
                cls_total,
                cons,
                cross,
            },
        )
    }

    /// One forward pass plus objective on a fresh graph. Returns the graph,
    /// the loss handle, the breakdown and pending batch-norm updates.
    pub fn loss_graph(
        &self,
        images: &Tensor<S>,
        labels: &Tensor<S>,
        opts: &LossOptions,
        mode: Mode,
    ) -> Result<LossGraph<S>> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let x = g.constant(images.clone());
        let mut ctx = Ctx::new(&mut g, &self.store, &bound, mode);
        let out = self.forward_all(&mut ctx, x, None)?;
        let bn_updates = std::mem::take(&mut ctx.bn_updates);
        let (loss, breakdown) = self.objective(&mut g, &out, labels, opts)?;
        Ok(LossGraph {
            graph: g,
            bound,
            loss,
            breakdown,
            bn_updates,
            output: out,
        })
    }

    /// Eval-mode CAMs used for pseudo-masks: the refined middle branch for
    /// the co-trained model, the raw CAM for a single-branch model.
    pub fn infer(&self, images: &Tensor<S>) -> Result<Inference<S>> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let x = g.constant(images.clone());
        let mut ctx = Ctx::new(&mut g, &self.store, &bound, Mode::Eval);
        let out = self.forward_all(&mut ctx, x, None)?;
        let (maps, logits) = if out.refined.is_empty() {
            (out.cams[0], out.logits[0])
        } else {
            (out.refined[1], out.logits[1])
        };
        let scores = g.sigmoid(logits)?;
        let raw = CamStack::new(g.value(maps).clone(), self.cfg.class_names.clone())?;
        Ok(Inference {
            cams: normalize_cam(&raw),
            scores: g.value(scores).clone(),
        })
    }

    /// Pseudo-masks at the input resolution.
    pub fn infer_pseudo_labels(
        &self,
        images: &Tensor<S>,
        threshold: f64,
        gate: ClassGate<'_, S>,
    ) -> Result<Vec<PseudoMask>> {
        if !(0.0..1.0).contains(&threshold) {
            return Err(Error::Argument(format!(
                "threshold {threshold} outside [0, 1)"
            )));
        }
        let s = images.shape();
        let (h, w) = (s[2], s[3]);
        let inf = self.infer(images)?;
        let gated = apply_gate(&inf.cams, &inf.scores, gate)?;
        let suppressed = crate::attention::suppress_non_max(&gated);
        pseudo_mask(&suppressed, threshold, (h, w))
    }

    /// Apply pending running-statistic updates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<S>]) {
        for u in updates {
            u.apply(&mut self.store);
        }
    }
}

/// Result of [`CvfcModel::loss_graph`].
pub struct LossGraph<S> {
    pub graph: Graph<S>,
    pub bound: crate::params::Bindings,
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub bn_updates: Vec<BnUpdate<S>>,
    pub output: ForwardOutput,
}

fn apply_gate<S: Scalar>(cams: &CamStack<S>, scores: &Tensor<S>, gate: ClassGate<'_, S>) -> Result<CamStack<S>> {
    let (n, c, h, w) = cams.dims();
    let keep: Vec<bool> = match gate {
        ClassGate::All => return Ok(cams.clone()),
        ClassGate::Predicted => scores.data().iter().map(|&s| s.as_f64() >= 0.5).collect(),
        ClassGate::Labels(l) => {
            l.expect_shape("class gate labels", &[n, c])?;
            l.data().iter().map(|&v| v.as_f64() > 0.5).collect()
        }
    };
    let mut out = cams.clone();
    for (plane, &k) in out.maps.data_mut().chunks_mut(h * w).zip(&keep) {
        if !k {
            plane.iter_mut().for_each(|v| *v = S::zero());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::random_images;
    use crate::params::Mode;

    fn labels() -> Tensor<f32> {
        Tensor::from_f64(&[2, 3], &[1., 0., 1., 0., 1., 0.]).unwrap()
    }

    #[test]
    fn forward_shapes() {
        let model = CvfcModel::<f32>::build(&ModelConfig::default(), 7).unwrap();
        let x = random_images::<f32>(2, 32, 32, 1);
        let lg = model.loss_graph(&x, &labels(), &LossOptions::default(), Mode::Train).unwrap();
        let g = &lg.graph;
        for &r in &lg.output.refined {
            assert_eq!(g.shape(r), &[2, 3, 4, 4]);
        }
        assert_eq!(g.shape(lg.output.attention.unwrap()), &[2, 16, 16]);
        for &l in &lg.output.logits {
            assert_eq!(g.shape(l), &[2, 3]);
        }
        assert!(lg.breakdown.is_finite());
    }

    #[test]
    fn branch_parameters_are_disjoint() {
        let model = CvfcModel::<f32>::build(&ModelConfig::default(), 7).unwrap();
        let sets: Vec<Vec<ParamId>> = (0..3).map(|i| model.branch_param_ids(i)).collect();
        for i in 0..3 {
            assert!(!sets[i].is_empty());
            for j in i + 1..3 {
                assert!(sets[i].iter().all(|p| !sets[j].contains(p)));
            }
        }
    }

    #[test]
    fn dimension_errors_name_the_branch() {
        let model = CvfcModel::<f32>::build(&ModelConfig::default(), 7).unwrap();
        let x = random_images::<f32>(1, 20, 20, 1);
        let y = Tensor::from_f64(&[1, 3], &[1., 0., 0.]).unwrap();
        let err = model.loss_graph(&x, &y, &LossOptions::default(), Mode::Eval).err().unwrap();
        assert!(err.to_string().contains("branch 1"), "{err}");
    }

    #[test]
    fn threshold_must_be_below_one() {
        let model = CvfcModel::<f32>::build(&ModelConfig::default(), 7).unwrap();
        let x = random_images::<f32>(1, 16, 16, 1);
        assert!(matches!(
            model.infer_pseudo_labels(&x, 1.0, ClassGate::All),
            Err(Error::Argument(_))
        ));
        let masks = model.infer_pseudo_labels(&x, 0.3, ClassGate::All).unwrap();
        assert_eq!((masks[0].height, masks[0].width), (16, 16));
        let again = model.infer_pseudo_labels(&x, 0.3, ClassGate::All).unwrap();
        assert_eq!(masks, again);
    }

    #[test]
    fn invalid_model_configs() {
        let mut cfg = ModelConfig::default();
        cfg.branches.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.class_names.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.branches[0] = BranchSpec::Preset("mini99".into());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_accepts_presets_and_custom_backbones() {
        let json = r#"{"class_names":["a","b"],"branches":["mini38",{"stem_channels":4,
            "stages":[{"name":"s1","blocks":1,"out_channels":4,"stride":2,"block_kind":"basic"},
                      {"name":"s2","blocks":1,"out_channels":4,"stride":2,"block_kind":"bottleneck"},
                      {"name":"s3","blocks":1,"out_channels":8,"stride":1,"block_kind":"basic"}],
            "tap_names":["s2","s3"]},"mini38"]}"#;
        let cfg: ModelConfig = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        assert!(matches!(cfg.branches[1], BranchSpec::Custom(_)));
        assert_eq!(cfg.stride_multiple().unwrap(), 8);
    }
}
