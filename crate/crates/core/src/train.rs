//! Joint SGD over all branches, epoch loop and checkpointing.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{ArrayData, Checkpoint};
use crate::data::{augment, collate, derive_rng, AugmentConfig, Batch, LabeledPatch};
use crate::error::{Error, Result};
use crate::loss::{LossBreakdown, LossOptions};
use crate::model::{CvfcModel, ModelConfig};
use crate::params::Mode;
use crate::tensor::{Scalar, Tensor};

const SHUFFLE_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr · (1 − t/T)^power` over all `T` steps.
    Poly { power: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    /// Expected input side; `None` accepts whatever the data has.
    pub image_size: Option<usize>,
    pub model: ModelConfig,
    pub loss: LossOptions,
    pub augment: AugmentConfig,
    pub bg_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 100,
            lr: 0.006,
            weight_decay: 0.01,
            momentum: 0.0,
            lr_schedule: LrSchedule::Constant,
            batch_size: 8,
            image_size: None,
            model: ModelConfig::default(),
            loss: LossOptions::default(),
            augment: AugmentConfig::default(),
            bg_threshold: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.bg_threshold) {
            return bad(format!("bg_threshold must lie in [0, 1), got {}", self.bg_threshold));
        }
        if let LrSchedule::Poly { power } = self.lr_schedule {
            if !(power > 0.0 && power.is_finite()) {
                return bad(format!("poly power must be positive, got {power}"));
            }
        }
        self.model.validate()
    }

    /// Hash of everything except `epochs`, so a run may be extended on resume.
    pub fn resume_hash(&self) -> u64 {
        let mut c = self.clone();
        c.epochs = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        crc32fast::hash(&json) as u64
    }
}

/// `w ← w − lr·(g + wd·w)`
pub fn sgd_step<S: Scalar>(w: &mut Tensor<S>, g: &Tensor<S>, lr: f64, weight_decay: f64) -> Result<()> {
    if w.shape() != g.shape() {
        return Err(Error::Dimension(format!(
            "sgd_step: parameter {:?} vs gradient {:?}",
            w.shape(),
            g.shape()
        )));
    }
    let (lr, wd) = (S::from_f64(lr), S::from_f64(weight_decay));
    for (w, &g) in w.data_mut().iter_mut().zip(g.data()) {
        *w = *w - lr * (g + wd * *w);
    }
    Ok(())
}

/// Heavy-ball variant: `v ← μ·v + g + wd·w`, `w ← w − lr·v`.
fn momentum_step<S: Scalar>(w: &mut Tensor<S>, v: &mut Tensor<S>, g: &Tensor<S>, lr: f64, wd: f64, mu: f64) {
    let (lr, wd, mu) = (S::from_f64(lr), S::from_f64(wd), S::from_f64(mu));
    for ((w, v), &g) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
        *v = mu * *v + g + wd * *w;
        *w = *w - lr * *v;
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }
}

/// Model plus optimiser state.
#[derive(Debug, Clone)]
pub struct Trainer<S> {
    pub cfg: TrainConfig,
    pub model: CvfcModel<S>,
    velocity: Vec<Option<Tensor<S>>>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps over the whole run.
    pub step: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = CvfcModel::build(&cfg.model, cfg.seed)?;
        let velocity = vec![None; model.store.len()];
        Ok(Trainer {
            cfg,
            model,
            velocity,
            epoch: 0,
            step: 0,
        })
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.cfg.batch_size)
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.cfg.lr_schedule {
            LrSchedule::Constant => self.cfg.lr,
            LrSchedule::Poly { power } => {
                let frac = (step as f64 / total.max(1) as f64).min(1.0);
                self.cfg.lr * (1.0 - frac).powf(power)
            }
        }
    }

    /// Forward, backward and one joint parameter update on every
    /// trainable tensor.
    pub fn co_train_step(&mut self, batch: &Batch<S>, lr: f64) -> Result<LossBreakdown> {
        let lg = self
            .model
            .loss_graph(&batch.images, &batch.labels, &self.cfg.loss, Mode::Train)?;
        if !lg.breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch + 1,
                step: self.step + 1,
                breakdown: Box::new(lg.breakdown),
            });
        }
        let mut grads = lg.graph.backward(lg.loss)?;
        let ids = self.model.store.trainable_ids();
        let mut updates = Vec::with_capacity(ids.len());
        for id in ids {
            let entry = self.model.store.get(id);
            let g = grads
                .take(lg.bound.var(id))
                .unwrap_or_else(|| Tensor::zeros(entry.value.shape()));
            if !g.is_finite() {
                return Err(Error::NonFiniteGrad {
                    name: entry.name.clone(),
                });
            }
            updates.push((id, g));
        }
        let (wd, mu) = (self.cfg.weight_decay, self.cfg.momentum);
        for (id, g) in updates {
            let w = self.model.store.value_mut(id);
            if mu > 0.0 {
                let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
                momentum_step(w, v, &g, lr, wd, mu);
            } else {
                sgd_step(w, &g, lr, wd)?;
            }
        }
        self.model.apply_bn_updates(&lg.bn_updates);
        self.step += 1;
        Ok(lg.breakdown)
    }

    /// Sample order for an epoch (0-based), a pure function of the seed.
    pub fn epoch_order(&self, epoch: usize, len: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut derive_rng(self.cfg.seed, SHUFFLE_STREAM, epoch as u64));
        order
    }

    fn check_dataset(&self, patches: &[LabeledPatch]) -> Result<()> {
        if patches.len() < self.cfg.batch_size {
            return Err(Error::Argument(format!(
                "dataset has {} patches, fewer than batch_size {}",
                patches.len(),
                self.cfg.batch_size
            )));
        }
        let classes = self.cfg.model.class_names.len();
        let stride = self.cfg.model.stride_multiple()?;
        let (h, w) = (patches[0].height(), patches[0].width());
        for p in patches {
            p.validate(classes)?;
            if (p.height(), p.width()) != (h, w) {
                return Err(Error::Dimension(format!("patch `{}` differs in size", p.id)));
            }
            if !p.label.contains(&1) {
                return Err(Error::Argument(format!("patch `{}` has no positive class", p.id)));
            }
        }
        if let Some(s) = self.cfg.image_size {
            if (h, w) != (s, s) {
                return Err(Error::Config(format!("image_size {s} but data is {h}×{w}")));
            }
        }
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::Dimension(format!(
                "input {h}×{w} not divisible by backbone stride {stride}"
            )));
        }
        Ok(())
    }

    /// Runs epoch `self.epoch + 1`.
    pub fn train_epoch(&mut self, patches: &[LabeledPatch]) -> Result<EpochLog> {
        self.check_dataset(patches)?;
        let e = self.epoch;
        let order = self.epoch_order(e, patches.len());
        let per_epoch = self.steps_per_epoch(patches.len());
        let total = per_epoch * self.cfg.epochs;
        let mut losses = Vec::with_capacity(per_epoch);
        let mut lr = self.cfg.lr;
        for chunk in order.chunks(self.cfg.batch_size) {
            let augmented: Vec<LabeledPatch> = chunk
                .iter()
                .map(|&i| {
                    let key = ((e as u64) << 32) | i as u64;
                    let mut rng = derive_rng(self.cfg.seed, AUGMENT_STREAM, key);
                    augment(&patches[i], &self.cfg.augment, &mut rng)
                })
                .collect();
            let refs: Vec<&LabeledPatch> = augmented.iter().collect();
            let batch = collate::<S>(&refs)?;
            lr = self.lr_at(self.step, total);
            losses.push(self.co_train_step(&batch, lr)?);
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            steps: losses.len(),
            lr,
            loss: LossBreakdown::mean_of(&losses),
        })
    }

    /// Trains until `cfg.epochs` epochs are complete, reporting each epoch.
    pub fn run(&mut self, patches: &[LabeledPatch], mut on_epoch: impl FnMut(&EpochLog) -> Result<()>) -> Result<()> {
        self.check_dataset(patches)?;
        while self.epoch < self.cfg.epochs {
            let log = self.train_epoch(patches)?;
            on_epoch(&log)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        for (id, e) in self.model.store.iter() {
            c.push_tensor(&e.name, &e.value)?;
            if let Some(v) = &self.velocity[id.index()] {
                c.push_tensor(format!("optim.velocity.{}", e.name), v)?;
            }
        }
        c.push(
            "train.state",
            vec![3],
            ArrayData::U64(vec![self.epoch as u64, self.step as u64, self.cfg.resume_hash()]),
        )?;
        // every random draw derives from (seed, epoch), so this is the RNG state
        c.push("train.rng", vec![2], ArrayData::U64(vec![self.cfg.seed, self.epoch as u64]))?;
        let json = serde_json::to_vec(&self.cfg).expect("config serializes");
        c.push("train.config", vec![json.len()], ArrayData::U8(json))?;
        Ok(c)
    }

    /// Restores a trainer from its own checkpoint.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_slice(c.bytes("train.config")?)
            .map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
        Self::resume(cfg, c)
    }

    /// Restores state from `c` under `cfg`, which may differ from the
    /// saved configuration only in `epochs`.
    pub fn resume(cfg: TrainConfig, c: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg)?;
        let state = c.u64s("train.state")?;
        if state.len() != 3 {
            return Err(Error::CorruptCheckpoint("train.state must hold 3 values".into()));
        }
        if state[2] != t.cfg.resume_hash() {
            return Err(Error::Config(
                "configuration differs from the checkpoint's (only epochs may change)".into(),
            ));
        }
        t.epoch = state[0] as usize;
        t.step = state[1] as usize;
        t.load_params(c)?;
        for (id, e) in t.model.store.iter() {
            let name = format!("optim.velocity.{}", e.name);
            if c.get(&name).is_some() {
                t.velocity[id.index()] = Some(c.tensor::<S>(&name)?);
            }
        }
        Ok(t)
    }

    fn load_params(&mut self, c: &Checkpoint) -> Result<()> {
        let entries: Vec<(crate::params::ParamId, String)> =
            self.model.store.iter().map(|(id, e)| (id, e.name.clone())).collect();
        for (id, name) in entries {
            let v = c.tensor::<S>(&name)?;
            self.model
                .store
                .set(id, v)
                .map_err(|e| Error::CorruptCheckpoint(format!("`{name}`: {e}")))?;
        }
        Ok(())
    }
}

/// Model described by a checkpoint, with its stored parameters.
pub fn load_model<S: Scalar>(c: &Checkpoint) -> Result<(TrainConfig, CvfcModel<S>)> {
    let t = Trainer::<S>::from_checkpoint(c)?;
    Ok((t.cfg, t.model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    #[test]
    fn sgd_examples() {
        let mut w = Tensor::<f64>::scalar(1.0);
        sgd_step(&mut w, &Tensor::scalar(0.5), 0.1, 0.0).unwrap();
        assert!((w.item() - 0.95).abs() < 1e-15);
        let mut w = Tensor::<f64>::scalar(1.0);
        sgd_step(&mut w, &Tensor::scalar(0.5), 0.1, 0.01).unwrap();
        assert!((w.item() - 0.949).abs() < 1e-15);
        let mut w = Tensor::<f64>::scalar(0.7);
        sgd_step(&mut w, &Tensor::scalar(0.0), 0.1, 0.0).unwrap();
        assert_eq!(w.item(), 0.7);
        assert!(sgd_step(&mut w, &Tensor::zeros(&[2]), 0.1, 0.0).is_err());
    }

    #[test]
    fn weight_decay_contracts_geometrically() {
        let mut w = Tensor::<f64>::scalar(2.0);
        let (lr, wd) = (0.006, 0.01);
        for _ in 0..1000 {
            sgd_step(&mut w, &Tensor::scalar(0.0), lr, wd).unwrap();
        }
        let expect = 2.0 * (1.0 - lr * wd).powi(1000);
        assert!((w.item() - expect).abs() < 1e-9);
    }

    #[test]
    fn zero_momentum_matches_plain_sgd() {
        let mut a = Tensor::<f64>::from_f64(&[2], &[1.0, -2.0]).unwrap();
        let mut b = a.clone();
        let mut v = Tensor::zeros(&[2]);
        let g = Tensor::from_f64(&[2], &[0.3, 0.1]).unwrap();
        sgd_step(&mut a, &g, 0.1, 0.01).unwrap();
        momentum_step(&mut b, &mut v, &g, 0.1, 0.01, 0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        for f in [
            |c: &mut TrainConfig| c.epochs = 0,
            |c: &mut TrainConfig| c.lr = 0.0,
            |c: &mut TrainConfig| c.batch_size = 0,
            |c: &mut TrainConfig| c.bg_threshold = 1.0,
        ] {
            let mut c = TrainConfig::default();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
        TrainConfig::default().validate().unwrap();
        let parsed: TrainConfig = serde_json::from_str(r#"{"seed": 3, "epochs": 2}"#).unwrap();
        assert_eq!(parsed.lr, 0.006);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"sed": 3}"#).is_err());
    }

    #[test]
    fn optimizer_covers_every_trainable_parameter() {
        let t = Trainer::<f32>::new(TrainConfig::default()).unwrap();
        let trainable = t.model.store.trainable_ids();
        let count = t.model.store.iter().filter(|(_, e)| e.trainable).count();
        assert_eq!(trainable.len(), count);
        let mut seen = trainable.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), trainable.len());
    }

    #[test]
    fn checkpoint_round_trip_restores_state() {
        let patches = synth_generate(5, 4, 16, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            momentum: 0.5,
            ..TrainConfig::default()
        };
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        t.train_epoch(&patches).unwrap();
        let c = t.to_checkpoint().unwrap();
        let back = Trainer::<f32>::from_checkpoint(&c).unwrap();
        assert_eq!(back.epoch, 1);
        assert_eq!(back.to_checkpoint().unwrap().encode(), c.encode());
    }

    #[test]
    fn resume_rejects_changed_config() {
        let t = Trainer::<f32>::new(TrainConfig::default()).unwrap();
        let c = t.to_checkpoint().unwrap();
        let other = TrainConfig {
            lr: 0.1,
            ..TrainConfig::default()
        };
        assert!(matches!(Trainer::<f32>::resume(other, &c), Err(Error::Config(_))));
        let longer = TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        };
        Trainer::<f32>::resume(longer, &c).unwrap();
    }

    #[test]
    fn too_small_dataset_rejected() {
        let patches = synth_generate(5, 3, 16, 3).unwrap();
        let mut t = Trainer::<f32>::new(TrainConfig::default()).unwrap();
        assert!(matches!(t.train_epoch(&patches), Err(Error::Argument(_))));
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let t = Trainer::<f32>::new(TrainConfig::default()).unwrap();
        let a = t.epoch_order(0, 10);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a, t.epoch_order(0, 10));
        assert_ne!(a, t.epoch_order(1, 10));
    }
}
