//! Depth-configurable residual feature extractors with named tap stages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{BnUpdate, Ctx, Mode, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    pub blocks: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub block_kind: BlockKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    pub tap_names: Vec<String>,
}

impl BackboneConfig {
    fn preset(kind: BlockKind, names: [&str; 3]) -> Self {
        let stages = names
            .iter()
            .zip([32, 64, 128])
            .map(|(name, out_channels)| StageConfig {
                name: name.to_string(),
                blocks: 2,
                out_channels,
                stride: 2,
                block_kind: kind,
            })
            .collect();
        BackboneConfig {
            stem_channels: 16,
            stages,
            tap_names: names.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Basic-block network tapped at `conv4`, `conv5`, `conv6`.
    pub fn mini38() -> Self {
        Self::preset(BlockKind::Basic, ["conv4", "conv5", "conv6"])
    }

    /// Bottleneck network tapped at `c2`, `c3`, `c4`.
    pub fn mini50() -> Self {
        Self::preset(BlockKind::Bottleneck, ["c2", "c3", "c4"])
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        match name {
            "mini38" => Ok(Self::mini38()),
            "mini50" => Ok(Self::mini50()),
            other => Err(Error::Config(format!("unknown backbone preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() < 3 {
            return Err(Error::Config(format!(
                "backbone needs at least 3 stages, got {}",
                self.stages.len()
            )));
        }
        if self.stem_channels == 0 {
            return Err(Error::Config("stem_channels must be ≥ 1".into()));
        }
        for s in &self.stages {
            if s.stride == 0 || s.blocks == 0 || s.out_channels == 0 {
                return Err(Error::Config(format!(
                    "stage `{}` needs stride, blocks and out_channels ≥ 1",
                    s.name
                )));
            }
            if s.block_kind == BlockKind::Bottleneck && s.out_channels < 2 {
                return Err(Error::Config(format!(
                    "bottleneck stage `{}` needs at least 2 channels",
                    s.name
                )));
            }
        }
        if self.tap_names.is_empty() {
            return Err(Error::Config("at least one tap is required".into()));
        }
        for t in &self.tap_names {
            if !self.stages.iter().any(|s| &s.name == t) {
                return Err(Error::Config(format!("tap `{t}` names no stage")));
            }
        }
        Ok(())
    }

    pub fn stride_product(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    /// `(channels, height, width)` of every tap for a given input size.
    pub fn tap_shapes(&self, h: usize, w: usize) -> Vec<(String, usize, usize, usize)> {
        let (mut h, mut w) = (h, w);
        let mut out = Vec::new();
        for s in &self.stages {
            h = h.div_ceil(s.stride);
            w = w.div_ceil(s.stride);
            if self.tap_names.contains(&s.name) {
                out.push((s.name.clone(), s.out_channels, h, w));
            }
        }
        out
    }

    pub fn tap_channels(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| self.tap_names.contains(&s.name))
            .map(|s| s.out_channels)
            .sum()
    }
}

/// Convolution without bias followed by batch norm.
#[derive(Debug, Clone)]
pub(crate) struct ConvBn {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    stride: usize,
    pad: usize,
}

fn he_uniform<S: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<S> {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvBn {
            weight: store.add(format!("{name}.w"), he_uniform(&[cout, cin, k, k], rng), true),
            gamma: store.add(format!("{name}.bn.gamma"), Tensor::ones(&[cout]), true),
            beta: store.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]), true),
            running_mean: store.add(format!("{name}.bn.running_mean"), Tensor::zeros(&[cout]), false),
            running_var: store.add(format!("{name}.bn.running_var"), Tensor::ones(&[cout]), false),
            stride,
            pad: k / 2,
        }
    }

    fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let y = ctx.g.conv2d(x, ctx.p(self.weight), None, self.stride, self.pad)?;
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (out, stats) = ctx.g.batchnorm2d_train(y, gamma, beta)?;
                ctx.bn_updates.push(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    stats,
                });
                Ok(out)
            }
            Mode::Eval => ctx.g.batchnorm2d_frozen(
                y,
                gamma,
                beta,
                ctx.store.value(self.running_mean).data(),
                ctx.store.value(self.running_var).data(),
            ),
        }
    }
}

#[derive(Debug, Clone)]
struct Shortcut {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

/// One residual block: `relu(f(x) + shortcut(x))`.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    body: Vec<ConvBn>,
    shortcut: Option<Shortcut>,
}

impl Block {
    pub(crate) fn build<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        kind: BlockKind,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let body = match kind {
            BlockKind::Basic => vec![
                ConvBn::build(store, &format!("{name}.conv1"), cin, cout, 3, stride, rng),
                ConvBn::build(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            ],
            BlockKind::Bottleneck => {
                let mid = (cout / 2).max(1);
                vec![
                    ConvBn::build(store, &format!("{name}.reduce"), cin, mid, 1, 1, rng),
                    ConvBn::build(store, &format!("{name}.conv"), mid, mid, 3, stride, rng),
                    ConvBn::build(store, &format!("{name}.expand"), mid, cout, 1, 1, rng),
                ]
            }
        };
        let shortcut = (stride != 1 || cin != cout).then(|| Shortcut {
            weight: store.add(
                format!("{name}.shortcut.w"),
                he_uniform(&[cout, cin, 1, 1], rng),
                true,
            ),
            bias: store.add(format!("{name}.shortcut.b"), Tensor::zeros(&[cout]), true),
            stride,
        });
        Block { body, shortcut }
    }

    pub(crate) fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.body.len() - 1;
        for (i, layer) in self.body.iter().enumerate() {
            h = layer.forward(ctx, h)?;
            if i < last {
                h = ctx.g.relu(h)?;
            }
        }
        let skip = match &self.shortcut {
            Some(s) => ctx
                .g
                .conv2d(x, ctx.p(s.weight), Some(ctx.p(s.bias)), s.stride, 0)?,
            None => x,
        };
        let sum = ctx.g.add(h, skip)?;
        ctx.g.relu(sum)
    }

    #[cfg(test)]
    fn final_gamma(&self) -> ParamId {
        self.body.last().expect("non-empty body").gamma
    }
}

/// Residual feature extractor; parameters live in a shared [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    prefix: String,
    stem: ConvBn,
    stages: Vec<Vec<Block>>,
}

/// Named intermediate feature maps, in stage order.
#[derive(Debug, Clone)]
pub struct TapSet {
    pub taps: Vec<(String, Var)>,
}

impl TapSet {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.taps.iter().map(|(_, v)| *v).collect()
    }
}

impl Backbone {
    #[cfg(test)]
    fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.stages.iter().flatten()
    }

    /// Register a backbone's parameters under `prefix` and initialize them
    /// from `rng` (He-uniform conv weights, zero biases, unit BN scale).
    pub fn build<S: Scalar>(
        cfg: &BackboneConfig,
        prefix: &str,
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let stem = ConvBn::build(store, &format!("{prefix}.stem"), 3, cfg.stem_channels, 3, 1, rng);
        let mut cin = cfg.stem_channels;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for s in &cfg.stages {
            let mut blocks = Vec::with_capacity(s.blocks);
            for b in 0..s.blocks {
                let stride = if b == 0 { s.stride } else { 1 };
                let name = format!("{prefix}.{}.{b}", s.name);
                blocks.push(Block::build(
                    store,
                    &name,
                    s.block_kind,
                    cin,
                    s.out_channels,
                    stride,
                    rng,
                ));
                cin = s.out_channels;
            }
            stages.push(blocks);
        }
        Ok(Backbone {
            cfg: cfg.clone(),
            prefix: prefix.to_string(),
            stem,
            stages,
        })
    }

    /// Build into a fresh store seeded from `seed`.
    pub fn standalone<S: Scalar>(cfg: &BackboneConfig, seed: u64) -> Result<(Self, ParamStore<S>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = Self::build(cfg, "backbone", &mut store, &mut rng)?;
        Ok((bb, store))
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Run `x: [N,3,H,W]` through the network, returning every tap.
    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<TapSet> {
        let shape = ctx.g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Dimension(format!(
                "{}: expected [N,3,H,W] input, got {shape:?}",
                self.prefix
            )));
        }
        let sp = self.cfg.stride_product();
        if shape[2] % sp != 0 || shape[3] % sp != 0 {
            return Err(Error::Dimension(format!(
                "{}: input {}×{} not divisible by stride product {sp}",
                self.prefix, shape[2], shape[3]
            )));
        }
        let mut h = self.stem.forward(ctx, x)?;
        h = ctx.g.relu(h)?;
        let mut taps = Vec::new();
        for (stage_cfg, blocks) in self.cfg.stages.iter().zip(&self.stages) {
            for block in blocks {
                h = block.forward(ctx, h)?;
            }
            if self.cfg.tap_names.contains(&stage_cfg.name) {
                taps.push((stage_cfg.name.clone(), h));
            }
        }
        Ok(TapSet { taps })
    }
}

/// Random `[-1, 1)` image batch, handy for smoke tests.
pub fn random_images<S: Scalar>(n: usize, h: usize, w: usize, seed: u64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 3 * h * w)
        .map(|_| S::from_f64(rng.gen_range(-1.0..1.0)))
        .collect();
    Tensor::new(&[n, 3, h, w], data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn run(bb: &Backbone, store: &ParamStore<f32>, x: &Tensor<f32>, mode: Mode) -> Vec<Tensor<f32>> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let mut ctx = Ctx::new(&mut g, store, &bound, mode);
        let taps = bb.forward(&mut ctx, xv).unwrap();
        taps.vars().into_iter().map(|v| g.value(v).clone()).collect()
    }

    #[test]
    fn mini38_tap_shapes() {
        let (bb, store) = Backbone::standalone::<f32>(&BackboneConfig::mini38(), 1).unwrap();
        let x = random_images(1, 32, 32, 3);
        let taps = run(&bb, &store, &x, Mode::Eval);
        assert_eq!(taps[0].shape(), &[1, 32, 16, 16]);
        assert_eq!(taps[1].shape(), &[1, 64, 8, 8]);
        assert_eq!(taps[2].shape(), &[1, 128, 4, 4]);
    }

    #[test]
    fn mini50_builds_and_runs() {
        let cfg = BackboneConfig::mini50();
        let (bb, store) = Backbone::standalone::<f32>(&cfg, 2).unwrap();
        let x = random_images(2, 16, 16, 4);
        let taps = run(&bb, &store, &x, Mode::Train);
        assert_eq!(taps.len(), 3);
        assert_eq!(taps[2].shape(), &[2, 128, 2, 2]);
        let expect: Vec<_> = cfg
            .tap_shapes(16, 16)
            .into_iter()
            .map(|(_, c, h, w)| vec![2, c, h, w])
            .collect();
        let got: Vec<_> = taps.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = Backbone::standalone::<f32>(&BackboneConfig::mini38(), 9).unwrap();
        let (_, b) = Backbone::standalone::<f32>(&BackboneConfig::mini38(), 9).unwrap();
        assert_eq!(a, b);
        let (_, c) = Backbone::standalone::<f32>(&BackboneConfig::mini38(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn eval_forward_is_pure() {
        let (bb, store) = Backbone::standalone::<f32>(&BackboneConfig::mini38(), 5).unwrap();
        let x = random_images(1, 16, 16, 6);
        assert_eq!(run(&bb, &store, &x, Mode::Eval), run(&bb, &store, &x, Mode::Eval));
    }

    #[test]
    fn rejects_indivisible_input() {
        let (bb, store) = Backbone::standalone::<f32>(&BackboneConfig::mini38(), 5).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = g.constant(random_images(1, 20, 20, 0));
        let mut ctx = Ctx::new(&mut g, &store, &bound, Mode::Eval);
        assert!(matches!(bb.forward(&mut ctx, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = BackboneConfig::mini38();
        cfg.stages.pop();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = BackboneConfig::mini38();
        cfg.tap_names.push("nope".into());
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::mini38();
        cfg.stages[1].stride = 0;
        assert!(cfg.validate().is_err());
        assert!(BackboneConfig::from_preset("resnet1000").is_err());
    }

    #[test]
    fn zero_final_scale_gives_identity_block() {
        // identity shortcut: same channels, stride 1
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = Block::build(&mut store, "blk", BlockKind::Basic, 4, 4, 1, &mut rng);
        store.set(block.final_gamma(), Tensor::zeros(&[4])).unwrap();
        let input: Tensor<f64> = random_images::<f64>(1, 6, 6, 8).map(|v| v.abs());
        let input = Tensor::new(&[1, 4, 3, 6], input.into_data()[..72].to_vec()).unwrap();
        for mode in [Mode::Eval, Mode::Train] {
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let x = g.constant(input.clone());
            let mut ctx = Ctx::new(&mut g, &store, &bound, mode);
            let y = block.forward(&mut ctx, x).unwrap();
            assert_eq!(g.value(y), &input);
        }
    }

    #[test]
    fn zero_input_with_zero_final_scale_is_finite() {
        let (bb, mut store) = Backbone::standalone::<f32>(&BackboneConfig::mini38(), 5).unwrap();
        for gamma in bb.blocks().map(|b| b.final_gamma()).collect::<Vec<_>>() {
            let n = store.value(gamma).len();
            store.set(gamma, Tensor::zeros(&[n])).unwrap();
        }
        let taps = run(&bb, &store, &Tensor::zeros(&[1, 3, 16, 16]), Mode::Eval);
        assert!(taps.iter().all(|t| t.is_finite()));
    }
}
