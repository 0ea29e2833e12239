//! Central finite-difference checks of the analytic gradients.
//!
//! Each check contracts the output with fixed random probe weights `r`,
//! so one backward pass seeded with `r` gives `∂(r·y)/∂x` for every input
//! element. Numerical estimates perturb one element at a time by `±h`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_matrix, project_qk, refine_cam_var};
use crate::autodiff::{Graph, Var};
use crate::backbone::{BlockKind, Block, BackboneConfig, StageConfig};
use crate::cam::{cam_forward, integrate_vars};
use crate::error::{Error, Result};
use crate::loss::LossOptions;
use crate::model::{BranchSpec, CvfcModel, ModelConfig};
use crate::params::{Ctx, Mode, ParamStore};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Largest input checked exhaustively.
pub const MAX_ELEMENTS: usize = 64;

/// A freshly recorded graph: its output and the variables of the inputs.
pub struct Built {
    pub graph: Graph<f64>,
    pub output: Var,
    pub inputs: Vec<Var>,
}

#[derive(Debug, Clone, Default)]
pub struct CheckOptions {
    pub seed: u64,
    /// Check this many sampled elements instead of all of them.
    pub samples: Option<usize>,
    /// Op whose backward is deliberately corrupted.
    pub fault: Option<&'static str>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn failure(op: &str, reason: impl Into<String>) -> Error {
    Error::GradCheck {
        op: op.to_string(),
        reason: reason.into(),
    }
}

fn probe_value(op: &str, built: &Built, probe: &Tensor<f64>) -> Result<f64> {
    let y = built.graph.value(built.output);
    if !y.is_finite() {
        return Err(failure(op, "non-finite forward value"));
    }
    Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
}

/// Compares analytic and numerical gradients of `build` w.r.t. `inputs`.
pub fn grad_check<F>(op: &str, inputs: &[Tensor<f64>], build: F, opts: &CheckOptions) -> Result<CheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Built>,
{
    if opts.samples.is_none() {
        if let Some(t) = inputs.iter().find(|t| t.len() > MAX_ELEMENTS) {
            return Err(Error::Argument(format!(
                "grad_check `{op}`: input of {} elements exceeds {MAX_ELEMENTS}",
                t.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut built = build(inputs)?;
    let probe = Tensor::<f64>::uniform(built.graph.shape(built.output), 1.0, &mut rng);
    if let Some(f) = opts.fault {
        built.graph.inject_backward_fault(f);
    }
    let grads = built
        .graph
        .backward_with(built.output, probe.clone())
        .map_err(|e| failure(op, e.to_string()))?;

    let sizes: Vec<usize> = inputs.iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut picks: Vec<usize> = match opts.samples {
        Some(k) if k < total => sample(&mut rng, total, k).into_vec(),
        _ => (0..total).collect(),
    };
    picks.sort_unstable();

    let mut max_err = 0f64;
    for flat in picks.iter().copied() {
        let (mut which, mut idx) = (0, flat);
        while idx >= sizes[which] {
            idx -= sizes[which];
            which += 1;
        }
        let analytic = grads
            .get(built.inputs[which])
            .map_or(0.0, |g| g.data()[idx]);
        let mut perturbed = inputs.to_vec();
        let x0 = inputs[which].data()[idx];
        perturbed[which].data_mut()[idx] = x0 + STEP;
        let plus = probe_value(op, &build(&perturbed)?, &probe)?;
        perturbed[which].data_mut()[idx] = x0 - STEP;
        let minus = probe_value(op, &build(&perturbed)?, &probe)?;
        let numeric = (plus - minus) / (2.0 * STEP);
        if !analytic.is_finite() || !numeric.is_finite() {
            return Err(failure(op, "non-finite gradient"));
        }
        max_err = max_err.max(rel_err(analytic, numeric));
    }
    Ok(CheckReport {
        op: op.to_string(),
        max_rel_err: max_err,
        checked: picks.len(),
        passed: max_err <= TOLERANCE,
    })
}

/// Wraps a closure over graph variables into a [`grad_check`] builder.
fn graph_fn(f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> impl Fn(&[Tensor<f64>]) -> Result<Built> {
    move |inputs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        g.set_check_finite(true);
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let output = f(&mut g, &vars)?;
        Ok(Built {
            graph: g,
            output,
            inputs: vars,
        })
    }
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 2.0, rng)
}

/// Random values with magnitude in `[margin, 2]`, away from kinks at 0.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    rand_t(shape, rng).map(|v| {
        let m = margin + v.abs() * (2.0 - margin) / 2.0;
        if v < 0.0 {
            -m
        } else {
            m
        }
    })
}

fn tiny_backbone(kind: BlockKind) -> BackboneConfig {
    let stage = |name: &str, c: usize| StageConfig {
        name: name.into(),
        blocks: 1,
        out_channels: c,
        stride: 2,
        block_kind: kind,
    };
    BackboneConfig {
        stem_channels: 2,
        stages: vec![stage("s1", 2), stage("s2", 3), stage("s3", 4)],
        tap_names: vec!["s2".into(), "s3".into()],
    }
}

/// Randomises batch-norm affine parameters and running statistics so no
/// layer sits at its identity initialisation.
fn perturb_store(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().map(|(id, e)| (id, e.name.clone())).collect();
    for (id, name) in ids {
        let t = store.value_mut(id);
        let (lo, hi) = if name.ends_with("gamma") || name.ends_with("running_var") {
            (0.5, 1.5)
        } else if name.ends_with("beta") || name.ends_with("running_mean") || name.ends_with(".b") {
            (-0.3, 0.3)
        } else {
            continue;
        };
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(lo..hi));
    }
}

fn block_check(kind: BlockKind, name: &str, opts: &CheckOptions) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xb10c);
    let mut store = ParamStore::<f64>::new();
    let (cin, cout) = (2, 4);
    let block = Block::build(&mut store, "blk", kind, cin, cout, 2, &mut rng);
    perturb_store(&mut store, &mut rng);
    let x = rand_t(&[1, cin, 4, 4], &mut rng);
    let ids = store.trainable_ids();
    let mut inputs = vec![x];
    inputs.extend(ids.iter().map(|&id| store.value(id).clone()));
    let build = |inputs: &[Tensor<f64>]| {
        let mut s = store.clone();
        for (&id, t) in ids.iter().zip(&inputs[1..]) {
            s.set(id, t.clone())?;
        }
        let mut g = Graph::new();
        let bound = s.bind(&mut g);
        let xv = g.variable(inputs[0].clone());
        let out = {
            let mut ctx = Ctx::new(&mut g, &s, &bound, Mode::Eval);
            block.forward(&mut ctx, xv)?
        };
        let mut vars = vec![xv];
        vars.extend(ids.iter().map(|&id| bound.var(id)));
        Ok(Built {
            graph: g,
            output: out,
            inputs: vars,
        })
    };
    let samples = Some(opts.samples.unwrap_or(40));
    grad_check(name, &inputs, build, &CheckOptions { samples, ..opts.clone() })
}

fn objective_check(opts: &CheckOptions) -> Result<CheckReport> {
    let cfg = ModelConfig {
        branches: vec![
            BranchSpec::Custom(tiny_backbone(BlockKind::Basic)),
            BranchSpec::Custom(tiny_backbone(BlockKind::Bottleneck)),
            BranchSpec::Custom(tiny_backbone(BlockKind::Basic)),
        ],
        ..ModelConfig::default()
    };
    let mut model = CvfcModel::<f64>::build(&cfg, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x0b1e);
    perturb_store(&mut model.store, &mut rng);
    let images = rand_t(&[2, 3, 16, 16], &mut rng);
    let labels = Tensor::from_f64(&[2, 3], &[1., 0., 1., 0., 1., 1.])?;
    let ids = model.store.trainable_ids();
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| model.store.value(id).clone()).collect();
    let build = |inputs: &[Tensor<f64>]| {
        let mut m = model.clone();
        for (&id, t) in ids.iter().zip(inputs) {
            m.store.set(id, t.clone())?;
        }
        let lg = m.loss_graph(&images, &labels, &LossOptions::default(), Mode::Eval)?;
        Ok(Built {
            inputs: ids.iter().map(|&id| lg.bound.var(id)).collect(),
            graph: lg.graph,
            output: lg.loss,
        })
    };
    let samples = Some(opts.samples.unwrap_or(20));
    grad_check("total_loss", &inputs, build, &CheckOptions { samples, ..opts.clone() })
}

/// Name and runner of every check in the suite.
type Check = (&'static str, Box<dyn Fn(&CheckOptions) -> Result<CheckReport>>);

fn op_check(
    name: &'static str,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Clone + 'static,
) -> Check {
    (
        name,
        Box::new(move |opts: &CheckOptions| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let xs = inputs(&mut rng);
            grad_check(name, &xs, graph_fn(f.clone()), opts)
        }),
    )
}

pub fn suite() -> Vec<Check> {
    vec![
        op_check(
            "conv2d",
            |r| vec![rand_t(&[1, 2, 4, 4], r), rand_t(&[2, 2, 3, 3], r), rand_t(&[2], r)],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        ),
        op_check(
            "conv1x1",
            |r| vec![rand_t(&[2, 3, 2, 2], r), rand_t(&[2, 3], r), rand_t(&[2], r)],
            |g, v| g.conv1x1(v[0], v[1], Some(v[2])),
        ),
        op_check(
            "adaptive_avg_pool",
            |r| vec![rand_t(&[1, 2, 5, 4], r)],
            |g, v| g.adaptive_avg_pool(v[0], 3, 2),
        ),
        op_check(
            "bilinear_resize",
            |r| vec![rand_t(&[1, 2, 3, 2], r)],
            |g, v| g.bilinear_resize(v[0], 5, 4),
        ),
        op_check("softmax", |r| vec![rand_t(&[3, 5], r)], |g, v| g.softmax(v[0], 1)),
        op_check("sigmoid", |r| vec![rand_t(&[4, 4], r)], |g, v| g.sigmoid(v[0])),
        op_check("relu", |r| vec![away_from_zero(&[4, 4], 0.02, r)], |g, v| g.relu(v[0])),
        op_check(
            "matmul",
            |r| vec![rand_t(&[2, 3, 4], r), rand_t(&[2, 3, 2], r)],
            |g, v| g.matmul(v[0], v[1], true, false),
        ),
        op_check("add", |r| vec![rand_t(&[3, 4], r), rand_t(&[3, 4], r)], |g, v| g.add(v[0], v[1])),
        op_check("sub", |r| vec![rand_t(&[3, 4], r), rand_t(&[3, 4], r)], |g, v| g.sub(v[0], v[1])),
        op_check("mul", |r| vec![rand_t(&[3, 4], r), rand_t(&[3, 4], r)], |g, v| g.mul(v[0], v[1])),
        op_check("scale", |r| vec![rand_t(&[3, 4], r)], |g, v| g.scale(v[0], -1.7)),
        op_check(
            "concat_channels",
            |r| vec![rand_t(&[2, 1, 2, 2], r), rand_t(&[2, 3, 2, 2], r)],
            |g, v| g.concat_channels(&[v[0], v[1]]),
        ),
        op_check(
            "batchnorm2d_train",
            |r| vec![rand_t(&[3, 2, 2, 3], r), rand_t(&[2], r), rand_t(&[2], r)],
            |g, v| Ok(g.batchnorm2d_train(v[0], v[1], v[2])?.0),
        ),
        op_check(
            "batchnorm2d_frozen",
            |r| vec![rand_t(&[2, 2, 2, 3], r), rand_t(&[2], r), rand_t(&[2], r)],
            |g, v| g.batchnorm2d_frozen(v[0], v[1], v[2], &[0.3, -0.2], &[0.8, 1.7]),
        ),
        op_check("reshape", |r| vec![rand_t(&[2, 6], r)], |g, v| g.reshape(v[0], &[3, 4])),
        op_check(
            "flatten_spatial",
            |r| vec![rand_t(&[2, 2, 2, 3], r)],
            |g, v| g.flatten_spatial(v[0]),
        ),
        op_check("abs", |r| vec![away_from_zero(&[4, 4], 0.02, r)], |g, v| g.abs(v[0])),
        op_check("square", |r| vec![rand_t(&[4, 4], r)], |g, v| g.square(v[0])),
        op_check("mean", |r| vec![rand_t(&[4, 4], r)], |g, v| g.mean(v[0])),
        op_check("sum", |r| vec![rand_t(&[4, 4], r)], |g, v| g.sum(v[0])),
        op_check(
            "minmax_normalize",
            |r| vec![rand_t(&[3, 6], r)],
            |g, v| g.minmax_normalize(v[0], 1e-5),
        ),
        op_check(
            "multilabel_soft_margin",
            |r| vec![rand_t(&[3, 3], r)],
            |g, v| {
                let y = Tensor::from_f64(&[3, 3], &[1., 0., 1., 0., 0., 1., 1., 1., 0.])?;
                g.multilabel_soft_margin(v[0], &y)
            },
        ),
        op_check(
            "integrate_taps",
            |r| vec![rand_t(&[1, 2, 4, 4], r), rand_t(&[1, 3, 2, 2], r)],
            |g, v| integrate_vars(g, &[v[0], v[1]]),
        ),
        op_check(
            "cam_forward",
            |r| vec![rand_t(&[2, 3, 3, 3], r), rand_t(&[2, 3], r), rand_t(&[2], r)],
            |g, v| {
                let out = cam_forward(g, v[0], v[1], v[2])?;
                let cams = g.flatten_spatial(out.maps)?;
                let logits = g.reshape(out.logits, &[2, 2, 1])?;
                let both = g.matmul(cams, logits, true, false)?;
                Ok(both)
            },
        ),
        op_check(
            "project_qk",
            |r| vec![rand_t(&[1, 3, 2, 2], r), rand_t(&[2, 3], r), rand_t(&[2, 3], r)],
            |g, v| {
                let (q, k) = project_qk(g, v[0], v[1], v[2])?;
                g.concat_channels(&[q, k])
            },
        ),
        op_check(
            "attention_matrix",
            |r| vec![rand_t(&[1, 2, 4], r), rand_t(&[1, 2, 4], r)],
            |g, v| attention_matrix(g, v[0], v[1]),
        ),
        op_check(
            "refine_cam",
            |r| {
                let a = rand_t(&[1, 4, 4], r);
                vec![rand_t(&[1, 2, 4, 4], r), a]
            },
            |g, v| {
                let attn = g.softmax(v[1], 2)?;
                refine_cam_var(g, v[0], attn, 2, 2)
            },
        ),
        ("basic_block", Box::new(|o: &CheckOptions| block_check(BlockKind::Basic, "basic_block", o))),
        (
            "bottleneck_block",
            Box::new(|o: &CheckOptions| block_check(BlockKind::Bottleneck, "bottleneck_block", o)),
        ),
        ("total_loss", Box::new(objective_check)),
    ]
}

/// Runs every check. A failed comparison is reported, not returned as an
/// error; errors are reserved for checks that could not run.
pub fn run_suite(seed: u64, fault: Option<&'static str>) -> Result<Vec<CheckReport>> {
    suite()
        .iter()
        .map(|(name, run)| {
            let opts = CheckOptions {
                seed,
                samples: None,
                fault,
            };
            match run(&opts) {
                Err(Error::GradCheck { reason, .. }) if reason.contains("non-finite") => Ok(CheckReport {
                    op: name.to_string(),
                    max_rel_err: f64::INFINITY,
                    checked: 0,
                    passed: false,
                }),
                other => other,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn linear_op_is_nearly_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = vec![rand_t(&[4], &mut rng), rand_t(&[4], &mut rng)];
        let r = grad_check("add", &xs, graph_fn(|g, v| g.add(v[0], v[1])), &CheckOptions::default()).unwrap();
        assert!(r.max_rel_err <= 1e-10, "{}", r.max_rel_err);
        assert_eq!(r.checked, 8);
    }

    #[test]
    fn oversized_inputs_rejected() {
        let xs = vec![Tensor::<f64>::zeros(&[65])];
        assert!(grad_check("sum", &xs, graph_fn(|g, v| g.sum(v[0])), &CheckOptions::default()).is_err());
    }

    #[test]
    fn wrong_backward_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = vec![rand_t(&[3, 3], &mut rng)];
        let opts = CheckOptions {
            fault: Some("sigmoid"),
            ..CheckOptions::default()
        };
        let r = grad_check("sigmoid", &xs, graph_fn(|g, v| g.sigmoid(v[0])), &opts).unwrap();
        assert!(!r.passed);
        assert!((r.max_rel_err - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn suite_names_are_unique() {
        let names: Vec<&str> = suite().iter().map(|(n, _)| *n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn full_suite_passes() {
        let reports = run_suite(0, None).unwrap();
        for r in &reports {
            eprintln!("{:<24} {:.3e} ({} checked)", r.op, r.max_rel_err, r.checked);
        }
        assert!(reports.iter().all(|r| r.passed));
    }
}
