//! Command-line front end. Exit codes: 0 success, 1 validation or I/O
//! error, 2 numerical or check failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::data::png_io::{list_pngs, read_rgb, write_mask};
use crate::data::{
    default_class_names, load_dataset, synth_generate, write_dataset, LabeledPatch, LoadMode, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict_masks, GateMode};
use crate::gradcheck::{run_suite, TOLERANCE};
use crate::train::{load_model, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "cvfc", version, about = "Cross-view CAM co-training for weakly supervised segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labelled dataset.
    Synth(SynthArgs),
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Write one pseudo-mask per input image.
    Infer(InferArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Check every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 48)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Background threshold on normalized CAMs; defaults to the
    /// checkpoint's `bg_threshold`.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Which classes may appear in a mask: `predicted`, `labels` (parsed
    /// from bracketed file names) or `all`.
    #[arg(long, default_value = "predicted", value_parser = parse_gate)]
    pub gate: GateMode,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "tumor,stroma,normal")]
    pub classes: Vec<String>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupt the backward rule of the named op.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

fn parse_gate(s: &str) -> std::result::Result<GateMode, String> {
    match s {
        "all" => Ok(GateMode::All),
        "predicted" => Ok(GateMode::Predicted),
        "labels" => Ok(GateMode::Labels),
        other => Err(format!("unknown gate `{other}` (expected all, predicted or labels)")),
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a, out),
        Command::Infer(a) => infer(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let names = default_class_names();
    let patches = synth_generate(a.seed, a.count, a.size, names.len())?;
    write_dataset(&a.out, &patches, &names)?;
    writeln!(out, "wrote {} patches to {}", patches.len(), a.out.display()).map_err(stdout_err)
}

pub fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn load_patches(root: &Path) -> Result<Vec<LabeledPatch>> {
    let mode = if root.join(MANIFEST_FILE).is_file() {
        LoadMode::Manifest
    } else {
        LoadMode::BracketNames
    };
    load_dataset(root, mode)?.load_patches()
}

/// Writes to a sibling temporary file first so an interrupted save never
/// leaves a truncated checkpoint behind.
fn save_atomic(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    ckpt.save(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = read_config(&a.config)?;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    cfg.validate()?;
    let patches = load_patches(&a.data)?;
    let mut trainer = match &a.resume {
        Some(path) => Trainer::<f32>::resume(cfg, &Checkpoint::load(path)?)?,
        None => Trainer::<f32>::new(cfg)?,
    };
    while trainer.epoch < trainer.cfg.epochs {
        let log = trainer.train_epoch(&patches)?;
        save_atomic(&trainer.to_checkpoint()?, &a.out)?;
        writeln!(out, "{}", log.to_json_line()).map_err(stdout_err)?;
        out.flush().map_err(stdout_err)?;
    }
    if !a.out.exists() {
        save_atomic(&trainer.to_checkpoint()?, &a.out)?;
    }
    Ok(())
}

fn infer(a: InferArgs, out: &mut dyn Write) -> Result<()> {
    let (cfg, model) = load_model::<f32>(&Checkpoint::load(&a.ckpt)?)?;
    let threshold = a.threshold.unwrap_or(cfg.bg_threshold);
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Argument(format!("threshold {threshold} outside [0, 1)")));
    }
    let classes = model.class_names().len();
    let names = list_pngs(&a.images)?;
    if names.is_empty() {
        return Err(Error::Ingest {
            path: a.images.clone(),
            reason: "no PNG images".into(),
        });
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for name in &names {
        let path = a.images.join(name);
        let img = read_rgb(&path)?;
        let label = match a.gate {
            GateMode::Labels => crate::data::parse_bracket_label(name)?,
            _ => vec![0; classes],
        };
        if label.len() != classes {
            return Err(Error::LabelParse {
                filename: name.clone(),
                reason: format!("{} entries for {classes} classes", label.len()),
            });
        }
        let stem = name.strip_suffix(".png").unwrap_or(name);
        let patch = LabeledPatch::from_rgb(&img, label, stem);
        let masks = predict_masks(&model, std::slice::from_ref(&patch), threshold, a.gate, 1)?;
        write_mask(&a.out.join(name), &masks[0])?;
    }
    writeln!(out, "wrote {} masks to {}", names.len(), a.out.display()).map_err(stdout_err)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    if a.classes.iter().any(|c| c.is_empty()) {
        return Err(Error::Argument("empty class name in --classes".into()));
    }
    let report = evaluate(&a.pred, &a.gt, &a.classes)?;
    write!(out, "{}", report.table()).map_err(stdout_err)?;
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&report.to_json()).expect("report serializes") + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let fault: Option<&'static str> = a.inject_fault.map(|s| &*Box::leak(s.into_boxed_str()));
    let reports = run_suite(a.seed, fault)?;
    let mut failed = Vec::new();
    for r in &reports {
        writeln!(
            out,
            "{:<24} max_rel_err {:.3e}  checked {:>3}  {}",
            r.op,
            r.max_rel_err,
            r.checked,
            if r.passed { "ok" } else { "FAIL" }
        )
        .map_err(stdout_err)?;
        if !r.passed {
            failed.push(r.op.clone());
        }
    }
    if failed.is_empty() {
        writeln!(out, "all {} checks within {TOLERANCE:e}", reports.len()).map_err(stdout_err)
    } else {
        Err(Error::GradCheck {
            op: failed.join(", "),
            reason: format!("relative error above {TOLERANCE:e}"),
        })
    }
}
