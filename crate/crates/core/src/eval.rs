//! Pseudo-mask extraction and IoU-family segmentation metrics.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::autodiff::kernels::bilinear_forward;
use crate::cam::CamStack;
use crate::data::png_io::{list_pngs, read_mask};
use crate::data::{collate, LabeledPatch};
use crate::error::{Error, Result};
use crate::model::{ClassGate, CvfcModel};
use crate::tensor::Scalar;

/// `H×W` class-index map: 0 is background, `1..=C` follow the class order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoMask {
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub id: String,
}

impl PseudoMask {
    pub fn new(labels: Vec<u8>, height: usize, width: usize, id: impl Into<String>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask `{}`: {} labels for {height}×{width}",
                labels.len(),
                height * width
            )));
        }
        Ok(PseudoMask {
            labels,
            height,
            width,
            id: id.into(),
        })
    }

    pub fn filled(value: u8, height: usize, width: usize) -> Self {
        PseudoMask {
            labels: vec![value; height * width],
            height,
            width,
            id: String::new(),
        }
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

/// Resize each sample's CAMs to `out_size`, then label every pixel with its
/// arg-max class (lowest index on ties), or background when the maximum
/// activation is below `threshold`.
pub fn pseudo_mask<S: Scalar>(
    cs: &CamStack<S>,
    threshold: f64,
    out_size: (usize, usize),
) -> Result<Vec<PseudoMask>> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Argument(format!("threshold {threshold} outside [0, 1)")));
    }
    let (n, c, h, w) = cs.dims();
    if c > 254 {
        return Err(Error::Argument("at most 254 classes fit an 8-bit mask".into()));
    }
    let (oh, ow) = out_size;
    let resized = if (oh, ow) == (h, w) {
        cs.maps.data().to_vec()
    } else {
        bilinear_forward(cs.maps.data(), n * c, h, w, oh, ow)
    };
    let p = oh * ow;
    let mut masks = Vec::with_capacity(n);
    for ni in 0..n {
        let mut labels = vec![0u8; p];
        for (pos, label) in labels.iter_mut().enumerate() {
            let at = |ci: usize| resized[(ni * c + ci) * p + pos].as_f64();
            let mut best = 0;
            for ci in 1..c {
                if at(ci) > at(best) {
                    best = ci;
                }
            }
            if at(best) >= threshold {
                *label = best as u8 + 1;
            }
        }
        masks.push(PseudoMask {
            labels,
            height: oh,
            width: ow,
            id: String::new(),
        });
    }
    Ok(masks)
}

/// Confusion counts over `C+1` labels; rows are ground truth, columns
/// predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    k: usize,
    counts: Vec<u64>,
}

impl Confusion {
    /// `classes` foreground classes plus background.
    pub fn new(classes: usize) -> Self {
        let k = classes + 1;
        Confusion {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn add(&mut self, pred: &PseudoMask, gt: &PseudoMask) -> Result<()> {
        check_pair(pred, gt)?;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.k || g >= self.k {
                return Err(Error::Eval(format!(
                    "label {} out of range for {} classes in `{}`",
                    p.max(g),
                    self.k - 1,
                    if gt.id.is_empty() { &pred.id } else { &gt.id }
                )));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Ground-truth pixel count per label.
    pub fn gt_counts(&self) -> Vec<u64> {
        (0..self.k)
            .map(|g| (0..self.k).map(|p| self.get(g, p)).sum())
            .collect()
    }

    /// Predicted pixel count per label.
    pub fn pred_counts(&self) -> Vec<u64> {
        (0..self.k)
            .map(|p| (0..self.k).map(|g| self.get(g, p)).sum())
            .collect()
    }

    /// IoU of one label; 1.0 when it appears in neither prediction nor truth.
    pub fn iou(&self, label: usize) -> f64 {
        let inter = self.get(label, label);
        let union = self.gt_counts()[label] + self.pred_counts()[label] - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k).map(|r| r.to_vec()).collect()
    }
}

fn check_pair(pred: &PseudoMask, gt: &PseudoMask) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Dimension(format!(
            "mask sizes differ: {}×{} vs {}×{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

/// `|pred=c ∧ gt=c| / |pred=c ∨ gt=c|`, 1.0 when both are empty.
pub fn iou_per_class(pred: &PseudoMask, gt: &PseudoMask, c: u8) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let (a, b) = (p == c, g == c);
        inter += (a && b) as u64;
        union += (a || b) as u64;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

pub fn miou(per_class: &[f64]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::Argument("miou of an empty class list".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// `Σ freq_c · IoU_c`.
pub fn fwiou(per_class: &[f64], gt_freq: &[f64]) -> Result<f64> {
    if per_class.is_empty() || per_class.len() != gt_freq.len() {
        return Err(Error::Argument(format!(
            "fwiou: {} IoUs vs {} frequencies",
            per_class.len(),
            gt_freq.len()
        )));
    }
    if gt_freq.iter().any(|&f| !(f >= 0.0)) {
        return Err(Error::Argument("fwiou: frequencies must be non-negative".into()));
    }
    let total: f64 = gt_freq.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("fwiou: frequencies sum to {total}, not 1")));
    }
    Ok(per_class.iter().zip(gt_freq).map(|(i, f)| i * f).sum())
}

/// Round to `places` decimals, halves away from zero for positive inputs.
pub fn round_half_up(x: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    // tolerance absorbs binary representation error of decimal halves
    (x * f + 0.5 + 1e-9).floor() / f
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// Foreground classes, in class order.
    pub per_class_iou: Vec<f64>,
    pub miou: f64,
    pub fwiou: f64,
    pub confusion: Confusion,
    /// Ground-truth pixels per label, background first.
    pub pixels: Vec<u64>,
    pub images: usize,
}

impl EvalReport {
    pub fn from_confusion(confusion: Confusion, class_names: &[String], images: usize) -> Result<Self> {
        if confusion.size() != class_names.len() + 1 {
            return Err(Error::Argument("confusion size does not match class list".into()));
        }
        let per_class_iou: Vec<f64> = (1..confusion.size()).map(|c| confusion.iou(c)).collect();
        let pixels = confusion.gt_counts();
        let fg: u64 = pixels[1..].iter().sum();
        let freq: Vec<f64> = if fg == 0 {
            vec![1.0 / class_names.len() as f64; class_names.len()]
        } else {
            pixels[1..].iter().map(|&p| p as f64 / fg as f64).collect()
        };
        Ok(EvalReport {
            class_names: class_names.to_vec(),
            miou: miou(&per_class_iou)?,
            fwiou: fwiou_lenient(&per_class_iou, &freq),
            per_class_iou,
            confusion,
            pixels,
            images,
        })
    }

    /// Score a list of prediction/ground-truth pairs with one global
    /// confusion matrix.
    pub fn from_pairs(pairs: &[(PseudoMask, PseudoMask)], class_names: &[String]) -> Result<Self> {
        let mut conf = Confusion::new(class_names.len());
        for (p, g) in pairs {
            conf.add(p, g)?;
        }
        Self::from_confusion(conf, class_names, pairs.len())
    }

    pub fn to_json(&self) -> Value {
        let mut ious = Map::new();
        for (n, v) in self.class_names.iter().zip(&self.per_class_iou) {
            ious.insert(n.clone(), json!(v));
        }
        let mut pixels = Map::new();
        pixels.insert("background".into(), json!(self.pixels[0]));
        for (n, v) in self.class_names.iter().zip(&self.pixels[1..]) {
            pixels.insert(n.clone(), json!(v));
        }
        json!({
            "class_names": self.class_names,
            "per_class_iou": ious,
            "miou": self.miou,
            "fwiou": self.fwiou,
            "pixels": pixels,
            "confusion": self.confusion.rows(),
            "images": self.images,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let bad = |what: &str| Error::Eval(format!("report JSON: bad or missing `{what}`"));
        let class_names: Vec<String> = serde_json::from_value(v["class_names"].clone())
            .map_err(|_| bad("class_names"))?;
        let ious = v["per_class_iou"].as_object().ok_or_else(|| bad("per_class_iou"))?;
        let per_class_iou = class_names
            .iter()
            .map(|n| ious.get(n).and_then(Value::as_f64).ok_or_else(|| bad("per_class_iou")))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<Vec<u64>> =
            serde_json::from_value(v["confusion"].clone()).map_err(|_| bad("confusion"))?;
        let k = class_names.len() + 1;
        if rows.len() != k || rows.iter().any(|r| r.len() != k) {
            return Err(bad("confusion"));
        }
        let confusion = Confusion {
            k,
            counts: rows.into_iter().flatten().collect(),
        };
        let pixels = confusion.gt_counts();
        Ok(EvalReport {
            class_names,
            per_class_iou,
            miou: v["miou"].as_f64().ok_or_else(|| bad("miou"))?,
            fwiou: v["fwiou"].as_f64().ok_or_else(|| bad("fwiou"))?,
            confusion,
            pixels,
            images: v["images"].as_u64().unwrap_or(0) as usize,
        })
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let width = self
            .class_names
            .iter()
            .map(|n| n.len())
            .chain([6])
            .max()
            .unwrap_or(6);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>8}  {:>12}", "class", "IoU", "gt pixels");
        for (i, n) in self.class_names.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<width$}  {:>8.4}  {:>12}",
                n,
                round_half_up(self.per_class_iou[i], 4),
                self.pixels[i + 1]
            );
        }
        let _ = writeln!(s, "{:<width$}  {:>8.4}", "mIoU", round_half_up(self.miou, 4));
        let _ = writeln!(s, "{:<width$}  {:>8.4}", "fwIoU", round_half_up(self.fwiou, 4));
        s
    }
}

fn fwiou_lenient(per_class: &[f64], freq: &[f64]) -> f64 {
    per_class.iter().zip(freq).map(|(i, f)| i * f).sum()
}

/// Pair every mask in `pred_dir` with the same-named mask in `gt_dir` and
/// accumulate one confusion matrix.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, class_names: &[String]) -> Result<EvalReport> {
    let preds: BTreeSet<String> = list_pngs(pred_dir)?.into_iter().collect();
    let gts: BTreeSet<String> = list_pngs(gt_dir)?.into_iter().collect();
    let only_pred: Vec<_> = preds.difference(&gts).cloned().collect();
    let only_gt: Vec<_> = gts.difference(&preds).cloned().collect();
    if !only_pred.is_empty() || !only_gt.is_empty() {
        return Err(Error::Eval(format!(
            "unpaired masks; prediction only: {only_pred:?}; ground truth only: {only_gt:?}"
        )));
    }
    if preds.is_empty() {
        return Err(Error::Eval(format!(
            "no masks to compare in {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    let mut conf = Confusion::new(class_names.len());
    for name in &preds {
        let p = read_mask(&pred_dir.join(name))?;
        let g = read_mask(&gt_dir.join(name))?;
        conf.add(&p, &g).map_err(|e| match e {
            Error::Dimension(m) => Error::Eval(format!("{name}: {m}")),
            other => other,
        })?;
    }
    EvalReport::from_confusion(conf, class_names, preds.len())
}

/// Which classes may appear in model pseudo-masks during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    All,
    /// Classes the model scores at 0.5 or more.
    #[default]
    Predicted,
    /// The image-level labels.
    Labels,
}

/// Pseudo-masks for `patches` in batches of `batch`, in input order.
pub fn predict_masks<S: Scalar>(
    model: &CvfcModel<S>,
    patches: &[LabeledPatch],
    threshold: f64,
    gate: GateMode,
    batch: usize,
) -> Result<Vec<PseudoMask>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(batch.max(1)) {
        let refs: Vec<&LabeledPatch> = chunk.iter().collect();
        let b = collate::<S>(&refs)?;
        let g = match gate {
            GateMode::All => ClassGate::All,
            GateMode::Predicted => ClassGate::Predicted,
            GateMode::Labels => ClassGate::Labels(&b.labels),
        };
        let masks = model.infer_pseudo_labels(&b.images, threshold, g)?;
        for (mut m, p) in masks.into_iter().zip(chunk) {
            m.id = p.id.clone();
            out.push(m);
        }
    }
    Ok(out)
}

/// Scores model pseudo-masks against the patches' ground-truth masks.
pub fn evaluate_model<S: Scalar>(
    model: &CvfcModel<S>,
    patches: &[LabeledPatch],
    threshold: f64,
    gate: GateMode,
) -> Result<EvalReport> {
    let preds = predict_masks(model, patches, threshold, gate, 16)?;
    let mut conf = Confusion::new(model.class_names().len());
    for (pred, p) in preds.iter().zip(patches) {
        let gt = p
            .gt_mask
            .as_ref()
            .ok_or_else(|| Error::Eval(format!("patch `{}` has no ground-truth mask", p.id)))?;
        conf.add(pred, gt)?;
    }
    EvalReport::from_confusion(conf, model.class_names(), patches.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn mask(labels: &[u8], w: usize) -> PseudoMask {
        PseudoMask::new(labels.to_vec(), labels.len() / w, w, "m").unwrap()
    }

    fn stack(data: &[f64], c: usize, h: usize, w: usize) -> CamStack<f64> {
        let names = (0..c).map(|i| format!("c{i}")).collect();
        CamStack::new(Tensor::from_f64(&[1, c, h, w], data).unwrap(), names).unwrap()
    }

    #[test]
    fn pseudo_mask_rules() {
        let zeros = stack(&[0.0; 12], 3, 2, 2);
        let m = &pseudo_mask(&zeros, 0.3, (2, 2)).unwrap()[0];
        assert!(m.labels.iter().all(|&l| l == 0));

        let mut onehot = vec![0.0; 12];
        onehot[4..8].iter_mut().for_each(|v| *v = 1.0);
        let m = &pseudo_mask(&stack(&onehot, 3, 2, 2), 0.3, (4, 4)).unwrap()[0];
        assert!(m.labels.iter().all(|&l| l == 2));

        let px = stack(&[0.31, 0.29, 0.05], 3, 1, 1);
        assert_eq!(pseudo_mask(&px, 0.3, (1, 1)).unwrap()[0].labels, vec![1]);
        assert!(pseudo_mask(&px, 1.0, (1, 1)).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = mask(&[1, 1, 0, 2], 2);
        assert_eq!(iou_per_class(&a, &a, 1).unwrap(), 1.0);
        let b = mask(&[0, 0, 1, 2], 2);
        assert_eq!(iou_per_class(&mask(&[1, 1, 0, 0], 2), &mask(&[0, 0, 1, 1], 2), 1).unwrap(), 0.0);
        assert_eq!(iou_per_class(&a, &b, 3).unwrap(), 1.0);
        // |pred| = 6, |gt| = 6, overlap 3
        let pred = mask(&[1, 1, 1, 1, 1, 1, 0, 0, 0], 3);
        let gt = mask(&[0, 0, 0, 1, 1, 1, 1, 1, 1], 3);
        assert!((iou_per_class(&pred, &gt, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(iou_per_class(&pred, &mask(&[0, 0], 2), 1).is_err());
    }

    #[test]
    fn miou_matches_table_rows() {
        for (ious, expect) in [
            ([0.7846, 0.5907, 0.7613], 0.7122),
            ([0.6425, 0.4019, 0.6981], 0.5808),
            ([0.7597, 0.6104, 0.7462], 0.7054),
            ([0.6521, 0.3975, 0.4610], 0.5035),
        ] {
            assert_eq!(round_half_up(miou(&ious).unwrap(), 4), expect);
        }
        assert!(miou(&[]).is_err());
    }

    #[test]
    fn fwiou_examples() {
        let ious = [0.3, 0.9, 0.6];
        let uniform = fwiou(&ious, &[1.0 / 3.0; 3]).unwrap();
        assert!((uniform - miou(&ious).unwrap()).abs() < 1e-12);
        assert!((fwiou(&[1.0, 0.5, 0.0], &[0.5, 0.3, 0.2]).unwrap() - 0.65).abs() < 1e-12);
        assert_eq!(fwiou(&[0.42], &[1.0]).unwrap(), 0.42);
        assert!(fwiou(&[0.5, 0.5], &[0.5, 0.6]).is_err());
        assert!(fwiou(&[0.5, 0.5], &[1.5, -0.5]).is_err());
    }

    #[test]
    fn confusion_sums_match_counts() {
        let pred = mask(&[0, 1, 1, 2, 2, 3], 3);
        let gt = mask(&[0, 1, 2, 2, 3, 3], 3);
        let mut c = Confusion::new(3);
        c.add(&pred, &gt).unwrap();
        assert_eq!(c.gt_counts(), vec![1, 1, 2, 2]);
        assert_eq!(c.pred_counts(), vec![1, 2, 2, 1]);
        assert_eq!(c.get(2, 1), 1);
        // class 2: inter 1, union 2 + 2 - 1 = 3
        assert!((c.iou(2) - 1.0 / 3.0).abs() < 1e-15);
        assert!(c.add(&mask(&[5], 1), &mask(&[0], 1)).is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let names: Vec<String> = ["tumor", "stroma", "normal"].iter().map(|s| s.to_string()).collect();
        let pairs = vec![(mask(&[0, 1, 1, 2, 2, 3], 3), mask(&[0, 1, 2, 2, 3, 3], 3))];
        let r = EvalReport::from_pairs(&pairs, &names).unwrap();
        let back = EvalReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.table().contains("mIoU"));
    }
}
