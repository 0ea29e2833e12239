//! Labelled patches: loading, batching, augmentation and synthesis.

pub mod augment;
pub mod label;
pub mod png_io;
pub mod synth;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::PseudoMask;
use crate::tensor::{Scalar, Tensor};

pub use augment::{augment, AugmentConfig, Transform};
pub use label::parse_bracket_label;
pub use synth::synth_generate;

/// Per-channel input normalisation applied when batching.
pub const NORM_MEAN: f64 = 0.5;
pub const NORM_STD: f64 = 0.25;

pub const MANIFEST_FILE: &str = "manifest.json";

/// RNG for one `(seed, stream, index)` triple. Streams keep unrelated uses
/// (synthesis, augmentation, shuffling) independent.
pub fn derive_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 48) ^ index);
    rng
}

/// An RGB patch in `[0, 1]` with its multi-hot image label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    /// `[3, H, W]`
    pub image: Tensor<f32>,
    pub label: Vec<u8>,
    pub gt_mask: Option<PseudoMask>,
    pub id: String,
}

impl LabeledPatch {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn from_rgb(img: &png_io::RgbImage, label: Vec<u8>, id: impl Into<String>) -> Self {
        let p = img.width * img.height;
        let mut data = vec![0f32; 3 * p];
        for (i, px) in img.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * p + i] = px[c] as f32 / 255.0;
            }
        }
        LabeledPatch {
            image: Tensor::from_parts(vec![3, img.height, img.width], data),
            label,
            gt_mask: None,
            id: id.into(),
        }
    }

    pub fn to_rgb(&self) -> png_io::RgbImage {
        let (h, w) = (self.height(), self.width());
        let p = h * w;
        let d = self.image.data();
        let mut pixels = Vec::with_capacity(3 * p);
        for i in 0..p {
            for c in 0..3 {
                pixels.push((d[c * p + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        png_io::RgbImage {
            width: w,
            height: h,
            pixels,
        }
    }

    /// Checks the label against the class count and, when a mask is
    /// present, that the mask's foreground classes equal the label.
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.label.len() != classes {
            return Err(Error::Argument(format!(
                "patch `{}`: label has {} entries for {classes} classes",
                self.id,
                self.label.len()
            )));
        }
        if let Some(m) = &self.gt_mask {
            if (m.height, m.width) != (self.height(), self.width()) {
                return Err(Error::Dimension(format!("patch `{}`: mask size differs", self.id)));
            }
            let mut present = vec![0u8; classes];
            for &l in &m.labels {
                match l as usize {
                    0 => {}
                    c if c <= classes => present[c - 1] = 1,
                    c => {
                        return Err(Error::Argument(format!(
                            "patch `{}`: mask label {c} exceeds {classes} classes",
                            self.id
                        )))
                    }
                }
            }
            if present != self.label {
                return Err(Error::Argument(format!(
                    "patch `{}`: mask classes {present:?} disagree with label {:?}",
                    self.id, self.label
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub label: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadMode {
    /// Every `*.png` in the directory, labels parsed from `[a, b, c]` names.
    BracketNames,
    /// `manifest.json` in the directory.
    Manifest,
}

pub fn default_class_names() -> Vec<String> {
    ["tumor", "stroma", "normal"].iter().map(|s| s.to_string()).collect()
}

/// Lists a dataset without decoding it. Entries are sorted by image path.
pub fn load_dataset(root: &Path, mode: LoadMode) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Ingest {
            path: root.to_path_buf(),
            reason: "not a directory".into(),
        });
    }
    let mut manifest = match mode {
        LoadMode::BracketNames => {
            let entries = png_io::list_pngs(root)?
                .into_iter()
                .map(|name| {
                    Ok(ManifestEntry {
                        label: parse_bracket_label(&name)?,
                        image: name,
                        mask: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            DatasetManifest {
                root: root.to_path_buf(),
                class_names: default_class_names(),
                entries,
            }
        }
        LoadMode::Manifest => {
            let path = root.join(MANIFEST_FILE);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut m: DatasetManifest =
                serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?;
            m.root = root.to_path_buf();
            m
        }
    };
    manifest.entries.sort_by(|a, b| a.image.cmp(&b.image));
    manifest.check()?;
    Ok(manifest)
}

impl DatasetManifest {
    fn check(&self) -> Result<()> {
        let c = self.class_names.len();
        for e in &self.entries {
            let img = self.root.join(&e.image);
            if e.label.len() != c || e.label.iter().any(|&v| v > 1) {
                return Err(Error::Ingest {
                    path: img,
                    reason: format!("label {:?} is not a {c}-class multi-hot vector", e.label),
                });
            }
            let mut files = vec![img];
            files.extend(e.mask.iter().map(|m| self.root.join(m)));
            for f in files {
                if !f.is_file() {
                    return Err(Error::Ingest {
                        path: f,
                        reason: "file not found".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Decodes every entry. All images must share one size.
    pub fn load_patches(&self) -> Result<Vec<LabeledPatch>> {
        let mut out: Vec<LabeledPatch> = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let path = self.root.join(&e.image);
            let img = png_io::read_rgb(&path)?;
            if let Some(first) = out.first() {
                if (img.height, img.width) != (first.height(), first.width()) {
                    return Err(Error::Ingest {
                        path,
                        reason: format!(
                            "size {}×{} differs from {}×{}",
                            img.height,
                            img.width,
                            first.height(),
                            first.width()
                        ),
                    });
                }
            }
            let id = Path::new(&e.image)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let mut patch = LabeledPatch::from_rgb(&img, e.label.clone(), id);
            if let Some(m) = &e.mask {
                let mpath = self.root.join(m);
                let mask = png_io::read_mask(&mpath)?;
                if (mask.height, mask.width) != (img.height, img.width) {
                    return Err(Error::Ingest {
                        path: mpath,
                        reason: "mask size differs from image".into(),
                    });
                }
                patch.gt_mask = Some(mask);
            }
            out.push(patch);
        }
        Ok(out)
    }
}

/// Writes `images/`, `masks/` and `manifest.json` under `out`.
pub fn write_dataset(out: &Path, patches: &[LabeledPatch], class_names: &[String]) -> Result<()> {
    let images = out.join("images");
    let masks = out.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut entries = Vec::with_capacity(patches.len());
    for p in patches {
        let file = format!("{}.png", p.id);
        png_io::write_rgb(&images.join(&file), &p.to_rgb())?;
        let mask = if let Some(m) = &p.gt_mask {
            png_io::write_mask(&masks.join(&file), m)?;
            Some(format!("masks/{file}"))
        } else {
            None
        };
        entries.push(ManifestEntry {
            image: format!("images/{file}"),
            label: p.label.clone(),
            mask,
        });
    }
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        class_names: class_names.to_vec(),
        entries,
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// A normalised image batch `[N, 3, H, W]` and labels `[N, C]`.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    pub images: Tensor<S>,
    pub labels: Tensor<S>,
}

pub fn normalize_pixel(v: f64) -> f64 {
    (v - NORM_MEAN) / NORM_STD
}

pub fn collate<S: Scalar>(patches: &[&LabeledPatch]) -> Result<Batch<S>> {
    let first = patches
        .first()
        .ok_or_else(|| Error::Argument("empty batch".into()))?;
    let (h, w, c) = (first.height(), first.width(), first.label.len());
    let mut images = Vec::with_capacity(patches.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(patches.len() * c);
    for p in patches {
        if (p.height(), p.width()) != (h, w) || p.label.len() != c {
            return Err(Error::Dimension(format!(
                "batch: patch `{}` differs from `{}` in size or label length",
                p.id, first.id
            )));
        }
        images.extend(p.image.data().iter().map(|&v| S::from_f64(normalize_pixel(v as f64))));
        labels.extend(p.label.iter().map(|&v| S::from_f64(v as f64)));
    }
    Ok(Batch {
        images: Tensor::new(&[patches.len(), 3, h, w], images)?,
        labels: Tensor::new(&[patches.len(), c], labels)?,
    })
}
