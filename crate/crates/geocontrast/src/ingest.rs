//! Dataset loaders.
//!
//! FUNSD is read in its published layout:
//!
//! ```text
//! <root>/training_data/annotations/<doc>.json   {"form": [{id, box, label, linking, text, ...}]}
//! <root>/training_data/images/<doc>.png
//! <root>/testing_data/...
//! ```
//!
//! RVL-CDIP invoices are read from one annotation file per page:
//!
//! ```text
//! <root>/annotations/<doc>.json
//!   {"image": "<file>", "regions": [{id, box, label, text?}], "tables": [[x0, y0, x1, y1], ...]}
//! <root>/images/<file>
//! ```
//!
//! A region belongs to the table whose box contains its center.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use geocontrast_core::annotate::EntityRecord;
use geocontrast_core::labels::Dataset;
use geocontrast_core::{BBox, ImageSize};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub image_path: PathBuf,
    pub image_size: ImageSize,
    pub records: Vec<EntityRecord>,
    /// Ground-truth table regions (empty for forms).
    pub tables: Vec<BBox>,
    /// Boxes that had to be clamped into the page.
    pub repaired_boxes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Vec<Document>,
    pub validation: Vec<Document>,
    pub test: Vec<Document>,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &[Document] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keeps the first `n` documents of every split (`0` keeps all).
    pub fn limit(&mut self, n: usize) {
        if n > 0 {
            self.train.truncate(n);
            self.validation.truncate(n);
            self.test.truncate(n);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedDocument {
    pub annotation: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub skipped: Vec<SkippedDocument>,
}

impl SkipReport {
    fn skip(&mut self, annotation: &Path, reason: String) {
        log::warn!("skipping {}: {reason}", annotation.display());
        self.skipped.push(SkippedDocument {
            annotation: annotation.to_path_buf(),
            reason,
        });
    }
}

#[derive(Deserialize)]
struct FunsdFile {
    form: Vec<FunsdEntity>,
}

#[derive(Deserialize)]
struct FunsdEntity {
    id: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    label: String,
    #[serde(default)]
    linking: Vec<[usize; 2]>,
    #[serde(default)]
    text: Option<String>,
}

#[derive(Deserialize)]
struct InvoiceFile {
    image: String,
    regions: Vec<InvoiceRegion>,
    #[serde(default)]
    tables: Vec<[f64; 4]>,
}

#[derive(Deserialize)]
struct InvoiceRegion {
    id: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    label: String,
    #[serde(default)]
    text: Option<String>,
}

fn annotation_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(PipelineError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg", "tif", "tiff"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

fn annotation_error(path: &Path, msg: impl Into<String>) -> PipelineError {
    PipelineError::Annotation {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn image_size(path: &Path) -> Result<ImageSize> {
    let (w, h) = image::image_dimensions(path).map_err(|source| PipelineError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(ImageSize::new(w as f64, h as f64))
}

/// Clamps a raw box into the page, counting repairs.
fn repair_box(raw: [f64; 4], image: ImageSize, path: &Path, id: usize, repaired: &mut usize) -> Result<BBox> {
    if raw.iter().any(|c| !c.is_finite()) {
        return Err(annotation_error(path, format!("entity {id} has a non-finite box")));
    }
    let (b, changed) = BBox::new(raw[0], raw[1], raw[2], raw[3]).clamp_to(image);
    if changed {
        log::info!("{}: entity {id} box {raw:?} clamped to {b:?}", path.display());
        *repaired += 1;
    }
    Ok(b)
}

fn check_links(records: &[EntityRecord], path: &Path) -> Result<()> {
    let ids: BTreeSet<usize> = records.iter().map(|r| r.id).collect();
    if ids.len() != records.len() {
        return Err(annotation_error(path, "duplicate entity ids"));
    }
    for r in records {
        for &(a, b) in &r.links {
            if !ids.contains(&a) || !ids.contains(&b) {
                return Err(annotation_error(
                    path,
                    format!("entity {} links to unknown id in ({a}, {b})", r.id),
                ));
            }
        }
    }
    Ok(())
}

/// Parses one FUNSD annotation file against a page of `image` size.
pub fn parse_funsd(path: &Path, image: ImageSize) -> Result<(Vec<EntityRecord>, usize)> {
    let text = fs::read_to_string(path).map_err(PipelineError::io(path))?;
    let file: FunsdFile = serde_json::from_str(&text).map_err(|e| annotation_error(path, e.to_string()))?;
    let labels = Dataset::Funsd.labels();
    let mut repaired = 0;
    let records = file
        .form
        .into_iter()
        .map(|e| {
            let label = labels
                .index_of(&e.label)
                .map_err(|_| annotation_error(path, format!("entity {} has unknown label `{}`", e.id, e.label)))?;
            Ok(EntityRecord {
                id: e.id,
                bbox: repair_box(e.bbox, image, path, e.id, &mut repaired)?,
                label,
                links: e.linking.iter().map(|l| (l[0], l[1])).collect(),
                table: None,
                text: e.text,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    check_links(&records, path)?;
    Ok((records, repaired))
}

fn load_funsd_dir(dir: &Path, report: &mut SkipReport) -> Result<Vec<Document>> {
    let ann = dir.join("annotations");
    let img = dir.join("images");
    let mut docs = Vec::new();
    for path in annotation_files(&ann)? {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let Some(image_path) = find_image(&img, &stem) else {
            report.skip(&path, format!("no image for `{stem}` in {}", img.display()));
            continue;
        };
        let size = image_size(&image_path)?;
        let (records, repaired_boxes) = parse_funsd(&path, size)?;
        docs.push(Document {
            id: stem,
            image_path,
            image_size: size,
            records,
            tables: Vec::new(),
            repaired_boxes,
        });
    }
    Ok(docs)
}

/// Seeded partition: returns `(kept, held_out)` with
/// `|held_out| = round(fraction * n)`, both in the original order.
pub fn partition(docs: Vec<Document>, fraction: f64, seed: u64) -> (Vec<Document>, Vec<Document>) {
    let n = docs.len();
    let take = ((fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held: BTreeSet<usize> = order[..take].iter().copied().collect();
    let (mut kept, mut out) = (Vec::new(), Vec::new());
    for (i, d) in docs.into_iter().enumerate() {
        if held.contains(&i) {
            out.push(d);
        } else {
            kept.push(d);
        }
    }
    (kept, out)
}

/// Official train/test folders, validation carved from train.
pub fn load_funsd(root: &Path, val_fraction: f64, seed: u64) -> Result<(DatasetSplits, SkipReport)> {
    let mut report = SkipReport::default();
    for sub in ["training_data", "testing_data"] {
        if !root.join(sub).join("annotations").is_dir() {
            return Err(PipelineError::Missing(format!(
                "FUNSD layout not found: {} has no {sub}/annotations",
                root.display()
            )));
        }
    }
    let train = load_funsd_dir(&root.join("training_data"), &mut report)?;
    let test = load_funsd_dir(&root.join("testing_data"), &mut report)?;
    let (train, validation) = partition(train, val_fraction, seed);
    Ok((
        DatasetSplits {
            train,
            validation,
            test,
        },
        report,
    ))
}

/// Parses one invoice annotation file; returns the image file name too.
pub fn parse_invoice(path: &Path, image_dir: &Path) -> Result<Option<(Document, String)>> {
    let text = fs::read_to_string(path).map_err(PipelineError::io(path))?;
    let file: InvoiceFile = serde_json::from_str(&text).map_err(|e| annotation_error(path, e.to_string()))?;
    let image_path = image_dir.join(&file.image);
    if !image_path.is_file() {
        return Ok(None);
    }
    let size = image_size(&image_path)?;
    let labels = Dataset::Rvlcdip.labels();
    let mut repaired = 0;
    let tables: Vec<BBox> = file
        .tables
        .iter()
        .enumerate()
        .map(|(t, raw)| repair_box(*raw, size, path, t, &mut 0))
        .collect::<Result<_>>()?;
    let records = file
        .regions
        .into_iter()
        .map(|r| {
            let label = labels
                .index_of(&r.label)
                .map_err(|_| annotation_error(path, format!("region {} has unknown label `{}`", r.id, r.label)))?;
            let bbox = repair_box(r.bbox, size, path, r.id, &mut repaired)?;
            let [cx, cy] = bbox.center();
            let table = tables
                .iter()
                .position(|t| t.xmin <= cx && cx <= t.xmax && t.ymin <= cy && cy <= t.ymax);
            Ok(EntityRecord {
                id: r.id,
                bbox,
                label,
                links: Vec::new(),
                table,
                text: r.text,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    check_links(&records, path)?;
    let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    Ok(Some((
        Document {
            id,
            image_path,
            image_size: size,
            records,
            tables,
            repaired_boxes: repaired,
        },
        file.image,
    )))
}

/// All invoices, then a seeded test split and a seeded validation split.
pub fn load_rvlcdip_invoices(
    root: &Path,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<(DatasetSplits, SkipReport)> {
    let ann = root.join("annotations");
    let img = root.join("images");
    if !ann.is_dir() {
        return Err(PipelineError::Missing(format!(
            "invoice layout not found: {} has no annotations/",
            root.display()
        )));
    }
    let mut report = SkipReport::default();
    let mut docs = Vec::new();
    for path in annotation_files(&ann)? {
        match parse_invoice(&path, &img)? {
            Some((doc, _)) => docs.push(doc),
            None => report.skip(&path, format!("referenced image missing under {}", img.display())),
        }
    }
    let (rest, test) = partition(docs, test_fraction, seed);
    let (train, validation) = partition(rest, val_fraction, seed.wrapping_add(1));
    Ok((
        DatasetSplits {
            train,
            validation,
            test,
        },
        report,
    ))
}

/// Per-class entity counts of `docs`.
pub fn label_histogram(docs: &[Document], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for d in docs {
        for r in &d.records {
            h[r.label] += 1;
        }
    }
    h
}
