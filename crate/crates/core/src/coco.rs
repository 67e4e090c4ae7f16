//! COCO-style annotation ingestion and the on-disk dataset layout.
//!
//! A dataset directory holds `annotations.json` plus an `images/` folder with
//! the files referenced by it. Boxes are converted from COCO `(x, y, w, h)`
//! to corner form and category ids are remapped to a dense 0-based index.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned ground-truth box in pixel corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub category_id: usize,
}

impl GroundTruthBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, category_id: usize) -> Result<Self> {
        if !(x_max > x_min && y_max > y_min) {
            return Err(Error::Annotation(format!(
                "degenerate box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
            category_id,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }
}

/// The three DENTEX-format detection tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Quadrant,
    Enumeration,
    Disease,
}

impl TaskKind {
    /// Largest category set the task admits (4 quadrants, 32 teeth,
    /// 4 disease classes).
    pub fn max_categories(self) -> usize {
        match self {
            TaskKind::Quadrant => 4,
            TaskKind::Enumeration => 32,
            TaskKind::Disease => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Quadrant => "quadrant",
            TaskKind::Enumeration => "enumeration",
            TaskKind::Disease => "disease",
        }
    }
}

/// All ground truth for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: u64,
    pub file_name: String,
    pub boxes: Vec<GroundTruthBox>,
    pub task: TaskKind,
}

// --- raw COCO JSON schema -------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: i64,
    /// COCO convention: `[x, y, width, height]`.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: i64,
    pub name: String,
}

/// One detection in COCO-results form, for interoperability with external
/// evaluators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: usize,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
    pub score: f64,
}

// --- loading --------------------------------------------------------------

/// Category table mapping raw COCO ids to the dense 0-based index, ordered
/// by raw id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryTable {
    pub names: Vec<String>,
    pub raw_ids: Vec<i64>,
}

impl CategoryTable {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dense_of_raw(&self, raw: i64) -> Option<usize> {
        self.raw_ids.iter().position(|&r| r == raw)
    }
}

/// Parsed dataset annotations: one record per image (empty-box images
/// included), plus the dense category table.
#[derive(Debug, Clone)]
pub struct LoadedAnnotations {
    pub records: Vec<AnnotationRecord>,
    pub categories: CategoryTable,
}

pub fn parse_coco_file(path: &Path) -> Result<CocoFile> {
    let text = fs::read_to_string(path).map_err(|source| Error::io(path, source))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Load a COCO-style annotation file for the given task.
///
/// One `AnnotationRecord` per listed image, in file order; every annotation
/// lands in exactly one record. Categories are remapped (sorted by raw id)
/// to dense indices `0..n`.
pub fn load_coco_annotations(path: &Path, task: TaskKind) -> Result<LoadedAnnotations> {
    let file = parse_coco_file(path)?;
    annotations_from_coco(&file, task)
}

pub fn annotations_from_coco(file: &CocoFile, task: TaskKind) -> Result<LoadedAnnotations> {
    if file.categories.len() > task.max_categories() {
        return Err(Error::Annotation(format!(
            "{} categories declared but task `{}` admits at most {}",
            file.categories.len(),
            task.as_str(),
            task.max_categories()
        )));
    }
    let mut cats: Vec<&CocoCategory> = file.categories.iter().collect();
    cats.sort_by_key(|c| c.id);
    let categories = CategoryTable {
        names: cats.iter().map(|c| c.name.clone()).collect(),
        raw_ids: cats.iter().map(|c| c.id).collect(),
    };

    let mut by_image: BTreeMap<u64, Vec<GroundTruthBox>> = BTreeMap::new();
    let mut order: Vec<(u64, String)> = Vec::with_capacity(file.images.len());
    let mut bounds: HashMap<u64, (f64, f64)> = HashMap::new();
    for img in &file.images {
        if by_image.insert(img.id, Vec::new()).is_some() {
            return Err(Error::Annotation(format!("duplicate image id {}", img.id)));
        }
        order.push((img.id, img.file_name.clone()));
        bounds.insert(img.id, (img.width as f64, img.height as f64));
    }

    for ann in &file.annotations {
        let dense = categories.dense_of_raw(ann.category_id).ok_or_else(|| {
            Error::Annotation(format!(
                "annotation {} uses category {} outside the declared task set",
                ann.id, ann.category_id
            ))
        })?;
        let boxes = by_image.get_mut(&ann.image_id).ok_or_else(|| {
            Error::Annotation(format!(
                "annotation {} references unknown image id {}",
                ann.id, ann.image_id
            ))
        })?;
        let [x, y, w, h] = ann.bbox;
        boxes.push(GroundTruthBox::new(x, y, x + w, y + h, dense)?);
    }

    let records = order
        .into_iter()
        .map(|(image_id, file_name)| {
            let boxes = by_image.remove(&image_id).unwrap_or_default();
            let (w, h) = bounds[&image_id];
            for b in &boxes {
                if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > w || b.y_max > h {
                    return Err(Error::Annotation(format!(
                        "box [{}, {}, {}, {}] exceeds image {} bounds {}x{}",
                        b.x_min, b.y_min, b.x_max, b.y_max, image_id, w, h
                    )));
                }
            }
            Ok(AnnotationRecord {
                image_id,
                file_name,
                boxes,
                task,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(LoadedAnnotations {
        records,
        categories,
    })
}

// --- dataset directories --------------------------------------------------

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const IMAGE_DIR: &str = "images";

pub fn annotation_path(dataset_dir: &Path) -> PathBuf {
    dataset_dir.join(ANNOTATION_FILE)
}

pub fn image_path(dataset_dir: &Path, file_name: &str) -> PathBuf {
    dataset_dir.join(IMAGE_DIR).join(file_name)
}

/// Serialize a COCO file deterministically (stable field and entry order).
pub fn write_coco_file(file: &CocoFile, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(file).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|source| Error::io(path, source))
}

pub fn write_results(results: &[CocoResult], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(results).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|source| Error::io(path, source))
}

pub fn read_results(path: &Path) -> Result<Vec<CocoResult>> {
    let text = fs::read_to_string(path).map_err(|source| Error::io(path, source))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_coco() -> CocoFile {
        CocoFile {
            images: vec![CocoImage {
                id: 7,
                file_name: "a.png".into(),
                width: 100,
                height: 80,
            }],
            annotations: vec![
                CocoAnnotation {
                    id: 1,
                    image_id: 7,
                    category_id: 11,
                    bbox: [10.0, 20.0, 30.0, 40.0],
                    area: 1200.0,
                    iscrowd: 0,
                },
                CocoAnnotation {
                    id: 2,
                    image_id: 7,
                    category_id: 12,
                    bbox: [5.0, 5.0, 10.0, 10.0],
                    area: 100.0,
                    iscrowd: 0,
                },
            ],
            categories: vec![
                CocoCategory {
                    id: 11,
                    name: "caries".into(),
                },
                CocoCategory {
                    id: 12,
                    name: "deep caries".into(),
                },
            ],
        }
    }

    #[test]
    fn one_record_two_boxes() {
        let loaded = annotations_from_coco(&small_coco(), TaskKind::Disease).unwrap();
        assert_eq!(loaded.records.len(), 1);
        assert_eq!(loaded.records[0].boxes.len(), 2);
    }

    #[test]
    fn bbox_converts_xywh_to_corners() {
        // (x, y, w, h) = (10, 20, 30, 40) -> corners (10, 20, 40, 60)
        let loaded = annotations_from_coco(&small_coco(), TaskKind::Disease).unwrap();
        let b = &loaded.records[0].boxes[0];
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (10.0, 20.0, 40.0, 60.0));
    }

    #[test]
    fn disease_categories_remap_densely() {
        let mut file = small_coco();
        file.categories = vec![
            CocoCategory { id: 4, name: "impacted".into() },
            CocoCategory { id: 1, name: "caries".into() },
            CocoCategory { id: 3, name: "periapical lesion".into() },
            CocoCategory { id: 2, name: "deep caries".into() },
        ];
        file.annotations[0].category_id = 1;
        file.annotations[1].category_id = 4;
        let loaded = annotations_from_coco(&file, TaskKind::Disease).unwrap();
        assert_eq!(
            loaded.categories.names,
            vec!["caries", "deep caries", "periapical lesion", "impacted"]
        );
        assert_eq!(loaded.records[0].boxes[0].category_id, 0);
        assert_eq!(loaded.records[0].boxes[1].category_id, 3);
    }

    #[test]
    fn unknown_image_id_rejected() {
        let mut file = small_coco();
        file.annotations[0].image_id = 99;
        let err = annotations_from_coco(&file, TaskKind::Disease).unwrap_err();
        assert!(err.to_string().contains("unknown image id"));
    }

    #[test]
    fn category_outside_task_set_rejected() {
        let mut file = small_coco();
        file.annotations[0].category_id = 999;
        assert!(annotations_from_coco(&file, TaskKind::Disease).is_err());
    }

    #[test]
    fn too_many_categories_for_task_rejected() {
        let mut file = small_coco();
        for i in 0..5 {
            file.categories.push(CocoCategory {
                id: 100 + i,
                name: format!("extra{i}"),
            });
        }
        assert!(annotations_from_coco(&file, TaskKind::Disease).is_err());
    }

    #[test]
    fn missing_file_and_malformed_json_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.json");
        assert!(matches!(
            load_coco_annotations(&missing, TaskKind::Disease),
            Err(Error::Io { .. })
        ));
        let bad = dir.path().join("bad.json");
        fs::write(&bad, "{not json").unwrap();
        assert!(matches!(
            load_coco_annotations(&bad, TaskKind::Disease),
            Err(Error::Json { .. })
        ));
    }

    #[test]
    fn out_of_bounds_box_rejected() {
        let mut file = small_coco();
        file.annotations[0].bbox = [90.0, 0.0, 30.0, 10.0]; // x_max = 120 > 100
        assert!(annotations_from_coco(&file, TaskKind::Disease).is_err());
    }
}
