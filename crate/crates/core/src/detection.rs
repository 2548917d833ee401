//! Detector output model and post-processing: confidence thresholding, NMS,
//! and top-k class/attribute selection.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, BoundingBox, GeometryError};

pub const DEFAULT_NUM_CLASSES: usize = 1600;
pub const DEFAULT_NUM_ATTRIBUTES: usize = 400;

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{kind} score {index} = {value} is outside [0, 1]")]
    ScoreRange { kind: ScoreKind, index: usize, value: f64 },
    #[error("expected {expected} {kind} scores, found {found}")]
    ScoreLength {
        kind: ScoreKind,
        expected: usize,
        found: usize,
    },
    #[error("sparse {kind} score index {index} out of range for {len} entries")]
    SparseIndex { kind: ScoreKind, index: usize, len: usize },
    #[error("{kind} scores given both densely and sparsely")]
    AmbiguousScores { kind: ScoreKind },
    #[error("{kind} scores missing")]
    MissingScores { kind: ScoreKind },
    #[error("{name} must lie in [0, 1], got {value}")]
    Threshold { name: &'static str, value: f64 },
    #[error("max_objects must be positive")]
    MaxObjects,
    #[error("top-k with k = {k} requested from {len} scores")]
    TopK { k: usize, len: usize },
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: {source}")]
    Invalid { line: usize, source: Box<DetectionError> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Class,
    Attribute,
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreKind::Class => "class",
            ScoreKind::Attribute => "attribute",
        })
    }
}

/// One detected object.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_scores: Vec<f64>,
    pub attribute_scores: Vec<f64>,
}

fn check_scores(kind: ScoreKind, scores: &[f64]) -> Result<(), DetectionError> {
    match scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
        Some(index) => Err(DetectionError::ScoreRange {
            kind,
            index,
            value: scores[index],
        }),
        None => Ok(()),
    }
}

impl Detection {
    pub fn new(bbox: BoundingBox, class_scores: Vec<f64>, attribute_scores: Vec<f64>) -> Result<Self, DetectionError> {
        check_scores(ScoreKind::Class, &class_scores)?;
        check_scores(ScoreKind::Attribute, &attribute_scores)?;
        Ok(Self {
            bbox,
            class_scores,
            attribute_scores,
        })
    }

    /// Max class score.
    pub fn confidence(&self) -> f64 {
        self.class_scores.iter().copied().fold(0.0, f64::max)
    }

    /// Highest-scoring class, lowest index on ties. `None` for an empty score vector.
    pub fn predicted_class(&self) -> Option<usize> {
        argmax(&self.class_scores)
    }

    pub fn check_lengths(&self, num_classes: usize, num_attributes: usize) -> Result<(), DetectionError> {
        if self.class_scores.len() != num_classes {
            return Err(DetectionError::ScoreLength {
                kind: ScoreKind::Class,
                expected: num_classes,
                found: self.class_scores.len(),
            });
        }
        if self.attribute_scores.len() != num_attributes {
            return Err(DetectionError::ScoreLength {
                kind: ScoreKind::Attribute,
                expected: num_attributes,
                found: self.attribute_scores.len(),
            });
        }
        Ok(())
    }
}

pub(crate) fn argmax(scores: &[f64]) -> Option<usize> {
    geometry::score_order(scores).first().copied()
}

/// Class and attribute label names, index-aligned with the score vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    class_names: Vec<String>,
    attribute_names: Vec<String>,
}

fn check_names(kind: &str, names: &[String]) -> Result<(), DetectionError> {
    let mut seen = HashSet::new();
    for (i, name) in names.iter().enumerate() {
        if name.trim().is_empty() {
            return Err(DetectionError::Vocabulary(format!("{kind} name {i} is empty")));
        }
        if !seen.insert(name.as_str()) {
            return Err(DetectionError::Vocabulary(format!(
                "{kind} name {name:?} appears more than once"
            )));
        }
    }
    Ok(())
}

fn read_names(path: &Path) -> Result<Vec<String>, DetectionError> {
    let text = fs::read_to_string(path).map_err(|source| DetectionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

impl Vocabulary {
    pub fn new(class_names: Vec<String>, attribute_names: Vec<String>) -> Result<Self, DetectionError> {
        check_names("class", &class_names)?;
        check_names("attribute", &attribute_names)?;
        Ok(Self {
            class_names,
            attribute_names,
        })
    }

    /// One label per line; blank lines are ignored.
    pub fn load(classes: impl AsRef<Path>, attributes: impl AsRef<Path>) -> Result<Self, DetectionError> {
        Self::new(read_names(classes.as_ref())?, read_names(attributes.as_ref())?)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.attribute_names.len()
    }
}

/// The k highest scores with their vocabulary indices, descending, ties by
/// ascending index.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub entries: Vec<(usize, f64)>,
}

impl TopK {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn top_k(scores: &[f64], k: usize) -> Result<TopK, DetectionError> {
    if k == 0 || k > scores.len() {
        return Err(DetectionError::TopK { k, len: scores.len() });
    }
    let mut order = geometry::score_order(scores);
    order.truncate(k);
    Ok(TopK {
        entries: order.into_iter().map(|i| (i, scores[i])).collect(),
    })
}

/// `s_i / sum(s)`, or uniform weights when every score is zero.
pub fn normalized_topk_weights(t: &TopK) -> Vec<f64> {
    let total: f64 = t.scores().sum();
    if total > 0.0 {
        t.scores().map(|s| s / total).collect()
    } else {
        vec![1.0 / t.len() as f64; t.len()]
    }
}

/// One image's worth of detections.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scene {
    #[serde(rename = "image_id", skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub image_w: f64,
    pub image_h: f64,
    pub detections: Vec<Detection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub captions: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionParams {
    pub score_threshold: f64,
    pub iou_threshold: f64,
    pub max_objects: usize,
    /// Run NMS per predicted class instead of across all classes.
    pub class_aware: bool,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            score_threshold: 0.2,
            iou_threshold: 0.5,
            max_objects: 100,
            class_aware: false,
        }
    }
}

impl SelectionParams {
    pub fn validate(&self) -> Result<(), DetectionError> {
        for (name, value) in [
            ("score_threshold", self.score_threshold),
            ("iou_threshold", self.iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(DetectionError::Threshold { name, value });
            }
        }
        if self.max_objects == 0 {
            return Err(DetectionError::MaxObjects);
        }
        Ok(())
    }
}

/// Indices of the detections that survive thresholding, NMS and the object
/// cap, in descending confidence order.
pub fn select_indices(scene: &Scene, params: &SelectionParams) -> Result<Vec<usize>, DetectionError> {
    params.validate()?;
    let candidates: Vec<usize> = scene
        .detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.confidence() > params.score_threshold)
        .map(|(i, _)| i)
        .collect();
    let scored: Vec<(BoundingBox, f64)> = candidates
        .iter()
        .map(|&i| (scene.detections[i].bbox, scene.detections[i].confidence()))
        .collect();
    let kept = if params.class_aware {
        let groups: Vec<usize> = candidates
            .iter()
            .map(|&i| scene.detections[i].predicted_class().unwrap_or(0))
            .collect();
        geometry::nms_grouped(&scored, &groups, params.iou_threshold)?
    } else {
        geometry::nms(&scored, params.iou_threshold)?
    };
    Ok(kept
        .into_iter()
        .take(params.max_objects)
        .map(|k| candidates[k])
        .collect())
}

pub fn select_objects(scene: &Scene, params: &SelectionParams) -> Result<Vec<Detection>, DetectionError> {
    Ok(select_indices(scene, params)?
        .into_iter()
        .map(|i| scene.detections[i].clone())
        .collect())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    #[serde(rename = "box")]
    bbox: BoundingBox,
    class_scores: Option<Vec<f64>>,
    class_scores_sparse: Option<Vec<(usize, f64)>>,
    attribute_scores: Option<Vec<f64>>,
    attribute_scores_sparse: Option<Vec<(usize, f64)>>,
}

#[derive(Deserialize)]
struct RawScene {
    image_id: Option<serde_json::Value>,
    scene_id: Option<serde_json::Value>,
    image_w: f64,
    image_h: f64,
    #[serde(default)]
    detections: Vec<RawDetection>,
    captions: Option<Vec<String>>,
}

fn densify(
    kind: ScoreKind,
    dense: Option<Vec<f64>>,
    sparse: Option<Vec<(usize, f64)>>,
    len: usize,
) -> Result<Vec<f64>, DetectionError> {
    match (dense, sparse) {
        (Some(_), Some(_)) => Err(DetectionError::AmbiguousScores { kind }),
        (None, None) => Err(DetectionError::MissingScores { kind }),
        (Some(v), None) if v.len() != len => Err(DetectionError::ScoreLength {
            kind,
            expected: len,
            found: v.len(),
        }),
        (Some(v), None) => Ok(v),
        (None, Some(pairs)) => {
            let mut v = vec![0.0; len];
            for (index, score) in pairs {
                *v.get_mut(index)
                    .ok_or(DetectionError::SparseIndex { kind, index, len })? = score;
            }
            Ok(v)
        }
    }
}

/// JSON ids may be strings or numbers; both become strings.
pub(crate) fn id_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl Scene {
    /// Parse one JSON scene object, expanding sparse score lists to the
    /// configured vector lengths.
    pub fn from_json(text: &str, num_classes: usize, num_attributes: usize) -> Result<Self, DetectionError> {
        let raw: RawScene = serde_json::from_str(text).map_err(|source| DetectionError::Json { line: 0, source })?;
        Self::from_raw(raw, num_classes, num_attributes)
    }

    fn from_raw(raw: RawScene, num_classes: usize, num_attributes: usize) -> Result<Self, DetectionError> {
        if !(raw.image_w > 0.0 && raw.image_h > 0.0 && raw.image_w.is_finite() && raw.image_h.is_finite()) {
            return Err(GeometryError::ImageSize(raw.image_w, raw.image_h).into());
        }
        let detections = raw
            .detections
            .into_iter()
            .map(|d| {
                let class_scores = densify(ScoreKind::Class, d.class_scores, d.class_scores_sparse, num_classes)?;
                let attribute_scores = densify(
                    ScoreKind::Attribute,
                    d.attribute_scores,
                    d.attribute_scores_sparse,
                    num_attributes,
                )?;
                Detection::new(d.bbox, class_scores, attribute_scores)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Scene {
            id: raw.image_id.or(raw.scene_id).as_ref().map(id_string),
            image_w: raw.image_w,
            image_h: raw.image_h,
            detections,
            captions: raw.captions,
        })
    }
}

/// Read a scene-per-line JSON file. Blank lines are skipped; errors carry
/// the 1-based line number.
pub fn read_scenes(
    path: impl AsRef<Path>,
    num_classes: usize,
    num_attributes: usize,
) -> Result<Vec<Scene>, DetectionError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| DetectionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut scenes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DetectionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawScene =
            serde_json::from_str(&line).map_err(|source| DetectionError::Json { line: i + 1, source })?;
        let scene = Scene::from_raw(raw, num_classes, num_attributes).map_err(|e| DetectionError::Invalid {
            line: i + 1,
            source: Box::new(e),
        })?;
        scenes.push(scene);
    }
    Ok(scenes)
}
