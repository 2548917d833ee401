//! Detection quality metrics: class-agnostic AP/AR over greedy IoU matching,
//! and accuracy/precision/recall/F1 of class and attribute predictions on the
//! matched pairs.
//!
//! Conventions:
//! - AP is all-point interpolated at a single IoU threshold.
//! - Class accuracy is top-1 (argmax) accuracy. Class P/R/F1 are micro
//!   averages of one-vs-rest counts over the ground-truth classes present in
//!   the matched pairs.
//! - Attribute accuracy is the mean Jaccard index of predicted and true
//!   attribute sets (a pair with both sets empty scores 1). It is not the
//!   exact-match ratio.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{self, id_string, Detection, Scene};
use crate::geometry::{self, BoundingBox};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no ground-truth objects; AP and AR are undefined")]
    NoGroundTruth,
    #[error("{name} must lie in [0, 1], got {value}")]
    Threshold { name: &'static str, value: f64 },
    #[error("prediction {0} has a non-finite confidence")]
    Confidence(usize),
    #[error("max_dets must be positive")]
    MaxDets,
    #[error("attribute top-k must be positive")]
    AttributeTopK,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: {message}")]
    Annotation { line: usize, message: String },
    #[error("image id {0:?} appears more than once")]
    DuplicateImage(String),
    #[error("scene {0} has no image_id")]
    MissingImageId(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_index: usize,
    #[serde(default)]
    pub attribute_indices: BTreeSet<usize>,
}

/// Result of greedy one-to-one matching between predictions and ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Matching {
    /// `(prediction, ground truth)` in the order they were claimed.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

fn check_unit(name: &'static str, value: f64) -> Result<(), MetricsError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(MetricsError::Threshold { name, value })
    }
}

/// Predictions are visited by descending confidence (ties: lower index
/// first); each claims the unclaimed ground truth with the highest IoU at or
/// above `iou_threshold` (ties: lower ground-truth index).
pub fn match_detections(
    preds: &[(BoundingBox, f64)],
    gts: &[BoundingBox],
    iou_threshold: f64,
) -> Result<Matching, MetricsError> {
    check_unit("iou_threshold", iou_threshold)?;
    let confidences: Vec<f64> = preds.iter().map(|p| p.1).collect();
    if let Some(i) = confidences.iter().position(|c| !c.is_finite()) {
        return Err(MetricsError::Confidence(i));
    }
    let mut claimed = vec![false; gts.len()];
    let mut m = Matching::default();
    for p in geometry::score_order(&confidences) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if claimed[g] {
                continue;
            }
            let v = geometry::iou(&preds[p].0, gt);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                claimed[g] = true;
                m.pairs.push((p, g));
            }
            None => m.unmatched_preds.push(p),
        }
    }
    m.unmatched_preds.sort_unstable();
    m.unmatched_gts = (0..gts.len()).filter(|&g| !claimed[g]).collect();
    Ok(m)
}

/// Predictions and annotations for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub image_id: String,
    pub preds: Vec<Detection>,
    pub gts: Vec<GroundTruthObject>,
}

impl EvalImage {
    fn scored_boxes(&self) -> Vec<(BoundingBox, f64)> {
        self.preds.iter().map(|d| (d.bbox, d.confidence())).collect()
    }

    fn gt_boxes(&self) -> Vec<BoundingBox> {
        self.gts.iter().map(|g| g.bbox).collect()
    }

    pub fn matching(&self, iou_threshold: f64) -> Result<Matching, MetricsError> {
        match_detections(&self.scored_boxes(), &self.gt_boxes(), iou_threshold)
    }
}

fn total_gts(images: &[EvalImage]) -> Result<usize, MetricsError> {
    match images.iter().map(|i| i.gts.len()).sum() {
        0 => Err(MetricsError::NoGroundTruth),
        n => Ok(n),
    }
}

/// All-point interpolated average precision over a dataset, class agnostic.
pub fn average_precision(images: &[EvalImage], iou_threshold: f64) -> Result<f64, MetricsError> {
    check_unit("iou_threshold", iou_threshold)?;
    let num_gts = total_gts(images)?;

    // (confidence, true positive) for every prediction in the dataset
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    for image in images {
        let m = image.matching(iou_threshold)?;
        let mut tp = vec![false; image.preds.len()];
        for &(p, _) in &m.pairs {
            tp[p] = true;
        }
        ranked.extend(image.preds.iter().zip(tp).map(|(d, t)| (d.confidence(), t)));
    }
    // stable sort keeps image then prediction order among equal confidences
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut tp_count = 0usize;
    let precisions: Vec<f64> = ranked
        .iter()
        .enumerate()
        .map(|(i, &(_, tp))| {
            tp_count += tp as usize;
            tp_count as f64 / (i + 1) as f64
        })
        .collect();

    let mut envelope = 0.0f64;
    let mut ap = 0.0;
    for (p, &(_, tp)) in precisions.iter().zip(&ranked).rev() {
        envelope = envelope.max(*p);
        if tp {
            ap += envelope;
        }
    }
    Ok((ap / num_gts as f64).clamp(0.0, 1.0))
}

/// Fraction of ground-truth objects matched when each image keeps only its
/// `max_dets` most confident predictions.
pub fn average_recall(images: &[EvalImage], iou_threshold: f64, max_dets: usize) -> Result<f64, MetricsError> {
    check_unit("iou_threshold", iou_threshold)?;
    if max_dets == 0 {
        return Err(MetricsError::MaxDets);
    }
    let num_gts = total_gts(images)?;
    let mut matched = 0;
    for image in images {
        let scored = image.scored_boxes();
        let confidences: Vec<f64> = scored.iter().map(|s| s.1).collect();
        let top: Vec<(BoundingBox, f64)> = geometry::score_order(&confidences)
            .into_iter()
            .take(max_dets)
            .map(|i| scored[i])
            .collect();
        matched += match_detections(&top, &image.gt_boxes(), iou_threshold)?.pairs.len();
    }
    Ok(matched as f64 / num_gts as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Class metrics over `(predicted class, true class)` pairs; `None` when empty.
pub fn class_scores_from_labels(pairs: &[(usize, usize)]) -> Option<PredictionScores> {
    if pairs.is_empty() {
        return None;
    }
    let classes: HashSet<usize> = pairs.iter().map(|&(_, gt)| gt).collect();
    let correct = pairs.iter().filter(|(p, g)| p == g).count();
    // one-vs-rest counts summed over the ground-truth classes
    let predicted_in_scope = pairs.iter().filter(|(p, _)| classes.contains(p)).count();
    let accuracy = correct as f64 / pairs.len() as f64;
    let precision = if predicted_in_scope > 0 {
        correct as f64 / predicted_in_scope as f64
    } else {
        0.0
    };
    let recall = accuracy;
    Some(PredictionScores {
        accuracy,
        precision,
        recall,
        f1: f1_score(precision, recall),
    })
}

pub fn class_metrics(matching: &Matching, preds: &[Detection], gts: &[GroundTruthObject]) -> Option<PredictionScores> {
    class_scores_from_labels(&class_label_pairs(matching, preds, gts))
}

fn class_label_pairs(matching: &Matching, preds: &[Detection], gts: &[GroundTruthObject]) -> Vec<(usize, usize)> {
    matching
        .pairs
        .iter()
        .map(|&(p, g)| (preds[p].predicted_class().unwrap_or(usize::MAX), gts[g].class_index))
        .collect()
}

/// How a prediction's attribute scores become a predicted attribute set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeMode {
    /// Every attribute scoring strictly above the threshold.
    Threshold(f64),
    /// The k highest-scoring attributes.
    TopK(usize),
}

impl AttributeMode {
    fn validate(&self) -> Result<(), MetricsError> {
        match *self {
            Self::Threshold(t) => check_unit("attr_threshold", t),
            Self::TopK(0) => Err(MetricsError::AttributeTopK),
            Self::TopK(_) => Ok(()),
        }
    }

    pub fn predicted_set(&self, scores: &[f64]) -> BTreeSet<usize> {
        match *self {
            Self::Threshold(t) => scores
                .iter()
                .enumerate()
                .filter(|(_, &s)| s > t)
                .map(|(i, _)| i)
                .collect(),
            Self::TopK(k) => detection::top_k(scores, k.min(scores.len()).max(1))
                .map(|t| t.indices().collect())
                .unwrap_or_default(),
        }
    }
}

/// Multi-label metrics over `(predicted set, true set)` pairs; `None` when empty.
///
/// A ratio whose denominator is zero is 1 when its numerator's counterpart
/// is also empty (nothing predicted, nothing expected) and 0 otherwise.
pub fn attribute_scores_from_sets(pairs: &[(BTreeSet<usize>, BTreeSet<usize>)]) -> Option<PredictionScores> {
    if pairs.is_empty() {
        return None;
    }
    let (mut hits, mut predicted, mut expected) = (0usize, 0usize, 0usize);
    let mut jaccard = 0.0;
    for (pred, gt) in pairs {
        let inter = pred.intersection(gt).count();
        let union = pred.union(gt).count();
        hits += inter;
        predicted += pred.len();
        expected += gt.len();
        jaccard += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    let ratio = |num: usize, den: usize, other: usize| match (den, other) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => num as f64 / den as f64,
    };
    let precision = ratio(hits, predicted, expected);
    let recall = ratio(hits, expected, predicted);
    Some(PredictionScores {
        accuracy: jaccard / pairs.len() as f64,
        precision,
        recall,
        f1: f1_score(precision, recall),
    })
}

fn attribute_set_pairs(
    matching: &Matching,
    preds: &[Detection],
    gts: &[GroundTruthObject],
    mode: AttributeMode,
) -> Vec<(BTreeSet<usize>, BTreeSet<usize>)> {
    matching
        .pairs
        .iter()
        .map(|&(p, g)| {
            (
                mode.predicted_set(&preds[p].attribute_scores),
                gts[g].attribute_indices.clone(),
            )
        })
        .collect()
}

pub fn attribute_metrics(
    matching: &Matching,
    preds: &[Detection],
    gts: &[GroundTruthObject],
    mode: AttributeMode,
) -> Result<Option<PredictionScores>, MetricsError> {
    mode.validate()?;
    Ok(attribute_scores_from_sets(&attribute_set_pairs(
        matching, preds, gts, mode,
    )))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalParams {
    pub iou_threshold: f64,
    pub max_dets: usize,
    pub attribute_mode: AttributeMode,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            max_dets: 100,
            attribute_mode: AttributeMode::Threshold(0.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct EvalCounts {
    pub images: usize,
    pub predictions: usize,
    pub ground_truths: usize,
    pub matched: usize,
    pub unmatched_predictions: usize,
    pub unmatched_ground_truths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ar: f64,
    /// `None` (JSON `null`) when nothing was matched.
    pub class_metrics: Option<PredictionScores>,
    pub attribute_metrics: Option<PredictionScores>,
    pub counts: EvalCounts,
}

pub fn evaluate(images: &[EvalImage], params: &EvalParams) -> Result<EvalReport, MetricsError> {
    params.attribute_mode.validate()?;
    let ap = average_precision(images, params.iou_threshold)?;
    let ar = average_recall(images, params.iou_threshold, params.max_dets)?;

    let mut counts = EvalCounts {
        images: images.len(),
        ..Default::default()
    };
    let mut class_pairs = Vec::new();
    let mut attribute_pairs = Vec::new();
    for image in images {
        let m = image.matching(params.iou_threshold)?;
        counts.predictions += image.preds.len();
        counts.ground_truths += image.gts.len();
        counts.matched += m.pairs.len();
        counts.unmatched_predictions += m.unmatched_preds.len();
        counts.unmatched_ground_truths += m.unmatched_gts.len();
        class_pairs.extend(class_label_pairs(&m, &image.preds, &image.gts));
        attribute_pairs.extend(attribute_set_pairs(&m, &image.preds, &image.gts, params.attribute_mode));
    }
    Ok(EvalReport {
        ap,
        ar,
        class_metrics: class_scores_from_labels(&class_pairs),
        attribute_metrics: attribute_scores_from_sets(&attribute_pairs),
        counts,
    })
}

impl EvalReport {
    /// Plain-text table: AP, AR, then A/P/R/F1 for classes and attributes,
    /// all as percentages.
    pub fn to_table(&self, name: &str) -> String {
        let pct = |v: f64| format!("{:>7.2}", 100.0 * v);
        let group = |s: &Option<PredictionScores>| match s {
            Some(s) => [s.accuracy, s.precision, s.recall, s.f1].map(pct).join(" "),
            None => ["n/a"; 4].map(|x| format!("{x:>7}")).join(" "),
        };
        let width = name.len().max(4);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:width$} | {:^15} | {:^31} | {:^31}",
            "", "Detection", "Class Prediction", "Attribute Prediction"
        );
        let _ = writeln!(
            out,
            "{:width$} | {:>7} {:>7} | {:>7} {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7} {:>7}",
            "Name", "AP", "AR", "A", "P", "R", "F1", "A", "P", "R", "F1"
        );
        let _ = writeln!(
            out,
            "{:width$} | {} {} | {} | {}",
            name,
            pct(self.ap),
            pct(self.ar),
            group(&self.class_metrics),
            group(&self.attribute_metrics)
        );
        out
    }
}

#[derive(Deserialize)]
struct RawAnnotation {
    image_id: serde_json::Value,
    #[serde(default)]
    objects: Vec<GroundTruthObject>,
}

/// Read `{image_id, objects: [...]}` lines, checking indices against the
/// vocabulary sizes.
pub fn read_ground_truth(
    path: impl AsRef<Path>,
    num_classes: usize,
    num_attributes: usize,
) -> Result<Vec<(String, Vec<GroundTruthObject>)>, MetricsError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let raw: RawAnnotation =
            serde_json::from_str(line).map_err(|source| MetricsError::Json { line: line_no, source })?;
        for (o, obj) in raw.objects.iter().enumerate() {
            if obj.class_index >= num_classes {
                return Err(MetricsError::Annotation {
                    line: line_no,
                    message: format!("object {o}: class_index {} >= {num_classes}", obj.class_index),
                });
            }
            if let Some(a) = obj.attribute_indices.iter().find(|&&a| a >= num_attributes) {
                return Err(MetricsError::Annotation {
                    line: line_no,
                    message: format!("object {o}: attribute index {a} >= {num_attributes}"),
                });
            }
        }
        out.push((id_string(&raw.image_id), raw.objects));
    }
    Ok(out)
}

/// Pair prediction scenes with annotations by image id. Annotated images
/// without predictions get none; predicted images without annotations enter
/// with no ground truth, so all their predictions count as false positives.
pub fn join_dataset(
    predictions: Vec<Scene>,
    ground_truth: Vec<(String, Vec<GroundTruthObject>)>,
) -> Result<Vec<EvalImage>, MetricsError> {
    let mut by_id: HashMap<String, Vec<Detection>> = HashMap::new();
    let mut pred_order = Vec::new();
    for (i, scene) in predictions.into_iter().enumerate() {
        let id = scene.id.ok_or(MetricsError::MissingImageId(i))?;
        if by_id.insert(id.clone(), scene.detections).is_some() {
            return Err(MetricsError::DuplicateImage(id));
        }
        pred_order.push(id);
    }
    let mut seen = HashSet::new();
    let mut images = Vec::new();
    for (image_id, gts) in ground_truth {
        if !seen.insert(image_id.clone()) {
            return Err(MetricsError::DuplicateImage(image_id));
        }
        let preds = by_id.remove(&image_id).unwrap_or_default();
        images.push(EvalImage { image_id, preds, gts });
    }
    for id in pred_order {
        if let Some(preds) = by_id.remove(&id) {
            images.push(EvalImage {
                image_id: id,
                preds,
                gts: Vec::new(),
            });
        }
    }
    Ok(images)
}
