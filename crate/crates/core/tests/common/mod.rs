#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use symscene::{BoundingBox, Detection, EmbeddingTable, Vocabulary};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// Vocabulary of single-token names `class0000..` / `attr000..` with
/// independent Gaussian embeddings, so every label vector is distinct.
pub fn synthetic_vocab<R: Rng>(
    rng: &mut R,
    num_classes: usize,
    num_attributes: usize,
    dim: usize,
) -> (Vocabulary, EmbeddingTable) {
    let classes: Vec<String> = (0..num_classes).map(|i| format!("class{i:04}")).collect();
    let attributes: Vec<String> = (0..num_attributes).map(|i| format!("attr{i:03}")).collect();
    let entries: Vec<(String, Vec<f64>)> = classes
        .iter()
        .chain(&attributes)
        .map(|n| (n.clone(), (0..dim).map(|_| gaussian(rng)).collect()))
        .collect();
    let table = EmbeddingTable::from_entries(dim, entries).unwrap();
    (Vocabulary::new(classes, attributes).unwrap(), table)
}

pub fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_box<R: Rng>(rng: &mut R, w: f64, h: f64) -> BoundingBox {
    let x1 = rng.gen_range(0.0..w * 0.9);
    let y1 = rng.gen_range(0.0..h * 0.9);
    let x2 = rng.gen_range(x1 + 1.0..=w);
    let y2 = rng.gen_range(y1 + 1.0..=h);
    BoundingBox::new(x1, y1, x2, y2).unwrap()
}

pub fn random_detection<R: Rng>(rng: &mut R, w: f64, h: f64, num_classes: usize, num_attributes: usize) -> Detection {
    let class_scores = (0..num_classes).map(|_| rng.gen_range(0.0..1.0)).collect();
    let attribute_scores = (0..num_attributes).map(|_| rng.gen_range(0.0..1.0)).collect();
    Detection::new(random_box(rng, w, h), class_scores, attribute_scores).unwrap()
}

/// Indices of the `k` largest scores, largest first, ties to the lower index.
pub fn ranked(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Reference IoU written out independently of the library.
pub fn ref_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Softmax over Gaussian logits with standard deviation `sigma`: peaked,
/// detector-like scores that sum to one.
pub fn softmax_scores<R: Rng>(rng: &mut R, n: usize, sigma: f64) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|_| sigma * gaussian(rng)).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}
