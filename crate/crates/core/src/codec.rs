//! Per-object encodings that leave the device.
//!
//! Two fixed-width layouts share the 2048-wide vector:
//!
//! ```text
//! symbolic (PRIVATE), k = 5, dim = 300
//!   [0, 1500)     class-name embeddings of the top-5 classes, rank order
//!   [1500, 1800)  weighted sum of the top-5 attribute-name embeddings
//!   [1800, 1804)  box normalized to the image
//!   [1804, 1808)  box normalized to the scene envelope
//!   [1808, 2048)  zeros
//!
//! raw (AT_RISK), C = 1600, A = 400
//!   [0, 1600)     class scores
//!   [1600, 2000)  attribute scores
//!   [2000, 2008)  image box, envelope box
//!   [2008, 2048)  zeros
//! ```
//!
//! The symbolic layout keeps only which labels ranked highest, not the score
//! distribution, so distinct detections can collapse to the same vector.
//! [`Inverter`] recovers exactly what that vector still carries.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{self, Detection, DetectionError, Scene, SelectionParams, Vocabulary};
use crate::embedding::{norm, EmbeddingTable};
use crate::geometry::{self, BoundingBox, GeometryError, NormalizedBox};

/// Width of every transmitted object vector.
pub const ENCODING_DIM: usize = 2048;
pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_EMBEDDING_DIM: usize = 300;
/// Image-relative box followed by envelope-relative box.
pub const BOX_BLOCK_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("layout needs {needed} components but only {ENCODING_DIM} are available")]
    LayoutOverflow { needed: usize },
    #[error("embedding table has dimension {table}, layout expects {expected}")]
    EmbeddingDim { table: usize, expected: usize },
    #[error("vocabulary has {found} {kind} names, detections carry {expected} scores")]
    VocabularySize {
        kind: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("encoding vector has length {0}, expected {ENCODING_DIM}")]
    VectorLength(usize),
    #[error("inversion needs a PRIVATE symbolic encoding, got {0}")]
    NotSymbolic(PrivacyTier),
    #[error("symbolic encoding requires an embedding table")]
    MissingTable,
    #[error("object {index}: {source}")]
    Object { index: usize, source: Box<CodecError> },
}

/// Ordered from least to most private.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum PrivacyTier {
    NotPrivate = 0,
    AtRisk = 1,
    Private = 2,
}

impl PrivacyTier {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::NotPrivate),
            1 => Some(Self::AtRisk),
            2 => Some(Self::Private),
            _ => None,
        }
    }
}

impl fmt::Display for PrivacyTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NotPrivate => "not-private",
            Self::AtRisk => "at-risk",
            Self::Private => "private",
        })
    }
}

impl FromStr for PrivacyTier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "not-private" => Ok(Self::NotPrivate),
            "at-risk" => Ok(Self::AtRisk),
            "private" => Ok(Self::Private),
            other => Err(format!("unknown privacy tier {other:?}")),
        }
    }
}

/// Block boundaries of the symbolic layout for a given top-k and embedding size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymbolicLayout {
    top_k: usize,
    embedding_dim: usize,
}

impl SymbolicLayout {
    pub fn new(top_k: usize, embedding_dim: usize) -> Result<Self, CodecError> {
        let needed = top_k
            .checked_add(1)
            .and_then(|n| n.checked_mul(embedding_dim))
            .and_then(|n| n.checked_add(BOX_BLOCK_LEN))
            .unwrap_or(usize::MAX);
        if needed > ENCODING_DIM {
            return Err(CodecError::LayoutOverflow { needed });
        }
        if top_k == 0 || embedding_dim == 0 {
            return Err(CodecError::Detection(DetectionError::TopK {
                k: top_k,
                len: embedding_dim,
            }));
        }
        Ok(Self { top_k, embedding_dim })
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn class_block(&self) -> Range<usize> {
        0..self.top_k * self.embedding_dim
    }

    pub fn class_slot(&self, slot: usize) -> Range<usize> {
        slot * self.embedding_dim..(slot + 1) * self.embedding_dim
    }

    pub fn attribute_block(&self) -> Range<usize> {
        let start = self.class_block().end;
        start..start + self.embedding_dim
    }

    pub fn global_box(&self) -> Range<usize> {
        let start = self.attribute_block().end;
        start..start + 4
    }

    pub fn relative_box(&self) -> Range<usize> {
        let start = self.global_box().end;
        start..start + 4
    }

    /// First padding index.
    pub fn used(&self) -> usize {
        self.relative_box().end
    }
}

impl Default for SymbolicLayout {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

/// Block boundaries of the raw score layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawLayout {
    num_classes: usize,
    num_attributes: usize,
}

impl RawLayout {
    pub fn new(num_classes: usize, num_attributes: usize) -> Result<Self, CodecError> {
        let needed = num_classes
            .checked_add(num_attributes)
            .and_then(|n| n.checked_add(BOX_BLOCK_LEN))
            .unwrap_or(usize::MAX);
        if needed > ENCODING_DIM {
            return Err(CodecError::LayoutOverflow { needed });
        }
        Ok(Self {
            num_classes,
            num_attributes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_attributes(&self) -> usize {
        self.num_attributes
    }

    pub fn class_block(&self) -> Range<usize> {
        0..self.num_classes
    }

    pub fn attribute_block(&self) -> Range<usize> {
        self.num_classes..self.num_classes + self.num_attributes
    }

    pub fn global_box(&self) -> Range<usize> {
        let start = self.attribute_block().end;
        start..start + 4
    }

    pub fn relative_box(&self) -> Range<usize> {
        let start = self.global_box().end;
        start..start + 4
    }

    pub fn used(&self) -> usize {
        self.relative_box().end
    }
}

impl Default for RawLayout {
    fn default() -> Self {
        Self {
            num_classes: detection::DEFAULT_NUM_CLASSES,
            num_attributes: detection::DEFAULT_NUM_ATTRIBUTES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectEncoding {
    pub vector: Vec<f64>,
    pub tier: PrivacyTier,
}

/// Top-k class and attribute names, the word sequences a sentence encoder consumes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextualEncoding {
    pub class_words: Vec<String>,
    pub attribute_words: Vec<String>,
}

/// All selected objects of one scene, one row per object.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEncoding {
    pub scene_id: String,
    pub tier: PrivacyTier,
    pub objects: Vec<Vec<f64>>,
    pub captions: Option<Vec<String>>,
}

impl SceneEncoding {
    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }
}

fn write_boxes(
    v: &mut [f64],
    global: Range<usize>,
    relative: Range<usize>,
    b: &BoundingBox,
    envelope: &BoundingBox,
    image_w: f64,
    image_h: f64,
) -> Result<(), CodecError> {
    let g = geometry::normalize_global(b, image_w, image_h)?;
    let r = geometry::normalize_relative(&b.clamp_to_image(image_w, image_h)?, envelope);
    v[global].copy_from_slice(&g.to_array());
    v[relative].copy_from_slice(&r.to_array());
    Ok(())
}

fn check_vocab(d: &Detection, vocab: &Vocabulary) -> Result<(), CodecError> {
    if vocab.num_classes() != d.class_scores.len() {
        return Err(CodecError::VocabularySize {
            kind: "class",
            expected: d.class_scores.len(),
            found: vocab.num_classes(),
        });
    }
    if vocab.num_attributes() != d.attribute_scores.len() {
        return Err(CodecError::VocabularySize {
            kind: "attribute",
            expected: d.attribute_scores.len(),
            found: vocab.num_attributes(),
        });
    }
    Ok(())
}

/// Build the PRIVATE symbolic vector for one detection.
///
/// With `weight_norm` the attribute weights are the top-k scores divided by
/// their sum; without it they are the raw scores.
#[allow(clippy::too_many_arguments)]
pub fn encode_symbolic(
    d: &Detection,
    scene_envelope: &BoundingBox,
    image_w: f64,
    image_h: f64,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    layout: &SymbolicLayout,
    weight_norm: bool,
) -> Result<ObjectEncoding, CodecError> {
    if table.dim() != layout.embedding_dim {
        return Err(CodecError::EmbeddingDim {
            table: table.dim(),
            expected: layout.embedding_dim,
        });
    }
    check_vocab(d, vocab)?;
    let mut v = vec![0.0; ENCODING_DIM];

    let classes = detection::top_k(&d.class_scores, layout.top_k)?;
    for (slot, idx) in classes.indices().enumerate() {
        let e = table.embed_label(&vocab.class_names()[idx]);
        v[layout.class_slot(slot)].copy_from_slice(&e.vector);
    }

    let attributes = detection::top_k(&d.attribute_scores, layout.top_k)?;
    let weights: Vec<f64> = if weight_norm {
        detection::normalized_topk_weights(&attributes)
    } else {
        attributes.scores().collect()
    };
    let block = &mut v[layout.attribute_block()];
    for (idx, w) in attributes.indices().zip(weights) {
        let e = table.embed_label(&vocab.attribute_names()[idx]);
        for (acc, x) in block.iter_mut().zip(&e.vector) {
            *acc += w * x;
        }
    }

    write_boxes(
        &mut v,
        layout.global_box(),
        layout.relative_box(),
        &d.bbox,
        scene_envelope,
        image_w,
        image_h,
    )?;
    Ok(ObjectEncoding {
        vector: v,
        tier: PrivacyTier::Private,
    })
}

/// Build the AT_RISK raw score vector for one detection.
pub fn encode_raw(
    d: &Detection,
    scene_envelope: &BoundingBox,
    image_w: f64,
    image_h: f64,
    layout: &RawLayout,
) -> Result<ObjectEncoding, CodecError> {
    d.check_lengths(layout.num_classes, layout.num_attributes)?;
    let mut v = vec![0.0; ENCODING_DIM];
    v[layout.class_block()].copy_from_slice(&d.class_scores);
    v[layout.attribute_block()].copy_from_slice(&d.attribute_scores);
    write_boxes(
        &mut v,
        layout.global_box(),
        layout.relative_box(),
        &d.bbox,
        scene_envelope,
        image_w,
        image_h,
    )?;
    Ok(ObjectEncoding {
        vector: v,
        tier: PrivacyTier::AtRisk,
    })
}

pub fn encode_textual(d: &Detection, vocab: &Vocabulary, k: usize) -> Result<TextualEncoding, CodecError> {
    check_vocab(d, vocab)?;
    let classes = detection::top_k(&d.class_scores, k)?;
    let attributes = detection::top_k(&d.attribute_scores, k)?;
    Ok(TextualEncoding {
        class_words: classes.indices().map(|i| vocab.class_names()[i].clone()).collect(),
        attribute_words: attributes
            .indices()
            .map(|i| vocab.attribute_names()[i].clone())
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodeMode {
    Symbolic,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub selection: SelectionParams,
    pub symbolic: SymbolicLayout,
    pub raw: RawLayout,
    pub weight_norm: bool,
    pub include_captions: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            selection: SelectionParams::default(),
            symbolic: SymbolicLayout::default(),
            raw: RawLayout::default(),
            weight_norm: true,
            include_captions: false,
        }
    }
}

/// Selected detections with their image-clamped envelope, or `None` for an
/// empty selection.
fn selected_with_envelope<'s>(
    scene: &'s Scene,
    config: &EncoderConfig,
) -> Result<(Vec<&'s Detection>, Option<BoundingBox>), CodecError> {
    let selected: Vec<&Detection> = detection::select_indices(scene, &config.selection)?
        .into_iter()
        .map(|i| &scene.detections[i])
        .collect();
    let clamped = selected
        .iter()
        .map(|d| d.bbox.clamp_to_image(scene.image_w, scene.image_h))
        .collect::<Result<Vec<_>, _>>()?;
    let envelope = if clamped.is_empty() {
        None
    } else {
        Some(geometry::enveloping_box(&clamped)?)
    };
    Ok((selected, envelope))
}

/// Select objects and encode each in confidence order. The envelope is taken
/// over the selected boxes only.
pub fn encode_scene(
    scene: &Scene,
    mode: EncodeMode,
    vocab: &Vocabulary,
    table: Option<&EmbeddingTable>,
    config: &EncoderConfig,
) -> Result<SceneEncoding, CodecError> {
    let (selected, envelope) = selected_with_envelope(scene, config)?;
    let tier = match mode {
        EncodeMode::Symbolic => PrivacyTier::Private,
        EncodeMode::Raw => PrivacyTier::AtRisk,
    };
    let objects = match envelope {
        None => Vec::new(),
        Some(env) => selected
            .iter()
            .enumerate()
            .map(|(index, d)| {
                let enc = match mode {
                    EncodeMode::Symbolic => encode_symbolic(
                        d,
                        &env,
                        scene.image_w,
                        scene.image_h,
                        vocab,
                        table.ok_or(CodecError::MissingTable)?,
                        &config.symbolic,
                        config.weight_norm,
                    ),
                    EncodeMode::Raw => encode_raw(d, &env, scene.image_w, scene.image_h, &config.raw),
                };
                enc.map(|e| e.vector).map_err(|e| CodecError::Object {
                    index,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>, _>>()?,
    };
    Ok(SceneEncoding {
        scene_id: scene.id.clone().unwrap_or_default(),
        tier,
        objects,
        captions: if config.include_captions {
            scene.captions.clone()
        } else {
            None
        },
    })
}

/// Textual encodings of the selected objects, in confidence order.
pub fn encode_scene_textual(
    scene: &Scene,
    vocab: &Vocabulary,
    config: &EncoderConfig,
) -> Result<Vec<TextualEncoding>, CodecError> {
    let (selected, _) = selected_with_envelope(scene, config)?;
    selected
        .iter()
        .enumerate()
        .map(|(index, d)| {
            encode_textual(d, vocab, config.symbolic.top_k).map_err(|e| CodecError::Object {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Outcome for one class slot of a symbolic vector.
#[derive(Debug, Clone, PartialEq)]
pub enum SlotRecovery {
    Recovered {
        index: usize,
        name: String,
        similarity: f64,
    },
    Unrecoverable,
}

impl SlotRecovery {
    pub fn name(&self) -> Option<&str> {
        match self {
            Self::Recovered { name, .. } => Some(name),
            Self::Unrecoverable => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub classes: Vec<SlotRecovery>,
    /// Attribute vocabulary ranked by cosine similarity to the attribute
    /// block; `None` when the block is all zeros.
    pub attribute_ranking: Option<Vec<(usize, f64)>>,
    pub global_box: NormalizedBox,
    pub relative_box: NormalizedBox,
}

struct Candidates {
    vectors: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl Candidates {
    fn new(names: &[String], table: &EmbeddingTable) -> Self {
        let vectors: Vec<Vec<f64>> = names.iter().map(|n| table.embed_label(n).vector).collect();
        let norms = vectors.iter().map(|v| norm(v)).collect();
        Self { vectors, norms }
    }

    /// Cosine similarity of `query` against every candidate with nonzero norm.
    fn similarities<'a>(&'a self, query: &'a [f64]) -> impl Iterator<Item = (usize, f64)> + 'a {
        let qn = norm(query);
        self.vectors
            .iter()
            .zip(&self.norms)
            .enumerate()
            .filter(move |(_, (_, &n))| n > 0.0 && qn > 0.0)
            .map(move |(i, (v, &n))| {
                let dot: f64 = v.iter().zip(query).map(|(a, b)| a * b).sum();
                (i, dot / (n * qn))
            })
    }
}

/// Nearest-label decoder for symbolic vectors, with the vocabulary embeddings
/// computed once.
pub struct Inverter<'a> {
    vocab: &'a Vocabulary,
    layout: SymbolicLayout,
    classes: Candidates,
    attributes: Candidates,
}

impl<'a> Inverter<'a> {
    pub fn new(vocab: &'a Vocabulary, table: &EmbeddingTable, layout: SymbolicLayout) -> Result<Self, CodecError> {
        if table.dim() != layout.embedding_dim {
            return Err(CodecError::EmbeddingDim {
                table: table.dim(),
                expected: layout.embedding_dim,
            });
        }
        Ok(Self {
            vocab,
            layout,
            classes: Candidates::new(vocab.class_names(), table),
            attributes: Candidates::new(vocab.attribute_names(), table),
        })
    }

    pub fn invert(&self, enc: &ObjectEncoding) -> Result<Inversion, CodecError> {
        self.invert_row(&enc.vector, enc.tier)
    }

    pub fn invert_row(&self, row: &[f64], tier: PrivacyTier) -> Result<Inversion, CodecError> {
        if tier != PrivacyTier::Private {
            return Err(CodecError::NotSymbolic(tier));
        }
        if row.len() != ENCODING_DIM {
            return Err(CodecError::VectorLength(row.len()));
        }
        let classes = (0..self.layout.top_k)
            .map(|slot| {
                let query = &row[self.layout.class_slot(slot)];
                let best =
                    self.classes
                        .similarities(query)
                        .fold(None, |best: Option<(usize, f64)>, (i, s)| match best {
                            Some((_, bs)) if bs >= s => best,
                            _ => Some((i, s)),
                        });
                match best {
                    Some((index, similarity)) => SlotRecovery::Recovered {
                        index,
                        name: self.vocab.class_names()[index].clone(),
                        similarity,
                    },
                    None => SlotRecovery::Unrecoverable,
                }
            })
            .collect();

        let attr_query = &row[self.layout.attribute_block()];
        let attribute_ranking = (norm(attr_query) > 0.0).then(|| {
            let mut ranked: Vec<(usize, f64)> = self.attributes.similarities(attr_query).collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked
        });

        Ok(Inversion {
            classes,
            attribute_ranking,
            global_box: NormalizedBox::from_slice(&row[self.layout.global_box()]),
            relative_box: NormalizedBox::from_slice(&row[self.layout.relative_box()]),
        })
    }

    pub fn attribute_name(&self, index: usize) -> &str {
        &self.vocab.attribute_names()[index]
    }
}

/// One-shot inversion; builds an [`Inverter`] internally.
pub fn invert_symbolic(
    enc: &ObjectEncoding,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    layout: SymbolicLayout,
) -> Result<Inversion, CodecError> {
    Inverter::new(vocab, table, layout)?.invert(enc)
}
