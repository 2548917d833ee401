//! Privacy-preserving symbolic scene representations for visual question
//! answering split between an edge device and a cloud service.
//!
//! Detector output (per-object class scores, attribute scores and boxes) is
//! reduced on the device to label embeddings and normalized boxes, framed,
//! and sent to a receiver that only admits encodings at or above a
//! configured privacy tier.

pub mod cli;
pub mod codec;
pub mod config;
pub mod detection;
pub mod edge;
pub mod embedding;
pub mod geometry;
pub mod metrics;

pub use codec::{
    encode_raw, encode_scene, encode_symbolic, encode_textual, invert_symbolic, EncodeMode, EncoderConfig, Inverter,
    ObjectEncoding, PrivacyTier, SceneEncoding, TextualEncoding, ENCODING_DIM,
};
pub use detection::{Detection, Scene, SelectionParams, Vocabulary};
pub use embedding::EmbeddingTable;
pub use geometry::{BoundingBox, NormalizedBox};
