//! Run configuration: defaults, `key=value` files and validation.

use std::fmt::Write as _;

use thiserror::Error;

use crate::codec::{self, EncoderConfig, RawLayout, SymbolicLayout, ENCODING_DIM};
use crate::detection::{self, SelectionParams};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}")]
    Value { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub num_classes: usize,
    pub num_attributes: usize,
    pub embedding_dim: usize,
    pub top_k: usize,
    pub score_threshold: f64,
    pub iou_threshold: f64,
    pub max_objects: usize,
    pub attr_threshold: f64,
    pub weight_norm: bool,
    pub include_captions: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            num_classes: detection::DEFAULT_NUM_CLASSES,
            num_attributes: detection::DEFAULT_NUM_ATTRIBUTES,
            embedding_dim: codec::DEFAULT_EMBEDDING_DIM,
            top_k: codec::DEFAULT_TOP_K,
            score_threshold: 0.2,
            iou_threshold: 0.5,
            max_objects: 100,
            attr_threshold: 0.5,
            weight_norm: true,
            include_captions: false,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.to_string(),
            value: value.to_string(),
        }),
    }
}

impl Config {
    /// Defaults overlaid with the `key=value` lines of `text`. `#` starts a
    /// comment; keys accept `-` or `_`.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let k = key.replace('-', "_");
        match k.as_str() {
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "num_attributes" => self.num_attributes = parse_value(key, value)?,
            "embedding_dim" => self.embedding_dim = parse_value(key, value)?,
            "top_k" => self.top_k = parse_value(key, value)?,
            "score_threshold" => self.score_threshold = parse_value(key, value)?,
            "iou_threshold" => self.iou_threshold = parse_value(key, value)?,
            "max_objects" => self.max_objects = parse_value(key, value)?,
            "attr_threshold" => self.attr_threshold = parse_value(key, value)?,
            "weight_norm" => self.weight_norm = parse_bool(key, value)?,
            "include_captions" => self.include_captions = parse_bool(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("score_threshold", self.score_threshold),
            ("iou_threshold", self.iou_threshold),
            ("attr_threshold", self.attr_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [
            ("num_classes", self.num_classes),
            ("num_attributes", self.num_attributes),
            ("embedding_dim", self.embedding_dim),
            ("top_k", self.top_k),
            ("max_objects", self.max_objects),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        let symbolic = self
            .top_k
            .saturating_mul(self.embedding_dim)
            .saturating_add(self.embedding_dim)
            .saturating_add(codec::BOX_BLOCK_LEN);
        if symbolic > ENCODING_DIM {
            return Err(ConfigError::Invalid(format!(
                "top_k * embedding_dim + embedding_dim + 8 = {symbolic} exceeds {ENCODING_DIM}"
            )));
        }
        let raw = self
            .num_classes
            .saturating_add(self.num_attributes)
            .saturating_add(codec::BOX_BLOCK_LEN);
        if raw > ENCODING_DIM {
            return Err(ConfigError::Invalid(format!(
                "num_classes + num_attributes + 8 = {raw} exceeds {ENCODING_DIM}"
            )));
        }
        if self.top_k > self.num_classes || self.top_k > self.num_attributes {
            return Err(ConfigError::Invalid(format!(
                "top_k {} exceeds the class or attribute count",
                self.top_k
            )));
        }
        Ok(())
    }

    pub fn selection(&self) -> SelectionParams {
        SelectionParams {
            score_threshold: self.score_threshold,
            iou_threshold: self.iou_threshold,
            max_objects: self.max_objects,
            class_aware: false,
        }
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig, ConfigError> {
        self.validate()?;
        let invalid = |e: codec::CodecError| ConfigError::Invalid(e.to_string());
        Ok(EncoderConfig {
            selection: self.selection(),
            symbolic: SymbolicLayout::new(self.top_k, self.embedding_dim).map_err(invalid)?,
            raw: RawLayout::new(self.num_classes, self.num_attributes).map_err(invalid)?,
            weight_norm: self.weight_norm,
            include_captions: self.include_captions,
        })
    }

    /// Effective configuration in the same `key=value` form it is read from.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "num_attributes={}", self.num_attributes);
        let _ = writeln!(s, "embedding_dim={}", self.embedding_dim);
        let _ = writeln!(s, "top_k={}", self.top_k);
        let _ = writeln!(s, "score_threshold={}", self.score_threshold);
        let _ = writeln!(s, "iou_threshold={}", self.iou_threshold);
        let _ = writeln!(s, "max_objects={}", self.max_objects);
        let _ = writeln!(s, "attr_threshold={}", self.attr_threshold);
        let _ = writeln!(s, "weight_norm={}", self.weight_norm);
        let _ = writeln!(s, "include_captions={}", self.include_captions);
        s
    }
}
