//! Text-format word-embedding tables (`token v1 v2 ... vD` per line) and
//! label lookup for possibly multi-word class and attribute names.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("failed to read embeddings: {0}")]
    Io(#[from] std::io::Error),
    #[error("embedding file contains no entries")]
    Empty,
    #[error("line {line}: expected {expected} components, found {found}")]
    Dimension { line: usize, expected: usize, found: usize },
    #[error("line {line}: cannot parse component {column} ({text:?})")]
    Parse { line: usize, column: usize, text: String },
    #[error("line {line}: component {column} is not finite")]
    NonFinite { line: usize, column: usize },
    #[error("line {line}: token has no vector components")]
    NoComponents { line: usize },
    #[error("vector for {token:?} has length {found}, table dimension is {expected}")]
    EntryLength {
        token: String,
        expected: usize,
        found: usize,
    },
}

/// Immutable token to vector map. Tokens are stored lowercased.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

/// Pooled embedding for a label plus the tokens that were not in the table.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbedding {
    pub vector: Vec<f64>,
    pub oov_tokens: Vec<String>,
}

impl LabelEmbedding {
    pub fn is_fully_oov(&self) -> bool {
        self.vector.iter().all(|&v| v == 0.0) && !self.oov_tokens.is_empty()
    }
}

impl EmbeddingTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }

    /// Parse the text layout. The dimension is fixed by the first nonempty
    /// line; a repeated token keeps its last vector.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, EmbeddingError> {
        let mut dim = None;
        let mut entries = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else {
                continue;
            };
            let vector = fields
                .enumerate()
                .map(|(col, text)| {
                    let v: f64 = text.parse().map_err(|_| EmbeddingError::Parse {
                        line: lineno,
                        column: col + 1,
                        text: text.to_string(),
                    })?;
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(EmbeddingError::NonFinite {
                            line: lineno,
                            column: col + 1,
                        })
                    }
                })
                .collect::<Result<Vec<f64>, _>>()?;
            let expected = *dim.get_or_insert(vector.len());
            if expected == 0 {
                return Err(EmbeddingError::NoComponents { line: lineno });
            }
            if vector.len() != expected {
                return Err(EmbeddingError::Dimension {
                    line: lineno,
                    expected,
                    found: vector.len(),
                });
            }
            entries.insert(token.to_lowercase(), vector);
        }
        match dim {
            Some(dim) => Ok(Self { dim, entries }),
            None => Err(EmbeddingError::Empty),
        }
    }

    /// Build a table from in-memory entries; later duplicates win.
    pub fn from_entries<I, S>(dim: usize, entries: I) -> Result<Self, EmbeddingError>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: AsRef<str>,
    {
        let mut map = HashMap::new();
        for (token, vector) in entries {
            let token = token.as_ref().to_lowercase();
            if vector.len() != dim {
                return Err(EmbeddingError::EntryLength {
                    token,
                    expected: dim,
                    found: vector.len(),
                });
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite { line: 0, column: 0 });
            }
            map.insert(token, vector);
        }
        if map.is_empty() || dim == 0 {
            return Err(EmbeddingError::Empty);
        }
        Ok(Self { dim, entries: map })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.entries.get(&token.to_lowercase()).map(Vec::as_slice)
    }

    /// Mean of the in-vocabulary token vectors of `name` after lowercasing and
    /// whitespace splitting. Unknown tokens are skipped and reported.
    pub fn embed_label(&self, name: &str) -> LabelEmbedding {
        let lowered = name.to_lowercase();
        let mut found: Vec<&[f64]> = Vec::new();
        let mut oov_tokens = Vec::new();
        for token in lowered.split_whitespace() {
            match self.entries.get(token) {
                Some(v) => found.push(v),
                None => oov_tokens.push(token.to_string()),
            }
        }
        let vector = match found.as_slice() {
            [] => vec![0.0; self.dim],
            [only] => only.to_vec(),
            many => {
                let mut sum = vec![0.0; self.dim];
                for v in many {
                    for (s, x) in sum.iter_mut().zip(v.iter()) {
                        *s += x;
                    }
                }
                let n = many.len() as f64;
                sum.iter_mut().for_each(|s| *s /= n);
                sum
            }
        };
        LabelEmbedding { vector, oov_tokens }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some(dot / (na * nb))
}
