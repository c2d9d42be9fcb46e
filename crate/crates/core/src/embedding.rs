//! Fixed word-embedding tables and text-to-vector encoding.
//!
//! Table file format: first line `dim <d>`, then one `<word> <v1> ... <vd>`
//! row per word, space separated.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::fnv1a;
use crate::synth::Lexicon;

/// A `d`-dimensional semantic feature.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticVector(Vec<f64>);

impl SemanticVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("semantic vector must be non-empty and finite".into()));
        }
        Ok(SemanticVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }
}

/// All-zeros target assigned to false-positive detections.
pub fn zero_vector(dim: usize) -> Result<SemanticVector> {
    if dim == 0 {
        return Err(Error::Input("dim must be >= 1".into()));
    }
    Ok(SemanticVector(vec![0.0; dim]))
}

/// Immutable word → vector map.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn from_rows(dim: usize, rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be >= 1".into()));
        }
        let mut t = EmbeddingTable {
            dim,
            words: Vec::with_capacity(rows.len()),
            index: HashMap::with_capacity(rows.len()),
            data: Vec::with_capacity(rows.len() * dim),
        };
        for (w, v) in rows {
            t.push(w, v).map_err(Error::Config)?;
        }
        Ok(t)
    }

    fn push(&mut self, word: String, v: Vec<f64>) -> std::result::Result<(), String> {
        if word.is_empty() || word != word.to_lowercase() {
            return Err(format!("word {word:?} must be non-empty lowercase"));
        }
        if v.len() != self.dim {
            return Err(format!("{word:?} has {} values, expected {}", v.len(), self.dim));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(format!("{word:?} has a non-finite value"));
        }
        if self.index.contains_key(&word) {
            return Err(format!("duplicate word {word:?}"));
        }
        self.index.insert(word.clone(), self.words.len());
        self.words.push(word);
        self.data.extend(v);
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses table text; `path` only labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
        let dim = header
            .strip_prefix("dim ")
            .and_then(|d| d.trim().parse::<usize>().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| err(1, format!("expected header `dim <d>`, found {header:?}")))?;
        let mut t = EmbeddingTable::from_rows(dim, Vec::new())?;
        for (i, line) in lines {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|e| err(i + 1, format!("bad number {p:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            t.push(word.to_string(), values).map_err(|m| err(i + 1, m))?;
        }
        Ok(t)
    }

    /// Writes the table in the file format, values in shortest round-trip
    /// decimal form.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = format!("dim {}\n", self.dim);
        for (k, w) in self.words.iter().enumerate() {
            s.push_str(w);
            for v in &self.data[k * self.dim..(k + 1) * self.dim] {
                write!(s, " {v}").unwrap();
            }
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index
            .get(word)
            .map(|&k| &self.data[k * self.dim..(k + 1) * self.dim])
    }

    /// Lowercases, splits on whitespace and averages the vectors of the
    /// in-vocabulary words.
    pub fn embed_text(&self, text: &str) -> Result<SemanticVector> {
        let lower = text.to_lowercase();
        let mut acc = vec![0.0; self.dim];
        let mut found = 0usize;
        for w in lower.split_whitespace() {
            if let Some(v) = self.get(w) {
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
                found += 1;
            }
        }
        if found == 0 {
            return Err(Error::OutOfVocabulary(text.to_string()));
        }
        if found > 1 {
            let n = found as f64;
            acc.iter_mut().for_each(|a| *a /= n);
        }
        Ok(SemanticVector(acc))
    }

    /// Fails unless every lexicon word has a row.
    pub fn check_covers(&self, lexicon: &Lexicon) -> Result<()> {
        let missing: Vec<&str> = lexicon
            .words()
            .iter()
            .filter(|w| self.get(w).is_none())
            .map(String::as_str)
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "embedding table lacks lexicon words: {}",
                missing.join(", ")
            )))
        }
    }

    /// Hash of the vocabulary and every stored bit.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.data.len() * 8 + self.words.len() * 8);
        for w in &self.words {
            bytes.extend_from_slice(w.as_bytes());
            bytes.push(0);
        }
        for v in &self.data {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        fnv1a(&bytes)
    }
}
