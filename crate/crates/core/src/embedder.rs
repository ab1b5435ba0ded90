//! Deterministic semantic vectors for event templates and padded batch
//! assembly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::corpus::{Label, TemplateCatalog, WILDCARD};
use crate::error::{Error, Result};
use crate::sequencer::EventSequence;
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 32;
pub const PAD_ID: u32 = 0;

/// Splits a template into lowercase word tokens: non-alphanumeric
/// separators, camelCase boundaries, pure numbers and wildcards dropped.
pub fn tokenize_template(template: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for raw in template.split_whitespace() {
        if raw == WILDCARD {
            continue;
        }
        for piece in raw.split(|c: char| !c.is_alphanumeric()) {
            split_camel(piece, &mut tokens);
        }
    }
    tokens.retain(|t| !t.is_empty() && !t.chars().all(|c| c.is_ascii_digit()));
    if tokens.is_empty() {
        tokens.push("empty".to_owned());
    }
    tokens
}

fn split_camel(word: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = word.chars().collect();
    let mut start = 0;
    for i in 1..chars.len() {
        let (prev, cur) = (chars[i - 1], chars[i]);
        let next_lower = chars.get(i + 1).is_some_and(|c| c.is_lowercase());
        let boundary = (prev.is_lowercase() && cur.is_uppercase())
            || (prev.is_uppercase() && cur.is_uppercase() && next_lower);
        if boundary {
            out.push(chars[start..i].iter().collect::<String>().to_lowercase());
            start = i;
        }
    }
    if start < chars.len() {
        out.push(chars[start..].iter().collect::<String>().to_lowercase());
    }
}

/// Unit-variance pseudorandom token vector keyed by `(token, seed)`.
pub fn hashed_token_vector(token: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(token.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    Hashed,
    ExternalFile,
}

/// Word vectors read from a text file, one `token v1 ... vd` per line.
#[derive(Debug, Clone, Default)]
pub struct WordVectors {
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn parse(text: &str, dim: usize) -> Result<Self> {
        let mut vectors = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let values = fields
                .map(|v| {
                    v.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| Error::data(format!("word vectors line {}: bad value {v:?}", n + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != dim {
                return Err(Error::data(format!(
                    "word vectors line {}: expected {dim} values, found {}",
                    n + 1,
                    values.len()
                )));
            }
            vectors.insert(token.to_lowercase(), values);
        }
        Ok(WordVectors { vectors })
    }

    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, dim)
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }
}

/// Mean of the template's token vectors.
pub fn embed_template(template: &str, seed: u64, dim: usize, words: Option<&WordVectors>) -> Vec<f64> {
    let tokens = tokenize_template(template);
    let mut acc = vec![0.0; dim];
    for t in &tokens {
        let v = match words.and_then(|w| w.get(t)) {
            Some(v) => v.to_vec(),
            None => hashed_token_vector(t, seed, dim),
        };
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = tokens.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Event id to vector lookup; row 0 is the all-zero padding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    token_seed: u64,
    source: EmbeddingSource,
    rows: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn from_catalog(catalog: &TemplateCatalog, token_seed: u64, words: Option<&WordVectors>) -> Self {
        Self::from_templates(catalog.templates().map(|(_, t)| t), EMBED_DIM, token_seed, words)
    }

    /// Rows for templates in id order starting at 1.
    pub fn from_templates<I, S>(templates: I, dim: usize, token_seed: u64, words: Option<&WordVectors>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut rows = vec![vec![0.0; dim]];
        rows.extend(
            templates
                .into_iter()
                .map(|t| embed_template(t.as_ref(), token_seed, dim, words)),
        );
        EmbeddingTable {
            dim,
            token_seed,
            source: if words.is_some() {
                EmbeddingSource::ExternalFile
            } else {
                EmbeddingSource::Hashed
            },
            rows,
        }
    }

    /// Builds a table from explicit rows (row 0 must be the padding vector).
    pub fn from_rows(rows: Vec<Vec<f64>>, token_seed: u64, source: EmbeddingSource) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or_else(|| Error::data("embedding table has no rows"))?;
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::data("embedding rows have inconsistent widths"));
        }
        if rows[0].iter().any(|&x| x != 0.0) {
            return Err(Error::data("embedding row 0 must be the zero vector"));
        }
        if rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("embedding table contains non-finite values".into()));
        }
        Ok(EmbeddingTable {
            dim,
            token_seed,
            source,
            rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_seed(&self) -> u64 {
        self.token_seed
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    /// Number of real events (excludes padding).
    pub fn num_events(&self) -> usize {
        self.rows.len() - 1
    }

    pub fn vector(&self, event_id: u32) -> Option<&[f64]> {
        self.rows.get(event_id as usize).map(Vec::as_slice)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Dense, right-padded view of a group of sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    /// N x L x d
    pub x: Tensor,
    /// N x L, row-major; 0 at padding.
    pub event_grid: Vec<u32>,
    /// N x L, true at real events.
    pub pad_mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub seq_ids: Vec<String>,
    pub labels: Vec<Label>,
    pub truncated: usize,
}

impl SequenceBatch {
    pub fn n(&self) -> usize {
        self.lengths.len()
    }

    pub fn len(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[2]
    }
}

/// Pads (and truncates to `l_max`) a non-empty list of sequences.
pub fn build_batch(sequences: &[&EventSequence], table: &EmbeddingTable, l_max: usize) -> Result<SequenceBatch> {
    if sequences.is_empty() {
        return Err(Error::data("cannot build a batch from zero sequences"));
    }
    if l_max == 0 {
        return Err(Error::config("l_max must be positive"));
    }
    let n = sequences.len();
    let d = table.dim();
    let mut truncated = 0;
    let lengths: Vec<usize> = sequences
        .iter()
        .map(|s| {
            if s.event_ids.len() > l_max {
                truncated += 1;
            }
            s.event_ids.len().min(l_max)
        })
        .collect();
    if let Some(i) = lengths.iter().position(|&l| l == 0) {
        return Err(Error::data(format!("sequence {:?} is empty", sequences[i].seq_id)));
    }
    let l = *lengths.iter().max().expect("non-empty");
    let mut x = Tensor::zeros(&[n, l, d]);
    let mut event_grid = vec![PAD_ID; n * l];
    let mut pad_mask = vec![false; n * l];
    let xd = x.data_mut();
    for (i, s) in sequences.iter().enumerate() {
        for (t, &id) in s.event_ids.iter().take(lengths[i]).enumerate() {
            if id == PAD_ID {
                return Err(Error::data(format!("sequence {:?} contains the padding id", s.seq_id)));
            }
            let v = table.vector(id).ok_or_else(|| {
                Error::data(format!(
                    "event id {id} in sequence {:?} is outside the embedding table ({} events)",
                    s.seq_id,
                    table.num_events()
                ))
            })?;
            let off = (i * l + t) * d;
            xd[off..off + d].copy_from_slice(v);
            event_grid[i * l + t] = id;
            pad_mask[i * l + t] = true;
        }
    }
    Ok(SequenceBatch {
        x,
        event_grid,
        pad_mask,
        lengths,
        seq_ids: sequences.iter().map(|s| s.seq_id.clone()).collect(),
        labels: sequences.iter().map(|s| s.label).collect(),
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize_template("Receiving block <*> src: <*>"), vec!["receiving", "block", "src"]);
        assert_eq!(tokenize_template("PacketResponder"), vec!["packet", "responder"]);
        assert_eq!(tokenize_template("<*> <*>"), vec!["empty"]);
        assert_eq!(tokenize_template("HTTPServer 404 x_y"), vec!["http", "server", "x", "y"]);
    }

    #[test]
    fn single_token_event_equals_token_vector() {
        let v = embed_template("block", 9, EMBED_DIM, None);
        assert_eq!(v, hashed_token_vector("block", 9, EMBED_DIM));
    }

    #[test]
    fn two_token_mean() {
        let u = hashed_token_vector("alpha", 1, EMBED_DIM);
        let w = hashed_token_vector("beta", 1, EMBED_DIM);
        let v = embed_template("alpha beta", 1, EMBED_DIM, None);
        for j in 0..EMBED_DIM {
            assert_eq!(v[j], (u[j] + w[j]) / 2.0);
        }
    }

    #[test]
    fn hashed_vectors_are_stable() {
        // frozen reference values guard against silent changes in the hash/rng chain
        let a = hashed_token_vector("receiving", 0, EMBED_DIM);
        let b = hashed_token_vector("receiving", 0, EMBED_DIM);
        assert_eq!(a, b);
        assert_ne!(a, hashed_token_vector("receiving", 1, EMBED_DIM));
        assert!(a.iter().all(|x| x.is_finite()));
        assert_eq!(&a[..3], &[-1.7559025972627444, -0.5548317373648479, 0.5589205293167662]);
    }

    #[test]
    fn external_vectors_override_hash() {
        let words = WordVectors::parse("block 1 2\n", 2).unwrap();
        let v = embed_template("block", 0, 2, Some(&words));
        assert_eq!(v, vec![1.0, 2.0]);
        let fallback = embed_template("src", 0, 2, Some(&words));
        assert_eq!(fallback, hashed_token_vector("src", 0, 2));
        assert!(WordVectors::parse("block 1 x\n", 2).is_err());
        assert!(WordVectors::parse("block 1\n", 2).is_err());
    }

    fn table() -> EmbeddingTable {
        EmbeddingTable::from_templates(["a", "b", "c", "d"], 3, 0, None)
    }

    #[test]
    fn padding_layout() {
        let s = EventSequence::new("s", vec![1, 2, 3], Label::Normal);
        let b = build_batch(&[&s], &table(), 5).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.pad_mask, vec![true, true, true]);

        let s1 = EventSequence::new("s1", vec![1, 2], Label::Normal);
        let s2 = EventSequence::new("s2", vec![1, 2, 3, 4], Label::Anomalous);
        let b = build_batch(&[&s1, &s2], &table(), 5).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(&b.pad_mask[..4], &[true, true, false, false]);
        assert_eq!(&b.event_grid[..4], &[1, 2, 0, 0]);
        for t in 0..4 {
            let row = &b.x.data()[t * 3..t * 3 + 3];
            assert_eq!(row.iter().all(|&x| x == 0.0), !b.pad_mask[t]);
        }
    }

    #[test]
    fn truncation_counted() {
        let long = EventSequence::new("long", (0..300).map(|i| 1 + i % 4).collect(), Label::Normal);
        let b = build_batch(&[&long], &table(), 256).unwrap();
        assert_eq!(b.len(), 256);
        assert_eq!(b.truncated, 1);
    }

    #[test]
    fn unknown_event_is_data_error() {
        let s = EventSequence::new("s", vec![1, 99], Label::Normal);
        assert!(matches!(build_batch(&[&s], &table(), 8), Err(Error::Data(_))));
    }
}
