//! Monolingual embedding spaces in the word2vec text format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{ClweError, Result};
use crate::numerics::format_float;

/// Number of normalization rounds used when the configuration does not say.
pub const DEFAULT_NORMALIZE_ITERATIONS: usize = 5;

/// A ranked vocabulary together with one dense vector per word.
///
/// Rows are kept in file order, which for published embeddings is
/// frequency order, so "the top `k` words" is simply the first `k` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpace {
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Array2<f64>,
}

impl EmbeddingSpace {
    pub fn new(words: Vec<String>, vectors: Array2<f64>) -> Result<Self> {
        if words.is_empty() {
            return Err(ClweError::EmptySpace);
        }
        if words.len() != vectors.nrows() {
            return Err(ClweError::Shape {
                expected: format!("{} rows", words.len()),
                actual: format!("{} rows", vectors.nrows()),
            });
        }
        if vectors.ncols() < 2 {
            return Err(ClweError::Shape {
                expected: "dimension >= 2".into(),
                actual: format!("dimension {}", vectors.ncols()),
            });
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(ClweError::Config(format!("duplicate token {w:?}")));
            }
        }
        Ok(EmbeddingSpace {
            words,
            index,
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, i: usize) -> &str {
        &self.words[i]
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn vector(&self, i: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(i)
    }

    /// Rows for the given word indices, in the given order.
    pub fn rows(&self, indices: &[usize]) -> Array2<f64> {
        self.vectors.select(Axis(0), indices)
    }

    /// The first `n` words (clamped to the vocabulary size).
    pub fn truncated(&self, n: usize) -> EmbeddingSpace {
        let n = n.clamp(1, self.len());
        let words = self.words[..n].to_vec();
        let vectors = self.vectors.slice(ndarray::s![..n, ..]).to_owned();
        EmbeddingSpace::new(words, vectors).expect("prefix of a valid space is valid")
    }

    /// Sub-space made of the given rows, keeping their relative order.
    pub fn subset(&self, indices: &[usize]) -> Result<EmbeddingSpace> {
        let words = indices.iter().map(|&i| self.words[i].clone()).collect();
        EmbeddingSpace::new(words, self.rows(indices))
    }

    pub fn into_parts(self) -> (Vec<String>, Array2<f64>) {
        (self.words, self.vectors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| ClweError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_text(&mut w).map_err(|e| match e {
            WriteError::Io(e) => ClweError::io(path, e),
            WriteError::Token(t) => ClweError::Unrepresentable(t),
        })?;
        w.flush().map_err(|e| ClweError::io(path, e))
    }

    fn write_text<W: Write>(&self, w: &mut W) -> std::result::Result<(), WriteError> {
        if let Some(bad) = self
            .words
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(WriteError::Token(bad.clone()));
        }
        writeln!(w, "{} {}", self.len(), self.dim())?;
        let mut line = String::new();
        for (word, row) in self.words.iter().zip(self.vectors.rows()) {
            line.clear();
            line.push_str(word);
            for &x in row.iter() {
                line.push(' ');
                line.push_str(&format_float(x, 9));
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }
}

enum WriteError {
    Io(std::io::Error),
    Token(String),
}

impl From<std::io::Error> for WriteError {
    fn from(e: std::io::Error) -> Self {
        WriteError::Io(e)
    }
}

/// Read at most `max_vocab` distinct words from a word2vec text file.
pub fn load_embeddings(path: impl AsRef<Path>, max_vocab: usize) -> Result<EmbeddingSpace> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| ClweError::io(path, e))?;
    read_embeddings(BufReader::new(file), path, max_vocab)
}

pub fn read_embeddings<R: BufRead>(
    reader: R,
    origin: &Path,
    max_vocab: usize,
) -> Result<EmbeddingSpace> {
    if max_vocab == 0 {
        return Err(ClweError::Config("max_vocab must be positive".into()));
    }
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| ClweError::io(origin, e))?,
        None => return Err(ClweError::parse(origin, 1, "missing header")),
    };
    let (count, dim) = parse_header(&header).ok_or_else(|| {
        ClweError::parse(origin, 1, format!("malformed header {header:?}"))
    })?;
    if dim < 2 {
        return Err(ClweError::parse(origin, 1, format!("dimension {dim} < 2")));
    }

    let limit = count.min(max_vocab);
    let mut words = Vec::with_capacity(limit);
    let mut seen = HashMap::with_capacity(limit);
    let mut data = Vec::with_capacity(limit * dim);
    for (offset, line) in lines.enumerate() {
        if words.len() >= limit {
            break;
        }
        let lineno = offset + 2;
        let line = line.map_err(|e| ClweError::io(origin, e))?;
        let line = line.trim_end_matches(['\r', '\n', ' ']);
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let token = fields.next().unwrap_or_default();
        let start = data.len();
        for field in fields {
            let x: f64 = field.parse().map_err(|_| {
                ClweError::parse(origin, lineno, format!("invalid float {field:?}"))
            })?;
            data.push(x);
        }
        let found = data.len() - start;
        if found != dim {
            return Err(ClweError::parse(
                origin,
                lineno,
                format!("expected {dim} values, found {found}"),
            ));
        }
        if seen.contains_key(token) {
            data.truncate(start);
            continue;
        }
        seen.insert(token.to_string(), words.len());
        words.push(token.to_string());
    }
    if words.is_empty() {
        return Err(ClweError::EmptySpace);
    }
    let vectors = Array2::from_shape_vec((words.len(), dim), data)
        .expect("row lengths checked while parsing");
    EmbeddingSpace::new(words, vectors)
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let mut it = line.split_whitespace();
    let count = it.next()?.parse().ok()?;
    let dim = it.next()?.parse().ok()?;
    if it.next().is_some() {
        return None;
    }
    Some((count, dim))
}

/// Alternately length-normalize and mean-center the space, finishing with a
/// length normalization so every output row has unit norm.
pub fn iterative_normalize(space: &EmbeddingSpace, iterations: usize) -> Result<EmbeddingSpace> {
    if space.len() < 2 {
        return Err(ClweError::TooFewSamples {
            needed: 2,
            got: space.len(),
        });
    }
    if iterations == 0 {
        return Err(ClweError::Config("iterations must be positive".into()));
    }
    let mut m = space.vectors.clone();
    for _ in 0..iterations {
        unit_rows(&mut m, &space.words)?;
        center_columns(&mut m);
    }
    unit_rows(&mut m, &space.words)?;
    EmbeddingSpace::new(space.words.clone(), m)
}

fn unit_rows(m: &mut Array2<f64>, words: &[String]) -> Result<()> {
    for (i, mut row) in m.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(ClweError::DegenerateVector {
                token: words[i].clone(),
            });
        }
        row /= norm;
    }
    Ok(())
}

fn center_columns(m: &mut Array2<f64>) {
    let mean = m.mean_axis(Axis(0)).expect("non-empty matrix");
    *m -= &mean;
}
