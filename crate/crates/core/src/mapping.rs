//! Linear and piecewise-linear maps between embedding spaces, and their
//! text persistence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{ClweError, Result};
use crate::numerics::orthogonality_error;

/// Anything that maps rows of one space into another.
///
/// `words` holds the vocabulary index of each row in `vectors`, so maps that
/// depend on the word (piecewise maps) can look up its subspace.
pub trait Mapping: Sync {
    fn map_rows(&self, vectors: ArrayView2<'_, f64>, words: &[usize]) -> Array2<f64>;
}

/// A `d x d` matrix `W` applied as `v -> W v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub w: Array2<f64>,
    pub orthogonal_hint: bool,
}

impl LinearMap {
    pub fn new(w: Array2<f64>, orthogonal_hint: bool) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(ClweError::Shape {
                expected: "square matrix".into(),
                actual: format!("{}x{}", w.nrows(), w.ncols()),
            });
        }
        if !w.iter().all(|x| x.is_finite()) {
            return Err(ClweError::Numeric("non-finite map entry".into()));
        }
        Ok(LinearMap { w, orthogonal_hint })
    }

    pub fn identity(dim: usize) -> Self {
        LinearMap {
            w: Array2::eye(dim),
            orthogonal_hint: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn transpose(&self) -> LinearMap {
        LinearMap {
            w: self.w.t().to_owned(),
            orthogonal_hint: self.orthogonal_hint,
        }
    }

    /// `||W Wᵀ - I||_F`.
    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(self.w.view())
    }

    /// Rows mapped by `W` (each row `v` becomes `W v`).
    pub fn apply(&self, vectors: ArrayView2<'_, f64>) -> Array2<f64> {
        vectors.dot(&self.w.t())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_matrix(path.as_ref(), self.w.view(), false)
    }

    pub fn load(path: impl AsRef<Path>, orthogonal_hint: bool) -> Result<Self> {
        let path = path.as_ref();
        let w = read_matrix(path)?;
        if w.nrows() != w.ncols() {
            return Err(ClweError::parse(path, 1, "map matrix is not square"));
        }
        LinearMap::new(w, orthogonal_hint)
    }
}

impl Mapping for LinearMap {
    fn map_rows(&self, vectors: ArrayView2<'_, f64>, _words: &[usize]) -> Array2<f64> {
        self.apply(vectors)
    }
}

/// One matrix per subspace; word `i` is mapped by `maps[assignments[i]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignedMaps {
    pub assignments: Vec<usize>,
    pub maps: Vec<Array2<f64>>,
}

impl Mapping for AssignedMaps {
    fn map_rows(&self, vectors: ArrayView2<'_, f64>, words: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros(vectors.raw_dim());
        for ((mut dst, src), &word) in out.rows_mut().into_iter().zip(vectors.rows()).zip(words) {
            let w = &self.maps[self.assignments[word]];
            dst.assign(&w.dot(&src));
        }
        out
    }
}

/// Write a matrix as text. Square maps use a single `d` header line; other
/// matrices use `rows cols`. Values use the shortest exact representation.
pub fn write_matrix(path: &Path, m: ArrayView2<'_, f64>, with_shape: bool) -> Result<()> {
    let file = File::create(path).map_err(|e| ClweError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| ClweError::io(path, e);
    if with_shape || m.nrows() != m.ncols() {
        writeln!(w, "{} {}", m.nrows(), m.ncols()).map_err(io)?;
    } else {
        writeln!(w, "{}", m.nrows()).map_err(io)?;
    }
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
        writeln!(w, "{}", line.join(" ")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Read a matrix written by [`write_matrix`].
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| ClweError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| ClweError::parse(path, 1, "missing header"))?
        .map_err(|e| ClweError::io(path, e))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| ClweError::parse(path, 1, format!("malformed header {header:?}")))?;
    let (rows, cols) = match dims.as_slice() {
        [d] => (*d, *d),
        [r, c] => (*r, *c),
        _ => return Err(ClweError::parse(path, 1, format!("malformed header {header:?}"))),
    };
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| ClweError::parse(path, r + 2, "missing row"))?
            .map_err(|e| ClweError::io(path, e))?;
        let before = data.len();
        for t in line.split_whitespace() {
            let x: f64 = t
                .parse()
                .map_err(|_| ClweError::parse(path, r + 2, format!("invalid float {t:?}")))?;
            data.push(x);
        }
        if data.len() - before != cols {
            return Err(ClweError::parse(
                path,
                r + 2,
                format!("expected {cols} values, found {}", data.len() - before),
            ));
        }
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn map_roundtrip_is_exact() {
        let w = array![[0.1, 1.0 / 3.0], [-2.0e-17, 7.25]];
        let m = LinearMap::new(w.clone(), false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.txt");
        m.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("2\n"));
        let back = LinearMap::load(&p, false).unwrap();
        assert_eq!(back.w, w);
    }

    #[test]
    fn rectangular_matrix_has_shape_header() {
        let m = array![[1.0, 2.0, 3.0]];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        write_matrix(&p, m.view(), true).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), m);
    }

    #[test]
    fn linear_map_applies_w_to_rows() {
        let m = LinearMap::new(array![[0.0, -1.0], [1.0, 0.0]], true).unwrap();
        let out = m.apply(array![[1.0, 0.0]].view());
        assert_eq!(out, array![[0.0, 1.0]]);
        assert!(m.orthogonality_error() < 1e-15);
        assert!(LinearMap::new(array![[1.0, 2.0, 3.0]], false).is_err());
    }

    #[test]
    fn assigned_maps_use_word_subspace() {
        let maps = AssignedMaps {
            assignments: vec![0, 1],
            maps: vec![Array2::eye(2), array![[-1.0, 0.0], [0.0, -1.0]]],
        };
        let v = array![[1.0, 2.0], [1.0, 2.0]];
        let out = maps.map_rows(v.view(), &[0, 1]);
        assert_eq!(out, array![[1.0, 2.0], [-1.0, -2.0]]);
        let out = maps.map_rows(v.slice(ndarray::s![..1, ..]), &[1]);
        assert_eq!(out, array![[-1.0, -2.0]]);
    }
}
