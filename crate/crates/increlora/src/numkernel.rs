//! Dense f64 matrix kernels and the seeded RNG used everywhere else.
//!
//! Everything above this module (adapters, backprop, the trainer) works in
//! terms of [`DenseMatrix`] and [`Rng`]. Matrices are row-major and all
//! arithmetic is plain f64 with no internal parallelism, so a fixed seed
//! reproduces every downstream artifact bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Row-major dense matrix. Shape is fixed at construction; all binary ops
/// panic on shape mismatch naming both shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive, got {rows}x{cols}");
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        assert!(cols > 0, "from_rows needs at least one column");
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows: {} vs {}", r.len(), cols);
            data.extend_from_slice(r);
        }
        DenseMatrix { rows: rows.len(), cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data len {} does not fill {rows}x{cols}", data.len());
        DenseMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        assert!(r < self.rows, "row {r} out of range for {}x{}", self.rows, self.cols);
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) {
        self.assert_same_shape(other, "add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// self += s * other, the only fused op the trainer's hot loop needs.
    pub fn add_scaled(&mut self, other: &DenseMatrix, s: f64) {
        self.assert_same_shape(other, "add_scaled");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &DenseMatrix) -> DenseMatrix {
        self.zip(other, "hadamard", |a, b| a * b)
    }

    fn zip(&self, other: &DenseMatrix, op: &str, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
        self.assert_same_shape(other, op);
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    fn assert_same_shape(&self, other: &DenseMatrix, op: &str) {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "{op}: shape {}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
    }
}

/// C = A * B. Panics unless A.cols == B.rows.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(
        a.cols, b.rows,
        "matmul: {}x{} * {}x{} has mismatched inner dims",
        a.rows, a.cols, b.rows, b.cols
    );
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// C = A * B^T. Panics unless A.cols == B.cols.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(
        a.cols, b.cols,
        "matmul_nt: {}x{} * ({}x{})^T has mismatched inner dims",
        a.rows, a.cols, b.rows, b.cols
    );
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = &a.data[i * a.cols..(i + 1) * a.cols];
        for j in 0..b.rows {
            let brow = &b.data[j * b.cols..(j + 1) * b.cols];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    out
}

/// C = A^T * B. Panics unless A.rows == B.rows.
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(
        a.rows, b.rows,
        "matmul_tn: ({}x{})^T * {}x{} has mismatched inner dims",
        a.rows, a.cols, b.rows, b.cols
    );
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = &a.data[k * a.cols..(k + 1) * a.cols];
        let brow = &b.data[k * b.cols..(k + 1) * b.cols];
        for (i, av) in arow.iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Rank-1 product `col * row` (col is m x 1, row is 1 x n) giving m x n.
pub fn outer_product(col: &DenseMatrix, row: &DenseMatrix) -> DenseMatrix {
    assert_eq!(col.cols, 1, "outer_product: first arg must be a column, got {}x{}", col.rows, col.cols);
    assert_eq!(row.rows, 1, "outer_product: second arg must be a row, got {}x{}", row.rows, row.cols);
    let mut out = DenseMatrix::zeros(col.rows, row.cols);
    for i in 0..col.rows {
        let c = col.data[i];
        for j in 0..row.cols {
            out.data[i * row.cols + j] = c * row.data[j];
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: lengths {} vs {}", a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seeded generator. Each logical consumer gets its own ChaCha stream so
/// adding draws in one place never shifts another consumer's sequence.
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    /// One draw from N(0, std^2). std == 0 yields exactly 0.
    pub fn normal(&mut self, std: f64) -> f64 {
        assert!(std >= 0.0 && std.is_finite(), "normal: bad std {std}");
        let n = Normal::new(0.0, std).expect("valid normal params");
        n.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, len: usize, std: f64) -> Vec<f64> {
        (0..len).map(|_| self.normal(std)).collect()
    }
}

/// Fresh rows x cols matrix with iid N(0, std^2) entries.
pub fn gaussian_fill(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, rng.normal_vec(rows * cols, std))
}
