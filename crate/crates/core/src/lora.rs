//! Low-rank weight deltas: `W = W0 + B·A`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adapter rank used when none is given.
pub const DEFAULT_RANK: usize = 16;
const MAGIC: &[u8; 4] = b"MLRA";

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged matrix rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                expected: self.cols,
                actual: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == T::zero() {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::invalid(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }
}

/// Rank-`r` adapter for a `d×d` weight: `A` is `r×d`, `B` is `d×r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    a: Matrix<T>,
    b: Matrix<T>,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(a: Matrix<T>, b: Matrix<T>) -> Result<Self> {
        let (r, d) = (a.rows, a.cols);
        if r == 0 {
            return Err(Error::invalid("adapter rank must be at least 1"));
        }
        if r > d {
            return Err(Error::invalid(format!("adapter rank {r} exceeds dimension {d}")));
        }
        if (b.rows, b.cols) != (d, r) {
            return Err(Error::invalid(format!(
                "B must be {d}x{r}, got {}x{}",
                b.rows, b.cols
            )));
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.rows
    }

    pub fn dim(&self) -> usize {
        self.a.cols
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    /// `ΔW = B·A`.
    pub fn delta(&self) -> Matrix<T> {
        self.b.matmul(&self.a).expect("shapes checked at construction")
    }

    /// Stacks two adapters into one of rank `r + r'` whose delta is the sum.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let d = self.dim();
        if other.dim() != d {
            return Err(Error::Dimension {
                expected: d,
                actual: other.dim(),
            });
        }
        let r = self.rank() + other.rank();
        let mut a = self.a.data.clone();
        a.extend_from_slice(&other.a.data);
        let mut b = Matrix::zeros(d, r);
        for i in 0..d {
            for j in 0..self.rank() {
                b.set(i, j, self.b.get(i, j));
            }
            for j in 0..other.rank() {
                b.set(i, self.rank() + j, other.b.get(i, j));
            }
        }
        Self::new(Matrix::from_vec(r, d, a)?, b)
    }
}

pub fn apply_delta<T: Scalar>(w0: &Matrix<T>, adapter: &LoraAdapter<T>) -> Result<Matrix<T>> {
    let d = adapter.dim();
    if (w0.rows, w0.cols) != (d, d) {
        return Err(Error::invalid(format!(
            "W0 must be {d}x{d}, got {}x{}",
            w0.rows, w0.cols
        )));
    }
    w0.add(&adapter.delta())
}

/// Adapter parameters as a fraction of the full matrix: `2dr / d²`.
pub fn param_savings(d: usize, r: usize) -> Result<f64> {
    if r == 0 || r > d {
        return Err(Error::invalid(format!("need 1 <= r <= d, got r={r}, d={d}")));
    }
    Ok((2 * d * r) as f64 / (d * d) as f64)
}

/// Layout: magic, u32 d, u32 r, then A (r×d) and B (d×r) as little-endian f32.
pub fn save_adapter<T: Scalar>(adapter: &LoraAdapter<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * adapter.dim() * adapter.rank());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(adapter.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(adapter.rank() as u32).to_le_bytes());
    for v in adapter.a.data.iter().chain(&adapter.b.data) {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_adapter<T: Scalar>(path: &Path) -> Result<LoraAdapter<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::invalid(format!("{} is not an adapter file", path.display())));
    }
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let r = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != 8 * d * r {
        return Err(Error::Dimension {
            expected: 8 * d * r,
            actual: body.len(),
        });
    }
    let vals: Vec<T> = body
        .chunks_exact(4)
        .map(|c| T::of(f64::from(f32::from_le_bytes(c.try_into().unwrap()))))
        .collect();
    let (a, b) = vals.split_at(r * d);
    LoraAdapter::new(Matrix::from_vec(r, d, a.to_vec())?, Matrix::from_vec(d, r, b.to_vec())?)
}
