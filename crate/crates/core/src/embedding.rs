//! Text/visual fusion, visual-to-text projection, and similarity scoring.

use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::providers::{TEXT_DIM, VISUAL_DIM};
use crate::scalar::{dot, norm, Scalar};

pub const DEFAULT_ALPHA: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedEmbedding<T> {
    pub vector: Vec<T>,
    pub alpha_used: T,
    pub has_visual: bool,
}

impl<T: Scalar> FusedEmbedding<T> {
    /// Embedding with no visual contribution.
    pub fn text_only(vector: Vec<T>) -> Self {
        Self {
            vector,
            alpha_used: T::one(),
            has_visual: false,
        }
    }
}

/// Column-orthonormal `rows x cols` matrix mapping the visual space into the
/// text space. Entries are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix<T> {
    rows: usize,
    cols: usize,
    entries: Vec<T>,
    seed: u64,
}

impl<T: Scalar> ProjectionMatrix<T> {
    pub fn from_parts(rows: usize, cols: usize, entries: Vec<T>, seed: u64) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::Dimension {
                expected: rows * cols,
                actual: entries.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            entries,
            seed,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.entries[row * self.cols + col]
    }

    pub fn column(&self, col: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ProjectionMatrix<U> {
        ProjectionMatrix {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|&x| U::of(x.as_f64())).collect(),
            seed: self.seed,
        }
    }
}

/// Seeded Gaussian `1024 x 768` matrix with Gram-Schmidt orthonormalized
/// columns.
pub fn build_projection<T: Scalar>(seed: u64) -> ProjectionMatrix<T> {
    build_projection_with_dims(TEXT_DIM, VISUAL_DIM, seed)
}

pub fn build_projection_with_dims<T: Scalar>(rows: usize, cols: usize, seed: u64) -> ProjectionMatrix<T> {
    assert!(cols <= rows, "cannot orthonormalize {cols} columns in {rows} dimensions");
    let columns = orthonormal_columns(rows, cols, seed);
    let mut entries = vec![T::zero(); rows * cols];
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            entries[i * cols + j] = T::of(v);
        }
    }
    ProjectionMatrix {
        rows,
        cols,
        entries,
        seed,
    }
}

type ColumnKey = (usize, usize, u64);
type ColumnCache = Vec<(ColumnKey, Arc<Vec<Vec<f64>>>)>;

const COLUMN_CACHE: usize = 4;

fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Arc<Vec<Vec<f64>>> {
    static CACHE: Mutex<ColumnCache> = Mutex::new(Vec::new());
    let key = (rows, cols, seed);
    if let Some((_, hit)) = CACHE.lock().expect("cache lock").iter().find(|(k, _)| *k == key) {
        return Arc::clone(hit);
    }
    let columns = Arc::new(gram_schmidt(rows, cols, seed));
    let mut cache = CACHE.lock().expect("cache lock");
    if cache.len() == COLUMN_CACHE {
        cache.remove(0);
    }
    cache.push((key, Arc::clone(&columns)));
    columns
}

fn gram_schmidt(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: Vec<Vec<f64>> = (0..cols)
        .map(|_| (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();

    // Modified Gram-Schmidt, run twice: one pass leaves O(eps * cond) residue.
    for _ in 0..2 {
        for j in 0..cols {
            let (done, rest) = columns.split_at_mut(j);
            let col = &mut rest[0];
            for q in done.iter() {
                let proj = dot(q, col);
                for (c, &qv) in col.iter_mut().zip(q) {
                    *c -= proj * qv;
                }
            }
            let n = norm(col);
            for c in col.iter_mut() {
                *c /= n;
            }
        }
    }
    columns
}

pub fn project_visual<T: Scalar>(v: &[T], projection: &ProjectionMatrix<T>) -> Result<Vec<T>> {
    if v.len() != projection.cols {
        return Err(Error::Dimension {
            expected: projection.cols,
            actual: v.len(),
        });
    }
    Ok(projection
        .entries
        .chunks_exact(projection.cols)
        .map(|row| dot(row, v))
        .collect())
}

/// Componentwise mean of several projected visual vectors.
pub fn mean_vector<T: Scalar>(vectors: &[Vec<T>]) -> Option<Vec<T>> {
    let first = vectors.first()?;
    let mut acc = vec![T::zero(); first.len()];
    for v in vectors {
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = T::of_usize(vectors.len());
    for a in acc.iter_mut() {
        *a /= n;
    }
    Some(acc)
}

/// `alpha * text + (1 - alpha) * visual`, without renormalization.
pub fn fuse<T: Scalar>(text: &[T], visual: Option<&[T]>, alpha: T) -> Result<FusedEmbedding<T>> {
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let Some(visual) = visual else {
        return Ok(FusedEmbedding::text_only(text.to_vec()));
    };
    if visual.len() != text.len() {
        return Err(Error::Dimension {
            expected: text.len(),
            actual: visual.len(),
        });
    }
    let beta = T::one() - alpha;
    Ok(FusedEmbedding {
        vector: text
            .iter()
            .zip(visual)
            .map(|(&t, &v)| alpha * t + beta * v)
            .collect(),
        alpha_used: alpha,
        has_visual: true,
    })
}

/// Cosine similarity; a zero vector scores 0 against anything.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(cosine_unchecked(a, b))
}

pub(crate) fn cosine_unchecked<T: Scalar>(a: &[T], b: &[T]) -> T {
    let denom = norm(a) * norm(b);
    if denom == T::zero() {
        return T::zero();
    }
    let c = dot(a, b) / denom;
    c.max(-T::one()).min(T::one())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Visual,
    Mixed,
}

/// Token-level embeddings of one chunk, caption, image, or query.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingSet<T> {
    pub owner: String,
    pub vectors: Vec<Vec<T>>,
    pub modality: Modality,
}

impl<T: Scalar> TokenEmbeddingSet<T> {
    /// Builds a set, dropping zero vectors and scaling the rest to unit length.
    pub fn new(owner: impl Into<String>, vectors: Vec<Vec<T>>, modality: Modality) -> Self {
        let vectors = vectors
            .into_iter()
            .filter_map(|mut v| {
                let n = norm(&v);
                if n == T::zero() {
                    return None;
                }
                v.iter_mut().for_each(|x| *x /= n);
                Some(v)
            })
            .collect();
        Self {
            owner: owner.into(),
            vectors,
            modality,
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Late-interaction score: for each query token, the best cosine against any
/// document token, summed over query tokens.
pub fn maxsim<T: Scalar>(query: &TokenEmbeddingSet<T>, doc: &TokenEmbeddingSet<T>) -> Result<T> {
    if query.is_empty() || doc.is_empty() {
        return Err(Error::invalid("maxsim needs non-empty token sets"));
    }
    let mut total = T::zero();
    for q in &query.vectors {
        let mut best = T::neg_infinity();
        for d in &doc.vectors {
            if d.len() != q.len() {
                return Err(Error::Dimension {
                    expected: q.len(),
                    actual: d.len(),
                });
            }
            best = best.max(cosine_unchecked(q, d));
        }
        total += best;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn fusion_examples() {
        let t = unit(4, 0);
        let v = unit(4, 1);
        assert_eq!(fuse(&t, Some(&v), 1.0).unwrap().vector, t);
        assert_eq!(fuse(&t, Some(&v), 0.0).unwrap().vector, v);
        let f = fuse(&t, Some(&v), 0.7).unwrap();
        assert_eq!(f.vector, vec![0.7, 0.30000000000000004, 0.0, 0.0]);
        assert!(f.has_visual);

        let none = fuse(&t, None, 0.4).unwrap();
        assert_eq!(none.alpha_used, 1.0);
        assert!(!none.has_visual);

        assert!(fuse(&t, Some(&v), 1.5).is_err());
        assert!(fuse(&t, Some(&unit(3, 0)), 0.5).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = [1.0f64, 2.0, 3.0];
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c: f64 = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn maxsim_examples() {
        let q = TokenEmbeddingSet::new("q", vec![unit(3, 0)], Modality::Text);
        assert!((maxsim(&q, &q).unwrap() - 1.0).abs() < 1e-12);
        let d = TokenEmbeddingSet::new("d", vec![unit(3, 1), unit(3, 2)], Modality::Mixed);
        assert_eq!(maxsim(&q, &d).unwrap(), 0.0);
        let empty = TokenEmbeddingSet::<f64>::new("e", vec![vec![0.0; 3]], Modality::Text);
        assert!(empty.is_empty());
        assert!(maxsim(&q, &empty).is_err());
    }

    #[test]
    fn projection_is_orthonormal_and_seeded() {
        let p: ProjectionMatrix<f64> = build_projection_with_dims(64, 48, 5);
        assert_eq!(p, build_projection_with_dims(64, 48, 5));
        assert_ne!(p, build_projection_with_dims::<f64>(64, 48, 6));
        for i in 0..48 {
            for j in 0..48 {
                let g = dot(&p.column(i), &p.column(j));
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g - want).abs() < 1e-12, "gram[{i}][{j}] = {g}");
            }
        }
    }

    #[test]
    fn projection_matches_direct_multiply() {
        let p: ProjectionMatrix<f64> = build_projection_with_dims(16, 8, 9);
        let v: Vec<f64> = (0..8).map(|i| (i as f64) - 3.5).collect();
        let got = project_visual(&v, &p).unwrap();
        for (r, g) in got.iter().enumerate() {
            let mut acc = 0.0;
            for (c, x) in v.iter().enumerate() {
                acc += p.get(r, c) * x;
            }
            assert!((g - acc).abs() < 1e-12);
        }
        assert!(project_visual(&v[..7], &p).is_err());
        assert_eq!(project_visual(&[0.0; 8], &p).unwrap(), vec![0.0; 16]);
    }

    proptest! {
        #[test]
        fn fusion_is_linear(
            t1 in proptest::collection::vec(-1.0f64..1.0, 6),
            t2 in proptest::collection::vec(-1.0f64..1.0, 6),
            v1 in proptest::collection::vec(-1.0f64..1.0, 6),
            v2 in proptest::collection::vec(-1.0f64..1.0, 6),
            alpha in 0.0f64..=1.0,
        ) {
            let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
            let lhs = add(&fuse(&t1, Some(&v1), alpha).unwrap().vector, &fuse(&t2, Some(&v2), alpha).unwrap().vector);
            let rhs = fuse(&add(&t1, &t2), Some(&add(&v1, &v2)), alpha).unwrap().vector;
            for (a, b) in lhs.iter().zip(&rhs) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn maxsim_is_scale_invariant_and_bounded(
            q in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 5), 1..4),
            d in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 5), 1..5),
            scale in 0.1f64..10.0,
        ) {
            let qs = TokenEmbeddingSet::new("q", q.clone(), Modality::Text);
            let ds = TokenEmbeddingSet::new("d", d.clone(), Modality::Text);
            prop_assume!(!qs.is_empty() && !ds.is_empty());
            let scaled: Vec<Vec<f64>> = d.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
            let ss = TokenEmbeddingSet::new("d", scaled, Modality::Text);
            let a = maxsim(&qs, &ds).unwrap();
            let b = maxsim(&qs, &ss).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a <= qs.len() as f64 + 1e-12);
        }

        #[test]
        fn cosine_is_symmetric(
            a in proptest::collection::vec(-1.0f64..1.0, 8),
            b in proptest::collection::vec(-1.0f64..1.0, 8),
        ) {
            prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
        }
    }
}
