//! Embedding containers and the vector-space primitives built on them.
//!
//! Global representations are stored column-contiguous: an [`EmbeddingMatrix`]
//! of `n` samples in dimension `d` is a `d x n` matrix whose every column has
//! unit Euclidean norm. The constructors enforce that invariant, so code
//! receiving an `EmbeddingMatrix` never needs to re-check norms. Raw,
//! un-normalized data (student inputs, pre-normalization head outputs) is
//! passed around as plain [`DMatrix`] instead.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};

/// Tolerance for accepting a column as already unit-norm.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

/// Norms below this are treated as zero and refuse to normalize.
pub const ZERO_NORM_FLOOR: f64 = 1e-12;

/// Which model produced an embedding or similarity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

/// Column-contiguous matrix of unit-norm embeddings, one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: DMatrix<f64>,
    role: Role,
}

impl EmbeddingMatrix {
    /// Normalizes every column of `data` to unit norm and wraps the result.
    ///
    /// Fails with [`Error::ZeroVector`] naming the first offending column if
    /// any column norm is below [`ZERO_NORM_FLOOR`], and with
    /// [`Error::NonFinite`] if the input contains NaN or infinity.
    pub fn normalize_columns(mut data: DMatrix<f64>, role: Role) -> Result<Self> {
        check_finite(&data, "embedding data")?;
        for (index, mut column) in data.column_iter_mut().enumerate() {
            let norm = column.norm();
            if norm < ZERO_NORM_FLOOR {
                return Err(Error::ZeroVector { index, norm });
            }
            column /= norm;
        }
        Ok(Self { data, role })
    }

    /// Wraps `data` whose columns are already unit-norm.
    ///
    /// Every column norm must be within [`UNIT_NORM_TOLERANCE`] of 1;
    /// otherwise [`Error::NonNormalized`] names the first violation. Used
    /// when loading embeddings that were normalized before serialization.
    pub fn from_unit_columns(data: DMatrix<f64>, role: Role) -> Result<Self> {
        check_finite(&data, "embedding data")?;
        for (index, column) in data.column_iter().enumerate() {
            let norm = column.norm();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::NonNormalized {
                    index,
                    norm,
                    tolerance: UNIT_NORM_TOLERANCE,
                });
            }
        }
        Ok(Self { data, role })
    }

    /// Embedding dimensionality (rows).
    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    /// Number of samples (columns).
    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    /// Borrowed view of one embedding column.
    pub fn column(&self, index: usize) -> Result<DVectorView<'_, f64>> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.len(),
            });
        }
        Ok(self.data.column(index))
    }

    /// New matrix holding the listed columns, in the given order.
    ///
    /// Gathering preserves the unit-norm invariant, so this is the cheap way
    /// to build a training batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        for &index in indices {
            if index >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index,
                    len: self.len(),
                });
            }
        }
        Ok(Self {
            data: self.data.select_columns(indices.iter()),
            role: self.role,
        })
    }

    /// Pairwise cosine similarities `S = F^T F`, shape `n x n`.
    ///
    /// Columns are unit-norm by construction, so entries lie in `[-1, 1]` up
    /// to roundoff and the diagonal is 1.
    pub fn similarity(&self) -> SimilarityMatrix {
        SimilarityMatrix {
            data: self.data.tr_mul(&self.data),
            role: self.role,
        }
    }
}

/// Dense matrix of pairwise cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    data: DMatrix<f64>,
    role: Role,
}

impl SimilarityMatrix {
    /// Number of samples the matrix compares (it is square).
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }
}

fn check_finite(data: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context })
    }
}

/// Returns `v / ||v||`, or [`Error::ZeroVector`] when the norm is below
/// [`ZERO_NORM_FLOOR`].
pub fn l2_normalize(v: &DVector<f64>) -> Result<DVector<f64>> {
    let norm = v.norm();
    if norm < ZERO_NORM_FLOOR {
        return Err(Error::ZeroVector { index: 0, norm });
    }
    Ok(v / norm)
}

/// Pulls a gradient back through `x -> x / ||x||`.
///
/// For `n(x) = x / ||x||` and an upstream gradient `g = dL/dn`, the chain
/// rule gives `dL/dx = (g - n (n . g)) / ||x||`: the component of `g` along
/// the normalized direction is projected out, then the whole thing is scaled
/// by the inverse input norm.
pub fn l2_normalize_backward(x: &DVector<f64>, upstream: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != upstream.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: upstream.len(),
        });
    }
    let norm = x.norm();
    if norm < ZERO_NORM_FLOOR {
        return Err(Error::ZeroVector { index: 0, norm });
    }
    let unit = x / norm;
    let radial = unit.dot(upstream);
    Ok((upstream - unit * radial) / norm)
}

/// Generalized-mean pooling across a set of descriptors.
///
/// Coordinate `j` of the result is `(mean_i d_i[j]^p)^(1/p)`. With `p = 1`
/// this is the arithmetic mean; as `p` grows it approaches the coordinate
/// maximum. Used to fuse descriptors of the same sample extracted at several
/// scales. Intended for non-negative activations; a fractional power applied
/// to negative coordinates yields NaN and is rejected.
pub fn gem_pool(descriptors: &[DVector<f64>], p: f64) -> Result<DVector<f64>> {
    if descriptors.is_empty() {
        return Err(Error::EmptyInput {
            context: "gem_pool needs at least one descriptor",
        });
    }
    if !p.is_finite() || p == 0.0 {
        return Err(Error::InvalidPower(p));
    }
    let dim = descriptors[0].len();
    for d in descriptors {
        if d.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: d.len(),
            });
        }
    }
    let count = descriptors.len() as f64;
    let mut pooled = DVector::zeros(dim);
    for d in descriptors {
        pooled += d.map(|v| v.powf(p));
    }
    pooled = pooled.map(|v| (v / count).powf(1.0 / p));
    if pooled.iter().all(|v| v.is_finite()) {
        Ok(pooled)
    } else {
        Err(Error::NonFinite {
            context: "gem_pool result (negative input with fractional power?)",
        })
    }
}
