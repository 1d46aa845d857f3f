//! Representation-level mixup.
//!
//! Instead of mixing raw inputs, pairs of already-normalized global
//! embeddings are blended and re-normalized: for sample `k` with partner
//! `r_k` the virtual embedding is `normalize(lambda f_k + (1 - lambda)
//! f_r_k)`. One mixing coefficient is drawn per batch from `Beta(alpha,
//! alpha)`, partners are drawn uniformly among the other samples, and the
//! same coefficient and partners are applied to the teacher and the student
//! so that their virtual samples stay in correspondence.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::embed::{EmbeddingMatrix, ZERO_NORM_FLOOR};
use crate::error::{Error, Result};

/// Attempts to replace a partner whose blend collapses to the zero vector
/// before giving up. Collapse needs two antipodal embeddings and an unlucky
/// coefficient, so hitting this bound means the batch is pathological.
const MAX_PARTNER_RETRIES: usize = 64;

/// The coefficient and partner assignment of one mixing round.
#[derive(Debug, Clone, PartialEq)]
pub struct MixRecord {
    lambda: f64,
    partners: Vec<usize>,
}

impl MixRecord {
    /// Builds a round record from an explicit coefficient and partner
    /// assignment (e.g. to replay a logged round).
    pub fn new(lambda: f64, partners: Vec<usize>) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidLambda(lambda));
        }
        let batch = partners.len();
        if batch < 2 {
            return Err(Error::BatchTooSmall(batch));
        }
        for (k, &r) in partners.iter().enumerate() {
            if r == k {
                return Err(Error::SelfPartner(k));
            }
            if r >= batch {
                return Err(Error::IndexOutOfRange {
                    index: r,
                    len: batch,
                });
            }
        }
        Ok(Self { lambda, partners })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Partner index `r_k` for each original sample `k`; never equals `k`.
    pub fn partners(&self) -> &[usize] {
        &self.partners
    }

    /// Number of original samples in the mixed batch.
    pub fn batch_size(&self) -> usize {
        self.partners.len()
    }

    /// Column of the virtual sample built from original `k` in the joint
    /// `[originals | mixed]` layout.
    pub fn mixed_index(&self, k: usize) -> usize {
        self.partners.len() + k
    }
}

/// A teacher/student batch extended with its mixed virtual samples.
///
/// Both matrices hold the originals in columns `0..b` and the mixed samples
/// in columns `b..2b`, where column `b + k` blends original `k` with its
/// partner `record.partners()[k]`.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub teacher: EmbeddingMatrix,
    pub student: EmbeddingMatrix,
    pub record: MixRecord,
}

/// Draws the per-batch mixing coefficient from `Beta(alpha, alpha)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::InvalidAlpha(alpha));
    }
    let beta = Beta::new(alpha, alpha).map_err(|_| Error::InvalidAlpha(alpha))?;
    Ok(beta.sample(rng))
}

/// Draws a partner `r_k != k` uniformly for every `k` in `0..batch`.
///
/// Exactly one value is consumed from `rng` per sample, so the draw count is
/// independent of the outcome.
pub fn sample_partners<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Result<Vec<usize>> {
    if batch < 2 {
        return Err(Error::BatchTooSmall(batch));
    }
    Ok((0..batch).map(|k| draw_partner(batch, k, rng)).collect())
}

fn draw_partner<R: Rng + ?Sized>(batch: usize, k: usize, rng: &mut R) -> usize {
    let r = rng.random_range(0..batch - 1);
    if r >= k { r + 1 } else { r }
}

/// Blends every column of `f` with its assigned partner and re-normalizes.
///
/// Returns the mixed block only (`batch` columns). The endpoints are exact:
/// `lambda = 1` returns bit-identical copies of the originals and `lambda =
/// 0` bit-identical copies of the partner columns. A blend whose norm falls
/// below [`ZERO_NORM_FLOOR`] (antipodal pair, balanced coefficient) is
/// reported as [`Error::ZeroVector`] with the offending block index.
pub fn mix_batch(f: &EmbeddingMatrix, partners: &[usize], lambda: f64) -> Result<EmbeddingMatrix> {
    let b = f.len();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if partners.len() != b {
        return Err(Error::LengthMismatch {
            left: b,
            right: partners.len(),
            context: "batch columns vs partner assignments",
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidLambda(lambda));
    }
    for (k, &r) in partners.iter().enumerate() {
        if r >= b {
            return Err(Error::IndexOutOfRange { index: r, len: b });
        }
        if r == k {
            return Err(Error::SelfPartner(k));
        }
    }

    let data = f.data();
    if lambda == 1.0 {
        return EmbeddingMatrix::from_unit_columns(data.clone(), f.role());
    }
    if lambda == 0.0 {
        return EmbeddingMatrix::from_unit_columns(data.select_columns(partners.iter()), f.role());
    }
    let mut mixed = DMatrix::zeros(f.dim(), b);
    for (k, &r) in partners.iter().enumerate() {
        let blend = data.column(k) * lambda + data.column(r) * (1.0 - lambda);
        mixed.set_column(k, &blend);
    }
    EmbeddingMatrix::normalize_columns(mixed, f.role())
}

/// Mixes a teacher batch and the matching student batch with one coefficient
/// and one partner assignment, returning joint `[originals | mixed]`
/// matrices.
///
/// Partners are drawn here (one uniform draw per sample). If a draw would
/// collapse either the teacher or the student blend to zero, that partner is
/// redrawn up to [`MAX_PARTNER_RETRIES`] times before the batch is rejected
/// with [`Error::ZeroVector`].
pub fn augment_pair<R: Rng + ?Sized>(
    teacher: &EmbeddingMatrix,
    student: &EmbeddingMatrix,
    lambda: f64,
    rng: &mut R,
) -> Result<MixedBatch> {
    let b = teacher.len();
    if b != student.len() {
        return Err(Error::LengthMismatch {
            left: b,
            right: student.len(),
            context: "teacher vs student batch",
        });
    }
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidLambda(lambda));
    }

    let mut partners = sample_partners(b, rng)?;
    if lambda != 0.0 && lambda != 1.0 {
        for (k, partner) in partners.iter_mut().enumerate() {
            let mut attempts = 0;
            while blend_collapses(teacher, k, *partner, lambda)
                || blend_collapses(student, k, *partner, lambda)
            {
                attempts += 1;
                if attempts > MAX_PARTNER_RETRIES {
                    return Err(Error::ZeroVector {
                        index: k,
                        norm: 0.0,
                    });
                }
                *partner = draw_partner(b, k, rng);
            }
        }
    }

    let record = MixRecord { lambda, partners };
    let teacher_joint = join_with_mixed(teacher, &record)?;
    let student_joint = join_with_mixed(student, &record)?;
    Ok(MixedBatch {
        teacher: teacher_joint,
        student: student_joint,
        record,
    })
}

fn blend_collapses(f: &EmbeddingMatrix, k: usize, r: usize, lambda: f64) -> bool {
    let data = f.data();
    let blend = data.column(k) * lambda + data.column(r) * (1.0 - lambda);
    blend.norm() < ZERO_NORM_FLOOR
}

/// Concatenates `f` with its mixed block into one `dim x 2b` matrix.
pub fn join_with_mixed(f: &EmbeddingMatrix, record: &MixRecord) -> Result<EmbeddingMatrix> {
    let mixed = mix_batch(f, record.partners(), record.lambda())?;
    let b = f.len();
    let mut joint = DMatrix::zeros(f.dim(), 2 * b);
    joint.columns_mut(0, b).copy_from(f.data());
    joint.columns_mut(b, b).copy_from(mixed.data());
    EmbeddingMatrix::from_unit_columns(joint, f.role())
}
