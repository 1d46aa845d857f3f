//! Pseudo-label construction from teacher similarities.
//!
//! With no annotated relevance available, the teacher's own cosine
//! similarities decide which pairs a batch should treat as matching:
//!
//! * similarity labelling: `z` is a positive for query `q` when the teacher
//!   similarity exceeds a threshold `tau` (strictly), `z != q`;
//! * mixup labelling: a virtual sample additionally inherits every positive
//!   of its two sources, and the relation is closed under symmetry.
//!
//! The resulting per-query positive sets convert into a binary, symmetric,
//! zero-diagonal label matrix consumed by the ranking loss.

use std::collections::BTreeSet;

use nalgebra::DMatrix;

use crate::embed::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::mixup::MixRecord;

/// Per-query positive index sets over a batch of `len` samples.
///
/// Set `q` never contains `q` itself. Sets are ordered so iteration order is
/// deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveSets {
    sets: Vec<BTreeSet<usize>>,
}

impl PositiveSets {
    /// Wraps externally built sets, rejecting self-pairs and out-of-range
    /// indices. Symmetry is not required here; it is enforced when the sets
    /// are turned into a label matrix.
    pub fn from_sets(sets: Vec<BTreeSet<usize>>) -> Result<Self> {
        let len = sets.len();
        for (q, set) in sets.iter().enumerate() {
            if set.contains(&q) {
                return Err(Error::SelfPair(q));
            }
            if let Some(&z) = set.iter().next_back()
                && z >= len
            {
                return Err(Error::IndexOutOfRange { index: z, len });
            }
        }
        Ok(Self { sets })
    }

    /// Number of samples (and sets).
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Positive set of query `q`.
    pub fn set(&self, q: usize) -> Result<&BTreeSet<usize>> {
        self.sets.get(q).ok_or(Error::IndexOutOfRange {
            index: q,
            len: self.sets.len(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &BTreeSet<usize>> {
        self.sets.iter()
    }

    /// Sum of all set cardinalities (twice the number of positive pairs once
    /// the sets are symmetric).
    pub fn total_positives(&self) -> usize {
        self.sets.iter().map(BTreeSet::len).sum()
    }

    /// True when `z in P_q` implies `q in P_z` everywhere.
    pub fn is_symmetric(&self) -> bool {
        self.sets
            .iter()
            .enumerate()
            .all(|(q, set)| set.iter().all(|&z| self.sets[z].contains(&q)))
    }

    /// True when every set of `self` contains the matching set of `other`.
    pub fn contains_all_of(&self, other: &Self) -> bool {
        self.sets.len() == other.sets.len()
            && self
                .sets
                .iter()
                .zip(&other.sets)
                .all(|(mine, theirs)| theirs.is_subset(mine))
    }

    fn close_symmetrically(&mut self) {
        let mut additions: Vec<(usize, usize)> = Vec::new();
        for (q, set) in self.sets.iter().enumerate() {
            for &z in set {
                if !self.sets[z].contains(&q) {
                    additions.push((z, q));
                }
            }
        }
        for (z, q) in additions {
            self.sets[z].insert(q);
        }
    }
}

/// Thresholds the teacher similarity matrix into per-query positive sets.
///
/// `z` lands in `P_q` iff `S[q, z] > tau` strictly and `z != q`. The matrix
/// is read on its upper triangle and mirrored, so the output is symmetric by
/// construction even if the stored similarities differ in their last bits
/// across the diagonal.
pub fn similarity_labelling(similarity: &SimilarityMatrix, tau: f64) -> Result<PositiveSets> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(Error::InvalidTau(tau));
    }
    let n = similarity.len();
    let s = similarity.data();
    let mut sets = vec![BTreeSet::new(); n];
    for q in 0..n {
        for z in (q + 1)..n {
            if s[(q, z)] > tau {
                sets[q].insert(z);
                sets[z].insert(q);
            }
        }
    }
    Ok(PositiveSets { sets })
}

/// Extends similarity labels so every virtual sample inherits the positives
/// of both sources, then closes the relation under symmetry.
///
/// `base` must cover the joint `[originals | mixed]` layout of `record`
/// (length `2 * batch`). For each original `k` with partner `r`, the set of
/// the mixed sample `m = batch + k` is unioned with `P_k` and `P_r`; the
/// mixed sample itself is never added to its own set. The closure then adds
/// `m` to the set of every sample `m` now lists.
pub fn mixup_labelling(base: &PositiveSets, record: &MixRecord) -> Result<PositiveSets> {
    let batch = record.batch_size();
    if base.len() != 2 * batch {
        return Err(Error::LengthMismatch {
            left: base.len(),
            right: 2 * batch,
            context: "positive sets vs joint mixed batch",
        });
    }
    let mut out = base.clone();
    for (k, &r) in record.partners().iter().enumerate() {
        let m = record.mixed_index(k);
        let inherited: Vec<usize> = out.sets[k]
            .iter()
            .chain(out.sets[r].iter())
            .copied()
            .filter(|&z| z != m)
            .collect();
        out.sets[m].extend(inherited);
    }
    out.close_symmetrically();
    Ok(out)
}

/// Binary, symmetric, zero-diagonal relevance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    y: DMatrix<f64>,
}

impl LabelMatrix {
    /// Number of samples (the matrix is square).
    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    /// Entries are exactly 0.0 or 1.0.
    pub fn data(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// Number of positives for query `q` (its row sum).
    pub fn positive_count(&self, q: usize) -> usize {
        self.y.row(q).iter().filter(|&&v| v == 1.0).count()
    }
}

/// Materializes symmetric positive sets as a label matrix.
///
/// Rejects asymmetric input with [`Error::AsymmetricInput`] naming the first
/// violating pair. The result satisfies `Y = Y^T` bit-exactly and has a zero
/// diagonal.
pub fn build_label_matrix(sets: &PositiveSets) -> Result<LabelMatrix> {
    let n = sets.len();
    for (q, set) in sets.sets.iter().enumerate() {
        for &z in set {
            if !sets.sets[z].contains(&q) {
                return Err(Error::AsymmetricInput { query: q, other: z });
            }
        }
    }
    let mut y = DMatrix::zeros(n, n);
    for (q, set) in sets.sets.iter().enumerate() {
        for &z in set {
            y[(q, z)] = 1.0;
        }
    }
    Ok(LabelMatrix { y })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{EmbeddingMatrix, Role};
    use crate::mixup::{augment_pair, sample_partners};
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand::distr::{Distribution, Uniform};
    use rand_chacha::ChaCha12Rng;

    fn embeddings_at_angles(angles: &[f64]) -> EmbeddingMatrix {
        let data = DMatrix::from_fn(2, angles.len(), |row, col| {
            if row == 0 {
                angles[col].cos()
            } else {
                angles[col].sin()
            }
        });
        EmbeddingMatrix::normalize_columns(data, Role::Teacher).unwrap()
    }

    fn random_unit(dim: usize, count: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dist = Uniform::new(-1.0, 1.0).unwrap();
        EmbeddingMatrix::normalize_columns(
            DMatrix::from_fn(dim, count, |_, _| dist.sample(&mut rng)),
            Role::Teacher,
        )
        .unwrap()
    }

    #[test]
    fn labelling_thresholds_strictly() {
        // Columns [1, 0] and [0.5, sqrt(3)/2]: their dot product is exactly
        // 0.5, which must not pass a threshold of 0.5.
        let a = DVector::from_vec(vec![1.0, 0.0]);
        let b = DVector::from_vec(vec![0.5, (3.0_f64).sqrt() / 2.0]);
        let f = EmbeddingMatrix::from_unit_columns(DMatrix::from_columns(&[a, b]), Role::Teacher)
            .unwrap();
        let s = f.similarity();
        assert_eq!(s.data()[(0, 1)], 0.5);

        let at_half = similarity_labelling(&s, 0.5).unwrap();
        assert!(at_half.set(0).unwrap().is_empty());
        assert!(at_half.set(1).unwrap().is_empty());

        let below = similarity_labelling(&s, 0.49).unwrap();
        assert_eq!(
            below.set(0).unwrap().iter().copied().collect::<Vec<_>>(),
            vec![1]
        );
        assert_eq!(
            below.set(1).unwrap().iter().copied().collect::<Vec<_>>(),
            vec![0]
        );
    }

    #[test]
    fn labelling_excludes_self_despite_unit_diagonal() {
        let f = random_unit(6, 10, 0);
        let sets = similarity_labelling(&f.similarity(), 0.0).unwrap();
        for (q, set) in sets.iter().enumerate() {
            assert!(!set.contains(&q));
        }
    }

    #[test]
    fn labelling_rejects_bad_tau() {
        let f = random_unit(3, 4, 1);
        let s = f.similarity();
        assert!(matches!(
            similarity_labelling(&s, 1.5),
            Err(Error::InvalidTau(_))
        ));
        assert!(matches!(
            similarity_labelling(&s, f64::NAN),
            Err(Error::InvalidTau(_))
        ));
        assert!(similarity_labelling(&s, -1.0).is_ok());
    }

    #[test]
    fn hand_worked_mixup_union() {
        // Four samples at angles 0, 10, 80, 90 degrees; tau = cos(15 deg)
        // links only the 0-10 and 80-90 pairs.
        let deg = std::f64::consts::PI / 180.0;
        let f = embeddings_at_angles(&[0.0, 10.0 * deg, 80.0 * deg, 90.0 * deg]);
        let tau = (15.0 * deg).cos();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let student = random_unit(3, 4, 4);
        let batch = augment_pair(&f, &student, 0.6, &mut rng).unwrap();
        let base = similarity_labelling(&batch.teacher.similarity(), tau).unwrap();

        // Original-to-original links survive mixing.
        assert!(base.set(0).unwrap().contains(&1));
        assert!(base.set(3).unwrap().contains(&2));

        let full = mixup_labelling(&base, &batch.record).unwrap();
        assert!(full.is_symmetric());
        assert!(full.contains_all_of(&base));
        for (k, &r) in batch.record.partners().iter().enumerate() {
            let m = batch.record.mixed_index(k);
            let merged: BTreeSet<usize> = base
                .set(k)
                .unwrap()
                .iter()
                .chain(base.set(r).unwrap().iter())
                .copied()
                .filter(|&z| z != m)
                .collect();
            assert!(
                merged.is_subset(full.set(m).unwrap()),
                "mixed sample {m} lost an inherited positive"
            );
            assert!(!full.set(m).unwrap().contains(&m));
        }
    }

    #[test]
    fn mixup_labelling_checks_layout() {
        let f = random_unit(4, 6, 5);
        let student = random_unit(3, 6, 6);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let batch = augment_pair(&f, &student, 0.5, &mut rng).unwrap();
        // Sets over the un-mixed batch are half the required length.
        let wrong = similarity_labelling(&f.similarity(), 0.5).unwrap();
        assert!(matches!(
            mixup_labelling(&wrong, &batch.record),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn label_matrix_is_binary_symmetric_zero_diagonal() {
        let f = random_unit(5, 12, 8);
        let sets = similarity_labelling(&f.similarity(), 0.2).unwrap();
        let y = build_label_matrix(&sets).unwrap();
        let data = y.data();
        assert_eq!(data.nrows(), 12);
        for q in 0..12 {
            assert_eq!(data[(q, q)], 0.0);
            for z in 0..12 {
                assert!(data[(q, z)] == 0.0 || data[(q, z)] == 1.0);
                assert!(data[(q, z)] == data[(z, q)]);
            }
        }
        let ones = data.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, sets.total_positives());
    }

    #[test]
    fn label_matrix_rejects_asymmetry_and_self_pairs() {
        let mut sets = vec![BTreeSet::new(); 3];
        sets[0].insert(1);
        let asymmetric = PositiveSets::from_sets(sets).unwrap();
        assert!(matches!(
            build_label_matrix(&asymmetric),
            Err(Error::AsymmetricInput { query: 0, other: 1 })
        ));

        let mut selfish = vec![BTreeSet::new(); 2];
        selfish[1].insert(1);
        assert!(matches!(
            PositiveSets::from_sets(selfish),
            Err(Error::SelfPair(1))
        ));
    }

    proptest::proptest! {
        /// Raising the threshold can only shrink positive sets, and the
        /// output stays symmetric with no self-pairs.
        #[test]
        fn threshold_dominance(seed in 0u64..300, lo in -0.5f64..0.4, gap in 0.01f64..0.5) {
            let f = random_unit(4, 9, seed);
            let s = f.similarity();
            let loose = similarity_labelling(&s, lo).unwrap();
            let tight = similarity_labelling(&s, lo + gap).unwrap();
            proptest::prop_assert!(loose.contains_all_of(&tight));
            proptest::prop_assert!(loose.is_symmetric());
            proptest::prop_assert!(loose.total_positives() >= tight.total_positives());
        }

        /// Mixup labelling only ever adds positives, keeps symmetry, and
        /// never creates self-pairs.
        #[test]
        fn mixup_only_adds(seed in 0u64..300) {
            let teacher = random_unit(4, 7, seed);
            let student = random_unit(3, 7, seed.wrapping_add(1000));
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let lambda = 0.3;
            let batch = augment_pair(&teacher, &student, lambda, &mut rng).unwrap();
            let base = similarity_labelling(&batch.teacher.similarity(), 0.6).unwrap();
            let full = mixup_labelling(&base, &batch.record).unwrap();
            proptest::prop_assert!(full.contains_all_of(&base));
            proptest::prop_assert!(full.is_symmetric());
            for (q, set) in full.iter().enumerate() {
                proptest::prop_assert!(!set.contains(&q));
            }
            proptest::prop_assert!(build_label_matrix(&full).is_ok());
        }

        /// The partner assignment math in `mixed_index` lines up with
        /// `sample_partners` output lengths.
        #[test]
        fn partner_layout(batch in 2usize..12, seed in 0u64..100) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let partners = sample_partners(batch, &mut rng).unwrap();
            proptest::prop_assert_eq!(partners.len(), batch);
        }
    }
}
