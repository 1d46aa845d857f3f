//! Retrieval evaluation: deterministic rankings, mean average precision,
//! mean precision at k, and square-rooted PCA whitening.
//!
//! Rankings sort database entries by descending similarity with ties broken
//! by ascending index, so repeated runs produce identical orders. Queries
//! whose relevance set is empty cannot score a ranking; they are excluded
//! from the mAP mean (and counted), while mP@k averages over every query.
//!
//! Whitening is learned on a sample disjoint from the evaluation set:
//! center, project onto the leading eigenvectors of the covariance, scale
//! each component by eigenvalue^(-1/2), and l2-normalize the result.

use nalgebra::{DMatrix, DVector, linalg::SymmetricEigen};

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::world::Split;

/// Covariance eigenvalues at or below this floor count as zero rank.
pub const EIGENVALUE_FLOOR: f64 = 1e-10;

/// Indices of `scores` in descending score order, ties by ascending index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// Classic average precision of one ranked relevance list: the mean, over
/// relevant ranks, of precision at that rank. `None` when nothing in the
/// list is relevant.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &relevant) in ranked_relevance.iter().enumerate() {
        if relevant {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Fraction of the first `k` ranks that are relevant. Lists shorter than
/// `k` count the missing tail as irrelevant.
pub fn precision_at_k(ranked_relevance: &[bool], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig("precision@k needs k >= 1".to_string()));
    }
    let hits = ranked_relevance.iter().take(k).filter(|&&r| r).count();
    Ok(hits as f64 / k as f64)
}

/// Aggregate and per-query retrieval quality.
#[derive(Debug, Clone)]
pub struct RetrievalMetrics {
    /// Mean AP over queries with at least one relevant item.
    pub map: f64,
    /// Mean precision@k over all queries.
    pub mp_at_k: f64,
    pub k: usize,
    /// `None` marks queries with no relevant item.
    pub per_query_ap: Vec<Option<f64>>,
    pub per_query_p_at_k: Vec<f64>,
    /// Queries excluded from the mAP mean.
    pub excluded_queries: usize,
}

/// Ranks every query against the database and scores the rankings.
///
/// `relevance[q]` lists the database indices relevant to query `q`;
/// duplicate indices collapse. Fails with [`Error::NoQueries`] when there
/// are no queries or none has a relevant item.
pub fn evaluate_retrieval(
    queries: &EmbeddingMatrix,
    database: &EmbeddingMatrix,
    relevance: &[Vec<usize>],
    k: usize,
) -> Result<RetrievalMetrics> {
    if queries.dim() != database.dim() {
        return Err(Error::DimensionMismatch {
            expected: queries.dim(),
            got: database.dim(),
        });
    }
    if queries.len() != relevance.len() {
        return Err(Error::LengthMismatch {
            left: queries.len(),
            right: relevance.len(),
            context: "queries vs relevance lists",
        });
    }
    if queries.is_empty() {
        return Err(Error::NoQueries);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("precision@k needs k >= 1".to_string()));
    }

    let scores = queries.data().tr_mul(database.data());
    let db_len = database.len();
    let mut relevant = vec![false; db_len];
    let mut per_query_ap = Vec::with_capacity(relevance.len());
    let mut per_query_p_at_k = Vec::with_capacity(relevance.len());
    for (q, rels) in relevance.iter().enumerate() {
        for &idx in rels {
            if idx >= db_len {
                return Err(Error::IndexOutOfRange {
                    index: idx,
                    len: db_len,
                });
            }
            relevant[idx] = true;
        }
        let row: Vec<f64> = scores.row(q).iter().copied().collect();
        let order = rank_by_score(&row);
        let flags: Vec<bool> = order.iter().map(|&d| relevant[d]).collect();
        per_query_ap.push(average_precision(&flags));
        per_query_p_at_k.push(precision_at_k(&flags, k)?);
        for &idx in rels {
            relevant[idx] = false;
        }
    }

    let scored: Vec<f64> = per_query_ap.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::NoQueries);
    }
    let excluded_queries = per_query_ap.len() - scored.len();
    let map = scored.iter().sum::<f64>() / scored.len() as f64;
    let mp_at_k = per_query_p_at_k.iter().sum::<f64>() / per_query_p_at_k.len() as f64;
    Ok(RetrievalMetrics {
        map,
        mp_at_k,
        k,
        per_query_ap,
        per_query_p_at_k,
        excluded_queries,
    })
}

/// Metrics restricted to the queries of one difficulty split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSummary {
    pub split: Split,
    /// NaN when no query of this split has a relevant item.
    pub map: f64,
    /// NaN when the split holds no query.
    pub mp_at_k: f64,
    pub queries: usize,
}

/// Regroups per-query metrics by difficulty, in Easy/Medium/Hard order.
pub fn summarize_splits(metrics: &RetrievalMetrics, splits: &[Split]) -> Result<Vec<SplitSummary>> {
    if splits.len() != metrics.per_query_ap.len() {
        return Err(Error::LengthMismatch {
            left: metrics.per_query_ap.len(),
            right: splits.len(),
            context: "per-query metrics vs split tags",
        });
    }
    Ok([Split::Easy, Split::Medium, Split::Hard]
        .into_iter()
        .map(|split| {
            let members: Vec<usize> = (0..splits.len()).filter(|&q| splits[q] == split).collect();
            let aps: Vec<f64> = members
                .iter()
                .filter_map(|&q| metrics.per_query_ap[q])
                .collect();
            let map = if aps.is_empty() {
                f64::NAN
            } else {
                aps.iter().sum::<f64>() / aps.len() as f64
            };
            let mp_at_k = if members.is_empty() {
                f64::NAN
            } else {
                members
                    .iter()
                    .map(|&q| metrics.per_query_p_at_k[q])
                    .sum::<f64>()
                    / members.len() as f64
            };
            SplitSummary {
                split,
                map,
                mp_at_k,
                queries: members.len(),
            }
        })
        .collect())
}

/// Centering plus scaled eigenprojection learned from a disjoint sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenModel {
    mean: DVector<f64>,
    /// `out_dim x in_dim`; row `b` is the `b`-th covariance eigenvector
    /// scaled by its eigenvalue^(-1/2).
    projection: DMatrix<f64>,
}

impl WhitenModel {
    pub fn input_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    /// Rebuilds a model from stored tensors.
    pub fn from_parts(mean: DVector<f64>, projection: DMatrix<f64>) -> Result<Self> {
        if mean.len() != projection.ncols() {
            return Err(Error::DimensionMismatch {
                expected: projection.ncols(),
                got: mean.len(),
            });
        }
        Ok(Self { mean, projection })
    }

    /// Centers and projects columns without the final normalization.
    pub fn project(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if data.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: data.nrows(),
            });
        }
        let mut centered = data.clone();
        for mut column in centered.column_iter_mut() {
            column -= &self.mean;
        }
        Ok(&self.projection * centered)
    }
}

/// Learns square-rooted PCA whitening from `train`.
///
/// Requires strictly more samples than `out_dim` (the covariance of `n`
/// points has rank at most `n - 1`) and at least `out_dim` eigenvalues
/// above [`EIGENVALUE_FLOOR`].
pub fn fit_whitening(train: &EmbeddingMatrix, out_dim: usize) -> Result<WhitenModel> {
    if out_dim == 0 {
        return Err(Error::InvalidConfig(
            "whitening needs at least 1 output dimension".to_string(),
        ));
    }
    let n = train.len();
    if n <= out_dim {
        return Err(Error::RankDeficient {
            available: n.saturating_sub(1),
            requested: out_dim,
        });
    }
    let dim = train.dim();
    if out_dim > dim {
        return Err(Error::RankDeficient {
            available: dim,
            requested: out_dim,
        });
    }

    let mean = train.data().column_mean();
    let mut centered = train.data().clone();
    for mut column in centered.column_iter_mut() {
        column -= &mean;
    }
    let covariance = &centered * centered.transpose() / (n - 1) as f64;
    let eigen = SymmetricEigen::new(covariance);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| eigen.eigenvalues[j].total_cmp(&eigen.eigenvalues[i]));
    let available = order
        .iter()
        .filter(|&&i| eigen.eigenvalues[i] > EIGENVALUE_FLOOR)
        .count();
    if available < out_dim {
        return Err(Error::RankDeficient {
            available,
            requested: out_dim,
        });
    }

    let mut projection = DMatrix::zeros(out_dim, dim);
    for (row, &ei) in order.iter().take(out_dim).enumerate() {
        let scale = 1.0 / eigen.eigenvalues[ei].sqrt();
        projection.set_row(row, &(eigen.eigenvectors.column(ei).transpose() * scale));
    }
    Ok(WhitenModel { mean, projection })
}

/// Whitens and re-normalizes embeddings; the role tag is preserved.
pub fn apply_whitening(
    model: &WhitenModel,
    embeddings: &EmbeddingMatrix,
) -> Result<EmbeddingMatrix> {
    let projected = model.project(embeddings.data())?;
    EmbeddingMatrix::normalize_columns(projected, embeddings.role())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Role;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, Normal};

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn unit_columns(data: DMatrix<f64>) -> EmbeddingMatrix {
        EmbeddingMatrix::normalize_columns(data, Role::Student).unwrap()
    }

    fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        DMatrix::from_fn(rows, cols, |_, _| normal.sample(&mut r))
    }

    #[test]
    fn ranking_is_descending_with_index_ties() {
        assert_eq!(rank_by_score(&[0.5, 0.9, 0.5, -0.1]), vec![1, 0, 2, 3]);
        assert_eq!(rank_by_score(&[]), Vec::<usize>::new());
        assert_eq!(rank_by_score(&[1.0, 1.0, 1.0]), vec![0, 1, 2]);
    }

    #[test]
    fn ap_matches_hand_values() {
        assert_relative_eq!(
            average_precision(&[true, false, true]).unwrap(),
            5.0 / 6.0,
            max_relative = 1e-15
        );
        assert_relative_eq!(
            average_precision(&[false, false, true]).unwrap(),
            1.0 / 3.0,
            max_relative = 1e-15
        );
        assert_eq!(average_precision(&[true; 7]), Some(1.0));
        assert_eq!(average_precision(&[false; 4]), None);
        assert_eq!(average_precision(&[]), None);
    }

    #[test]
    fn p_at_k_counts_and_pads() {
        assert_eq!(precision_at_k(&[true, false], 2).unwrap(), 0.5);
        // Shorter list: the missing tail is irrelevant.
        assert_eq!(precision_at_k(&[true], 4).unwrap(), 0.25);
        assert_eq!(precision_at_k(&[true; 10], 10).unwrap(), 1.0);
        assert!(precision_at_k(&[true], 0).is_err());

        // Random instance against a naive counting oracle.
        let mut r = rng(0);
        for _ in 0..50 {
            let flags: Vec<bool> = (0..30).map(|_| r.random_bool(0.3)).collect();
            let k = r.random_range(1..40);
            let count = flags.iter().take(k).filter(|&&hit| hit).count();
            assert_eq!(precision_at_k(&flags, k).unwrap(), count as f64 / k as f64);
        }
    }

    #[test]
    fn retrieval_metrics_on_a_tiny_instance() {
        let queries = unit_columns(DMatrix::from_columns(&[
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1.0]),
        ]));
        let database = unit_columns(DMatrix::from_columns(&[
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.8, 0.6]),
            DVector::from_vec(vec![0.0, 1.0]),
        ]));
        // q0 ranks [0, 1, 2] with positive {0}: AP 1, P@2 1/2.
        // q1 ranks [2, 1, 0] with positive {1}: AP 1/2, P@2 1/2.
        let metrics = evaluate_retrieval(&queries, &database, &[vec![0], vec![1]], 2).unwrap();
        assert_relative_eq!(metrics.map, 0.75, max_relative = 1e-15);
        assert_relative_eq!(metrics.mp_at_k, 0.5, max_relative = 1e-15);
        assert_eq!(metrics.per_query_ap, vec![Some(1.0), Some(0.5)]);
        assert_eq!(metrics.excluded_queries, 0);
    }

    #[test]
    fn empty_relevance_queries_are_excluded_from_map() {
        let queries = unit_columns(gaussian_matrix(3, 4, 1));
        let database = unit_columns(gaussian_matrix(3, 6, 2));
        let relevance = vec![vec![0, 1], vec![], vec![5], vec![]];
        let metrics = evaluate_retrieval(&queries, &database, &relevance, 3).unwrap();
        assert_eq!(metrics.excluded_queries, 2);
        assert!(metrics.per_query_ap[1].is_none());
        assert!(metrics.per_query_ap[3].is_none());
        // mP@k still averages over all four queries.
        assert_eq!(metrics.per_query_p_at_k.len(), 4);
        let expected_mp = metrics.per_query_p_at_k.iter().sum::<f64>() / 4.0;
        assert_relative_eq!(metrics.mp_at_k, expected_mp, max_relative = 1e-15);

        let none = vec![vec![], vec![], vec![], vec![]];
        assert!(matches!(
            evaluate_retrieval(&queries, &database, &none, 3),
            Err(Error::NoQueries)
        ));
    }

    #[test]
    fn relabeling_the_database_preserves_metrics() {
        let queries = unit_columns(gaussian_matrix(4, 5, 3));
        let database = unit_columns(gaussian_matrix(4, 9, 4));
        let relevance: Vec<Vec<usize>> =
            vec![vec![0, 3], vec![2], vec![4, 5, 8], vec![1], vec![6, 7]];
        let before = evaluate_retrieval(&queries, &database, &relevance, 4).unwrap();

        // Reverse the database order and remap the relevance lists.
        let n = database.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let cols: Vec<_> = perm.iter().map(|&i| database.data().column(i)).collect();
        let shuffled =
            EmbeddingMatrix::from_unit_columns(DMatrix::from_columns(&cols), Role::Student)
                .unwrap();
        let remapped: Vec<Vec<usize>> = relevance
            .iter()
            .map(|rels| rels.iter().map(|&i| n - 1 - i).collect())
            .collect();
        let after = evaluate_retrieval(&queries, &shuffled, &remapped, 4).unwrap();
        assert_relative_eq!(before.map, after.map, max_relative = 1e-12);
        assert_relative_eq!(before.mp_at_k, after.mp_at_k, max_relative = 1e-12);
    }

    #[test]
    fn perfect_ranking_scores_one() {
        // Every query's positives score strictly above everything else.
        let eye = DMatrix::<f64>::identity(4, 4);
        let queries = unit_columns(eye.columns(0, 2).clone_owned());
        let database = unit_columns(eye);
        let metrics = evaluate_retrieval(&queries, &database, &[vec![0], vec![1]], 1).unwrap();
        assert_eq!(metrics.map, 1.0);
        assert_eq!(metrics.mp_at_k, 1.0);
    }

    #[test]
    fn evaluate_validates_inputs() {
        let queries = unit_columns(gaussian_matrix(3, 2, 5));
        let database = unit_columns(gaussian_matrix(4, 2, 6));
        assert!(matches!(
            evaluate_retrieval(&queries, &database, &[vec![0], vec![1]], 2),
            Err(Error::DimensionMismatch { .. })
        ));
        let database = unit_columns(gaussian_matrix(3, 2, 6));
        assert!(matches!(
            evaluate_retrieval(&queries, &database, &[vec![0]], 2),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            evaluate_retrieval(&queries, &database, &[vec![0], vec![7]], 2),
            Err(Error::IndexOutOfRange { index: 7, len: 2 })
        ));
        assert!(matches!(
            evaluate_retrieval(&queries, &database, &[vec![0], vec![1]], 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn summarize_splits_groups_queries() {
        let metrics = RetrievalMetrics {
            map: 0.0,
            mp_at_k: 0.0,
            k: 2,
            per_query_ap: vec![Some(1.0), Some(0.5), None, Some(0.25)],
            per_query_p_at_k: vec![1.0, 0.5, 0.0, 0.5],
            excluded_queries: 1,
        };
        let splits = [Split::Easy, Split::Medium, Split::Medium, Split::Easy];
        let rows = summarize_splits(&metrics, &splits).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].split, Split::Easy);
        assert_relative_eq!(rows[0].map, 0.625, max_relative = 1e-15);
        assert_relative_eq!(rows[0].mp_at_k, 0.75, max_relative = 1e-15);
        assert_eq!(rows[0].queries, 2);
        // The query with no relevant item drops out of the split's mAP but
        // still counts toward its mP@k.
        assert_relative_eq!(rows[1].map, 0.5, max_relative = 1e-15);
        assert_relative_eq!(rows[1].mp_at_k, 0.25, max_relative = 1e-15);
        assert_eq!(rows[1].queries, 2);
        // Hard is empty.
        assert!(rows[2].map.is_nan());
        assert!(rows[2].mp_at_k.is_nan());
        assert_eq!(rows[2].queries, 0);

        assert!(summarize_splits(&metrics, &splits[..2]).is_err());
    }

    #[test]
    fn whitened_covariance_is_identity() {
        let train = unit_columns(gaussian_matrix(2, 10_000, 7));
        let model = fit_whitening(&train, 2).unwrap();

        // In-sample, the projected covariance is the identity by
        // construction (up to floating point).
        let projected = model.project(train.data()).unwrap();
        let n = projected.ncols();
        let mean = projected.column_mean();
        let mut centered = projected.clone();
        for mut c in centered.column_iter_mut() {
            c -= &mean;
        }
        let cov = &centered * centered.transpose() / (n - 1) as f64;
        let in_sample = (cov - DMatrix::identity(2, 2)).norm();
        assert!(in_sample < 1e-10, "in-sample deviation {in_sample}");

        // Held-out data from the same distribution stays close.
        let fresh = unit_columns(gaussian_matrix(2, 10_000, 8));
        let projected = model.project(fresh.data()).unwrap();
        let mean = projected.column_mean();
        let mut centered = projected.clone();
        for mut c in centered.column_iter_mut() {
            c -= &mean;
        }
        let cov = &centered * centered.transpose() / (projected.ncols() - 1) as f64;
        let held_out = (cov - DMatrix::identity(2, 2)).norm();
        assert!(held_out < 0.1, "held-out deviation {held_out}");
    }

    #[test]
    fn centering_detects_symmetric_axis() {
        // Columns come in (+x, y) / (-x, y) pairs: the first axis is
        // already centered and the learned mean must be ~0 there.
        let mut r = rng(9);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut columns = Vec::new();
        for _ in 0..200 {
            let x: f64 = normal.sample(&mut r);
            let y: f64 = normal.sample(&mut r).abs() + 0.5;
            let norm = (x * x + y * y).sqrt();
            columns.push(DVector::from_vec(vec![x / norm, y / norm]));
            columns.push(DVector::from_vec(vec![-x / norm, y / norm]));
        }
        let train =
            EmbeddingMatrix::from_unit_columns(DMatrix::from_columns(&columns), Role::Student)
                .unwrap();
        let model = fit_whitening(&train, 2).unwrap();
        assert!(model.mean()[0].abs() < 1e-12);
        assert!(model.mean()[1].abs() > 0.1);
    }

    #[test]
    fn rank_deficiency_is_rejected() {
        // All mass on one line of a 3D space: a single usable eigenvalue.
        let mut columns = Vec::new();
        for i in 0..20 {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            columns.push(DVector::from_vec(vec![sign, 0.0, 0.0]));
        }
        let train =
            EmbeddingMatrix::from_unit_columns(DMatrix::from_columns(&columns), Role::Student)
                .unwrap();
        assert!(fit_whitening(&train, 1).is_ok());
        assert!(matches!(
            fit_whitening(&train, 2),
            Err(Error::RankDeficient {
                available: 1,
                requested: 2
            })
        ));

        // Too few samples for the requested dimensionality.
        let tiny = unit_columns(gaussian_matrix(3, 3, 10));
        assert!(matches!(
            fit_whitening(&tiny, 3),
            Err(Error::RankDeficient {
                available: 2,
                requested: 3
            })
        ));
        // More components than input dimensions.
        let flat = unit_columns(gaussian_matrix(2, 50, 11));
        assert!(matches!(
            fit_whitening(&flat, 3),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn projection_rows_are_orthogonal() {
        // Rows are eigenvectors up to per-row scaling, so they stay
        // mutually orthogonal even after the eigenvalue scaling.
        let train = unit_columns(gaussian_matrix(5, 400, 12));
        let model = fit_whitening(&train, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    let dot = model.projection().row(i).dot(&model.projection().row(j));
                    assert!(dot.abs() < 1e-9, "rows {i},{j} dot {dot}");
                }
            }
        }
    }

    #[test]
    fn second_whitening_reduces_to_centering() {
        // Once whitened (and re-normalized), the data's covariance is close
        // to isotropic, so a second learned whitening acts like centering,
        // re-normalization, and a rotation. Rotations preserve inner
        // products, so pairwise similarities after the second application
        // match those of the centered-and-normalized once-whitened data.
        let data = unit_columns(gaussian_matrix(4, 4000, 13));
        let first = fit_whitening(&data, 4).unwrap();
        let once = apply_whitening(&first, &data).unwrap();

        let second = fit_whitening(&once, 4).unwrap();
        let twice = apply_whitening(&second, &once).unwrap();

        let mut centered = once.data().clone();
        for mut c in centered.column_iter_mut() {
            c -= second.mean();
        }
        let reference = EmbeddingMatrix::normalize_columns(centered, Role::Student).unwrap();

        let probe = 64;
        let sim_twice = twice.gather(&(0..probe).collect::<Vec<_>>()).unwrap();
        let sim_ref = reference.gather(&(0..probe).collect::<Vec<_>>()).unwrap();
        let diff = (sim_twice.similarity().data() - sim_ref.similarity().data())
            .abs()
            .max();
        assert!(diff < 0.05, "similarity drift {diff}");
    }

    #[test]
    fn whitening_preserves_nearest_neighbors_under_isotropy() {
        // Isotropic inputs: whitening is close to a rigid transform, so
        // well-separated nearest neighbors survive it.
        let train = unit_columns(gaussian_matrix(3, 10_000, 14));
        let model = fit_whitening(&train, 3).unwrap();

        let queries = unit_columns(gaussian_matrix(3, 8, 15));
        let database = unit_columns(gaussian_matrix(3, 16, 16));
        let white_q = apply_whitening(&model, &queries).unwrap();
        let white_d = apply_whitening(&model, &database).unwrap();

        let raw_scores = queries.data().tr_mul(database.data());
        let white_scores = white_q.data().tr_mul(white_d.data());
        for q in 0..queries.len() {
            let raw_row: Vec<f64> = raw_scores.row(q).iter().copied().collect();
            let white_row: Vec<f64> = white_scores.row(q).iter().copied().collect();
            assert_eq!(rank_by_score(&raw_row)[0], rank_by_score(&white_row)[0]);
        }
    }

    #[test]
    fn whitening_round_trips_through_parts() {
        let train = unit_columns(gaussian_matrix(3, 100, 17));
        let model = fit_whitening(&train, 2).unwrap();
        let rebuilt =
            WhitenModel::from_parts(model.mean().clone(), model.projection().clone()).unwrap();
        assert_eq!(model, rebuilt);
        assert!(WhitenModel::from_parts(DVector::zeros(4), model.projection().clone()).is_err());
    }
}
