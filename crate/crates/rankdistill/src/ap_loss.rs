//! Histogram-quantized average precision: forward loss and analytic
//! gradients.
//!
//! Sorting makes classic AP non-differentiable, so the similarity axis
//! `[-1, 1]` is covered by `C` bin centers `c_b = 1 - (b)(2/(C-1))`
//! (descending from 1 to -1) and every similarity votes into its one or two
//! nearest centers with a triangular kernel. Per-bin soft counts give a
//! precision and a recall increment per bin, and their dot product is a
//! smooth surrogate of AP. The loss over a batch is the mean of `1 - AP(q)`
//! across queries that have at least one positive.
//!
//! The backward pass is closed-form. For cumulative positive mass `cpos_b`,
//! cumulative total mass `ctot_b`, precision `Pr_b = cpos_b / ctot_b` and
//! recall increment `R_b = pos_b / N_q`:
//!
//! ```text
//! dAP/dpos_b = Pr_b / N_q + sum_{b' >= b} R_b' / ctot_b'
//! dAP/dtot_b = -sum_{b' >= b} R_b' Pr_b' / ctot_b'
//! ```
//!
//! and the kernel derivative is `+-1/delta` inside its support, zero at the
//! kinks. Gradients reach embeddings through `S = F^T F` as `F (G + G^T)`,
//! where treating mixed (virtual) columns as constants or as functions of
//! their sources is selected by [`GradMode`].

use nalgebra::DMatrix;

use crate::embed::{EmbeddingMatrix, SimilarityMatrix, l2_normalize_backward};
use crate::error::{Error, Result};
use crate::mixup::MixRecord;

/// Entries may exceed `[-1, 1]` by at most this much before a warning is
/// logged; they are clamped either way.
const CLAMP_TOLERANCE: f64 = 1e-9;

/// Histogram layout for the quantized loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApLossConfig {
    bins: usize,
}

impl ApLossConfig {
    /// At least two bins are required so the centers span `[1, -1]`.
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidBins(bins));
        }
        Ok(Self { bins })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Spacing between adjacent centers.
    pub fn delta(&self) -> f64 {
        2.0 / (self.bins as f64 - 1.0)
    }

    /// Center of bin `b`, descending from `c_0 = 1` to `c_{C-1} = -1`.
    pub fn center(&self, b: usize) -> f64 {
        1.0 - b as f64 * self.delta()
    }
}

/// Triangular kernel weight of similarity `s` in bin `b`:
/// `max(1 - |s - c_b| / delta, 0)`.
///
/// For any `s` in `[-1, 1]` the weights over all bins sum to one.
pub fn soft_bin_weight(s: f64, b: usize, config: &ApLossConfig) -> f64 {
    (1.0 - (s - config.center(b)).abs() / config.delta()).max(0.0)
}

/// The two bins that can receive weight from `s`, clamped to the bin range.
fn active_bins(s: f64, config: &ApLossConfig) -> [usize; 2] {
    // `s` is clamped to [-1, 1] before this runs, so the position is never
    // negative and the saturating cast is exactly floor.
    let position = (1.0 - s) / config.delta();
    let lo = (position as usize).min(config.bins - 1);
    let hi = (lo + 1).min(config.bins - 1);
    [lo, hi]
}

/// Per-query soft histogram retained for the backward pass.
#[derive(Debug, Clone)]
struct QueryCache {
    pos: Vec<f64>,
    tot: Vec<f64>,
    positive_count: f64,
}

/// Output of [`ap_loss_forward`]: the scalar loss plus everything the
/// backward pass needs.
#[derive(Debug, Clone)]
pub struct ApLossForward {
    loss: f64,
    per_query_ap: Vec<Option<f64>>,
    caches: Vec<Option<QueryCache>>,
    bins: usize,
}

impl ApLossForward {
    /// Mean of `1 - AP(q)` over queries with at least one positive.
    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// Quantized AP per query; `None` where the positive set was empty.
    pub fn per_query_ap(&self) -> &[Option<f64>] {
        &self.per_query_ap
    }

    /// Number of queries that contributed to the loss.
    pub fn active_queries(&self) -> usize {
        self.per_query_ap.iter().flatten().count()
    }

    /// Batch size the forward pass saw.
    pub fn len(&self) -> usize {
        self.per_query_ap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_query_ap.is_empty()
    }
}

struct RowResult {
    ap: f64,
    cache: QueryCache,
    clamped: usize,
}

/// Quantized AP of one query row, or `None` when the row has no positives.
///
/// `similarities[query]` and `labels[query]` are ignored: a query is never
/// ranked against itself. Labels must be exactly 0 or 1.
pub fn quantized_ap(
    similarities: &[f64],
    labels: &[f64],
    query: usize,
    config: &ApLossConfig,
) -> Result<Option<f64>> {
    let row = quantized_ap_row(similarities, labels, query, config)?;
    Ok(row.map(|r| r.ap))
}

fn quantized_ap_row(
    similarities: &[f64],
    labels: &[f64],
    query: usize,
    config: &ApLossConfig,
) -> Result<Option<RowResult>> {
    let n = similarities.len();
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: labels.len(),
            context: "similarity row vs label row",
        });
    }
    if query >= n {
        return Err(Error::IndexOutOfRange {
            index: query,
            len: n,
        });
    }

    let mut positive_count = 0.0;
    for (z, &y) in labels.iter().enumerate() {
        if y != 0.0 && y != 1.0 {
            return Err(Error::NonBinaryLabel { index: z, value: y });
        }
        if z != query {
            positive_count += y;
        }
    }
    if positive_count == 0.0 {
        return Ok(None);
    }

    let bins = config.bins();
    let mut cache = QueryCache {
        pos: vec![0.0; bins],
        tot: vec![0.0; bins],
        positive_count,
    };
    let mut clamped = 0;
    for (z, (&raw, &y)) in similarities.iter().zip(labels).enumerate() {
        if z == query {
            continue;
        }
        if !raw.is_finite() {
            return Err(Error::NonFinite {
                context: "similarity entry",
            });
        }
        if raw.abs() > 1.0 + CLAMP_TOLERANCE {
            clamped += 1;
        }
        let s = raw.clamp(-1.0, 1.0);
        for b in dedup_bins(active_bins(s, config)) {
            let w = soft_bin_weight(s, b, config);
            if w > 0.0 {
                cache.pos[b] += w * y;
                cache.tot[b] += w;
            }
        }
    }

    let mut ap = 0.0;
    let mut cpos = 0.0;
    let mut ctot = 0.0;
    for b in 0..bins {
        cpos += cache.pos[b];
        ctot += cache.tot[b];
        if cache.pos[b] > 0.0 {
            ap += (cpos / ctot) * (cache.pos[b] / positive_count);
        }
    }
    Ok(Some(RowResult { ap, cache, clamped }))
}

fn dedup_bins([lo, hi]: [usize; 2]) -> impl Iterator<Item = usize> {
    let take = if lo == hi { 1 } else { 2 };
    [lo, hi].into_iter().take(take)
}

/// Evaluates the quantized-AP loss over every query row of `similarity`.
///
/// Queries whose label row is empty are skipped; if every query is skipped
/// the loss is undefined and [`Error::AllQueriesEmpty`] is returned.
pub fn ap_loss_forward(
    similarity: &SimilarityMatrix,
    labels: &crate::labeling::LabelMatrix,
    config: &ApLossConfig,
) -> Result<ApLossForward> {
    let n = similarity.len();
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: labels.len(),
            context: "similarity matrix vs label matrix",
        });
    }
    let mut per_query_ap = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    let mut sum = 0.0;
    let mut active = 0usize;
    let mut clamped = 0usize;
    let mut s_row = vec![0.0; n];
    let mut y_row = vec![0.0; n];
    for q in 0..n {
        for z in 0..n {
            s_row[z] = similarity.data()[(q, z)];
            y_row[z] = labels.data()[(q, z)];
        }
        match quantized_ap_row(&s_row, &y_row, q, config)? {
            Some(row) => {
                sum += 1.0 - row.ap;
                active += 1;
                clamped += row.clamped;
                per_query_ap.push(Some(row.ap));
                caches.push(Some(row.cache));
            }
            None => {
                per_query_ap.push(None);
                caches.push(None);
            }
        }
    }
    if active == 0 {
        return Err(Error::AllQueriesEmpty);
    }
    if clamped > 0 {
        log::warn!("{clamped} similarity entries exceeded [-1, 1] and were clamped");
    }
    Ok(ApLossForward {
        loss: sum / active as f64,
        per_query_ap,
        caches,
        bins: config.bins(),
    })
}

/// How gradients treat mixed (virtual) columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Mixed columns are constants: their gradient block is exactly zero and
    /// nothing flows back through the blend. This is the reference
    /// behaviour.
    StopGrad,
    /// Gradients at mixed columns are pushed through the re-normalized blend
    /// onto both source embeddings (ablation).
    AllGrad,
}

/// Inputs the backward pass needs beyond the forward cache.
///
/// `student` is the joint normalized matrix the similarities were computed
/// from (`dim x n`). `prenorm` holds the pre-normalization head outputs of
/// the original columns only (`dim x b`); with no mixing `b == n`.
#[derive(Debug, Clone, Copy)]
pub struct BackwardInputs<'a> {
    pub similarity: &'a SimilarityMatrix,
    pub labels: &'a crate::labeling::LabelMatrix,
    pub student: &'a EmbeddingMatrix,
    pub prenorm: &'a DMatrix<f64>,
    pub mix: Option<&'a MixRecord>,
    pub mode: GradMode,
}

/// Gradients of the quantized-AP loss.
#[derive(Debug, Clone)]
pub struct ApGradients {
    /// `dL/dS`, one row per query; rows of skipped queries are zero, the
    /// diagonal is zero.
    pub similarity: DMatrix<f64>,
    /// Per-column embedding gradients, `dim x n`. Columns `0..b` are
    /// gradients with respect to the pre-normalization original outputs.
    /// Columns `b..n` (mixed samples) hold the gradient arriving at the
    /// normalized mixed column: exactly zero under [`GradMode::StopGrad`],
    /// populated under [`GradMode::AllGrad`] (whose redistributed share is
    /// already folded into the original columns).
    pub embeddings: DMatrix<f64>,
}

/// Analytic backward pass matching [`ap_loss_forward`].
pub fn ap_loss_backward(forward: &ApLossForward, inputs: &BackwardInputs) -> Result<ApGradients> {
    let n = forward.len();
    let config = ApLossConfig::new(forward.bins)?;
    if inputs.similarity.len() != n || inputs.labels.len() != n {
        return Err(Error::MissingCache {
            context: "forward cache size differs from similarity/label size",
        });
    }
    if inputs.student.len() != n {
        return Err(Error::MissingCache {
            context: "forward cache size differs from student batch size",
        });
    }
    let originals = match inputs.mix {
        Some(record) => {
            if record.batch_size() * 2 != n {
                return Err(Error::LengthMismatch {
                    left: record.batch_size() * 2,
                    right: n,
                    context: "mix record vs joint batch",
                });
            }
            record.batch_size()
        }
        None => n,
    };
    if inputs.prenorm.ncols() != originals {
        return Err(Error::LengthMismatch {
            left: inputs.prenorm.ncols(),
            right: originals,
            context: "pre-normalization columns vs original batch",
        });
    }
    if inputs.prenorm.nrows() != inputs.student.dim() {
        return Err(Error::DimensionMismatch {
            expected: inputs.student.dim(),
            got: inputs.prenorm.nrows(),
        });
    }

    let active = forward.active_queries();
    if active == 0 {
        return Err(Error::AllQueriesEmpty);
    }
    let loss_scale = -1.0 / active as f64;

    // dL/dS row by row from the cached histograms.
    let bins = config.bins();
    let delta = config.delta();
    let mut grad_s = DMatrix::zeros(n, n);
    let mut d_pos = vec![0.0; bins];
    let mut d_tot = vec![0.0; bins];
    for q in 0..n {
        let Some(cache) = &forward.caches[q] else {
            continue;
        };
        // Prefix masses, then suffix sums of the precision terms.
        let mut pr = vec![0.0; bins];
        let mut ctot = vec![0.0; bins];
        let mut cpos = 0.0;
        let mut running_tot = 0.0;
        for b in 0..bins {
            cpos += cache.pos[b];
            running_tot += cache.tot[b];
            ctot[b] = running_tot;
            if running_tot > 0.0 {
                pr[b] = cpos / running_tot;
            }
        }
        let nq = cache.positive_count;
        let mut suffix_plain = 0.0;
        let mut suffix_weighted = 0.0;
        for b in (0..bins).rev() {
            if ctot[b] > 0.0 {
                let recall = cache.pos[b] / nq;
                suffix_plain += recall / ctot[b];
                suffix_weighted += recall * pr[b] / ctot[b];
            }
            d_pos[b] = pr[b] / nq + suffix_plain;
            d_tot[b] = -suffix_weighted;
        }
        for z in 0..n {
            if z == q {
                continue;
            }
            let s = inputs.similarity.data()[(q, z)].clamp(-1.0, 1.0);
            let y = inputs.labels.data()[(q, z)];
            let mut d_ap_ds = 0.0;
            for b in dedup_bins(active_bins(s, &config)) {
                let center = config.center(b);
                if soft_bin_weight(s, b, &config) > 0.0 && s != center {
                    let dw_ds = if s > center { -1.0 } else { 1.0 } / delta;
                    d_ap_ds += (d_pos[b] * y + d_tot[b]) * dw_ds;
                }
            }
            grad_s[(q, z)] = loss_scale * d_ap_ds;
        }
    }

    // dL/dF = F (G + G^T) for S = F^T F.
    let f = inputs.student.data();
    let g_sym = &grad_s + grad_s.transpose();
    let grad_f = f * g_sym;

    let dim = inputs.student.dim();
    let mut embeddings = DMatrix::zeros(dim, n);
    let mut grad_originals = grad_f.columns(0, originals).clone_owned();

    if let Some(record) = inputs.mix {
        match inputs.mode {
            GradMode::StopGrad => {
                // Mixed columns are constants; their block stays zero.
            }
            GradMode::AllGrad => {
                let lambda = record.lambda();
                for (k, &r) in record.partners().iter().enumerate() {
                    let m = record.mixed_index(k);
                    let arriving = grad_f.column(m).clone_owned();
                    // Re-create the un-normalized blend the mixed column
                    // came from and pull the gradient through the
                    // normalization.
                    let blend = f.column(k) * lambda + f.column(r) * (1.0 - lambda);
                    let through = l2_normalize_backward(&blend, &arriving)?;
                    grad_originals.column_mut(k).axpy(lambda, &through, 1.0);
                    grad_originals
                        .column_mut(r)
                        .axpy(1.0 - lambda, &through, 1.0);
                    embeddings.column_mut(m).copy_from(&arriving);
                }
            }
        }
    }

    // Chain the original columns through their l2 normalization to the
    // pre-normalization outputs.
    for b in 0..originals {
        let x = inputs.prenorm.column(b).clone_owned();
        let upstream = grad_originals.column(b).clone_owned();
        let pulled = l2_normalize_backward(&x, &upstream)?;
        embeddings.column_mut(b).copy_from(&pulled);
    }

    Ok(ApGradients {
        similarity: grad_s,
        embeddings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Role;
    use crate::labeling::{LabelMatrix, PositiveSets, build_label_matrix};
    use crate::mixup::augment_pair;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand::distr::{Distribution, Uniform};
    use rand_chacha::ChaCha12Rng;
    use std::collections::BTreeSet;

    fn config(bins: usize) -> ApLossConfig {
        ApLossConfig::new(bins).unwrap()
    }

    fn labels_from_pairs(n: usize, pairs: &[(usize, usize)]) -> LabelMatrix {
        let mut sets = vec![BTreeSet::new(); n];
        for &(a, b) in pairs {
            sets[a].insert(b);
            sets[b].insert(a);
        }
        build_label_matrix(&PositiveSets::from_sets(sets).unwrap()).unwrap()
    }

    #[test]
    fn config_layout() {
        assert!(matches!(ApLossConfig::new(1), Err(Error::InvalidBins(1))));
        let two = config(2);
        assert_eq!(two.delta(), 2.0);
        assert_eq!(two.center(0), 1.0);
        assert_eq!(two.center(1), -1.0);
        let twenty = config(20);
        assert_relative_eq!(twenty.delta(), 2.0 / 19.0, epsilon = 1e-15);
        assert_relative_eq!(twenty.center(19), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn kernel_weights_are_local() {
        let cfg = config(3);
        // Centers are 1, 0, -1 with unit spacing.
        assert_eq!(soft_bin_weight(1.0, 0, &cfg), 1.0);
        assert_eq!(soft_bin_weight(0.5, 0, &cfg), 0.5);
        assert_eq!(soft_bin_weight(0.5, 1, &cfg), 0.5);
        assert_eq!(soft_bin_weight(0.5, 2, &cfg), 0.0);
        assert_eq!(soft_bin_weight(-1.0, 2, &cfg), 1.0);
    }

    /// Three hand-unrolled fixtures with three bins (centers 1, 0, -1).
    #[test]
    fn hand_worked_quantized_ap() {
        let cfg = config(3);
        // Positive at the top, negative at the bottom: perfect ranking.
        let ap = quantized_ap(&[1.0, 1.0, -1.0], &[0.0, 1.0, 0.0], 0, &cfg)
            .unwrap()
            .unwrap();
        assert_relative_eq!(ap, 1.0, epsilon = 1e-15);

        // Negative above the positive: precision at the positive's bin is
        // 1/2, and it carries all the recall.
        let ap = quantized_ap(&[1.0, -1.0, 1.0], &[0.0, 1.0, 0.0], 0, &cfg)
            .unwrap()
            .unwrap();
        assert_relative_eq!(ap, 0.5, epsilon = 1e-15);

        // Positive and negative tied at 0.5 split evenly across two bins:
        // bin 0 has precision 1/2 with recall 1/2, bin 1 accumulates
        // precision 1/2 with the remaining recall 1/2.
        let ap = quantized_ap(&[1.0, 0.5, 0.5], &[0.0, 1.0, 0.0], 0, &cfg)
            .unwrap()
            .unwrap();
        assert_relative_eq!(ap, 0.5, epsilon = 1e-15);

        // No positives: undefined.
        assert!(
            quantized_ap(&[1.0, 0.3], &[0.0, 0.0], 0, &cfg)
                .unwrap()
                .is_none()
        );
    }

    #[test]
    fn quantized_ap_validates_input() {
        let cfg = config(3);
        assert!(matches!(
            quantized_ap(&[1.0, 0.0], &[0.0], 0, &cfg),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            quantized_ap(&[1.0, 0.0], &[0.0, 1.0], 2, &cfg),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            quantized_ap(&[1.0, 0.0], &[0.0, 0.5], 0, &cfg),
            Err(Error::NonBinaryLabel { index: 1, .. })
        ));
        assert!(matches!(
            quantized_ap(&[1.0, f64::NAN], &[0.0, 1.0], 0, &cfg),
            Err(Error::NonFinite { .. })
        ));
    }

    fn random_instance(dim: usize, n: usize, seed: u64) -> (DMatrix<f64>, LabelMatrix) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dist = Uniform::new(-1.0, 1.0).unwrap();
        let x = DMatrix::from_fn(dim, n, |_, _| dist.sample(&mut rng) + 0.05);
        let mut sets = vec![BTreeSet::new(); n];
        for a in 0..n {
            for b in (a + 1)..n {
                if rng.random_range(0..3) == 0 {
                    sets[a].insert(b);
                    sets[b].insert(a);
                }
            }
        }
        let y = build_label_matrix(&PositiveSets::from_sets(sets).unwrap()).unwrap();
        (x, y)
    }

    fn loss_of(x: &DMatrix<f64>, y: &LabelMatrix, cfg: &ApLossConfig) -> Option<f64> {
        let f = EmbeddingMatrix::normalize_columns(x.clone(), Role::Student).unwrap();
        ap_loss_forward(&f.similarity(), y, cfg)
            .ok()
            .map(|r| r.loss())
    }

    /// Smallest distance from any off-diagonal similarity to a kernel kink
    /// (the bin-center grid). Instances too close to a kink make finite
    /// differences straddle a non-smooth point and must be re-drawn.
    fn kink_distance(x: &DMatrix<f64>, cfg: &ApLossConfig) -> f64 {
        let f = EmbeddingMatrix::normalize_columns(x.clone(), Role::Student).unwrap();
        let s = f.similarity();
        let mut best = f64::INFINITY;
        for q in 0..s.len() {
            for z in 0..s.len() {
                if q == z {
                    continue;
                }
                let v = s.data()[(q, z)];
                for b in 0..cfg.bins() {
                    best = best.min((v - cfg.center(b)).abs());
                }
                best = best.min((v - 1.0).abs()).min((v + 1.0).abs());
            }
        }
        best
    }

    /// Central finite differences over the pre-normalization matrix must
    /// match the analytic embedding gradients (no mixing involved).
    #[test]
    fn backward_matches_finite_differences() {
        let cfg = config(5);
        let mut checked = 0;
        let mut seed = 0u64;
        while checked < 4 {
            seed += 1;
            let (x, y) = random_instance(3, 6, seed);
            if kink_distance(&x, &cfg) < 1e-4 {
                continue;
            }
            let Some(base_loss) = loss_of(&x, &y, &cfg) else {
                continue;
            };
            assert!(base_loss.is_finite());

            let f = EmbeddingMatrix::normalize_columns(x.clone(), Role::Student).unwrap();
            let s = f.similarity();
            let forward = ap_loss_forward(&s, &y, &cfg).unwrap();
            let grads = ap_loss_backward(
                &forward,
                &BackwardInputs {
                    similarity: &s,
                    labels: &y,
                    student: &f,
                    prenorm: &x,
                    mix: None,
                    mode: GradMode::StopGrad,
                },
            )
            .unwrap();

            let h = 1e-6;
            let mut max_rel = 0.0_f64;
            for i in 0..x.nrows() {
                for j in 0..x.ncols() {
                    let mut plus = x.clone();
                    plus[(i, j)] += h;
                    let mut minus = x.clone();
                    minus[(i, j)] -= h;
                    let fd = (loss_of(&plus, &y, &cfg).unwrap()
                        - loss_of(&minus, &y, &cfg).unwrap())
                        / (2.0 * h);
                    let a = grads.embeddings[(i, j)];
                    let denom = a.abs().max(fd.abs()).max(1e-8);
                    max_rel = max_rel.max((a - fd).abs() / denom);
                }
            }
            assert!(
                max_rel < 1e-5,
                "seed {seed}: max relative gradient error {max_rel}"
            );
            checked += 1;
        }
    }

    #[test]
    fn empty_query_rows_get_zero_gradient() {
        let cfg = config(4);
        let (x, _) = random_instance(3, 5, 42);
        // Only samples 0 and 1 are related; queries 2..5 are empty.
        let y = labels_from_pairs(5, &[(0, 1)]);
        let f = EmbeddingMatrix::normalize_columns(x.clone(), Role::Student).unwrap();
        let s = f.similarity();
        let forward = ap_loss_forward(&s, &y, &cfg).unwrap();
        assert_eq!(forward.active_queries(), 2);
        assert!(forward.per_query_ap()[2].is_none());
        let grads = ap_loss_backward(
            &forward,
            &BackwardInputs {
                similarity: &s,
                labels: &y,
                student: &f,
                prenorm: &x,
                mix: None,
                mode: GradMode::StopGrad,
            },
        )
        .unwrap();
        for q in 2..5 {
            assert!(grads.similarity.row(q).iter().all(|&v| v == 0.0));
        }
        for q in 0..5 {
            assert_eq!(grads.similarity[(q, q)], 0.0);
        }
    }

    #[test]
    fn all_empty_labels_are_rejected() {
        let cfg = config(3);
        let (x, _) = random_instance(3, 4, 7);
        let y = labels_from_pairs(4, &[]);
        let f = EmbeddingMatrix::normalize_columns(x, Role::Student).unwrap();
        assert!(matches!(
            ap_loss_forward(&f.similarity(), &y, &cfg),
            Err(Error::AllQueriesEmpty)
        ));
    }

    fn mixed_fixture(
        seed: u64,
    ) -> (
        DMatrix<f64>,
        EmbeddingMatrix,
        crate::mixup::MixedBatch,
        LabelMatrix,
    ) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dist = Uniform::new(-1.0, 1.0).unwrap();
        let b = 5;
        let x = DMatrix::from_fn(3, b, |_, _| dist.sample(&mut rng) + 0.05);
        let teacher = EmbeddingMatrix::normalize_columns(
            DMatrix::from_fn(6, b, |_, _| dist.sample(&mut rng)),
            Role::Teacher,
        )
        .unwrap();
        let student = EmbeddingMatrix::normalize_columns(x.clone(), Role::Student).unwrap();
        let batch = augment_pair(&teacher, &student, 0.35, &mut rng).unwrap();
        let sets = crate::labeling::similarity_labelling(&batch.teacher.similarity(), 0.0).unwrap();
        let full = crate::labeling::mixup_labelling(&sets, &batch.record).unwrap();
        let y = build_label_matrix(&full).unwrap();
        (x, student, batch, y)
    }

    #[test]
    fn stop_grad_zeroes_mixed_block_and_all_grad_fills_it() {
        let (x, _student, batch, y) = mixed_fixture(11);
        let cfg = config(5);
        let s = batch.student.similarity();
        let forward = ap_loss_forward(&s, &y, &cfg).unwrap();

        let stop = ap_loss_backward(
            &forward,
            &BackwardInputs {
                similarity: &s,
                labels: &y,
                student: &batch.student,
                prenorm: &x,
                mix: Some(&batch.record),
                mode: GradMode::StopGrad,
            },
        )
        .unwrap();
        let b = batch.record.batch_size();
        let mixed_block = stop.embeddings.columns(b, b);
        assert!(mixed_block.iter().all(|&v| v == 0.0));
        assert!(stop.embeddings.columns(0, b).iter().any(|&v| v != 0.0));

        let all = ap_loss_backward(
            &forward,
            &BackwardInputs {
                similarity: &s,
                labels: &y,
                student: &batch.student,
                prenorm: &x,
                mix: Some(&batch.record),
                mode: GradMode::AllGrad,
            },
        )
        .unwrap();
        assert!(all.embeddings.columns(b, b).iter().any(|&v| v != 0.0));
        // Redistribution changes the original-column gradients too.
        let diff = (all.embeddings.columns(0, b) - stop.embeddings.columns(0, b)).norm();
        assert!(diff > 1e-12);
    }

    /// Under all-grad the full computation graph, including the blend and
    /// its re-normalization, is differentiated; finite differences that
    /// rebuild the mixed columns from the perturbed originals must agree.
    #[test]
    fn all_grad_matches_full_graph_finite_differences() {
        let cfg = config(5);
        let mut checked = 0;
        let mut seed = 100u64;
        while checked < 3 {
            seed += 1;
            let (x, _student, batch, y) = mixed_fixture(seed);
            let record = batch.record.clone();
            let b = record.batch_size();

            let joint_loss = |x_try: &DMatrix<f64>| -> Option<f64> {
                let student =
                    EmbeddingMatrix::normalize_columns(x_try.clone(), Role::Student).ok()?;
                let joint = crate::mixup::join_with_mixed(&student, &record).ok()?;
                let s = joint.similarity();
                ap_loss_forward(&s, &y, &cfg).ok().map(|f| f.loss())
            };

            // Keep clear of kernel kinks in the joint similarity matrix.
            let student = EmbeddingMatrix::normalize_columns(x.clone(), Role::Student).unwrap();
            let joint = crate::mixup::join_with_mixed(&student, &record).unwrap();
            let s = joint.similarity();
            let mut kink = f64::INFINITY;
            for q in 0..s.len() {
                for z in 0..s.len() {
                    if q != z {
                        let v = s.data()[(q, z)];
                        for bin in 0..cfg.bins() {
                            kink = kink.min((v - cfg.center(bin)).abs());
                        }
                    }
                }
            }
            if kink < 1e-4 {
                continue;
            }

            let forward = ap_loss_forward(&s, &y, &cfg).unwrap();
            let grads = ap_loss_backward(
                &forward,
                &BackwardInputs {
                    similarity: &s,
                    labels: &y,
                    student: &joint,
                    prenorm: &x,
                    mix: Some(&record),
                    mode: GradMode::AllGrad,
                },
            )
            .unwrap();

            let h = 1e-6;
            let mut max_rel = 0.0_f64;
            for i in 0..x.nrows() {
                for j in 0..b {
                    let mut plus = x.clone();
                    plus[(i, j)] += h;
                    let mut minus = x.clone();
                    minus[(i, j)] -= h;
                    let (Some(fp), Some(fm)) = (joint_loss(&plus), joint_loss(&minus)) else {
                        continue;
                    };
                    let fd = (fp - fm) / (2.0 * h);
                    let a = grads.embeddings[(i, j)];
                    let denom = a.abs().max(fd.abs()).max(1e-8);
                    max_rel = max_rel.max((a - fd).abs() / denom);
                }
            }
            assert!(
                max_rel < 1e-5,
                "seed {seed}: all-grad relative error {max_rel}"
            );
            checked += 1;
        }
    }

    proptest! {
        /// Kernel weights are a partition of unity on [-1, 1].
        #[test]
        fn weights_partition_unity(s in -1.0f64..1.0, bins in 2usize..24) {
            let cfg = config(bins);
            let total: f64 = (0..bins).map(|b| soft_bin_weight(s, b, &cfg)).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let [lo, hi] = active_bins(s, &cfg);
            let covered: f64 = dedup_bins([lo, hi]).map(|b| soft_bin_weight(s, b, &cfg)).sum();
            prop_assert!((covered - 1.0).abs() < 1e-12);
        }

        /// Quantized AP stays in [0, 1] and the loss in [0, 1].
        #[test]
        fn ap_and_loss_bounded(seed in 0u64..400, bins in 2usize..12) {
            let cfg = config(bins);
            let (x, y) = random_instance(4, 8, seed);
            let f = EmbeddingMatrix::normalize_columns(x, Role::Student).unwrap();
            if let Ok(forward) = ap_loss_forward(&f.similarity(), &y, &cfg) {
                prop_assert!(forward.loss() >= -1e-9 && forward.loss() <= 1.0 + 1e-9);
                for ap in forward.per_query_ap().iter().flatten() {
                    prop_assert!(*ap >= -1e-9 && *ap <= 1.0 + 1e-9);
                }
            }
        }
    }
}
