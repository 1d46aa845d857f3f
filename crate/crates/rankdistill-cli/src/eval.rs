//! `eval`: embed the query and database inputs with a trained head and
//! report retrieval metrics, overall and per difficulty split, optionally
//! after square-rooted PCA whitening.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use rankdistill::eval::{
    RetrievalMetrics, apply_whitening, evaluate_retrieval, fit_whitening, summarize_splits,
};
use rankdistill::io::{self, Manifest};
use rankdistill::world::Split;

use crate::common;

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Manifest of the world to evaluate on.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Trained head checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory for metrics.csv; metrics always print to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ranking depth of the precision metric.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Also report metrics after square-rooted PCA whitening.
    #[arg(long)]
    pub whiten: bool,
    /// Whitening sample override (defaults to the manifest's entry).
    #[arg(long)]
    pub whiten_train: Option<PathBuf>,
    /// Whitened dimensionality (defaults to the head's output width).
    #[arg(long)]
    pub whiten_dim: Option<usize>,
}

pub fn run(args: EvalArgs) -> Result<()> {
    let manifest = Manifest::load(&args.manifest)
        .with_context(|| format!("loading manifest {}", args.manifest.display()))?;
    let (head, meta) = io::read_checkpoint(&args.checkpoint)
        .with_context(|| format!("reading checkpoint {}", args.checkpoint.display()))?;
    log::info!(
        "checkpoint from epoch {} (config {}, averaged: {})",
        meta.epoch,
        &meta.config_hash[..12.min(meta.config_hash.len())],
        meta.averaged,
    );

    let queries_path = common::sibling(&args.manifest, &manifest.queries);
    let queries_raw = io::read_matrix(&queries_path)
        .with_context(|| format!("reading query inputs {}", queries_path.display()))?;
    let database_path = common::sibling(&args.manifest, &manifest.database);
    let database_raw = io::read_matrix(&database_path)
        .with_context(|| format!("reading database inputs {}", database_path.display()))?;
    let truth_path = common::sibling(&args.manifest, &manifest.ground_truth);
    let ground_truth = io::read_ground_truth(&truth_path)
        .with_context(|| format!("reading ground truth {}", truth_path.display()))?;
    let splits = match &manifest.splits {
        Some(entry) => {
            let path = common::sibling(&args.manifest, entry);
            Some(
                io::read_splits(&path)
                    .with_context(|| format!("reading splits {}", path.display()))?,
            )
        }
        None => None,
    };

    let query_embeddings = head.embed(&queries_raw)?;
    let database_embeddings = head.embed(&database_raw)?;
    let metrics = evaluate_retrieval(
        &query_embeddings,
        &database_embeddings,
        &ground_truth,
        args.k,
    )?;

    let mut rows = Vec::new();
    push_metric_rows(&mut rows, "map", "mp_at_k", &metrics, splits.as_deref())?;

    if args.whiten {
        let sample_path = match (&args.whiten_train, &manifest.whitening) {
            (Some(path), _) => path.clone(),
            (None, Some(entry)) => common::sibling(&args.manifest, entry),
            (None, None) => anyhow::bail!(
                "--whiten needs a whitening sample: pass --whiten-train or add one to the manifest"
            ),
        };
        let sample_raw = io::read_matrix(&sample_path)
            .with_context(|| format!("reading whitening sample {}", sample_path.display()))?;
        let sample_embeddings = head.embed(&sample_raw)?;
        let out_dim = args.whiten_dim.unwrap_or_else(|| head.output_dim());
        let model = fit_whitening(&sample_embeddings, out_dim)?;
        let whitened_queries = apply_whitening(&model, &query_embeddings)?;
        let whitened_database = apply_whitening(&model, &database_embeddings)?;
        let whitened =
            evaluate_retrieval(&whitened_queries, &whitened_database, &ground_truth, args.k)?;
        push_metric_rows(
            &mut rows,
            "map_whitened",
            "mp_at_k_whitened",
            &whitened,
            splits.as_deref(),
        )?;
    }

    common::print_rows(&["metric", "split", "value"], &rows);
    if let Some(out) = &args.out {
        common::ensure_output_dir(out)?;
        common::write_csv(
            &out.join("metrics.csv"),
            &["metric", "split", "value"],
            &rows,
        )?;
        log::info!("wrote {}", out.join("metrics.csv").display());
    }
    Ok(())
}

fn push_metric_rows(
    rows: &mut Vec<Vec<String>>,
    map_name: &str,
    mp_name: &str,
    metrics: &RetrievalMetrics,
    splits: Option<&[Split]>,
) -> Result<()> {
    rows.push(vec![
        map_name.into(),
        "all".into(),
        format!("{}", metrics.map),
    ]);
    rows.push(vec![
        mp_name.into(),
        "all".into(),
        format!("{}", metrics.mp_at_k),
    ]);
    if let Some(splits) = splits {
        for summary in summarize_splits(metrics, splits)? {
            let tag = summary.split.to_string();
            rows.push(vec![
                map_name.into(),
                tag.clone(),
                format!("{}", summary.map),
            ]);
            rows.push(vec![mp_name.into(), tag, format!("{}", summary.mp_at_k)]);
        }
    }
    Ok(())
}
