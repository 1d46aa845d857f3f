//! `gen-data`: sample a synthetic clustered world and write every file the
//! other commands consume, tied together by a manifest.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use rankdistill::io::{self, Manifest};
use rankdistill::world::{EvalCounts, WorldSpec, generate_world_bundle};

use crate::common;

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory (created if its parent exists).
    #[arg(long)]
    pub out: PathBuf,
    /// Number of cluster centers.
    #[arg(long, default_value_t = 20)]
    pub clusters: usize,
    /// Training samples per cluster.
    #[arg(long, default_value_t = 100)]
    pub per_cluster: usize,
    /// Teacher embedding dimensionality.
    #[arg(long, default_value_t = 64)]
    pub teacher_dim: usize,
    /// Raw student input dimensionality.
    #[arg(long, default_value_t = 64)]
    pub student_dim: usize,
    /// Cluster concentration; members scatter around their center with
    /// noise 1/kappa.
    #[arg(long, default_value_t = 20.0)]
    pub kappa: f64,
    /// Noise level of the student's view of each sample.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Cap on same-cluster training neighbors above teacher similarity
    /// 0.75; omitted means dense clusters.
    #[arg(long)]
    pub nn_cap: Option<usize>,
    /// RNG seed.
    #[arg(long, env = "RD_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Evaluation queries drawn per cluster.
    #[arg(long, default_value_t = 5)]
    pub queries_per_cluster: usize,
    /// Database entries drawn per cluster.
    #[arg(long, default_value_t = 20)]
    pub db_per_cluster: usize,
    /// Whitening-sample entries drawn per cluster.
    #[arg(long, default_value_t = 10)]
    pub whiten_per_cluster: usize,
}

pub fn run(args: GenDataArgs) -> Result<()> {
    common::ensure_output_dir(&args.out)?;
    let spec = WorldSpec {
        clusters: args.clusters,
        per_cluster: args.per_cluster,
        teacher_dim: args.teacher_dim,
        student_input_dim: args.student_dim,
        kappa: args.kappa,
        sigma: args.sigma,
        nn_cap: args.nn_cap,
        seed: args.seed,
    };
    let counts = EvalCounts {
        queries_per_cluster: args.queries_per_cluster,
        db_per_cluster: args.db_per_cluster,
        whiten_per_cluster: args.whiten_per_cluster,
    };
    let bundle = generate_world_bundle(&spec, &counts)?;

    let out = &args.out;
    io::write_embedding_file(&out.join("teacher.rdem"), &bundle.train.teacher)?;
    io::write_matrix(&out.join("student_raw.rdem"), &bundle.train.student_raw)?;
    io::write_matrix(&out.join("queries.rdem"), &bundle.queries.student_raw)?;
    io::write_matrix(&out.join("database.rdem"), &bundle.database.student_raw)?;
    io::write_matrix(&out.join("whitening.rdem"), &bundle.whitening.student_raw)?;
    io::write_ground_truth(&out.join("ground_truth.txt"), &bundle.ground_truth)?;
    io::write_splits(&out.join("splits.txt"), &bundle.splits)?;

    let manifest = Manifest {
        teacher: "teacher.rdem".into(),
        student_raw: "student_raw.rdem".into(),
        queries: "queries.rdem".into(),
        database: "database.rdem".into(),
        whitening: Some("whitening.rdem".into()),
        ground_truth: "ground_truth.txt".into(),
        splits: Some("splits.txt".into()),
    };
    manifest.save(&out.join("manifest.json"))?;
    fs::write(
        out.join("world_spec.json"),
        serde_json::to_string_pretty(&spec)? + "\n",
    )
    .context("writing world_spec.json")?;

    println!(
        "world: {} clusters x {} train samples, {} queries, {} database entries",
        args.clusters,
        args.per_cluster,
        bundle.queries.len(),
        bundle.database.len(),
    );
    println!("manifest: {}", out.join("manifest.json").display());
    Ok(())
}
