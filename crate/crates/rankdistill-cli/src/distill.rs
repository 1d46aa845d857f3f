//! `distill`: train a student head against the manifest's teacher and write
//! the training log plus checkpoints.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use rankdistill::embed::Role;
use rankdistill::io::{self, CheckpointMeta, Manifest};
use rankdistill::trainer::{StudentHead, train};
use rankdistill::world::{CountingTeacher, MatrixTeacher};

use crate::common;
use crate::overrides::ConfigOverrides;

#[derive(Args, Debug)]
pub struct DistillArgs {
    /// Manifest of the world to train on.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

pub fn run(args: DistillArgs) -> Result<()> {
    let config = args.overrides.resolve()?;
    common::ensure_output_dir(&args.out)?;
    let manifest = Manifest::load(&args.manifest)
        .with_context(|| format!("loading manifest {}", args.manifest.display()))?;

    let teacher_path = common::sibling(&args.manifest, &manifest.teacher);
    let teacher = io::read_embedding_file(&teacher_path, Role::Teacher)
        .with_context(|| format!("reading teacher embeddings {}", teacher_path.display()))?;
    let raw_path = common::sibling(&args.manifest, &manifest.student_raw);
    let student_raw = io::read_matrix(&raw_path)
        .with_context(|| format!("reading student inputs {}", raw_path.display()))?;

    // The effective configuration is part of the run's record: echo it and
    // keep a copy next to the artifacts.
    let echo = config.to_json()?;
    println!("{echo}");
    fs::write(args.out.join("config.json"), echo + "\n").context("writing config.json")?;

    let mut source = CountingTeacher::new(MatrixTeacher::new(teacher));
    let report = train(&config, &mut source, &student_raw)?;

    let rows: Vec<Vec<String>> = report
        .epochs
        .iter()
        .map(|row| {
            vec![
                row.epoch.to_string(),
                format!("{}", row.loss),
                format!("{}", row.lr),
                row.teacher_queries.to_string(),
                row.skipped_batches.to_string(),
            ]
        })
        .collect();
    common::write_csv(
        &args.out.join("training_log.csv"),
        &["epoch", "loss", "lr", "teacher_queries", "skipped_batches"],
        &rows,
    )?;

    let config_hash = config.hash()?;
    for snapshot in &report.snapshots {
        let head = StudentHead::from_tensors(snapshot.tensors.clone())?;
        io::write_checkpoint(
            &args.out.join(format!("snapshot_ep{}.rdck", snapshot.epoch)),
            &head,
            &CheckpointMeta {
                epoch: snapshot.epoch,
                config_hash: config_hash.clone(),
                averaged: false,
            },
        )?;
    }
    io::write_checkpoint(
        &args.out.join("head.rdck"),
        &report.head,
        &CheckpointMeta {
            epoch: config.epochs,
            config_hash,
            averaged: true,
        },
    )?;

    let last = report
        .epochs
        .last()
        .expect("validated configs train at least one epoch");
    println!(
        "trained {} epochs; final epoch loss {}; unique teacher queries {}",
        report.epochs.len(),
        last.loss,
        report.teacher_queries,
    );
    println!("head: {}", args.out.join("head.rdck").display());
    Ok(())
}
