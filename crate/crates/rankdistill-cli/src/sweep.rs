//! `sweep`: fan `distill` + `eval` out over a grid of one hyper-parameter
//! and aggregate the retrieval metrics into one table.
//!
//! Each grid point runs as a child process of the current executable so a
//! crash in one job cannot take the sweep down, and `--jobs` simply controls
//! how many children run at once. All distills run first (in waves), then
//! all evals, so every metrics file exists by aggregation time.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use anyhow::{Context, Result, bail};
use clap::{Args, ValueEnum};

use crate::common;
use crate::overrides::ConfigOverrides;

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    /// Teacher-similarity threshold.
    Tau,
    /// Mixing rounds per batch.
    R,
    /// Training-set size.
    D,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::R => "r",
            SweepParam::D => "d",
        }
    }

    fn flag(self) -> &'static str {
        match self {
            SweepParam::Tau => "--tau",
            SweepParam::R => "--r-iters",
            SweepParam::D => "--d-size",
        }
    }

    /// Parses and canonicalizes one grid value.
    fn canonicalize(self, raw: &str) -> Result<String> {
        match self {
            SweepParam::Tau => {
                let v: f64 = raw
                    .parse()
                    .with_context(|| format!("grid value {raw:?} is not a number"))?;
                Ok(format!("{v}"))
            }
            SweepParam::R | SweepParam::D => {
                let v: usize = raw
                    .parse()
                    .with_context(|| format!("grid value {raw:?} is not a count"))?;
                Ok(format!("{v}"))
            }
        }
    }
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Manifest of the world to sweep on.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory; each grid point gets a subdirectory.
    #[arg(long)]
    pub out: PathBuf,
    /// Hyper-parameter to vary.
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated grid of values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<String>,
    /// Concurrent worker processes.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Ranking depth of the precision metric.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

struct Job {
    value: String,
    arm: &'static str,
    dir: PathBuf,
    config: PathBuf,
}

pub fn run(args: SweepArgs) -> Result<()> {
    if args.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let base = args.overrides.resolve()?;
    let grid: Vec<String> = args
        .grid
        .iter()
        .map(|raw| args.param.canonicalize(raw))
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        bail!("--grid needs at least one value");
    }
    common::ensure_output_dir(&args.out)?;
    fs::write(args.out.join("base_config.json"), base.to_json()? + "\n")
        .context("writing base_config.json")?;

    // A size sweep compares learning with and without mixed samples at every
    // grid point; the other sweeps keep whatever the base config says.
    let arms: Vec<(&'static str, PathBuf)> = match args.param {
        SweepParam::D => {
            let mut arms = Vec::new();
            for (name, no_aug) in [("aug", false), ("no-aug", true)] {
                let mut cfg = base.clone();
                cfg.no_aug = no_aug;
                let path = args.out.join(format!("config_{name}.json"));
                fs::write(&path, cfg.to_json()? + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
                arms.push((name, path));
            }
            arms
        }
        _ => {
            let name = if base.no_aug { "no-aug" } else { "aug" };
            vec![(name, args.out.join("base_config.json"))]
        }
    };

    let mut jobs = Vec::new();
    for value in &grid {
        for (arm, config) in &arms {
            let dir = args
                .out
                .join(format!("{}_{}_{}", args.param.name(), value, arm));
            common::ensure_output_dir(&dir)?;
            jobs.push(Job {
                value: value.clone(),
                arm,
                dir,
                config: config.clone(),
            });
        }
    }

    let exe = std::env::current_exe().context("locating the current executable")?;
    log::info!(
        "sweeping {} over {:?}: {} jobs",
        args.param.name(),
        grid,
        jobs.len()
    );

    run_wave(&jobs, args.jobs, "distill", |job| {
        let mut cmd = Command::new(&exe);
        cmd.arg("distill")
            .arg("--manifest")
            .arg(&args.manifest)
            .arg("--out")
            .arg(&job.dir)
            .arg("--config")
            .arg(&job.config)
            .arg(args.param.flag())
            .arg(&job.value);
        cmd
    })?;
    run_wave(&jobs, args.jobs, "eval", |job| {
        let mut cmd = Command::new(&exe);
        cmd.arg("eval")
            .arg("--manifest")
            .arg(&args.manifest)
            .arg("--checkpoint")
            .arg(job.dir.join("head.rdck"))
            .arg("--out")
            .arg(&job.dir)
            .arg("--k")
            .arg(args.k.to_string());
        cmd
    })?;

    let mut rows = Vec::new();
    for job in &jobs {
        let metrics = job.dir.join("metrics.csv");
        let (map, mp_at_k) = read_overall_metrics(&metrics)
            .with_context(|| format!("aggregating {}", metrics.display()))?;
        rows.push(vec![
            args.param.name().to_string(),
            job.value.clone(),
            job.arm.to_string(),
            map,
            mp_at_k,
        ]);
    }
    let header = ["param", "value", "arm", "map", "mp_at_k"];
    common::write_csv(&args.out.join("sweep.csv"), &header, &rows)?;
    common::print_rows(&header, &rows);
    Ok(())
}

/// Runs `stage` for every job, at most `jobs` children at a time. Child
/// output goes to `<job dir>/<stage>.log`; the seed always comes from the
/// job's config file, so a stray RD_SEED must not leak into children.
fn run_wave(
    jobs: &[Job],
    parallel: usize,
    stage: &str,
    build: impl Fn(&Job) -> Command,
) -> Result<()> {
    for wave in jobs.chunks(parallel) {
        let mut running: Vec<(&Job, PathBuf, Child)> = Vec::new();
        for job in wave {
            let log_path = job.dir.join(format!("{stage}.log"));
            let log = fs::File::create(&log_path)
                .with_context(|| format!("creating {}", log_path.display()))?;
            let mut cmd = build(job);
            cmd.env_remove("RD_SEED")
                .stdin(Stdio::null())
                .stdout(Stdio::from(log.try_clone()?))
                .stderr(Stdio::from(log));
            let child = cmd
                .spawn()
                .with_context(|| format!("spawning {stage} for {}", job.dir.display()))?;
            running.push((job, log_path, child));
        }
        for (job, log_path, mut child) in running {
            let status = child.wait()?;
            if !status.success() {
                bail!(
                    "{stage} failed for {} ({}):\n{}",
                    job.dir.display(),
                    status,
                    log_tail(&log_path),
                );
            }
        }
    }
    Ok(())
}

/// Last few lines of a child's log, for failure messages.
fn log_tail(path: &Path) -> String {
    match fs::read_to_string(path) {
        Ok(text) => {
            let lines: Vec<&str> = text.lines().collect();
            let start = lines.len().saturating_sub(15);
            lines[start..].join("\n")
        }
        Err(err) => format!("(log {} unreadable: {err})", path.display()),
    }
}

/// Pulls the overall `map` and `mp_at_k` values out of one metrics.csv.
fn read_overall_metrics(path: &Path) -> Result<(String, String)> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut map = None;
    let mut mp_at_k = None;
    for record in reader.records() {
        let record = record?;
        if record.get(1) == Some("all") {
            match record.get(0) {
                Some("map") => map = record.get(2).map(str::to_string),
                Some("mp_at_k") => mp_at_k = record.get(2).map(str::to_string),
                _ => {}
            }
        }
    }
    match (map, mp_at_k) {
        (Some(map), Some(mp_at_k)) => Ok((map, mp_at_k)),
        _ => bail!("missing overall map/mp_at_k rows"),
    }
}
