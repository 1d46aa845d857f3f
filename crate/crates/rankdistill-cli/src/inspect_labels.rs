//! `inspect-labels`: build the positive sets one training round would see
//! (teacher side only, no student involved) and report how dense they are.
//! Useful for picking a threshold before paying for a full run.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rankdistill::embed::Role;
use rankdistill::io::{self, Manifest};
use rankdistill::labeling::{PositiveSets, mixup_labelling, similarity_labelling};
use rankdistill::mixup::{augment_pair, sample_lambda};

use crate::common;
use crate::overrides::ConfigOverrides;

#[derive(Args, Debug)]
pub struct InspectLabelsArgs {
    /// Manifest whose teacher embeddings are labelled.
    #[arg(long)]
    pub manifest: PathBuf,
    /// CSV output path (stats always print to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

pub fn run(args: InspectLabelsArgs) -> Result<()> {
    let config = args.overrides.resolve()?;
    let manifest = Manifest::load(&args.manifest)
        .with_context(|| format!("loading manifest {}", args.manifest.display()))?;
    let teacher_path = common::sibling(&args.manifest, &manifest.teacher);
    let teacher = io::read_embedding_file(&teacher_path, Role::Teacher)
        .with_context(|| format!("reading teacher embeddings {}", teacher_path.display()))?;

    let sets = if config.no_aug {
        log::info!(
            "labelling {} originals at tau {} (no mixing)",
            teacher.len(),
            config.tau,
        );
        similarity_labelling(&teacher.similarity(), config.tau)?
    } else {
        // Replay one mixing round over the whole training set, teacher side
        // only: same coefficient and partner draws a training batch of this
        // size would use.
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let lambda = sample_lambda(config.alpha, &mut rng)?;
        let mixed = augment_pair(&teacher, &teacher, lambda, &mut rng)?;
        log::info!(
            "labelling {} originals + {} mixed at tau {} (lambda {:.4}, mixup labels: {})",
            teacher.len(),
            teacher.len(),
            config.tau,
            lambda,
            !config.no_ml,
        );
        let sets = similarity_labelling(&mixed.teacher.similarity(), config.tau)?;
        if config.no_ml {
            sets
        } else {
            mixup_labelling(&sets, &mixed.record)?
        }
    };

    let rows = stat_rows(&sets)?;
    common::print_rows(&["stat", "value"], &rows);
    if let Some(out) = &args.out {
        common::write_csv(out, &["stat", "value"], &rows)?;
        log::info!("wrote {}", out.display());
    }
    Ok(())
}

fn stat_rows(sets: &PositiveSets) -> Result<Vec<Vec<String>>> {
    let counts: Vec<usize> = sets.iter().map(|set| set.len()).collect();
    let queries = counts.len();
    anyhow::ensure!(queries > 0, "no queries to label");
    let empty = counts.iter().filter(|&&c| c == 0).count();
    let total: usize = counts.iter().sum();
    let row = |stat: &str, value: String| vec![stat.to_string(), value];
    Ok(vec![
        row("queries", queries.to_string()),
        row(
            "empty_fraction",
            format!("{}", empty as f64 / queries as f64),
        ),
        row(
            "mean_positives",
            format!("{}", total as f64 / queries as f64),
        ),
        row("min_positives", counts.iter().min().unwrap().to_string()),
        row("max_positives", counts.iter().max().unwrap().to_string()),
    ])
}
