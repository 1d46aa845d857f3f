//! Small helpers shared by the subcommands: output directories, CSV
//! writing, and manifest-relative paths.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result, bail};

/// Creates `dir` if needed. Only the leaf is created: a missing parent is a
/// usage error, not something to silently paper over with `create_dir_all`.
pub fn ensure_output_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        return Ok(());
    }
    if dir.exists() {
        bail!(
            "output path {} exists and is not a directory",
            dir.display()
        );
    }
    if let Some(parent) = dir.parent()
        && !parent.as_os_str().is_empty()
        && !parent.is_dir()
    {
        bail!(
            "cannot create output directory {}: parent {} does not exist",
            dir.display(),
            parent.display()
        );
    }
    fs::create_dir(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(())
}

/// Resolves a manifest-relative entry against the manifest's directory.
pub fn sibling(manifest_path: &Path, entry: &str) -> PathBuf {
    manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .join(entry)
}

/// Writes a header plus rows as CSV.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Prints a header plus rows as comma-separated lines.
pub fn print_rows(header: &[&str], rows: &[Vec<String>]) {
    println!("{}", header.join(","));
    for row in rows {
        println!("{}", row.join(","));
    }
}
