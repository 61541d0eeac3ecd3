use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use subjectcraft_core::manifest::WallClock;
use subjectcraft_core::RgbImage;

use crate::error::{usage, CliError, CliResult};

pub const SEED_ENV: &str = "SUBJECTCRAFT_SEED";

/// Seed from `SUBJECTCRAFT_SEED`, if set.
pub fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage!("{SEED_ENV} must be an unsigned integer, got `{v}`")),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(usage!("{SEED_ENV}: {e}")),
    }
}

pub struct Clock {
    started: SystemTime,
    t0: Instant,
}

impl Clock {
    pub fn start() -> Self {
        Self {
            started: SystemTime::now(),
            t0: Instant::now(),
        }
    }

    pub fn finish(&self) -> WallClock {
        WallClock {
            started_unix_ms: self
                .started
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
            elapsed_ms: self.t0.elapsed().as_millis(),
        }
    }
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| usage!("cannot create {}: {e}", path.display()))
}

/// `*.ppm` files in `dir`, sorted by file name.
pub fn ppm_files(dir: &Path, what: &str) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(usage!("{what} `{}` is not a directory", dir.display()));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| usage!("{what} `{}`: {e}", dir.display()))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| usage!("{what} `{}`: {e}", dir.display()))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(usage!("{what} `{}` contains no .ppm files", dir.display()));
    }
    Ok(files)
}

pub fn load_images(paths: &[PathBuf]) -> CliResult<Vec<RgbImage>> {
    paths
        .iter()
        .map(|p| RgbImage::load_ppm(p).map_err(CliError::from))
        .collect()
}
