use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cadenza_core::corpus::{load_dir, load_midi};
use cadenza_core::midi::write_midi;
use cadenza_core::Score;

/// Writes through a sibling temp file so a failed run never leaves a partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

pub fn write_score(path: &Path, score: &Score) -> Result<()> {
    write_atomic(path, &write_midi(score))
}

/// Loads one MIDI file re-timed to `ticks_per_quarter`.
pub fn read_score(path: &Path, ticks_per_quarter: u16) -> Result<Score> {
    Ok(load_midi(path)?.rescaled(ticks_per_quarter))
}

/// Every MIDI file under `dir` keyed by its path relative to `dir`.
pub fn read_dir(dir: &Path, ticks_per_quarter: u16) -> Result<Vec<(String, Score)>> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let files = load_dir(dir)?;
    if files.is_empty() {
        bail!("no MIDI files under {}", dir.display());
    }
    Ok(files
        .into_iter()
        .map(|(p, s)| {
            let name = p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().into_owned();
            (name, s.rescaled(ticks_per_quarter))
        })
        .collect())
}

/// A single file, or every MIDI file of a directory, by relative name.
pub fn read_inputs(path: &Path, ticks_per_quarter: u16) -> Result<BTreeMap<String, Score>> {
    if path.is_dir() {
        Ok(read_dir(path, ticks_per_quarter)?.into_iter().collect())
    } else {
        let name = path.file_name().unwrap_or(path.as_os_str()).to_string_lossy().into_owned();
        Ok(BTreeMap::from([(name, read_score(path, ticks_per_quarter)?)]))
    }
}

/// Where the resolved config of a file output is recorded.
pub fn config_beside(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".config.toml");
    PathBuf::from(name)
}
