//! JSON Lines storage: one sample per line, keys emitted in sorted order so
//! identical inputs produce byte-identical files.

use crate::data::Sample;
use crate::error::{Error, Result};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        sample.validate()?;
        out.push(sample);
    }
    Ok(out)
}

/// Canonical single-line rendering (sorted keys).
pub fn sample_to_line(sample: &Sample) -> Result<String> {
    let value = serde_json::to_value(sample)?;
    Ok(serde_json::to_string(&value)?)
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::Data(format!("{}: {e}", parent.display())))?;
    }
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        writeln!(w, "{}", sample_to_line(s)?)?;
    }
    w.flush()?;
    Ok(())
}
