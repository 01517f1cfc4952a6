//! JSON-Lines caption files: one `{"image_id", "caption_id", "tokens"}` object per line.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: u64,
    pub caption_id: u64,
    pub tokens: Vec<String>,
}

pub fn read_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), line: n + 1, msg: e.to_string() })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: caption file contains no captions", path.display())));
    }
    Ok(out)
}

pub fn write_captions(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
