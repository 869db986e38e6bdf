//! Line-delimited JSON training logs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};

/// Appends one JSON object per record; a log without a file only tracks
/// elapsed time.
pub struct TrainingLog {
    out: Option<(PathBuf, BufWriter<File>)>,
    start: Instant,
}

impl TrainingLog {
    pub fn disabled() -> Self {
        Self {
            out: None,
            start: Instant::now(),
        }
    }

    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: Some((path.to_path_buf(), BufWriter::new(f))),
            start: Instant::now(),
        })
    }

    pub fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    pub fn record<R: Serialize>(&mut self, record: &R) -> Result<()> {
        if let Some((path, w)) = &mut self.out {
            serde_json::to_writer(&mut *w, record)?;
            w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.out {
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }
}
