//! On-disk formats: activation dumps, calibration caches and JSON reports.

mod cache;
mod dump;
mod profile;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::search::{SearchReport, REPORT_SCHEMA_VERSION};

pub use cache::{read_cache, write_cache, CacheEntry, CalibrationCache, HEADER as CACHE_HEADER};
pub use dump::{batch_path, list_dumps, read_dump, write_batch, write_dump, DumpTensor, MAGIC as DUMP_MAGIC};
pub use profile::{dump_stats, profile_dumps, DumpStats};

/// Pretty-printed JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_report(path: &Path, report: &SearchReport) -> Result<()> {
    write_json(path, report)
}

/// Reads a search report, rejecting other schema versions.
pub fn read_report(path: &Path) -> Result<SearchReport> {
    let report: SearchReport = read_json(path)?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "{}: report schema version {} is not supported (expected {REPORT_SCHEMA_VERSION})",
            path.display(),
            report.schema_version
        )));
    }
    Ok(report)
}
