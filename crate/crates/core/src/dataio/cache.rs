//! Calibration caches: a header line `PTQCALIB v1`, then one line per layer
//! `name<TAB>scale<TAB>bits<TAB>method<TAB>p`, where `scale` is the 16
//! lowercase hex digits of the `f64` bit pattern and `p` is `-` for methods
//! without a percentile.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::calibrators::{CalibMethod, CalibResult};
use crate::error::{Error, Result};
use crate::quant::{check_bits, QuantParams};

pub const HEADER: &str = "PTQCALIB v1";

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub name: String,
    pub scale: f64,
    pub bits: u32,
    pub method: CalibMethod,
}

impl CacheEntry {
    pub fn new(name: impl Into<String>, calib: &CalibResult) -> Self {
        Self { name: name.into(), scale: calib.scale, bits: calib.bits, method: calib.method }
    }

    pub fn params(&self) -> Result<QuantParams> {
        QuantParams::new(self.scale, self.bits)
    }
}

/// Ordered layer scales; names are unique.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationCache {
    entries: Vec<CacheEntry>,
}

impl CalibrationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<CacheEntry>) -> Result<Self> {
        let mut cache = Self::new();
        for e in entries {
            cache.push(e)?;
        }
        Ok(cache)
    }

    pub fn push(&mut self, entry: CacheEntry) -> Result<()> {
        check_name(&entry.name).map_err(Error::Config)?;
        if !(entry.scale.is_finite() && entry.scale > 0.0) {
            return Err(Error::InvalidParams(format!("{}: scale {} is not positive", entry.name, entry.scale)));
        }
        check_bits(entry.bits)?;
        entry.method.validate()?;
        if self.get(&entry.name).is_some() {
            return Err(Error::DuplicateLayer(entry.name));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&CacheEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn serialize(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for e in &self.entries {
            let p = e.method.percentile().map_or_else(|| "-".to_string(), |p| p.to_string());
            let _ = writeln!(
                out,
                "{}\t{:016x}\t{}\t{}\t{}",
                e.name,
                e.scale.to_bits(),
                e.bits,
                e.method.name(),
                p
            );
        }
        out
    }

    /// Strict parser: anything `serialize` would not have produced is an
    /// error, so a parsed cache re-serializes byte-identically.
    pub fn parse(text: &str) -> Result<Self> {
        let malformed = |line: usize, msg: String| Error::Malformed { line, msg };
        let Some(body) = text.strip_suffix('\n').or(if text.is_empty() { Some("") } else { None }) else {
            return Err(malformed(text.lines().count().max(1), "missing final newline".into()));
        };
        let mut lines = body.split('\n');
        if lines.next() != Some(HEADER) {
            return Err(malformed(1, format!("expected header `{HEADER}`")));
        }
        let mut cache = Self::new();
        let mut seen = HashSet::new();
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, scale, bits, method, p] = fields[..] else {
                return Err(malformed(n, format!("expected 5 tab-separated fields, found {}", fields.len())));
            };
            check_name(name).map_err(|m| malformed(n, m))?;
            if !seen.insert(name) {
                return Err(Error::DuplicateLayer(name.to_string()));
            }
            if scale.len() != 16 || !scale.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
                return Err(malformed(n, format!("scale `{scale}` is not 16 lowercase hex digits")));
            }
            let scale = f64::from_bits(u64::from_str_radix(scale, 16).expect("validated hex"));
            let bits_value: u32 = bits
                .parse()
                .ok()
                .filter(|b: &u32| b.to_string() == bits)
                .ok_or_else(|| malformed(n, format!("bad bit-width `{bits}`")))?;
            let p = match p {
                "-" => None,
                s => {
                    let v: f64 = s.parse().map_err(|_| malformed(n, format!("bad percentile `{s}`")))?;
                    if v.to_string() != s {
                        return Err(malformed(n, format!("percentile `{s}` is not in canonical form")));
                    }
                    Some(v)
                }
            };
            let method = CalibMethod::from_parts(method, p).map_err(|e| malformed(n, e.to_string()))?;
            if method.percentile().is_some() != p.is_some() {
                return Err(malformed(n, format!("method `{}` takes no percentile", method.name())));
            }
            cache
                .push(CacheEntry { name: name.to_string(), scale, bits: bits_value, method })
                .map_err(|e| malformed(n, e.to_string()))?;
        }
        Ok(cache)
    }
}

fn check_name(name: &str) -> Result<(), String> {
    if name.is_empty() || name.chars().any(|c| c == '\t' || c == '\n' || c == '\r') {
        return Err(format!("layer name {name:?} is empty or contains tabs or newlines"));
    }
    Ok(())
}

pub fn write_cache(path: &Path, cache: &CalibrationCache) -> Result<()> {
    fs::write(path, cache.serialize()).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<CalibrationCache> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CalibrationCache::parse(&text)
}
