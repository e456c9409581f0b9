//! TOML run configuration.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

use ptqcal_core::histogram::{DEFAULT_BINS, MAX_PERCENTILE};
use ptqcal_core::refnet::RefNetSpec;
use ptqcal_core::search::{percentile_grid, DEFAULT_GAMMA, DEFAULT_GRID_STEP};
use ptqcal_core::{Error, SearchConfig};

/// Offsets added to the network seed for each data split.
pub const CALIB_SEED_OFFSET: u64 = 1000;
pub const DEV_SEED_OFFSET: u64 = 2000;
pub const TEST_SEED_OFFSET: u64 = 3000;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub refnet: RefNetSpec,
    pub data: DataConfig,
    pub search: SearchSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub calib: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { calib: 128, dev: 64, test: 64 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub gamma: f64,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_step: f64,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub bins: usize,
    pub parallel: bool,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            grid_lo: 0.0,
            grid_hi: MAX_PERCENTILE,
            grid_step: DEFAULT_GRID_STEP,
            weight_bits: 8,
            act_bits: 8,
            bins: DEFAULT_BINS,
            parallel: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate().with_context(|| path.display().to_string())?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.refnet.validate()?;
        if self.data.calib == 0 || self.data.dev == 0 || self.data.test == 0 {
            return Err(Error::Config("data split sizes must be positive".into()).into());
        }
        self.search_config()?;
        Ok(())
    }

    pub fn search_config(&self) -> Result<SearchConfig> {
        let s = &self.search;
        let mut config = SearchConfig::new(s.act_bits);
        config.weight_bits = s.weight_bits;
        config.gamma = s.gamma;
        config.grid = percentile_grid(s.grid_lo, s.grid_hi, s.grid_step)?;
        config.bins = s.bins;
        config.parallel = s.parallel;
        config.validate()?;
        Ok(config)
    }

    pub fn calib_seed(&self) -> u64 {
        self.refnet.seed + CALIB_SEED_OFFSET
    }

    pub fn dev_seed(&self) -> u64 {
        self.refnet.seed + DEV_SEED_OFFSET
    }

    pub fn test_seed(&self) -> u64 {
        self.refnet.seed + TEST_SEED_OFFSET
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        c.validate().unwrap();
        assert_eq!(c.refnet, RefNetSpec::default());
        assert_eq!(c.search_config().unwrap().grid.len(), 51);
        assert_eq!((c.calib_seed(), c.dev_seed(), c.test_seed()), (1000, 2000, 3000));
    }

    #[test]
    fn outliers_and_overrides_parse() {
        let text = "[refnet]\nseed = 3\noutliers = { conv0 = 50.0 }\n[data]\ndev = 8\n[search]\ngamma = 1.5\n";
        let c: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(c.refnet.outliers["conv0"], 50.0);
        assert_eq!(c.data.dev, 8);
        assert_eq!(c.data.calib, 128);
        assert_eq!(c.search_config().unwrap().gamma, 1.5);
        assert_eq!(c.dev_seed(), 2003);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("gama = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[search]\ngama = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[refnet]\nwidht = 1\n").is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let c: RunConfig = toml::from_str("[search]\ngrid_hi = 0.9\n").unwrap();
        assert!(c.validate().is_err());
        let c: RunConfig = toml::from_str("[data]\ncalib = 0\n").unwrap();
        assert!(c.validate().is_err());
    }
}
