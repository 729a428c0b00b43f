use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use meshlgcp::io::config_hash;
use meshlgcp::preprocess::DEFAULT_PIXEL_MICRONS;
use meshlgcp::sampler::SamplerConfig;
use meshlgcp::simulate::SimConfig;
use meshlgcp::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinConfig {
    /// Target pixel side in microns.
    pub pixel_microns: f64,
}

impl Default for BinConfig {
    fn default() -> Self {
        Self {
            pixel_microns: DEFAULT_PIXEL_MICRONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveConfig {
    /// Points on the distance grid, from 0 to half the domain diagonal.
    pub h_points: usize,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self { h_points: 60 }
    }
}

/// Everything one invocation needs, read from a single TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub bin: BinConfig,
    pub simulate: SimConfig,
    pub sampler: SamplerConfig,
    pub curves: CurveConfig,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub tile: Option<(usize, usize)>,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: Overrides) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(seed) = overrides.seed {
            cfg.sampler.seed = seed;
            cfg.simulate.seed = seed;
        }
        if let Some(k) = overrides.k {
            cfg.sampler.k = k;
        }
        if let Some(tile) = overrides.tile {
            cfg.sampler.tile = tile;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> meshlgcp::Result<()> {
        if !(self.bin.pixel_microns > 0.0 && self.bin.pixel_microns.is_finite()) {
            return Err(Error::Config(format!(
                "bin.pixel_microns must be positive, got {}",
                self.bin.pixel_microns
            )));
        }
        if self.curves.h_points == 0 {
            return Err(Error::Config("curves.h_points must be >= 1".into()));
        }
        self.sampler.validate()?;
        self.simulate.validate()
    }

    pub fn hash(&self) -> meshlgcp::Result<String> {
        config_hash(self)
    }
}

/// Parses `"5x5"`, `"5,5"` or `"5"`.
pub fn parse_tile(s: &str) -> Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(['x', ',']).map(str::trim).collect();
    let num = |p: &str| p.parse::<usize>().map_err(|e| format!("bad tile {s:?}: {e}"));
    match parts.as_slice() {
        [n] => num(n).map(|n| (n, n)),
        [a, b] => Ok((num(a)?, num(b)?)),
        _ => Err(format!("bad tile {s:?}; expected AxB")),
    }
}
