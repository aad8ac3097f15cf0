use serde::{Deserialize, Serialize};

use super::catalog::{DistortionKind, DistortionTables};
use super::pipeline::KRange;
use super::sampler::LevelSampler;
use crate::error::{Error, Result};

/// Training-time distortion settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistortionConfig {
    pub mu: f64,
    pub sigma: f64,
    pub kmin: usize,
    pub kmax: usize,
    /// Kinds eligible for composites. Empty disables distortion.
    pub catalog: Vec<DistortionKind>,
    pub tables: DistortionTables,
}

impl Default for DistortionConfig {
    fn default() -> Self {
        Self {
            mu: 3.0,
            sigma: 1.0,
            kmin: 1,
            kmax: 3,
            catalog: DistortionKind::ALL.to_vec(),
            tables: DistortionTables::default(),
        }
    }
}

impl DistortionConfig {
    pub fn sampler(&self) -> LevelSampler {
        LevelSampler {
            mu: self.mu,
            sigma: self.sigma,
            levels: 5,
        }
    }

    pub fn k_range(&self) -> KRange {
        KRange {
            kmin: self.kmin,
            kmax: self.kmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler()
            .validate()
            .map_err(|e| Error::Config(format!("distortion: {e}")))?;
        if self.kmin > self.kmax {
            return Err(Error::Config(format!(
                "distortion: kmin {} exceeds kmax {}",
                self.kmin, self.kmax
            )));
        }
        if !self.catalog.is_empty() {
            self.k_range().validate(self.catalog.len())?;
        }
        self.tables.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_bad_ranges_do_not() {
        DistortionConfig::default().validate().unwrap();
        let bad = DistortionConfig { kmin: 3, kmax: 1, ..Default::default() };
        assert!(bad.validate().unwrap_err().is_config());
        let bad = DistortionConfig { sigma: 0.0, ..Default::default() };
        assert!(bad.validate().unwrap_err().is_config());
        let off = DistortionConfig { catalog: vec![], ..Default::default() };
        off.validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: DistortionConfig = serde_json::from_str(r#"{"sigma":2.0,"tables":{"jpeg_quality":[90,70,50,30,10]}}"#).unwrap();
        assert_eq!(c.sigma, 2.0);
        assert_eq!(c.kmax, 3);
        assert_eq!(c.tables.jpeg_quality[2], 50);
        assert_eq!(c.tables.quantize_bits, [6, 5, 4, 3, 2]);
        assert!(serde_json::from_str::<DistortionConfig>(r#"{"sigmaa":2.0}"#).is_err());
    }
}
