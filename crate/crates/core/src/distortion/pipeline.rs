//! Random combinational pipelines: an ordered list of distinct kinds, each at
//! a sampled level, plus the seed that drives their random draws.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::catalog::{DistortionKind, DistortionSpec, DistortionTables};
use super::sampler::LevelSampler;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::rng_from_seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistortionPipeline {
    pub seed: u64,
    pub specs: Vec<DistortionSpec>,
}

impl DistortionPipeline {
    /// A pipeline that applies nothing.
    pub fn disabled(seed: u64) -> Self {
        Self { seed, specs: Vec::new() }
    }

    pub fn is_identity(&self) -> bool {
        self.specs.is_empty()
    }

    /// Checks levels and that no kind repeats. Length bounds are the
    /// composer's business, so an empty pipeline is accepted here.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.specs.iter().enumerate() {
            if s.level != 0 {
                s.validate()?;
            }
            if self.specs[..i].iter().any(|p| p.kind == s.kind) {
                return Err(Error::Contract(format!(
                    "pipeline repeats {}",
                    s.kind.name()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn describe(&self) -> String {
        if self.specs.is_empty() {
            return "identity".into();
        }
        self.specs
            .iter()
            .map(|s| format!("{}@{}", s.kind.name(), s.level))
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// How many kinds go into one composite, drawn uniformly from `[kmin, kmax]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KRange {
    pub kmin: usize,
    pub kmax: usize,
}

impl Default for KRange {
    fn default() -> Self {
        Self { kmin: 1, kmax: 3 }
    }
}

impl KRange {
    pub fn validate(&self, catalog_len: usize) -> Result<()> {
        if self.kmin > self.kmax {
            return Err(Error::Config(format!(
                "kmin {} exceeds kmax {}",
                self.kmin, self.kmax
            )));
        }
        if self.kmin == 0 && catalog_len > 0 {
            return Err(Error::Config("kmin must be at least 1".into()));
        }
        if self.kmax > catalog_len {
            return Err(Error::Config(format!(
                "kmax {} exceeds catalog size {catalog_len}",
                self.kmax
            )));
        }
        Ok(())
    }
}

/// Samples `k`, then `k` distinct kinds in random order, then a level each.
/// An empty catalog yields a disabled pipeline.
pub fn compose_pipeline<R: Rng + ?Sized>(
    catalog: &[DistortionKind],
    k: KRange,
    sampler: &LevelSampler,
    rng: &mut R,
) -> Result<DistortionPipeline> {
    if catalog.is_empty() {
        if k.kmin > k.kmax {
            return Err(Error::Config(format!("kmin {} exceeds kmax {}", k.kmin, k.kmax)));
        }
        return Ok(DistortionPipeline::disabled(rng.random()));
    }
    k.validate(catalog.len())?;
    sampler.validate()?;
    let mut pool = catalog.to_vec();
    pool.sort();
    pool.dedup();
    if pool.len() != catalog.len() {
        return Err(Error::Config("catalog lists a kind twice".into()));
    }
    let n = rng.random_range(k.kmin..=k.kmax);
    // partial Fisher-Yates: the first n slots are the draw, in draw order
    for i in 0..n {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let specs = pool[..n]
        .iter()
        .map(|&kind| DistortionSpec {
            kind,
            level: sampler.sample(rng),
        })
        .collect();
    Ok(DistortionPipeline {
        seed: rng.random(),
        specs,
    })
}

/// Composite where every kind runs at one fixed level.
pub fn compose_fixed_level<R: Rng + ?Sized>(
    catalog: &[DistortionKind],
    k: KRange,
    level: u8,
    rng: &mut R,
) -> Result<DistortionPipeline> {
    let mut p = compose_pipeline(catalog, k, &LevelSampler::default(), rng)?;
    for s in &mut p.specs {
        s.level = level;
        s.validate()?;
    }
    Ok(p)
}

pub fn apply_distortion<R: Rng + ?Sized>(
    img: &Image,
    spec: &DistortionSpec,
    tables: &DistortionTables,
    rng: &mut R,
) -> Result<Image> {
    tables.resolve(spec.kind, spec.level)?.apply(img, rng)
}

/// Applies the pipeline in order with one rng seeded from `pipeline.seed`.
pub fn distort(img: &Image, pipeline: &DistortionPipeline, tables: &DistortionTables) -> Result<Image> {
    pipeline.validate()?;
    let mut rng = rng_from_seed(pipeline.seed);
    let mut cur = img.clone();
    for spec in &pipeline.specs {
        cur = apply_distortion(&cur, spec, tables, &mut rng)?;
    }
    Ok(cur)
}
