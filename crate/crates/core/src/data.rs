//! Manifest loading and pairwise (clean, distorted) batch assembly.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distortion::{compose_pipeline, distort, DistortionConfig, DistortionPipeline};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{child_rng, hash64};
use crate::size_augment::{random_crop_resize, resize, AugTrace, InterpMode, SizeAugConfig};
use crate::tensor::Tensor;

pub const REAL: usize = 0;
pub const FAKE: usize = 1;

/// Redraws allowed per batch slot when a file fails to decode.
const DECODE_RETRIES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val1,
    Val2,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val1" => Some(Split::Val1),
            "val2" => Some(Split::Val2),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val1 => "val1",
            Split::Val2 => "val2",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub entries: Vec<DatasetEntry>,
    /// Entry count per label, `[real, fake]`.
    pub counts: [usize; 2],
    by_label: [Vec<usize>; 2],
}

impl DatasetIndex {
    pub fn new(entries: Vec<DatasetEntry>) -> Result<Self> {
        let mut by_label = [Vec::new(), Vec::new()];
        for (i, e) in entries.iter().enumerate() {
            if e.label > 1 {
                return Err(Error::Contract(format!("label {} is not binary", e.label)));
            }
            by_label[e.label].push(i);
        }
        Ok(Self {
            counts: [by_label[0].len(), by_label[1].len()],
            entries,
            by_label,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries carrying `split`; untagged entries are kept.
    pub fn filter_split(&self, split: Split) -> Result<Self> {
        Self::new(
            self.entries
                .iter()
                .filter(|e| e.split.is_none_or(|s| s == split))
                .cloned()
                .collect(),
        )
    }

    pub fn load_image(&self, i: usize) -> Result<Image> {
        Image::load(&self.entries[i].path)
    }
}

/// Reads a `path,label[,split]` CSV. Relative paths resolve against
/// `data_root` when given, else against the manifest's directory.
pub fn load_manifest(path: &Path, data_root: Option<&Path>) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = match data_root {
        Some(r) => r.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let bad = |line: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let header = loop {
        match lines.next() {
            Some((_, "")) => continue,
            Some((n, h)) => break (n, h),
            None => return Err(bad(1, "empty manifest".into())),
        }
    };
    let cols: Vec<&str> = header.1.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "path" || cols[1] != "label" || cols.get(2).is_some_and(|c| *c != "split") || cols.len() > 3 {
        return Err(bad(header.0, format!("expected header `path,label[,split]`, got `{}`", header.1)));
    }
    let mut entries = Vec::new();
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(bad(n, format!("expected {} fields, found {}", cols.len(), fields.len())));
        }
        let label = match fields[1] {
            "0" => REAL,
            "1" => FAKE,
            other => return Err(bad(n, format!("label `{other}` is not 0 or 1"))),
        };
        let split = match fields.get(2) {
            Some(s) => Some(Split::parse(s).ok_or_else(|| bad(n, format!("unknown split `{s}`")))?),
            None => None,
        };
        if fields[0].is_empty() {
            return Err(bad(n, "empty path".into()));
        }
        let p = Path::new(fields[0]);
        let full = if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        if !full.is_file() {
            return Err(bad(n, format!("no such file {}", full.display())));
        }
        entries.push(DatasetEntry { path: full, label, split });
    }
    if entries.is_empty() {
        return Err(bad(header.0, "manifest has no rows".into()));
    }
    DatasetIndex::new(entries)
}

/// Per-channel normalization constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("data: std must be positive and mean finite".into()));
        }
        Ok(())
    }
}

/// Bilinear resize to `s x s`, channel-first, normalized.
pub fn to_model_input(img: &Image, s: usize, norm: &DataConfig) -> Result<Tensor> {
    let c = img.channels();
    if c != 3 {
        return Err(Error::Contract(format!("model input needs 3 channels, got {c}")));
    }
    let r = if img.width() == s && img.height() == s {
        img.clone()
    } else {
        resize(img, s, s, InterpMode::Linear)?
    };
    let mut data = vec![0.0; c * s * s];
    for (i, px) in r.data().chunks_exact(c).enumerate() {
        for ch in 0..c {
            data[ch * s * s + i] = (px[ch] - norm.mean[ch]) / norm.std[ch];
        }
    }
    Tensor::new(vec![c, s, s], data)
}

/// Everything needed to turn a source image into a training pair.
#[derive(Clone, Debug)]
pub struct AugSettings {
    pub size_aug: SizeAugConfig,
    pub distortion: DistortionConfig,
    pub norm: DataConfig,
    pub input_size: usize,
}

#[derive(Clone, Debug)]
pub struct PairBatch {
    /// `[B, C, S, S]` clean inputs.
    pub x: Tensor,
    /// `[B, C, S, S]` distorted counterparts, row-aligned with `x`.
    pub x_hat: Tensor,
    pub y: Vec<usize>,
    pub pipelines: Vec<DistortionPipeline>,
    pub traces: Vec<AugTrace>,
    pub sources: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Stable digest of slot `i`'s source path.
    pub fn source_hash(&self, index: &DatasetIndex, i: usize) -> u64 {
        let mut h = DefaultHasher::new();
        index.entries[self.sources[i]].path.hash(&mut h);
        h.finish()
    }
}

struct Slot {
    x: Tensor,
    x_hat: Tensor,
    y: usize,
    pipeline: DistortionPipeline,
    trace: AugTrace,
    source: usize,
}

/// Draws a label with probability 1/2 each, then an entry of that label.
pub fn balanced_pick<R: Rng + ?Sized>(index: &DatasetIndex, rng: &mut R) -> Result<usize> {
    if index.is_empty() {
        return Err(Error::Contract("cannot sample from an empty index".into()));
    }
    let mut label = if rng.random::<bool>() { FAKE } else { REAL };
    if index.by_label[label].is_empty() {
        label = 1 - label;
    }
    let pool = &index.by_label[label];
    Ok(pool[rng.random_range(0..pool.len())])
}

fn build_slot(index: &DatasetIndex, aug: &AugSettings, seed: u64) -> Result<Slot> {
    let mut rng = child_rng(seed, 0);
    let mut last_err = None;
    for _ in 0..=DECODE_RETRIES {
        let i = balanced_pick(index, &mut rng)?;
        let img = match index.load_image(i) {
            Ok(img) => img,
            Err(e) => {
                warn!("skipping {}: {e}", index.entries[i].path.display());
                last_err = Some(e);
                continue;
            }
        };
        let (clean, trace) = if aug.size_aug.enabled {
            random_crop_resize(&img, &aug.size_aug, &mut rng)?
        } else {
            (img, AugTrace::Identity)
        };
        let pipeline = compose_pipeline(
            &aug.distortion.catalog,
            aug.distortion.k_range(),
            &aug.distortion.sampler(),
            &mut rng,
        )?;
        let dirty = distort(&clean, &pipeline, &aug.distortion.tables)?;
        return Ok(Slot {
            x: to_model_input(&clean, aug.input_size, &aug.norm)?,
            x_hat: to_model_input(&dirty, aug.input_size, &aug.norm)?,
            y: index.entries[i].label,
            pipeline,
            trace,
            source: i,
        });
    }
    Err(last_err.unwrap_or_else(|| Error::Contract("decode retry budget exhausted".into())))
}

/// Assembles `b` aligned pairs. Slot `j` depends only on `hash64(seed, j)`,
/// so the batch does not depend on how many workers build it.
pub fn build_pair_batch(index: &DatasetIndex, b: usize, aug: &AugSettings, seed: u64) -> Result<PairBatch> {
    if b == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let slots: Vec<Slot> = (0..b)
        .into_par_iter()
        .map(|j| build_slot(index, aug, hash64(seed, j as u64)))
        .collect::<Result<_>>()?;
    let s = aug.input_size;
    let mut x = Vec::with_capacity(b * 3 * s * s);
    let mut x_hat = Vec::with_capacity(b * 3 * s * s);
    let mut out = PairBatch {
        x: Tensor::scalar(0.0),
        x_hat: Tensor::scalar(0.0),
        y: Vec::with_capacity(b),
        pipelines: Vec::with_capacity(b),
        traces: Vec::with_capacity(b),
        sources: Vec::with_capacity(b),
    };
    for slot in slots {
        x.extend_from_slice(slot.x.data());
        x_hat.extend_from_slice(slot.x_hat.data());
        out.y.push(slot.y);
        out.pipelines.push(slot.pipeline);
        out.traces.push(slot.trace);
        out.sources.push(slot.source);
    }
    out.x = Tensor::new(vec![b, 3, s, s], x)?;
    out.x_hat = Tensor::new(vec![b, 3, s, s], x_hat)?;
    Ok(out)
}
