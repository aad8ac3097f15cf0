//! Accuracy, ROC AUC and per-profile evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{to_model_input, DataConfig, DatasetIndex, FAKE};
use crate::distortion::{DistortionTables, EvalProfile, KRange};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{ForwardOptions, Model};
use crate::tensor::Tensor;

/// Area under the ROC curve as the Mann-Whitney statistic: the share of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("auc over NaN scores".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("auc: label {l} is not binary")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("auc needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the pair count, so ties stay integral
    let mut twice: u128 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice += 2 * p as u128 * neg_below as u128 + p as u128 * n as u128;
        neg_below += n;
        i = j;
    }
    Ok(twice as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Share of samples where `score >= threshold` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[usize], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "accuracy: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Fake-class probability from `[B, 2]` logits.
pub fn fake_scores(logits: &Tensor) -> Vec<f64> {
    (0..logits.shape()[0])
        .map(|r| {
            let row = logits.row(r);
            1.0 / (1.0 + (row[1 - FAKE] - row[FAKE]).exp())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileMetrics {
    pub acc: f64,
    pub auc: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Pooled over every profile.
    pub acc: f64,
    pub auc: f64,
    pub n: usize,
    pub threshold: f64,
    /// Rows in profile order.
    pub profiles: Vec<String>,
    pub per_profile: BTreeMap<String, ProfileMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>7} {:>8} {:>8}", "profile", "n", "acc", "auc");
        for name in &self.profiles {
            let m = &self.per_profile[name];
            let _ = writeln!(s, "{:<12} {:>7} {:>8.4} {:>8.4}", name, m.n, m.acc, m.auc);
        }
        let _ = writeln!(s, "{:<12} {:>7} {:>8.4} {:>8.4}", "all", self.n, self.acc, self.auc);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Profiles reported by `eval`.
    pub profiles: Vec<String>,
    /// Profiles whose mean AUC picks the best checkpoint during training.
    pub val_profiles: Vec<String>,
    pub batch_size: usize,
    pub threshold: f64,
    /// Send every input through the corrector at inference.
    pub corrector: bool,
    /// Composite size for the `hard` profile.
    pub hard_kmin: usize,
    pub hard_kmax: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            profiles: ["clean", "jpeg50", "blur7", "noise25", "hard"].map(String::from).to_vec(),
            val_profiles: ["clean", "hard"].map(String::from).to_vec(),
            batch_size: 32,
            threshold: 0.5,
            corrector: true,
            hard_kmin: 1,
            hard_kmax: 3,
        }
    }
}

impl EvalConfig {
    pub fn hard_range(&self) -> KRange {
        KRange {
            kmin: self.hard_kmin,
            kmax: self.hard_kmax,
        }
    }

    pub fn resolve(&self, names: &[String]) -> Result<Vec<EvalProfile>> {
        EvalProfile::parse_list(&names.join(","), self.hard_range())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("eval: batch_size must be positive".into()));
        }
        self.resolve(&self.profiles)?;
        self.resolve(&self.val_profiles)?;
        Ok(())
    }
}

/// Inputs to [`evaluate`] beyond the model and data.
#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub seed: u64,
    pub norm: DataConfig,
    pub tables: DistortionTables,
    pub batch_size: usize,
    pub threshold: f64,
    pub corrector: bool,
}

/// Round trip through 8-bit storage, as if the distorted image were saved.
fn store_u8(img: &Image) -> Result<Image> {
    Image::from_u8(img.width(), img.height(), img.channels(), &img.to_u8())
}

/// Scores for every entry of `index` under `profile`, in index order.
pub fn score_profile(model: &Model, index: &DatasetIndex, profile: &EvalProfile, st: &EvalSettings) -> Result<Vec<f64>> {
    let s = model.config().input_size;
    let opts = ForwardOptions {
        lora: true,
        corrector: st.corrector,
    };
    let chunks: Vec<Vec<usize>> = (0..index.len())
        .collect::<Vec<_>>()
        .chunks(st.batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    let parts: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|ids| -> Result<Vec<f64>> {
            let mut data = Vec::with_capacity(ids.len() * 3 * s * s);
            for &i in ids {
                let img = index.load_image(i)?;
                let img = if profile.is_identity() {
                    img
                } else {
                    store_u8(&profile.apply(&img, st.seed, i as u64, &st.tables)?)?
                };
                data.extend_from_slice(to_model_input(&img, s, &st.norm)?.data());
            }
            let x = Tensor::new(vec![ids.len(), 3, s, s], data)?;
            Ok(fake_scores(&model.logits(&x, opts)?))
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// Runs every profile over the index. A `clean` row is always present.
pub fn evaluate(model: &Model, index: &DatasetIndex, profiles: &[EvalProfile], st: &EvalSettings) -> Result<MetricsReport> {
    if index.is_empty() {
        return Err(Error::Contract("evaluate on an empty manifest".into()));
    }
    let mut list: Vec<EvalProfile> = Vec::new();
    if !profiles.iter().any(|p| p.name == "clean") {
        list.push(EvalProfile::clean());
    }
    list.extend(profiles.iter().cloned());
    let labels: Vec<usize> = index.entries.iter().map(|e| e.label).collect();
    let mut per_profile = BTreeMap::new();
    let mut names = Vec::new();
    let (mut all_scores, mut all_labels) = (Vec::new(), Vec::new());
    for p in &list {
        let scores = score_profile(model, index, p, st)?;
        per_profile.insert(
            p.name.clone(),
            ProfileMetrics {
                acc: accuracy(&scores, &labels, st.threshold)?,
                auc: auc(&scores, &labels)?,
                n: scores.len(),
            },
        );
        names.push(p.name.clone());
        all_scores.extend(scores);
        all_labels.extend_from_slice(&labels);
    }
    Ok(MetricsReport {
        acc: accuracy(&all_scores, &all_labels, st.threshold)?,
        auc: auc(&all_scores, &all_labels)?,
        n: all_scores.len(),
        threshold: st.threshold,
        profiles: names,
        per_profile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute(scores: &[f64], labels: &[usize]) -> f64 {
        let (mut twice, mut pairs) = (0u64, 0u64);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1;
                    twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.3, 0.8, 0.2], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.4; 6], &[1, 0, 1, 0, 1, 0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(auc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.1, 0.9], &[1, 0], 0.5).unwrap(), 0.0);
        assert_eq!(accuracy(&[0.9, 0.1, 0.6, 0.7], &[1, 0, 0, 1], 0.5).unwrap(), 0.75);
        assert!(accuracy(&[], &[], 0.5).is_err());
    }

    #[test]
    fn auc_matches_brute_force_with_ties() {
        let mut rng = rng_from_seed(17);
        for _ in 0..200 {
            let n = rng.random_range(2..120);
            let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
            assert_eq!(auc(&scores, &labels).unwrap(), brute(&scores, &labels));
        }
    }

    #[test]
    fn fake_score_is_softmax_probability() {
        let l = Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 3.0]]);
        let s = fake_scores(&l);
        assert_eq!(s[0], 0.5);
        assert!((s[1] - 3f64.exp() / (1f64.exp() + 3f64.exp())).abs() < 1e-15);
    }

    #[test]
    fn report_table_lists_rows_in_order() {
        let mut per = BTreeMap::new();
        per.insert("clean".to_string(), ProfileMetrics { acc: 1.0, auc: 1.0, n: 4 });
        per.insert("blur7".to_string(), ProfileMetrics { acc: 0.5, auc: 0.75, n: 4 });
        let r = MetricsReport {
            acc: 0.75,
            auc: 0.9,
            n: 8,
            threshold: 0.5,
            profiles: vec!["clean".into(), "blur7".into()],
            per_profile: per,
        };
        let t = r.to_table();
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[1].starts_with("clean") && lines[2].starts_with("blur7") && lines[3].starts_with("all"));
        let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn auc_is_rank_based(scores in prop::collection::vec(-5.0f64..5.0, 4..60), seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let mut labels: Vec<usize> = scores.iter().map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let a = auc(&scores, &labels).unwrap();
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + s.powi(3)).collect();
            prop_assert_eq!(a, auc(&warped, &labels).unwrap());
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((a + auc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
