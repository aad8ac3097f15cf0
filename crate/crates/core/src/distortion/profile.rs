//! Named evaluation profiles: fixed distortions with explicit parameters, or
//! a fixed-level composite standing in for a hard test set.

use serde::{Deserialize, Serialize};

use super::catalog::{DistortionKind, DistortionTables};
use super::ops::Distortion;
use super::pipeline::{compose_fixed_level, distort, KRange};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{child_rng, hash64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProfileKind {
    /// Applied in order; random ops draw from a per-image stream.
    Fixed { ops: Vec<Distortion> },
    /// A fresh composite per image, every kind at `level`.
    Composite { level: u8, kmin: usize, kmax: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProfile {
    pub name: String,
    #[serde(flatten)]
    pub kind: ProfileKind,
}

impl EvalProfile {
    pub fn clean() -> Self {
        Self::fixed("clean", vec![])
    }

    pub fn fixed(name: &str, ops: Vec<Distortion>) -> Self {
        Self {
            name: name.into(),
            kind: ProfileKind::Fixed { ops },
        }
    }

    pub fn hard(kmin: usize, kmax: usize) -> Self {
        Self {
            name: "hard".into(),
            kind: ProfileKind::Composite { level: 5, kmin, kmax },
        }
    }

    /// Built-in profiles by name. `hard` takes its composite size from `k`.
    pub fn builtin(name: &str, k: KRange) -> Result<Self> {
        let p = match name {
            "clean" => Self::clean(),
            "jpeg50" | "tab7-jpeg50" => Self::fixed("jpeg50", vec![Distortion::Jpeg { quality: 50 }]),
            "blur7" | "tab7-blur" => Self::fixed(
                "blur7",
                vec![Distortion::GaussianBlur { sigma: 2.0, kernel: 7 }],
            ),
            "noise25" | "tab7-noise" => Self::fixed(
                "noise25",
                vec![Distortion::SpeckleNoise { variance: 0.25 }],
            ),
            "hard" => Self::hard(k.kmin, k.kmax),
            _ => {
                return Err(Error::Config(format!(
                    "unknown profile {name:?} (expected clean, jpeg50, blur7, noise25, hard)"
                )))
            }
        };
        p.validate()?;
        Ok(p)
    }

    /// Parses a comma-separated profile list; `clean` is always included first.
    pub fn parse_list(spec: &str, k: KRange) -> Result<Vec<Self>> {
        let mut out = vec![Self::clean()];
        for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let p = Self::builtin(name, k)?;
            if !out.iter().any(|q| q.name == p.name) {
                out.push(p);
            }
        }
        Ok(out)
    }

    pub fn is_identity(&self) -> bool {
        matches!(&self.kind, ProfileKind::Fixed { ops } if ops.iter().all(|o| *o == Distortion::Identity))
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            ProfileKind::Fixed { ops } => ops.iter().try_for_each(|o| o.validate()),
            ProfileKind::Composite { level, kmin, kmax } => {
                if !(1..=5).contains(level) {
                    return Err(Error::Config(format!("profile {} level {level} outside [1, 5]", self.name)));
                }
                KRange { kmin: *kmin, kmax: *kmax }.validate(DistortionKind::ALL.len())
            }
        }
    }

    /// Distorts image `index` of an evaluation set; a pure function of
    /// `(img, seed, index)`.
    pub fn apply(&self, img: &Image, seed: u64, index: u64, tables: &DistortionTables) -> Result<Image> {
        let s = hash64(seed, index);
        match &self.kind {
            ProfileKind::Fixed { ops } => {
                let mut rng = child_rng(s, 0);
                let mut cur = img.clone();
                for op in ops {
                    cur = op.apply(&cur, &mut rng)?;
                }
                Ok(cur)
            }
            ProfileKind::Composite { level, kmin, kmax } => {
                let mut rng = child_rng(s, 1);
                let p = compose_fixed_level(
                    &DistortionKind::ALL,
                    KRange { kmin: *kmin, kmax: *kmax },
                    *level,
                    &mut rng,
                )?;
                distort(img, &p, tables)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_resolve_with_aliases() {
        let k = KRange::default();
        assert_eq!(EvalProfile::builtin("tab7-jpeg50", k).unwrap().name, "jpeg50");
        assert_eq!(EvalProfile::builtin("tab7-blur", k).unwrap().name, "blur7");
        assert_eq!(EvalProfile::builtin("tab7-noise", k).unwrap().name, "noise25");
        assert!(EvalProfile::builtin("fog", k).unwrap_err().is_config());
    }

    #[test]
    fn list_always_starts_with_clean() {
        let ps = EvalProfile::parse_list("jpeg50,blur7,clean,noise25", KRange::default()).unwrap();
        let names: Vec<_> = ps.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["clean", "jpeg50", "blur7", "noise25"]);
        assert!(ps[0].is_identity());
    }

    #[test]
    fn profiles_are_deterministic_per_index() {
        let img = Image::from_fn(16, 16, 3, |x, y, c| ((x + 2 * y + c) % 9) as f64 / 8.0);
        let t = DistortionTables::default();
        for p in [EvalProfile::hard(1, 3), EvalProfile::builtin("noise25", KRange::default()).unwrap()] {
            let a = p.apply(&img, 7, 3, &t).unwrap();
            assert_eq!(a, p.apply(&img, 7, 3, &t).unwrap());
            assert_ne!(a, p.apply(&img, 7, 4, &t).unwrap());
        }
    }

    #[test]
    fn profile_json_round_trip() {
        let p = EvalProfile::hard(2, 3);
        let js = serde_json::to_string(&p).unwrap();
        assert_eq!(js, r#"{"name":"hard","type":"composite","level":5,"kmin":2,"kmax":3}"#);
        assert_eq!(serde_json::from_str::<EvalProfile>(&js).unwrap(), p);
    }
}
