//! The fourteen training distortions, their families and the level tables
//! that turn a `(kind, level)` pair into concrete parameters.

use serde::{Deserialize, Serialize};

use super::ops::Distortion;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DistortionKind {
    GaussianBlur,
    LensBlur,
    GaussianNoise,
    ImpulseNoise,
    SpeckleNoise,
    ColorShift,
    ColorJitter,
    Moire,
    ToneCurve,
    Brighten,
    Darken,
    JpegCompress,
    Quantize,
    SpatialJitter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Blur,
    Noise,
    Color,
    Brightness,
    Compression,
    Spatial,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 14] = [
        DistortionKind::GaussianBlur,
        DistortionKind::LensBlur,
        DistortionKind::GaussianNoise,
        DistortionKind::ImpulseNoise,
        DistortionKind::SpeckleNoise,
        DistortionKind::ColorShift,
        DistortionKind::ColorJitter,
        DistortionKind::Moire,
        DistortionKind::ToneCurve,
        DistortionKind::Brighten,
        DistortionKind::Darken,
        DistortionKind::JpegCompress,
        DistortionKind::Quantize,
        DistortionKind::SpatialJitter,
    ];

    pub fn family(self) -> Family {
        use DistortionKind::*;
        match self {
            GaussianBlur | LensBlur => Family::Blur,
            GaussianNoise | ImpulseNoise | SpeckleNoise => Family::Noise,
            ColorShift | ColorJitter | Moire | ToneCurve => Family::Color,
            Brighten | Darken => Family::Brightness,
            JpegCompress | Quantize => Family::Compression,
            SpatialJitter => Family::Spatial,
        }
    }

    pub fn name(self) -> &'static str {
        use DistortionKind::*;
        match self {
            GaussianBlur => "GaussianBlur",
            LensBlur => "LensBlur",
            GaussianNoise => "GaussianNoise",
            ImpulseNoise => "ImpulseNoise",
            SpeckleNoise => "SpeckleNoise",
            ColorShift => "ColorShift",
            ColorJitter => "ColorJitter",
            Moire => "Moire",
            ToneCurve => "ToneCurve",
            Brighten => "Brighten",
            Darken => "Darken",
            JpegCompress => "JpegCompress",
            Quantize => "Quantize",
            SpatialJitter => "SpatialJitter",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Contract(format!("unknown distortion kind {s:?}")))
    }
}

/// Per-level parameters for every kind; index 0 is level 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistortionTables {
    pub gaussian_blur_sigma: [f64; 5],
    pub lens_blur_radius: [f64; 5],
    pub gaussian_noise_std: [f64; 5],
    pub impulse_rate: [f64; 5],
    pub speckle_variance: [f64; 5],
    pub color_shift_max: [f64; 5],
    pub color_jitter_band: [f64; 5],
    pub moire_amplitude: [f64; 5],
    pub tone_gain: [f64; 5],
    /// Brighten uses these exponents, Darken their reciprocals.
    pub brighten_gamma: [f64; 5],
    pub jpeg_quality: [u8; 5],
    pub quantize_bits: [u32; 5],
    pub jitter_max_shift: [usize; 5],
}

impl Default for DistortionTables {
    fn default() -> Self {
        Self {
            gaussian_blur_sigma: [0.5, 1.0, 1.5, 2.0, 2.5],
            lens_blur_radius: [1.0, 2.0, 3.0, 4.0, 5.0],
            gaussian_noise_std: [0.02, 0.05, 0.08, 0.12, 0.18],
            impulse_rate: [0.01, 0.03, 0.06, 0.10, 0.15],
            speckle_variance: [0.05, 0.10, 0.20, 0.35, 0.50],
            color_shift_max: [0.02, 0.05, 0.08, 0.12, 0.16],
            color_jitter_band: [0.05, 0.1, 0.2, 0.3, 0.4],
            moire_amplitude: [0.02, 0.04, 0.06, 0.09, 0.12],
            tone_gain: [1.5, 2.5, 3.5, 5.0, 7.0],
            brighten_gamma: [0.8, 0.65, 0.5, 0.4, 0.3],
            jpeg_quality: [80, 60, 45, 30, 18],
            quantize_bits: [6, 5, 4, 3, 2],
            jitter_max_shift: [1, 2, 3, 4, 5],
        }
    }
}

impl DistortionTables {
    /// Concrete parameters for `kind` at `level`; level 0 maps to identity.
    pub fn resolve(&self, kind: DistortionKind, level: u8) -> Result<Distortion> {
        use DistortionKind::*;
        if level == 0 {
            return Ok(Distortion::Identity);
        }
        if level > 5 {
            return Err(Error::Contract(format!("level {level} outside [1, 5]")));
        }
        let i = level as usize - 1;
        let d = match kind {
            GaussianBlur => Distortion::gaussian_blur(self.gaussian_blur_sigma[i]),
            LensBlur => Distortion::LensBlur {
                radius: self.lens_blur_radius[i],
            },
            GaussianNoise => Distortion::GaussianNoise {
                std: self.gaussian_noise_std[i],
            },
            ImpulseNoise => Distortion::ImpulseNoise {
                rate: self.impulse_rate[i],
            },
            SpeckleNoise => Distortion::SpeckleNoise {
                variance: self.speckle_variance[i],
            },
            ColorShift => Distortion::ColorShift {
                max_offset: self.color_shift_max[i],
            },
            ColorJitter => Distortion::ColorJitter {
                band: self.color_jitter_band[i],
            },
            Moire => Distortion::Moire {
                amplitude: self.moire_amplitude[i],
            },
            ToneCurve => Distortion::ToneCurve {
                gain: self.tone_gain[i],
            },
            Brighten => Distortion::Gamma {
                gamma: self.brighten_gamma[i],
            },
            Darken => Distortion::Gamma {
                gamma: 1.0 / self.brighten_gamma[i],
            },
            JpegCompress => Distortion::Jpeg {
                quality: self.jpeg_quality[i],
            },
            Quantize => Distortion::Quantize {
                bits: self.quantize_bits[i],
            },
            SpatialJitter => Distortion::SpatialJitter {
                max_shift: self.jitter_max_shift[i],
            },
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        for kind in DistortionKind::ALL {
            for level in 1..=5 {
                self.resolve(kind, level)
                    .map_err(|e| Error::Config(format!("table for {}: {e}", kind.name())))?;
            }
        }
        Ok(())
    }
}

/// One distortion kind at one severity level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub level: u8,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, level: u8) -> Result<Self> {
        let s = Self { kind, level };
        s.validate()?;
        Ok(s)
    }

    /// Level-0 spec that leaves images untouched. Test hook only: normal
    /// construction and parsing reject level 0.
    #[doc(hidden)]
    pub fn identity_hook(kind: DistortionKind) -> Self {
        Self { kind, level: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.level) {
            return Err(Error::Contract(format!(
                "{} level {} outside [1, 5]",
                self.kind.name(),
                self.level
            )));
        }
        Ok(())
    }
}
