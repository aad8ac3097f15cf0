//! Parameterized distortion kernels. Every kernel maps a valid image to a
//! valid image of the same shape; random kinds draw only from the supplied rng.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::jpeg::jpeg_compress;
use crate::error::{Error, Result};
use crate::image::Image;

/// A fully parameterized distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Distortion {
    Identity,
    GaussianBlur { sigma: f64, kernel: usize },
    /// Normalized disc kernel.
    LensBlur { radius: f64 },
    GaussianNoise { std: f64 },
    /// Salt-and-pepper on whole pixels, half salt and half pepper.
    ImpulseNoise { rate: f64 },
    /// `out = in * (1 + e)`, `e ~ N(0, variance)`.
    SpeckleNoise { variance: f64 },
    ColorShift { max_offset: f64 },
    ColorJitter { band: f64 },
    Moire { amplitude: f64 },
    ToneCurve { gain: f64 },
    /// `out = in^gamma`.
    Gamma { gamma: f64 },
    Jpeg { quality: u8 },
    /// Posterize to `bits` bits per channel.
    Quantize { bits: u32 },
    SpatialJitter { max_shift: usize },
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

impl Distortion {
    /// Gaussian blur with the `2 * ceil(3 sigma) + 1` kernel width.
    pub fn gaussian_blur(sigma: f64) -> Self {
        Distortion::GaussianBlur {
            sigma,
            kernel: 2 * (3.0 * sigma).ceil() as usize + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Contract(format!("invalid {what} in {self:?}")));
        match *self {
            Distortion::Identity => Ok(()),
            Distortion::GaussianBlur { sigma, kernel } => {
                if !(sigma > 0.0) || kernel % 2 == 0 {
                    bad("sigma/kernel (kernel must be odd)")
                } else {
                    Ok(())
                }
            }
            Distortion::LensBlur { radius } if !(radius >= 0.0 && radius <= 64.0) => bad("radius"),
            Distortion::GaussianNoise { std } if !(std >= 0.0 && std.is_finite()) => bad("std"),
            Distortion::ImpulseNoise { rate } if !(0.0..=1.0).contains(&rate) => bad("rate"),
            Distortion::SpeckleNoise { variance } if !(variance >= 0.0 && variance.is_finite()) => {
                bad("variance")
            }
            Distortion::ColorShift { max_offset } if !(0.0..=1.0).contains(&max_offset) => {
                bad("max_offset")
            }
            Distortion::ColorJitter { band } if !(0.0..1.0).contains(&band) => bad("band"),
            Distortion::Moire { amplitude } if !(0.0..=1.0).contains(&amplitude) => {
                bad("amplitude")
            }
            Distortion::ToneCurve { gain } if !(gain > 0.0 && gain.is_finite()) => bad("gain"),
            Distortion::Gamma { gamma } if !(gamma > 0.0 && gamma.is_finite()) => bad("gamma"),
            Distortion::Jpeg { quality } if !(1..=100).contains(&quality) => bad("quality"),
            Distortion::Quantize { bits } if !(1..=8).contains(&bits) => bad("bits"),
            _ => Ok(()),
        }
    }

    /// Applies the distortion. The input must hold channels in `[0, 1]`.
    pub fn apply<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> Result<Image> {
        self.validate()?;
        if !img.is_valid() {
            return Err(Error::Contract(
                "distortion input must be finite with channels in [0, 1]".into(),
            ));
        }
        let mut out = match *self {
            Distortion::Identity => img.clone(),
            Distortion::GaussianBlur { sigma, kernel } => {
                let half = (kernel / 2) as isize;
                let mut k: Vec<f64> = (-half..=half)
                    .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
                    .collect();
                let s: f64 = k.iter().sum();
                k.iter_mut().for_each(|v| *v /= s);
                convolve_separable(img, &k)
            }
            Distortion::LensBlur { radius } => disc_blur(img, radius),
            Distortion::GaussianNoise { std } => {
                let mut o = img.clone();
                if std > 0.0 {
                    let n = Normal::new(0.0, std).expect("std validated");
                    o.data_mut().iter_mut().for_each(|v| *v += n.sample(rng));
                }
                o
            }
            Distortion::ImpulseNoise { rate } => {
                let mut o = img.clone();
                let c = o.channels();
                for px in o.data_mut().chunks_exact_mut(c) {
                    let hit: f64 = rng.random();
                    if hit < rate {
                        let salt: bool = rng.random();
                        px.fill(if salt { 1.0 } else { 0.0 });
                    }
                }
                o
            }
            Distortion::SpeckleNoise { variance } => {
                let mut o = img.clone();
                if variance > 0.0 {
                    let n = Normal::new(0.0, variance.sqrt()).expect("variance validated");
                    o.data_mut()
                        .iter_mut()
                        .for_each(|v| *v *= 1.0 + n.sample(rng));
                }
                o
            }
            Distortion::ColorShift { max_offset } => {
                let c = img.channels();
                let offsets: Vec<f64> = (0..c)
                    .map(|_| uniform_sym(rng, max_offset))
                    .collect();
                let mut o = img.clone();
                for px in o.data_mut().chunks_exact_mut(c) {
                    px.iter_mut().zip(&offsets).for_each(|(v, d)| *v += d);
                }
                o
            }
            Distortion::ColorJitter { band } => {
                let c = img.channels();
                let gains: Vec<f64> = (0..c).map(|_| 1.0 + uniform_sym(rng, band)).collect();
                let sat = 1.0 + uniform_sym(rng, band);
                let mut o = img.clone();
                for px in o.data_mut().chunks_exact_mut(c) {
                    px.iter_mut().zip(&gains).for_each(|(v, g)| *v *= g);
                    if c == 3 {
                        let gray: f64 = px.iter().zip(LUMA).map(|(v, w)| v * w).sum();
                        px.iter_mut().for_each(|v| *v = gray + sat * (*v - gray));
                    }
                }
                o
            }
            Distortion::Moire { amplitude } => {
                let u = rng.random_range(0.05..=0.45);
                let v = rng.random_range(0.05..=0.45);
                let phase = rng.random_range(0.0..2.0 * PI);
                let mut o = img.clone();
                let c = o.channels();
                for y in 0..o.height() {
                    for x in 0..o.width() {
                        let d = amplitude
                            * (2.0 * PI * (u * x as f64 + v * y as f64) + phase).sin();
                        for ch in 0..c {
                            let i = o.index(x, y, ch);
                            o.data_mut()[i] += d;
                        }
                    }
                }
                o
            }
            Distortion::ToneCurve { gain } => {
                let norm = (gain / 2.0).tanh();
                map_pixels(img, |v| 0.5 + 0.5 * (gain * (v - 0.5)).tanh() / norm)
            }
            Distortion::Gamma { gamma } => map_pixels(img, |v| v.powf(gamma)),
            Distortion::Jpeg { quality } => jpeg_compress(img, quality)?,
            Distortion::Quantize { bits } => {
                let top = ((1u32 << bits) - 1) as f64;
                map_pixels(img, |v| (v * top).round() / top)
            }
            Distortion::SpatialJitter { max_shift } => {
                let (w, c) = (img.width(), img.channels());
                let m = max_shift as i64;
                let mut o = img.clone();
                for y in 0..img.height() {
                    let off = rng.random_range(-m..=m);
                    let src = img.row(y);
                    let start = o.index(0, y, 0);
                    let dst = &mut o.data_mut()[start..start + w * c];
                    for x in 0..w {
                        let sx = (x as i64 - off).rem_euclid(w as i64) as usize;
                        dst[x * c..(x + 1) * c].copy_from_slice(&src[sx * c..(sx + 1) * c]);
                    }
                }
                o
            }
        };
        out.clamp_unit();
        Ok(out)
    }
}

fn uniform_sym<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.random_range(-half_width..=half_width)
    }
}

fn map_pixels(img: &Image, f: impl Fn(f64) -> f64) -> Image {
    let mut o = img.clone();
    o.data_mut().iter_mut().for_each(|v| *v = f(*v));
    o
}

/// Horizontal then vertical pass with a centered kernel; edges replicate.
fn convolve_separable(img: &Image, k: &[f64]) -> Image {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let half = (k.len() / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = img.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let sx = clampi(x as isize + t as isize - half, w);
                    acc += kv * img.get(sx, y, ch);
                }
                tmp.set(x, y, ch, acc);
            }
        }
    }
    let mut out = tmp.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let sy = clampi(y as isize + t as isize - half, h);
                    acc += kv * tmp.get(x, sy, ch);
                }
                out.set(x, y, ch, acc);
            }
        }
    }
    out
}

fn disc_blur(img: &Image, radius: f64) -> Image {
    let r = radius.floor() as isize;
    let taps: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| ((dx * dx + dy * dy) as f64) <= radius * radius)
        .collect();
    let wgt = 1.0 / taps.len() as f64;
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let acc: f64 = taps
                    .iter()
                    .map(|&(dx, dy)| {
                        img.get(clampi(x as isize + dx, w), clampi(y as isize + dy, h), ch)
                    })
                    .sum();
                out.set(x, y, ch, acc * wgt);
            }
        }
    }
    out
}
