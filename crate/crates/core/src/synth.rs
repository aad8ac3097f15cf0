//! Synthetic two-class corpus: smooth scenes, with the fake class carrying a
//! faint horizontal stripe pattern.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::data::{Split, FAKE, REAL};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::child_rng;

pub const SYNTH_SIZE: usize = 64;
pub const WATERMARK_AMPLITUDE: f64 = 0.08;
pub const WATERMARK_PERIOD: f64 = 16.0;

/// Scene values stay inside this band so the watermark never clips.
const LO: f64 = 0.1;
const HI: f64 = 0.9;

/// The clean scene for pair `i`.
pub fn base_image(seed: u64, i: usize) -> Image {
    let mut rng = child_rng(seed, i as u64);
    let s = SYNTH_SIZE as f64;
    let mut grad = [[0.0; 3]; 3];
    for g in &mut grad {
        *g = [
            rng.random_range(0.3..0.7),
            rng.random_range(-0.3..0.3) / s,
            rng.random_range(-0.3..0.3) / s,
        ];
    }
    let shapes: Vec<(bool, f64, f64, f64, f64, [f64; 3])> = (0..rng.random_range(1..=4))
        .map(|_| {
            (
                rng.random::<bool>(),
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(4.0..18.0),
                rng.random_range(4.0..18.0),
                [
                    rng.random_range(0.15..0.85),
                    rng.random_range(0.15..0.85),
                    rng.random_range(0.15..0.85),
                ],
            )
        })
        .collect();
    Image::from_fn(SYNTH_SIZE, SYNTH_SIZE, 3, |x, y, c| {
        let (xf, yf) = (x as f64, y as f64);
        let mut v = grad[c][0] + grad[c][1] * xf + grad[c][2] * yf;
        for &(circle, cx, cy, a, b, col) in &shapes {
            let inside = if circle {
                (xf - cx).powi(2) + (yf - cy).powi(2) <= a * a
            } else {
                (xf - cx).abs() <= a && (yf - cy).abs() <= b
            };
            if inside {
                v = col[c];
            }
        }
        v.clamp(LO, HI)
    })
}

pub fn watermark(y: usize) -> f64 {
    WATERMARK_AMPLITUDE * (2.0 * PI * y as f64 / WATERMARK_PERIOD).sin()
}

pub fn add_watermark(img: &Image) -> Image {
    Image::from_fn(img.width(), img.height(), img.channels(), |x, y, c| {
        (img.get(x, y, c) + watermark(y)).clamp(0.0, 1.0)
    })
}

/// Energy at the watermark's vertical frequency: squared projections of the
/// mean-removed rows onto sin and cos, averaged over columns and channels.
pub fn band_energy(img: &Image) -> f64 {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut total = 0.0;
    for c in 0..ch {
        for x in 0..w {
            let mean = (0..h).map(|y| img.get(x, y, c)).sum::<f64>() / h as f64;
            let (mut s, mut k) = (0.0, 0.0);
            for y in 0..h {
                let t = 2.0 * PI * y as f64 / WATERMARK_PERIOD;
                let v = img.get(x, y, c) - mean;
                s += v * t.sin();
                k += v * t.cos();
            }
            total += s * s + k * k;
        }
    }
    total / (w * ch) as f64
}

/// Writes `n` real and `n` fake images plus `manifest.csv`; returns the
/// manifest path.
pub fn generate(n: usize, out_dir: &Path, seed: u64, split: Split) -> Result<PathBuf> {
    if n < 2 {
        return Err(Error::Contract(format!("synth needs n >= 2, got {n}")));
    }
    for sub in ["real", "fake"] {
        let p = out_dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    (0..n).into_par_iter().try_for_each(|i| -> Result<()> {
        let real = base_image(seed, i);
        let fake = add_watermark(&real);
        real.save_ppm(&out_dir.join(format!("real/{i:05}.ppm")))?;
        fake.save_ppm(&out_dir.join(format!("fake/{i:05}.ppm")))
    })?;
    let tag = split.name();
    let mut csv = String::from("path,label,split\n");
    for i in 0..n {
        let _ = writeln!(csv, "real/{i:05}.ppm,{REAL},{tag}");
        let _ = writeln!(csv, "fake/{i:05}.ppm,{FAKE},{tag}");
    }
    let manifest = out_dir.join("manifest.csv");
    std::fs::write(&manifest, csv).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_unclipped() {
        let a = base_image(3, 11);
        assert_eq!(a, base_image(3, 11));
        assert_ne!(a, base_image(3, 12));
        assert!(a.data().iter().all(|v| (LO..=HI).contains(v)));
        let f = add_watermark(&a);
        for y in 0..SYNTH_SIZE {
            assert!((f.get(5, y, 1) - a.get(5, y, 1) - watermark(y)).abs() < 1e-15);
        }
    }

    #[test]
    fn fakes_carry_more_band_energy_for_every_pair() {
        for i in 0..200 {
            let r = base_image(1, i);
            let f = add_watermark(&r);
            assert!(band_energy(&f) > band_energy(&r), "pair {i}");
        }
    }

    #[test]
    fn band_energy_of_pure_watermark_matches_closed_form() {
        let flat = Image::filled(SYNTH_SIZE, SYNTH_SIZE, 3, 0.5);
        assert!(band_energy(&flat) < 1e-20);
        // sum over 64 rows of (a sin t)^2 = 32 a^2, cos term vanishes
        let want = (32.0 * WATERMARK_AMPLITUDE).powi(2);
        assert!((band_energy(&add_watermark(&flat)) - want).abs() < 1e-12);
    }

    #[test]
    fn generate_writes_manifest_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(3, dir.path(), 5, Split::Train).unwrap();
        let idx = crate::data::load_manifest(&m, None).unwrap();
        assert_eq!(idx.len(), 6);
        let img = idx.load_image(1).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64));
        let want = add_watermark(&base_image(5, 0));
        for (a, b) in img.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
