//! Random crop / half-scale resize augmentation and the resampling kernels
//! it relies on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum InterpMode {
    Nearest,
    Linear,
    Cubic,
    Area,
}

impl InterpMode {
    pub const ALL: [InterpMode; 4] = [
        InterpMode::Nearest,
        InterpMode::Linear,
        InterpMode::Cubic,
        InterpMode::Area,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SizeAugConfig {
    pub enabled: bool,
    pub tgt: usize,
    #[serde(rename = "T1")]
    pub t1: f64,
    #[serde(rename = "T2")]
    pub t2: f64,
}

impl Default for SizeAugConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tgt: 224,
            t1: 0.3,
            t2: 0.3,
        }
    }
}

impl SizeAugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t1) || !(0.0..=1.0).contains(&self.t2) {
            return Err(Error::Config(format!(
                "size_aug thresholds T1={} T2={} must lie in [0, 1]",
                self.t1, self.t2
            )));
        }
        if self.tgt < 64 {
            return Err(Error::Config(format!("size_aug tgt {} must be at least 64", self.tgt)));
        }
        Ok(())
    }
}

/// Which branch ran and with what parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "branch", rename_all = "snake_case")]
pub enum AugTrace {
    Crop {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    Resize {
        width: usize,
        height: usize,
        mode: InterpMode,
    },
    Identity,
}

/// Source of the random draws made by [`random_crop_resize_with`].
pub trait AugDraws {
    /// Uniform in `[0, 1)`.
    fn unit(&mut self) -> f64;
    fn randint(&mut self, lo: usize, hi: usize) -> Result<usize>;
    fn mode(&mut self) -> InterpMode;
}

/// Adapts any rng to [`AugDraws`].
pub struct RngDraws<'a, R: Rng + ?Sized>(pub &'a mut R);

impl<R: Rng + ?Sized> AugDraws for RngDraws<'_, R> {
    fn unit(&mut self) -> f64 {
        self.0.random()
    }

    fn randint(&mut self, lo: usize, hi: usize) -> Result<usize> {
        randint(lo, hi, self.0)
    }

    fn mode(&mut self) -> InterpMode {
        InterpMode::ALL[self.0.random_range(0..InterpMode::ALL.len())]
    }
}

/// Uniform on `[lo, hi)`; `lo` when the range is empty.
pub fn randint<R: Rng + ?Sized>(lo: usize, hi: usize, rng: &mut R) -> Result<usize> {
    match lo.cmp(&hi) {
        std::cmp::Ordering::Greater => Err(Error::Contract(format!("randint({lo}, {hi}) with lo > hi"))),
        std::cmp::Ordering::Equal => Ok(lo),
        std::cmp::Ordering::Less => Ok(rng.random_range(lo..hi)),
    }
}

pub fn random_crop_resize<R: Rng + ?Sized>(
    img: &Image,
    cfg: &SizeAugConfig,
    rng: &mut R,
) -> Result<(Image, AugTrace)> {
    random_crop_resize_with(img, cfg, &mut RngDraws(rng))
}

pub fn random_crop_resize_with(
    img: &Image,
    cfg: &SizeAugConfig,
    draws: &mut dyn AugDraws,
) -> Result<(Image, AugTrace)> {
    cfg.validate()?;
    let (h, w, tgt) = (img.height(), img.width(), cfg.tgt);
    let r_c = draws.unit();
    let r_r = draws.unit();
    if r_c < cfg.t1 {
        let r = draws.unit();
        let h_new = if h >= tgt && r < cfg.t2 {
            draws.randint(64, tgt)?
        } else if h >= tgt {
            draws.randint(tgt, h)?
        } else {
            h
        };
        let w_new = if w >= tgt && r < cfg.t2 {
            draws.randint(32, tgt)?
        } else if w >= tgt {
            draws.randint(tgt, w)?
        } else {
            w
        };
        let top = draws.randint(0, h_new.saturating_sub(tgt))?;
        let left = draws.randint(0, w_new.saturating_sub(tgt))?;
        let (ch, cw) = (h_new.min(tgt), w_new.min(tgt));
        let out = img.crop(left, top, cw, ch)?;
        Ok((
            out,
            AugTrace::Crop {
                top,
                left,
                height: ch,
                width: cw,
            },
        ))
    } else if r_r < 0.25 {
        let mode = draws.mode();
        let (nw, nh) = ((w / 2).max(1), (h / 2).max(1));
        Ok((
            resize(img, nw, nh, mode)?,
            AugTrace::Resize {
                width: nw,
                height: nh,
                mode,
            },
        ))
    } else {
        Ok((img.clone(), AugTrace::Identity))
    }
}

/// Sparse resampling weights for one axis: `(source index, weight)` per output.
fn axis_weights(src: usize, dst: usize, mode: InterpMode) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    let clampi = |i: isize| i.clamp(0, src as isize - 1) as usize;
    (0..dst)
        .map(|d| match mode {
            InterpMode::Nearest => {
                let s = (((d as f64 + 0.5) * scale).floor() as usize).min(src - 1);
                vec![(s, 1.0)]
            }
            InterpMode::Linear => {
                let c = (d as f64 + 0.5) * scale - 0.5;
                let i0 = c.floor();
                let t = c - i0;
                let i0 = i0 as isize;
                vec![(clampi(i0), 1.0 - t), (clampi(i0 + 1), t)]
            }
            InterpMode::Cubic => {
                let c = (d as f64 + 0.5) * scale - 0.5;
                let i0 = c.floor();
                let t = c - i0;
                let i0 = i0 as isize;
                (-1..=2)
                    .map(|o| (clampi(i0 + o), catmull_rom((t - o as f64).abs())))
                    .collect()
            }
            InterpMode::Area => {
                let (lo, hi) = (d as f64 * scale, (d + 1) as f64 * scale);
                let mut taps = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < src {
                    let cover = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    if cover > 0.0 {
                        taps.push((i, cover / scale));
                    }
                    i += 1;
                }
                taps
            }
        })
        .collect()
}

fn catmull_rom(x: f64) -> f64 {
    const A: f64 = -0.5;
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Separable resize to `w x h`; output channels are clamped to `[0, 1]`.
pub fn resize(img: &Image, w: usize, h: usize, mode: InterpMode) -> Result<Image> {
    if w == 0 || h == 0 {
        return Err(Error::Contract(format!("resize target {w}x{h} must be positive")));
    }
    let c = img.channels();
    let (sw, sh) = (img.width(), img.height());
    let wx = axis_weights(sw, w, mode);
    let wy = axis_weights(sh, h, mode);
    let src = img.data();
    // horizontal pass: sh x w
    let mut tmp = vec![0.0; sh * w * c];
    for y in 0..sh {
        for (x, taps) in wx.iter().enumerate() {
            for ch in 0..c {
                tmp[(y * w + x) * c + ch] = taps.iter().map(|&(s, wt)| wt * src[(y * sw + s) * c + ch]).sum();
            }
        }
    }
    let mut out = vec![0.0; h * w * c];
    for (y, taps) in wy.iter().enumerate() {
        for x in 0..w {
            for ch in 0..c {
                out[(y * w + x) * c + ch] = taps.iter().map(|&(s, wt)| wt * tmp[(s * w + x) * c + ch]).sum();
            }
        }
    }
    let mut img = Image::new(w, h, c, out)?;
    img.clamp_unit();
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    /// Replays fixed draws; panics when a draw is missing.
    struct Scripted {
        units: Vec<f64>,
        ints: Vec<usize>,
    }

    impl AugDraws for Scripted {
        fn unit(&mut self) -> f64 {
            self.units.remove(0)
        }
        fn randint(&mut self, lo: usize, hi: usize) -> Result<usize> {
            if lo >= hi {
                return Ok(lo);
            }
            let v = self.ints.remove(0);
            assert!((lo..hi).contains(&v));
            Ok(v)
        }
        fn mode(&mut self) -> InterpMode {
            InterpMode::Area
        }
    }

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 3, |x, y, c| ((x * 31 + y * 17 + c * 7) % 256) as f64 / 255.0)
    }

    #[test]
    fn no_branch_leaves_image_alone() {
        let img = ramp(40, 30);
        let mut d = Scripted { units: vec![0.5, 0.5], ints: vec![] };
        let (out, trace) = random_crop_resize_with(&img, &SizeAugConfig::default(), &mut d).unwrap();
        assert_eq!(trace, AugTrace::Identity);
        assert_eq!(out, img);
    }

    #[test]
    fn small_image_crop_keeps_full_extent() {
        let img = ramp(150, 100);
        // r=0.9 >= T2 but both dims are below tgt, so no size draws happen
        let mut d = Scripted { units: vec![0.1, 0.9, 0.9], ints: vec![] };
        let (out, trace) = random_crop_resize_with(&img, &SizeAugConfig::default(), &mut d).unwrap();
        assert_eq!(trace, AugTrace::Crop { top: 0, left: 0, height: 100, width: 150 });
        assert_eq!(out, img);
    }

    #[test]
    fn pinned_small_crop_trace() {
        let img = ramp(512, 512);
        let mut d = Scripted { units: vec![0.1, 0.9, 0.1], ints: vec![120, 90] };
        let (out, trace) = random_crop_resize_with(&img, &SizeAugConfig::default(), &mut d).unwrap();
        assert_eq!(trace, AugTrace::Crop { top: 0, left: 0, height: 120, width: 90 });
        assert_eq!((out.width(), out.height()), (90, 120));
        assert_eq!(out, img.crop(0, 0, 90, 120).unwrap());
    }

    #[test]
    fn large_crop_is_offset_and_capped_at_tgt() {
        let img = ramp(512, 400);
        // H_new=300, W_new=500, top=50, left=10
        let mut d = Scripted { units: vec![0.0, 0.0, 0.99], ints: vec![300, 500, 50, 10] };
        let (out, trace) = random_crop_resize_with(&img, &SizeAugConfig::default(), &mut d).unwrap();
        assert_eq!(trace, AugTrace::Crop { top: 50, left: 10, height: 224, width: 224 });
        assert_eq!(out, img.crop(10, 50, 224, 224).unwrap());
    }

    #[test]
    fn resize_branch_halves_with_floor() {
        let img = ramp(75, 33);
        let mut d = Scripted { units: vec![0.9, 0.1], ints: vec![] };
        let (out, trace) = random_crop_resize_with(&img, &SizeAugConfig::default(), &mut d).unwrap();
        assert_eq!(trace, AugTrace::Resize { width: 37, height: 16, mode: InterpMode::Area });
        assert_eq!((out.width(), out.height()), (37, 16));
    }

    #[test]
    fn randint_bounds_and_degenerate_range() {
        let mut rng = rng_from_seed(3);
        assert_eq!(randint(0, 0, &mut rng).unwrap(), 0);
        assert!(randint(5, 4, &mut rng).is_err());
        let mut counts = [0usize; 160];
        for _ in 0..100_000 {
            counts[randint(64, 224, &mut rng).unwrap() - 64] += 1;
        }
        assert!(counts[0] > 0 && counts[159] > 0);
        let expect = 100_000.0 / 160.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // chi-square with 159 dof: p = 0.001 at roughly 219
        assert!(chi2 < 219.0, "chi2 {chi2}");
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = ramp(13, 9);
        for mode in InterpMode::ALL {
            let out = resize(&img, 13, 9, mode).unwrap();
            let worst = img.data().iter().zip(out.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if mode == InterpMode::Nearest {
                assert_eq!(out, img);
            } else {
                assert!(worst <= 1e-12, "{mode:?} {worst}");
            }
        }
    }

    #[test]
    fn area_of_checker_is_mean() {
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize(&img, 1, 1, InterpMode::Area).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn nearest_uses_half_pixel_mapping() {
        let img = Image::from_fn(4, 4, 1, |x, y, _| (y * 4 + x) as f64 / 15.0);
        let out = resize(&img, 2, 2, InterpMode::Nearest).unwrap();
        // dst d -> src floor((d + 0.5) * 2) = 1, 3
        let want: Vec<f64> = [(1, 1), (3, 1), (1, 3), (3, 3)]
            .iter()
            .map(|&(x, y)| img.get(x, y, 0))
            .collect();
        assert_eq!(out.data(), &want[..]);
    }

    #[test]
    fn linear_halving_averages_pairs() {
        let img = ramp(8, 6);
        let out = resize(&img, 4, 3, InterpMode::Linear).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                for c in 0..3 {
                    let want = (img.get(2 * x, 2 * y, c)
                        + img.get(2 * x + 1, 2 * y, c)
                        + img.get(2 * x, 2 * y + 1, c)
                        + img.get(2 * x + 1, 2 * y + 1, c))
                        / 4.0;
                    assert!((out.get(x, y, c) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SizeAugConfig { tgt: 32, ..Default::default() }.validate().is_err());
        assert!(SizeAugConfig { t1: 1.5, ..Default::default() }.validate().is_err());
        let js = r#"{"enabled":true,"tgt":64,"T1":0.3,"T2":0.3}"#;
        let c: SizeAugConfig = serde_json::from_str(js).unwrap();
        assert_eq!(c.tgt, 64);
        assert_eq!(serde_json::to_string(&c).unwrap(), js);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn outputs_never_grow_and_crops_copy_pixels(seed in any::<u64>(), w in 1usize..160, h in 1usize..160) {
            let img = ramp(w, h);
            let cfg = SizeAugConfig { tgt: 64, ..Default::default() };
            let (out, trace) = random_crop_resize(&img, &cfg, &mut rng_from_seed(seed)).unwrap();
            prop_assert!(out.width() <= w && out.height() <= h);
            if let AugTrace::Crop { top, left, height, width } = trace {
                prop_assert!(height <= 64 && width <= 64);
                prop_assert_eq!(out, img.crop(left, top, width, height).unwrap());
            }
        }

        #[test]
        fn resize_stays_in_unit_range(w in 1usize..30, h in 1usize..30, tw in 1usize..30, th in 1usize..30, m in 0usize..4) {
            let img = ramp(w, h);
            let out = resize(&img, tw, th, InterpMode::ALL[m]).unwrap();
            prop_assert_eq!((out.width(), out.height()), (tw, th));
            prop_assert!(out.is_valid());
        }
    }
}
