//! Baseline-JPEG lossy round trip without entropy coding.
//!
//! RGB is converted to full-range BT.601 YCbCr, each plane is cut into 8x8
//! blocks (edges padded by replication), transformed with the orthonormal
//! DCT-II, quantized with the Annex K tables scaled by the IJG quality rule,
//! dequantized, inverted and converted back. No chroma subsampling.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::image::Image;

#[rustfmt::skip]
const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[rustfmt::skip]
const CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Quantization table for `quality` in `[1, 100]` (IJG scaling).
pub fn scaled_table(base: &[u16; 64], quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    out
}

/// Orthonormal 8-point DCT-II basis, `basis[u][x]`.
fn basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut t = [[0.0; 8]; 8];
        for (u, row) in t.iter_mut().enumerate() {
            let cu = if u == 0 { (0.125f64).sqrt() } else { 0.5 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = cu * (((2 * x + 1) as f64) * u as f64 * PI / 16.0).cos();
            }
        }
        t
    })
}

fn fdct(block: &[f64; 64]) -> [f64; 64] {
    let t = basis();
    let mut tmp = [0.0; 64];
    // rows
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| t[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| t[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

fn idct(coef: &[f64; 64]) -> [f64; 64] {
    let t = basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| t[u][x] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| t[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

fn roundtrip_plane(plane: &mut [f64], w: usize, h: usize, table: &[f64; 64]) {
    let src = plane.to_vec();
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut block = [0.0; 64];
            for y in 0..8 {
                let sy = (by + y).min(h - 1);
                for x in 0..8 {
                    let sx = (bx + x).min(w - 1);
                    block[y * 8 + x] = src[sy * w + sx] - 128.0;
                }
            }
            let mut coef = fdct(&block);
            for (c, q) in coef.iter_mut().zip(table) {
                *c = (*c / q).round() * q;
            }
            let back = idct(&coef);
            for y in 0..8.min(h - by) {
                for x in 0..8.min(w - bx) {
                    plane[(by + y) * w + bx + x] = back[y * 8 + x] + 128.0;
                }
            }
        }
    }
}

/// Lossy JPEG-style round trip at `quality`.
pub fn jpeg_compress(img: &Image, quality: u8) -> Result<Image> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Contract(format!("JPEG quality {quality} outside [1, 100]")));
    }
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let n = w * h;
    let luma_q = scaled_table(&LUMA_TABLE, quality);
    let mut out = img.clone();
    if c == 3 {
        let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (i, px) in img.data().chunks_exact(3).enumerate() {
            let (r, g, b) = (px[0] * 255.0, px[1] * 255.0, px[2] * 255.0);
            planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b;
            planes[1][i] = 128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
            planes[2][i] = 128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
        }
        let chroma_q = scaled_table(&CHROMA_TABLE, quality);
        roundtrip_plane(&mut planes[0], w, h, &luma_q);
        roundtrip_plane(&mut planes[1], w, h, &chroma_q);
        roundtrip_plane(&mut planes[2], w, h, &chroma_q);
        for (i, px) in out.data_mut().chunks_exact_mut(3).enumerate() {
            let (y, cb, cr) = (planes[0][i], planes[1][i] - 128.0, planes[2][i] - 128.0);
            px[0] = (y + 1.402 * cr) / 255.0;
            px[1] = (y - 0.344_136 * cb - 0.714_136 * cr) / 255.0;
            px[2] = (y + 1.772 * cb) / 255.0;
        }
    } else {
        for ch in 0..c {
            let mut plane: Vec<f64> = img.data().iter().skip(ch).step_by(c).map(|v| v * 255.0).collect();
            roundtrip_plane(&mut plane, w, h, &luma_q);
            for (i, v) in plane.into_iter().enumerate() {
                out.data_mut()[i * c + ch] = v / 255.0;
            }
        }
    }
    out.clamp_unit();
    Ok(out)
}
