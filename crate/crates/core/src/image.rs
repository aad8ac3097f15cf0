//! RGB rasters: unit-interval `f64` channels in memory, 8-bit on disk.

use std::fs;
use std::io::{BufReader, Cursor};
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved `H x W x C` raster with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Contract(format!(
                "image dims must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![height, width, channels],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Builds an image by evaluating `f(x, y, c)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn row(&self, y: usize) -> &[f64] {
        let stride = self.width * self.channels;
        &self.data[y * stride..(y + 1) * stride]
    }

    /// Clamps every sample into `[0, 1]`; NaN becomes 0.
    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
    }

    pub fn is_valid(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Sub-rectangle starting at (`left`, `top`).
    pub fn crop(&self, left: usize, top: usize, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 || left + width > self.width || top + height > self.height {
            return Err(Error::Contract(format!(
                "crop {width}x{height}+{left}+{top} outside {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for y in top..top + height {
            let start = self.index(left, y, 0);
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Image::new(width, height, c, data)
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(
            (self.width, self.height, self.channels),
            (other.width, other.height, other.channels)
        );
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Peak signal-to-noise ratio in dB on the unit scale.
    pub fn psnr(&self, other: &Image) -> f64 {
        let mse = self.mse(other);
        if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (1.0 / mse).log10()
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Image> {
        Image::new(
            width,
            height,
            channels,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    /// Binary PPM (`P6`, maxval 255). Non-RGB images are rejected.
    pub fn encode_ppm(&self) -> Result<Vec<u8>> {
        if self.channels != 3 {
            return Err(Error::Contract(format!(
                "PPM needs 3 channels, image has {}",
                self.channels
            )));
        }
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_u8());
        Ok(out)
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
        let fmt = |msg: &str| Error::Format {
            what: "ppm",
            msg: msg.to_string(),
        };
        if bytes.len() < 2 || &bytes[..2] != b"P6" {
            return Err(fmt("missing P6 magic"));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            // whitespace and comments between header fields
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(fmt("truncated header")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| fmt("bad header field"))?;
        }
        let [w, h, maxval] = fields;
        if maxval != 255 {
            return Err(fmt("only 8-bit (maxval 255) PPM is supported"));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(fmt("missing separator after header"));
        }
        pos += 1;
        let need = w
            .checked_mul(h)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| fmt("dimensions overflow"))?;
        let payload = bytes
            .get(pos..pos + need)
            .ok_or_else(|| fmt("truncated payload"))?;
        Image::from_u8(w, h, 3, payload)
    }

    /// Decodes an 8-bit PNG to RGB; alpha is dropped and gray is replicated.
    pub fn decode_png(bytes: &[u8]) -> Result<Image> {
        let fmt = |msg: String| Error::Format { what: "png", msg };
        let mut decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| fmt(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| fmt("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| fmt(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let src_c = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(fmt(format!("unsupported color type {other:?}"))),
        };
        let mut rgb = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            let line = &buf[y * info.line_size..y * info.line_size + w * src_c];
            for px in line.chunks_exact(src_c) {
                if src_c < 3 {
                    rgb.extend_from_slice(&[px[0]; 3]);
                } else {
                    rgb.extend_from_slice(&px[..3]);
                }
            }
        }
        Image::from_u8(w, h, 3, &rgb)
    }

    /// Sniffs PPM or PNG from the leading bytes.
    pub fn decode(bytes: &[u8]) -> Result<Image> {
        if bytes.starts_with(b"P6") {
            Image::decode_ppm(bytes)
        } else if bytes.starts_with(b"\x89PNG") {
            Image::decode_png(bytes)
        } else {
            Err(Error::Format {
                what: "image",
                msg: "neither PPM (P6) nor PNG".into(),
            })
        }
    }

    pub fn load(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode(&bytes).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm()?).map_err(|e| Error::io(path, e))
    }
}

/// Unit interval to 8 bits with round-half-up.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode_png(w: u32, h: u32, color: png::ColorType, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, w, h);
            enc.set_color(color);
            enc.set_depth(png::BitDepth::Eight);
            let mut wr = enc.write_header().unwrap();
            wr.write_image_data(data).unwrap();
        }
        out
    }

    #[test]
    fn ppm_header_and_payload_are_exact() {
        let img = Image::from_u8(2, 1, 3, &[0, 128, 255, 10, 20, 30]).unwrap();
        let bytes = img.encode_ppm().unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255, 10, 20, 30]);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let mut bytes = b"P6 # made by hand\n1 1\n# max\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        let img = Image::decode_ppm(&bytes).unwrap();
        assert_eq!(img.to_u8(), vec![1, 2, 3]);
    }

    #[test]
    fn ppm_rejects_truncation_and_wide_samples() {
        assert!(Image::decode_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(Image::decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
        assert!(Image::decode_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
    }

    #[test]
    fn png_rgba_drops_alpha_and_gray_expands() {
        let rgba = encode_png(2, 1, png::ColorType::Rgba, &[1, 2, 3, 9, 4, 5, 6, 9]);
        let img = Image::decode(&rgba).unwrap();
        assert_eq!(img.to_u8(), vec![1, 2, 3, 4, 5, 6]);

        let gray = encode_png(2, 1, png::ColorType::Grayscale, &[7, 200]);
        let img = Image::decode(&gray).unwrap();
        assert_eq!(img.to_u8(), vec![7, 7, 7, 200, 200, 200]);
    }

    #[test]
    fn crop_copies_the_rectangle() {
        let img = Image::from_fn(4, 3, 3, |x, y, c| (x * 100 + y * 10 + c) as f64 / 1000.0);
        let cr = img.crop(1, 1, 2, 2).unwrap();
        assert_eq!(cr.get(0, 0, 2), img.get(1, 1, 2));
        assert_eq!(cr.get(1, 1, 0), img.get(2, 2, 0));
        assert!(img.crop(3, 0, 2, 1).is_err());
    }

    proptest! {
        #[test]
        fn ppm_bytes_round_trip(w in 1usize..6, h in 1usize..6, seed in any::<u8>()) {
            let bytes: Vec<u8> = (0..w * h * 3).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let img = Image::from_u8(w, h, 3, &bytes).unwrap();
            let enc = img.encode_ppm().unwrap();
            let back = Image::decode(&enc).unwrap();
            prop_assert_eq!(back.to_u8(), bytes);
            prop_assert_eq!(back.encode_ppm().unwrap(), enc);
        }
    }
}
