//! 8-bit binary PGM (P5) and PPM (P6) files.
//!
//! Pixel values map linearly to `[0, 1]` as `v / maxval`; writing clamps
//! and rounds back to bytes, so read-then-write reproduces the file.

use std::fs;
use std::path::Path;

use crate::error::{Result, RfrError};
use crate::partial_conv::MaskMap;
use crate::tensor::Tensor;

/// Mask pixels at or above this byte value are valid.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    /// Interleaved row-major bytes.
    pub data: Vec<u8>,
}

fn format_err(what: &str) -> RfrError {
    RfrError::Format(format!("bad PNM file: {what}"))
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(&format!("missing or invalid {field}")))
    }
}

impl Image {
    pub fn decode(bytes: &[u8]) -> Result<Image> {
        if bytes.len() < 2 {
            return Err(format_err("too short"));
        }
        let channels = match &bytes[..2] {
            b"P5" => 1,
            b"P6" => 3,
            _ => return Err(format_err("magic is not P5 or P6")),
        };
        let mut h = Header { bytes, pos: 2 };
        let width = h.number("width")?;
        let height = h.number("height")?;
        let maxval = h.number("maxval")?;
        if maxval != 255 {
            return Err(format_err(&format!("maxval {maxval} (only 8-bit, 255, is supported)")));
        }
        // exactly one whitespace byte separates the header from the raster
        if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
            return Err(format_err("missing whitespace after maxval"));
        }
        let start = h.pos + 1;
        let len = width * height * channels;
        if bytes.len() - start != len {
            return Err(format_err(&format!(
                "raster has {} bytes, expected {len}",
                bytes.len() - start
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data: bytes[start..].to_vec(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| RfrError::io(path, e))?;
        Image::decode(&bytes).map_err(|e| match e {
            RfrError::Format(m) => RfrError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| RfrError::io(path, e))
    }

    /// `(1, channels, height, width)` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut t = Tensor::zeros([1, c, h, w]);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    t.set(0, ch, y, x, self.data[(y * w + x) * c + ch] as f64 / 255.0);
                }
            }
        }
        t
    }

    /// Batch item `n` of a 1- or 3-channel tensor, clamped to `[0, 1]`.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Image> {
        let s = t.shape();
        if s.c() != 1 && s.c() != 3 {
            return Err(crate::error::dim_err!("images need 1 or 3 channels, got {}", s.c()));
        }
        let (c, h, w) = (s.c(), s.h(), s.w());
        let mut data = vec![0u8; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = t.at(n, ch, y, x);
                    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                    data[(y * w + x) * c + ch] = (v * 255.0).round() as u8;
                }
            }
        }
        Ok(Image {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }

    /// Valid where the (channel-averaged) byte value is at least 128.
    pub fn to_mask(&self) -> MaskMap {
        let (c, w) = (self.channels, self.width);
        MaskMap::from_fn(1, self.height, w, |_, y, x| {
            let sum: usize = (0..c).map(|ch| self.data[(y * w + x) * c + ch] as usize).sum();
            sum >= MASK_THRESHOLD as usize * c
        })
    }

    pub fn from_mask(mask: &MaskMap, n: usize) -> Result<Image> {
        Image::from_tensor(mask.tensor(), n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let img = Image::decode(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 1));
        assert_eq!(img.to_tensor().data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_magic_and_short_raster() {
        assert!(Image::decode(b"P3\n1 1\n255\n\x00").is_err());
        assert!(Image::decode(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(Image::decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn mask_threshold() {
        let img = Image {
            width: 3,
            height: 1,
            channels: 1,
            data: vec![127, 128, 255],
        };
        let m = img.to_mask();
        assert!(!m.is_valid(0, 0, 0));
        assert!(m.is_valid(0, 0, 1));
        assert!(m.is_valid(0, 0, 2));
    }
}
