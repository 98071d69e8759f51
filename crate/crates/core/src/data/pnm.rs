//! Binary PPM (P6) and PGM (P5) codecs, 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A decoded 8-bit raster, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height * channels, "raster size");
        Self {
            width,
            height,
            channels,
            pixels,
        }
    }

    /// Values scaled to `[0, 1]`, shaped `[H, W, channels]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::new(&[self.height, self.width, self.channels], data).expect("raster shape")
    }

    /// Quantizes a `[H, W, C]` tensor in `[0, 1]` (values are clamped).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w, c) = match *t.shape() {
            [h, w] => (h, w, 1),
            [h, w, c] => (h, w, c),
            _ => return Err(Error::shape("raster", format!("expected [H,W] or [H,W,C], got {:?}", t.shape()))),
        };
        let pixels = t.data().iter().map(|&v| quantize(v)).collect();
        Ok(Self::new(w, h, c, pixels))
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = match r.channels {
        1 => "P5",
        3 => "P6",
        c => panic!("no PNM variant for {c} channels"),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.pixels);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

/// Decodes P5 or P6 with maxval 255.
pub fn decode(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM/PPM (expected P5 or P6)".into()),
    };
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number().ok_or("bad width")?;
    let height = c.number().ok_or("bad height")?;
    let maxval = c.number().ok_or("bad maxval")?;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (need 255)"));
    }
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    let start = c.pos + 1;
    let len = width * height * channels;
    let raster = bytes
        .get(start..start + len)
        .ok_or_else(|| format!("truncated raster: need {len} bytes, have {}", bytes.len().saturating_sub(start)))?;
    Ok(Raster::new(width, height, channels, raster.to_vec()))
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|d| Error::format(path, d))
}

pub fn write(path: &Path, r: &Raster) -> Result<()> {
    fs::write(path, encode(r)).map_err(|e| Error::io(path, e))
}

/// Reads a color image as `[H, W, 3]` in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let r = read(path)?;
    if r.channels != 3 {
        return Err(Error::format(path, "expected a color PPM (P6)"));
    }
    Ok(r.to_tensor())
}

/// Reads a grayscale mask as `[H, W]` with nonzero pixels mapped to 1.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let r = read(path)?;
    if r.channels != 1 {
        return Err(Error::format(path, "expected a grayscale PGM (P5)"));
    }
    let data = r.pixels.iter().map(|&p| (p != 0) as u8 as f64).collect();
    Ok(Tensor::new(&[r.height, r.width], data).expect("mask shape"))
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    write(path, &Raster::from_tensor(image)?)
}

/// Writes a 0/1 mask as a PGM with 255 for set pixels.
pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    write(path, &Raster::from_tensor(mask)?)
}
