//! Binary PNM (P5 gray, P6 RGB) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Raw 8-bit raster, channel-interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub data: Vec<u8>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Reads the next whitespace-separated header token, skipping `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err("pnm: truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn parse_number(tok: &[u8], what: &str) -> Result<usize> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(format!("pnm: bad {what} {:?}", String::from_utf8_lossy(tok))))
}

impl Pnm {
    pub fn parse(bytes: &[u8]) -> Result<Pnm> {
        let mut pos = 0;
        let magic = next_token(bytes, &mut pos)?;
        let channels = match magic {
            b"P5" => 1,
            b"P6" => 3,
            other => {
                return Err(format_err(format!(
                    "pnm: unsupported magic {:?}; only binary P5/P6 are read",
                    String::from_utf8_lossy(other)
                )))
            }
        };
        let width = parse_number(next_token(bytes, &mut pos)?, "width")?;
        let height = parse_number(next_token(bytes, &mut pos)?, "height")?;
        let maxval = parse_number(next_token(bytes, &mut pos)?, "maxval")?;
        if maxval != 255 {
            return Err(format_err(format!("pnm: maxval {maxval}, only 255 is supported")));
        }
        if width == 0 || height == 0 {
            return Err(format_err("pnm: empty image"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let len = width * height * channels;
        if bytes.len() < pos + len {
            return Err(format_err(format!(
                "pnm: truncated payload, expected {len} bytes, found {}",
                bytes.len().saturating_sub(pos)
            )));
        }
        Ok(Pnm { width, height, channels, data: bytes[pos..pos + len].to_vec() })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Pnm> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Pnm::parse(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// `(1, C, H, W)` tensor with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (c, h, w) = (self.channels, self.height, self.width);
        Tensor::from_fn(Shape::new(1, c, h, w), |[_, ch, y, x]| self.data[(y * w + x) * c + ch] as f32 / 255.0)
    }

    /// Encodes the first batch item of a 1- or 3-channel tensor as
    /// `round(clamp(v, 0, 1) * 255)`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Pnm> {
        let s = t.shape();
        if s.c != 1 && s.c != 3 {
            return Err(Error::Shape(format!("pnm: need 1 or 3 channels, got {s}")));
        }
        let mut data = Vec::with_capacity(s.c * s.h * s.w);
        for y in 0..s.h {
            for x in 0..s.w {
                for ch in 0..s.c {
                    data.push(to_byte(t.at(0, ch, y, x)));
                }
            }
        }
        Ok(Pnm { width: s.w, height: s.h, channels: s.c, data })
    }
}

pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB image as a `(1, 3, H, W)` tensor in `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let p = Pnm::read(path)?;
    if p.channels != 3 {
        return Err(format_err(format!("{}: expected a P6 image", path.display())));
    }
    Ok(p.to_tensor())
}

/// Gray mask as a binary `(1, 1, H, W)` tensor (`byte >= 128` is foreground).
pub fn read_mask(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let p = Pnm::read(path)?;
    if p.channels != 1 {
        return Err(format_err(format!("{}: expected a P5 mask", path.display())));
    }
    Ok(binarize_bytes(&p))
}

fn binarize_bytes(p: &Pnm) -> Tensor<f32> {
    Tensor::from_fn(
        Shape::new(1, 1, p.height, p.width),
        |[_, _, y, x]| {
            if p.data[y * p.width + x] >= 128 {
                1.0
            } else {
                0.0
            }
        },
    )
}

pub fn write_image(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    Pnm::from_tensor(t)?.write(path)
}

/// Writes a mask as P5 with values {0, 255}.
pub fn write_mask(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let bin = t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    Pnm::from_tensor(&bin)?.write(path)
}
